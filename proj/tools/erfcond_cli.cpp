// Command-line front end: train, eval, cross-matrix, audit-params,
// synth-gen, parse-check.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "erfcond/erfcond.hpp"

namespace fs = std::filesystem;
using namespace erfcond;

namespace {

struct Shared {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "runs";
  std::string format = "markdown";
};

void add_shared(CLI::App* cmd, Shared& s, bool needs_config) {
  auto* c = cmd->add_option("--config", s.config, "experiment config (JSON)");
  if (needs_config) c->required();
  cmd->add_option("--seed", s.seed, "override the config seed");
  cmd->add_option("--out", s.out, "output directory")->capture_default_str();
  cmd->add_option("--format", s.format, "report format: csv or markdown")->capture_default_str();
}

ExperimentConfig load(const Shared& s) {
  auto cfg = s.config.empty() ? ExperimentConfig{} : load_config(s.config);
  if (s.seed) cfg.seed = *s.seed;
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path().empty() ? fs::path(".") : path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

std::string ext(ReportFormat f) { return f == ReportFormat::csv ? ".csv" : ".md"; }

int cmd_train(const Shared& s, const std::string& domain) {
  const auto fmt = parse_report_format(s.format);
  const auto cfg = load(s);
  RunOptions opt;
  opt.train_domain = domain;
  opt.out_dir = s.out;
  const auto rep = run_experiment(cfg, opt);
  const auto table = emit_report(rep, fmt);
  write_file(fs::path(s.out) / ("report" + ext(fmt)), table);
  write_file(fs::path(s.out) / "run_report.json", run_report_json(rep));
  write_file(fs::path(s.out) / "config.json", emit_config(cfg));
  std::cout << table;
  std::cout << "checkpoint: " << rep.checkpoint_path << "\n";
  return 0;
}

int cmd_eval(const Shared& s, const std::string& checkpoint, const std::string& domain) {
  const auto fmt = parse_report_format(s.format);
  const auto cfg = load(s);
  if (cfg.domains.empty()) throw ConfigError("config has no domains");
  const auto& d = domain.empty() ? cfg.domains.front() : find_domain(cfg, domain);
  CondLaneNet<float> model(cfg.model, cfg.seed);
  load_model(model, checkpoint);
  const auto data = load_domain(d, cfg.base_dir, cfg.seed);
  CellResult cell;
  cell.train_domain = fs::path(checkpoint).stem().string();
  cell.test_domain = d.name;
  cell.report = evaluate_model(model, data.test, cfg.eval.stroke_width, cfg.eval.iou_threshold);
  cell.ok = true;
  const auto table = emit_report(std::vector<CellResult>{cell}, fmt);
  write_file(fs::path(s.out) / ("eval_" + d.name + ext(fmt)), table);
  std::cout << table;
  return 0;
}

int cmd_cross(const Shared& s) {
  const auto fmt = parse_report_format(s.format);
  const auto cfg = load(s);
  const auto m = run_cross_matrix(cfg, s.out);
  const auto table = emit_report(m, fmt);
  write_file(fs::path(s.out) / ("matrix" + ext(fmt)), table);
  write_file(fs::path(s.out) / "config.json", emit_config(cfg));
  std::cout << table;
  return m.complete_success() ? 0 : 2;
}

int cmd_audit(const Shared& s) {
  const auto fmt = parse_report_format(s.format);
  const auto cfg = load(s);
  ModelConfig other = cfg.model;
  other.backbone = cfg.model.backbone.variant == BackboneVariant::erf_modified ? BackboneConfig::resnet_default()
                                                                                : BackboneConfig::erf_default();
  other.backbone.input_height = cfg.model.backbone.input_height;
  other.backbone.input_width = cfg.model.backbone.input_width;
  CondLaneNet<float> a(cfg.model, cfg.seed), b(other, cfg.seed);
  const auto rep = audit_parameters(a.registry());
  const auto cmp = compare_registries(a.registry(), b.registry(), to_string(cfg.model.backbone.variant),
                                      to_string(other.backbone.variant));
  std::ostringstream os;
  if (fmt == ReportFormat::csv) {
    os << "Tensor,Layer,Shape,Parameters\n";
    for (const auto& r : rep.per_layer) os << r.name << "," << r.layer << ",\"" << shape_str(r.shape) << "\"," << r.count << "\n";
    os << "total,,," << rep.total_params << "\n";
    os << "checkpoint_bytes,,," << rep.serialized_bytes_estimate << "\n";
    os << "\nLayer," << cmp.label_a << "," << cmp.label_b << "\n";
    for (const auto& r : cmp.rows) os << r.layer << "," << r.count_a << "," << r.count_b << "\n";
    os << "total," << cmp.total_a << "," << cmp.total_b << "\n";
    os << "checkpoint_bytes," << cmp.bytes_a << "," << cmp.bytes_b << "\n";
    os << "byte_ratio," << cmp.byte_ratio << ",\n";
  } else {
    os << "| Tensor | Layer | Shape | Parameters |\n|---|---|---|---:|\n";
    for (const auto& r : rep.per_layer) {
      os << "| " << r.name << " | " << r.layer << " | " << shape_str(r.shape) << " | " << r.count << " |\n";
    }
    os << "| **total** | | | " << rep.total_params << " |\n";
    os << "| **checkpoint bytes** | | | " << rep.serialized_bytes_estimate << " |\n\n";
    os << cmp.to_markdown();
  }
  const auto c = census(a.layers());
  os << "\nlayers: " << c.base_layers << " base + " << c.repair_convs << " repair = " << c.total() << "\n";
  write_file(fs::path(s.out) / ("audit" + ext(fmt)), os.str());
  std::cout << os.str();
  return 0;
}

int cmd_synth(const Shared& s, SyntheticConfig sc) {
  if (s.seed) sc.seed = *s.seed;
  const auto frames = generate_synthetic(sc);
  write_culane_corpus(frames, s.out);
  std::size_t lanes = 0;
  for (const auto& f : frames) lanes += f.lanes.size();
  std::cout << "wrote " << frames.size() << " frames (" << lanes << " lanes) to " << s.out << "\n";
  return 0;
}

int cmd_parse_check(const std::string& kind, const std::string& list, const std::string& root) {
  std::vector<AnnotatedFrame> frames;
  std::vector<std::string> warnings;
  if (kind == "culane") {
    frames = parse_culane(list, root, {}, &warnings);
  } else if (kind == "curvelanes") {
    frames = parse_curvelanes(list, root);
  } else if (kind == "tusimple") {
    frames = parse_tusimple(list, root);
  } else {
    throw Error("unknown dataset kind '" + kind + "' (culane, curvelanes, tusimple)");
  }
  std::size_t lanes = 0, points = 0;
  for (const auto& f : frames) {
    lanes += f.lanes.size();
    for (const auto& l : f.lanes) points += l.points.size();
  }
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  std::cout << kind << ": " << frames.size() << " frames, " << lanes << " lanes, " << points << " points\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lane detection experiments: training, evaluation and cross-dataset analysis"};
  app.require_subcommand(1);

  Shared train_s, eval_s, cross_s, audit_s, synth_s;
  std::string train_domain, eval_domain, checkpoint;
  auto* train = app.add_subcommand("train", "train on one domain and evaluate on its test split");
  add_shared(train, train_s, true);
  train->add_option("--domain", train_domain, "training domain (default: first)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a domain's test split");
  add_shared(eval, eval_s, true);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--domain", eval_domain, "test domain (default: first)");

  auto* cross = app.add_subcommand("cross-matrix", "train per domain, test on every domain");
  add_shared(cross, cross_s, true);

  auto* audit = app.add_subcommand("audit-params", "per-layer parameter counts and checkpoint sizes");
  add_shared(audit, audit_s, false);

  SyntheticConfig sc;
  auto* synth = app.add_subcommand("synth-gen", "write a synthetic CULane-style corpus");
  add_shared(synth, synth_s, false);
  synth->add_option("--frames", sc.frames)->capture_default_str();
  synth->add_option("--lanes", sc.n_lanes)->capture_default_str();
  synth->add_option("--curvature-min", sc.curvature_min)->capture_default_str();
  synth->add_option("--curvature-max", sc.curvature_max)->capture_default_str();
  synth->add_option("--height", sc.height)->capture_default_str();
  synth->add_option("--width", sc.width)->capture_default_str();
  synth->add_option("--noise", sc.noise)->capture_default_str();

  std::string kind, list, root = ".";
  auto* parse = app.add_subcommand("parse-check", "parse an annotation set and report counts");
  parse->add_option("--kind", kind, "culane, curvelanes or tusimple")->required();
  parse->add_option("--list", list, "split list (culane, curvelanes) or label jsonl (tusimple)")->required();
  parse->add_option("--root", root, "dataset root")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(train_s, train_domain);
    if (*eval) return cmd_eval(eval_s, checkpoint, eval_domain);
    if (*cross) return cmd_cross(cross_s);
    if (*audit) return cmd_audit(audit_s);
    if (*synth) return cmd_synth(synth_s, sc);
    if (*parse) return cmd_parse_check(kind, list, root);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
