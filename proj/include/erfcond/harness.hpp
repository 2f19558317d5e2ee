#pragma once

// Experiment configuration (JSON), training/evaluation runs, the
// cross-dataset matrix and report emission.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "erfcond/checkpoint.hpp"
#include "erfcond/training.hpp"

namespace erfcond {

class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class SourceKind { synthetic, culane, curvelanes, tusimple };

inline const char* to_string(SourceKind k) {
  switch (k) {
    case SourceKind::synthetic: return "synthetic";
    case SourceKind::culane: return "culane";
    case SourceKind::curvelanes: return "curvelanes";
    case SourceKind::tusimple: return "tusimple";
  }
  return "?";
}

struct SourceConfig {
  SourceKind kind = SourceKind::synthetic;
  SyntheticConfig synthetic;
  std::string list;  // culane / curvelanes split list; tusimple label jsonl
  std::string root;  // image root
};

// A domain is either an explicit train/test pair of sources or one source
// split by `train_fraction` (frames shuffled by the experiment seed).
struct DomainConfig {
  std::string name;
  SourceConfig train;
  std::optional<SourceConfig> test;
  double train_fraction = 0.7;
};

struct EvalConfig {
  double stroke_width = 30.0;
  double iou_threshold = 0.5;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  EvalConfig eval;
  std::vector<DomainConfig> domains;
  std::string base_dir = ".";  // relative dataset paths resolve against this
};

namespace config_detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ConfigError("unknown key '" + item.key() + "' in " + where);
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline void read_synthetic(const json& j, SyntheticConfig& s, const std::string& w) {
  check_keys(j, w,
             {"kind", "frames", "n_lanes", "curvature_min", "curvature_max", "height", "width", "noise", "seed",
              "offscreen_lanes", "lane_spacing", "slope_max", "horizon", "stroke_width", "sample_step"});
  read(j, "frames", s.frames, w);
  read(j, "n_lanes", s.n_lanes, w);
  read(j, "curvature_min", s.curvature_min, w);
  read(j, "curvature_max", s.curvature_max, w);
  read(j, "height", s.height, w);
  read(j, "width", s.width, w);
  read(j, "noise", s.noise, w);
  read(j, "seed", s.seed, w);
  read(j, "offscreen_lanes", s.offscreen_lanes, w);
  read(j, "lane_spacing", s.lane_spacing, w);
  read(j, "slope_max", s.slope_max, w);
  read(j, "horizon", s.horizon, w);
  read(j, "stroke_width", s.stroke_width, w);
  read(j, "sample_step", s.sample_step, w);
  try {
    validate(s);
  } catch (const Error& e) {
    throw ConfigError(w + ": " + e.what());
  }
}

inline SourceConfig read_source(const json& j, const std::string& w) {
  SourceConfig s;
  if (!j.is_object() || !j.contains("kind")) throw ConfigError(w + ": missing required field 'kind'");
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "synthetic") {
    s.kind = SourceKind::synthetic;
    read_synthetic(j, s.synthetic, w);
    return s;
  }
  if (kind == "culane") {
    s.kind = SourceKind::culane;
  } else if (kind == "curvelanes") {
    s.kind = SourceKind::curvelanes;
  } else if (kind == "tusimple") {
    s.kind = SourceKind::tusimple;
  } else {
    throw ConfigError(w + ": unknown source kind '" + kind + "'");
  }
  check_keys(j, w, {"kind", "list", "root"});
  if (!j.contains("list")) throw ConfigError(w + ": missing required field 'list'");
  read(j, "list", s.list, w);
  read(j, "root", s.root, w);
  return s;
}

inline json write_source(const SourceConfig& s) {
  json j{{"kind", to_string(s.kind)}};
  if (s.kind == SourceKind::synthetic) {
    const auto& c = s.synthetic;
    j["frames"] = c.frames;
    j["n_lanes"] = c.n_lanes;
    j["curvature_min"] = c.curvature_min;
    j["curvature_max"] = c.curvature_max;
    j["height"] = c.height;
    j["width"] = c.width;
    j["noise"] = c.noise;
    j["seed"] = c.seed;
    j["offscreen_lanes"] = c.offscreen_lanes;
    j["lane_spacing"] = c.lane_spacing;
    j["slope_max"] = c.slope_max;
    j["horizon"] = c.horizon;
    j["stroke_width"] = c.stroke_width;
    j["sample_step"] = c.sample_step;
  } else {
    j["list"] = s.list;
    j["root"] = s.root;
  }
  return j;
}

}  // namespace config_detail

// Parses and validates a config document; every omitted field takes its
// default. Unknown keys are rejected by name.
inline ExperimentConfig parse_config(const std::string& text, const std::string& base_dir = ".") {
  using config_detail::check_keys;
  using config_detail::read;
  using nlohmann::json;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  c.base_dir = base_dir;
  check_keys(j, "config", {"seed", "model", "train", "eval", "domains"});
  if (!j.contains("seed")) throw ConfigError("config: missing required field 'seed'");
  read(j, "seed", c.seed, "config");

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model", {"backbone", "head"});
    if (m.contains("backbone")) {
      const auto& b = m.at("backbone");
      const std::string w = "model.backbone";
      check_keys(b, w,
                 {"variant", "width_multiplier", "stage_channels", "blocks_per_stage", "input_height", "input_width",
                  "extra_blocks", "extra_deconvs", "extra_down_up", "dropout_low", "dropout_high"});
      auto& bc = c.model.backbone;
      if (b.contains("variant")) {
        try {
          bc.variant = parse_backbone_variant(b.at("variant").get<std::string>());
        } catch (const Error& e) {
          throw ConfigError(w + ".variant: " + e.what());
        }
      }
      read(b, "width_multiplier", bc.width_multiplier, w);
      read(b, "stage_channels", bc.stage_channels, w);
      read(b, "blocks_per_stage", bc.blocks_per_stage, w);
      read(b, "input_height", bc.input_height, w);
      read(b, "input_width", bc.input_width, w);
      read(b, "extra_blocks", bc.extra_blocks, w);
      read(b, "extra_deconvs", bc.extra_deconvs, w);
      if (b.contains("extra_down_up")) {
        std::vector<int> du;
        read(b, "extra_down_up", du, w);
        if (du.size() != 2) throw ConfigError(w + ".extra_down_up: expected [down, up]");
        bc.extra_down = du[0];
        bc.extra_up = du[1];
      }
      read(b, "dropout_low", bc.dropout_low, w);
      read(b, "dropout_high", bc.dropout_high, w);
      try {
        validate(bc);
      } catch (const Error& e) {
        throw ConfigError(e.what());
      }
      if (bc.input_height % 16 != 0 || bc.input_width % 16 != 0) {
        throw ConfigError(w + ": input geometry must be divisible by 16");
      }
    }
    if (m.contains("head")) {
      const auto& h = m.at("head");
      const std::string w = "model.head";
      check_keys(h, w, {"hidden_channels", "shape_channels", "proposal_threshold", "nms_kernel", "heatmap_prior"});
      auto& hc = c.model.head;
      read(h, "hidden_channels", hc.hidden_channels, w);
      read(h, "shape_channels", hc.shape_channels, w);
      read(h, "proposal_threshold", hc.proposal_threshold, w);
      read(h, "nms_kernel", hc.nms_kernel, w);
      read(h, "heatmap_prior", hc.heatmap_prior, w);
    }
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    const std::string w = "train";
    check_keys(t, w,
               {"iterations", "batch_size", "learning_rate", "beta1", "beta2", "eps", "loss_weights", "hflip",
                "sigma"});
    auto& tc = c.train;
    read(t, "iterations", tc.iterations, w);
    read(t, "batch_size", tc.batch_size, w);
    read(t, "learning_rate", tc.adam.learning_rate, w);
    read(t, "beta1", tc.adam.beta1, w);
    read(t, "beta2", tc.adam.beta2, w);
    read(t, "eps", tc.adam.eps, w);
    read(t, "hflip", tc.hflip, w);
    read(t, "sigma", tc.sigma, w);
    if (t.contains("loss_weights")) {
      const auto& lw = t.at("loss_weights");
      check_keys(lw, "train.loss_weights", {"heatmap", "location", "range"});
      read(lw, "heatmap", tc.weights.heatmap, "train.loss_weights");
      read(lw, "location", tc.weights.location, "train.loss_weights");
      read(lw, "range", tc.weights.range, "train.loss_weights");
    }
    if (tc.iterations < 0 || tc.batch_size < 1 || !(tc.adam.learning_rate > 0.0) || !(tc.sigma > 0.0)) {
      throw ConfigError("train: iterations >= 0, batch_size >= 1, learning_rate > 0 and sigma > 0 required");
    }
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, "eval", {"stroke_width", "iou_threshold"});
    read(e, "stroke_width", c.eval.stroke_width, "eval");
    read(e, "iou_threshold", c.eval.iou_threshold, "eval");
    if (!(c.eval.stroke_width > 0.0) || !(c.eval.iou_threshold > 0.0 && c.eval.iou_threshold <= 1.0)) {
      throw ConfigError("eval: stroke_width > 0 and iou_threshold in (0,1] required");
    }
  }

  if (j.contains("domains")) {
    const auto& ds = j.at("domains");
    if (!ds.is_array()) throw ConfigError("domains: expected an array");
    std::set<std::string> names;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& d = ds[i];
      const std::string w = "domains[" + std::to_string(i) + "]";
      check_keys(d, w, {"name", "train", "test", "source", "train_fraction"});
      DomainConfig dc;
      if (!d.contains("name")) throw ConfigError(w + ": missing required field 'name'");
      read(d, "name", dc.name, w);
      if (!names.insert(dc.name).second) throw ConfigError(w + ": duplicate domain name '" + dc.name + "'");
      if (d.contains("source")) {
        if (d.contains("train") || d.contains("test")) {
          throw ConfigError(w + ": give either 'source' (ratio split) or 'train' and 'test'");
        }
        dc.train = config_detail::read_source(d.at("source"), w + ".source");
        read(d, "train_fraction", dc.train_fraction, w);
        if (!(dc.train_fraction > 0.0 && dc.train_fraction < 1.0)) {
          throw ConfigError(w + ".train_fraction must lie in (0,1)");
        }
      } else {
        if (!d.contains("train")) throw ConfigError(w + ": missing required field 'train'");
        if (!d.contains("test")) throw ConfigError(w + ": missing required field 'test'");
        if (d.contains("train_fraction")) throw ConfigError(w + ": train_fraction needs 'source'");
        dc.train = config_detail::read_source(d.at("train"), w + ".train");
        dc.test = config_detail::read_source(d.at("test"), w + ".test");
      }
      c.domains.push_back(std::move(dc));
    }
  }
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const auto dir = path.has_parent_path() ? path.parent_path().string() : std::string(".");
  return parse_config(ss.str(), dir);
}

// Canonical JSON with every field spelled out; parse_config(emit_config(c))
// reproduces c.
inline std::string emit_config(const ExperimentConfig& c) {
  using nlohmann::json;
  const auto& b = c.model.backbone;
  const auto& h = c.model.head;
  json j;
  j["seed"] = c.seed;
  j["model"]["backbone"] = {{"variant", to_string(b.variant)},
                            {"width_multiplier", b.width_multiplier},
                            {"stage_channels", b.stage_channels},
                            {"blocks_per_stage", b.blocks_per_stage},
                            {"input_height", b.input_height},
                            {"input_width", b.input_width},
                            {"extra_blocks", b.extra_blocks},
                            {"extra_deconvs", b.extra_deconvs},
                            {"extra_down_up", {b.extra_down, b.extra_up}},
                            {"dropout_low", b.dropout_low},
                            {"dropout_high", b.dropout_high}};
  j["model"]["head"] = {{"hidden_channels", h.hidden_channels},
                        {"shape_channels", h.shape_channels},
                        {"proposal_threshold", h.proposal_threshold},
                        {"nms_kernel", h.nms_kernel},
                        {"heatmap_prior", h.heatmap_prior}};
  const auto& t = c.train;
  j["train"] = {{"iterations", t.iterations},
                {"batch_size", t.batch_size},
                {"learning_rate", t.adam.learning_rate},
                {"beta1", t.adam.beta1},
                {"beta2", t.adam.beta2},
                {"eps", t.adam.eps},
                {"hflip", t.hflip},
                {"sigma", t.sigma},
                {"loss_weights",
                 {{"heatmap", t.weights.heatmap}, {"location", t.weights.location}, {"range", t.weights.range}}}};
  j["eval"] = {{"stroke_width", c.eval.stroke_width}, {"iou_threshold", c.eval.iou_threshold}};
  j["domains"] = json::array();
  for (const auto& d : c.domains) {
    json dj{{"name", d.name}};
    if (d.test) {
      dj["train"] = config_detail::write_source(d.train);
      dj["test"] = config_detail::write_source(*d.test);
    } else {
      dj["source"] = config_detail::write_source(d.train);
      dj["train_fraction"] = d.train_fraction;
    }
    j["domains"].push_back(std::move(dj));
  }
  return j.dump(2) + "\n";
}

// FNV-1a 64 of the canonical config text, as 16 hex digits.
inline std::string config_digest(const ExperimentConfig& c) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : emit_config(c)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ------------------------------------------------------------ data access --

inline std::filesystem::path resolve_path(const std::string& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : std::filesystem::path(base) / path;
}

inline void check_source_paths(const SourceConfig& s, const std::string& base, const std::string& where) {
  if (s.kind == SourceKind::synthetic) return;
  const auto list = resolve_path(base, s.list);
  if (!std::filesystem::exists(list)) throw ConfigError(where + ": path does not exist: " + list.string());
  const auto root = resolve_path(base, s.root.empty() ? "." : s.root);
  if (!std::filesystem::is_directory(root)) throw ConfigError(where + ": root is not a directory: " + root.string());
}

inline std::vector<AnnotatedFrame> load_source(const SourceConfig& s, const std::string& base) {
  if (s.kind == SourceKind::synthetic) return generate_synthetic(s.synthetic);
  const auto list = resolve_path(base, s.list);
  const auto root = resolve_path(base, s.root.empty() ? "." : s.root);
  LoadOptions opt;
  opt.load_images = true;
  switch (s.kind) {
    case SourceKind::culane: return parse_culane(list, root, opt);
    case SourceKind::curvelanes: return parse_curvelanes(list, root, opt);
    case SourceKind::tusimple: return parse_tusimple(list, root, opt);
    default: break;
  }
  throw ConfigError("unsupported source kind");
}

struct DomainData {
  std::vector<AnnotatedFrame> train;
  std::vector<AnnotatedFrame> test;
};

inline DomainData load_domain(const DomainConfig& d, const std::string& base, std::uint64_t seed) {
  DomainData out;
  if (d.test) {
    out.train = load_source(d.train, base);
    out.test = load_source(*d.test, base);
    return out;
  }
  auto all = load_source(d.train, base);
  std::vector<std::size_t> idx(all.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng rng(seed ^ 0x5851F42D4C957F2Dull);
  for (std::size_t i = idx.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  const auto n_train = static_cast<std::size_t>(std::lround(d.train_fraction * static_cast<double>(all.size())));
  for (std::size_t i = 0; i < idx.size(); ++i) (i < n_train ? out.train : out.test).push_back(std::move(all[idx[i]]));
  return out;
}

inline const DomainConfig& find_domain(const ExperimentConfig& c, const std::string& name) {
  for (const auto& d : c.domains) {
    if (d.name == name) return d;
  }
  throw ConfigError("no domain named '" + name + "'");
}

// -------------------------------------------------------------- running --

struct CellResult {
  std::string train_domain;
  std::string test_domain;
  bool ok = false;
  std::string error;
  EvalReport report;
};

struct RunReport {
  std::string config_digest;
  std::uint64_t seed = 0;
  std::string train_domain;
  std::string checkpoint_path;
  std::vector<double> loss_trace;
  std::vector<CellResult> results;  // one per evaluated test domain
  double wall_clock_seconds = 0.0;
};

struct RunOptions {
  std::string train_domain;               // empty: the first domain
  std::vector<std::string> test_domains;  // empty: the training domain
  std::string out_dir;                    // empty: write nothing
  bool capture_eval_errors = false;       // record failed evaluations instead of throwing
};

// Trains one model on the training domain's train split, then scores it on
// the test split of every requested test domain. All datasets are loaded
// (and paths checked) before training starts.
inline RunReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  if (cfg.domains.empty()) throw ConfigError("config has no domains");
  const auto& train_dom = opt.train_domain.empty() ? cfg.domains.front() : find_domain(cfg, opt.train_domain);
  std::vector<std::string> tests = opt.test_domains;
  if (tests.empty()) tests.push_back(train_dom.name);
  for (const auto& name : tests) {
    const auto& d = find_domain(cfg, name);
    check_source_paths(d.train, cfg.base_dir, "domain '" + d.name + "'");
    if (d.test) check_source_paths(*d.test, cfg.base_dir, "domain '" + d.name + "'");
  }
  check_source_paths(train_dom.train, cfg.base_dir, "domain '" + train_dom.name + "'");
  if (train_dom.test) check_source_paths(*train_dom.test, cfg.base_dir, "domain '" + train_dom.name + "'");

  RunReport rep;
  rep.config_digest = config_digest(cfg);
  rep.seed = cfg.seed;
  rep.train_domain = train_dom.name;

  auto train_data = load_domain(train_dom, cfg.base_dir, cfg.seed);
  std::map<std::string, std::vector<AnnotatedFrame>> test_sets;
  for (const auto& name : tests) {
    if (name == train_dom.name) {
      test_sets[name] = train_data.test;
    } else {
      test_sets[name] = load_domain(find_domain(cfg, name), cfg.base_dir, cfg.seed).test;
    }
  }
  if (train_data.train.empty()) throw Error("domain '" + train_dom.name + "' has no training frames");

  CondLaneNet<float> model(cfg.model, cfg.seed);
  const auto& bb = cfg.model.backbone;
  const auto samples = prepare_samples(train_data.train, bb.input_height, bb.input_width);
  Trainer<float> trainer(model, cfg.train, cfg.seed);
  try {
    rep.loss_trace = trainer.run(samples, cfg.train.iterations);
  } catch (const Error& e) {
    throw Error("training on '" + train_dom.name + "' failed: " + e.what());
  }

  if (!opt.out_dir.empty()) {
    std::filesystem::create_directories(opt.out_dir);
    const auto ckpt = std::filesystem::path(opt.out_dir) / (train_dom.name + ".erfc");
    save_model(model, ckpt);
    rep.checkpoint_path = ckpt.string();
  }

  for (const auto& name : tests) {
    CellResult cell;
    cell.train_domain = train_dom.name;
    cell.test_domain = name;
    try {
      const auto& frames = test_sets.at(name);
      if (frames.empty()) throw Error("domain '" + name + "' has no test frames");
      cell.report = evaluate_model(model, frames, cfg.eval.stroke_width, cfg.eval.iou_threshold);
      cell.ok = true;
    } catch (const Error& e) {
      if (!opt.capture_eval_errors) throw Error("evaluating on '" + name + "' failed: " + e.what());
      cell.error = e.what();
    }
    rep.results.push_back(std::move(cell));
  }
  rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

struct CrossDatasetMatrix {
  std::vector<CellResult> cells;  // sorted by (train, test)

  bool complete_success() const {
    return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
  }
  const CellResult& at(const std::string& train, const std::string& test) const {
    for (const auto& c : cells) {
      if (c.train_domain == train && c.test_domain == test) return c;
    }
    throw Error("no matrix cell (" + train + ", " + test + ")");
  }
};

// One model per domain, each scored on every domain's test split. A domain
// whose training fails marks its whole row failed; the matrix still fills.
inline CrossDatasetMatrix run_cross_matrix(const ExperimentConfig& cfg, const std::string& out_dir = {},
                                           std::vector<RunReport>* runs = nullptr) {
  if (cfg.domains.size() < 2) throw ConfigError("cross matrix needs at least 2 domains");
  std::vector<std::string> names;
  for (const auto& d : cfg.domains) names.push_back(d.name);
  CrossDatasetMatrix m;
  for (const auto& train : names) {
    RunOptions opt;
    opt.train_domain = train;
    opt.test_domains = names;
    opt.out_dir = out_dir;
    opt.capture_eval_errors = true;
    try {
      auto rep = run_experiment(cfg, opt);
      for (auto& c : rep.results) m.cells.push_back(c);
      if (runs) runs->push_back(std::move(rep));
    } catch (const Error& e) {
      for (const auto& test : names) m.cells.push_back({train, test, false, e.what(), {}});
    }
  }
  std::stable_sort(m.cells.begin(), m.cells.end(), [](const CellResult& a, const CellResult& b) {
    return std::tie(a.train_domain, a.test_domain) < std::tie(b.train_domain, b.test_domain);
  });
  return m;
}

// -------------------------------------------------------------- reports --

enum class ReportFormat { csv, markdown };

inline ReportFormat parse_report_format(const std::string& s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "markdown" || s == "md") return ReportFormat::markdown;
  throw Error("unsupported report format '" + s + "' (expected csv or markdown)");
}

namespace report_detail {
inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}
inline std::string md_field(std::string s) {
  for (auto& c : s) {
    if (c == '|' || c == '\n') c = ' ';
  }
  return s;
}
}  // namespace report_detail

// Columns: Training Dataset, Testing Dataset, F-1 Score, Precision, Recall,
// Status. Rows ordered by (train, test).
inline std::string emit_report(std::vector<CellResult> cells, ReportFormat fmt) {
  using namespace report_detail;
  std::stable_sort(cells.begin(), cells.end(), [](const CellResult& a, const CellResult& b) {
    return std::tie(a.train_domain, a.test_domain) < std::tie(b.train_domain, b.test_domain);
  });
  const char* cols[] = {"Training Dataset", "Testing Dataset", "F-1 Score", "Precision", "Recall", "Status"};
  std::ostringstream os;
  auto row = [&](const std::vector<std::string>& v) {
    if (fmt == ReportFormat::csv) {
      for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << csv_field(v[i]);
      os << "\n";
    } else {
      os << "|";
      for (const auto& s : v) os << " " << md_field(s) << " |";
      os << "\n";
    }
  };
  row({cols, cols + 6});
  if (fmt == ReportFormat::markdown) os << "|---|---|---:|---:|---:|---|\n";
  for (const auto& c : cells) {
    if (c.ok) {
      const auto& s = c.report.score;
      row({c.train_domain, c.test_domain, fixed4(s.f1), fixed4(s.precision), fixed4(s.recall), "ok"});
    } else {
      row({c.train_domain, c.test_domain, "", "", "", "failed: " + c.error});
    }
  }
  return os.str();
}

inline std::string emit_report(const CrossDatasetMatrix& m, ReportFormat fmt) { return emit_report(m.cells, fmt); }
inline std::string emit_report(const RunReport& r, ReportFormat fmt) { return emit_report(r.results, fmt); }

inline std::string run_report_json(const RunReport& r) {
  nlohmann::json j;
  j["config_digest"] = r.config_digest;
  j["seed"] = r.seed;
  j["train_domain"] = r.train_domain;
  j["checkpoint"] = r.checkpoint_path;
  j["iterations"] = r.loss_trace.size();
  j["final_loss"] = r.loss_trace.empty() ? 0.0 : r.loss_trace.back();
  j["wall_clock_seconds"] = r.wall_clock_seconds;
  j["results"] = nlohmann::json::array();
  for (const auto& c : r.results) {
    nlohmann::json cj{{"test_domain", c.test_domain}, {"ok", c.ok}};
    if (c.ok) {
      const auto& k = c.report.counts;
      cj["precision"] = c.report.score.precision;
      cj["recall"] = c.report.score.recall;
      cj["f1"] = c.report.score.f1;
      cj["tp"] = k.tp;
      cj["fp"] = k.fp;
      cj["fn"] = k.fn;
    } else {
      cj["error"] = c.error;
    }
    j["results"].push_back(std::move(cj));
  }
  return j.dump(2) + "\n";
}

}  // namespace erfcond
