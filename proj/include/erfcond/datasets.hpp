#pragma once

// Lane annotation parsers (CULane, CurveLanes, TuSimple), the synthetic road
// generator, image I/O, preprocessing and training-target construction.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "erfcond/tensor.hpp"

#ifdef ERFCOND_WITH_OPENCV
#include <opencv2/imgcodecs.hpp>
#endif

namespace erfcond {

class ParseError : public Error {
 public:
  using Error::Error;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  bool operator==(const Point2&) const = default;
};

struct LanePolyline {
  std::vector<Point2> points;
  bool operator==(const LanePolyline&) const = default;
};

// 8-bit RGB, row-major, interleaved.
struct Image {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> pixels;

  bool empty() const { return pixels.empty(); }
  std::uint8_t& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  bool operator==(const Image&) const = default;
};

struct AnnotatedFrame {
  Image image;
  int height = 0;  // image geometry, known even when pixels are not loaded
  int width = 0;
  std::vector<LanePolyline> lanes;
  std::string source_id;
  std::string category = "none";
};

namespace detail {

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline double parse_double(std::string_view tok, const std::string& where) {
  double v = 0.0;
  const auto* end = tok.data() + tok.size();
  auto [ptr, ec] = std::from_chars(tok.data(), end, v);
  if (ec != std::errc() || ptr != end || !std::isfinite(v)) {
    throw ParseError(where + ": not a number: '" + std::string(tok) + "'");
  }
  return v;
}

inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t j = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > j) out.push_back(line.substr(j, i - j));
  }
  return out;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    out.push_back(line);
    start = end + 1;
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------- CULane --

// One lane per line: whitespace-separated "x1 y1 x2 y2 ...". Lanes with fewer
// than two points are skipped and reported through `warnings`.
inline std::vector<LanePolyline> parse_culane_lines(std::string_view text, const std::string& where = "culane",
                                                    std::vector<std::string>* warnings = nullptr) {
  std::vector<LanePolyline> lanes;
  const auto lines = detail::split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto toks = detail::split_ws(lines[i]);
    if (toks.empty()) continue;
    const std::string loc = where + ":" + std::to_string(i + 1);
    if (toks.size() % 2 != 0) {
      throw ParseError(loc + ": odd number of coordinates (" + std::to_string(toks.size()) + ")");
    }
    LanePolyline lane;
    for (std::size_t k = 0; k < toks.size(); k += 2) {
      lane.points.push_back({detail::parse_double(toks[k], loc), detail::parse_double(toks[k + 1], loc)});
    }
    if (lane.points.size() < 2) {
      if (warnings) warnings->push_back(loc + ": lane with fewer than 2 points skipped");
      continue;
    }
    lanes.push_back(std::move(lane));
  }
  return lanes;
}

inline std::string serialize_culane_lines(const std::vector<LanePolyline>& lanes) {
  std::string out;
  for (const auto& lane : lanes) {
    for (std::size_t i = 0; i < lane.points.size(); ++i) {
      if (i) out += ' ';
      out += detail::format_double(lane.points[i].x) + ' ' + detail::format_double(lane.points[i].y);
    }
    out += " \n";
  }
  return out;
}

// "test3_night.txt" -> "night"; anything else -> "none".
inline std::string culane_category(const std::filesystem::path& list_file) {
  const std::string stem = list_file.stem().string();
  if (stem.size() > 6 && stem.rfind("test", 0) == 0 && std::isdigit(static_cast<unsigned char>(stem[4])) &&
      stem[5] == '_') {
    return stem.substr(6);
  }
  return "none";
}

struct LoadOptions {
  bool load_images = false;
  int default_height = 590;  // used when images are not loaded
  int default_width = 1640;
};

Image load_image(const std::filesystem::path& path);

// Split list of image paths relative to `root` (first token per line); each
// image's annotation is the same path with extension ".lines.txt".
inline std::vector<AnnotatedFrame> parse_culane(const std::filesystem::path& list_file,
                                                const std::filesystem::path& root, const LoadOptions& opt = {},
                                                std::vector<std::string>* warnings = nullptr) {
  std::vector<AnnotatedFrame> frames;
  const std::string category = culane_category(list_file);
  const std::string list_text = detail::read_text(list_file);
  for (auto line : detail::split_lines(list_text)) {
    const auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    std::string rel(toks[0]);
    while (!rel.empty() && rel.front() == '/') rel.erase(rel.begin());
    const auto image_path = root / rel;
    auto ann_path = image_path;
    ann_path.replace_extension(".lines.txt");
    AnnotatedFrame f;
    f.source_id = rel;
    f.category = category;
    f.lanes = parse_culane_lines(detail::read_text(ann_path), ann_path.string(), warnings);
    if (opt.load_images) {
      f.image = load_image(image_path);
      f.height = f.image.height;
      f.width = f.image.width;
    } else {
      f.height = opt.default_height;
      f.width = opt.default_width;
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

// ------------------------------------------------------------ CurveLanes --

// {"Lines": [[{"x": "10.0", "y": "20.0"}, ...], ...]}; coordinates may be
// numeric strings or numbers.
inline std::vector<LanePolyline> parse_curvelanes_json(std::string_view text, const std::string& where = "curvelanes") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(where + ": invalid JSON: " + e.what());
  }
  if (!j.is_object() || !j.contains("Lines")) throw ParseError(where + ": missing key \"Lines\"");
  const auto& lines = j.at("Lines");
  if (!lines.is_array()) throw ParseError(where + ": \"Lines\" must be an array");
  auto coord = [&](const nlohmann::json& pt, const char* key) {
    if (!pt.is_object() || !pt.contains(key)) throw ParseError(where + ": point missing key \"" + key + "\"");
    const auto& v = pt.at(key);
    if (v.is_number()) return v.get<double>();
    if (v.is_string()) return detail::parse_double(v.get<std::string>(), where);
    throw ParseError(where + ": coordinate \"" + key + "\" is neither string nor number");
  };
  std::vector<LanePolyline> lanes;
  for (const auto& line : lines) {
    if (!line.is_array()) throw ParseError(where + ": each lane must be an array of points");
    LanePolyline lane;
    for (const auto& pt : line) lane.points.push_back({coord(pt, "x"), coord(pt, "y")});
    lanes.push_back(std::move(lane));
  }
  return lanes;
}

inline std::string serialize_curvelanes_json(const std::vector<LanePolyline>& lanes) {
  nlohmann::json lines = nlohmann::json::array();
  for (const auto& lane : lanes) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : lane.points) {
      pts.push_back({{"x", detail::format_double(p.x)}, {"y", detail::format_double(p.y)}});
    }
    lines.push_back(std::move(pts));
  }
  return nlohmann::json{{"Lines", lines}}.dump();
}

// "train/images/a.jpg" -> "train/labels/a.lines.json"
inline std::filesystem::path curvelanes_label_path(const std::filesystem::path& image_rel) {
  std::filesystem::path out;
  for (const auto& part : image_rel.parent_path()) out /= (part == "images" ? std::filesystem::path("labels") : part);
  out /= image_rel.stem().string() + ".lines.json";
  return out;
}

inline std::vector<AnnotatedFrame> parse_curvelanes(const std::filesystem::path& list_file,
                                                    const std::filesystem::path& root, const LoadOptions& opt = {}) {
  std::vector<AnnotatedFrame> frames;
  const std::string list_text = detail::read_text(list_file);
  for (auto line : detail::split_lines(list_text)) {
    const auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    std::string rel(toks[0]);
    while (!rel.empty() && rel.front() == '/') rel.erase(rel.begin());
    const auto label = root / curvelanes_label_path(rel);
    AnnotatedFrame f;
    f.source_id = rel;
    f.lanes = parse_curvelanes_json(detail::read_text(label), label.string());
    if (opt.load_images) {
      f.image = load_image(root / rel);
      f.height = f.image.height;
      f.width = f.image.width;
    } else {
      f.height = opt.default_height;
      f.width = opt.default_width;
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

// -------------------------------------------------------------- TuSimple --

struct TuSimpleRecord {
  std::string raw_file;
  std::vector<double> h_samples;
  std::vector<std::vector<double>> lanes;  // x per h_sample, -2 where absent
  bool operator==(const TuSimpleRecord&) const = default;

  // Present points only; lanes with fewer than two points are dropped.
  std::vector<LanePolyline> polylines() const {
    std::vector<LanePolyline> out;
    for (const auto& xs : lanes) {
      LanePolyline lane;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (xs[i] != -2.0) lane.points.push_back({xs[i], h_samples[i]});
      }
      if (lane.points.size() >= 2) out.push_back(std::move(lane));
    }
    return out;
  }
};

inline TuSimpleRecord parse_tusimple_record(std::string_view line, const std::string& where = "tusimple") {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(where + ": invalid JSON: " + e.what());
  }
  for (const char* key : {"lanes", "h_samples", "raw_file"}) {
    if (!j.contains(key)) throw ParseError(where + ": missing key \"" + key + "\"");
  }
  TuSimpleRecord r;
  try {
    r.raw_file = j.at("raw_file").get<std::string>();
    r.h_samples = j.at("h_samples").get<std::vector<double>>();
    r.lanes = j.at("lanes").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + ": malformed record: " + e.what());
  }
  for (std::size_t i = 0; i < r.lanes.size(); ++i) {
    if (r.lanes[i].size() != r.h_samples.size()) {
      throw ParseError(where + ": lane " + std::to_string(i) + " has " + std::to_string(r.lanes[i].size()) +
                       " entries but h_samples has " + std::to_string(r.h_samples.size()));
    }
  }
  return r;
}

inline std::string serialize_tusimple_record(const TuSimpleRecord& r) {
  return nlohmann::json{{"lanes", r.lanes}, {"h_samples", r.h_samples}, {"raw_file", r.raw_file}}.dump();
}

inline std::vector<TuSimpleRecord> parse_tusimple_jsonl(std::string_view text, const std::string& where = "tusimple") {
  std::vector<TuSimpleRecord> out;
  const auto lines = detail::split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (detail::split_ws(lines[i]).empty()) continue;
    out.push_back(parse_tusimple_record(lines[i], where + ":" + std::to_string(i + 1)));
  }
  return out;
}

inline std::vector<AnnotatedFrame> parse_tusimple(const std::filesystem::path& jsonl, const std::filesystem::path& root,
                                                  const LoadOptions& opt = {}) {
  std::vector<AnnotatedFrame> frames;
  for (const auto& r : parse_tusimple_jsonl(detail::read_text(jsonl), jsonl.string())) {
    AnnotatedFrame f;
    f.source_id = r.raw_file;
    f.lanes = r.polylines();
    if (opt.load_images) {
      f.image = load_image(root / r.raw_file);
      f.height = f.image.height;
      f.width = f.image.width;
    } else {
      f.height = opt.default_height;
      f.width = opt.default_width;
    }
    frames.push_back(std::move(f));
  }
  return frames;
}

// ------------------------------------------------------------- Image I/O --

namespace detail {
inline int read_pnm_int(std::istream& in) {
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int v = -1;
  in >> v;
  if (!in || v < 0) throw DatasetError("malformed PNM header");
  return v;
}
}  // namespace detail

// Binary PPM (P6) or PGM (P5), 8-bit. Other formats need OpenCV support.
inline Image load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open image " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (in && magic[0] == 'P' && (magic[1] == '6' || magic[1] == '5')) {
    Image img;
    img.width = detail::read_pnm_int(in);
    img.height = detail::read_pnm_int(in);
    const int maxval = detail::read_pnm_int(in);
    if (maxval != 255 || img.width < 1 || img.height < 1) throw DatasetError(path.string() + ": unsupported PNM");
    in.get();
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    const int channels = magic[1] == '6' ? 3 : 1;
    std::vector<std::uint8_t> raw(n * channels);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw DatasetError(path.string() + ": truncated");
    if (channels == 3) {
      img.pixels = std::move(raw);
    } else {
      img.pixels.resize(n * 3);
      for (std::size_t i = 0; i < n; ++i) img.pixels[3 * i] = img.pixels[3 * i + 1] = img.pixels[3 * i + 2] = raw[i];
    }
    return img;
  }
#ifdef ERFCOND_WITH_OPENCV
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (m.empty()) throw DatasetError("cannot decode image " + path.string());
  Image img;
  img.height = m.rows;
  img.width = m.cols;
  img.pixels.resize(static_cast<std::size_t>(m.rows) * m.cols * 3);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[3 * x + (2 - c)];  // BGR -> RGB
    }
  }
  return img;
#else
  throw DatasetError("unsupported image format (only binary PPM/PGM without OpenCV): " + path.string());
#endif
}

inline void save_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
}

// ------------------------------------------------------------- Synthetic --

// Lanes are quadratics x(y) = a*(y - y0)^2 + b*(y - y0) + c with y0 the
// bottom row. A frame shares one curvature |a| ~ U[curvature_min,
// curvature_max] (random sign) and one slope b across its lanes, like the
// markings of one road. `offscreen_lanes` extra lanes per side start outside
// the image and only become visible when curvature bends them in.
struct SyntheticConfig {
  int frames = 1;
  int n_lanes = 3;
  double curvature_min = 0.0;
  double curvature_max = 0.0;
  int height = 256;
  int width = 128;
  double noise = 12.0;
  std::uint64_t seed = 1;
  int offscreen_lanes = 1;
  double lane_spacing = 44.0;
  double slope_max = 0.1;
  double horizon = 0.25;  // lane tops at this fraction of the height (+-5%)
  double stroke_width = 3.0;
  int sample_step = 10;  // ground-truth rows
};

inline void validate(const SyntheticConfig& c) {
  if (c.frames < 0 || c.n_lanes < 0 || c.offscreen_lanes < 0) throw Error("synthetic: counts must be >= 0");
  if (c.curvature_min < 0.0 || c.curvature_min > c.curvature_max) {
    throw Error("synthetic: need 0 <= curvature_min <= curvature_max");
  }
  if (c.height < 16 || c.width < 16) throw Error("synthetic: image must be at least 16x16");
  if (c.noise < 0.0 || c.stroke_width <= 0.0 || c.lane_spacing <= 0.0 || c.sample_step < 1) {
    throw Error("synthetic: noise, stroke width, spacing and sample step must be positive");
  }
  if (c.horizon < 0.0 || c.horizon >= 0.9) throw Error("synthetic: horizon must lie in [0, 0.9)");
}

inline AnnotatedFrame generate_synthetic_frame(const SyntheticConfig& cfg, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  const int h = cfg.height, w = cfg.width;
  AnnotatedFrame f;
  f.height = h;
  f.width = w;
  f.source_id = "synthetic/" + std::to_string(cfg.seed) + "/" + std::to_string(index);
  f.image.height = h;
  f.image.width = w;
  f.image.pixels.resize(static_cast<std::size_t>(h) * w * 3);

  const double a_mag = cfg.curvature_min + (cfg.curvature_max - cfg.curvature_min) * unit(rng);
  const double a = unit(rng) < 0.5 ? -a_mag : a_mag;
  const double b = (2.0 * unit(rng) - 1.0) * cfg.slope_max;
  const double jitter = (unit(rng) - 0.5) * 0.5 * cfg.lane_spacing;
  const double y0 = h - 1;
  const int y_top = static_cast<int>(std::lround(h * (cfg.horizon + (unit(rng) - 0.5) * 0.1)));
  const double base_level = 70.0 + 40.0 * unit(rng);

  // Background: flat road tone plus per-pixel noise.
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double v = base_level + cfg.noise * gauss(rng);
      const auto px = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      for (int c = 0; c < 3; ++c) f.image.at(y, x, c) = px;
    }
  }
  if (cfg.n_lanes == 0) return f;

  const int first = -cfg.offscreen_lanes, last = cfg.n_lanes - 1 + cfg.offscreen_lanes;
  for (int k = first; k <= last; ++k) {
    const double c = w / 2.0 + (k - (cfg.n_lanes - 1) / 2.0) * cfg.lane_spacing + jitter;
    auto x_at = [&](double y) { return a * (y - y0) * (y - y0) + b * (y - y0) + c; };
    auto slope_at = [&](double y) { return 2.0 * a * (y - y0) + b; };

    // Longest run of in-image samples, bottom to top.
    std::vector<Point2> best, run;
    for (int y = h - 1; y >= y_top; y -= cfg.sample_step) {
      const double x = x_at(y);
      if (x >= 0.0 && x <= w - 1.0) {
        run.push_back({x, static_cast<double>(y)});
      } else {
        if (run.size() > best.size()) best = run;
        run.clear();
      }
    }
    if (run.size() > best.size()) best = run;
    if (best.size() < 2) continue;

    const double level = 200.0 + 40.0 * unit(rng);
    const int y_lo = static_cast<int>(best.back().y), y_hi = static_cast<int>(best.front().y);
    for (int y = y_lo; y <= y_hi; ++y) {
      const double xc = x_at(y);
      const double half = cfg.stroke_width / 2.0 * std::sqrt(1.0 + slope_at(y) * slope_at(y));
      const int x0 = std::max(0, static_cast<int>(std::floor(xc - half)));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(xc + half)));
      for (int x = x0; x <= x1; ++x) {
        if (std::abs(x - xc) > half) continue;
        const double v = level + 0.5 * cfg.noise * gauss(rng);
        const auto px = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        for (int ch = 0; ch < 3; ++ch) f.image.at(y, x, ch) = px;
      }
    }
    f.lanes.push_back({std::move(best)});
  }
  return f;
}

inline std::vector<AnnotatedFrame> generate_synthetic(const SyntheticConfig& cfg) {
  validate(cfg);
  std::vector<AnnotatedFrame> frames;
  frames.reserve(static_cast<std::size_t>(cfg.frames));
  for (int i = 0; i < cfg.frames; ++i) frames.push_back(generate_synthetic_frame(cfg, i));
  return frames;
}

// Writes frames as a CULane-style corpus: <dir>/<name>.ppm, <dir>/<name>.lines.txt
// and a list file of relative image paths.
inline void write_culane_corpus(const std::vector<AnnotatedFrame>& frames, const std::filesystem::path& root,
                                const std::string& list_name = "list.txt") {
  std::filesystem::create_directories(root / "frames");
  std::ofstream list(root / list_name);
  if (!list) throw DatasetError("cannot write " + (root / list_name).string());
  for (std::size_t i = 0; i < frames.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu", i);
    const std::filesystem::path rel = std::filesystem::path("frames") / (std::string(name) + ".ppm");
    save_ppm(frames[i].image, root / rel);
    std::ofstream ann(root / "frames" / (std::string(name) + ".lines.txt"));
    ann << serialize_culane_lines(frames[i].lanes);
    list << '/' << rel.generic_string() << '\n';
  }
}

// --------------------------------------------------------- Preprocessing --

// original -> model: x_m = (x - crop_x) * scale_x, y_m = (y - crop_y) * scale_y
struct CoordTransform {
  double scale_x = 1.0, scale_y = 1.0;
  double crop_x = 0.0, crop_y = 0.0;

  Point2 apply(Point2 p) const { return {(p.x - crop_x) * scale_x, (p.y - crop_y) * scale_y}; }
  Point2 invert(Point2 p) const { return {p.x / scale_x + crop_x, p.y / scale_y + crop_y}; }
};

struct PreprocessedFrame {
  Tensor<float> image;  // [3,H,W], pixel/255 - 0.5
  CoordTransform transform;
  std::vector<LanePolyline> lanes;  // model coordinates, clipped to the model image
};

// Keeps the in-bounds part of a polyline, clamping boundary-crossing samples.
inline LanePolyline clip_lane(const LanePolyline& lane, double width, double height) {
  LanePolyline out;
  for (const auto& p : lane.points) {
    if (p.y < 0.0 || p.y > height - 1.0) continue;
    if (p.x < -0.5 || p.x > width - 0.5) continue;
    out.points.push_back({std::clamp(p.x, 0.0, width - 1.0), p.y});
  }
  return out;
}

inline PreprocessedFrame preprocess_frame(const AnnotatedFrame& frame, int target_height, int target_width) {
  if (target_height < 1 || target_width < 1) throw DatasetError("preprocess_frame: degenerate target geometry");
  if (frame.image.empty() || frame.image.height < 1 || frame.image.width < 1) {
    throw DatasetError("preprocess_frame: frame '" + frame.source_id + "' has no image");
  }
  const Image& img = frame.image;
  PreprocessedFrame out;
  out.transform.scale_x = static_cast<double>(target_width) / img.width;
  out.transform.scale_y = static_cast<double>(target_height) / img.height;
  out.image = Tensor<float>(Shape{3, target_height, target_width});
  auto& data = out.image.storage();
  const bool identity = target_width == img.width && target_height == img.height;
  for (int y = 0; y < target_height; ++y) {
    for (int x = 0; x < target_width; ++x) {
      for (int c = 0; c < 3; ++c) {
        double v;
        if (identity) {
          v = img.at(y, x, c);
        } else {
          const double sx = std::clamp(x / out.transform.scale_x, 0.0, img.width - 1.0);
          const double sy = std::clamp(y / out.transform.scale_y, 0.0, img.height - 1.0);
          const int x0 = static_cast<int>(sx), y0 = static_cast<int>(sy);
          const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
          const double fx = sx - x0, fy = sy - y0;
          v = (1 - fy) * ((1 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c)) +
              fy * ((1 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c));
        }
        data[(static_cast<std::size_t>(c) * target_height + y) * target_width + x] =
            static_cast<float>(v / 255.0 - 0.5);
      }
    }
  }
  for (const auto& lane : frame.lanes) {
    LanePolyline m;
    for (const auto& p : lane.points) m.points.push_back(out.transform.apply(p));
    auto clipped = clip_lane(m, target_width, target_height);
    if (clipped.points.size() >= 2) out.lanes.push_back(std::move(clipped));
  }
  return out;
}

// Mirror image [3,H,W] and lanes left-right.
inline void hflip(Tensor<float>& image, std::vector<LanePolyline>& lanes) {
  const auto c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto& d = image.storage();
  for (std::int64_t k = 0; k < c * h; ++k) std::reverse(d.begin() + k * w, d.begin() + (k + 1) * w);
  for (auto& lane : lanes) {
    for (auto& p : lane.points) p.x = static_cast<double>(w - 1) - p.x;
  }
}

// --------------------------------------------------------------- Targets --

struct TargetGeometry {
  int height = 256;
  int width = 128;
  int fine_stride = 4;
  int coarse_stride = 16;
  double sigma = 2.0;  // heatmap cells

  int fine_h() const { return height / fine_stride; }
  int fine_w() const { return width / fine_stride; }
  int coarse_h() const { return height / coarse_stride; }
  int coarse_w() const { return width / coarse_stride; }
};

struct LaneTarget {
  int anchor_row = 0;  // coarse grid
  int anchor_col = 0;
  std::vector<int> columns;     // per fine row, valid where mask is 1
  std::vector<std::uint8_t> mask;  // vertical range
};

struct FrameTargets {
  std::vector<float> heatmap;  // coarse_h x coarse_w
  std::vector<LaneTarget> lanes;
};

// Linear interpolation of x at row y along a polyline; false outside its span.
inline bool lane_x_at(const LanePolyline& lane, double y, double& x) {
  auto pts = lane.points;
  std::sort(pts.begin(), pts.end(), [](const Point2& a, const Point2& b) { return a.y < b.y; });
  if (pts.empty() || y < pts.front().y || y > pts.back().y) return false;
  for (std::size_t i = 1; i < pts.size(); ++i) {
    if (y <= pts[i].y) {
      const double dy = pts[i].y - pts[i - 1].y;
      const double t = dy > 0 ? (y - pts[i - 1].y) / dy : 0.0;
      x = pts[i - 1].x + t * (pts[i].x - pts[i - 1].x);
      return true;
    }
  }
  x = pts.back().x;
  return true;
}

// Lanes in model coordinates. Anchor = the lane point nearest the image
// bottom. Lanes sharing an anchor cell with an earlier lane get no shape
// target (one kernel per cell).
inline FrameTargets build_targets(const std::vector<LanePolyline>& lanes, const TargetGeometry& g) {
  const int ch = g.coarse_h(), cw = g.coarse_w(), fh = g.fine_h(), fw = g.fine_w();
  FrameTargets t;
  t.heatmap.assign(static_cast<std::size_t>(ch) * cw, 0.0f);
  std::vector<std::pair<int, int>> used;
  for (const auto& lane : lanes) {
    const Point2* anchor = nullptr;
    for (const auto& p : lane.points) {
      if (p.x < 0 || p.x > g.width - 1.0 || p.y < 0 || p.y > g.height - 1.0) continue;
      if (!anchor || p.y > anchor->y) anchor = &p;
    }
    if (!anchor) throw DatasetError("build_targets: lane lies entirely outside the image");
    LaneTarget lt;
    lt.anchor_row = std::min(ch - 1, static_cast<int>(anchor->y / g.coarse_stride));
    lt.anchor_col = std::min(cw - 1, static_cast<int>(anchor->x / g.coarse_stride));
    for (int r = 0; r < ch; ++r) {
      for (int c = 0; c < cw; ++c) {
        const double d2 = (r - lt.anchor_row) * (r - lt.anchor_row) + (c - lt.anchor_col) * (c - lt.anchor_col);
        auto& cell = t.heatmap[static_cast<std::size_t>(r) * cw + c];
        cell = std::max(cell, static_cast<float>(std::exp(-d2 / (2.0 * g.sigma * g.sigma))));
      }
    }
    const std::pair<int, int> key{lt.anchor_row, lt.anchor_col};
    if (std::find(used.begin(), used.end(), key) != used.end()) continue;
    used.push_back(key);

    lt.columns.assign(static_cast<std::size_t>(fh), 0);
    lt.mask.assign(static_cast<std::size_t>(fh), 0);
    const double half = (g.fine_stride - 1) / 2.0;
    for (int r = 0; r < fh; ++r) {
      const double y = g.fine_stride * r + g.fine_stride / 2.0;
      double x = 0.0;
      if (!lane_x_at(lane, y, x)) continue;
      lt.columns[static_cast<std::size_t>(r)] = std::clamp(static_cast<int>(std::lround((x - half) / g.fine_stride)), 0, fw - 1);
      lt.mask[static_cast<std::size_t>(r)] = 1;
    }
    t.lanes.push_back(std::move(lt));
  }
  return t;
}

}  // namespace erfcond
