#pragma once

// Flat TOML-style run configuration: [section] headers, key = value lines,
// '#' comments, quoted strings, booleans, and bracketed number lists. Keys
// are addressed as "section.key"; command-line --set overrides use the same
// addressing. RunConfig round-trips through text field-equal.

#include <cstdint>
#include <cstdlib>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "curvelab/check.hpp"
#include "curvelab/metrics.hpp"
#include "curvelab/model.hpp"
#include "curvelab/scenegen.hpp"
#include "curvelab/training.hpp"

namespace curvelab {

class ConfigMap {
 public:
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::map<std::string, std::string>& all() const { return values_; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_double(it->second, key);
  }
  int get_int(const std::string& key, int fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return parse_int(it->second, key);
  }
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      return std::stoull(trim(it->second));
    } catch (const std::exception&) {
      throw CheckError("config: bad unsigned integer for " + key + ": " + it->second);
    }
  }
  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::string v = trim(it->second);
    if (v == "true") return true;
    if (v == "false") return false;
    throw CheckError("config: bad boolean for " + key + ": " + it->second);
  }
  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    for (const std::string& tok : split_list(it->second, key)) out.push_back(parse_double(tok, key));
    return out;
  }
  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<int> out;
    for (const std::string& tok : split_list(it->second, key)) out.push_back(parse_int(tok, key));
    return out;
  }

  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }

 private:
  static double parse_double(const std::string& s, const std::string& key) {
    std::string t = trim(s);
    std::size_t pos = 0;
    double v = 0.0;
    try {
      v = std::stod(t, &pos);
    } catch (const std::exception&) {
      throw CheckError("config: bad number for " + key + ": " + s);
    }
    if (pos != t.size()) throw CheckError("config: bad number for " + key + ": " + s);
    return v;
  }
  static int parse_int(const std::string& s, const std::string& key) {
    std::string t = trim(s);
    std::size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(t, &pos);
    } catch (const std::exception&) {
      throw CheckError("config: bad integer for " + key + ": " + s);
    }
    if (pos != t.size()) throw CheckError("config: bad integer for " + key + ": " + s);
    return v;
  }
  static std::vector<std::string> split_list(const std::string& s, const std::string& key) {
    std::string t = trim(s);
    if (t.size() < 2 || t.front() != '[' || t.back() != ']')
      throw CheckError("config: expected a [..] list for " + key + ": " + s);
    t = t.substr(1, t.size() - 2);
    std::vector<std::string> out;
    std::string cur;
    std::stringstream ss(t);
    while (std::getline(ss, cur, ',')) {
      cur = trim(cur);
      if (!cur.empty()) out.push_back(cur);
    }
    return out;
  }

  std::map<std::string, std::string> values_;
};

// Strips a trailing comment that is not inside a quoted string.
inline std::string strip_comment(const std::string& line) {
  bool in_quote = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') in_quote = !in_quote;
    if (line[i] == '#' && !in_quote) return line.substr(0, i);
  }
  return line;
}

inline ConfigMap parse_config_text(const std::string& text) {
  ConfigMap cfg;
  std::string section;
  std::stringstream ss(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(ss, raw)) {
    ++lineno;
    std::string line = ConfigMap::trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']') {
      section = ConfigMap::trim(line.substr(1, line.size() - 2));
      CVL_CHECK(!section.empty(), "config: empty section name at line " + std::to_string(lineno));
      continue;
    }
    std::size_t eq = line.find('=');
    // List values contain no '=', so the first '=' splits key and value.
    CVL_CHECK(eq != std::string::npos, "config: expected key = value at line " + std::to_string(lineno));
    std::string key = ConfigMap::trim(line.substr(0, eq));
    std::string value = ConfigMap::trim(line.substr(eq + 1));
    CVL_CHECK(!key.empty(), "config: empty key at line " + std::to_string(lineno));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    cfg.set(section.empty() ? key : section + "." + key, value);
  }
  return cfg;
}

// Applies "section.key=value" override strings on top of a parsed file.
inline void apply_overrides(ConfigMap* cfg, const std::vector<std::string>& sets) {
  for (const std::string& s : sets) {
    std::size_t eq = s.find('=');
    CVL_CHECK(eq != std::string::npos && eq > 0, "config: --set expects key=value, got: " + s);
    std::string key = ConfigMap::trim(s.substr(0, eq));
    std::string value = ConfigMap::trim(s.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    cfg->set(key, value);
  }
}

struct TrainSettings {
  int steps = 2000;
  int batch_size = 4;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  int checkpoint_interval = 500;
  int log_interval = 10;
  std::uint64_t seed = 7;
};

struct RunConfig {
  SceneSpec scene;
  int scene_count = 50;
  int eval_scene_count = 20;
  ModelConfig model;
  LossCoefficients loss;
  TrainSettings train;
  EvalConfig eval;
  std::string output_dir = "out";
};

inline RunConfig run_config_from_map(const ConfigMap& m) {
  RunConfig c;
  auto& s = c.scene;
  s.lane_count_min = m.get_int("scene.lane_count_min", s.lane_count_min);
  s.lane_count_max = m.get_int("scene.lane_count_max", s.lane_count_max);
  s.lane_spacing = m.get_double("scene.lane_spacing", s.lane_spacing);
  s.lane_spacing_jitter = m.get_double("scene.lane_spacing_jitter", s.lane_spacing_jitter);
  s.y_start_min = m.get_double("scene.y_start_min", s.y_start_min);
  s.y_start_max = m.get_double("scene.y_start_max", s.y_start_max);
  s.y_end_min = m.get_double("scene.y_end_min", s.y_end_min);
  s.y_end_max = m.get_double("scene.y_end_max", s.y_end_max);
  s.cam_height = m.get_double("scene.cam_height", s.cam_height);
  s.cam_pitch_deg = m.get_double("scene.cam_pitch_deg", s.cam_pitch_deg);
  s.focal = m.get_double("scene.focal", s.focal);
  s.img_h = m.get_int("scene.img_h", s.img_h);
  s.img_w = m.get_int("scene.img_w", s.img_w);
  s.stroke_width = m.get_int("scene.stroke_width", s.stroke_width);
  s.noise_std = m.get_double("scene.noise_std", s.noise_std);
  s.seed = m.get_u64("scene.seed", s.seed);
  s.fixed_ys = m.get_double_list("scene.fixed_ys", s.fixed_ys);
  c.scene_count = m.get_int("scene.count", c.scene_count);
  c.eval_scene_count = m.get_int("scene.eval_count", c.eval_scene_count);

  auto& md = c.model;
  md.embed_dim = m.get_int("model.embed_dim", md.embed_dim);
  md.heads = m.get_int("model.heads", md.heads);
  md.sample_points = m.get_int("model.sample_points", md.sample_points);
  md.levels = m.get_int("model.levels", md.levels);
  md.encoder_layers = m.get_int("model.encoder_layers", md.encoder_layers);
  md.decoder_layers = m.get_int("model.decoder_layers", md.decoder_layers);
  md.num_queries = m.get_int("model.num_queries", md.num_queries);
  md.poly_order = m.get_int("model.poly_order", md.poly_order);
  md.backbone_channels = m.get_int_list("model.backbone_channels", md.backbone_channels);
  md.delta_clamp = m.get_double("model.delta_clamp", md.delta_clamp);
  md.conf_scale = m.get_double("model.conf_scale", md.conf_scale);
  md.sampling = sampling_mode_from_string(m.get_string("model.sampling", to_string(md.sampling)));
  md.head = head_mode_from_string(m.get_string("model.head", to_string(md.head)));
  md.seg_branch = m.get_bool("model.seg", md.seg_branch);
  md.init_seed = m.get_u64("model.init_seed", md.init_seed);
  md.img_h = s.img_h;
  md.img_w = s.img_w;
  md.channels = s.channels;
  md.fixed_ys = s.fixed_ys;
  md.range = s.range;

  c.loss.alpha1 = m.get_double("loss.alpha1", c.loss.alpha1);
  c.loss.alpha2 = m.get_double("loss.alpha2", c.loss.alpha2);
  c.loss.alpha3 = m.get_double("loss.alpha3", c.loss.alpha3);
  c.loss.alpha4 = m.get_double("loss.alpha4", c.loss.alpha4);

  c.train.steps = m.get_int("train.steps", c.train.steps);
  c.train.batch_size = m.get_int("train.batch_size", c.train.batch_size);
  c.train.lr = m.get_double("train.lr", c.train.lr);
  c.train.weight_decay = m.get_double("train.weight_decay", c.train.weight_decay);
  c.train.checkpoint_interval = m.get_int("train.checkpoint_interval", c.train.checkpoint_interval);
  c.train.log_interval = m.get_int("train.log_interval", c.train.log_interval);
  c.train.seed = m.get_u64("train.seed", c.train.seed);

  c.eval.max_distance = m.get_double("eval.max_distance", c.eval.max_distance);
  c.eval.coverage_fraction = m.get_double("eval.coverage", c.eval.coverage_fraction);
  c.eval.confidence_threshold = m.get_double("eval.confidence_threshold", c.eval.confidence_threshold);
  c.eval.ys = s.fixed_ys;

  c.output_dir = m.get_string("output.dir", c.output_dir);
  return c;
}

namespace detail {

inline std::string fmt_num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) os << ", ";
    if constexpr (std::is_same_v<T, double>)
      os << fmt_num(v[i]);
    else
      os << v[i];
  }
  os << "]";
  return os.str();
}

}  // namespace detail

inline std::string run_config_to_text(const RunConfig& c) {
  using detail::fmt_list;
  using detail::fmt_num;
  std::ostringstream os;
  os << "[scene]\n";
  os << "count = " << c.scene_count << "\n";
  os << "eval_count = " << c.eval_scene_count << "\n";
  os << "lane_count_min = " << c.scene.lane_count_min << "\n";
  os << "lane_count_max = " << c.scene.lane_count_max << "\n";
  os << "lane_spacing = " << fmt_num(c.scene.lane_spacing) << "\n";
  os << "lane_spacing_jitter = " << fmt_num(c.scene.lane_spacing_jitter) << "\n";
  os << "y_start_min = " << fmt_num(c.scene.y_start_min) << "\n";
  os << "y_start_max = " << fmt_num(c.scene.y_start_max) << "\n";
  os << "y_end_min = " << fmt_num(c.scene.y_end_min) << "\n";
  os << "y_end_max = " << fmt_num(c.scene.y_end_max) << "\n";
  os << "cam_height = " << fmt_num(c.scene.cam_height) << "\n";
  os << "cam_pitch_deg = " << fmt_num(c.scene.cam_pitch_deg) << "\n";
  os << "focal = " << fmt_num(c.scene.focal) << "\n";
  os << "img_h = " << c.scene.img_h << "\n";
  os << "img_w = " << c.scene.img_w << "\n";
  os << "stroke_width = " << c.scene.stroke_width << "\n";
  os << "noise_std = " << fmt_num(c.scene.noise_std) << "\n";
  os << "seed = " << c.scene.seed << "\n";
  os << "fixed_ys = " << fmt_list(c.scene.fixed_ys) << "\n";
  os << "\n[model]\n";
  os << "embed_dim = " << c.model.embed_dim << "\n";
  os << "heads = " << c.model.heads << "\n";
  os << "sample_points = " << c.model.sample_points << "\n";
  os << "levels = " << c.model.levels << "\n";
  os << "encoder_layers = " << c.model.encoder_layers << "\n";
  os << "decoder_layers = " << c.model.decoder_layers << "\n";
  os << "num_queries = " << c.model.num_queries << "\n";
  os << "poly_order = " << c.model.poly_order << "\n";
  os << "backbone_channels = " << fmt_list(c.model.backbone_channels) << "\n";
  os << "delta_clamp = " << fmt_num(c.model.delta_clamp) << "\n";
  os << "conf_scale = " << fmt_num(c.model.conf_scale) << "\n";
  os << "sampling = \"" << to_string(c.model.sampling) << "\"\n";
  os << "head = \"" << to_string(c.model.head) << "\"\n";
  os << "seg = " << (c.model.seg_branch ? "true" : "false") << "\n";
  os << "init_seed = " << c.model.init_seed << "\n";
  os << "\n[loss]\n";
  os << "alpha1 = " << fmt_num(c.loss.alpha1) << "\n";
  os << "alpha2 = " << fmt_num(c.loss.alpha2) << "\n";
  os << "alpha3 = " << fmt_num(c.loss.alpha3) << "\n";
  os << "alpha4 = " << fmt_num(c.loss.alpha4) << "\n";
  os << "\n[train]\n";
  os << "steps = " << c.train.steps << "\n";
  os << "batch_size = " << c.train.batch_size << "\n";
  os << "lr = " << fmt_num(c.train.lr) << "\n";
  os << "weight_decay = " << fmt_num(c.train.weight_decay) << "\n";
  os << "checkpoint_interval = " << c.train.checkpoint_interval << "\n";
  os << "log_interval = " << c.train.log_interval << "\n";
  os << "seed = " << c.train.seed << "\n";
  os << "\n[eval]\n";
  os << "max_distance = " << fmt_num(c.eval.max_distance) << "\n";
  os << "coverage = " << fmt_num(c.eval.coverage_fraction) << "\n";
  os << "confidence_threshold = " << fmt_num(c.eval.confidence_threshold) << "\n";
  os << "\n[output]\n";
  os << "dir = \"" << c.output_dir << "\"\n";
  return os.str();
}

// Relative output paths are rooted at $CURVELAB_OUT when set.
inline std::string resolve_output_dir(const std::string& dir) {
  if (!dir.empty() && dir.front() == '/') return dir;
  const char* root = std::getenv("CURVELAB_OUT");
  if (root == nullptr || *root == '\0') return dir;
  std::string r(root);
  if (r.back() == '/') r.pop_back();
  return r + "/" + dir;
}

}  // namespace curvelab
