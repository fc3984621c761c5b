#pragma once

// Checkpoint file: 8-byte magic, little-endian u64 header length, JSON header
// (model config, step counters, array table), then float32 blobs for every
// parameter and both Adam moment buffers. Saving rounds the live doubles to
// float32 in place so a run continued in process is bit-identical to one
// resumed from the file.

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvelab/check.hpp"
#include "curvelab/model.hpp"
#include "curvelab/nn.hpp"

namespace curvelab {

inline constexpr char kCheckpointMagic[9] = "CVLCKPT1";
inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json range_to_json(const Range3D& r) {
  return {{"x_min", r.x_min}, {"x_max", r.x_max}, {"y_min", r.y_min},
          {"y_max", r.y_max}, {"z_min", r.z_min}, {"z_max", r.z_max}};
}

inline Range3D range_from_json(const nlohmann::json& j) {
  Range3D r;
  r.x_min = j.at("x_min");
  r.x_max = j.at("x_max");
  r.y_min = j.at("y_min");
  r.y_max = j.at("y_max");
  r.z_min = j.at("z_min");
  r.z_max = j.at("z_max");
  return r;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"embed_dim", c.embed_dim},
          {"heads", c.heads},
          {"sample_points", c.sample_points},
          {"levels", c.levels},
          {"encoder_layers", c.encoder_layers},
          {"decoder_layers", c.decoder_layers},
          {"num_queries", c.num_queries},
          {"poly_order", c.poly_order},
          {"img_h", c.img_h},
          {"img_w", c.img_w},
          {"channels", c.channels},
          {"backbone_channels", c.backbone_channels},
          {"fixed_ys", c.fixed_ys},
          {"range", range_to_json(c.range)},
          {"delta_clamp", c.delta_clamp},
          {"coef_scale_x", c.coef_scale_x},
          {"coef_scale_z", c.coef_scale_z},
          {"conf_scale", c.conf_scale},
          {"sampling", to_string(c.sampling)},
          {"head", to_string(c.head)},
          {"seg_branch", c.seg_branch},
          {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.embed_dim = j.at("embed_dim");
  c.heads = j.at("heads");
  c.sample_points = j.at("sample_points");
  c.levels = j.at("levels");
  c.encoder_layers = j.at("encoder_layers");
  c.decoder_layers = j.at("decoder_layers");
  c.num_queries = j.at("num_queries");
  c.poly_order = j.at("poly_order");
  c.img_h = j.at("img_h");
  c.img_w = j.at("img_w");
  c.channels = j.at("channels");
  c.backbone_channels = j.at("backbone_channels").get<std::vector<int>>();
  c.fixed_ys = j.at("fixed_ys").get<std::vector<double>>();
  c.range = range_from_json(j.at("range"));
  c.delta_clamp = j.at("delta_clamp");
  c.coef_scale_x = j.at("coef_scale_x");
  c.coef_scale_z = j.at("coef_scale_z");
  c.conf_scale = j.at("conf_scale");
  c.sampling = sampling_mode_from_string(j.at("sampling"));
  c.head = head_mode_from_string(j.at("head"));
  c.seg_branch = j.at("seg_branch");
  c.init_seed = j.at("init_seed");
  return c;
}

namespace detail {

inline void round_to_f32(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

inline void write_f32_blob(std::FILE* f, const std::vector<double>& v) {
  std::vector<float> buf(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) buf[i] = static_cast<float>(v[i]);
  if (!buf.empty() && std::fwrite(buf.data(), sizeof(float), buf.size(), f) != buf.size())
    throw std::runtime_error("checkpoint: short write");
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const ModelConfig& cfg, ParamStore& params,
                            Adam& opt, int step) {
  // Collect (name, live array) in a stable order: parameters first, then the
  // optimizer moments.
  std::vector<std::pair<std::string, std::vector<double>*>> arrays;
  nlohmann::json table = nlohmann::json::array();
  std::vector<std::pair<std::string, Shape>> param_shapes;
  for (const auto& [name, p] : params.all()) param_shapes.push_back({name, p.shape()});

  std::uint64_t offset = 0;
  auto add = [&](const std::string& name, const Shape& shape, std::vector<double>* data) {
    CVL_CHECK(numel(shape) == static_cast<std::int64_t>(data->size()),
              "checkpoint: array size mismatch for " + name);
    detail::round_to_f32(*data);
    table.push_back({{"name", name},
                     {"shape", shape},
                     {"offset", offset},
                     {"count", data->size()}});
    arrays.push_back({name, data});
    offset += data->size() * sizeof(float);
  };
  for (const auto& [name, shape] : param_shapes) add(name, shape, &params.get(name).node()->val);
  for (const auto& [name, shape] : param_shapes) {
    auto it = opt.m_state().find(name);
    if (it == opt.m_state().end())
      opt.m_state()[name] = std::vector<double>(numel(shape), 0.0);
    add("adam.m." + name, shape, &opt.m_state()[name]);
    if (opt.v_state().find(name) == opt.v_state().end())
      opt.v_state()[name] = std::vector<double>(numel(shape), 0.0);
    add("adam.v." + name, shape, &opt.v_state()[name]);
  }

  nlohmann::json header = {{"format", "curvelab-checkpoint"},
                           {"version", kCheckpointVersion},
                           {"step", step},
                           {"adam_step", opt.step_count()},
                           {"model", model_config_to_json(cfg)},
                           {"arrays", table}};
  std::string hdr = header.dump();

  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  std::uint64_t hlen = hdr.size();
  bool ok = std::fwrite(kCheckpointMagic, 1, 8, f) == 8 &&
            std::fwrite(&hlen, sizeof(hlen), 1, f) == 1 &&
            (hdr.empty() || std::fwrite(hdr.data(), 1, hdr.size(), f) == hdr.size());
  if (!ok) {
    std::fclose(f);
    throw std::runtime_error("checkpoint: short write");
  }
  try {
    for (auto& [name, data] : arrays) detail::write_f32_blob(f, *data);
  } catch (...) {
    std::fclose(f);
    throw;
  }
  std::fclose(f);
}

struct CheckpointData {
  ModelConfig config;
  int step = 0;
  int adam_step = 0;
  std::map<std::string, std::pair<Shape, std::vector<double>>> arrays;
};

inline CheckpointData read_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
  auto fail = [&](const std::string& msg) -> std::runtime_error {
    std::fclose(f);
    return std::runtime_error("checkpoint: " + msg + " in " + path);
  };
  char magic[8];
  if (std::fread(magic, 1, 8, f) != 8) throw fail("truncated magic");
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw fail("bad magic");
  std::uint64_t hlen = 0;
  if (std::fread(&hlen, sizeof(hlen), 1, f) != 1) throw fail("truncated header length");
  std::string hdr(hlen, '\0');
  if (hlen > 0 && std::fread(hdr.data(), 1, hlen, f) != hlen) throw fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hdr);
  } catch (const std::exception&) {
    throw fail("unparseable header");
  }
  if (header.value("format", "") != "curvelab-checkpoint") throw fail("unknown format");
  if (header.value("version", -1) != kCheckpointVersion) throw fail("unsupported version");

  CheckpointData data;
  data.config = model_config_from_json(header.at("model"));
  data.step = header.at("step");
  data.adam_step = header.at("adam_step");
  std::uint64_t blob_base = 8 + sizeof(hlen) + hlen;
  for (const auto& entry : header.at("arrays")) {
    std::string name = entry.at("name");
    Shape shape = entry.at("shape").get<Shape>();
    std::uint64_t offset = entry.at("offset");
    std::uint64_t count = entry.at("count");
    if (count != static_cast<std::uint64_t>(numel(shape))) throw fail("array count mismatch");
    if (std::fseek(f, static_cast<long>(blob_base + offset), SEEK_SET) != 0)
      throw fail("seek failure");
    std::vector<float> buf(count);
    if (count > 0 && std::fread(buf.data(), sizeof(float), count, f) != count)
      throw fail("truncated array " + name);
    std::vector<double> v(count);
    for (std::size_t i = 0; i < count; ++i) v[i] = static_cast<double>(buf[i]);
    data.arrays[name] = {std::move(shape), std::move(v)};
  }
  std::fclose(f);
  return data;
}

// Copies the stored arrays into an already-constructed model and optimizer.
// Every parameter must be present; moment buffers restore the Adam state.
inline void apply_checkpoint(const CheckpointData& data, ParamStore& params, Adam& opt) {
  for (const auto& [name, p] : params.all()) {
    auto it = data.arrays.find(name);
    CVL_CHECK(it != data.arrays.end(), "checkpoint: missing parameter " + name);
    CVL_CHECK(it->second.first == p.shape(), "checkpoint: shape mismatch for " + name);
    p.node()->val = it->second.second;

    auto im = data.arrays.find("adam.m." + name);
    auto iv = data.arrays.find("adam.v." + name);
    CVL_CHECK(im != data.arrays.end() && iv != data.arrays.end(),
              "checkpoint: missing optimizer state for " + name);
    opt.m_state()[name] = im->second.second;
    opt.v_state()[name] = iv->second.second;
  }
  opt.set_step_count(data.adam_step);
}

}  // namespace curvelab
