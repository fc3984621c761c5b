#pragma once

// Scene dataset persistence: a `scenes.jsonl` index (header line + one JSON
// object per scene) next to a `scenes.bin` blob file holding the float32
// image and int32 mask arrays, little-endian. Doubles round-trip exactly
// through the JSON layer; array blobs round-trip bit-for-bit.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvelab/check.hpp"
#include "curvelab/scenegen.hpp"

namespace curvelab {

inline constexpr int kSceneFormatVersion = 1;
inline constexpr char kSceneBinMagic[8] = {'C', 'V', 'L', 'B', 'I', 'N', '0', '1'};

namespace detail {

inline nlohmann::json camera_to_json(const CameraModel& cam) {
  nlohmann::json j;
  j["K"] = std::vector<double>(cam.intrinsics.begin(), cam.intrinsics.end());
  j["R"] = std::vector<double>(cam.rotation.begin(), cam.rotation.end());
  j["t"] = std::vector<double>(cam.translation.begin(), cam.translation.end());
  j["h"] = cam.height;
  j["w"] = cam.width;
  return j;
}

inline CameraModel camera_from_json(const nlohmann::json& j) {
  CameraModel cam;
  auto k = j.at("K").get<std::vector<double>>();
  auto r = j.at("R").get<std::vector<double>>();
  auto t = j.at("t").get<std::vector<double>>();
  CVL_CHECK(k.size() == 9 && r.size() == 9 && t.size() == 3, "camera_from_json: bad sizes");
  std::copy(k.begin(), k.end(), cam.intrinsics.begin());
  std::copy(r.begin(), r.end(), cam.rotation.begin());
  std::copy(t.begin(), t.end(), cam.translation.begin());
  cam.height = j.at("h").get<int>();
  cam.width = j.at("w").get<int>();
  return cam;
}

inline nlohmann::json lane_to_json(const GtLane& lane) {
  nlohmann::json j;
  j["confidence"] = lane.curve.confidence;
  j["y_start"] = lane.curve.y_start;
  j["y_end"] = lane.curve.y_end;
  j["a"] = lane.curve.a;
  j["b"] = lane.curve.b;
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : lane.anchors.points) pts.push_back({p.x, p.y, p.z});
  j["points"] = std::move(pts);
  j["in_extent"] = std::vector<int>(lane.anchors.in_extent.begin(), lane.anchors.in_extent.end());
  j["visibility"] = std::vector<int>(lane.visibility.begin(), lane.visibility.end());
  return j;
}

inline GtLane lane_from_json(const nlohmann::json& j) {
  GtLane lane;
  lane.curve.confidence = j.at("confidence").get<double>();
  lane.curve.y_start = j.at("y_start").get<double>();
  lane.curve.y_end = j.at("y_end").get<double>();
  lane.curve.a = j.at("a").get<std::vector<double>>();
  lane.curve.b = j.at("b").get<std::vector<double>>();
  for (const auto& p : j.at("points")) {
    CVL_CHECK(p.size() == 3, "lane_from_json: point arity");
    lane.anchors.points.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
  }
  for (int v : j.at("in_extent").get<std::vector<int>>())
    lane.anchors.in_extent.push_back(static_cast<std::uint8_t>(v));
  for (int v : j.at("visibility").get<std::vector<int>>())
    lane.visibility.push_back(static_cast<std::uint8_t>(v));
  return lane;
}

}  // namespace detail

// Writes `scenes.jsonl` and `scenes.bin` under dir, creating it if needed.
inline void write_scenes(const std::vector<Scene>& scenes, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  std::ofstream bin(fs::path(dir) / "scenes.bin", std::ios::binary | std::ios::trunc);
  CVL_CHECK(bin.good(), "write_scenes: cannot open scenes.bin");
  bin.write(kSceneBinMagic, sizeof(kSceneBinMagic));

  std::ofstream jsonl(fs::path(dir) / "scenes.jsonl", std::ios::trunc);
  CVL_CHECK(jsonl.good(), "write_scenes: cannot open scenes.jsonl");
  nlohmann::json header;
  header["format"] = "curvelab-scenes";
  header["version"] = kSceneFormatVersion;
  header["count"] = scenes.size();
  jsonl << header.dump() << "\n";

  for (const auto& scene : scenes) {
    nlohmann::json j;
    j["camera"] = detail::camera_to_json(scene.camera);
    nlohmann::json lanes = nlohmann::json::array();
    for (const auto& lane : scene.lanes) lanes.push_back(detail::lane_to_json(lane));
    j["lanes"] = std::move(lanes);
    j["img_h"] = scene.img_h;
    j["img_w"] = scene.img_w;
    j["channels"] = scene.channels;

    std::uint64_t image_off = static_cast<std::uint64_t>(bin.tellp());
    bin.write(reinterpret_cast<const char*>(scene.image.data()),
              static_cast<std::streamsize>(scene.image.size() * sizeof(float)));
    std::uint64_t seg_off = static_cast<std::uint64_t>(bin.tellp());
    bin.write(reinterpret_cast<const char*>(scene.seg_mask.data()),
              static_cast<std::streamsize>(scene.seg_mask.size() * sizeof(std::int32_t)));
    j["image_offset"] = image_off;
    j["image_count"] = scene.image.size();
    j["seg_offset"] = seg_off;
    j["seg_count"] = scene.seg_mask.size();
    jsonl << j.dump() << "\n";
  }
  CVL_CHECK(bin.good() && jsonl.good(), "write_scenes: write failed");
}

inline std::vector<Scene> read_scenes(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream jsonl(fs::path(dir) / "scenes.jsonl");
  CVL_CHECK(jsonl.good(), "read_scenes: cannot open scenes.jsonl in " + dir);
  std::ifstream bin(fs::path(dir) / "scenes.bin", std::ios::binary);
  CVL_CHECK(bin.good(), "read_scenes: cannot open scenes.bin in " + dir);

  char magic[8];
  bin.read(magic, sizeof(magic));
  CVL_CHECK(bin.gcount() == sizeof(magic) && std::equal(magic, magic + 8, kSceneBinMagic),
            "read_scenes: bad scenes.bin magic");
  bin.seekg(0, std::ios::end);
  std::uint64_t bin_size = static_cast<std::uint64_t>(bin.tellg());

  std::string line;
  CVL_CHECK(static_cast<bool>(std::getline(jsonl, line)), "read_scenes: missing header line");
  nlohmann::json header = nlohmann::json::parse(line);
  CVL_CHECK(header.value("format", "") == "curvelab-scenes", "read_scenes: unknown format");
  CVL_CHECK(header.value("version", -1) == kSceneFormatVersion,
            "read_scenes: unsupported format version");
  std::size_t count = header.at("count").get<std::size_t>();

  std::vector<Scene> scenes;
  scenes.reserve(count);
  while (std::getline(jsonl, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    Scene scene;
    scene.camera = detail::camera_from_json(j.at("camera"));
    for (const auto& lj : j.at("lanes")) scene.lanes.push_back(detail::lane_from_json(lj));
    scene.img_h = j.at("img_h").get<int>();
    scene.img_w = j.at("img_w").get<int>();
    scene.channels = j.at("channels").get<int>();

    std::uint64_t image_off = j.at("image_offset").get<std::uint64_t>();
    std::size_t image_count = j.at("image_count").get<std::size_t>();
    std::uint64_t seg_off = j.at("seg_offset").get<std::uint64_t>();
    std::size_t seg_count = j.at("seg_count").get<std::size_t>();
    CVL_CHECK(image_off + image_count * sizeof(float) <= bin_size &&
                  seg_off + seg_count * sizeof(std::int32_t) <= bin_size,
              "read_scenes: scenes.bin truncated");
    scene.image.resize(image_count);
    bin.seekg(static_cast<std::streamoff>(image_off));
    bin.read(reinterpret_cast<char*>(scene.image.data()),
             static_cast<std::streamsize>(image_count * sizeof(float)));
    scene.seg_mask.resize(seg_count);
    bin.seekg(static_cast<std::streamoff>(seg_off));
    bin.read(reinterpret_cast<char*>(scene.seg_mask.data()),
             static_cast<std::streamsize>(seg_count * sizeof(std::int32_t)));
    CVL_CHECK(bin.good(), "read_scenes: blob read failed");
    scenes.push_back(std::move(scene));
  }
  CVL_CHECK(scenes.size() == count, "read_scenes: scene count mismatch with header");
  return scenes;
}

}  // namespace curvelab
