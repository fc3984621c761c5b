// Scene generator and dataset IO: determinism, label hygiene, geometric
// consistency between the mask and the ground truth, and exact round-trips.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "curvelab/scene_io.hpp"
#include "curvelab/scenegen.hpp"

using namespace curvelab;

namespace {

SceneSpec small_spec(std::uint64_t seed = 11) {
  SceneSpec spec;
  spec.seed = seed;
  return spec;
}

std::string temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("curvelab_test_" + tag);
  std::filesystem::remove_all(p);
  return p.string();
}

}  // namespace

TEST_CASE("scene generation is deterministic per index") {
  SceneSpec spec = small_spec();
  Scene a = generate_scene(spec, 3);
  Scene b = generate_scene(spec, 3);
  REQUIRE(a.image.size() == b.image.size());
  CHECK(std::equal(a.image.begin(), a.image.end(), b.image.begin()));
  CHECK(std::equal(a.seg_mask.begin(), a.seg_mask.end(), b.seg_mask.begin()));
  REQUIRE(a.lanes.size() == b.lanes.size());
  for (std::size_t k = 0; k < a.lanes.size(); ++k) {
    CHECK(a.lanes[k].curve.a == b.lanes[k].curve.a);
    CHECK(a.lanes[k].curve.b == b.lanes[k].curve.b);
  }
  // Different index gives a different scene.
  Scene c = generate_scene(spec, 4);
  CHECK(!std::equal(a.image.begin(), a.image.end(), c.image.begin()));
}

TEST_CASE("scenes satisfy the generator's structural contract") {
  SceneSpec spec = small_spec(21);
  auto scenes = generate_scenes(spec, 6);
  REQUIRE(scenes.size() == 6);
  for (const Scene& s : scenes) {
    REQUIRE(s.camera.valid());
    int n_lanes = static_cast<int>(s.lanes.size());
    CHECK(n_lanes >= spec.lane_count_min);
    CHECK(n_lanes <= spec.lane_count_max);
    CHECK(s.image.size() == static_cast<std::size_t>(s.channels) * s.img_h * s.img_w);
    for (float v : s.image) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    // Mask labels are 0 (background) or 1..lane_count.
    std::set<std::int32_t> labels(s.seg_mask.begin(), s.seg_mask.end());
    for (auto l : labels) {
      CHECK(l >= 0);
      CHECK(l <= n_lanes);
    }
    CHECK(labels.count(0) == 1);
    CHECK(labels.size() > 1);  // some lane pixels exist

    // At least one lane is fully visible: every anchor inside its extent
    // projects into the image.
    bool any_full = false;
    for (const auto& lane : s.lanes) {
      REQUIRE(lane.anchors.size() == static_cast<int>(spec.fixed_ys.size()));
      REQUIRE(lane.visibility.size() == spec.fixed_ys.size());
      bool full = true;
      int in_extent = 0;
      for (int n = 0; n < lane.anchors.size(); ++n) {
        if (!lane.anchors.in_extent[n]) continue;
        ++in_extent;
        if (!lane.visibility[n]) full = false;
      }
      if (full && in_extent > 0) any_full = true;
    }
    CHECK(any_full);
  }
}

TEST_CASE("stored anchors re-derive from the stored curve") {
  SceneSpec spec = small_spec(31);
  Scene s = generate_scene(spec, 0);
  for (const auto& lane : s.lanes) {
    AnchorPointSet re = sample_curve(lane.curve, spec.fixed_ys);
    REQUIRE(re.size() == lane.anchors.size());
    for (int n = 0; n < re.size(); ++n) {
      CHECK(re.points[n].x == lane.anchors.points[n].x);
      CHECK(re.points[n].y == lane.anchors.points[n].y);
      CHECK(re.points[n].z == lane.anchors.points[n].z);
      CHECK(re.in_extent[n] == lane.anchors.in_extent[n]);
    }
  }
}

TEST_CASE("mask pixels agree with projected ground truth") {
  SceneSpec spec = small_spec(41);
  Scene s = generate_scene(spec, 1);
  double agreement = detail::mask_agreement(s, 2.0);
  CHECK(agreement >= 0.95);
}

TEST_CASE("visibility flags match fresh projections") {
  SceneSpec spec = small_spec(51);
  Scene s = generate_scene(spec, 2);
  for (const auto& lane : s.lanes) {
    ProjectedPoints pp = project_points(lane.anchors, s.camera);
    for (int n = 0; n < lane.anchors.size(); ++n) CHECK(pp.flags[n] == lane.visibility[n]);
  }
}

TEST_CASE("scene files round-trip exactly") {
  SceneSpec spec = small_spec(61);
  auto scenes = generate_scenes(spec, 3);
  std::string dir = temp_dir("roundtrip");
  write_scenes(scenes, dir);

  auto loaded = read_scenes(dir);
  REQUIRE(loaded.size() == scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& a = scenes[i];
    const Scene& b = loaded[i];
    CHECK(a.img_h == b.img_h);
    CHECK(a.img_w == b.img_w);
    CHECK(a.channels == b.channels);
    CHECK(std::equal(a.image.begin(), a.image.end(), b.image.begin()));
    CHECK(std::equal(a.seg_mask.begin(), a.seg_mask.end(), b.seg_mask.begin()));
    REQUIRE(a.lanes.size() == b.lanes.size());
    for (std::size_t k = 0; k < a.lanes.size(); ++k) {
      CHECK(a.lanes[k].curve.a == b.lanes[k].curve.a);
      CHECK(a.lanes[k].curve.b == b.lanes[k].curve.b);
      CHECK(a.lanes[k].curve.y_start == b.lanes[k].curve.y_start);
      CHECK(a.lanes[k].curve.y_end == b.lanes[k].curve.y_end);
      CHECK(a.lanes[k].visibility == b.lanes[k].visibility);
      for (int n = 0; n < a.lanes[k].anchors.size(); ++n) {
        CHECK(a.lanes[k].anchors.points[n].x == b.lanes[k].anchors.points[n].x);
        CHECK(a.lanes[k].anchors.points[n].z == b.lanes[k].anchors.points[n].z);
      }
    }
    for (int i2 = 0; i2 < 9; ++i2) {
      CHECK(a.camera.intrinsics[i2] == b.camera.intrinsics[i2]);
      CHECK(a.camera.rotation[i2] == b.camera.rotation[i2]);
    }
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("write then write again produces identical bytes") {
  SceneSpec spec = small_spec(71);
  auto scenes = generate_scenes(spec, 2);
  std::string d1 = temp_dir("bytes1"), d2 = temp_dir("bytes2");
  write_scenes(scenes, d1);
  write_scenes(scenes, d2);
  for (const char* name : {"scenes.jsonl", "scenes.bin"}) {
    std::ifstream f1(d1 + "/" + name, std::ios::binary), f2(d2 + "/" + name, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
    CHECK(!s1.empty());
  }
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("reader rejects corrupted datasets") {
  SceneSpec spec = small_spec(81);
  auto scenes = generate_scenes(spec, 2);

  SECTION("bad magic") {
    std::string dir = temp_dir("badmagic");
    write_scenes(scenes, dir);
    {
      std::fstream f(dir + "/scenes.bin", std::ios::in | std::ios::out | std::ios::binary);
      f.seekp(0);
      f.write("XXXXXXXX", 8);
    }
    CHECK_THROWS(read_scenes(dir));
    std::filesystem::remove_all(dir);
  }
  SECTION("truncated blob file") {
    std::string dir = temp_dir("trunc");
    write_scenes(scenes, dir);
    auto size = std::filesystem::file_size(dir + "/scenes.bin");
    std::filesystem::resize_file(dir + "/scenes.bin", size / 2);
    CHECK_THROWS(read_scenes(dir));
    std::filesystem::remove_all(dir);
  }
  SECTION("missing directory") { CHECK_THROWS(read_scenes(temp_dir("missing"))); }
}

TEST_CASE("empty scene list round-trips") {
  std::string dir = temp_dir("empty");
  write_scenes({}, dir);
  auto loaded = read_scenes(dir);
  CHECK(loaded.empty());
  std::filesystem::remove_all(dir);
}
