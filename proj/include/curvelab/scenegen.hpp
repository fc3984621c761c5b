#pragma once

// Procedural synthetic road scenes: ground-truth polynomial lanes, a jittered
// camera, a rasterized grayscale input image and an instance segmentation
// mask. Lanes are generated directly in the polynomial family the model
// predicts, so a trained model can in principle reach zero representation
// error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "curvelab/check.hpp"
#include "curvelab/geometry.hpp"
#include "curvelab/rng.hpp"

namespace curvelab {

struct SceneSpec {
  int lane_count_min = 2;
  int lane_count_max = 5;
  double lane_spacing = 3.7;
  double lane_spacing_jitter = 0.25;
  // Shared per-scene base shape, x(y) = offset + a1 y + a2 y^2 + a3 y^3.
  double a1_range = 0.04;
  double a2_range = 8e-4;
  double a3_range = 4e-6;
  // Elevation z(y), kept gentle.
  double z0_range = 0.3;
  double z1_range = 0.008;
  double z2_range = 8e-5;
  double z3_range = 4e-7;
  double y_start_min = 3.0, y_start_max = 8.0;
  double y_end_min = 85.0, y_end_max = 103.0;
  double cam_height = 1.6, cam_height_jitter = 0.15;
  double cam_pitch_deg = 10.0, cam_pitch_jitter_deg = 2.0;
  double focal = 100.0;
  int img_h = 128, img_w = 160, channels = 1;
  int stroke_width = 3;
  double noise_std = 0.04;
  std::uint64_t seed = 1;
  std::vector<double> fixed_ys = default_fixed_ys();
  Range3D range;

  bool valid() const {
    return lane_count_min >= 1 && lane_count_max >= lane_count_min && img_h > 0 && img_w > 0 &&
           stroke_width >= 1 && !fixed_ys.empty() && range.valid();
  }
};

struct GtLane {
  CurveParams curve;
  AnchorPointSet anchors;               // sampled at the fixed y-positions
  std::vector<std::uint8_t> visibility;  // projection validity per fixed-y point
};

struct Scene {
  std::vector<GtLane> lanes;
  CameraModel camera;
  int img_h = 0, img_w = 0, channels = 1;
  std::vector<float> image;         // channels * H * W, values in [0,1]
  std::vector<std::int32_t> seg_mask;  // H * W; 0 background, k = lane instance k (1-based)
};

namespace detail {

inline void stroke_segment(std::vector<std::int32_t>& mask, std::vector<float>& intensity, int H,
                           int W, Vec2 p0, Vec2 p1, double half_width, std::int32_t label,
                           float shade) {
  int x_lo = static_cast<int>(std::floor(std::min(p0.u, p1.u) - half_width));
  int x_hi = static_cast<int>(std::ceil(std::max(p0.u, p1.u) + half_width));
  int y_lo = static_cast<int>(std::floor(std::min(p0.v, p1.v) - half_width));
  int y_hi = static_cast<int>(std::ceil(std::max(p0.v, p1.v) + half_width));
  x_lo = std::max(x_lo, 0);
  y_lo = std::max(y_lo, 0);
  x_hi = std::min(x_hi, W - 1);
  y_hi = std::min(y_hi, H - 1);
  double dx = p1.u - p0.u, dy = p1.v - p0.v;
  double len2 = dx * dx + dy * dy;
  for (int py = y_lo; py <= y_hi; ++py)
    for (int px = x_lo; px <= x_hi; ++px) {
      double cx = px + 0.5, cy = py + 0.5;
      double t = len2 > 0.0 ? ((cx - p0.u) * dx + (cy - p0.v) * dy) / len2 : 0.0;
      t = std::min(1.0, std::max(0.0, t));
      double qx = p0.u + t * dx - cx, qy = p0.v + t * dy - cy;
      if (qx * qx + qy * qy <= half_width * half_width) {
        mask[py * W + px] = label;
        intensity[py * W + px] = shade;
      }
    }
}

inline void blur3(std::vector<float>& img, int H, int W) {
  std::vector<float> tmp(img.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      float a = img[y * W + std::max(0, x - 1)];
      float b = img[y * W + x];
      float c = img[y * W + std::min(W - 1, x + 1)];
      tmp[y * W + x] = 0.25f * a + 0.5f * b + 0.25f * c;
    }
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      float a = tmp[std::max(0, y - 1) * W + x];
      float b = tmp[y * W + x];
      float c = tmp[std::min(H - 1, y + 1) * W + x];
      img[y * W + x] = 0.25f * a + 0.5f * b + 0.25f * c;
    }
}

}  // namespace detail

// Draw lanes by projecting densely sampled curve points and stroking the
// segments. Later instances overwrite earlier ones. The image is the blurred
// stroke rendering plus Gaussian pixel noise.
inline void rasterize(const std::vector<CurveParams>& lanes, const CameraModel& cam, int img_h,
                      int img_w, int stroke_width, double noise_std, std::uint64_t noise_seed,
                      std::vector<float>* image, std::vector<std::int32_t>* seg_mask,
                      int channels = 1) {
  CVL_CHECK(stroke_width >= 1, "rasterize: stroke width must be >= 1");
  seg_mask->assign(static_cast<std::size_t>(img_h) * img_w, 0);
  std::vector<float> intensity(static_cast<std::size_t>(img_h) * img_w, 0.0f);
  const int steps = 400;
  double half_width = stroke_width * 0.5;
  for (std::size_t k = 0; k < lanes.size(); ++k) {
    const CurveParams& c = lanes[k];
    float shade = 0.55f + 0.45f * static_cast<float>(k % 5) / 4.0f;
    Vec2 prev{};
    std::uint8_t prev_ok = 0;
    for (int s = 0; s <= steps; ++s) {
      double y = c.y_start + (c.y_end - c.y_start) * s / steps;
      Vec3 p{polyval(c.a, y), y, polyval(c.b, y)};
      Vec3 pc = mat3_apply(cam.rotation, p);
      pc.x += cam.translation[0];
      pc.y += cam.translation[1];
      pc.z += cam.translation[2];
      std::uint8_t ok = pc.z > 0.0 ? 1 : 0;
      Vec2 uv{-1.0, -1.0};
      if (ok) {
        Vec3 q = mat3_apply(cam.intrinsics, pc);
        uv = {q.x / q.z, q.y / q.z};
      }
      if (ok && prev_ok)
        detail::stroke_segment(*seg_mask, intensity, img_h, img_w, prev, uv, half_width,
                               static_cast<std::int32_t>(k + 1), shade);
      prev = uv;
      prev_ok = ok;
    }
  }
  detail::blur3(intensity, img_h, img_w);
  image->assign(static_cast<std::size_t>(channels) * img_h * img_w, 0.0f);
  Rng noise(noise_seed, 0x6e6f697365ULL);
  for (int ch = 0; ch < channels; ++ch)
    for (std::size_t i = 0; i < intensity.size(); ++i) {
      double v = intensity[i] + (noise_std > 0.0 ? noise.normal(0.0, noise_std) : 0.0);
      (*image)[static_cast<std::size_t>(ch) * img_h * img_w + i] =
          static_cast<float>(std::min(1.0, std::max(0.0, v)));
    }
}

namespace detail {

// Fraction of projected, in-image GT points that sit within `radius` pixels
// of a mask pixel carrying their own instance label.
inline double mask_agreement(const Scene& scene, double radius) {
  int total = 0, good = 0;
  int H = scene.img_h, W = scene.img_w;
  for (std::size_t k = 0; k < scene.lanes.size(); ++k) {
    const GtLane& lane = scene.lanes[k];
    auto proj = project_points(lane.anchors, scene.camera);
    for (int n = 0; n < lane.anchors.size(); ++n) {
      if (!lane.anchors.in_extent[n] || !proj.flags[n]) continue;
      ++total;
      int cx = static_cast<int>(std::floor(proj.uv[n].u));
      int cy = static_cast<int>(std::floor(proj.uv[n].v));
      int r = static_cast<int>(std::ceil(radius));
      bool found = false;
      for (int dy = -r; dy <= r && !found; ++dy)
        for (int dx = -r; dx <= r && !found; ++dx) {
          int px = cx + dx, py = cy + dy;
          if (px < 0 || px >= W || py < 0 || py >= H) continue;
          if (dx * dx + dy * dy > radius * radius) continue;
          if (scene.seg_mask[py * W + px] == static_cast<std::int32_t>(k + 1)) found = true;
        }
      if (found) ++good;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(good) / total;
}

inline Scene try_generate(const SceneSpec& spec, int index, int attempt) {
  Rng rng(spec.seed, static_cast<std::uint64_t>(index),
          static_cast<std::uint64_t>(attempt));
  Scene scene;
  scene.img_h = spec.img_h;
  scene.img_w = spec.img_w;
  scene.channels = spec.channels;

  double pitch = (spec.cam_pitch_deg + rng.uniform(-spec.cam_pitch_jitter_deg,
                                                   spec.cam_pitch_jitter_deg)) *
                 M_PI / 180.0;
  double cam_h = spec.cam_height + rng.uniform(-spec.cam_height_jitter, spec.cam_height_jitter);
  scene.camera = make_camera(spec.focal, spec.focal, spec.img_w * 0.5, spec.img_h * 0.5, pitch,
                             cam_h, spec.img_h, spec.img_w);

  int count = rng.uniform_int(spec.lane_count_min, spec.lane_count_max);
  double base_a1 = rng.uniform(-spec.a1_range, spec.a1_range);
  double base_a2 = rng.uniform(-spec.a2_range, spec.a2_range);
  double base_a3 = rng.uniform(-spec.a3_range, spec.a3_range);
  double base_z0 = rng.uniform(-spec.z0_range, spec.z0_range);
  double base_z1 = rng.uniform(-spec.z1_range, spec.z1_range);
  double base_z2 = rng.uniform(-spec.z2_range, spec.z2_range);
  double base_z3 = rng.uniform(-spec.z3_range, spec.z3_range);
  double shift = rng.uniform(-spec.lane_spacing * 0.5, spec.lane_spacing * 0.5);

  std::vector<CurveParams> curves;
  for (int k = 0; k < count; ++k) {
    CurveParams c;
    c.confidence = 1.0;
    double offset = (k - (count - 1) * 0.5) * spec.lane_spacing + shift +
                    rng.uniform(-spec.lane_spacing_jitter, spec.lane_spacing_jitter);
    c.a = {offset, base_a1 + rng.uniform(-spec.a1_range, spec.a1_range) * 0.25,
           base_a2 + rng.uniform(-spec.a2_range, spec.a2_range) * 0.25,
           base_a3 + rng.uniform(-spec.a3_range, spec.a3_range) * 0.25};
    c.b = {base_z0 + rng.uniform(-spec.z0_range, spec.z0_range) * 0.25,
           base_z1 + rng.uniform(-spec.z1_range, spec.z1_range) * 0.25,
           base_z2 + rng.uniform(-spec.z2_range, spec.z2_range) * 0.25,
           base_z3 + rng.uniform(-spec.z3_range, spec.z3_range) * 0.25};
    c.y_start = rng.uniform(spec.y_start_min, spec.y_start_max);
    c.y_end = rng.uniform(spec.y_end_min, spec.y_end_max);
    curves.push_back(std::move(c));
  }

  for (auto& c : curves) {
    GtLane lane;
    lane.curve = c;
    lane.anchors = sample_curve(c, spec.fixed_ys);
    auto proj = project_points(lane.anchors, scene.camera);
    lane.visibility = proj.flags;
    scene.lanes.push_back(std::move(lane));
  }

  std::uint64_t noise_seed = mix64(spec.seed + mix64(static_cast<std::uint64_t>(index) * 2 + 1));
  rasterize(curves, scene.camera, spec.img_h, spec.img_w, spec.stroke_width, spec.noise_std,
            noise_seed, &scene.image, &scene.seg_mask, spec.channels);
  return scene;
}

inline bool scene_acceptable(const SceneSpec& spec, const Scene& scene) {
  // At least one lane whose every in-extent fixed-y point projects valid.
  bool any_full = false;
  for (const auto& lane : scene.lanes) {
    bool full = true;
    int in_ext = 0;
    for (int n = 0; n < lane.anchors.size(); ++n) {
      if (!lane.anchors.in_extent[n]) continue;
      ++in_ext;
      if (!lane.visibility[n]) full = false;
    }
    if (in_ext > 0 && full) any_full = true;
  }
  if (!any_full) return false;
  return mask_agreement(scene, spec.stroke_width) >= 0.95;
}

}  // namespace detail

// Deterministic in (spec.seed, index): retries with an internal attempt
// counter until the scene has a fully visible lane and the mask agrees with
// the projected ground truth.
inline Scene generate_scene(const SceneSpec& spec, int index) {
  CVL_CHECK(spec.valid(), "generate_scene: invalid spec");
  const int max_attempts = 64;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    Scene scene = detail::try_generate(spec, index, attempt);
    if (detail::scene_acceptable(spec, scene)) return scene;
  }
  throw CheckError("generate_scene: no acceptable scene after max attempts (spec too tight)");
}

inline std::vector<Scene> generate_scenes(const SceneSpec& spec, int count) {
  std::vector<Scene> out(count);
  for (int i = 0; i < count; ++i) out[i] = generate_scene(spec, i);
  return out;
}

}  // namespace curvelab
