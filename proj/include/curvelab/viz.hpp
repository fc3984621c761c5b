#pragma once

// File-emitting visualization: camera-view overlays of predicted vs ground
// truth lanes and a BEV x-y plot. Ground truth draws green, predictions red.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "curvelab/geometry.hpp"
#include "curvelab/metrics.hpp"
#include "curvelab/png.hpp"
#include "curvelab/scenegen.hpp"

namespace curvelab {
namespace viz {

struct Rgb {
  std::uint8_t r, g, b;
};

inline constexpr Rgb kGtColor{40, 220, 60};
inline constexpr Rgb kPredColor{235, 60, 50};

inline void draw_line(RgbImage* img, double x0, double y0, double x1, double y1, Rgb c) {
  int steps = static_cast<int>(std::ceil(std::max(std::fabs(x1 - x0), std::fabs(y1 - y0)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    double t = steps > 0 ? static_cast<double>(i) / steps : 0.0;
    int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
    int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
    img->set(y, x, c.r, c.g, c.b);
  }
}

inline void draw_marker(RgbImage* img, double x, double y, Rgb c) {
  int cx = static_cast<int>(std::lround(x)), cy = static_cast<int>(std::lround(y));
  for (int dy = -1; dy <= 1; ++dy)
    for (int dx = -1; dx <= 1; ++dx) img->set(cy + dy, cx + dx, c.r, c.g, c.b);
}

inline RgbImage scene_background(const Scene& scene) {
  RgbImage img(scene.img_h, scene.img_w);
  for (int y = 0; y < scene.img_h; ++y)
    for (int x = 0; x < scene.img_w; ++x) {
      float v = scene.image[static_cast<std::size_t>(y) * scene.img_w + x];
      auto g = static_cast<std::uint8_t>(std::clamp(v, 0.0f, 1.0f) * 255.0f);
      img.set(y, x, g, g, g);
    }
  return img;
}

// Projects a lane sampled densely in y and draws the in-front polyline.
inline void overlay_lane(RgbImage* img, const CameraModel& cam, const EvalLane& lane,
                         const std::vector<double>& ys, Rgb color) {
  bool have_prev = false;
  double pu = 0, pv = 0;
  for (std::size_t n = 0; n < ys.size(); ++n) {
    if (ys[n] < lane.y_start || ys[n] > lane.y_end ||
        (!lane.visibility.empty() && !lane.visibility[n])) {
      have_prev = false;
      continue;
    }
    Vec3 p{lane.xs[n], ys[n], lane.zs[n]};
    Vec2 uv;
    std::uint8_t flag = 0;
    project_point(cam, p, &uv, &flag);
    if (uv.u < 0 && uv.v < 0) {
      have_prev = false;
      continue;
    }
    if (have_prev) draw_line(img, pu, pv, uv.u, uv.v, color);
    draw_marker(img, uv.u, uv.v, color);
    pu = uv.u;
    pv = uv.v;
    have_prev = true;
  }
}

inline void write_overlay(const std::string& path, const Scene& scene,
                          const std::vector<EvalLane>& preds, const std::vector<EvalLane>& gts,
                          const std::vector<double>& ys) {
  RgbImage img = scene_background(scene);
  for (const auto& g : gts) overlay_lane(&img, scene.camera, g, ys, kGtColor);
  for (const auto& p : preds) overlay_lane(&img, scene.camera, p, ys, kPredColor);
  write_png(path, img);
}

// Top-down x (horizontal) vs y (vertical, bottom = near) plot.
inline void write_bev(const std::string& path, const std::vector<EvalLane>& preds,
                      const std::vector<EvalLane>& gts, const std::vector<double>& ys,
                      const Range3D& range, int img_h = 400, int img_w = 300) {
  RgbImage img(img_h, img_w, 16);
  auto to_px = [&](double x, double y, double* px, double* py) {
    *px = (x - range.x_min) / (range.x_max - range.x_min) * (img_w - 1);
    *py = (1.0 - (y - range.y_min) / (range.y_max - range.y_min)) * (img_h - 1);
  };
  auto plot = [&](const EvalLane& lane, Rgb c) {
    bool have_prev = false;
    double pu = 0, pv = 0;
    for (std::size_t n = 0; n < ys.size(); ++n) {
      if (ys[n] < lane.y_start || ys[n] > lane.y_end ||
          (!lane.visibility.empty() && !lane.visibility[n])) {
        have_prev = false;
        continue;
      }
      double u, v;
      to_px(lane.xs[n], ys[n], &u, &v);
      if (have_prev) draw_line(&img, pu, pv, u, v, c);
      draw_marker(&img, u, v, c);
      pu = u;
      pv = v;
      have_prev = true;
    }
  };
  for (const auto& g : gts) plot(g, kGtColor);
  for (const auto& p : preds) plot(p, kPredColor);
  write_png(path, img);
}

}  // namespace viz
}  // namespace curvelab
