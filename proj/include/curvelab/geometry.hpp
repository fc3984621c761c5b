#pragma once

// Lane-curve parameterization, sampling, pinhole projection and coordinate
// normalization. Everything here is a pure function; other modules build on
// these primitives.
//
// World frame: x right, y forward, z up (meters). Image frame: u right,
// v down (pixels).

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "curvelab/check.hpp"

namespace curvelab {

struct Vec2 {
  double u = 0.0, v = 0.0;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

using Mat3 = std::array<double, 9>;  // row-major

inline Vec3 mat3_apply(const Mat3& m, const Vec3& p) {
  return {m[0] * p.x + m[1] * p.y + m[2] * p.z, m[3] * p.x + m[4] * p.y + m[5] * p.z,
          m[6] * p.x + m[7] * p.y + m[8] * p.z};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a[i * 3 + k] * b[k * 3 + j];
      r[i * 3 + j] = s;
    }
  return r;
}

struct Range3D {
  double x_min = -30.0, x_max = 30.0;
  double y_min = 3.0, y_max = 103.0;
  double z_min = -10.0, z_max = 10.0;

  bool valid() const { return x_min < x_max && y_min < y_max && z_min < z_max; }
  double clamp_x(double x) const { return std::min(x_max, std::max(x_min, x)); }
  double clamp_z(double z) const { return std::min(z_max, std::max(z_min, z)); }
  bool contains(const Vec3& p) const {
    return p.x >= x_min && p.x <= x_max && p.y >= y_min && p.y <= y_max && p.z >= z_min &&
           p.z <= z_max;
  }
};

// Lane as a pair of polynomials in y: x(y) = sum a_r y^r, z(y) = sum b_r y^r,
// defined on [y_start, y_end] with a foreground confidence.
struct CurveParams {
  double confidence = 1.0;
  double y_start = 0.0;
  double y_end = 0.0;
  std::vector<double> a;
  std::vector<double> b;

  int order() const { return static_cast<int>(a.size()) - 1; }
};

inline double polyval(const std::vector<double>& c, double y) {
  double r = 0.0;
  for (std::size_t i = c.size(); i-- > 0;) r = r * y + c[i];
  return r;
}

// N ordered 3D points at fixed, strictly increasing y. in_extent marks points
// whose y lies inside the source curve's [y_start, y_end].
struct AnchorPointSet {
  std::vector<Vec3> points;
  std::vector<std::uint8_t> in_extent;

  int size() const { return static_cast<int>(points.size()); }
};

inline AnchorPointSet sample_curve(const CurveParams& curve, const std::vector<double>& ys) {
  CVL_CHECK(!ys.empty(), "sample_curve: empty y list");
  CVL_CHECK(!curve.a.empty() && curve.a.size() == curve.b.size(),
            "sample_curve: coefficient length mismatch");
  for (std::size_t i = 1; i < ys.size(); ++i)
    CVL_CHECK(ys[i] > ys[i - 1], "sample_curve: ys must be strictly increasing");
  AnchorPointSet out;
  out.points.reserve(ys.size());
  out.in_extent.reserve(ys.size());
  for (double y : ys) {
    out.points.push_back({polyval(curve.a, y), y, polyval(curve.b, y)});
    out.in_extent.push_back(y >= curve.y_start && y <= curve.y_end ? 1 : 0);
  }
  return out;
}

struct CameraModel {
  Mat3 intrinsics{};  // upper-triangular, positive focals
  Mat3 rotation{};    // world -> camera
  std::array<double, 3> translation{};
  int height = 0, width = 0;

  bool valid(double tol = 1e-9) const {
    if (height <= 0 || width <= 0) return false;
    const Mat3& k = intrinsics;
    if (!(k[0] > 0.0 && k[4] > 0.0)) return false;
    if (k[3] != 0.0 || k[6] != 0.0 || k[7] != 0.0) return false;
    // R R^T = I within tol
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int l = 0; l < 3; ++l) s += rotation[i * 3 + l] * rotation[j * 3 + l];
        if (std::fabs(s - (i == j ? 1.0 : 0.0)) > tol) return false;
      }
    return true;
  }
};

// Camera at world (0, 0, height_m) looking along +y, pitched down by
// pitch_rad about its own x axis.
inline CameraModel make_camera(double fx, double fy, double cx, double cy, double pitch_rad,
                               double height_m, int img_h, int img_w) {
  CameraModel cam;
  cam.intrinsics = {fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0};
  // Axis swap world (x right, y forward, z up) -> camera (x right, y down, z forward).
  Mat3 base = {1, 0, 0, 0, 0, -1, 0, 1, 0};
  double c = std::cos(pitch_rad), s = std::sin(pitch_rad);
  Mat3 pitch = {1, 0, 0, 0, c, -s, 0, s, c};
  cam.rotation = mat3_mul(pitch, base);
  Vec3 center{0.0, 0.0, height_m};
  Vec3 rc = mat3_apply(cam.rotation, center);
  cam.translation = {-rc.x, -rc.y, -rc.z};
  cam.height = img_h;
  cam.width = img_w;
  return cam;
}

struct ProjectedPoints {
  std::vector<Vec2> uv;
  std::vector<std::uint8_t> flags;  // 1 = in front of camera and inside image bounds
};

// Pinhole projection. Behind-camera points get the sentinel (-1,-1) so
// downstream bilinear sampling needs no branches; their flag is 0.
inline void project_point(const CameraModel& cam, const Vec3& p, Vec2* uv, std::uint8_t* flag) {
  Vec3 pc = mat3_apply(cam.rotation, p);
  pc.x += cam.translation[0];
  pc.y += cam.translation[1];
  pc.z += cam.translation[2];
  if (pc.z <= 0.0) {
    *uv = {-1.0, -1.0};
    *flag = 0;
    return;
  }
  Vec3 q = mat3_apply(cam.intrinsics, pc);
  double u = q.x / q.z, v = q.y / q.z;
  *uv = {u, v};
  *flag = (u >= 0.0 && u <= cam.width && v >= 0.0 && v <= cam.height) ? 1 : 0;
}

inline ProjectedPoints project_points(const std::vector<Vec3>& pts, const CameraModel& cam) {
  ProjectedPoints out;
  out.uv.resize(pts.size());
  out.flags.resize(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) project_point(cam, pts[i], &out.uv[i], &out.flags[i]);
  return out;
}

inline ProjectedPoints project_points(const AnchorPointSet& pts, const CameraModel& cam) {
  return project_points(pts.points, cam);
}

inline std::vector<Vec2> normalize_coords(const std::vector<Vec2>& px, int width, int height) {
  CVL_CHECK(width > 0 && height > 0, "normalize_coords: image size must be positive");
  std::vector<Vec2> out(px.size());
  for (std::size_t i = 0; i < px.size(); ++i)
    out[i] = {px[i].u / static_cast<double>(width), px[i].v / static_cast<double>(height)};
  return out;
}

inline std::vector<Vec2> denormalize_coords(const std::vector<Vec2>& nc, int width, int height) {
  CVL_CHECK(width > 0 && height > 0, "denormalize_coords: image size must be positive");
  std::vector<Vec2> out(nc.size());
  for (std::size_t i = 0; i < nc.size(); ++i)
    out[i] = {nc[i].u * static_cast<double>(width), nc[i].v * static_cast<double>(height)};
  return out;
}

// The fixed evaluation y-positions used throughout.
inline std::vector<double> default_fixed_ys() {
  return {5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0};
}

}  // namespace curvelab
