#pragma once

// Custom differentiable ops tying the curve decoder to geometry: sinusoidal
// encoding of anchor point sets and pinhole projection of anchors with an
// analytic Jacobian. Anchor tensors are (Q, 2N) rows laid out as
// [x_1..x_N, z_1..z_N]; the y values are fixed per configuration.

#include <cmath>
#include <vector>

#include "curvelab/geometry.hpp"
#include "curvelab/tensor.hpp"

namespace curvelab {

inline constexpr double kPi = 3.14159265358979323846;

// Per-axis sinusoid widths: x and z get an even floor(D/3), y takes the rest.
struct PeSplit {
  int dx, dy, dz;
};

inline PeSplit pe_split(int embed_dim) {
  CVL_CHECK(embed_dim % 2 == 0, "pe_split: embedding dim must be even");
  int dx = 2 * (embed_dim / 6);
  return {dx, embed_dim - 2 * dx, dx};
}

namespace detail {

inline void sinusoid(double t, int dims, double temperature, double* out, double* dangle_dt) {
  for (int i = 0; i < dims / 2; ++i) {
    double freq = std::pow(temperature, 2.0 * i / dims);
    double angle = t * 2.0 * kPi / freq;
    out[2 * i] = std::sin(angle);
    out[2 * i + 1] = std::cos(angle);
    if (dangle_dt) dangle_dt[i] = 2.0 * kPi / freq;
  }
}

}  // namespace detail

// PE of an anchor set: per point, each axis coordinate (normalized into [0,1]
// by the 3D range) maps to a sinusoid; the output row is the concatenation
// [PE(x_1..x_N) | PE(y_1..y_N) | PE(z_1..z_N)], total N * D columns.
inline Var anchor_positional_encoding(const Var& anchors, const std::vector<double>& ys,
                                      const Range3D& range, int embed_dim,
                                      double temperature = 1e4) {
  int N = static_cast<int>(ys.size());
  CVL_CHECK(anchors.shape().size() == 2 && anchors.shape()[1] == 2 * N,
            "anchor_positional_encoding: anchors must be (Q, 2N)");
  int Q = anchors.shape()[0];
  PeSplit sp = pe_split(embed_dim);
  int cols = N * embed_dim;
  double inv_x = 1.0 / (range.x_max - range.x_min);
  double inv_y = 1.0 / (range.y_max - range.y_min);
  double inv_z = 1.0 / (range.z_max - range.z_min);

  std::vector<double> out(static_cast<std::size_t>(Q) * cols);
  for (int q = 0; q < Q; ++q) {
    const double* a = anchors.val().data() + static_cast<std::size_t>(q) * 2 * N;
    double* row = out.data() + static_cast<std::size_t>(q) * cols;
    for (int n = 0; n < N; ++n) {
      double nx = (a[n] - range.x_min) * inv_x;
      detail::sinusoid(nx, sp.dx, temperature, row + n * sp.dx, nullptr);
    }
    for (int n = 0; n < N; ++n) {
      double ny = (ys[n] - range.y_min) * inv_y;
      detail::sinusoid(ny, sp.dy, temperature, row + N * sp.dx + n * sp.dy, nullptr);
    }
    for (int n = 0; n < N; ++n) {
      double nz = (a[N + n] - range.z_min) * inv_z;
      detail::sinusoid(nz, sp.dz, temperature, row + N * (sp.dx + sp.dy) + n * sp.dz, nullptr);
    }
  }
  return detail::make_op({Q, cols}, std::move(out), {anchors},
                         [Q, N, sp, cols, inv_x, inv_z, temperature](VarNode& node) {
    VarNode* pa = node.parents[0].node();
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_ref();
    std::vector<double> dangle_x(sp.dx / 2), dangle_z(sp.dz / 2);
    for (int i = 0; i < sp.dx / 2; ++i)
      dangle_x[i] = 2.0 * kPi / std::pow(temperature, 2.0 * i / sp.dx);
    for (int i = 0; i < sp.dz / 2; ++i)
      dangle_z[i] = 2.0 * kPi / std::pow(temperature, 2.0 * i / sp.dz);
    for (int q = 0; q < Q; ++q) {
      const double* row = node.val.data() + static_cast<std::size_t>(q) * cols;
      const double* g = node.grad.data() + static_cast<std::size_t>(q) * cols;
      for (int n = 0; n < N; ++n) {
        // d sin(angle)/dx = cos(angle) * dangle * dnorm/dx; cos sits next to sin.
        double acc = 0.0;
        const double* block = row + n * sp.dx;
        const double* gb = g + n * sp.dx;
        for (int i = 0; i < sp.dx / 2; ++i) {
          double si = block[2 * i], co = block[2 * i + 1];
          acc += (gb[2 * i] * co - gb[2 * i + 1] * si) * dangle_x[i];
        }
        ga[q * 2 * N + n] += acc * inv_x;
      }
      for (int n = 0; n < N; ++n) {
        double acc = 0.0;
        const double* block = row + N * (sp.dx + sp.dy) + n * sp.dz;
        const double* gb = g + N * (sp.dx + sp.dy) + n * sp.dz;
        for (int i = 0; i < sp.dz / 2; ++i) {
          double si = block[2 * i], co = block[2 * i + 1];
          acc += (gb[2 * i] * co - gb[2 * i + 1] * si) * dangle_z[i];
        }
        ga[q * 2 * N + N + n] += acc * inv_z;
      }
    }
  });
}

// Projects every anchor of every query through the camera and returns
// normalized image coordinates, (Q, 2N) rows laid out [u_1..u_N, v_1..v_N].
// Validity flags are reported through flags_out (1 = in front and inside the
// image) and are treated as constants by the graph. Behind-camera anchors get
// the sentinel pixel (-1,-1) and a zero Jacobian.
inline Var project_anchors(const Var& anchors, const std::vector<double>& ys,
                           const CameraModel& cam, std::vector<double>* flags_out) {
  int N = static_cast<int>(ys.size());
  CVL_CHECK(anchors.shape().size() == 2 && anchors.shape()[1] == 2 * N,
            "project_anchors: anchors must be (Q, 2N)");
  int Q = anchors.shape()[0];
  Mat3 A = mat3_mul(cam.intrinsics, cam.rotation);
  Vec3 d = mat3_apply(cam.intrinsics,
                      {cam.translation[0], cam.translation[1], cam.translation[2]});
  double inv_w = 1.0 / cam.width, inv_h = 1.0 / cam.height;

  std::vector<double> out(static_cast<std::size_t>(Q) * 2 * N);
  std::vector<double> jac(static_cast<std::size_t>(Q) * N * 4, 0.0);  // du/dx, du/dz, dv/dx, dv/dz
  if (flags_out) flags_out->assign(static_cast<std::size_t>(Q) * N, 0.0);
  for (int q = 0; q < Q; ++q) {
    const double* a = anchors.val().data() + static_cast<std::size_t>(q) * 2 * N;
    double* row = out.data() + static_cast<std::size_t>(q) * 2 * N;
    for (int n = 0; n < N; ++n) {
      double x = a[n], y = ys[n], z = a[N + n];
      double q0 = A[0] * x + A[1] * y + A[2] * z + d.x;
      double q1 = A[3] * x + A[4] * y + A[5] * z + d.y;
      double q2 = A[6] * x + A[7] * y + A[8] * z + d.z;
      if (q2 <= 0.0) {
        row[n] = -1.0 * inv_w;
        row[N + n] = -1.0 * inv_h;
        continue;
      }
      double u = q0 / q2, v = q1 / q2;
      row[n] = u * inv_w;
      row[N + n] = v * inv_h;
      double* jp = jac.data() + (static_cast<std::size_t>(q) * N + n) * 4;
      jp[0] = (A[0] - u * A[6]) / q2 * inv_w;
      jp[1] = (A[2] - u * A[8]) / q2 * inv_w;
      jp[2] = (A[3] - v * A[6]) / q2 * inv_h;
      jp[3] = (A[5] - v * A[8]) / q2 * inv_h;
      if (flags_out && u >= 0.0 && u <= cam.width && v >= 0.0 && v <= cam.height)
        (*flags_out)[static_cast<std::size_t>(q) * N + n] = 1.0;
    }
  }
  return detail::make_op({Q, 2 * N}, std::move(out), {anchors},
                         [Q, N, jac = std::move(jac)](VarNode& node) {
    VarNode* pa = node.parents[0].node();
    if (!pa->requires_grad) return;
    auto& ga = pa->grad_ref();
    for (int q = 0; q < Q; ++q) {
      const double* g = node.grad.data() + static_cast<std::size_t>(q) * 2 * N;
      for (int n = 0; n < N; ++n) {
        const double* jp = jac.data() + (static_cast<std::size_t>(q) * N + n) * 4;
        ga[q * 2 * N + n] += g[n] * jp[0] + g[N + n] * jp[2];
        ga[q * 2 * N + N + n] += g[n] * jp[1] + g[N + n] * jp[3];
      }
    }
  });
}

// Fixed 2D sine position encoding for a feature grid, (H*W, D) row-major by
// (h, w); first half of channels encode v, second half u.
inline std::vector<double> grid_position_encoding(int H, int W, int embed_dim,
                                                  double temperature = 1e4) {
  CVL_CHECK(embed_dim % 4 == 0, "grid_position_encoding: dim must be divisible by 4");
  int half = embed_dim / 2;
  std::vector<double> out(static_cast<std::size_t>(H) * W * embed_dim);
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w) {
      double cy = (h + 0.5) / H, cx = (w + 0.5) / W;
      double* row = out.data() + (static_cast<std::size_t>(h) * W + w) * embed_dim;
      detail::sinusoid(cy, half, temperature, row, nullptr);
      detail::sinusoid(cx, half, temperature, row + half, nullptr);
    }
  return out;
}

}  // namespace curvelab
