#pragma once

// The lane detector: a small multi-scale conv backbone, one or more
// deformable self-attention encoder layers over the flattened feature
// pyramid, and a curve decoder whose queries carry dynamic 3D anchor point
// sets. Each decoder layer re-derives the positional embedding from the
// current anchors, samples image context at their projections, runs
// deformable cross-attention around them, and predicts additive (dx, dz)
// refinements; y coordinates are never touched.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "curvelab/geometry.hpp"
#include "curvelab/model_ops.hpp"
#include "curvelab/nn.hpp"
#include "curvelab/tensor.hpp"

namespace curvelab {

enum class SamplingMode { kNone, kLearnedOffsets, kContextOffsets };
enum class HeadMode { kCurve, kPointSet };

inline SamplingMode sampling_mode_from_string(const std::string& s) {
  if (s == "none") return SamplingMode::kNone;
  if (s == "so") return SamplingMode::kLearnedOffsets;
  if (s == "cso") return SamplingMode::kContextOffsets;
  throw CheckError("unknown sampling mode: " + s + " (expected none|so|cso)");
}

inline std::string to_string(SamplingMode m) {
  switch (m) {
    case SamplingMode::kNone: return "none";
    case SamplingMode::kLearnedOffsets: return "so";
    default: return "cso";
  }
}

inline HeadMode head_mode_from_string(const std::string& s) {
  if (s == "curve") return HeadMode::kCurve;
  if (s == "point") return HeadMode::kPointSet;
  throw CheckError("unknown head mode: " + s + " (expected curve|point)");
}

inline std::string to_string(HeadMode m) {
  return m == HeadMode::kCurve ? "curve" : "point";
}

struct ModelConfig {
  int embed_dim = 32;      // D
  int heads = 4;           // M
  int sample_points = 4;   // K
  int levels = 3;          // L_lvl, strides 4, 8, 16, ...
  int encoder_layers = 1;
  int decoder_layers = 4;
  int num_queries = 12;    // L_q
  int poly_order = 3;      // R
  int img_h = 128, img_w = 160, channels = 1;
  std::vector<int> backbone_channels = {12, 16, 24, 32};  // levels + 1 stages
  std::vector<double> fixed_ys = default_fixed_ys();
  Range3D range;
  double delta_clamp = 5.0;  // meters per layer
  double coef_scale_x = 2.0, coef_scale_z = 2.0;
  // Confidence logit = conf_scale * raw head output. Like the coefficient
  // scales above, this widens the output range reachable per unit of weight
  // movement so classification saturates in the same step budget as geometry.
  double conf_scale = 8.0;
  SamplingMode sampling = SamplingMode::kContextOffsets;
  HeadMode head = HeadMode::kCurve;
  bool seg_branch = true;
  std::uint64_t init_seed = 42;

  int anchor_points() const { return static_cast<int>(fixed_ys.size()); }
  int level_stride(int l) const { return 4 << l; }
  int level_h(int l) const { return img_h / level_stride(l); }
  int level_w(int l) const { return img_w / level_stride(l); }

  void validate() const {
    CVL_CHECK(embed_dim % heads == 0, "config: embed_dim must be divisible by heads");
    CVL_CHECK(embed_dim % 4 == 0, "config: embed_dim must be divisible by 4");
    CVL_CHECK(sample_points >= 1 && levels >= 1 && decoder_layers >= 1, "config: bad counts");
    CVL_CHECK(static_cast<int>(backbone_channels.size()) == levels + 1,
              "config: backbone_channels must list levels + 1 stages");
    for (int l = 0; l < levels; ++l)
      CVL_CHECK(img_h % level_stride(l) == 0 && img_w % level_stride(l) == 0,
                "config: image dims must be divisible by level strides");
    CVL_CHECK(static_cast<int>(fixed_ys.size()) >= poly_order + 1,
              "config: need at least poly_order + 1 fixed y-positions");
    CVL_CHECK(range.valid(), "config: invalid range");
  }
};

// One decoder layer's outputs for one image.
struct LayerPrediction {
  Var anchors;     // (L_q, 2N) refined, layout [x.., z..]
  Var conf_logit;  // (L_q, 1)
  Var y_start;     // (L_q, 1)
  Var y_end;       // (L_q, 1)
  Var coef_a;      // (L_q, R+1) normalized-basis coefficients in meters (curve head only)
  Var coef_b;
  Var pts_x;  // (L_q, N) lane x at fixed ys
  Var pts_z;
};

struct ItemPrediction {
  std::vector<LayerPrediction> layers;
};

// Optional capture of decoder internals for tests and visualization.
struct ForwardTrace {
  // [item][layer]: flattened (L_q, M * L * N * 2) sampling locations.
  std::vector<std::vector<std::vector<double>>> cross_locs;
  // [item][layer]: flattened (L_q, M * L * N) softmaxed attention weights.
  std::vector<std::vector<std::vector<double>>> cross_weights;
  // [item][layer]: flattened (L_q * N) projection validity flags.
  std::vector<std::vector<std::vector<double>>> anchor_flags;
};

struct ForwardOutput {
  std::vector<ItemPrediction> items;
  Var seg_logits;             // (B, 1, H/4, W/4) when the seg branch is on
  std::vector<Var> enc_maps;  // post-encoder feature maps, (B, D, H_l, W_l)
};

namespace detail {

inline int norm_groups(int channels) {
  if (channels % 4 == 0) return 4;
  if (channels % 2 == 0) return 2;
  return 1;
}

}  // namespace detail

class CurveFormer {
 public:
  explicit CurveFormer(const ModelConfig& cfg) : cfg_(cfg), ps_(cfg.init_seed) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return ps_; }
  const ParamStore& params() const { return ps_; }

  // Backbone + per-level input projection: levels + 1 conv stages with
  // stride-2 downsampling, feature levels taken from stages 1..levels.
  std::vector<Var> extract_features(const Var& images) const {
    CVL_CHECK(images.shape().size() == 4 && images.shape()[1] == cfg_.channels &&
                  images.shape()[2] == cfg_.img_h && images.shape()[3] == cfg_.img_w,
              "extract_features: image dims mismatch config");
    Var x = images;
    std::vector<Var> stage_out;
    for (std::size_t s = 0; s < stages_.size(); ++s) {
      x = silu(stages_[s].gn1(stages_[s].conv1(x)));
      if (stages_[s].has_second) x = silu(stages_[s].gn2(stages_[s].conv2(x)));
      stage_out.push_back(x);
    }
    std::vector<Var> maps;
    for (int l = 0; l < cfg_.levels; ++l)
      maps.push_back(input_norm_[l](input_proj_[l](stage_out[l + 1])));
    return maps;
  }

  std::vector<Var> encode(const std::vector<Var>& fmaps) const {
    Var tokens = tokens_from_maps(fmaps);
    tokens = run_encoder(tokens, fmaps[0].shape()[0]);
    return maps_from_tokens(tokens, fmaps[0].shape()[0]);
  }

  // Positional query from anchors: sinusoid over the normalized coordinate
  // sequences, then a 2-layer MLP shared across decoder layers.
  Var positional_embed(const Var& anchors) const {
    return pe_mlp_(anchor_positional_encoding(anchors, cfg_.fixed_ys, cfg_.range,
                                              cfg_.embed_dim));
  }

  // Masked average of the multi-scale features at the projected anchors.
  Var context_sample_feature(const Var& anchors, const std::vector<Var>& fmaps,
                             const CameraModel& cam, int batch_index = 0,
                             std::vector<double>* flags_out = nullptr) const {
    std::vector<double> flags;
    Var uvn = project_anchors(anchors, cfg_.fixed_ys, cam, &flags);
    Var uv_pairs = uv_rows(uvn);
    if (flags_out) *flags_out = flags;
    return context_feature(fmaps, uv_pairs, flags, anchors.shape()[0], cfg_.anchor_points(),
                           batch_index, 1e-6);
  }

  // Eq. 4 offsets: one (du, dv) per anchor and sample slot from the
  // concatenation of the context feature and the query content.
  Var context_sampling_offsets(const Var& f_c, const Var& content) const {
    return cs_offsets_(concat_cols({f_c, content}));
  }

  ForwardOutput forward(const Var& images, const std::vector<CameraModel>& cams,
                        ForwardTrace* trace = nullptr) const {
    int B = images.shape()[0];
    CVL_CHECK(static_cast<int>(cams.size()) == B, "forward: one camera per image");
    ForwardOutput out;
    auto fmaps = extract_features(images);
    Var tokens = run_encoder(tokens_from_maps(fmaps), B);
    out.enc_maps = maps_from_tokens(tokens, B);
    std::vector<Var> value_maps = maps_from_tokens(dec_value_(tokens), B);
    if (cfg_.seg_branch) out.seg_logits = seg_out_(silu(seg_conv_(out.enc_maps[0])));
    if (trace) {
      trace->cross_locs.assign(B, {});
      trace->cross_weights.assign(B, {});
      trace->anchor_flags.assign(B, {});
    }
    for (int b = 0; b < B; ++b)
      out.items.push_back(decode_item(out.enc_maps, value_maps, cams[b], b, trace));
    return out;
  }

  // Head readout for a single content vector.
  CurveParams predict_head(const std::vector<double>& content) const {
    CVL_CHECK(static_cast<int>(content.size()) == cfg_.embed_dim, "predict_head: dim mismatch");
    Var z = Var::leaf({1, cfg_.embed_dim}, content);
    Var h = head_mlp_(z);
    LayerPrediction p;
    head_readout(h, Var(), &p);
    return layer_curve_params(p, 0);
  }

  // Converts one query's head outputs to CurveParams in world-y basis.
  CurveParams layer_curve_params(const LayerPrediction& p, int q) const {
    CurveParams c;
    c.confidence = 1.0 / (1.0 + std::exp(-p.conf_logit.val()[q]));
    c.y_start = p.y_start.val()[q];
    c.y_end = p.y_end.val()[q];
    int R = cfg_.poly_order;
    if (cfg_.head == HeadMode::kCurve) {
      std::vector<double> ta(R + 1), tb(R + 1);
      for (int r = 0; r <= R; ++r) {
        ta[r] = p.coef_a.val()[q * (R + 1) + r];
        tb[r] = p.coef_b.val()[q * (R + 1) + r];
      }
      c.a = poly_from_normalized(ta);
      c.b = poly_from_normalized(tb);
    } else {
      // Point-set head: fit the anchor points with least squares for export.
      c.a = fit_poly(p.anchors, q, 0);
      c.b = fit_poly(p.anchors, q, 1);
    }
    return c;
  }

  std::vector<double> initial_anchors_flat() const { return init_anchors_; }

  // Replaces the constant initial anchors, layout (L_q, 2N) as [x.., z..].
  void set_initial_anchors(std::vector<double> a) {
    CVL_CHECK(static_cast<std::int64_t>(a.size()) ==
                  static_cast<std::int64_t>(cfg_.num_queries) * 2 * cfg_.anchor_points(),
              "set_initial_anchors: size mismatch");
    init_anchors_ = std::move(a);
  }

 private:
  struct Stage {
    Conv2d conv1, conv2;
    GroupNorm gn1, gn2;
    bool has_second = false;
  };
  struct EncoderLayer {
    Linear offsets, weights, value, out;
    LayerNorm ln1, ln2;
    Linear ffn1, ffn2;
  };
  struct DecoderLayer {
    Linear wq, wk, wv, wo;  // dense self-attention over queries
    LayerNorm ln_sa, ln_ca, ln_ffn;
    Linear offsets, weights, out;
    Linear ffn1, ffn2;
    Linear refine;
  };

  ModelConfig cfg_;
  ParamStore ps_;
  std::vector<Stage> stages_;
  std::vector<Conv2d> input_proj_;
  std::vector<GroupNorm> input_norm_;
  Var level_embed_;
  std::vector<EncoderLayer> enc_;
  Mlp pe_mlp_;
  Linear cs_offsets_;
  Linear dec_value_;
  std::vector<DecoderLayer> dec_;
  Mlp head_mlp_;
  Var query_embed_;
  Conv2d seg_conv_, seg_out_;
  std::vector<double> init_anchors_;  // (L_q, 2N) constant initial anchors
  std::vector<double> vand_;          // (N, R+1) Vandermonde in normalized y
  std::vector<double> pinv_;          // (R+1, N) least-squares map points -> coefficients

  // pinv = (V^T V)^-1 V^T for the fixed Vandermonde; N >= R+1 by validate().
  void compute_pinv(int N, int R) {
    int C = R + 1;
    // G = V^T V, rhs = V^T (stacked as C columns of N entries).
    std::vector<double> g(static_cast<std::size_t>(C) * C, 0.0);
    for (int i = 0; i < C; ++i)
      for (int j = 0; j < C; ++j) {
        double s = 0.0;
        for (int n = 0; n < N; ++n) s += vand_[n * C + i] * vand_[n * C + j];
        g[i * C + j] = s;
      }
    // Invert G by Gauss-Jordan with partial pivoting.
    std::vector<double> inv(static_cast<std::size_t>(C) * C, 0.0);
    for (int i = 0; i < C; ++i) inv[i * C + i] = 1.0;
    for (int col = 0; col < C; ++col) {
      int piv = col;
      for (int r = col + 1; r < C; ++r)
        if (std::fabs(g[r * C + col]) > std::fabs(g[piv * C + col])) piv = r;
      for (int j = 0; j < C; ++j) {
        std::swap(g[piv * C + j], g[col * C + j]);
        std::swap(inv[piv * C + j], inv[col * C + j]);
      }
      double d = g[col * C + col];
      CVL_CHECK(std::fabs(d) > 1e-12, "model: singular anchor fit matrix");
      for (int j = 0; j < C; ++j) {
        g[col * C + j] /= d;
        inv[col * C + j] /= d;
      }
      for (int r = 0; r < C; ++r) {
        if (r == col) continue;
        double f = g[r * C + col];
        for (int j = 0; j < C; ++j) {
          g[r * C + j] -= f * g[col * C + j];
          inv[r * C + j] -= f * inv[col * C + j];
        }
      }
    }
    pinv_.assign(static_cast<std::size_t>(C) * N, 0.0);
    for (int i = 0; i < C; ++i)
      for (int n = 0; n < N; ++n) {
        double s = 0.0;
        for (int j = 0; j < C; ++j) s += inv[i * C + j] * vand_[n * C + j];
        pinv_[i * N + n] = s;
      }
  }

  // Token bookkeeping: rows ordered [batch][level][h*w].
  mutable std::vector<int> lvl_offsets_;
  int tokens_per_image_ = 0;

  void build() {
    int D = cfg_.embed_dim;
    int in_ch = cfg_.channels;
    for (int s = 0; s < cfg_.levels + 1; ++s) {
      Stage st;
      int out_ch = cfg_.backbone_channels[s];
      std::string name = "backbone.stage" + std::to_string(s);
      st.conv1 = Conv2d(ps_, name + ".conv1", in_ch, out_ch, 3, 2, 1);
      st.gn1 = GroupNorm(ps_, name + ".gn1", out_ch, detail::norm_groups(out_ch));
      if (s > 0) {
        st.conv2 = Conv2d(ps_, name + ".conv2", out_ch, out_ch, 3, 1, 1);
        st.gn2 = GroupNorm(ps_, name + ".gn2", out_ch, detail::norm_groups(out_ch));
        st.has_second = true;
      }
      stages_.push_back(std::move(st));
      in_ch = out_ch;
    }
    for (int l = 0; l < cfg_.levels; ++l) {
      input_proj_.emplace_back(ps_, "input_proj." + std::to_string(l),
                               cfg_.backbone_channels[l + 1], D, 1, 1, 0);
      input_norm_.emplace_back(ps_, "input_norm." + std::to_string(l), D,
                               detail::norm_groups(D));
    }
    level_embed_ = ps_.create("level_embed", {cfg_.levels, D}, 1.0 / std::sqrt(D));

    int M = cfg_.heads, K = cfg_.sample_points, L = cfg_.levels;
    for (int e = 0; e < cfg_.encoder_layers; ++e) {
      EncoderLayer lay;
      std::string name = "encoder." + std::to_string(e);
      lay.offsets = Linear(ps_, name + ".offsets", D, M * L * K * 2, true);
      lay.weights = Linear(ps_, name + ".weights", D, M * L * K, true);
      lay.value = Linear(ps_, name + ".value", D, D);
      lay.out = Linear(ps_, name + ".out", D, D);
      lay.ln1 = LayerNorm(ps_, name + ".ln1", D);
      lay.ln2 = LayerNorm(ps_, name + ".ln2", D);
      lay.ffn1 = Linear(ps_, name + ".ffn1", D, 2 * D);
      lay.ffn2 = Linear(ps_, name + ".ffn2", 2 * D, D);
      enc_.push_back(std::move(lay));
    }

    int N = cfg_.anchor_points();
    pe_mlp_ = Mlp(ps_, "pe_mlp", N * D, 2 * D, D);
    cs_offsets_ = Linear(ps_, "cs_offsets", 2 * D, N * K * 2, true);
    dec_value_ = Linear(ps_, "dec_value", D, D);
    for (int i = 0; i < cfg_.decoder_layers; ++i) {
      DecoderLayer lay;
      std::string name = "decoder." + std::to_string(i);
      lay.wq = Linear(ps_, name + ".wq", D, D);
      lay.wk = Linear(ps_, name + ".wk", D, D);
      lay.wv = Linear(ps_, name + ".wv", D, D);
      lay.wo = Linear(ps_, name + ".wo", D, D);
      lay.ln_sa = LayerNorm(ps_, name + ".ln_sa", D);
      lay.ln_ca = LayerNorm(ps_, name + ".ln_ca", D);
      lay.ln_ffn = LayerNorm(ps_, name + ".ln_ffn", D);
      lay.offsets = Linear(ps_, name + ".offsets", D, M * L * N * 2, true);
      lay.weights = Linear(ps_, name + ".weights", D, M * L * N, true);
      lay.out = Linear(ps_, name + ".out", D, D);
      lay.ffn1 = Linear(ps_, name + ".ffn1", D, 2 * D);
      lay.ffn2 = Linear(ps_, name + ".ffn2", 2 * D, D);
      lay.refine = Linear(ps_, name + ".refine", D, 2 * N, true);
      dec_.push_back(std::move(lay));
    }

    int head_out = cfg_.head == HeadMode::kCurve ? 3 + 2 * (cfg_.poly_order + 1) : 3;
    head_mlp_ = Mlp(ps_, "head", D, D, head_out);
    query_embed_ = ps_.create("query_embed", {cfg_.num_queries, D}, 1.0 / std::sqrt(D));

    if (cfg_.seg_branch) {
      seg_conv_ = Conv2d(ps_, "seg.conv", D, D / 2, 3, 1, 1);
      seg_out_ = Conv2d(ps_, "seg.out", D / 2, 1, 1, 1, 0);
    }

    // Straight lanes at z = 0, spread uniformly across the x range.
    init_anchors_.assign(static_cast<std::size_t>(cfg_.num_queries) * 2 * N, 0.0);
    for (int q = 0; q < cfg_.num_queries; ++q) {
      double x = cfg_.range.x_min +
                 (q + 0.5) * (cfg_.range.x_max - cfg_.range.x_min) / cfg_.num_queries;
      for (int n = 0; n < N; ++n) init_anchors_[q * 2 * N + n] = x;
    }

    int R = cfg_.poly_order;
    vand_.resize(static_cast<std::size_t>(N) * (R + 1));
    for (int n = 0; n < N; ++n) {
      double t = (cfg_.fixed_ys[n] - cfg_.range.y_min) / (cfg_.range.y_max - cfg_.range.y_min);
      double p = 1.0;
      for (int r = 0; r <= R; ++r) {
        vand_[n * (R + 1) + r] = p;
        p *= t;
      }
    }
    compute_pinv(N, R);

    lvl_offsets_.clear();
    tokens_per_image_ = 0;
    for (int l = 0; l < cfg_.levels; ++l) {
      lvl_offsets_.push_back(tokens_per_image_);
      tokens_per_image_ += cfg_.level_h(l) * cfg_.level_w(l);
    }
  }

  // --- encoder -------------------------------------------------------------

  Var tokens_from_maps(const std::vector<Var>& maps) const {
    int B = maps[0].shape()[0], D = cfg_.embed_dim;
    std::vector<Var> lvl_tokens;
    for (int l = 0; l < cfg_.levels; ++l) {
      int H = cfg_.level_h(l), W = cfg_.level_w(l);
      std::vector<std::int64_t> map(static_cast<std::size_t>(B) * H * W * D);
      for (int b = 0; b < B; ++b)
        for (int i = 0; i < H * W; ++i)
          for (int d = 0; d < D; ++d)
            map[(static_cast<std::size_t>(b) * H * W + i) * D + d] =
                (static_cast<std::int64_t>(b) * D + d) * H * W + i;
      lvl_tokens.push_back(index_map(maps[l], {B * H * W, D}, std::move(map)));
    }
    std::vector<Var> blocks;
    for (int b = 0; b < B; ++b)
      for (int l = 0; l < cfg_.levels; ++l) {
        int hw = cfg_.level_h(l) * cfg_.level_w(l);
        blocks.push_back(slice_rows(lvl_tokens[l], b * hw, (b + 1) * hw));
      }
    return concat_rows(blocks);
  }

  std::vector<Var> maps_from_tokens(const Var& tokens, int B) const {
    int D = cfg_.embed_dim;
    std::vector<Var> maps;
    for (int l = 0; l < cfg_.levels; ++l) {
      int H = cfg_.level_h(l), W = cfg_.level_w(l);
      std::vector<std::int64_t> map(static_cast<std::size_t>(B) * D * H * W);
      for (int b = 0; b < B; ++b)
        for (int d = 0; d < D; ++d)
          for (int i = 0; i < H * W; ++i) {
            std::int64_t row = static_cast<std::int64_t>(b) * tokens_per_image_ +
                               lvl_offsets_[l] + i;
            map[(static_cast<std::size_t>(b) * D + d) * H * W + i] = row * D + d;
          }
      maps.push_back(index_map(tokens, {B, D, H, W}, std::move(map)));
    }
    return maps;
  }

  Var run_encoder(Var tokens, int B) const {
    if (enc_.empty()) return tokens;
    int D = cfg_.embed_dim, M = cfg_.heads, K = cfg_.sample_points, L = cfg_.levels;
    int T = tokens_per_image_;
    // Level embeddings participate through a broadcast add so they get grads.
    std::vector<std::int64_t> lvl_map(static_cast<std::size_t>(B) * T * D);
    for (int b = 0; b < B; ++b)
      for (int l = 0; l < L; ++l) {
        int hw = cfg_.level_h(l) * cfg_.level_w(l);
        for (int i = 0; i < hw; ++i)
          for (int d = 0; d < D; ++d)
            lvl_map[(static_cast<std::size_t>(b) * T + lvl_offsets_[l] + i) * D + d] =
                static_cast<std::int64_t>(l) * D + d;
      }
    Var lvl_add = index_map(level_embed_, {B * T, D}, std::move(lvl_map));

    std::vector<double> grid_pos(static_cast<std::size_t>(B) * T * D);
    for (int b = 0; b < B; ++b)
      for (int l = 0; l < L; ++l) {
        auto pe = grid_position_encoding(cfg_.level_h(l), cfg_.level_w(l), D);
        std::copy(pe.begin(), pe.end(),
                  grid_pos.begin() + (static_cast<std::size_t>(b) * T + lvl_offsets_[l]) * D);
      }

    // Reference point and per-level offset scaling, constant per column.
    std::vector<double> ref(static_cast<std::size_t>(B) * T * M * L * K * 2);
    std::vector<double> scale(static_cast<std::size_t>(B) * T * M * L * K * 2);
    for (int b = 0; b < B; ++b)
      for (int l = 0; l < L; ++l) {
        int H = cfg_.level_h(l), W = cfg_.level_w(l);
        for (int i = 0; i < H * W; ++i) {
          double cu = (i % W + 0.5) / W, cv = (i / W + 0.5) / H;
          double* rrow =
              ref.data() +
              (static_cast<std::size_t>(b) * T + lvl_offsets_[l] + i) * (M * L * K * 2);
          double* srow =
              scale.data() +
              (static_cast<std::size_t>(b) * T + lvl_offsets_[l] + i) * (M * L * K * 2);
          for (int m = 0; m < M; ++m)
            for (int l2 = 0; l2 < L; ++l2)
              for (int k = 0; k < K; ++k) {
                int c = ((m * L + l2) * K + k) * 2;
                rrow[c] = cu;
                rrow[c + 1] = cv;
                srow[c] = 1.0 / cfg_.level_w(l2);
                srow[c + 1] = 1.0 / cfg_.level_h(l2);
              }
        }
      }

    std::vector<int> row_batch(static_cast<std::size_t>(B) * T);
    for (int b = 0; b < B; ++b)
      for (int i = 0; i < T; ++i) row_batch[b * T + i] = b;

    for (const auto& lay : enc_) {
      Var q = add(add_const(tokens, grid_pos), lvl_add);
      Var off = lay.offsets(q);
      Var locs = add_const(mul_const(off, scale), ref);
      Var aw = softmax_rows(reshape(lay.weights(q), {B * T * M, L * K}));
      aw = reshape(aw, {B * T, M * L * K});
      std::vector<Var> value_maps = maps_from_tokens(lay.value(tokens), B);
      Var sampled = ms_deform_sample(value_maps, locs, aw, row_batch, M);
      tokens = lay.ln1(add(tokens, lay.out(sampled)));
      tokens = lay.ln2(add(tokens, lay.ffn2(silu(lay.ffn1(tokens)))));
    }
    return tokens;
  }

  // --- decoder -------------------------------------------------------------

  // Reorders a (Q, [u.. v..]) row layout into (Q*N, 2) point rows.
  Var uv_rows(const Var& uvn) const {
    int Q = uvn.shape()[0], N = cfg_.anchor_points();
    std::vector<std::int64_t> map(static_cast<std::size_t>(Q) * N * 2);
    for (int q = 0; q < Q; ++q)
      for (int n = 0; n < N; ++n) {
        map[(static_cast<std::size_t>(q) * N + n) * 2] = static_cast<std::int64_t>(q) * 2 * N + n;
        map[(static_cast<std::size_t>(q) * N + n) * 2 + 1] =
            static_cast<std::int64_t>(q) * 2 * N + N + n;
      }
    return index_map(uvn, {Q * N, 2}, std::move(map));
  }

  Var self_attention(const DecoderLayer& lay, const Var& content, const Var& pos) const {
    int D = cfg_.embed_dim, M = cfg_.heads, dh = D / M;
    Var qk_in = add(content, pos);
    Var Q = lay.wq(qk_in), K = lay.wk(qk_in), V = lay.wv(content);
    std::vector<Var> heads;
    for (int m = 0; m < M; ++m) {
      Var qh = slice_cols(Q, m * dh, (m + 1) * dh);
      Var kh = slice_cols(K, m * dh, (m + 1) * dh);
      Var vh = slice_cols(V, m * dh, (m + 1) * dh);
      Var attn = softmax_rows(scale(matmul_nt(qh, kh), 1.0 / std::sqrt(dh)));
      heads.push_back(matmul(attn, vh));
    }
    return lay.wo(concat_cols(heads));
  }

  ItemPrediction decode_item(const std::vector<Var>& enc_maps,
                             const std::vector<Var>& value_maps, const CameraModel& cam, int b,
                             ForwardTrace* trace) const {
    int D = cfg_.embed_dim, M = cfg_.heads, K = cfg_.sample_points, L = cfg_.levels;
    int N = cfg_.anchor_points(), Lq = cfg_.num_queries;
    ItemPrediction item;
    Var content = query_embed_;
    Var anchors = Var::leaf({Lq, 2 * N}, init_anchors_);
    std::vector<int> row_batch(Lq, b);

    // Column maps reused across layers.
    std::vector<std::int64_t> uv_tile(static_cast<std::size_t>(Lq) * M * L * N * 2);
    std::vector<std::int64_t> cso_tile(static_cast<std::size_t>(Lq) * M * L * N * 2);
    std::vector<double> off_scale(static_cast<std::size_t>(Lq) * M * L * N * 2);
    for (int q = 0; q < Lq; ++q)
      for (int m = 0; m < M; ++m)
        for (int l = 0; l < L; ++l)
          for (int n = 0; n < N; ++n) {
            std::size_t c = ((static_cast<std::size_t>(q) * M + m) * L + l) * N + n;
            uv_tile[c * 2] = static_cast<std::int64_t>(q) * 2 * N + n;
            uv_tile[c * 2 + 1] = static_cast<std::int64_t>(q) * 2 * N + N + n;
            cso_tile[c * 2] = static_cast<std::int64_t>(q) * (N * K * 2) + (n * K + m % K) * 2;
            cso_tile[c * 2 + 1] = cso_tile[c * 2] + 1;
            off_scale[c * 2] = 1.0 / cfg_.level_w(l);
            off_scale[c * 2 + 1] = 1.0 / cfg_.level_h(l);
          }

    Var pos = positional_embed(anchors);
    for (int layer = 0; layer < cfg_.decoder_layers; ++layer) {
      const DecoderLayer& lay = dec_[layer];
      content = lay.ln_sa(add(content, self_attention(lay, content, pos)));

      std::vector<double> flags;
      Var uvn = project_anchors(anchors, cfg_.fixed_ys, cam, &flags);
      Var q_full = add(content, pos);

      Var locs = index_map(uvn, {Lq, M * L * N * 2}, uv_tile);
      if (cfg_.sampling != SamplingMode::kNone) {
        Var off = mul_const(lay.offsets(q_full), off_scale);
        locs = add(locs, off);
      }
      if (cfg_.sampling == SamplingMode::kContextOffsets) {
        Var f_c = context_feature(enc_maps, uv_rows(uvn), flags, Lq, N, b, 1e-6);
        Var cso = context_sampling_offsets(f_c, content);
        locs = add(locs, index_map(cso, {Lq, M * L * N * 2}, cso_tile));
      }
      Var aw = reshape(softmax_rows(reshape(lay.weights(q_full), {Lq * M, L * N})),
                       {Lq, M * L * N});
      Var sampled = ms_deform_sample(value_maps, locs, aw, row_batch, M);
      content = lay.ln_ca(add(content, lay.out(sampled)));
      content = lay.ln_ffn(add(content, lay.ffn2(silu(lay.ffn1(content)))));

      Var delta = clamp(lay.refine(content), -cfg_.delta_clamp, cfg_.delta_clamp);
      Var moved = add(anchors, delta);
      Var xs = clamp(slice_cols(moved, 0, N), cfg_.range.x_min, cfg_.range.x_max);
      Var zs = clamp(slice_cols(moved, N, 2 * N), cfg_.range.z_min, cfg_.range.z_max);
      anchors = concat_cols({xs, zs});

      // The head reads content plus the refined anchors' positional embedding:
      // appearance alone does not carry absolute lane shape, the anchors do.
      pos = positional_embed(anchors);
      LayerPrediction pred;
      pred.anchors = anchors;
      head_readout(head_mlp_(add(content, pos)), anchors, &pred);
      item.layers.push_back(pred);

      if (trace) {
        trace->cross_locs[b].push_back(locs.val());
        trace->cross_weights[b].push_back(aw.val());
        trace->anchor_flags[b].push_back(flags);
      }
    }
    return item;
  }

  void head_readout(const Var& h, const Var& anchors, LayerPrediction* pred) const {
    int N = cfg_.anchor_points(), R = cfg_.poly_order;
    pred->conf_logit = scale(slice_cols(h, 0, 1), cfg_.conf_scale);
    Var sg_start = sigmoid(slice_cols(h, 1, 2));
    Var sg_gap = sigmoid(slice_cols(h, 2, 3));
    double y0 = cfg_.range.y_min, y1 = cfg_.range.y_max;
    pred->y_start = add_scalar(scale(sg_start, y1 - y0), y0);
    // y_end = y_start + (y_max - y_start) * s = y_start * (1 - s) + y_max * s
    pred->y_end = add(mul(pred->y_start, add_scalar(scale(sg_gap, -1.0), 1.0)),
                      scale(sg_gap, y1));
    if (cfg_.head == HeadMode::kCurve) {
      // Coefficients = least-squares fit of the refined anchors plus a scaled
      // residual read from the content. The fit is a constant linear map, so
      // the curve prediction loss trains the anchor scaffold through it; the
      // residual lets the head move the curve off the fit where features say so.
      Var ca = scale(slice_cols(h, 3, 3 + R + 1), cfg_.coef_scale_x);
      Var cb = scale(slice_cols(h, 3 + R + 1, 3 + 2 * (R + 1)), cfg_.coef_scale_z);
      if (anchors.defined()) {
        Var pinv = Var::leaf({R + 1, N}, pinv_);
        ca = add(ca, matmul_nt(slice_cols(anchors, 0, N), pinv));
        cb = add(cb, matmul_nt(slice_cols(anchors, N, 2 * N), pinv));
      }
      Var vand = Var::leaf({N, R + 1}, vand_);
      pred->coef_a = ca;
      pred->coef_b = cb;
      pred->pts_x = matmul_nt(ca, vand);
      pred->pts_z = matmul_nt(cb, vand);
    } else {
      CVL_CHECK(anchors.defined(), "head_readout: point head needs anchors");
      pred->pts_x = slice_cols(anchors, 0, N);
      pred->pts_z = slice_cols(anchors, N, 2 * N);
    }
  }

  // Converts coefficients over t = (y - y_min) / (y_max - y_min) into plain
  // powers of y by binomial expansion.
  std::vector<double> poly_from_normalized(const std::vector<double>& c) const {
    int R = static_cast<int>(c.size()) - 1;
    double y0 = cfg_.range.y_min, dy = cfg_.range.y_max - cfg_.range.y_min;
    std::vector<double> out(R + 1, 0.0);
    std::vector<double> binom{1.0};
    for (int r = 0; r <= R; ++r) {
      double s = c[r] / std::pow(dy, r);
      // (y - y0)^r = sum_j C(r,j) y^j (-y0)^(r-j)
      for (int j = 0; j <= r; ++j) out[j] += s * binom[j] * std::pow(-y0, r - j);
      std::vector<double> next(binom.size() + 1, 0.0);
      for (std::size_t i = 0; i < binom.size(); ++i) {
        next[i] += binom[i];
        next[i + 1] += binom[i];
      }
      binom = std::move(next);
    }
    return out;
  }

  std::vector<double> fit_poly(const Var& anchors, int q, int axis) const {
    int N = cfg_.anchor_points(), R = cfg_.poly_order;
    int cols = R + 1;
    // Normal equations over the normalized Vandermonde basis.
    std::vector<double> ata(cols * cols, 0.0), atb(cols, 0.0);
    for (int n = 0; n < N; ++n) {
      double target = anchors.val()[q * 2 * N + axis * N + n];
      for (int r = 0; r < cols; ++r) {
        atb[r] += vand_[n * cols + r] * target;
        for (int s = 0; s < cols; ++s)
          ata[r * cols + s] += vand_[n * cols + r] * vand_[n * cols + s];
      }
    }
    // Gaussian elimination with partial pivoting.
    for (int i = 0; i < cols; ++i) {
      int piv = i;
      for (int r = i + 1; r < cols; ++r)
        if (std::fabs(ata[r * cols + i]) > std::fabs(ata[piv * cols + i])) piv = r;
      for (int cidx = 0; cidx < cols; ++cidx) std::swap(ata[i * cols + cidx], ata[piv * cols + cidx]);
      std::swap(atb[i], atb[piv]);
      double diag = ata[i * cols + i];
      CVL_CHECK(std::fabs(diag) > 1e-12, "fit_poly: singular system");
      for (int r = 0; r < cols; ++r) {
        if (r == i) continue;
        double f = ata[r * cols + i] / diag;
        for (int cidx = i; cidx < cols; ++cidx) ata[r * cols + cidx] -= f * ata[i * cols + cidx];
        atb[r] -= f * atb[i];
      }
    }
    std::vector<double> t_coef(cols);
    for (int i = 0; i < cols; ++i) t_coef[i] = atb[i] / ata[i * cols + i];
    return poly_from_normalized(t_coef);
  }
};

}  // namespace curvelab
