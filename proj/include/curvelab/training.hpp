#pragma once

// Set-based training: bipartite matching of predictions to ground truth with
// background padding, the curve prediction loss, deep supervision of refined
// anchors across decoder layers, and the auxiliary segmentation loss.
// Matching runs on plain doubles (no gradient flows through the assignment).

#include <cmath>
#include <vector>

#include "curvelab/hungarian.hpp"
#include "curvelab/model.hpp"
#include "curvelab/scenegen.hpp"
#include "curvelab/tensor.hpp"

namespace curvelab {

struct LossCoefficients {
  double alpha1 = 2.0;  // classification
  double alpha2 = 5.0;  // point-set L1
  double alpha3 = 2.0;  // boundary L1
  double alpha4 = 2.0;  // anchor deep supervision
};

// Ground truth lane as consumed by matching and losses: sampled at the fixed
// y-positions with a per-point trainable mask (in-extent AND visible).
struct GtView {
  double y_start = 0.0, y_end = 0.0;
  std::vector<double> xs, zs;
  std::vector<std::uint8_t> visible;
  int visible_count = 0;
};

// Prediction slot in plain doubles.
struct PredView {
  double confidence = 0.0;
  double y_start = 0.0, y_end = 0.0;
  std::vector<double> xs, zs;
};

inline GtView gt_view(const GtLane& lane) {
  GtView v;
  v.y_start = lane.curve.y_start;
  v.y_end = lane.curve.y_end;
  for (int n = 0; n < lane.anchors.size(); ++n) {
    v.xs.push_back(lane.anchors.points[n].x);
    v.zs.push_back(lane.anchors.points[n].z);
    std::uint8_t vis = lane.anchors.in_extent[n] && lane.visibility[n] ? 1 : 0;
    v.visible.push_back(vis);
    v.visible_count += vis;
  }
  return v;
}

// Lanes with no trainable point cannot be matched or evaluated; both the
// trainer and the evaluator skip them.
inline std::vector<GtView> scene_gt_views(const Scene& scene) {
  std::vector<GtView> out;
  for (const auto& lane : scene.lanes) {
    GtView v = gt_view(lane);
    if (v.visible_count > 0) out.push_back(std::move(v));
  }
  return out;
}

inline std::vector<PredView> pred_views(const LayerPrediction& layer) {
  int Lq = layer.conf_logit.shape()[0];
  int N = layer.pts_x.shape()[1];
  std::vector<PredView> out(Lq);
  for (int q = 0; q < Lq; ++q) {
    PredView& p = out[q];
    p.confidence = 1.0 / (1.0 + std::exp(-layer.conf_logit.val()[q]));
    p.y_start = layer.y_start.val()[q];
    p.y_end = layer.y_end.val()[q];
    p.xs.assign(layer.pts_x.val().begin() + q * N, layer.pts_x.val().begin() + (q + 1) * N);
    p.zs.assign(layer.pts_z.val().begin() + q * N, layer.pts_z.val().begin() + (q + 1) * N);
  }
  return out;
}

// Matching cost of one (gt, pred) pair. A background row (is_lane = false)
// carries only the classification term. L1 terms are means: points over the
// GT's visible positions, boundaries over the two endpoints.
inline double pair_cost(const GtView& gt, const PredView& pred, const LossCoefficients& co,
                        bool is_lane = true) {
  if (!is_lane) return -co.alpha1 * (1.0 - pred.confidence);
  CVL_CHECK(gt.xs.size() == pred.xs.size(), "pair_cost: point count mismatch");
  CVL_CHECK(gt.visible_count > 0, "pair_cost: ground-truth lane has no visible points");
  double pt = 0.0;
  for (std::size_t n = 0; n < gt.xs.size(); ++n) {
    if (!gt.visible[n]) continue;
    pt += std::fabs(pred.xs[n] - gt.xs[n]) + std::fabs(pred.zs[n] - gt.zs[n]);
  }
  pt /= gt.visible_count;
  double bd = 0.5 * (std::fabs(pred.y_start - gt.y_start) + std::fabs(pred.y_end - gt.y_end));
  return -co.alpha1 * pred.confidence + co.alpha2 * pt + co.alpha3 * bd;
}

struct MatchResult {
  std::vector<int> pred_for_gt;  // gt index -> prediction slot
  std::vector<int> gt_for_pred;  // prediction slot -> gt index, -1 = background
  double total_cost = 0.0;
};

// Globally optimal assignment over the square problem obtained by padding the
// ground-truth side with background rows up to the prediction count.
inline MatchResult hungarian_match(const std::vector<GtView>& gts,
                                   const std::vector<PredView>& preds,
                                   const LossCoefficients& co) {
  int G = static_cast<int>(gts.size());
  int P = static_cast<int>(preds.size());
  CVL_CHECK(G <= P, "hungarian_match: more ground-truth lanes than prediction slots");
  std::vector<double> cost(static_cast<std::size_t>(P) * P);
  for (int i = 0; i < P; ++i)
    for (int j = 0; j < P; ++j)
      cost[i * P + j] = i < G ? pair_cost(gts[i], preds[j], co, true)
                              : pair_cost(GtView{}, preds[j], co, false);
  std::vector<int> row_to_col = solve_assignment(cost, P);
  MatchResult m;
  m.gt_for_pred.assign(P, -1);
  for (int i = 0; i < G; ++i) {
    m.pred_for_gt.push_back(row_to_col[i]);
    m.gt_for_pred[row_to_col[i]] = i;
  }
  m.total_cost = assignment_cost(cost, P, row_to_col);
  return m;
}

// Classification over every slot plus point and boundary regression over the
// matched pairs, evaluated on one decoder layer's head outputs.
inline Var curve_loss(const LayerPrediction& layer, const MatchResult& match,
                      const std::vector<GtView>& gts, const LossCoefficients& co) {
  int Lq = layer.conf_logit.shape()[0];
  int N = layer.pts_x.shape()[1];
  std::vector<double> targets(Lq, 0.0);
  for (int j = 0; j < Lq; ++j)
    if (match.gt_for_pred[j] >= 0) targets[j] = 1.0;
  Var loss = scale(bce_with_logits(reshape(layer.conf_logit, {1, Lq}), targets, false), co.alpha1);

  std::vector<int> mq;
  std::vector<int> mg;
  for (std::size_t g = 0; g < match.pred_for_gt.size(); ++g) {
    mq.push_back(match.pred_for_gt[g]);
    mg.push_back(static_cast<int>(g));
  }
  if (mq.empty()) return loss;
  int P = static_cast<int>(mq.size());

  std::vector<double> neg_gx(static_cast<std::size_t>(P) * N), neg_gz(neg_gx.size());
  std::vector<double> w(neg_gx.size(), 0.0);
  std::vector<double> neg_bys(P), neg_bye(P);
  for (int i = 0; i < P; ++i) {
    const GtView& g = gts[mg[i]];
    for (int n = 0; n < N; ++n) {
      neg_gx[i * N + n] = -g.xs[n];
      neg_gz[i * N + n] = -g.zs[n];
      if (g.visible[n]) w[i * N + n] = 1.0 / g.visible_count;
    }
    neg_bys[i] = -g.y_start;
    neg_bye[i] = -g.y_end;
  }
  Var dx = mul_const(abs_val(add_const(select_rows(layer.pts_x, mq), neg_gx)), w);
  Var dz = mul_const(abs_val(add_const(select_rows(layer.pts_z, mq), neg_gz)), std::move(w));
  loss = add(loss, scale(add(sum_all(dx), sum_all(dz)), co.alpha2));

  Var bs = abs_val(add_const(select_rows(layer.y_start, mq), neg_bys));
  Var be = abs_val(add_const(select_rows(layer.y_end, mq), neg_bye));
  loss = add(loss, scale(add(sum_all(bs), sum_all(be)), 0.5 * co.alpha3));
  return loss;
}

// Deep supervision: L1 between every decoder layer's refined anchors and the
// matched GT points, over visible positions.
inline Var query_loss(const ItemPrediction& item, const MatchResult& match,
                      const std::vector<GtView>& gts, const LossCoefficients& co) {
  if (match.pred_for_gt.empty() || item.layers.empty())
    return Var::scalar(0.0);
  int N = static_cast<int>(gts[0].xs.size());
  int P = static_cast<int>(match.pred_for_gt.size());
  std::vector<int> mq(match.pred_for_gt);
  std::vector<double> neg_t(static_cast<std::size_t>(P) * 2 * N);
  std::vector<double> w(neg_t.size(), 0.0);
  for (int i = 0; i < P; ++i) {
    const GtView& g = gts[i];
    for (int n = 0; n < N; ++n) {
      neg_t[i * 2 * N + n] = -g.xs[n];
      neg_t[i * 2 * N + N + n] = -g.zs[n];
      if (g.visible[n]) {
        w[i * 2 * N + n] = 1.0 / g.visible_count;
        w[i * 2 * N + N + n] = 1.0 / g.visible_count;
      }
    }
  }
  Var acc;
  for (const auto& layer : item.layers) {
    Var diff = mul_const(abs_val(add_const(select_rows(layer.anchors, mq), neg_t)), w);
    Var term = sum_all(diff);
    acc = acc.defined() ? add(acc, term) : term;
  }
  return scale(acc, co.alpha4);
}

// Binary lane-vs-background max-pool of an instance mask down to the
// segmentation head's stride.
inline std::vector<double> downsample_mask(const std::vector<std::int32_t>& mask, int H, int W,
                                           int factor) {
  CVL_CHECK(H % factor == 0 && W % factor == 0, "downsample_mask: dims not divisible");
  int h = H / factor, w = W / factor;
  std::vector<double> out(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      if (mask[y * W + x] > 0) out[(y / factor) * w + x / factor] = 1.0;
  return out;
}

// Pixelwise BCE between the stride-4 segmentation logits and the binarized
// mask, mean over all pixels of the batch.
inline Var seg_loss(const Var& seg_logits, const std::vector<double>& targets) {
  CVL_CHECK(seg_logits.size() == static_cast<std::int64_t>(targets.size()),
            "seg_loss: logits/mask shape mismatch");
  return bce_with_logits(seg_logits, targets, true);
}

struct SceneLoss {
  Var curve;
  Var query;
  MatchResult match;
};

// Matching uses the final layer's head outputs; the same assignment
// supervises every layer. A caller-supplied fixed match bypasses the
// (non-differentiable) assignment, which keeps finite differencing clean.
inline SceneLoss scene_loss(const ItemPrediction& item, const std::vector<GtView>& gts,
                            const LossCoefficients& co, const MatchResult* fixed_match = nullptr) {
  SceneLoss out;
  const LayerPrediction& last = item.layers.back();
  if (fixed_match) {
    out.match = *fixed_match;
  } else {
    out.match = hungarian_match(gts, pred_views(last), co);
  }
  out.curve = curve_loss(last, out.match, gts, co);
  out.query = query_loss(item, out.match, gts, co);
  return out;
}

struct BatchLoss {
  Var total;
  double curve = 0.0, query = 0.0, seg = 0.0;
  int matched = 0;

  double total_value() const { return curve + query + seg; }
};

inline BatchLoss batch_loss(const ForwardOutput& out, const std::vector<const Scene*>& scenes,
                            const LossCoefficients& co, bool use_seg,
                            const std::vector<MatchResult>* fixed_matches = nullptr) {
  int B = static_cast<int>(scenes.size());
  CVL_CHECK(static_cast<int>(out.items.size()) == B, "batch_loss: item count mismatch");
  BatchLoss bl;
  Var curve_sum, query_sum;
  for (int b = 0; b < B; ++b) {
    auto gts = scene_gt_views(*scenes[b]);
    SceneLoss sl = scene_loss(out.items[b], gts, co,
                              fixed_matches ? &(*fixed_matches)[b] : nullptr);
    bl.matched += static_cast<int>(sl.match.pred_for_gt.size());
    curve_sum = curve_sum.defined() ? add(curve_sum, sl.curve) : sl.curve;
    query_sum = query_sum.defined() ? add(query_sum, sl.query) : sl.query;
  }
  Var curve_avg = scale(curve_sum, 1.0 / B);
  Var query_avg = scale(query_sum, 1.0 / B);
  bl.curve = curve_avg.item();
  bl.query = query_avg.item();
  bl.total = add(curve_avg, query_avg);
  if (use_seg) {
    CVL_CHECK(out.seg_logits.defined(), "batch_loss: seg branch requested but absent");
    std::vector<double> targets;
    for (const Scene* s : scenes) {
      auto t = downsample_mask(s->seg_mask, s->img_h, s->img_w, 4);
      targets.insert(targets.end(), t.begin(), t.end());
    }
    Var seg = seg_loss(out.seg_logits, targets);
    bl.seg = seg.item();
    bl.total = add(bl.total, seg);
  }
  return bl;
}

}  // namespace curvelab
