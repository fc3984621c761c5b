#pragma once

// Evaluation protocol: per-lane point-distance matching with a max-distance /
// coverage rule, greedy one-to-one scene assignment, F-score, all-point
// interpolated AP (matching recomputed per confidence threshold), and mean
// absolute x/z errors split into near and far ranges.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "curvelab/check.hpp"
#include "curvelab/geometry.hpp"

namespace curvelab {

struct EvalConfig {
  double max_distance = 1.5;      // meters
  double coverage_fraction = 0.75;
  double near_min = 0.0, near_max = 40.0;
  double far_min = 40.0, far_max = 100.0;
  double confidence_threshold = 0.5;
  std::vector<double> ys = default_fixed_ys();

  void validate() const {
    CVL_CHECK(coverage_fraction > 0.0 && coverage_fraction <= 1.0, "eval: bad coverage fraction");
    CVL_CHECK(near_max <= far_min, "eval: near/far ranges must be disjoint and ordered");
    CVL_CHECK(!ys.empty(), "eval: no y-positions");
  }
};

// A lane sampled at the evaluation y-positions. Ground-truth lanes carry
// their per-point visibility; predictions leave it all-ones.
struct EvalLane {
  double confidence = 1.0;
  double y_start = 0.0, y_end = 0.0;
  std::vector<double> xs, zs;
  std::vector<std::uint8_t> visibility;
};

struct LaneMatchInfo {
  bool matched = false;
  int covered = 0;
  int within = 0;
  double mean_distance = 0.0;  // over covered positions
};

// Covered positions are those inside both lanes' y-extents where the ground
// truth is visible; the pair matches when at least the coverage fraction of
// them lie within max_distance in the x-z plane.
inline LaneMatchInfo lane_match(const EvalLane& pred, const EvalLane& gt, const EvalConfig& cfg) {
  CVL_CHECK(pred.xs.size() == cfg.ys.size() && gt.xs.size() == cfg.ys.size(),
            "lane_match: lanes must be sampled at the eval y-positions");
  LaneMatchInfo info;
  double dist_sum = 0.0;
  for (std::size_t n = 0; n < cfg.ys.size(); ++n) {
    double y = cfg.ys[n];
    bool covered = y >= pred.y_start && y <= pred.y_end && y >= gt.y_start && y <= gt.y_end &&
                   (gt.visibility.empty() || gt.visibility[n]);
    if (!covered) continue;
    ++info.covered;
    double d = std::hypot(pred.xs[n] - gt.xs[n], pred.zs[n] - gt.zs[n]);
    dist_sum += d;
    if (d < cfg.max_distance) ++info.within;
  }
  if (info.covered == 0) return info;
  info.mean_distance = dist_sum / info.covered;
  info.matched =
      static_cast<double>(info.within) / info.covered >= cfg.coverage_fraction;
  return info;
}

struct ScenePairing {
  std::vector<std::pair<int, int>> pairs;  // (pred index, gt index)
  int tp = 0, fp = 0, fn = 0;
};

// Greedy one-to-one assignment among mutually matchable pairs, ascending mean
// point distance; ties break on (pred index, gt index).
inline ScenePairing assign_scene(const std::vector<EvalLane>& preds,
                                 const std::vector<EvalLane>& gts, const EvalConfig& cfg) {
  struct Cand {
    double dist;
    int p, g;
  };
  std::vector<Cand> cands;
  for (std::size_t p = 0; p < preds.size(); ++p)
    for (std::size_t g = 0; g < gts.size(); ++g) {
      LaneMatchInfo info = lane_match(preds[p], gts[g], cfg);
      if (info.matched)
        cands.push_back({info.mean_distance, static_cast<int>(p), static_cast<int>(g)});
    }
  std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.dist != b.dist) return a.dist < b.dist;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  ScenePairing out;
  std::vector<char> p_used(preds.size(), 0), g_used(gts.size(), 0);
  for (const auto& c : cands) {
    if (p_used[c.p] || g_used[c.g]) continue;
    p_used[c.p] = g_used[c.g] = 1;
    out.pairs.push_back({c.p, c.g});
  }
  out.tp = static_cast<int>(out.pairs.size());
  out.fp = static_cast<int>(preds.size()) - out.tp;
  out.fn = static_cast<int>(gts.size()) - out.tp;
  return out;
}

inline double f_score(int tp, int fp, int fn) {
  CVL_CHECK(tp >= 0 && fp >= 0 && fn >= 0, "f_score: negative counts");
  if (tp == 0) return 0.0;
  double precision = static_cast<double>(tp) / (tp + fp);
  double recall = static_cast<double>(tp) / (tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

// All-point interpolated area under the precision-recall curve from a set of
// (recall, precision) operating points; precision envelope taken from the
// right, integrated over recall increments from zero.
inline double ap_from_points(std::vector<std::pair<double, double>> pr, int total_gt) {
  if (total_gt == 0 || pr.empty()) return 0.0;
  std::sort(pr.begin(), pr.end());
  // Keep the best precision at each recall level.
  std::vector<std::pair<double, double>> uniq;
  for (const auto& rp : pr) {
    if (!uniq.empty() && uniq.back().first == rp.first)
      uniq.back().second = std::max(uniq.back().second, rp.second);
    else
      uniq.push_back(rp);
  }
  for (int i = static_cast<int>(uniq.size()) - 2; i >= 0; --i)
    uniq[i].second = std::max(uniq[i].second, uniq[i + 1].second);
  double ap = 0.0, prev_r = 0.0;
  for (const auto& [r, p] : uniq) {
    ap += (r - prev_r) * p;
    prev_r = r;
  }
  return ap;
}

struct EvalReport {
  double f1 = 0.0;
  double ap = 0.0;
  double x_err_near = 0.0, x_err_far = 0.0;
  double z_err_near = 0.0, z_err_far = 0.0;
  int tp = 0, fp = 0, fn = 0;
  std::vector<ScenePairing> per_scene;
};

namespace detail {

struct ErrAccum {
  double x_near = 0.0, x_far = 0.0, z_near = 0.0, z_far = 0.0;
  std::int64_t n_near = 0, n_far = 0;
};

inline void accumulate_errors(const EvalLane& pred, const EvalLane& gt, const EvalConfig& cfg,
                              ErrAccum* acc) {
  for (std::size_t n = 0; n < cfg.ys.size(); ++n) {
    double y = cfg.ys[n];
    bool covered = y >= pred.y_start && y <= pred.y_end && y >= gt.y_start && y <= gt.y_end &&
                   (gt.visibility.empty() || gt.visibility[n]);
    if (!covered) continue;
    double ax = std::fabs(pred.xs[n] - gt.xs[n]);
    double az = std::fabs(pred.zs[n] - gt.zs[n]);
    if (y >= cfg.near_min && y <= cfg.near_max) {
      acc->x_near += ax;
      acc->z_near += az;
      ++acc->n_near;
    } else if (y > cfg.far_min && y <= cfg.far_max) {
      acc->x_far += ax;
      acc->z_far += az;
      ++acc->n_far;
    }
  }
}

}  // namespace detail

// Mean absolute deviations over the matched pairs' covered points, split by
// the near/far y windows.
inline void xz_errors(const std::vector<std::pair<const EvalLane*, const EvalLane*>>& pairs,
                      const EvalConfig& cfg, double* x_near, double* x_far, double* z_near,
                      double* z_far) {
  detail::ErrAccum acc;
  for (const auto& [pred, gt] : pairs) detail::accumulate_errors(*pred, *gt, cfg, &acc);
  *x_near = acc.n_near ? acc.x_near / acc.n_near : 0.0;
  *z_near = acc.n_near ? acc.z_near / acc.n_near : 0.0;
  *x_far = acc.n_far ? acc.x_far / acc.n_far : 0.0;
  *z_far = acc.n_far ? acc.z_far / acc.n_far : 0.0;
}

// Ground-truth lanes with zero visible in-extent points are dropped before
// scoring; they cannot be matched by construction.
inline std::vector<EvalLane> filter_evaluable(const std::vector<EvalLane>& gts,
                                              const EvalConfig& cfg) {
  std::vector<EvalLane> out;
  for (const auto& g : gts) {
    int covered = 0;
    for (std::size_t n = 0; n < cfg.ys.size(); ++n)
      if (cfg.ys[n] >= g.y_start && cfg.ys[n] <= g.y_end &&
          (g.visibility.empty() || g.visibility[n]))
        ++covered;
    if (covered > 0) out.push_back(g);
  }
  return out;
}

// Full evaluation of a scene set. F-score and errors use the confidence
// threshold; AP sweeps every distinct confidence as a threshold, re-running
// the assignment each time.
inline EvalReport evaluate_scenes(const std::vector<std::vector<EvalLane>>& scene_preds,
                                  const std::vector<std::vector<EvalLane>>& scene_gts,
                                  const EvalConfig& cfg) {
  cfg.validate();
  CVL_CHECK(scene_preds.size() == scene_gts.size(), "evaluate_scenes: scene count mismatch");
  EvalReport rep;
  std::vector<std::vector<EvalLane>> gts;
  for (const auto& g : scene_gts) gts.push_back(filter_evaluable(g, cfg));

  int total_gt = 0;
  for (const auto& g : gts) total_gt += static_cast<int>(g.size());

  for (std::size_t s = 0; s < scene_preds.size(); ++s) {
    std::vector<EvalLane> preds;
    std::vector<int> orig_index;
    for (std::size_t p = 0; p < scene_preds[s].size(); ++p)
      if (scene_preds[s][p].confidence >= cfg.confidence_threshold) {
        preds.push_back(scene_preds[s][p]);
        orig_index.push_back(static_cast<int>(p));
      }
    ScenePairing pairing = assign_scene(preds, gts[s], cfg);
    rep.tp += pairing.tp;
    rep.fp += pairing.fp;
    rep.fn += pairing.fn;
    // Pair indices refer to the filtered prediction list; report them in the
    // caller's indexing.
    for (auto& [pi, gi] : pairing.pairs) pi = orig_index[pi];
    rep.per_scene.push_back(std::move(pairing));
  }
  rep.f1 = f_score(rep.tp, rep.fp, rep.fn);
  detail::ErrAccum acc;
  for (std::size_t s = 0; s < scene_preds.size(); ++s)
    for (const auto& [pi, gi] : rep.per_scene[s].pairs)
      detail::accumulate_errors(scene_preds[s][pi], gts[s][gi], cfg, &acc);
  rep.x_err_near = acc.n_near ? acc.x_near / acc.n_near : 0.0;
  rep.z_err_near = acc.n_near ? acc.z_near / acc.n_near : 0.0;
  rep.x_err_far = acc.n_far ? acc.x_far / acc.n_far : 0.0;
  rep.z_err_far = acc.n_far ? acc.z_far / acc.n_far : 0.0;

  // AP: sweep every distinct confidence as the inclusion threshold.
  std::vector<double> confs;
  for (const auto& sp : scene_preds)
    for (const auto& p : sp) confs.push_back(p.confidence);
  std::sort(confs.begin(), confs.end());
  confs.erase(std::unique(confs.begin(), confs.end()), confs.end());
  std::vector<std::pair<double, double>> pr;
  for (double tau : confs) {
    int tp = 0, fp = 0;
    for (std::size_t s = 0; s < scene_preds.size(); ++s) {
      std::vector<EvalLane> preds;
      for (const auto& p : scene_preds[s])
        if (p.confidence >= tau) preds.push_back(p);
      ScenePairing pairing = assign_scene(preds, gts[s], cfg);
      tp += pairing.tp;
      fp += pairing.fp;
    }
    if (tp + fp == 0) continue;
    double precision = static_cast<double>(tp) / (tp + fp);
    double recall = total_gt > 0 ? static_cast<double>(tp) / total_gt : 0.0;
    pr.push_back({recall, precision});
  }
  rep.ap = ap_from_points(std::move(pr), total_gt);
  return rep;
}

}  // namespace curvelab
