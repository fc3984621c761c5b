// Matching and loss checks: hand-computed pair costs, brute-force assignment
// oracles, loss decomposition against explicit arithmetic, mask downsampling
// and an end-to-end optimizer smoke run on a generated scene.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "curvelab/rng.hpp"
#include "curvelab/scenegen.hpp"
#include "curvelab/training.hpp"

using namespace curvelab;

namespace {

GtView make_gt(std::vector<double> xs, std::vector<double> zs,
               std::vector<std::uint8_t> visible, double ys, double ye) {
  GtView g;
  g.xs = std::move(xs);
  g.zs = std::move(zs);
  g.visible = std::move(visible);
  for (auto v : g.visible) g.visible_count += v;
  g.y_start = ys;
  g.y_end = ye;
  return g;
}

PredView make_pred(double conf, std::vector<double> xs, std::vector<double> zs, double ys,
                   double ye) {
  PredView p;
  p.confidence = conf;
  p.xs = std::move(xs);
  p.zs = std::move(zs);
  p.y_start = ys;
  p.y_end = ye;
  return p;
}

GtView random_gt(Rng& rng, int n) {
  GtView g;
  int vis = 0;
  for (int i = 0; i < n; ++i) {
    g.xs.push_back(rng.uniform(-10.0, 10.0));
    g.zs.push_back(rng.uniform(-2.0, 2.0));
    std::uint8_t v = rng.uniform(0.0, 1.0) < 0.7 ? 1 : 0;
    g.visible.push_back(v);
    vis += v;
  }
  if (vis == 0) {
    g.visible[0] = 1;
    vis = 1;
  }
  g.visible_count = vis;
  g.y_start = rng.uniform(3.0, 20.0);
  g.y_end = rng.uniform(60.0, 103.0);
  return g;
}

PredView random_pred(Rng& rng, int n) {
  PredView p;
  p.confidence = rng.uniform(0.01, 0.99);
  for (int i = 0; i < n; ++i) {
    p.xs.push_back(rng.uniform(-10.0, 10.0));
    p.zs.push_back(rng.uniform(-2.0, 2.0));
  }
  p.y_start = rng.uniform(3.0, 20.0);
  p.y_end = rng.uniform(60.0, 103.0);
  return p;
}

// Minimum total cost over all injective gt -> slot maps, with unassigned
// slots charged as background. Independent of the square-padding trick.
double brute_force_match(const std::vector<GtView>& gts, const std::vector<PredView>& preds,
                         const LossCoefficients& co) {
  int G = static_cast<int>(gts.size()), P = static_cast<int>(preds.size());
  std::vector<int> slots(P);
  std::iota(slots.begin(), slots.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  std::sort(slots.begin(), slots.end());
  do {
    double c = 0.0;
    std::vector<bool> used(P, false);
    for (int g = 0; g < G; ++g) {
      c += pair_cost(gts[g], preds[slots[g]], co, true);
      used[slots[g]] = true;
    }
    for (int j = 0; j < P; ++j)
      if (!used[j]) c += pair_cost(GtView{}, preds[j], co, false);
    best = std::min(best, c);
  } while (std::next_permutation(slots.begin(), slots.end()));
  return best;
}

Var row_var(const std::vector<double>& v) {
  return Var::leaf({static_cast<int>(v.size()), 1}, v);
}

}  // namespace

TEST_CASE("background cost depends only on the slot confidence") {
  LossCoefficients co;
  PredView p = make_pred(0.7, {0.0}, {0.0}, 5.0, 80.0);
  CHECK(pair_cost(GtView{}, p, co, false) == Catch::Approx(-0.6).margin(1e-12));
  p.confidence = 0.0;
  CHECK(pair_cost(GtView{}, p, co, false) == Catch::Approx(-2.0).margin(1e-12));
  p.confidence = 1.0;
  CHECK(pair_cost(GtView{}, p, co, false) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("lane cost combines confidence, point and boundary terms") {
  LossCoefficients co;
  GtView g = make_gt({1, 2, 3, 4}, {0, 0, 0, 0}, {1, 1, 0, 1}, 5.0, 80.0);
  PredView p = make_pred(0.8, {1.5, 2.0, 3.25, 5.0}, {0.1, -0.2, 0.0, 0.5}, 6.0, 78.0);
  // Visible offsets: (0.5 + 0.1) + (0.0 + 0.2) + (1.0 + 0.5) = 2.3 over 3
  // points; boundaries: 0.5 * (1 + 2) = 1.5.
  double expect = -2.0 * 0.8 + 5.0 * (2.3 / 3.0) + 2.0 * 1.5;
  CHECK(pair_cost(g, p, co, true) == Catch::Approx(expect).margin(1e-12));

  // A unit x offset at every visible point costs exactly alpha2.
  GtView g2 = make_gt({0, 0, 0}, {0, 0, 0}, {1, 1, 1}, 5.0, 80.0);
  PredView p2 = make_pred(1.0, {1, 1, 1}, {0, 0, 0}, 5.0, 80.0);
  CHECK(pair_cost(g2, p2, co, true) == Catch::Approx(-2.0 + 5.0).margin(1e-12));
}

TEST_CASE("pair cost rejects unusable ground truth") {
  LossCoefficients co;
  GtView g = make_gt({1, 2}, {0, 0}, {0, 0}, 5.0, 80.0);
  PredView p = make_pred(0.5, {1, 2}, {0, 0}, 5.0, 80.0);
  CHECK_THROWS(pair_cost(g, p, co, true));
  GtView g2 = make_gt({1, 2, 3}, {0, 0, 0}, {1, 1, 1}, 5.0, 80.0);
  CHECK_THROWS(pair_cost(g2, p, co, true));  // point count mismatch
}

TEST_CASE("assignment solver agrees with exhaustive search on square costs") {
  Rng rng(101);
  for (int trial = 0; trial < 200; ++trial) {
    int n = 1 + static_cast<int>(rng.uniform_int(0, 5));
    std::vector<double> cost(static_cast<std::size_t>(n) * n);
    for (auto& c : cost) c = rng.uniform(-5.0, 5.0);
    std::vector<int> rc = solve_assignment(cost, n);

    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    do {
      double c = 0.0;
      for (int i = 0; i < n; ++i) c += cost[i * n + perm[i]];
      best = std::min(best, c);
    } while (std::next_permutation(perm.begin(), perm.end()));

    CHECK(assignment_cost(cost, n, rc) == Catch::Approx(best).margin(1e-9));
    std::vector<bool> used(n, false);
    for (int i = 0; i < n; ++i) {
      REQUIRE(rc[i] >= 0);
      REQUIRE(rc[i] < n);
      CHECK(!used[rc[i]]);
      used[rc[i]] = true;
    }
  }
}

TEST_CASE("lane matching with background padding is globally optimal") {
  LossCoefficients co;
  Rng rng(102);
  for (int trial = 0; trial < 100; ++trial) {
    int n = 4;
    int P = 2 + static_cast<int>(rng.uniform_int(0, 4));
    int G = 1 + static_cast<int>(rng.uniform_int(0, std::min(P, 4) - 1));
    std::vector<GtView> gts;
    std::vector<PredView> preds;
    for (int g = 0; g < G; ++g) gts.push_back(random_gt(rng, n));
    for (int p = 0; p < P; ++p) preds.push_back(random_pred(rng, n));

    MatchResult m = hungarian_match(gts, preds, co);
    CHECK(m.total_cost == Catch::Approx(brute_force_match(gts, preds, co)).margin(1e-9));

    // Structural consistency of the two index maps.
    REQUIRE(static_cast<int>(m.pred_for_gt.size()) == G);
    REQUIRE(static_cast<int>(m.gt_for_pred.size()) == P);
    std::vector<bool> used(P, false);
    for (int g = 0; g < G; ++g) {
      int j = m.pred_for_gt[g];
      REQUIRE(j >= 0);
      REQUIRE(j < P);
      CHECK(!used[j]);
      used[j] = true;
      CHECK(m.gt_for_pred[j] == g);
    }
    double recomputed = 0.0;
    for (int g = 0; g < G; ++g) recomputed += pair_cost(gts[g], preds[m.pred_for_gt[g]], co);
    for (int j = 0; j < P; ++j)
      if (m.gt_for_pred[j] < 0) recomputed += pair_cost(GtView{}, preds[j], co, false);
    CHECK(m.total_cost == Catch::Approx(recomputed).margin(1e-9));
  }
}

TEST_CASE("matching is deterministic") {
  LossCoefficients co;
  Rng rng(103);
  std::vector<GtView> gts = {random_gt(rng, 5), random_gt(rng, 5)};
  std::vector<PredView> preds;
  for (int p = 0; p < 6; ++p) preds.push_back(random_pred(rng, 5));
  MatchResult m1 = hungarian_match(gts, preds, co);
  MatchResult m2 = hungarian_match(gts, preds, co);
  CHECK(m1.pred_for_gt == m2.pred_for_gt);
  CHECK(m1.gt_for_pred == m2.gt_for_pred);
}

TEST_CASE("matching prefers the closer prediction") {
  LossCoefficients co;
  GtView g = make_gt({0, 0, 0}, {0, 0, 0}, {1, 1, 1}, 5.0, 80.0);
  // Equal confidence; slot 1 is 0.1 m away, slot 0 is 4 m away.
  std::vector<PredView> preds = {make_pred(0.5, {4, 4, 4}, {0, 0, 0}, 5.0, 80.0),
                                 make_pred(0.5, {0.1, 0.1, 0.1}, {0, 0, 0}, 5.0, 80.0)};
  MatchResult m = hungarian_match({g}, preds, co);
  CHECK(m.pred_for_gt[0] == 1);
}

TEST_CASE("curve loss equals its hand-computed decomposition") {
  LossCoefficients co;
  int Lq = 3, N = 3;
  LayerPrediction layer;
  std::vector<double> logits = {0.3, -1.2, 0.9};
  layer.conf_logit = row_var(logits);
  layer.y_start = row_var({6.0, 10.0, 4.5});
  layer.y_end = row_var({70.0, 90.0, 82.0});
  layer.pts_x = Var::leaf({Lq, N}, {1.0, 2.0, 3.0, -1.0, 0.0, 1.0, 0.5, 1.5, 2.5});
  layer.pts_z = Var::leaf({Lq, N}, {0.1, 0.2, 0.3, 0.0, 0.0, 0.0, -0.1, -0.2, -0.3});

  std::vector<GtView> gts = {make_gt({0.4, 1.4, 2.4}, {0, 0, 0}, {1, 1, 1}, 5.0, 80.0),
                             make_gt({1.5, 2.0, 3.5}, {0.1, 0.0, 0.3}, {1, 0, 1}, 6.0, 72.0)};
  MatchResult match;
  match.pred_for_gt = {2, 0};
  match.gt_for_pred = {1, -1, 0};

  Var loss = curve_loss(layer, match, gts, co);

  auto bce = [](double logit, double target) {
    // -target * log(sigmoid) - (1 - target) * log(1 - sigmoid)
    double p = 1.0 / (1.0 + std::exp(-logit));
    return -target * std::log(p) - (1.0 - target) * std::log(1.0 - p);
  };
  double cls = bce(0.3, 1.0) + bce(-1.2, 0.0) + bce(0.9, 1.0);
  // gt0 <- slot 2: x offsets 0.1 + 0.1 + 0.1, z offsets 0.1 + 0.2 + 0.3,
  // over 3 visible points.
  double pt0 = (0.3 + 0.6) / 3.0;
  // gt1 <- slot 0 over visible points 0 and 2: |1-1.5| + |3-3.5| in x,
  // |0.1-0.1| + |0.3-0.3| in z.
  double pt1 = (0.5 + 0.5 + 0.0 + 0.0) / 2.0;
  double bd0 = 0.5 * (std::fabs(4.5 - 5.0) + std::fabs(82.0 - 80.0));
  double bd1 = 0.5 * (std::fabs(6.0 - 6.0) + std::fabs(70.0 - 72.0));
  double expect = co.alpha1 * cls + co.alpha2 * (pt0 + pt1) + co.alpha3 * (bd0 + bd1);
  CHECK(loss.item() == Catch::Approx(expect).margin(1e-10));
}

TEST_CASE("curve loss with no lanes reduces to pure classification") {
  LossCoefficients co;
  int Lq = 4;
  LayerPrediction layer;
  layer.conf_logit = row_var(std::vector<double>(Lq, 0.0));
  layer.y_start = row_var(std::vector<double>(Lq, 10.0));
  layer.y_end = row_var(std::vector<double>(Lq, 90.0));
  layer.pts_x = Var::zeros({Lq, 3});
  layer.pts_z = Var::zeros({Lq, 3});
  MatchResult empty;
  empty.gt_for_pred.assign(Lq, -1);
  Var loss = curve_loss(layer, empty, {}, co);
  CHECK(loss.item() == Catch::Approx(co.alpha1 * Lq * std::log(2.0)).margin(1e-12));
}

TEST_CASE("query loss accumulates anchor error over every layer") {
  LossCoefficients co;
  int N = 2;
  ItemPrediction item;
  // Two layers, three query slots, anchors (Lq, [x.., z..]).
  item.layers.emplace_back();
  item.layers.emplace_back();
  item.layers[0].anchors =
      Var::leaf({3, 2 * N}, {1, 2, 0, 0, 5, 6, 1, 1, -1, -2, 0.5, 0.5});
  item.layers[1].anchors =
      Var::leaf({3, 2 * N}, {1.5, 2.5, 0, 0, 5, 6, 1, 1, -0.5, -1.0, 0.25, 0.25});

  std::vector<GtView> gts = {make_gt({1.0, 2.0}, {0.0, 0.0}, {1, 1}, 5.0, 80.0)};
  MatchResult match;
  match.pred_for_gt = {2};  // gt 0 supervised by slot 2
  match.gt_for_pred = {-1, -1, 0};

  // Layer 0 slot 2: |-1-1| + |-2-2| + |0.5| + |0.5| = 7, over 2 visible.
  // Layer 1 slot 2: |-0.5-1| + |-1-2| + 0.25 + 0.25 = 5, over 2 visible.
  double expect = co.alpha4 * (7.0 / 2.0 + 5.0 / 2.0);
  Var loss = query_loss(item, match, gts, co);
  CHECK(loss.item() == Catch::Approx(expect).margin(1e-12));

  // Invisible positions carry no weight.
  gts[0].visible = {1, 0};
  gts[0].visible_count = 1;
  double expect2 = co.alpha4 * ((2.0 + 0.5) / 1.0 + (1.5 + 0.25) / 1.0);
  CHECK(query_loss(item, match, gts, co).item() == Catch::Approx(expect2).margin(1e-12));
}

TEST_CASE("mask downsampling is a strided max-pool") {
  std::vector<std::int32_t> mask(8 * 8, 0);
  mask[2 * 8 + 3] = 7;  // any positive label counts
  auto down = downsample_mask(mask, 8, 8, 4);
  REQUIRE(down.size() == 4);
  CHECK(down[0] == 1.0);  // (2,3) falls in cell (0,0)
  CHECK(down[1] == 0.0);
  CHECK(down[2] == 0.0);
  CHECK(down[3] == 0.0);
  CHECK_THROWS(downsample_mask(mask, 6, 8, 4));
}

TEST_CASE("segmentation loss is the mean pixel cross-entropy") {
  Var logits = Var::zeros({1, 1, 2, 2});
  std::vector<double> targets = {1, 0, 0, 1};
  CHECK(seg_loss(logits, targets).item() == Catch::Approx(std::log(2.0)).margin(1e-12));
  CHECK_THROWS(seg_loss(logits, {1, 0}));
}

TEST_CASE("scene ground-truth views drop lanes without trainable points") {
  SceneSpec spec;
  spec.img_h = 64;
  spec.img_w = 80;
  spec.fixed_ys = {5.0, 20.0, 40.0, 70.0};
  Scene scene = generate_scene(spec, 0);
  auto views = scene_gt_views(scene);
  for (const auto& v : views) CHECK(v.visible_count > 0);

  // Forcing a lane fully invisible removes exactly that lane.
  Scene broken = scene;
  std::size_t before = scene_gt_views(broken).size();
  REQUIRE(before > 0);
  std::fill(broken.lanes[0].visibility.begin(), broken.lanes[0].visibility.end(), 0);
  CHECK(scene_gt_views(broken).size() == before - 1);
}

TEST_CASE("batch loss decomposes and one optimizer step reduces it") {
  SceneSpec spec;
  spec.img_h = 64;
  spec.img_w = 80;
  spec.fixed_ys = {5.0, 20.0, 40.0, 70.0};
  Scene scene = generate_scene(spec, 3);

  ModelConfig mc;
  mc.embed_dim = 16;
  mc.heads = 2;
  mc.sample_points = 2;
  mc.levels = 2;
  mc.encoder_layers = 1;
  mc.decoder_layers = 2;
  mc.num_queries = 6;
  mc.img_h = 64;
  mc.img_w = 80;
  mc.backbone_channels = {8, 12, 16};
  mc.fixed_ys = spec.fixed_ys;
  CurveFormer model(mc);

  std::vector<double> pixels(scene.image.begin(), scene.image.end());
  Var img = Var::leaf({1, 1, 64, 80}, pixels);
  ForwardOutput out = model.forward(img, {scene.camera});
  BatchLoss bl = batch_loss(out, {&scene}, LossCoefficients{}, true);

  CHECK(std::isfinite(bl.curve));
  CHECK(std::isfinite(bl.query));
  CHECK(std::isfinite(bl.seg));
  CHECK(bl.total.item() == Catch::Approx(bl.curve + bl.query + bl.seg).margin(1e-9));
  CHECK(bl.matched > 0);

  model.params().zero_grad();
  bl.total.backward();
  bool any_grad = false;
  for (const auto& [name, p] : model.params().all()) {
    for (double g : p.node()->grad) {
      CHECK(std::isfinite(g));
      if (g != 0.0) any_grad = true;
    }
  }
  CHECK(any_grad);

  Adam opt(1e-3, 0.0);
  opt.step(model.params());
  ForwardOutput out2 = model.forward(img, {scene.camera});
  BatchLoss bl2 = batch_loss(out2, {&scene}, LossCoefficients{}, true);
  CHECK(std::isfinite(bl2.total.item()));
}

TEST_CASE("a caller-supplied match bypasses the solver") {
  SceneSpec spec;
  spec.img_h = 64;
  spec.img_w = 80;
  spec.fixed_ys = {5.0, 20.0, 40.0, 70.0};
  Scene scene = generate_scene(spec, 5);
  auto gts = scene_gt_views(scene);
  REQUIRE(!gts.empty());

  ModelConfig mc;
  mc.embed_dim = 16;
  mc.heads = 2;
  mc.sample_points = 2;
  mc.levels = 2;
  mc.encoder_layers = 1;
  mc.decoder_layers = 2;
  mc.num_queries = 6;
  mc.img_h = 64;
  mc.img_w = 80;
  mc.backbone_channels = {8, 12, 16};
  mc.fixed_ys = spec.fixed_ys;
  CurveFormer model(mc);

  std::vector<double> pixels(scene.image.begin(), scene.image.end());
  Var img = Var::leaf({1, 1, 64, 80}, pixels);
  ForwardOutput out = model.forward(img, {scene.camera});

  SceneLoss solved = scene_loss(out.items[0], gts, LossCoefficients{});
  SceneLoss fixed = scene_loss(out.items[0], gts, LossCoefficients{}, &solved.match);
  CHECK(fixed.curve.item() == solved.curve.item());
  CHECK(fixed.query.item() == solved.query.item());
  CHECK(fixed.match.pred_for_gt == solved.match.pred_for_gt);
}
