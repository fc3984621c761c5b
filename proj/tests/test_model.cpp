// Network structure and invariant checks: feature shapes, determinism,
// attention normalization, zero-offset sampling-location consistency, fixed-y
// refinement, query permutation equivariance, and positional encoding layout.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "curvelab/model.hpp"
#include "curvelab/rng.hpp"

using namespace curvelab;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.embed_dim = 16;
  c.heads = 2;
  c.sample_points = 2;
  c.levels = 2;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.num_queries = 6;
  c.img_h = 64;
  c.img_w = 80;
  c.backbone_channels = {8, 12, 16};
  c.fixed_ys = {5.0, 20.0, 40.0, 70.0};
  return c;
}

Var random_image(const ModelConfig& c, std::uint64_t seed, int batch = 1) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(batch) * c.channels * c.img_h * c.img_w);
  for (auto& x : v) x = rng.uniform(0.0, 1.0);
  return Var::leaf({batch, c.channels, c.img_h, c.img_w}, std::move(v));
}

CameraModel test_camera(int img_h, int img_w) {
  return make_camera(100.0, 100.0, img_w / 2.0, img_h / 2.0, 10.0 * kPi / 180.0, 1.6, img_h,
                     img_w);
}

}  // namespace

TEST_CASE("feature pyramid shapes follow the stride ladder") {
  ModelConfig c;
  c.embed_dim = 16;
  c.backbone_channels = {8, 10, 12, 14};
  c.validate();
  CurveFormer model(c);
  Var img = random_image(c, 5);
  auto maps = model.extract_features(img);
  REQUIRE(maps.size() == 3);
  CHECK(maps[0].shape() == Shape({1, 16, 32, 40}));
  CHECK(maps[1].shape() == Shape({1, 16, 16, 20}));
  CHECK(maps[2].shape() == Shape({1, 16, 8, 10}));
}

TEST_CASE("zero image produces finite outputs everywhere") {
  ModelConfig c = tiny_config();
  CurveFormer model(c);
  Var img = Var::zeros({1, c.channels, c.img_h, c.img_w});
  ForwardOutput out = model.forward(img, {test_camera(c.img_h, c.img_w)});
  REQUIRE(out.items.size() == 1);
  REQUIRE(static_cast<int>(out.items[0].layers.size()) == c.decoder_layers);
  for (const auto& layer : out.items[0].layers) {
    for (double v : layer.anchors.val()) CHECK(std::isfinite(v));
    for (double v : layer.conf_logit.val()) CHECK(std::isfinite(v));
    for (double v : layer.pts_x.val()) CHECK(std::isfinite(v));
  }
  for (double v : out.seg_logits.val()) CHECK(std::isfinite(v));
}

TEST_CASE("forward is deterministic and confidences are probabilities") {
  ModelConfig c = tiny_config();
  CurveFormer model(c);
  Var img = random_image(c, 6);
  CameraModel cam = test_camera(c.img_h, c.img_w);
  ForwardOutput a = model.forward(img, {cam});
  ForwardOutput b = model.forward(img, {cam});
  for (std::size_t l = 0; l < a.items[0].layers.size(); ++l) {
    const auto& la = a.items[0].layers[l];
    const auto& lb = b.items[0].layers[l];
    CHECK(la.anchors.val() == lb.anchors.val());
    CHECK(la.conf_logit.val() == lb.conf_logit.val());
    CHECK(la.pts_x.val() == lb.pts_x.val());
  }
  for (int q = 0; q < c.num_queries; ++q) {
    double p = 1.0 / (1.0 + std::exp(-a.items[0].layers.back().conf_logit.val()[q]));
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
}

TEST_CASE("decoder cross-attention weights sum to one per head") {
  ModelConfig c = tiny_config();
  CurveFormer model(c);
  Var img = random_image(c, 7);
  ForwardTrace trace;
  model.forward(img, {test_camera(c.img_h, c.img_w)}, &trace);
  int M = c.heads, L = c.levels, N = c.anchor_points();
  REQUIRE(trace.cross_weights.size() == 1);
  REQUIRE(static_cast<int>(trace.cross_weights[0].size()) == c.decoder_layers);
  for (const auto& layer_w : trace.cross_weights[0]) {
    REQUIRE(layer_w.size() == static_cast<std::size_t>(c.num_queries) * M * L * N);
    for (int q = 0; q < c.num_queries; ++q)
      for (int m = 0; m < M; ++m) {
        double s = 0.0;
        for (int i = 0; i < L * N; ++i) s += layer_w[(q * M + m) * L * N + i];
        CHECK(s == Catch::Approx(1.0).margin(1e-9));
      }
  }
}

TEST_CASE("initialized sampling locations sit exactly on projected anchors") {
  // Offset layers start at zero, so for every mode the first decoder layer
  // samples at normalize(project(anchor)) for each head, level and point.
  for (SamplingMode mode :
       {SamplingMode::kNone, SamplingMode::kLearnedOffsets, SamplingMode::kContextOffsets}) {
    ModelConfig c = tiny_config();
    c.sampling = mode;
    CurveFormer model(c);
    Var img = random_image(c, 8);
    CameraModel cam = test_camera(c.img_h, c.img_w);
    ForwardTrace trace;
    model.forward(img, {cam}, &trace);

    int M = c.heads, L = c.levels, N = c.anchor_points();
    std::vector<double> init = model.initial_anchors_flat();
    const auto& locs = trace.cross_locs[0][0];  // first decoder layer
    REQUIRE(locs.size() == static_cast<std::size_t>(c.num_queries) * M * L * N * 2);
    for (int q = 0; q < c.num_queries; ++q) {
      for (int n = 0; n < N; ++n) {
        Vec3 p{init[q * 2 * N + n], c.fixed_ys[n], init[q * 2 * N + N + n]};
        Vec2 uv;
        std::uint8_t flag = 0;
        project_point(cam, p, &uv, &flag);
        auto nc = normalize_coords({uv}, c.img_w, c.img_h);
        for (int m = 0; m < M; ++m)
          for (int l = 0; l < L; ++l) {
            std::size_t base =
                (((static_cast<std::size_t>(q) * M + m) * L + l) * N + n) * 2;
            CHECK(std::fabs(locs[base] - nc[0].u) < 1e-9);
            CHECK(std::fabs(locs[base + 1] - nc[0].v) < 1e-9);
          }
      }
    }
  }
}

TEST_CASE("refined anchors move in x and z but stay inside the range") {
  ModelConfig c = tiny_config();
  CurveFormer model(c);
  // Refinement layers start at zero; nudge them so the layers actually move.
  Rng rng(17);
  for (const auto& [name, p] : model.params().all()) {
    if (name.find(".refine.") == std::string::npos) continue;
    Var h = p;
    for (auto& x : h.mutable_val()) x = rng.uniform(-0.05, 0.05);
  }
  Var img = random_image(c, 9);
  ForwardOutput out = model.forward(img, {test_camera(c.img_h, c.img_w)});
  int N = c.anchor_points();
  bool moved = false;
  const auto& first = out.items[0].layers.front().anchors.val();
  const auto& last = out.items[0].layers.back().anchors.val();
  for (std::size_t i = 0; i < first.size(); ++i)
    if (first[i] != last[i]) moved = true;
  CHECK(moved);
  for (const auto& layer : out.items[0].layers) {
    for (int q = 0; q < c.num_queries; ++q)
      for (int n = 0; n < N; ++n) {
        double x = layer.anchors.val()[q * 2 * N + n];
        double z = layer.anchors.val()[q * 2 * N + N + n];
        CHECK(x >= c.range.x_min);
        CHECK(x <= c.range.x_max);
        CHECK(z >= c.range.z_min);
        CHECK(z <= c.range.z_max);
      }
    for (int q = 0; q < c.num_queries; ++q) {
      double ys = layer.y_start.val()[q], ye = layer.y_end.val()[q];
      CHECK(ys >= c.range.y_min);
      CHECK(ye <= c.range.y_max);
      CHECK(ys <= ye);
    }
  }
}

TEST_CASE("permuting the query set permutes every output") {
  ModelConfig c = tiny_config();
  CurveFormer a(c), b(c);
  int Lq = c.num_queries, N = c.anchor_points(), D = c.embed_dim;
  std::vector<int> perm = {3, 0, 5, 1, 4, 2};

  // b gets a's query embedding rows rearranged plus matching initial anchors;
  // all other parameters are already identical (same init seed).
  Var qe_b = b.params().get("query_embed");
  const auto& qe_a = a.params().get("query_embed").val();
  for (int q = 0; q < Lq; ++q)
    for (int d = 0; d < D; ++d) qe_b.mutable_val()[q * D + d] = qe_a[perm[q] * D + d];
  std::vector<double> ia = a.initial_anchors_flat(), ib(ia.size());
  for (int q = 0; q < Lq; ++q)
    for (int j = 0; j < 2 * N; ++j) ib[q * 2 * N + j] = ia[perm[q] * 2 * N + j];
  b.set_initial_anchors(ib);

  Var img = random_image(c, 10);
  CameraModel cam = test_camera(c.img_h, c.img_w);
  ForwardOutput oa = a.forward(img, {cam});
  ForwardOutput ob = b.forward(img, {cam});
  for (std::size_t l = 0; l < oa.items[0].layers.size(); ++l) {
    const auto& la = oa.items[0].layers[l];
    const auto& lb = ob.items[0].layers[l];
    for (int q = 0; q < Lq; ++q) {
      CHECK(lb.conf_logit.val()[q] ==
            Catch::Approx(la.conf_logit.val()[perm[q]]).margin(1e-9));
      CHECK(lb.y_start.val()[q] == Catch::Approx(la.y_start.val()[perm[q]]).margin(1e-9));
      for (int j = 0; j < 2 * N; ++j)
        CHECK(lb.anchors.val()[q * 2 * N + j] ==
              Catch::Approx(la.anchors.val()[perm[q] * 2 * N + j]).margin(1e-9));
    }
  }
}

TEST_CASE("positional encoding splits the embedding across axes") {
  int D = 16;
  PeSplit sp = pe_split(D);
  CHECK(sp.dx + sp.dy + sp.dz == D);
  CHECK(sp.dx == sp.dz);
  CHECK(sp.dy >= sp.dx);

  // Anchors pinned at the range minimum normalize to zero: sin entries 0,
  // cos entries 1 in the x and z blocks.
  Range3D range;
  std::vector<double> ys = {5, 10, 15, 20};
  int N = 4;
  std::vector<double> a(2 * N);
  for (int n = 0; n < N; ++n) {
    a[n] = range.x_min;
    a[N + n] = range.z_min;
  }
  Var pe = anchor_positional_encoding(Var::leaf({1, 2 * N}, a), ys, range, D);
  REQUIRE(pe.shape() == Shape({1, N * D}));
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < sp.dx / 2; ++i) {
      CHECK(pe.val()[n * sp.dx + 2 * i] == 0.0);
      CHECK(pe.val()[n * sp.dx + 2 * i + 1] == 1.0);
    }
  std::size_t z0 = static_cast<std::size_t>(N) * (sp.dx + sp.dy);
  for (int n = 0; n < N; ++n)
    for (int i = 0; i < sp.dz / 2; ++i) {
      CHECK(pe.val()[z0 + n * sp.dz + 2 * i] == 0.0);
      CHECK(pe.val()[z0 + n * sp.dz + 2 * i + 1] == 1.0);
    }

  // Distinct anchors give distinct encodings.
  std::vector<double> a2 = a;
  a2[1] += 3.7;
  Var pe2 = anchor_positional_encoding(Var::leaf({1, 2 * N}, a2), ys, range, D);
  CHECK(pe.val() != pe2.val());
}

TEST_CASE("context features obey the masked-average contract") {
  ModelConfig c = tiny_config();
  CurveFormer model(c);
  Var img = random_image(c, 11);
  auto maps = model.extract_features(img);
  CameraModel cam = test_camera(c.img_h, c.img_w);
  int N = c.anchor_points();

  SECTION("anchors projecting outside the image give a near-zero feature") {
    std::vector<double> a(static_cast<std::size_t>(c.num_queries) * 2 * N, 0.0);
    for (int q = 0; q < c.num_queries; ++q)
      for (int n = 0; n < N; ++n) a[q * 2 * N + n] = 10000.0;  // far off-screen
    Var anchors = Var::leaf({c.num_queries, 2 * N}, a);
    std::vector<double> flags;
    Var f = model.context_sample_feature(anchors, maps, cam, 0, &flags);
    for (double fl : flags) CHECK(fl == 0.0);
    for (double v : f.val()) CHECK(std::fabs(v) < 1e-9);
  }
  SECTION("constant feature maps return the constant") {
    std::vector<Var> const_maps;
    for (const Var& m : maps) {
      std::vector<double> v(m.size(), 0.625);
      const_maps.push_back(Var::leaf(m.shape(), std::move(v)));
    }
    Var anchors = Var::leaf({c.num_queries, 2 * N}, model.initial_anchors_flat());
    std::vector<double> flags;
    Var f = model.context_sample_feature(anchors, const_maps, cam, 0, &flags);
    double visible = 0.0;
    for (double fl : flags) visible += fl;
    REQUIRE(visible > 0.0);  // central lanes project into view
    for (int q = 0; q < c.num_queries; ++q) {
      double qv = 0.0;
      for (int n = 0; n < N; ++n) qv += flags[q * N + n];
      if (qv == 0.0) continue;
      for (int d = 0; d < c.embed_dim; ++d) {
        // The denominator epsilon shifts the constant by well under 1e-5.
        CHECK(f.val()[q * c.embed_dim + d] == Catch::Approx(0.625).margin(1e-5));
      }
    }
  }
}

TEST_CASE("context sampling offsets start at zero and react to the image term") {
  ModelConfig c = tiny_config();
  c.sampling = SamplingMode::kContextOffsets;
  CurveFormer model(c);
  int N = c.anchor_points(), K = c.sample_points, D = c.embed_dim;
  Rng rng(12);
  std::vector<double> fv(static_cast<std::size_t>(c.num_queries) * D),
      zv(static_cast<std::size_t>(c.num_queries) * D);
  for (auto& x : fv) x = rng.uniform(-1.0, 1.0);
  for (auto& x : zv) x = rng.uniform(-1.0, 1.0);
  Var f = Var::leaf({c.num_queries, D}, fv);
  Var z = Var::leaf({c.num_queries, D}, zv);

  Var off = model.context_sampling_offsets(f, z);
  REQUIRE(off.shape() == Shape({c.num_queries, N * K * 2}));
  for (double v : off.val()) CHECK(v == 0.0);  // zero-initialized layer

  // After perturbing the layer weights, offsets must respond to the image
  // term with the content held fixed.
  Var w = model.params().get("cs_offsets.weight");
  for (auto& x : w.mutable_val()) x = rng.uniform(-0.1, 0.1);
  Var o1 = model.context_sampling_offsets(f, z);
  std::vector<double> fv2 = fv;
  for (auto& x : fv2) x += 0.3;
  Var o2 = model.context_sampling_offsets(Var::leaf({c.num_queries, D}, fv2), z);
  CHECK(o1.val() != o2.val());
}

TEST_CASE("head readout arity, ranges and extent ordering") {
  ModelConfig c = tiny_config();

  SECTION("curve head from a raw content vector") {
    CurveFormer model(c);
    Rng rng(13);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> content(c.embed_dim);
      for (auto& x : content) x = rng.uniform(-2.0, 2.0);
      CurveParams p = model.predict_head(content);
      CHECK(p.confidence >= 0.0);
      CHECK(p.confidence <= 1.0);
      CHECK(p.y_start >= c.range.y_min);
      CHECK(p.y_end <= c.range.y_max);
      CHECK(p.y_start <= p.y_end);
      CHECK(p.a.size() == static_cast<std::size_t>(c.poly_order + 1));
      CHECK(p.b.size() == static_cast<std::size_t>(c.poly_order + 1));
    }
  }
  SECTION("point head reads points straight off the anchors") {
    c.head = HeadMode::kPointSet;
    CurveFormer model(c);
    Var img = random_image(c, 14);
    ForwardOutput out = model.forward(img, {test_camera(c.img_h, c.img_w)});
    const auto& p = out.items[0].layers.back();
    int N = c.anchor_points();
    for (int q = 0; q < c.num_queries; ++q)
      for (int n = 0; n < N; ++n) {
        CHECK(p.pts_x.val()[q * N + n] == p.anchors.val()[q * 2 * N + n]);
        CHECK(p.pts_z.val()[q * N + n] == p.anchors.val()[q * 2 * N + N + n]);
      }
    // Refinement layers start at zero, so the anchors still sit on the
    // straight initial lanes; the exported polynomial must reproduce them.
    std::vector<double> init = model.initial_anchors_flat();
    for (int q = 0; q < c.num_queries; ++q) {
      CurveParams cp = model.layer_curve_params(p, q);
      REQUIRE(cp.a.size() == static_cast<std::size_t>(c.poly_order + 1));
      for (double y : c.fixed_ys) {
        CHECK(polyval(cp.a, y) == Catch::Approx(init[q * 2 * N]).margin(1e-6));
        CHECK(polyval(cp.b, y) == Catch::Approx(0.0).margin(1e-6));
      }
    }
  }
}

TEST_CASE("batched forward matches per-item forward") {
  ModelConfig c = tiny_config();
  CurveFormer model(c);
  Var img2 = random_image(c, 15, 2);
  CameraModel cam = test_camera(c.img_h, c.img_w);
  ForwardOutput both = model.forward(img2, {cam, cam});

  std::size_t plane = static_cast<std::size_t>(c.channels) * c.img_h * c.img_w;
  for (int b = 0; b < 2; ++b) {
    std::vector<double> v(img2.val().begin() + b * plane,
                          img2.val().begin() + (b + 1) * plane);
    Var one = Var::leaf({1, c.channels, c.img_h, c.img_w}, std::move(v));
    ForwardOutput single = model.forward(one, {cam});
    const auto& la = both.items[b].layers.back();
    const auto& lb = single.items[0].layers.back();
    for (std::size_t i = 0; i < la.anchors.val().size(); ++i)
      CHECK(la.anchors.val()[i] == Catch::Approx(lb.anchors.val()[i]).margin(1e-9));
    for (int q = 0; q < c.num_queries; ++q)
      CHECK(la.conf_logit.val()[q] == Catch::Approx(lb.conf_logit.val()[q]).margin(1e-9));
  }
}
