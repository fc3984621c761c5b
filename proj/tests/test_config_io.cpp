// Config text round-trips, override handling, output-dir resolution,
// checkpoint save/load fidelity, the deterministic batch schedule, and
// bit-identical resume from a mid-run checkpoint.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "curvelab/checkpoint.hpp"
#include "curvelab/config.hpp"
#include "curvelab/harness.hpp"

using namespace curvelab;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("curvelab_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

ModelConfig small_model() {
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
  mc.fixed_ys = {5.0, 20.0, 40.0, 70.0};
  return mc;
}

RunConfig small_run_config() {
  RunConfig c;
  c.scene.img_h = 64;
  c.scene.img_w = 80;
  c.scene.fixed_ys = {5.0, 20.0, 40.0, 70.0};
  c.scene_count = 4;
  c.eval_scene_count = 2;
  c.model = small_model();
  c.train.steps = 6;
  c.train.batch_size = 2;
  c.train.lr = 1e-3;
  c.train.checkpoint_interval = 3;
  c.train.log_interval = 1;
  c.eval.ys = c.scene.fixed_ys;
  return c;
}

}  // namespace

TEST_CASE("config text round-trips every field") {
  RunConfig c;
  c.scene.lane_count_min = 3;
  c.scene.lane_count_max = 4;
  c.scene.lane_spacing = 3.21;
  c.scene.y_end_min = 84.5;
  c.scene.cam_pitch_deg = 11.25;
  c.scene.img_h = 64;
  c.scene.img_w = 80;
  c.scene.noise_std = 0.0625;
  c.scene.seed = 99;
  c.scene.fixed_ys = {5.0, 17.5, 40.0, 66.0};
  c.scene_count = 13;
  c.eval_scene_count = 5;
  c.model = small_model();
  c.model.sampling = SamplingMode::kLearnedOffsets;
  c.model.head = HeadMode::kPointSet;
  c.model.seg_branch = false;
  c.model.delta_clamp = 4.25;
  c.model.init_seed = 1234;
  c.loss.alpha1 = 1.5;
  c.loss.alpha4 = 2.75;
  c.train.steps = 17;
  c.train.batch_size = 3;
  c.train.lr = 3.5e-4;
  c.train.weight_decay = 2e-5;
  c.train.checkpoint_interval = 9;
  c.train.log_interval = 2;
  c.train.seed = 31;
  c.eval.max_distance = 1.25;
  c.eval.coverage_fraction = 0.8;
  c.eval.confidence_threshold = 0.6;
  c.output_dir = "runs/exp one";

  std::string text = run_config_to_text(c);
  RunConfig r = run_config_from_map(parse_config_text(text));

  CHECK(r.scene.lane_count_min == 3);
  CHECK(r.scene.lane_count_max == 4);
  CHECK(r.scene.lane_spacing == c.scene.lane_spacing);
  CHECK(r.scene.y_end_min == c.scene.y_end_min);
  CHECK(r.scene.cam_pitch_deg == c.scene.cam_pitch_deg);
  CHECK(r.scene.img_h == 64);
  CHECK(r.scene.img_w == 80);
  CHECK(r.scene.noise_std == c.scene.noise_std);
  CHECK(r.scene.seed == 99);
  CHECK(r.scene.fixed_ys == c.scene.fixed_ys);
  CHECK(r.scene_count == 13);
  CHECK(r.eval_scene_count == 5);
  CHECK(r.model.embed_dim == 16);
  CHECK(r.model.heads == 2);
  CHECK(r.model.levels == 2);
  CHECK(r.model.decoder_layers == 2);
  CHECK(r.model.num_queries == 6);
  CHECK(r.model.backbone_channels == c.model.backbone_channels);
  CHECK(r.model.delta_clamp == 4.25);
  CHECK(r.model.sampling == SamplingMode::kLearnedOffsets);
  CHECK(r.model.head == HeadMode::kPointSet);
  CHECK(r.model.seg_branch == false);
  CHECK(r.model.init_seed == 1234);
  // Scene geometry propagates into the model and the evaluator.
  CHECK(r.model.img_h == 64);
  CHECK(r.model.img_w == 80);
  CHECK(r.model.fixed_ys == c.scene.fixed_ys);
  CHECK(r.eval.ys == c.scene.fixed_ys);
  CHECK(r.loss.alpha1 == 1.5);
  CHECK(r.loss.alpha4 == 2.75);
  CHECK(r.train.steps == 17);
  CHECK(r.train.batch_size == 3);
  CHECK(r.train.lr == c.train.lr);
  CHECK(r.train.weight_decay == c.train.weight_decay);
  CHECK(r.train.checkpoint_interval == 9);
  CHECK(r.train.log_interval == 2);
  CHECK(r.train.seed == 31);
  CHECK(r.eval.max_distance == 1.25);
  CHECK(r.eval.coverage_fraction == 0.8);
  CHECK(r.eval.confidence_threshold == 0.6);
  CHECK(r.output_dir == "runs/exp one");
}

TEST_CASE("config parsing handles comments, quotes and errors") {
  ConfigMap m = parse_config_text(
      "# leading comment\n"
      "[scene]\n"
      "img_h = 64  # trailing comment\n"
      "fixed_ys = [5, 10.5, 20]\n"
      "\n"
      "[output]\n"
      "dir = \"path/with # hash\"\n");
  CHECK(m.get_int("scene.img_h", 0) == 64);
  CHECK(m.get_double_list("scene.fixed_ys", {}) == std::vector<double>{5.0, 10.5, 20.0});
  CHECK(m.get_string("output.dir", "") == "path/with # hash");

  CHECK_THROWS(parse_config_text("[scene]\nimg_h 64\n"));      // missing '='
  CHECK_THROWS(parse_config_text("[]\nk = 1\n"));              // empty section
  ConfigMap bad = parse_config_text("[scene]\nimg_h = 64x\n");
  CHECK_THROWS(bad.get_int("scene.img_h", 0));
  ConfigMap bad2 = parse_config_text("[model]\nseg = maybe\n");
  CHECK_THROWS(bad2.get_bool("model.seg", true));
  ConfigMap bad3 = parse_config_text("[scene]\nfixed_ys = 5, 10\n");
  CHECK_THROWS(bad3.get_double_list("scene.fixed_ys", {}));
}

TEST_CASE("overrides replace parsed values") {
  ConfigMap m = parse_config_text("[train]\nsteps = 100\nlr = 1e-3\n");
  apply_overrides(&m, {"train.steps=250", "eval.max_distance=2.0", "output.dir=\"o\""});
  CHECK(m.get_int("train.steps", 0) == 250);
  CHECK(m.get_double("train.lr", 0.0) == 1e-3);
  CHECK(m.get_double("eval.max_distance", 0.0) == 2.0);
  CHECK(m.get_string("output.dir", "") == "o");
  CHECK_THROWS(apply_overrides(&m, {"no_equals_here"}));
}

TEST_CASE("relative output dirs are rooted at CURVELAB_OUT") {
  unsetenv("CURVELAB_OUT");
  CHECK(resolve_output_dir("out/run1") == "out/run1");
  CHECK(resolve_output_dir("/abs/run1") == "/abs/run1");
  setenv("CURVELAB_OUT", "/data/results/", 1);
  CHECK(resolve_output_dir("out/run1") == "/data/results/out/run1");
  CHECK(resolve_output_dir("/abs/run1") == "/abs/run1");
  unsetenv("CURVELAB_OUT");
}

TEST_CASE("checkpoints restore parameters, moments and the step count") {
  fs::path dir = fresh_dir("ckpt");
  ModelConfig mc = small_model();
  CurveFormer a(mc);
  Adam opt_a(1e-3, 1e-4);

  // One real update so Adam moments are non-trivial.
  SceneSpec spec;
  spec.img_h = 64;
  spec.img_w = 80;
  spec.fixed_ys = mc.fixed_ys;
  Scene scene = generate_scene(spec, 1);
  std::vector<const Scene*> batch = {&scene};
  BatchLoss bl = batch_loss(a.forward(images_to_var(batch), batch_cameras(batch)), batch,
                            LossCoefficients{}, true);
  a.params().zero_grad();
  bl.total.backward();
  opt_a.step(a.params());

  std::string path = (dir / "m.ckpt").string();
  save_checkpoint(path, mc, a.params(), opt_a, 41);

  CheckpointData data = read_checkpoint(path);
  CHECK(data.step == 41);
  CHECK(data.config.embed_dim == mc.embed_dim);
  CHECK(data.config.fixed_ys == mc.fixed_ys);
  CHECK(to_string(data.config.sampling) == to_string(mc.sampling));

  CurveFormer b(mc);
  Adam opt_b(1e-3, 1e-4);
  apply_checkpoint(data, b.params(), opt_b);

  // Saving quantized the live arrays, so the restored copy is bit-identical.
  for (const auto& [name, pa] : a.params().all()) {
    CHECK(b.params().get(name).val() == pa.val());
  }
  CHECK(opt_b.step_count() == opt_a.step_count());
  for (const auto& [name, m] : opt_a.m_state()) {
    REQUIRE(opt_b.m_state().count(name) == 1);
    CHECK(opt_b.m_state().at(name) == m);
  }
  for (const auto& [name, v] : opt_a.v_state()) {
    CHECK(opt_b.v_state().at(name) == v);
  }

  // Identical parameters produce identical forwards.
  ForwardOutput oa = a.forward(images_to_var(batch), batch_cameras(batch));
  ForwardOutput ob = b.forward(images_to_var(batch), batch_cameras(batch));
  CHECK(oa.items[0].layers.back().anchors.val() == ob.items[0].layers.back().anchors.val());
  CHECK(oa.items[0].layers.back().conf_logit.val() ==
        ob.items[0].layers.back().conf_logit.val());

  SECTION("corrupted files are rejected") {
    std::string bytes = read_file(path);
    fs::path bad_magic = dir / "bad_magic.ckpt";
    std::string tampered = bytes;
    tampered[0] = 'X';
    std::ofstream(bad_magic, std::ios::binary) << tampered;
    CHECK_THROWS(read_checkpoint(bad_magic.string()));

    fs::path truncated = dir / "truncated.ckpt";
    std::ofstream(truncated, std::ios::binary) << bytes.substr(0, bytes.size() / 2);
    CHECK_THROWS(read_checkpoint(truncated.string()));

    CHECK_THROWS(read_checkpoint((dir / "missing.ckpt").string()));
  }
}

TEST_CASE("the batch schedule is stateless and covers each epoch exactly once") {
  BatchSchedule s1(10, 4, 7);
  BatchSchedule s2(10, 4, 7);

  // Querying steps out of order gives the same batches as querying in order.
  for (int step : {5, 1, 3, 2, 5}) CHECK(s1.batch_indices(step) == s2.batch_indices(step));

  // The first epoch's 10 consumed samples form a permutation of the dataset.
  std::vector<int> seen;
  for (int step = 1; step <= 3; ++step) {
    auto idx = s1.batch_indices(step);
    for (int b = 0; b < 4; ++b) {
      std::int64_t c = static_cast<std::int64_t>(step - 1) * 4 + b;
      if (c < 10) seen.push_back(idx[b]);
    }
  }
  std::sort(seen.begin(), seen.end());
  std::vector<int> want(10);
  std::iota(want.begin(), want.end(), 0);
  CHECK(seen == want);

  // Different epochs use different permutations (with overwhelming odds).
  std::vector<int> e0, e1;
  for (int c = 0; c < 10; ++c) {
    e0.push_back(s1.batch_indices(1 + c / 4)[c % 4]);
    int c1 = c + 10;
    e1.push_back(s1.batch_indices(1 + c1 / 4)[c1 % 4]);
  }
  CHECK(e0 != e1);
}

TEST_CASE("training resumes bit-identically from a mid-run checkpoint") {
  RunConfig cfg = small_run_config();
  std::vector<Scene> scenes;
  for (int i = 0; i < cfg.scene_count; ++i) scenes.push_back(generate_scene(cfg.scene, i));

  fs::path dir_a = fresh_dir("resume_a");
  fs::path dir_b = fresh_dir("resume_b");

  // A: 6 steps in one go (with a checkpoint written at step 3).
  TrainResult full = train_model(cfg, scenes, dir_a.string());
  CHECK(full.steps_run == 6);

  // B: 3 steps, then resume from the step-3 checkpoint and finish.
  RunConfig half = cfg;
  half.train.steps = 3;
  train_model(half, scenes, dir_b.string());
  TrainResult resumed =
      train_model(cfg, scenes, dir_b.string(), (dir_b / "checkpoint_3.ckpt").string());
  CHECK(resumed.steps_run == 6);

  CHECK(read_file(dir_a / "checkpoint_final.ckpt") == read_file(dir_b / "checkpoint_final.ckpt"));
  CHECK(read_file(dir_a / "train_log.jsonl") == read_file(dir_b / "train_log.jsonl"));
}
