#pragma once

// Run orchestration: dataset generation, the training loop (deterministic
// batch schedule, JSONL loss log, periodic checkpoints, resume), evaluation
// against the lane metrics, visualization output, and the ablation driver.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "curvelab/checkpoint.hpp"
#include "curvelab/config.hpp"
#include "curvelab/metrics.hpp"
#include "curvelab/model.hpp"
#include "curvelab/scene_io.hpp"
#include "curvelab/scenegen.hpp"
#include "curvelab/training.hpp"
#include "curvelab/viz.hpp"

namespace curvelab {

inline Var images_to_var(const std::vector<const Scene*>& scenes) {
  CVL_CHECK(!scenes.empty(), "images_to_var: empty batch");
  int C = scenes[0]->channels, H = scenes[0]->img_h, W = scenes[0]->img_w;
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(scenes.size()) * C * H * W);
  for (const Scene* s : scenes) {
    CVL_CHECK(s->channels == C && s->img_h == H && s->img_w == W,
              "images_to_var: mixed image dims in batch");
    for (float v : s->image) data.push_back(static_cast<double>(v));
  }
  return Var::leaf({static_cast<int>(scenes.size()), C, H, W}, std::move(data), false);
}

inline std::vector<CameraModel> batch_cameras(const std::vector<const Scene*>& scenes) {
  std::vector<CameraModel> cams;
  for (const Scene* s : scenes) cams.push_back(s->camera);
  return cams;
}

// Ground truth in evaluation form: anchors at the fixed y-positions, points
// visible when inside the lateral extent and actually projected into view.
inline std::vector<EvalLane> gt_eval_lanes(const Scene& scene) {
  std::vector<EvalLane> out;
  for (const auto& lane : scene.lanes) {
    EvalLane e;
    e.confidence = 1.0;
    e.y_start = lane.curve.y_start;
    e.y_end = lane.curve.y_end;
    for (int n = 0; n < lane.anchors.size(); ++n) {
      e.xs.push_back(lane.anchors.points[n].x);
      e.zs.push_back(lane.anchors.points[n].z);
      e.visibility.push_back(lane.anchors.in_extent[n] && lane.visibility[n] ? 1 : 0);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// Every query of the given decoder layer as a candidate lane; the evaluator
// applies its own confidence threshold.
inline std::vector<EvalLane> pred_eval_lanes(const LayerPrediction& layer) {
  int Lq = layer.conf_logit.shape()[0];
  int N = layer.pts_x.shape()[1];
  std::vector<EvalLane> out(Lq);
  for (int q = 0; q < Lq; ++q) {
    EvalLane& e = out[q];
    e.confidence = 1.0 / (1.0 + std::exp(-layer.conf_logit.val()[q]));
    e.y_start = layer.y_start.val()[q];
    e.y_end = layer.y_end.val()[q];
    e.xs.assign(layer.pts_x.val().begin() + q * N, layer.pts_x.val().begin() + (q + 1) * N);
    e.zs.assign(layer.pts_z.val().begin() + q * N, layer.pts_z.val().begin() + (q + 1) * N);
  }
  return out;
}

// Deterministic schedule: the b-th item of step s is sample (s * B + b),
// indexed through a per-epoch permutation keyed only by the epoch number, so
// a resumed run sees the identical sequence.
class BatchSchedule {
 public:
  BatchSchedule(int dataset_size, int batch_size, std::uint64_t seed)
      : n_(dataset_size), batch_(batch_size), seed_(seed) {
    CVL_CHECK(n_ > 0 && batch_ > 0, "schedule: dataset and batch must be non-empty");
  }

  std::vector<int> batch_indices(int step) const {
    std::vector<int> out;
    for (int b = 0; b < batch_; ++b) {
      std::int64_t c = static_cast<std::int64_t>(step - 1) * batch_ + b;
      std::uint64_t epoch = static_cast<std::uint64_t>(c / n_);
      int pos = static_cast<int>(c % n_);
      out.push_back(permutation(epoch)[pos]);
    }
    return out;
  }

 private:
  const std::vector<int>& permutation(std::uint64_t epoch) const {
    if (!cached_ || cached_epoch_ != epoch) {
      perm_.resize(n_);
      std::iota(perm_.begin(), perm_.end(), 0);
      Rng rng(seed_, 0x7363686564ull, epoch);  // schedule stream
      for (int i = n_ - 1; i > 0; --i) {
        int j = rng.uniform_int(0, i);
        std::swap(perm_[i], perm_[j]);
      }
      cached_ = true;
      cached_epoch_ = epoch;
    }
    return perm_;
  }

  int n_, batch_;
  std::uint64_t seed_;
  mutable std::vector<int> perm_;
  mutable bool cached_ = false;
  mutable std::uint64_t cached_epoch_ = 0;
};

struct TrainResult {
  int steps_run = 0;
  double first_loss = 0.0;
  double final_loss = 0.0;
  std::string final_checkpoint;
};

// Full training loop. Appends one JSONL record per step; saves checkpoints at
// the configured interval and at the final step. Aborts on non-finite loss.
inline TrainResult train_model(const RunConfig& cfg, const std::vector<Scene>& scenes,
                               const std::string& out_dir, const std::string& resume_path = "",
                               std::ostream* progress = nullptr) {
  CVL_CHECK(!scenes.empty(), "train: no scenes");
  cfg.model.validate();
  std::filesystem::create_directories(out_dir);

  CurveFormer model(cfg.model);
  Adam opt(cfg.train.lr, cfg.train.weight_decay);
  int start_step = 0;
  if (!resume_path.empty()) {
    CheckpointData data = read_checkpoint(resume_path);
    apply_checkpoint(data, model.params(), opt);
    start_step = data.step;
  }

  std::string log_path = out_dir + "/train_log.jsonl";
  std::ofstream log(log_path, start_step > 0 ? std::ios::app : std::ios::trunc);
  CVL_CHECK(log.good(), "train: cannot open log " + log_path);

  BatchSchedule sched(static_cast<int>(scenes.size()), cfg.train.batch_size, cfg.train.seed);
  TrainResult res;
  for (int step = start_step + 1; step <= cfg.train.steps; ++step) {
    std::vector<const Scene*> batch;
    for (int idx : sched.batch_indices(step)) batch.push_back(&scenes[idx]);

    Var images = images_to_var(batch);
    ForwardOutput out = model.forward(images, batch_cameras(batch));
    BatchLoss loss = batch_loss(out, batch, cfg.loss, cfg.model.seg_branch);
    double total = loss.total.item();
    if (!std::isfinite(total)) {
      std::ostringstream os;
      os << "train: non-finite loss at step " << step << " (curve=" << loss.curve
         << " query=" << loss.query << " seg=" << loss.seg << ")";
      throw std::runtime_error(os.str());
    }
    model.params().zero_grad();
    loss.total.backward();
    opt.step(model.params());

    nlohmann::json rec = {{"step", step},          {"l_curve", loss.curve},
                          {"l_query", loss.query}, {"l_seg", loss.seg},
                          {"l_total", total},      {"matched", loss.matched}};
    log << rec.dump() << "\n";
    log.flush();
    if (progress && (step == 1 || step % cfg.train.log_interval == 0 || step == cfg.train.steps))
      *progress << "step " << step << "/" << cfg.train.steps << " loss " << total << "\n";

    if (step == start_step + 1) res.first_loss = total;
    res.final_loss = total;
    res.steps_run = step;
    bool at_interval = cfg.train.checkpoint_interval > 0 && step % cfg.train.checkpoint_interval == 0;
    if (at_interval || step == cfg.train.steps) {
      std::string path = out_dir + "/checkpoint_" + std::to_string(step) + ".ckpt";
      save_checkpoint(path, cfg.model, model.params(), opt, step);
      if (step == cfg.train.steps) {
        save_checkpoint(out_dir + "/checkpoint_final.ckpt", cfg.model, model.params(), opt, step);
        res.final_checkpoint = out_dir + "/checkpoint_final.ckpt";
      }
    }
  }
  if (res.final_checkpoint.empty()) res.final_checkpoint = out_dir + "/checkpoint_final.ckpt";
  return res;
}

// Runs the model over a scene set and scores it. Batch size 1 keeps the graph
// footprint small; results are independent of batching.
inline EvalReport evaluate_model(const CurveFormer& model, const std::vector<Scene>& scenes,
                                 const EvalConfig& ecfg) {
  CVL_CHECK(ecfg.ys == model.config().fixed_ys,
            "evaluate: eval y-positions must equal the model's fixed y-positions");
  std::vector<std::vector<EvalLane>> preds, gts;
  for (const Scene& s : scenes) {
    std::vector<const Scene*> one = {&s};
    ForwardOutput out = model.forward(images_to_var(one), batch_cameras(one));
    preds.push_back(pred_eval_lanes(out.items[0].layers.back()));
    gts.push_back(gt_eval_lanes(s));
  }
  return evaluate_scenes(preds, gts, ecfg);
}

inline nlohmann::json eval_report_to_json(const EvalReport& rep, int scene_count) {
  return {{"f1", rep.f1},
          {"ap", rep.ap},
          {"x_err_near", rep.x_err_near},
          {"x_err_far", rep.x_err_far},
          {"z_err_near", rep.z_err_near},
          {"z_err_far", rep.z_err_far},
          {"tp", rep.tp},
          {"fp", rep.fp},
          {"fn", rep.fn},
          {"scenes", scene_count}};
}

inline std::string eval_report_row(const EvalReport& rep) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "| F-Score | AP | x near (m) | x far (m) | z near (m) | z far (m) |\n"
     << "|---------|----|-----------|----------|-----------|----------|\n"
     << "| " << rep.f1 << " | " << rep.ap << " | " << rep.x_err_near << " | " << rep.x_err_far
     << " | " << rep.z_err_near << " | " << rep.z_err_far << " |";
  return os.str();
}

// --- CLI command bodies -----------------------------------------------------

// Train scenes take indices [0, count); held-out scenes continue the same
// deterministic family at [count, count + eval_count).
inline void cmd_generate(const RunConfig& cfg) {
  std::string root = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(root);
  std::vector<Scene> train_scenes, eval_scenes;
  for (int i = 0; i < cfg.scene_count; ++i) train_scenes.push_back(generate_scene(cfg.scene, i));
  for (int i = 0; i < cfg.eval_scene_count; ++i)
    eval_scenes.push_back(generate_scene(cfg.scene, cfg.scene_count + i));
  write_scenes(train_scenes, root + "/scenes_train");
  write_scenes(eval_scenes, root + "/scenes_eval");
  std::cout << "wrote " << train_scenes.size() << " train / " << eval_scenes.size()
            << " eval scenes under " << root << "\n";
}

inline TrainResult cmd_train(const RunConfig& cfg, const std::string& resume_path = "") {
  std::string root = resolve_output_dir(cfg.output_dir);
  std::vector<Scene> scenes = read_scenes(root + "/scenes_train");
  TrainResult res = train_model(cfg, scenes, root, resume_path, &std::cout);
  std::cout << "trained " << res.steps_run << " steps, final loss " << res.final_loss
            << ", checkpoint " << res.final_checkpoint << "\n";
  return res;
}

inline EvalReport cmd_eval(const RunConfig& cfg, std::string checkpoint_path = "",
                           std::string scenes_dir = "", std::string report_path = "") {
  std::string root = resolve_output_dir(cfg.output_dir);
  if (checkpoint_path.empty()) checkpoint_path = root + "/checkpoint_final.ckpt";
  if (scenes_dir.empty()) scenes_dir = root + "/scenes_eval";
  if (scenes_dir == "train") scenes_dir = root + "/scenes_train";
  if (scenes_dir == "eval") scenes_dir = root + "/scenes_eval";
  if (report_path.empty()) report_path = root + "/eval_report.json";

  CheckpointData data = read_checkpoint(checkpoint_path);
  CurveFormer model(data.config);
  Adam opt(cfg.train.lr, cfg.train.weight_decay);
  apply_checkpoint(data, model.params(), opt);

  std::vector<Scene> scenes = read_scenes(scenes_dir);
  EvalConfig ecfg = cfg.eval;
  ecfg.ys = data.config.fixed_ys;
  EvalReport rep = evaluate_model(model, scenes, ecfg);

  std::ofstream out(report_path);
  CVL_CHECK(out.good(), "eval: cannot write " + report_path);
  out << eval_report_to_json(rep, static_cast<int>(scenes.size())).dump(2) << "\n";
  std::cout << eval_report_row(rep) << "\n";
  return rep;
}

inline void cmd_visualize(const RunConfig& cfg, int scene_index, bool per_layer,
                          std::string checkpoint_path = "", std::string scenes_dir = "") {
  std::string root = resolve_output_dir(cfg.output_dir);
  if (checkpoint_path.empty()) checkpoint_path = root + "/checkpoint_final.ckpt";
  if (scenes_dir.empty()) scenes_dir = root + "/scenes_eval";
  if (scenes_dir == "train") scenes_dir = root + "/scenes_train";
  if (scenes_dir == "eval") scenes_dir = root + "/scenes_eval";

  CheckpointData data = read_checkpoint(checkpoint_path);
  CurveFormer model(data.config);
  Adam opt(cfg.train.lr, cfg.train.weight_decay);
  apply_checkpoint(data, model.params(), opt);

  std::vector<Scene> scenes = read_scenes(scenes_dir);
  CVL_CHECK(scene_index >= 0 && scene_index < static_cast<int>(scenes.size()),
            "visualize: scene index out of range");
  const Scene& scene = scenes[scene_index];
  std::vector<const Scene*> one = {&scene};
  ForwardOutput out = model.forward(images_to_var(one), batch_cameras(one));

  const std::vector<double>& ys = data.config.fixed_ys;
  std::vector<EvalLane> gts = gt_eval_lanes(scene);
  auto confident = [&](const std::vector<EvalLane>& lanes) {
    std::vector<EvalLane> kept;
    for (const auto& l : lanes)
      if (l.confidence >= cfg.eval.confidence_threshold) kept.push_back(l);
    return kept;
  };
  std::vector<EvalLane> preds = confident(pred_eval_lanes(out.items[0].layers.back()));

  std::string prefix = root + "/scene" + std::to_string(scene_index);
  viz::write_overlay(prefix + "_overlay.png", scene, preds, gts, ys);
  viz::write_bev(prefix + "_bev.png", preds, gts, ys, data.config.range);
  std::cout << "wrote " << prefix << "_overlay.png and " << prefix << "_bev.png\n";
  if (per_layer) {
    for (std::size_t l = 0; l < out.items[0].layers.size(); ++l) {
      std::vector<EvalLane> lp = confident(pred_eval_lanes(out.items[0].layers[l]));
      viz::write_overlay(prefix + "_layer" + std::to_string(l) + ".png", scene, lp, gts, ys);
    }
    std::cout << "wrote " << out.items[0].layers.size() << " per-layer overlays\n";
  }
}

struct AblationRow {
  std::string variant;
  double f1 = 0.0, ap = 0.0;
};

// Runs generate/train/eval for one configured variant in its own directory.
inline AblationRow run_variant(RunConfig cfg, const std::string& name) {
  cfg.output_dir = cfg.output_dir + "/ablate_" + name;
  std::string root = resolve_output_dir(cfg.output_dir);
  std::filesystem::create_directories(root);
  std::vector<Scene> train_scenes, eval_scenes;
  for (int i = 0; i < cfg.scene_count; ++i) train_scenes.push_back(generate_scene(cfg.scene, i));
  for (int i = 0; i < cfg.eval_scene_count; ++i)
    eval_scenes.push_back(generate_scene(cfg.scene, cfg.scene_count + i));
  TrainResult tr = train_model(cfg, train_scenes, root, "", &std::cout);
  CheckpointData data = read_checkpoint(tr.final_checkpoint);
  CurveFormer model(data.config);
  Adam opt(cfg.train.lr, cfg.train.weight_decay);
  apply_checkpoint(data, model.params(), opt);
  EvalConfig ecfg = cfg.eval;
  ecfg.ys = cfg.model.fixed_ys;
  EvalReport rep = evaluate_model(model, eval_scenes, ecfg);
  return {name, rep.f1, rep.ap};
}

inline std::string ablation_table(const std::vector<AblationRow>& rows, const std::string& axis) {
  std::ostringstream os;
  os.precision(4);
  os << std::fixed;
  os << "| " << axis << " | F-Score | AP |\n|---|---------|----|\n";
  for (const auto& r : rows) os << "| " << r.variant << " | " << r.f1 << " | " << r.ap << " |\n";
  return os.str();
}

inline std::string cmd_ablate(const RunConfig& base, const std::string& axis) {
  std::vector<AblationRow> rows;
  if (axis == "decoder-layers") {
    for (int layers : {2, 4, 6, 8, 10}) {
      RunConfig cfg = base;
      cfg.model.decoder_layers = layers;
      rows.push_back(run_variant(cfg, "layers" + std::to_string(layers)));
    }
  } else if (axis == "sampling") {
    for (SamplingMode mode : {SamplingMode::kNone, SamplingMode::kLearnedOffsets,
                              SamplingMode::kContextOffsets}) {
      RunConfig cfg = base;
      cfg.model.sampling = mode;
      rows.push_back(run_variant(cfg, to_string(mode)));
    }
  } else if (axis == "head") {
    for (HeadMode mode : {HeadMode::kCurve, HeadMode::kPointSet}) {
      RunConfig cfg = base;
      cfg.model.head = mode;
      rows.push_back(run_variant(cfg, to_string(mode)));
    }
  } else if (axis == "seg") {
    for (bool on : {true, false}) {
      RunConfig cfg = base;
      cfg.model.seg_branch = on;
      rows.push_back(run_variant(cfg, on ? "seg_on" : "seg_off"));
    }
  } else {
    throw std::runtime_error(
        "ablate: unknown axis '" + axis +
        "' (valid: decoder-layers, sampling, head, seg)");
  }
  std::string table = ablation_table(rows, axis);
  std::string root = resolve_output_dir(base.output_dir);
  std::filesystem::create_directories(root);
  std::ofstream out(root + "/ablation_" + axis + ".md");
  out << table;
  std::cout << table;
  return table;
}

inline RunConfig load_run_config(const std::string& config_path,
                                 const std::vector<std::string>& sets) {
  ConfigMap m;
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in.good()) throw std::runtime_error("config: cannot read " + config_path);
    std::stringstream buf;
    buf << in.rdbuf();
    m = parse_config_text(buf.str());
  }
  apply_overrides(&m, sets);
  return run_config_from_map(m);
}

}  // namespace curvelab
