#pragma once

// Pipeline stages over a run directory. Each stage checks the manifests of the stages it
// depends on, writes its artifacts, and records a manifest of its own:
//
//   gen -> flow -> train-flowae -> train-cvae -> finetune -> calibrate -> score -> eval -> report
//
// Layout under the run directory:
//   config.json                     resolved configuration
//   data/                           generated scenarios (dataset.root)
//   flows/<split>/<id>.vadt         estimated optical flow
//   models/                         checkpoints and training curves
//   calib/stats.json                calibration statistics
//   scores/<condition>/<id>/        scores.json, maps.vadt
//   eval/                           metrics.csv, per_scenario.csv, summary.json, roc_<condition>.csv
//   report/                         bundle: metrics, ROC points, timelines, heatmaps
//   manifests/<stage>.json

#include <chrono>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "hfvad/config.hpp"
#include "hfvad/eval.hpp"

namespace hfvad::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr const char* kTrainSplit = "train";
inline constexpr const char* kTestSplit = "test";

inline std::ostream*& log_stream() {
  static std::ostream* s = &std::clog;
  return s;
}

inline void note(const std::string& stage, const std::string& msg) {
  if (auto* s = log_stream()) *s << "[" << stage << "] " << msg << std::endl;
}

struct Run {
  fs::path dir;
  config::RunConfig cfg;
  config::RunConfig eff;  // cfg with the run seed applied to model and training seeds

  fs::path data_root() const {
    const fs::path r(cfg.dataset.root);
    return r.is_absolute() ? r : dir / r;
  }
  fs::path flows_path(const std::string& split, const std::string& id) const {
    return dir / "flows" / split / (id + ".vadt");
  }
  fs::path models() const { return dir / "models"; }
  fs::path stats_path() const { return dir / "calib" / "stats.json"; }
  fs::path scores(const std::string& condition) const { return dir / "scores" / condition; }
  fs::path eval_dir() const { return dir / "eval"; }
  fs::path report_dir() const { return dir / "report"; }
  fs::path manifest(const std::string& stage) const { return dir / "manifests" / (stage + ".json"); }
};

/// Opens a run directory, storing the resolved configuration in it.
inline Run open_run(const fs::path& dir, const config::RunConfig& cfg) {
  fs::create_directories(dir);
  write_file(dir / "config.json", config::to_json(cfg).dump(2) + "\n");
  return {dir, cfg, config::with_run_seed(cfg)};
}

// ---------------------------------------------------------------------------
// Manifests

inline std::string rel(const Run& run, const fs::path& p) { return fs::relative(p, run.dir).generic_string(); }

inline json hash_files(const Run& run, const std::vector<fs::path>& files) {
  json out = json::object();
  for (const auto& f : files) out[rel(run, f)] = file_hash(f);
  return out;
}

inline void write_manifest(const Run& run, const std::string& stage, const json& inputs, const json& outputs,
                           const json& extra = json::object()) {
  json m{{"stage", stage},
         {"config_hash", hex64(fnv1a(config::to_json(run.cfg).dump()))},
         {"model_hash", config::model_hash(run.cfg)},
         {"seed", run.cfg.seed},
         {"inputs", inputs},
         {"outputs", outputs}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_file(run.manifest(stage), m.dump(1) + "\n");
}

/// Manifest of a finished prerequisite stage; throws MissingPrerequisite naming the artifact.
inline json require_stage(const Run& run, const std::string& stage) {
  const auto p = run.manifest(stage);
  if (!fs::exists(p))
    throw MissingPrerequisite("missing " + p.string() + ": stage '" + stage + "' has not run in " + run.dir.string() +
                              " (run 'hfvad " + stage + "' first)");
  const auto m = json::parse(read_file(p));
  for (const auto& [path, hash] : m.at("outputs").items()) {
    const auto f = run.dir / path;
    if (!fs::exists(f))
      throw MissingPrerequisite("missing " + f.string() + " produced by stage '" + stage + "' (re-run 'hfvad " + stage + "')");
  }
  return m;
}

/// Dispatches `f(T{})` on the configured precision.
template <class F>
decltype(auto) with_precision(const config::RunConfig& cfg, F&& f) {
  if (cfg.precision == config::Precision::f64) return f(double{});
  return f(float{});
}

// ---------------------------------------------------------------------------
// gen, flow

inline void stage_gen(const Run& run) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto root = run.data_root();
  const auto manifest = scene::build_dataset(root, run.cfg.dataset.spec(), run.cfg.jobs);
  std::size_t n = 0;
  for (const auto& [split, list] : manifest.at("splits").items()) n += list.size();
  write_manifest(run, "gen", json::object(), hash_files(run, {root / "manifest.json"}));
  note("gen", std::to_string(n) + " scenarios in " +
                  std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) + " s");
}

inline std::vector<std::pair<std::string, fs::path>> all_scenarios(const Run& run) {
  std::vector<std::pair<std::string, fs::path>> out;
  for (const auto& s : run.cfg.dataset.splits)
    for (const auto& d : scene::split_dirs(run.data_root(), s.name)) out.emplace_back(s.name, d);
  return out;
}

inline void stage_flow(const Run& run) {
  require_stage(run, "gen");
  std::vector<fs::path> outputs;
  for (const auto& [split, dir] : all_scenarios(run)) {
    const auto sc = scene::load_scenario(dir, split);
    const auto flows = flow::estimate_sequence(sc.frames, run.cfg.flow, run.cfg.jobs);
    const auto out = run.flows_path(split, sc.id);
    fs::create_directories(out.parent_path());
    flow::save_flows(out, flows);
    outputs.push_back(out);
    note("flow", split + "/" + sc.id);
  }
  write_manifest(run, "flow", hash_files(run, {run.data_root() / "manifest.json"}), hash_files(run, outputs));
}

// ---------------------------------------------------------------------------
// Cubes

/// Boxes per frame for one scenario under a condition, with track ids.
inline std::vector<std::vector<BBox>> condition_boxes(const Run& run, const scene::LoadedScenario& sc,
                                                      const config::Condition& c) {
  if (c.boxes == Provenance::ground_truth) return sc.boxes;
  auto stub = c.detector;
  stub.seed = mix_seed(stub.seed, {fnv1a(sc.id)});
  const int W = static_cast<int>(sc.frames.at(0).width), H = static_cast<int>(sc.frames.at(0).height);
  std::vector<std::vector<BBox>> out;
  for (std::size_t t = 0; t < sc.boxes.size(); ++t)
    out.push_back(stc::detect_boxes(sc.boxes[t], stub, static_cast<int>(t), W, H));
  stc::associate_tracks(out, run.cfg.association_min_iou);
  return out;
}

struct ScenarioCubes {
  std::vector<stc::STCube> cubes;
  std::vector<scoring::CubeRecord> records;
};

inline ScenarioCubes build_cubes(const Run& run, const scene::LoadedScenario& sc, const std::vector<FlowField>& flows,
                                 const std::vector<std::vector<BBox>>& boxes, int stride) {
  ScenarioCubes out;
  const auto& spec = run.cfg.cube.spec;
  for (int t = spec.t_len - 1; t + 1 < static_cast<int>(sc.frames.size()); t += stride)
    for (auto& c : stc::extract_stc(sc.frames, flows, boxes, t, spec)) {
      out.records.push_back({t + 1, c.track_id, c.box_at_t1, 0, 0, 0});
      out.cubes.push_back(std::move(c));
    }
  return out;
}

inline std::vector<stc::STCube> training_cubes(const Run& run) {
  std::vector<stc::STCube> out;
  for (const auto& dir : scene::split_dirs(run.data_root(), kTrainSplit)) {
    const auto sc = scene::load_scenario(dir, kTrainSplit);
    const auto flows = flow::load_flows(run.flows_path(kTrainSplit, sc.id));
    auto c = build_cubes(run, sc, flows, sc.boxes, run.cfg.cube.train_stride);
    std::move(c.cubes.begin(), c.cubes.end(), std::back_inserter(out));
  }
  if (out.empty()) throw ConfigError("the training split yields no cubes");
  return out;
}

// ---------------------------------------------------------------------------
// Training

template <class Model>
void save_model(const fs::path& path, const Model& m) {
  io::save(path, m.params().export_tensors(""));
}

template <class Model>
void load_model(const fs::path& path, Model& m) {
  m.params().import_tensors(io::load(path), "");
}

inline void write_curve(const fs::path& path, const train::Curve& curve, const char* aux_name) {
  std::string csv = std::string("epoch,loss,recon,") + aux_name + "\n";
  for (const auto& e : curve)
    csv += std::to_string(e.epoch) + "," + eval::fmt(e.loss, 9) + "," + eval::fmt(e.recon, 9) + "," + eval::fmt(e.aux, 9) + "\n";
  write_file(path, csv);
}

inline train::EpochCallback epoch_logger(const std::string& stage, int epochs) {
  return [stage, epochs](const train::EpochStats& s) {
    note(stage, "epoch " + std::to_string(s.epoch + 1) + "/" + std::to_string(epochs) + " loss " + eval::fmt(s.loss, 6));
  };
}

inline void stage_train_flowae(const Run& run) {
  require_stage(run, "flow");
  const auto cubes = training_cubes(run);
  note("train-flowae", std::to_string(cubes.size()) + " training cubes");
  const auto path = run.models() / "memae.vadt", curve_path = run.models() / "memae_curve.csv";
  with_precision(run.cfg, [&](auto tag) {
    using T = decltype(tag);
    memae::MemAE<T> m(run.eff.memae);
    const auto curve = train::train_memae(m, cubes, run.eff.training.memae,
                                          epoch_logger("train-flowae", run.eff.training.memae.epochs));
    fs::create_directories(run.models());
    save_model(path, m);
    write_curve(curve_path, curve, "entropy");
  });
  write_manifest(run, "train-flowae", json::object(), hash_files(run, {path, curve_path}), {{"cubes", cubes.size()}});
}

inline void stage_train_cvae(const Run& run) {
  require_stage(run, "train-flowae");
  const auto cubes = training_cubes(run);
  const auto in = run.models() / "memae.vadt";
  const auto path = run.models() / "cvae.vadt", curve_path = run.models() / "cvae_curve.csv";
  with_precision(run.cfg, [&](auto tag) {
    using T = decltype(tag);
    memae::MemAE<T> fm(run.eff.memae);
    load_model(in, fm);
    cvae::CVAE<T> m(run.eff.cvae);
    const auto curve =
        train::train_cvae(fm, m, cubes, run.eff.training.cvae, epoch_logger("train-cvae", run.eff.training.cvae.epochs));
    save_model(path, m);
    write_curve(curve_path, curve, "kl");
  });
  write_manifest(run, "train-cvae", hash_files(run, {in}), hash_files(run, {path, curve_path}), {{"cubes", cubes.size()}});
}

inline void stage_finetune(const Run& run) {
  require_stage(run, "train-cvae");
  const auto in_m = run.models() / "memae.vadt", in_c = run.models() / "cvae.vadt";
  const auto out_m = run.models() / "final_memae.vadt", out_c = run.models() / "final_cvae.vadt";
  std::vector<fs::path> outputs{out_m, out_c};
  if (!run.eff.training.finetune_enabled) {
    fs::copy_file(in_m, out_m, fs::copy_options::overwrite_existing);
    fs::copy_file(in_c, out_c, fs::copy_options::overwrite_existing);
    note("finetune", "disabled; stage-2 checkpoints passed through");
  } else {
    const auto cubes = training_cubes(run);
    const auto curve_path = run.models() / "finetune_curve.csv";
    with_precision(run.cfg, [&](auto tag) {
      using T = decltype(tag);
      memae::MemAE<T> fm(run.eff.memae);
      cvae::CVAE<T> m(run.eff.cvae);
      load_model(in_m, fm);
      load_model(in_c, m);
      const auto curve = train::finetune(fm, m, cubes, run.eff.training.finetune,
                                         epoch_logger("finetune", run.eff.training.finetune.epochs));
      save_model(out_m, fm);
      save_model(out_c, m);
      write_curve(curve_path, curve, "cvae_recon");
    });
    outputs.push_back(curve_path);
  }
  write_manifest(run, "finetune", hash_files(run, {in_m, in_c}), hash_files(run, outputs),
                 {{"enabled", run.eff.training.finetune_enabled}});
}

template <std::floating_point T>
struct Models {
  memae::MemAE<T> flow;
  cvae::CVAE<T> pred;
  explicit Models(const Run& run) : flow(run.eff.memae), pred(run.eff.cvae) {
    load_model(run.models() / "final_memae.vadt", flow);
    load_model(run.models() / "final_cvae.vadt", pred);
  }
};

inline std::uint64_t latent_seed(const Run& run) {
  return run.cfg.scoring.latent == cvae::LatentMode::posterior_sample ? mix_seed(run.cfg.seed, {0x1a7e}) : 0;
}

// ---------------------------------------------------------------------------
// calibrate, score

inline void stage_calibrate(const Run& run) {
  require_stage(run, "finetune");
  const auto cubes = training_cubes(run);
  scoring::TrainStats stats;
  with_precision(run.cfg, [&](auto tag) {
    using T = decltype(tag);
    const Models<T> m(run);
    stats = scoring::calibrate(
        scoring::cube_errors(m.flow, m.pred, cubes, run.cfg.scoring.latent, run.cfg.scoring.batch, latent_seed(run)));
  });
  write_file(run.stats_path(), scoring::to_json(stats).dump(1) + "\n");
  note("calibrate", std::to_string(stats.cubes) + " cubes: mu_r " + eval::fmt(stats.mu_r) + " mu_p " + eval::fmt(stats.mu_p));
  write_manifest(run, "calibrate",
                 hash_files(run, {run.models() / "final_memae.vadt", run.models() / "final_cvae.vadt"}),
                 hash_files(run, {run.stats_path()}));
}

inline json condition_json(const config::Condition& c) {
  return {{"name", c.name},
          {"boxes", to_string(c.boxes)},
          {"detector", config::detail::detector_json(c.detector)},
          {"weights", config::detail::weights_json(c.weights)},
          {"effective_weights", config::detail::weights_json(c.effective_weights())},
          {"flow_only", c.flow_only}};
}

inline json box_json(const BBox& b) { return {b.x_min, b.y_min, b.x_max, b.y_max, b.track_id}; }

inline BBox box_from_json(const json& j) {
  BBox b;
  b.x_min = j.at(0);
  b.y_min = j.at(1);
  b.x_max = j.at(2);
  b.y_max = j.at(3);
  b.track_id = j.at(4);
  return b;
}

/// Key grouping conditions that share the same cubes.
inline std::string box_setup_key(const config::Condition& c) {
  if (c.boxes == Provenance::ground_truth) return "ground-truth";
  return config::detail::detector_json(c.detector).dump();
}

/// Scores the test split under `conditions` (all configured ones when empty).
inline void stage_score(const Run& run, std::vector<config::Condition> conditions = {}) {
  require_stage(run, "calibrate");
  if (conditions.empty()) conditions = config::resolve_conditions(run.cfg);
  const auto stats = scoring::stats_from_json(json::parse(read_file(run.stats_path())));
  const auto stats_hash = file_hash(run.stats_path());
  std::map<std::string, std::vector<const config::Condition*>> groups;
  for (const auto& c : conditions) groups[box_setup_key(c)].push_back(&c);
  std::map<std::string, std::vector<fs::path>> outputs;

  with_precision(run.cfg, [&](auto tag) {
    using T = decltype(tag);
    const Models<T> m(run);
    for (const auto& dir : scene::split_dirs(run.data_root(), kTestSplit)) {
      const auto sc = scene::load_scenario(dir, kTestSplit);
      const auto flows = flow::load_flows(run.flows_path(kTestSplit, sc.id));
      const std::size_t T_ = sc.frames.size(), H = sc.frames[0].height, W = sc.frames[0].width;
      for (const auto& [key, members] : groups) {
        const auto boxes = condition_boxes(run, sc, *members.front());
        const auto cubes = build_cubes(run, sc, flows, boxes, 1);
        const auto errs =
            scoring::cube_errors(m.flow, m.pred, cubes.cubes, run.cfg.scoring.latent, run.cfg.scoring.batch, latent_seed(run));
        for (const auto* c : members) {
          const auto s = scoring::score_scenario(T_, H, W, cubes.records, errs, stats, c->effective_weights());
          json j{{"scenario", sc.id}, {"condition", c->name}, {"frame_scores", s.frame_scores}};
          json cj = json::array();
          for (const auto& r : s.cubes)
            cj.push_back({{"frame", r.frame}, {"track_id", r.track_id}, {"box", box_json(r.box)}, {"s_r", r.s_r},
                          {"s_p", r.s_p}, {"score", r.score}});
          j["cubes"] = std::move(cj);
          json bj = json::array();
          for (const auto& fb : boxes) {
            json f = json::array();
            for (const auto& b : fb) f.push_back(box_json(b));
            bj.push_back(std::move(f));
          }
          j["boxes"] = std::move(bj);
          const auto out = run.scores(c->name) / sc.id;
          write_file(out / "scores.json", j.dump() + "\n");
          io::NamedTensor maps{"maps", {static_cast<std::uint32_t>(T_), static_cast<std::uint32_t>(H), static_cast<std::uint32_t>(W)}, {}};
          for (const auto& mp : s.maps) maps.values.insert(maps.values.end(), mp.values.begin(), mp.values.end());
          io::save(out / "maps.vadt", {maps});
          outputs[c->name].push_back(out / "scores.json");
          outputs[c->name].push_back(out / "maps.vadt");
        }
      }
      note("score", sc.id);
    }
  });
  for (const auto& c : conditions) {
    write_file(run.scores(c.name) / "condition.json", condition_json(c).dump(1) + "\n");
    write_manifest(run, "score_" + c.name, hash_files(run, {run.stats_path()}), hash_files(run, outputs[c.name]),
                   {{"condition", condition_json(c)}, {"stats_hash", stats_hash}});
  }
}

// ---------------------------------------------------------------------------
// eval

struct ConditionMetrics {
  std::string name;
  json condition;
  std::size_t frames = 0, anomalous_frames = 0, cubes = 0;
  double frame_auroc = 0, frame_fpr95 = 0, pixel_fpr95 = 0, box_iou = 0;
  double mean_s_r_anomalous = 0, mean_s_r_normal = 0, mean_s_p_anomalous = 0, mean_s_p_normal = 0;
  std::vector<std::pair<std::string, double>> per_scenario_auroc;
  eval::RocCurve roc;
};

/// Conditions with a score manifest, configured ones first, then any others by name.
inline std::vector<std::string> scored_conditions(const Run& run) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& c : config::resolve_conditions(run.cfg))
    if (fs::exists(run.manifest("score_" + c.name))) {
      out.push_back(c.name);
      seen.insert(c.name);
    }
  std::vector<std::string> extra;
  if (fs::exists(run.dir / "manifests"))
    for (const auto& e : fs::directory_iterator(run.dir / "manifests")) {
      const auto stem = e.path().stem().string();
      if (stem.rfind("score_", 0) == 0 && !seen.count(stem.substr(6))) extra.push_back(stem.substr(6));
    }
  std::sort(extra.begin(), extra.end());
  out.insert(out.end(), extra.begin(), extra.end());
  return out;
}

/// Metric value, or NaN when the metric is undefined for this condition.
template <class F>
double metric_or_nan(F&& f) {
  try {
    return f();
  } catch (const MetricError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

inline ConditionMetrics evaluate_condition(const Run& run, const std::string& name,
                                           const std::vector<scene::LoadedScenario>& scenarios) {
  ConditionMetrics cm;
  cm.name = name;
  cm.condition = json::parse(read_file(run.scores(name) / "condition.json"));
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<stc::AnomalyMap> maps;
  std::vector<std::vector<BBox>> pred;
  std::vector<eval::PixelFrame> pixel;
  eval::IouTally iou;
  double sr[2] = {0, 0}, sp[2] = {0, 0};
  std::size_t nc[2] = {0, 0};
  // Storage first so PixelFrame pointers stay valid.
  std::size_t total_frames = 0;
  for (const auto& sc : scenarios) total_frames += sc.frames.size();
  maps.reserve(total_frames);
  pred.reserve(total_frames);
  for (const auto& sc : scenarios) {
    const auto dir = run.scores(name) / sc.id;
    if (!fs::exists(dir / "scores.json")) throw MissingPrerequisite("missing " + (dir / "scores.json").string());
    const auto j = json::parse(read_file(dir / "scores.json"));
    const auto fs_ = j.at("frame_scores").get<std::vector<double>>();
    if (fs_.size() != sc.frames.size()) throw DimensionError("score count differs from frame count for " + sc.id);
    std::vector<double> s_scores;
    std::vector<std::uint8_t> s_labels;
    for (std::size_t t = 0; t < fs_.size(); ++t) {
      scores.push_back(fs_[t]);
      labels.push_back(sc.anomalous[t]);
      s_scores.push_back(fs_[t]);
      s_labels.push_back(sc.anomalous[t]);
    }
    cm.per_scenario_auroc.emplace_back(sc.id, metric_or_nan([&] { return eval::auroc(s_scores, s_labels); }));
    for (const auto& c : j.at("cubes")) {
      const int k = sc.anomalous.at(c.at("frame").get<std::size_t>()) ? 1 : 0;
      sr[k] += c.at("s_r").get<double>();
      sp[k] += c.at("s_p").get<double>();
      ++nc[k];
    }
    cm.cubes += j.at("cubes").size();
    const auto mt = io::find(io::load(dir / "maps.vadt"), "maps");
    const std::size_t H = mt.shape.at(1), W = mt.shape.at(2);
    const auto& bj = j.at("boxes");
    for (std::size_t t = 0; t < fs_.size(); ++t) {
      stc::AnomalyMap m(H, W);
      std::copy_n(mt.values.begin() + static_cast<std::ptrdiff_t>(t * H * W), H * W, m.values.begin());
      maps.push_back(std::move(m));
      std::vector<BBox> p;
      for (const auto& b : bj.at(t)) p.push_back(box_from_json(b));
      pred.push_back(std::move(p));
      eval::tally_box_iou(sc.boxes[t], pred.back(), iou);
      pixel.push_back({&maps.back(), &sc.masks[t], &sc.boxes[t], &pred.back()});
    }
  }
  cm.frames = scores.size();
  cm.anomalous_frames = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
  cm.roc = eval::roc_curve(scores, labels);
  cm.frame_auroc = cm.roc.auroc;
  cm.frame_fpr95 = eval::fpr_at_tpr(scores, labels, 0.95);
  cm.pixel_fpr95 = metric_or_nan([&] { return eval::pixel_fpr95_overlap(pixel); });
  cm.box_iou = iou.mean();
  auto mean = [](double s, std::size_t n) { return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN(); };
  cm.mean_s_r_normal = mean(sr[0], nc[0]);
  cm.mean_s_r_anomalous = mean(sr[1], nc[1]);
  cm.mean_s_p_normal = mean(sp[0], nc[0]);
  cm.mean_s_p_anomalous = mean(sp[1], nc[1]);
  return cm;
}

inline std::string metrics_csv(const std::vector<ConditionMetrics>& all) {
  using eval::fmt;
  std::string csv = "condition,boxes,w_r,w_p,w_rp,w_pp,frames,anomalous_frames,cubes,frame_auroc,frame_fpr95,pixel_fpr95,box_iou\n";
  for (const auto& m : all) {
    const auto& w = m.condition.at("effective_weights");
    csv += m.name + "," + m.condition.at("boxes").get<std::string>() + "," + fmt(w.at("w_r"), 4) + "," +
           fmt(w.at("w_p"), 4) + "," + fmt(w.at("w_rp"), 4) + "," + fmt(w.at("w_pp"), 4) + "," +
           std::to_string(m.frames) + "," + std::to_string(m.anomalous_frames) + "," + std::to_string(m.cubes) + "," +
           fmt(m.frame_auroc) + "," + fmt(m.frame_fpr95) + "," + fmt(m.pixel_fpr95) + "," + fmt(m.box_iou) + "\n";
  }
  return csv;
}

inline std::vector<scene::LoadedScenario> load_test_split(const Run& run) {
  std::vector<scene::LoadedScenario> out;
  for (const auto& dir : scene::split_dirs(run.data_root(), kTestSplit)) out.push_back(scene::load_scenario(dir, kTestSplit));
  return out;
}

inline std::vector<ConditionMetrics> stage_eval(const Run& run) {
  const auto calib = require_stage(run, "calibrate");
  const auto names = scored_conditions(run);
  if (names.empty()) throw MissingPrerequisite("no scored conditions in " + run.dir.string() + " (run 'hfvad score' first)");
  const auto stats_hash = file_hash(run.stats_path());
  const auto model = config::model_hash(run.cfg);
  if (calib.at("model_hash") != model)
    throw ConfigError("calibration in " + run.dir.string() + " was made under a different configuration; re-run from 'train-flowae'");
  const auto scenarios = load_test_split(run);
  std::vector<ConditionMetrics> all;
  std::vector<fs::path> outputs;
  json summary = json::object();
  std::string per_scenario = "condition,scenario,frame_auroc\n";
  for (const auto& name : names) {
    const auto m = require_stage(run, "score_" + name);
    if (m.at("stats_hash") != stats_hash || m.at("model_hash") != model)
      throw ConfigError("scores for condition '" + name + "' were computed with different calibration statistics; re-run 'hfvad score'");
    auto cm = evaluate_condition(run, name, scenarios);
    const auto roc_path = run.eval_dir() / ("roc_" + name + ".csv");
    write_file(roc_path, eval::roc_csv(cm.roc));
    outputs.push_back(roc_path);
    for (const auto& [id, a] : cm.per_scenario_auroc) per_scenario += name + "," + id + "," + eval::fmt(a) + "\n";
    summary[name] = {{"condition", cm.condition},
                     {"frames", cm.frames},
                     {"anomalous_frames", cm.anomalous_frames},
                     {"cubes", cm.cubes},
                     {"frame_auroc", cm.frame_auroc},
                     {"frame_fpr95", cm.frame_fpr95},
                     {"pixel_fpr95", std::isnan(cm.pixel_fpr95) ? json(nullptr) : json(cm.pixel_fpr95)},
                     {"box_iou", cm.box_iou},
                     {"mean_s_r_anomalous", cm.mean_s_r_anomalous},
                     {"mean_s_r_normal", cm.mean_s_r_normal},
                     {"mean_s_p_anomalous", cm.mean_s_p_anomalous},
                     {"mean_s_p_normal", cm.mean_s_p_normal}};
    note("eval", name + ": AUROC " + eval::fmt(cm.frame_auroc, 4) + ", pixel FPR95 " + eval::fmt(cm.pixel_fpr95, 4) +
                     ", IoU " + eval::fmt(cm.box_iou, 4));
    all.push_back(std::move(cm));
  }
  write_file(run.eval_dir() / "metrics.csv", metrics_csv(all));
  write_file(run.eval_dir() / "per_scenario.csv", per_scenario);
  write_file(run.eval_dir() / "summary.json", summary.dump(1) + "\n");
  for (const char* f : {"metrics.csv", "per_scenario.csv", "summary.json"}) outputs.push_back(run.eval_dir() / f);
  write_manifest(run, "eval", hash_files(run, {run.stats_path()}), hash_files(run, outputs));
  return all;
}

// ---------------------------------------------------------------------------
// report

inline void stage_report(const Run& run) {
  const auto m = require_stage(run, "eval");
  const auto rd = run.report_dir();
  fs::create_directories(rd);
  std::vector<fs::path> outputs;
  auto copy = [&](const fs::path& src, const std::string& name) {
    fs::copy_file(src, rd / name, fs::copy_options::overwrite_existing);
    outputs.push_back(rd / name);
  };
  copy(run.eval_dir() / "metrics.csv", "metrics.csv");
  copy(run.eval_dir() / "per_scenario.csv", "per_scenario.csv");
  const auto names = scored_conditions(run);
  for (const auto& n : names) copy(run.eval_dir() / ("roc_" + n + ".csv"), "roc_" + n + ".csv");
  for (const char* c : {"memae_curve.csv", "cvae_curve.csv", "finetune_curve.csv"})
    if (fs::exists(run.models() / c)) copy(run.models() / c, std::string("training_") + c);

  const auto scenarios = load_test_split(run);
  const std::string primary = names.front();
  // Shared scale for heatmaps: largest map value of the primary condition.
  std::map<std::string, io::NamedTensor> primary_maps;
  double vmax = 0;
  for (const auto& sc : scenarios) {
    auto t = io::find(io::load(run.scores(primary) / sc.id / "maps.vadt"), "maps");
    for (float v : t.values) vmax = std::max(vmax, static_cast<double>(v));
    primary_maps.emplace(sc.id, std::move(t));
  }
  for (const auto& sc : scenarios) {
    std::vector<std::vector<double>> cols;
    for (const auto& n : names)
      cols.push_back(json::parse(read_file(run.scores(n) / sc.id / "scores.json")).at("frame_scores").get<std::vector<double>>());
    std::string csv = "frame,anomalous";
    for (const auto& n : names) csv += "," + n;
    csv += "\n";
    for (std::size_t t = 0; t < sc.frames.size(); ++t) {
      csv += std::to_string(t) + "," + (sc.anomalous[t] ? "1" : "0");
      for (const auto& c : cols) csv += "," + eval::fmt(c[t]);
      csv += "\n";
    }
    const auto tl = rd / ("timeline_" + sc.id + ".csv");
    write_file(tl, csv);
    outputs.push_back(tl);

    // Heatmaps at the highest-scoring anomalous frame and the highest-scoring normal frame.
    const auto& ps = cols.front();
    std::optional<std::size_t> best[2];
    for (std::size_t t = 0; t < ps.size(); ++t) {
      auto& b = best[sc.anomalous[t] ? 1 : 0];
      if (!b || ps[t] > ps[*b]) b = t;
    }
    const auto& mt = primary_maps.at(sc.id);
    const std::size_t H = mt.shape.at(1), W = mt.shape.at(2);
    for (const auto& b : best) {
      if (!b) continue;
      stc::AnomalyMap map(H, W);
      std::copy_n(mt.values.begin() + static_cast<std::ptrdiff_t>(*b * H * W), H * W, map.values.begin());
      const auto p = rd / ("heatmap_" + sc.id + "_" + std::to_string(*b) + ".pgm");
      write_file(p, eval::heatmap_pgm(map, vmax));
      outputs.push_back(p);
    }
  }
  write_manifest(run, "report", hash_files(run, {run.eval_dir() / "metrics.csv"}), hash_files(run, outputs),
                 {{"primary_condition", primary}, {"heatmap_scale", vmax}});
  note("report", "bundle in " + rd.string());
}

inline void run_all(const Run& run) {
  const auto t0 = std::chrono::steady_clock::now();
  stage_gen(run);
  stage_flow(run);
  stage_train_flowae(run);
  stage_train_cvae(run);
  stage_finetune(run);
  stage_calibrate(run);
  stage_score(run);
  stage_eval(run);
  stage_report(run);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_file(run.dir / "timing.json", json{{"run_all_seconds", secs}}.dump() + "\n");
  note("run-all", "done in " + eval::fmt(secs, 1) + " s");
}

}  // namespace hfvad::pipeline
