#pragma once

// Run configuration: one JSON tree covering data generation, flow, models, training, scoring
// and the evaluated conditions. Parsing is strict; unknown keys are errors.

#include <json.hpp>
#include <set>
#include <string>
#include <vector>

#include "hfvad/cvae.hpp"
#include "hfvad/flow.hpp"
#include "hfvad/memae.hpp"
#include "hfvad/scene.hpp"
#include "hfvad/scoring.hpp"
#include "hfvad/stc.hpp"
#include "hfvad/train.hpp"

namespace hfvad::config {

using nlohmann::json;

enum class Precision { f32, f64 };

inline std::string to_string(Precision p) { return p == Precision::f32 ? "float32" : "float64"; }

inline Precision precision_from_string(const std::string& s) {
  if (s == "float32") return Precision::f32;
  if (s == "float64") return Precision::f64;
  throw ConfigError("unknown precision '" + s + "' (expected float32 or float64)");
}

struct DatasetConfig {
  std::string root = "data";  // relative paths resolve against the run directory
  std::uint64_t seed = 1;
  std::size_t height = 64, width = 64;
  int frames = 150;
  std::vector<scene::SplitSpec> splits{{"train", 20, false}, {"test", 8, true}};

  scene::DatasetSpec spec() const { return {seed, height, width, frames, splits}; }
};

struct CubeConfig {
  stc::CubeSpec spec;
  int train_stride = 3;  // every n-th window of the training split
};

struct TrainingConfig {
  train::TrainConfig memae{10, 32, 1e-3, 3, 1.0};
  train::TrainConfig cvae{10, 32, 1e-3, 4, 1.0};
  train::TrainConfig finetune{2, 32, 1e-4, 5, 1.0};
  bool finetune_enabled = true;
};

/// One evaluated setting: which boxes feed the cubes and how errors are weighted.
struct Condition {
  std::string name;
  Provenance boxes = Provenance::ground_truth;
  stc::DetectorStub detector;
  scoring::ScoreWeights weights;
  bool flow_only = false;

  scoring::ScoreWeights effective_weights() const {
    auto w = weights;
    if (flow_only) w.w_p = w.w_pp = 0.0;
    return w;
  }
};

struct ScoringConfig {
  scoring::ScoreWeights weights;
  Provenance boxes = Provenance::ground_truth;
  bool flow_only = false;
  cvae::LatentMode latent = cvae::LatentMode::prior_mean;
  std::size_t batch = 64;
};

struct RunConfig {
  std::uint64_t seed = 1;
  Precision precision = Precision::f32;
  unsigned jobs = 1;
  DatasetConfig dataset;
  flow::FlowParams flow;
  CubeConfig cube;
  memae::MemAEConfig memae;
  cvae::CVAEConfig cvae;
  TrainingConfig training;
  ScoringConfig scoring;
  stc::DetectorStub detector;
  double association_min_iou = 0.3;
  std::vector<json> conditions;  // partial overrides of the base scoring/detector settings

  RunConfig() {
    detector.miss_rate = 0.05;
    detector.jitter_sigma = 1.0;
    detector.distance_miss_boost = 0.2;
    detector.seed = 11;
    conditions = {
        json{{"name", "gt"}},
        json{{"name", "gt-w0.1-10"}, {"weights", {{"w_r", 0.1}, {"w_p", 10.0}, {"w_rp", 0.1}, {"w_pp", 10.0}}}},
        json{{"name", "gt-flow-only"}, {"flow_only", true}},
        json{{"name", "detected"}, {"boxes", "detected"}},
        json{{"name", "detected-lead-miss"}, {"boxes", "detected"}, {"detector", {{"track_miss_rate", {{"0", 0.5}}}}}},
    };
  }
};

// ---------------------------------------------------------------------------
// Strict reading

namespace detail {

/// Reads keys from one JSON object and rejects whatever was not consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + " has the wrong type");
    }
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string where(const std::string& key = "") const {
    const std::string p = path_.empty() ? key : key.empty() ? path_ : path_ + "." + key;
    return "config key '" + (p.empty() ? std::string("<root>") : p) + "'";
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown " + where(k));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_weights(const json& j, const std::string& path, scoring::ScoreWeights& w) {
  Reader r(j, path);
  r.get("w_r", w.w_r);
  r.get("w_p", w.w_p);
  r.get("w_rp", w.w_rp);
  r.get("w_pp", w.w_pp);
  r.finish();
  w.validate();
}

inline json weights_json(const scoring::ScoreWeights& w) {
  return {{"w_r", w.w_r}, {"w_p", w.w_p}, {"w_rp", w.w_rp}, {"w_pp", w.w_pp}};
}

inline void read_detector(const json& j, const std::string& path, stc::DetectorStub& d) {
  Reader r(j, path);
  r.get("miss_rate", d.miss_rate);
  r.get("jitter_sigma", d.jitter_sigma);
  r.get("size_bias", d.size_bias);
  r.get("distance_miss_boost", d.distance_miss_boost);
  r.get("small_area", d.small_area);
  r.get("seed", d.seed);
  if (const auto* t = r.sub("track_miss_rate")) {
    if (!t->is_object()) throw ConfigError(r.where("track_miss_rate") + " must map track ids to probabilities");
    d.track_miss_rate.clear();
    for (const auto& [k, v] : t->items()) {
      int id = 0;
      try {
        std::size_t used = 0;
        id = std::stoi(k, &used);
        if (used != k.size()) throw std::invalid_argument(k);
      } catch (const std::exception&) {
        throw ConfigError(r.where("track_miss_rate") + ": '" + k + "' is not a track id");
      }
      if (!v.is_number()) throw ConfigError(r.where("track_miss_rate") + " values must be numbers");
      d.track_miss_rate[id] = v.get<double>();
    }
  }
  r.finish();
  d.validate();
}

inline json detector_json(const stc::DetectorStub& d) {
  json t = json::object();
  for (const auto& [id, p] : d.track_miss_rate) t[std::to_string(id)] = p;
  return {{"miss_rate", d.miss_rate},
          {"jitter_sigma", d.jitter_sigma},
          {"size_bias", d.size_bias},
          {"distance_miss_boost", d.distance_miss_boost},
          {"small_area", d.small_area},
          {"seed", d.seed},
          {"track_miss_rate", t}};
}

inline void read_train(const json& j, const std::string& path, train::TrainConfig& t) {
  Reader r(j, path);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("lr", t.lr);
  r.get("seed", t.seed);
  r.get("memae_weight", t.finetune_memae_weight);
  r.finish();
  t.validate();
}

inline json train_json(const train::TrainConfig& t, bool with_weight) {
  json j{{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"seed", t.seed}};
  if (with_weight) j["memae_weight"] = t.finetune_memae_weight;
  return j;
}

inline std::string latent_string(cvae::LatentMode m) {
  switch (m) {
    case cvae::LatentMode::posterior_sample:
      return "posterior-sample";
    case cvae::LatentMode::posterior_mean:
      return "posterior-mean";
    default:
      return "prior-mean";
  }
}

}  // namespace detail

inline json to_json(const RunConfig& c) {
  json splits = json::array();
  for (const auto& s : c.dataset.splits) splits.push_back({{"name", s.name}, {"count", s.count}, {"anomalous", s.anomalous}});
  return {
      {"seed", c.seed},
      {"precision", to_string(c.precision)},
      {"jobs", c.jobs},
      {"dataset",
       {{"root", c.dataset.root},
        {"seed", c.dataset.seed},
        {"height", c.dataset.height},
        {"width", c.dataset.width},
        {"frames", c.dataset.frames},
        {"splits", splits}}},
      {"flow",
       {{"levels", c.flow.levels},
        {"iterations", c.flow.iterations},
        {"smoothness", c.flow.smoothness},
        {"max_displacement", c.flow.max_displacement}}},
      {"cube",
       {{"t_len", c.cube.spec.t_len},
        {"size", c.cube.spec.size},
        {"margin", c.cube.spec.margin},
        {"min_side", c.cube.spec.min_side},
        {"train_stride", c.cube.train_stride}}},
      {"memae", memae::to_json(c.memae)},
      {"cvae", cvae::to_json(c.cvae)},
      {"training",
       {{"memae", detail::train_json(c.training.memae, false)},
        {"cvae", detail::train_json(c.training.cvae, false)},
        {"finetune", detail::train_json(c.training.finetune, true)},
        {"finetune_enabled", c.training.finetune_enabled}}},
      {"scoring",
       {{"weights", detail::weights_json(c.scoring.weights)},
        {"boxes", hfvad::to_string(c.scoring.boxes)},
        {"flow_only", c.scoring.flow_only},
        {"latent", detail::latent_string(c.scoring.latent)},
        {"batch", c.scoring.batch}}},
      {"detector", detail::detector_json(c.detector)},
      {"association_min_iou", c.association_min_iou},
      {"conditions", c.conditions},
  };
}

/// Resolves one condition entry against the base scoring and detector settings.
inline Condition resolve_condition(const RunConfig& c, const json& j, const std::string& path) {
  Condition out;
  out.boxes = c.scoring.boxes;
  out.detector = c.detector;
  out.weights = c.scoring.weights;
  out.flow_only = c.scoring.flow_only;
  detail::Reader r(j, path);
  r.get("name", out.name);
  if (out.name.empty() || out.name.find_first_of("/\\ ") != std::string::npos)
    throw ConfigError(r.where("name") + " must be a non-empty name without spaces or slashes");
  std::string boxes = hfvad::to_string(out.boxes);
  r.get("boxes", boxes);
  out.boxes = provenance_from_string(boxes);
  r.get("flow_only", out.flow_only);
  if (const auto* w = r.sub("weights")) detail::read_weights(*w, r.child("weights"), out.weights);
  if (const auto* d = r.sub("detector")) detail::read_detector(*d, r.child("detector"), out.detector);
  r.finish();
  return out;
}

inline std::vector<Condition> resolve_conditions(const RunConfig& c) {
  std::vector<Condition> out;
  std::set<std::string> names;
  for (std::size_t i = 0; i < c.conditions.size(); ++i) {
    out.push_back(resolve_condition(c, c.conditions[i], "conditions[" + std::to_string(i) + "]"));
    if (!names.insert(out.back().name).second) throw ConfigError("duplicate condition '" + out.back().name + "'");
  }
  if (out.empty()) throw ConfigError("config lists no conditions");
  return out;
}

/// Overlays `j` onto `base`. Absent keys keep their values; unknown keys throw.
inline RunConfig parse(const json& j, RunConfig c = {}) {
  using detail::Reader;
  Reader r(j, "");
  r.get("seed", c.seed);
  std::string prec = to_string(c.precision);
  r.get("precision", prec);
  c.precision = precision_from_string(prec);
  r.get("jobs", c.jobs);
  if (const auto* d = r.sub("dataset")) {
    Reader s(*d, "dataset");
    s.get("root", c.dataset.root);
    s.get("seed", c.dataset.seed);
    s.get("height", c.dataset.height);
    s.get("width", c.dataset.width);
    s.get("frames", c.dataset.frames);
    if (const auto* sp = s.sub("splits")) {
      if (!sp->is_array()) throw ConfigError("config key 'dataset.splits' must be an array");
      c.dataset.splits.clear();
      for (std::size_t i = 0; i < sp->size(); ++i) {
        Reader e((*sp)[i], "dataset.splits[" + std::to_string(i) + "]");
        scene::SplitSpec split;
        e.get("name", split.name);
        e.get("count", split.count);
        e.get("anomalous", split.anomalous);
        e.finish();
        if (split.count < 0) throw ConfigError("split counts must be non-negative");
        c.dataset.splits.push_back(split);
      }
    }
    s.finish();
  }
  if (const auto* f = r.sub("flow")) {
    Reader s(*f, "flow");
    s.get("levels", c.flow.levels);
    s.get("iterations", c.flow.iterations);
    s.get("smoothness", c.flow.smoothness);
    s.get("max_displacement", c.flow.max_displacement);
    s.finish();
  }
  if (const auto* cu = r.sub("cube")) {
    Reader s(*cu, "cube");
    s.get("t_len", c.cube.spec.t_len);
    s.get("size", c.cube.spec.size);
    s.get("margin", c.cube.spec.margin);
    s.get("min_side", c.cube.spec.min_side);
    s.get("train_stride", c.cube.train_stride);
    s.finish();
  }
  if (const auto* m = r.sub("memae")) {
    Reader s(*m, "memae");
    s.get("in_channels", c.memae.in_channels);
    s.get("widths", c.memae.widths);
    s.get("num_slots", c.memae.num_slots);
    s.get("shrink", c.memae.shrink);
    s.get("gamma", c.memae.gamma);
    s.get("inv_temperature", c.memae.inv_temperature);
    s.get("seed", c.memae.seed);
    s.finish();
  }
  if (const auto* m = r.sub("cvae")) {
    Reader s(*m, "cvae");
    s.get("cond_channels", c.cvae.cond_channels);
    s.get("flow_channels", c.cvae.flow_channels);
    s.get("out_channels", c.cvae.out_channels);
    s.get("widths", c.cvae.widths);
    s.get("z_dim", c.cvae.z_dim);
    s.get("beta", c.cvae.beta);
    s.get("logvar_limit", c.cvae.logvar_limit);
    s.get("seed", c.cvae.seed);
    s.finish();
  }
  if (const auto* t = r.sub("training")) {
    Reader s(*t, "training");
    if (const auto* x = s.sub("memae")) detail::read_train(*x, "training.memae", c.training.memae);
    if (const auto* x = s.sub("cvae")) detail::read_train(*x, "training.cvae", c.training.cvae);
    if (const auto* x = s.sub("finetune")) detail::read_train(*x, "training.finetune", c.training.finetune);
    s.get("finetune_enabled", c.training.finetune_enabled);
    s.finish();
  }
  if (const auto* sc = r.sub("scoring")) {
    Reader s(*sc, "scoring");
    if (const auto* w = s.sub("weights")) detail::read_weights(*w, "scoring.weights", c.scoring.weights);
    std::string boxes = hfvad::to_string(c.scoring.boxes), latent = detail::latent_string(c.scoring.latent);
    s.get("boxes", boxes);
    s.get("latent", latent);
    c.scoring.boxes = provenance_from_string(boxes);
    c.scoring.latent = cvae::latent_mode_from_string(latent);
    s.get("flow_only", c.scoring.flow_only);
    s.get("batch", c.scoring.batch);
    s.finish();
  }
  if (const auto* d = r.sub("detector")) detail::read_detector(*d, "detector", c.detector);
  r.get("association_min_iou", c.association_min_iou);
  if (const auto* cs = r.sub("conditions")) {
    if (!cs->is_array()) throw ConfigError("config key 'conditions' must be an array");
    c.conditions = cs->get<std::vector<json>>();
  }
  r.finish();

  c.memae.validate();
  c.cvae.validate();
  if (c.memae.in_channels != 2 * static_cast<std::size_t>(c.cube.spec.t_len - 1))
    throw ConfigError("memae.in_channels must equal 2 * (cube.t_len - 1)");
  if (c.cvae.cond_channels != 3 * static_cast<std::size_t>(c.cube.spec.t_len) || c.cvae.flow_channels != c.memae.in_channels ||
      c.cvae.out_channels != 3)
    throw ConfigError("cvae channel counts do not match the cube layout");
  if (c.cube.spec.size != 32) throw ConfigError("cube.size must be 32 (the network input size)");
  if (c.cube.spec.t_len < 2) throw ConfigError("cube.t_len must be at least 2");
  if (c.cube.train_stride < 1) throw ConfigError("cube.train_stride must be positive");
  if (c.dataset.frames < c.cube.spec.t_len + 1) throw ConfigError("dataset.frames too short for one cube");
  if (c.flow.levels < 1 || c.flow.iterations < 1 || c.flow.smoothness <= 0)
    throw ConfigError("flow parameters must be positive");
  if (c.scoring.batch == 0) throw ConfigError("scoring.batch must be positive");
  if (c.association_min_iou < 0 || c.association_min_iou >= 1) throw ConfigError("association_min_iou must lie in [0, 1)");
  if (c.jobs == 0) throw ConfigError("jobs must be positive");
  c.scoring.weights.validate();
  c.detector.validate();
  resolve_conditions(c);
  return c;
}

/// Sets one dotted key (e.g. "training.memae.epochs") from a JSON literal or bare string.
inline json with_override(json j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' is malformed");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    if (!node->contains(part) || !(*node)[part].is_object()) (*node)[part] = json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
  return j;
}

/// Model and training seeds with the run seed mixed in; dataset generation keeps its own seed.
inline RunConfig with_run_seed(RunConfig c) {
  c.memae.seed = mix_seed(c.seed, {fnv1a("memae"), c.memae.seed});
  c.cvae.seed = mix_seed(c.seed, {fnv1a("cvae"), c.cvae.seed});
  for (auto* t : {&c.training.memae, &c.training.cvae, &c.training.finetune})
    t->seed = mix_seed(c.seed, {fnv1a("train"), t->seed});
  return c;
}

/// Hash of the settings that determine trained models and calibration.
inline std::string model_hash(const RunConfig& c) {
  auto j = to_json(c);
  for (const char* k : {"scoring", "detector", "conditions", "jobs", "association_min_iou"}) j.erase(k);
  j["scoring_latent"] = detail::latent_string(c.scoring.latent);
  return hex64(fnv1a(j.dump()));
}

}  // namespace hfvad::config
