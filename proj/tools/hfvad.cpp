// Command-line driver: one subcommand per pipeline stage, plus run-all.

#include <CLI11.hpp>
#include <cstdlib>
#include <iostream>

#include "hfvad/pipeline.hpp"

namespace {

using namespace hfvad;
namespace fs = std::filesystem;
using nlohmann::json;

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kMissing = 3, kNumeric = 4 };

struct Options {
  std::string run = "run";
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<unsigned> jobs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> precision;
  bool quiet = false;
};

struct ScoreOptions {
  std::string weights;  // "a,b": w_r = w_rp = a, w_p = w_pp = b
  std::string name;
  std::string boxes;
  bool flow_only = false;
};

fs::path run_dir(const std::string& run) {
  fs::path p(run);
  if (p.is_relative())
    if (const char* root = std::getenv("HFVAD_RUN_ROOT"); root && *root) p = fs::path(root) / p;
  return p;
}

json read_json_file(const fs::path& p) {
  try {
    return json::parse(read_file(p));
  } catch (const json::exception& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

/// Stored config of the run (or defaults), then the config file, then --set, then flags.
config::RunConfig resolve_config(const Options& o, const fs::path& dir) {
  config::RunConfig c;
  if (fs::exists(dir / "config.json")) c = config::parse(read_json_file(dir / "config.json"));
  if (!o.config_file.empty()) c = config::parse(read_json_file(o.config_file), c);
  for (const auto& s : o.overrides) c = config::parse(config::with_override(json::object(), s), c);
  json flags = json::object();
  if (o.jobs) flags["jobs"] = *o.jobs;
  if (o.seed) flags["seed"] = *o.seed;
  if (o.precision) flags["precision"] = *o.precision;
  return config::parse(flags, c);
}

std::string weight_label(double v) {
  std::ostringstream ss;
  ss << v;
  return ss.str();
}

/// Adds the condition described by the score flags to the config; returns its name.
std::string add_score_condition(config::RunConfig& c, const ScoreOptions& s) {
  json cond = json::object();
  std::string name = s.name;
  if (!s.weights.empty()) {
    const auto comma = s.weights.find(',');
    double a = 0, b = 0;
    try {
      if (comma == std::string::npos) throw std::invalid_argument(s.weights);
      std::size_t ua = 0, ub = 0;
      a = std::stod(s.weights.substr(0, comma), &ua);
      b = std::stod(s.weights.substr(comma + 1), &ub);
      if (ua != comma || ub != s.weights.size() - comma - 1) throw std::invalid_argument(s.weights);
    } catch (const std::exception&) {
      throw ConfigError("--weights expects two numbers 'a,b', got '" + s.weights + "'");
    }
    cond["weights"] = {{"w_r", a}, {"w_rp", a}, {"w_p", b}, {"w_pp", b}};
    if (name.empty()) name = "w" + weight_label(a) + "-" + weight_label(b);
  }
  if (!s.boxes.empty()) {
    cond["boxes"] = s.boxes;
    if (name.empty()) name = s.boxes == "detected" ? "detected" : "gt";
  }
  if (s.flow_only) {
    cond["flow_only"] = true;
    if (name.empty()) name = "flow-only";
  }
  if (name.empty()) return {};
  if (!s.boxes.empty() && !s.weights.empty() && s.name.empty()) name = (s.boxes == "detected" ? "detected-" : "gt-") + name;
  if (s.flow_only && name.find("flow-only") == std::string::npos) name += "-flow-only";
  cond["name"] = name;
  auto j = config::to_json(c);
  auto& list = j["conditions"];
  bool replaced = false;
  for (auto& e : list)
    if (e.at("name") == name) {
      e = cond;
      replaced = true;
    }
  if (!replaced) list.push_back(cond);
  c = config::parse(j);
  return name;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"hfvad: braking-anomaly detection pipeline (flow reconstruction + flow-guided frame prediction)"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--run", o.run, "Run directory (relative paths resolve against $HFVAD_RUN_ROOT)")->capture_default_str();
  app.add_option("--config", o.config_file, "JSON config file overlaid on the run's stored config")->check(CLI::ExistingFile);
  app.add_option("--set", o.overrides, "Override one key, e.g. --set training.memae.epochs=5")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  app.add_option("--jobs", o.jobs, "Worker threads for generation and flow")->check(CLI::PositiveNumber);
  app.add_option("--seed", o.seed, "Run seed");
  app.add_option("--precision", o.precision, "float32 or float64");
  app.add_flag("-q,--quiet", o.quiet, "Suppress progress output");

  const std::vector<std::pair<const char*, const char*>> stages{
      {"gen", "Generate the synthetic driving dataset"},
      {"flow", "Estimate optical flow for every scenario"},
      {"train-flowae", "Train the memory-augmented flow autoencoder"},
      {"train-cvae", "Train the flow-conditioned frame predictor"},
      {"finetune", "Fine-tune both networks jointly (or pass checkpoints through when disabled)"},
      {"calibrate", "Compute training-set error statistics"},
      {"score", "Score the test split under each condition"},
      {"eval", "Compute frame, pixel and box metrics"},
      {"report", "Write the report bundle"},
      {"run-all", "Run every stage in order"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : stages) subs[name] = app.add_subcommand(name, help);
  ScoreOptions so;
  auto* score = subs.at("score");
  score->add_option("--weights", so.weights, "Score one weighting 'a,b' (w_r = w_rp = a, w_p = w_pp = b)");
  score->add_option("--name", so.name, "Name of the condition created by the score flags");
  score->add_option("--boxes", so.boxes, "Box source for the new condition")->check(CLI::IsMember({"ground-truth", "detected"}));
  score->add_flag("--flow-only", so.flow_only, "Drop the prediction terms for the new condition");
  bool print_defaults = false;
  auto* cfg_cmd = app.add_subcommand("config", "Print the resolved configuration");
  cfg_cmd->add_flag("--defaults", print_defaults, "Print the built-in defaults instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  if (o.quiet) pipeline::log_stream() = nullptr;
  const auto dir = run_dir(o.run);

  if (cfg_cmd->parsed()) {
    const auto c = print_defaults ? config::RunConfig{} : resolve_config(o, dir);
    std::cout << config::to_json(c).dump(2) << "\n";
    return kOk;
  }

  auto cfg = resolve_config(o, dir);
  std::optional<std::string> new_condition;
  if (score->parsed()) {
    const auto n = add_score_condition(cfg, so);
    if (!n.empty()) new_condition = n;
  }
  const auto run = pipeline::open_run(dir, cfg);

  if (subs.at("gen")->parsed()) pipeline::stage_gen(run);
  if (subs.at("flow")->parsed()) pipeline::stage_flow(run);
  if (subs.at("train-flowae")->parsed()) pipeline::stage_train_flowae(run);
  if (subs.at("train-cvae")->parsed()) pipeline::stage_train_cvae(run);
  if (subs.at("finetune")->parsed()) pipeline::stage_finetune(run);
  if (subs.at("calibrate")->parsed()) pipeline::stage_calibrate(run);
  if (score->parsed()) {
    std::vector<config::Condition> only;
    if (new_condition)
      for (const auto& c : config::resolve_conditions(run.cfg))
        if (c.name == *new_condition) only.push_back(c);
    pipeline::stage_score(run, only);
  }
  if (subs.at("eval")->parsed()) pipeline::stage_eval(run);
  if (subs.at("report")->parsed()) pipeline::stage_report(run);
  if (subs.at("run-all")->parsed()) pipeline::run_all(run);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const hfvad::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const hfvad::MissingPrerequisite& e) {
    std::cerr << "missing prerequisite: " << e.what() << "\n";
    return kMissing;
  } catch (const hfvad::NumericError& e) {
    std::cerr << "numeric divergence: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
