// Command-line front end: data generation, AR training, calibration, single
// runs and the experiment drivers. Exit codes: 0 ok, 2 bad config, 3 failure.

#include "scc/harness.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace scc;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  int jobs = 1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON experiment config");
  app->add_option("--seed", c.seed, "master seed (overrides the config)");
  app->add_option("--out", c.out, "output directory (overrides the config)");
  app->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
  if (c.seed) cfg.master_seed = *c.seed;
  if (!c.out.empty()) cfg.out_dir = c.out;
  validate(cfg);
  return cfg;
}

fs::path out_dir(const ExperimentConfig& cfg) {
  fs::path dir(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
  f << j.dump(2) << '\n';
}

nlohmann::json metrics_json(const RunMetrics& m) {
  return {{"test_per", m.test_per}, {"test_loss", m.test_loss}, {"avg_flops", m.avg_flops},
          {"mean_p_big", m.mean_p_big}};
}

void print_written(const std::vector<fs::path>& files) {
  for (const fs::path& f : files) std::printf("wrote %s\n", f.string().c_str());
}

int cmd_gen_data(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  if (c.seed) cfg.data.seed = *c.seed;
  const Dataset ds = generate_dataset(cfg.data);
  const fs::path path = out_dir(cfg) / "dataset.bin";
  save_dataset(ds, path);
  std::printf("wrote %s (%zu unlabeled, %zu train, %zu validation, %zu test)\n", path.string().c_str(),
              ds.unlabeled.size(), ds.train.size(), ds.validation.size(), ds.test.size());
  return 0;
}

int cmd_train_ar(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  cfg.ar_checkpoint.clear();
  const Dataset ds = load_or_generate(cfg);
  std::vector<double> history;
  auto ar = load_or_train_ar(cfg, ds, &history);
  for (std::size_t e = 0; e < history.size(); ++e) std::printf("epoch %zu  surprisal %.6f\n", e + 1, history[e]);
  const fs::path path = out_dir(cfg) / "ar.ckpt";
  save_checkpoint(make_ar_checkpoint(*ar, cfg), path);
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

int cmd_calibrate(const Common& c, int seed_index) {
  const ExperimentConfig cfg = resolve(c);
  Workspace ws(cfg);
  Rng rng = make_rng(cfg.master_seed, {tag("calibrate"), static_cast<std::uint64_t>(seed_index)});
  const CalibrationResult cal =
      calibrate(ws.train_surprisal(), {cfg.mu, cfg.sigma2}, {cfg.controller_lr}, rng);
  std::vector<double> p;
  for (const auto& seq : ws.train_surprisal()) {
    for (double s : seq) p.push_back(cal.controller.p_big(s));
  }
  double mean = 0.0;
  for (double v : p) mean += v;
  mean /= static_cast<double>(p.size());
  double var = 0.0;
  for (double v : p) var += (v - mean) * (v - mean);
  var /= static_cast<double>(p.size() - 1);
  for (const std::string& w : cal.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  const nlohmann::json j = {{"w", cal.controller.w},     {"b", cal.controller.b}, {"steps", cal.steps},
                            {"final_loss", cal.final_loss}, {"mean_p_big", mean},  {"var_p_big", var}};
  std::printf("w %.6f  b %.6f  mean p_big %.4f  var p_big %.4f\n", cal.controller.w, cal.controller.b, mean, var);
  const fs::path path = out_dir(cfg) / "controller.json";
  write_json(path, j);
  std::printf("wrote %s\n", path.string().c_str());
  return 0;
}

int cmd_train(const Common& c, int seed_index) {
  const ExperimentConfig cfg = resolve(c);
  Workspace ws(cfg);
  const SingleResult r = run_single(ws, cfg, seed_index);
  const fs::path dir = out_dir(cfg);
  const fs::path ckpt = dir / (to_string(cfg.controller) + "_seed" + std::to_string(seed_index) + ".ckpt");
  save_checkpoint(r.run->checkpoint, ckpt);
  nlohmann::json j = metrics_json(r.metrics);
  j["best_epoch"] = r.run->best_epoch;
  j["best_validation_per"] = r.run->best_validation_per;
  j["train_loss"] = r.run->history.train_loss;
  write_json(dir / (to_string(cfg.controller) + "_seed" + std::to_string(seed_index) + ".json"), j);
  std::printf("best epoch %d  validation PER %.2f  test PER %.2f  FLOPs/step %.1f\n", r.run->best_epoch,
              r.run->best_validation_per, r.metrics.test_per, r.metrics.avg_flops);
  std::printf("wrote %s\n", ckpt.string().c_str());
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint) {
  const ExperimentConfig cfg = resolve(c);
  if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  if (!fs::exists(checkpoint)) throw ConfigError("checkpoint '" + checkpoint + "' does not exist");
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const ExperimentConfig trained = ckpt.config.get<ExperimentConfig>();
  Workspace ws(cfg);
  Rng scratch(0);
  ConditionalModel model(preset(cfg.preset), ws.ar(), trained.use_ar_features, scratch);
  apply_checkpoint(ckpt, model);
  Rng rng = make_rng(cfg.master_seed, {tag("cli-eval")});
  const EvalResult r = evaluate(model, ws.split("test", trained.use_ar_features), cfg.test_mode, cfg.beam_width, rng);
  const RunMetrics m{r.per, r.loss, 0.0, r.avg_flops, r.mean_p_big};
  std::printf("test PER %.2f  loss %.4f  FLOPs/step %.1f  mean p_big %.4f\n", m.test_per, m.test_loss, m.avg_flops,
              m.mean_p_big);
  write_json(out_dir(cfg) / "eval.json", metrics_json(m));
  return 0;
}

int emit(const RunReport& report, const ExperimentConfig& cfg, const std::string& stem) {
  std::fputs(report_markdown(report).c_str(), stdout);
  print_written(emit_report(report, out_dir(cfg), stem));
  return 0;
}

int cmd_report(const Common& c, const std::string& input) {
  if (input.empty()) throw ConfigError("report needs --input");
  std::ifstream f(input);
  if (!f) throw ConfigError("cannot open report '" + input + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  const RunReport report = parse_report_csv(ss.str());
  std::fputs(report_markdown(report).c_str(), stdout);
  if (!c.out.empty()) {
    ExperimentConfig cfg;
    cfg.out_dir = c.out;
    print_written(emit_report(report, out_dir(cfg), fs::path(input).stem().string()));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Surprisal-gated conditional computation experiments"};
  app.require_subcommand(1);

  Common common;
  int seed_index = 0;
  int steps = 9;
  bool include_zero = false;
  std::string checkpoint, input;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  auto* ar = app.add_subcommand("train-ar", "train the autoregressive model");
  auto* cal = app.add_subcommand("calibrate", "fit the surprisal controller");
  auto* tr = app.add_subcommand("train", "train one model and keep its best checkpoint");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  auto* abl = app.add_subcommand("ablate", "AR features x surprisal train x surprisal test grid");
  auto* bias = app.add_subcommand("sweep-bias", "test-time controller bias sweep");
  auto* lam = app.add_subcommand("sweep-lambda", "learned gate regularizer sweep");
  auto* det = app.add_subcommand("determinism", "stochastic vs deterministic train and test");
  auto* rep = app.add_subcommand("report", "render a CSV report as Markdown");
  for (CLI::App* sub : {gen, ar, cal, tr, ev, abl, bias, lam, det, rep}) add_common(sub, common);
  for (CLI::App* sub : {cal, tr}) sub->add_option("--run", seed_index, "seed index of the run")->check(CLI::NonNegativeNumber);
  ev->add_option("--checkpoint", checkpoint, "checkpoint written by train");
  bias->add_option("--steps", steps, "number of bias offsets")->check(CLI::Range(2, 1000));
  lam->add_flag("--include-zero", include_zero, "also train with lambda = 0");
  rep->add_option("--input", input, "CSV report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const DriverOptions opts{common.jobs};
    if (*gen) return cmd_gen_data(common);
    if (*ar) return cmd_train_ar(common);
    if (*cal) return cmd_calibrate(common, seed_index);
    if (*tr) return cmd_train(common, seed_index);
    if (*ev) return cmd_eval(common, checkpoint);
    if (*rep) return cmd_report(common, input);
    const ExperimentConfig cfg = resolve(common);
    Workspace ws(cfg);
    if (*abl) return emit(run_ablation(ws, opts), cfg, "ablation");
    if (*bias) return emit(sweep_bias(ws, steps, opts), cfg, "bias_sweep");
    if (*lam) return emit(sweep_lambda(ws, include_zero, opts), cfg, "lambda_sweep");
    if (*det) return emit(compare_determinism(ws, opts), cfg, "determinism");
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
