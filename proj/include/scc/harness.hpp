#pragma once

// Experiment plumbing: JSON configs, checkpoints, multi-seed drivers for the
// ablation grid and the sweeps, and CSV / Markdown / plot-data reports.

#include "scc/cond_net.hpp"
#include "scc/synth.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace scc {

struct ExperimentConfig {
  std::string preset = "desk";
  ControllerKind controller = ControllerKind::surprisal;  // surprisal, random or learned
  bool use_ar_features = true;
  ExecMode train_mode = ExecMode::stochastic;
  ExecMode test_mode = ExecMode::stochastic;
  double mu = 0.5;
  double sigma2 = 0.04;
  double lambda = 0.001;
  int seeds = 5;
  int epochs = 50;
  int validation_period = 1;
  int beam_width = 10;
  double lr = 0.05;
  /// Per-epoch multiplier on lr.
  double lr_decay = 1.0;
  double clip_norm = 5.0;
  double ar_lr = 0.05;
  int ar_epochs = 5;
  double controller_lr = 0.1;
  double p_random = 0.5;
  /// Dataset file; when empty the dataset is generated from `data`.
  std::string dataset;
  GenParams data;
  /// AR checkpoint; when empty the AR model is trained on the unlabeled split.
  std::string ar_checkpoint;
  std::string out_dir = "out";
  std::uint64_t master_seed = 1;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Throws ConfigError naming the offending field.
void validate(const ExperimentConfig& config);
void to_json(nlohmann::json& j, const ExperimentConfig& c);
/// Unknown fields are rejected.
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Checkpoints

struct NamedArray {
  std::string name;
  Matrix value;
  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  /// "conditional" or "ar".
  std::string kind = "conditional";
  nlohmann::json config;
  ControllerKind controller = ControllerKind::surprisal;
  SurprisalController surprisal;
  double p_random = 0.5;
  int epoch = 0;
  std::optional<double> validation_per;
  std::vector<NamedArray> arrays;

  bool operator==(const Checkpoint&) const = default;
};

constexpr std::uint32_t kCheckpointFormatVersion = 1;

/// Layout: magic "SCCCKPT1", u32 version, u32 header length, header JSON
/// (everything except the array data, with each array's name and shape),
/// then the arrays as row-major little-endian f64 in header order.
std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const ConditionalModel& model, const ExperimentConfig& config, int epoch,
                           std::optional<double> validation_per);
/// Copies arrays and controller state into `model`. Throws DimensionError
/// naming the first missing or mis-shaped parameter.
void apply_checkpoint(const Checkpoint& ckpt, ConditionalModel& model);

Checkpoint make_ar_checkpoint(const ARModel& ar, const ExperimentConfig& config);
void apply_ar_checkpoint(const Checkpoint& ckpt, ARModel& ar);

// ---------------------------------------------------------------------------
// Runs

/// How one model is trained. Two runs with equal keys and seed index are
/// the same run, which lets drivers share them.
struct TrainSpec {
  ControllerKind controller = ControllerKind::surprisal;
  bool use_ar_features = true;
  ExecMode mode = ExecMode::stochastic;
  double lambda = 0.001;

  std::string key() const;
};

/// How a trained model is tested.
struct EvalSpec {
  ControllerKind controller = ControllerKind::surprisal;
  ExecMode mode = ExecMode::stochastic;
  double bias_offset = 0.0;
  /// Replaces the calibrated bias before the offset is added.
  std::optional<double> bias;

  std::string key() const;
};

struct TrainedRun {
  TrainSpec spec;
  int seed = 0;
  std::shared_ptr<ConditionalModel> model;  // at the best validation checkpoint
  Checkpoint checkpoint;
  TrainHistory history;
  CalibrationResult calibration;
  double best_validation_per = 0.0;
  int best_epoch = 0;
};

struct RunMetrics {
  double test_per = 0.0;
  double test_loss = 0.0;
  double train_loss = 0.0;  // CTC loss on the training set under the test settings
  double avg_flops = 0.0;
  double mean_p_big = 0.0;
};

/// Dataset, frozen AR model, prepared inputs and a cache of trained runs.
class Workspace {
 public:
  explicit Workspace(ExperimentConfig config);

  const ExperimentConfig& config() const { return config_; }
  const Dataset& data() const { return data_; }
  const std::shared_ptr<const ARModel>& ar() const { return ar_; }
  const std::vector<double>& ar_history() const { return ar_history_; }
  const LabeledSet& split(const std::string& name, bool ar_features) const;
  const std::vector<std::vector<double>>& train_surprisal() const { return train_surprisal_; }

  /// Trains (or returns the cached) run. Thread-safe.
  std::shared_ptr<const TrainedRun> trained(const TrainSpec& spec, int seed);
  RunMetrics evaluate_run(const TrainedRun& run, const EvalSpec& eval, bool with_train_loss = false) const;

  std::size_t trainings() const;

  ExperimentConfig with_spec(const TrainSpec& spec) const;

 private:
  std::shared_ptr<const TrainedRun> train_new(const TrainSpec& spec, int seed) const;

  ExperimentConfig config_;
  Dataset data_;
  std::shared_ptr<const ARModel> ar_;
  std::vector<double> ar_history_;
  std::vector<std::vector<double>> train_surprisal_;
  std::map<std::string, LabeledSet> splits_;
  mutable std::mutex mutex_;
  std::map<std::pair<std::string, int>, std::shared_ptr<const TrainedRun>> cache_;
  std::size_t trainings_ = 0;
};

/// Loads or generates the dataset named by the config.
Dataset load_or_generate(const ExperimentConfig& config);
/// Loads the AR checkpoint named by the config, or trains one.
std::shared_ptr<ARModel> load_or_train_ar(const ExperimentConfig& config, const Dataset& data,
                                          std::vector<double>* history = nullptr);

/// One trained model evaluated under the config's own test settings.
struct SingleResult {
  std::shared_ptr<const TrainedRun> run;
  RunMetrics metrics;
};
SingleResult run_single(Workspace& ws, const ExperimentConfig& config, int seed);

// ---------------------------------------------------------------------------
// Reports

struct ReportCell {
  std::string name;
  bool use_ar_features = true;
  std::string train_controller;
  std::string test_controller;
  std::string train_mode;
  std::string test_mode;
  /// Sweep coordinate (bias offset or lambda); absent for grid cells.
  std::optional<double> x;
  double per_mean = 0.0;
  std::optional<double> per_std;  // absent with fewer than two seeds
  double flops = 0.0;
  std::optional<double> train_loss;  // only measured by the determinism grid
  double test_loss = 0.0;
  double mean_p_big = 0.0;
  bool pareto = false;
  std::vector<int> seeds;
  std::string config;  // compact JSON of the config used

  bool operator==(const ReportCell&) const = default;
};

struct RunReport {
  std::string title;
  std::vector<ReportCell> cells;
  std::size_t trainings = 0;
  std::size_t evaluations = 0;

  const ReportCell& cell(const std::string& name) const;
};

/// Marks cells not weakly dominated (<= on both PER and FLOPs, < on one).
void mark_pareto(std::vector<ReportCell>& cells);
std::vector<bool> pareto_flags(std::span<const std::pair<double, double>> per_and_flops);

struct DriverOptions {
  int jobs = 1;
};

/// AR features x surprisal in training x surprisal in testing, with random
/// gating wherever surprisal is off, plus small-only and big-only rows.
RunReport run_ablation(Workspace& ws, const DriverOptions& options = {});
/// Bias offsets on a uniform grid over [0, 4] from the mean calibrated bias,
/// plus a big-only reference row and a saturation probe.
RunReport sweep_bias(Workspace& ws, int steps, const DriverOptions& options = {});
/// The learned controller at each lambda, plus random and surprisal reference rows.
RunReport sweep_lambda(Workspace& ws, bool include_zero, const DriverOptions& options = {});
/// Two trainings per seed (stochastic / deterministic), each tested both ways.
RunReport compare_determinism(Workspace& ws, const DriverOptions& options = {});

std::vector<double> lambda_grid();

std::string report_csv(const RunReport& report);
RunReport parse_report_csv(const std::string& text);
std::string report_markdown(const RunReport& report);

/// Writes <stem>.csv and <stem>.md, and for sweeps <stem>_<series>.dat
/// plot-data files with an "x y err" header. Returns the files written.
std::vector<std::filesystem::path> emit_report(const RunReport& report, const std::filesystem::path& out_dir,
                                               const std::string& stem);

/// Runs `count` independent tasks on up to `jobs` threads.
void parallel_for(std::size_t count, int jobs, const std::function<void(std::size_t)>& task);

}  // namespace scc
