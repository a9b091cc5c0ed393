#pragma once

// The conditional model: a frozen autoregressive model, an optional pre-net,
// a per-timestep choice between a small and a big expert, an optional
// bidirectional post-net, and CTC outputs. FLOPs are measured from the
// routing decisions actually taken.

#include "scc/ar_model.hpp"
#include "scc/controllers.hpp"
#include "scc/ctc.hpp"

#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace scc {

enum class ControllerKind { surprisal, random, learned, fixed_small, fixed_big };

std::string to_string(ControllerKind kind);
ControllerKind controller_kind_from_string(const std::string& s);

/// Per-timestep cost of each component. `fixed()` is paid at every step, the
/// expert cost only for the expert that ran.
struct FlopCosts {
  std::int64_t ar = 0;  // zero when the AR model is not consulted
  std::int64_t pre_net = 0;
  std::int64_t post_net = 0;
  std::int64_t controller = 0;
  std::int64_t small = 0;
  std::int64_t big = 0;

  std::int64_t fixed() const { return ar + pre_net + post_net + controller; }
  std::int64_t branch(Branch b) const { return b == Branch::big ? big : small; }
};

class FlopMeter {
 public:
  FlopMeter() = default;
  explicit FlopMeter(FlopCosts costs) : costs_(costs) {}

  void record(Branch b);
  void record(const GateTrace& trace);
  void merge(const FlopMeter& other);

  std::int64_t total() const { return total_; }
  std::int64_t timesteps() const { return timesteps_; }
  std::int64_t big_steps() const { return big_steps_; }
  double average() const;
  const FlopCosts& costs() const { return costs_; }

 private:
  FlopCosts costs_;
  std::int64_t total_ = 0;
  std::int64_t timesteps_ = 0;
  std::int64_t big_steps_ = 0;
};

/// Sum of totals over sum of timesteps. Throws ContractError when empty.
double flop_report(std::span<const FlopMeter> meters);

/// Model inputs that depend only on the observations and the frozen AR model.
struct PreparedSequence {
  Matrix routing_input;  // AR features or raw observations
  std::vector<double> surprisal;  // empty when no AR model is attached
};

struct ForwardResult {
  Tensor log_probs;  // [T x label_count]
  GateTrace trace;
  FlopMeter flops;
  Tensor decisions;  // learned controller only: [T x 1] hard decisions
};

class ConditionalModel {
 public:
  /// `spec` describes the model with AR features; when `use_ar_features` is
  /// false the first trainable layer is rebuilt to read raw observations.
  /// `ar` may be null only if it is never needed.
  ConditionalModel(const ArchitectureSpec& spec, std::shared_ptr<const ARModel> ar, bool use_ar_features,
                   Rng& init_rng);

  const ArchitectureSpec& spec() const { return spec_; }
  bool use_ar_features() const { return use_ar_features_; }
  const std::shared_ptr<const ARModel>& ar() const { return ar_; }

  ControllerKind controller() const { return kind_; }
  void use_surprisal(SurprisalController ctrl);
  void use_random(double p);
  /// Builds a fresh gate (hidden width from the spec) on first use.
  void use_learned(Rng& init_rng);
  void use_fixed(Branch b);
  /// Switches the kind without touching stored controller parameters.
  void set_controller_kind(ControllerKind kind);

  SurprisalController& surprisal_controller() { return surprisal_; }
  const SurprisalController& surprisal_controller() const { return surprisal_; }
  double random_p() const { return p_random_; }
  const std::optional<LearnedGate>& learned_gate() const { return gate_; }

  PreparedSequence prepare(const Matrix& observations) const;
  std::vector<PreparedSequence> prepare_all(std::span<const Matrix> observations) const;

  /// Dropout is active only when `training`. Gradients reach the pre-net and
  /// post-net through whichever expert ran at each step.
  ForwardResult forward(const PreparedSequence& seq, ExecMode mode, Rng& rng, bool training = false) const;

  FlopCosts flop_costs() const;
  bool ar_consulted() const;

  /// Trainable tensors: pre-net, experts, post-net, and the gate when the
  /// learned controller is active.
  std::vector<Tensor> parameters() const;
  /// Every tensor that a checkpoint stores, including an inactive gate.
  std::vector<Tensor> all_parameters() const;

  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& values);

 private:
  ArchitectureSpec spec_;
  std::shared_ptr<const ARModel> ar_;
  bool use_ar_features_ = true;
  std::optional<Stack> pre_;
  Stack small_;
  Stack big_;
  std::optional<Stack> post_;
  bool final_log_softmax_ = true;

  ControllerKind kind_ = ControllerKind::random;
  SurprisalController surprisal_;
  double p_random_ = 0.5;
  std::optional<LearnedGate> gate_;
};

struct TrainOptions {
  int epochs = 50;
  double lr = 0.05;
  /// Epoch e (from 1) uses lr * lr_decay^(e - 1).
  double lr_decay = 1.0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 5.0;
  ExecMode mode = ExecMode::stochastic;
  double lambda = 0.001;  // learned controller only
  int validation_period = 1;
  int beam_width = 10;
  /// Called after each validation with (epoch, validation PER).
  std::function<void(int, double)> on_validation;
};

struct TrainHistory {
  std::vector<double> train_loss;  // per epoch, mean per sequence
  std::vector<std::pair<int, double>> validation_per;
};

struct LabeledSet {
  std::vector<PreparedSequence> inputs;
  std::vector<LabelSeq> labels;

  std::size_t size() const { return inputs.size(); }
};

/// Per-sequence SGD on CTC loss (plus the gate regularizer for the learned
/// controller). Throws NonFiniteError naming the sequence on a non-finite
/// loss.
TrainHistory train(ConditionalModel& model, const LabeledSet& train_set, const LabeledSet* validation,
                   const TrainOptions& options, Rng& rng);

struct EvalResult {
  double per = 0.0;
  double loss = 0.0;  // mean CTC loss per sequence
  double avg_flops = 0.0;
  double mean_p_big = 0.0;
  double big_fraction = 0.0;
  FlopMeter flops;
};

/// A beam width of zero skips decoding; `per` is then NaN.
EvalResult evaluate(const ConditionalModel& model, const LabeledSet& data, ExecMode mode, int beam_width,
                    Rng& rng);

}  // namespace scc
