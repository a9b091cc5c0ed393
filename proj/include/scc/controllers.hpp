#pragma once

// Routing policies deciding, per timestep, between the small and the big
// expert: the two-parameter surprisal controller, a fixed-probability random
// gate, and a learned feed-forward gate trained with a straight-through
// estimator.

#include "scc/layers.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace scc {

enum class Branch : unsigned char { small = 0, big = 1 };
enum class ExecMode { stochastic, deterministic };

std::string to_string(ExecMode mode);
ExecMode exec_mode_from_string(const std::string& s);

/// p_big = sigmoid(w * surprisal + b).
struct SurprisalController {
  double w = 1.0;
  double b = 0.0;

  double p_big(double surprisal) const;
  static constexpr int parameter_count = 2;

  bool operator==(const SurprisalController&) const = default;
};

struct CalibrationTarget {
  double mu = 0.5;
  double sigma2 = 0.04;
};

/// 0.5 (mean - mu)^2 + 0.5 (var - sigma2)^2 over one batch of p_big values,
/// using the unbiased sample variance. Needs at least two samples.
double controller_loss(std::span<const double> p_samples, const CalibrationTarget& target);

struct ControllerGradient {
  double loss = 0.0;
  double dw = 0.0;
  double db = 0.0;
};
/// Loss and analytic gradient for one batch of surprisal values.
ControllerGradient controller_loss_gradient(const SurprisalController& ctrl, std::span<const double> surprisal,
                                            const CalibrationTarget& target);

struct CalibrationResult {
  SurprisalController controller;
  double final_loss = 0.0;
  std::size_t steps = 0;
  std::vector<std::string> warnings;
};

enum class CalibrationInit {
  /// w = 1, b = -mean of the first sequence's surprisal.
  first_sequence,
  /// w = 1/std, b = -mean/std over the whole stream, so the starting
  /// pre-activation has zero mean and unit variance.
  stream_standardized,
};

struct CalibrationOptions {
  double lr = 0.1;
  CalibrationInit init = CalibrationInit::stream_standardized;
};

/// One pass of SGD over the stream, one step per sequence on the loss of that
/// sequence's p_big values. The pass order is shuffled with `rng`.
/// Sequences shorter than two steps are skipped.
CalibrationResult calibrate(std::span<const std::vector<double>> stream, const CalibrationTarget& target,
                            const CalibrationOptions& options, Rng& rng);
/// Same pass starting from a given controller (no initialization).
CalibrationResult calibrate_from(SurprisalController start, std::span<const std::vector<double>> stream,
                                 const CalibrationTarget& target, double lr, Rng& rng);

/// stochastic: big with probability p; deterministic: big iff p > 0.5.
Branch sample_branch(double p, ExecMode mode, Rng& rng);
/// sample_branch with a constant probability.
Branch random_gate(double p_fixed, Rng& rng, ExecMode mode = ExecMode::stochastic);

/// Feed-forward gate: input -> hidden (leaky ReLU) -> scalar logit.
class LearnedGate {
 public:
  LearnedGate() = default;
  LearnedGate(Index input_dim, Index hidden, Rng& init_rng);
  LearnedGate(LinearParams hidden_layer, LinearParams output_layer);

  /// Logits [T x 1] for features [T x input].
  Tensor logits(const Tensor& features) const;
  /// Hard decisions s_t in {0, 1} ([T x 1]) with straight-through backward.
  Tensor forward(const Tensor& features) const;
  std::vector<Tensor> parameters() const;
  Index input_dim() const { return hidden_.weight.rows(); }
  Index hidden_dim() const { return hidden_.weight.cols(); }
  std::int64_t flops_per_timestep() const;

 private:
  LinearParams hidden_;
  LinearParams output_;
};

/// Forward: 1 where logit > 0, else 0. Backward: identity.
Tensor ste_threshold(const Tensor& logits);

/// lambda * sum_t (s_t - 0.5)^2 over a [T x 1] decision tensor.
Tensor gate_regularizer(const Tensor& decisions, double lambda);
double gate_regularizer(std::span<const double> decisions, double lambda);

/// Per-timestep routing record for one sequence.
struct GateTrace {
  std::optional<std::vector<double>> surprisal;
  std::vector<double> p_big;
  std::vector<Branch> branch;

  std::size_t size() const { return branch.size(); }
  std::size_t big_count() const;
  double mean_p_big() const;
};

}  // namespace scc
