#include "scc/controllers.hpp"

#include "scc/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace scc {

using detail::Node;

std::string to_string(ExecMode mode) {
  return mode == ExecMode::stochastic ? "stochastic" : "deterministic";
}

ExecMode exec_mode_from_string(const std::string& s) {
  if (s == "stochastic") return ExecMode::stochastic;
  if (s == "deterministic") return ExecMode::deterministic;
  throw ParameterError("unknown execution mode '" + s + "'");
}

double SurprisalController::p_big(double surprisal) const { return kernels::sigmoid(w * surprisal + b); }

namespace {

void require_batch(std::size_t n) {
  if (n < 2) throw ContractError("controller_loss: need at least 2 samples, got " + std::to_string(n));
}

}  // namespace

double controller_loss(std::span<const double> p, const CalibrationTarget& target) {
  require_batch(p.size());
  const Eigen::Map<const Eigen::VectorXd> v(p.data(), static_cast<Index>(p.size()));
  const double mean = kernels::sample_mean(v);
  const double var = kernels::sample_variance(v);
  return 0.5 * (mean - target.mu) * (mean - target.mu) + 0.5 * (var - target.sigma2) * (var - target.sigma2);
}

ControllerGradient controller_loss_gradient(const SurprisalController& ctrl, std::span<const double> s,
                                            const CalibrationTarget& target) {
  require_batch(s.size());
  const auto n = static_cast<Index>(s.size());
  const Eigen::Map<const Eigen::VectorXd> sv(s.data(), n);
  const Eigen::VectorXd p = sv.unaryExpr([&](double x) { return ctrl.p_big(x); });
  const double mean = kernels::sample_mean(p);
  const double var = kernels::sample_variance(p);
  const Eigen::VectorXd dp = p.array() * (1.0 - p.array());  // dp/da
  const Eigen::VectorXd centered = p.array() - mean;

  // d mean / d theta = avg(dp * da/dtheta); d var / d theta = 2/(n-1) sum((p - mean) dp da/dtheta)
  const double dn = static_cast<double>(n);
  const double dmean_db = dp.sum() / dn;
  const double dmean_dw = dp.dot(sv) / dn;
  const double dvar_db = 2.0 / (dn - 1.0) * centered.dot(dp);
  const double dvar_dw = 2.0 / (dn - 1.0) * (centered.array() * dp.array() * sv.array()).sum();

  ControllerGradient g;
  const double em = mean - target.mu;
  const double ev = var - target.sigma2;
  g.loss = 0.5 * em * em + 0.5 * ev * ev;
  g.db = em * dmean_db + ev * dvar_db;
  g.dw = em * dmean_dw + ev * dvar_dw;
  return g;
}

CalibrationResult calibrate_from(SurprisalController start, std::span<const std::vector<double>> stream,
                                 const CalibrationTarget& target, double lr, Rng& rng) {
  if (!(target.mu > 0.0 && target.mu < 1.0)) throw ParameterError("calibrate: mu must be in (0, 1)");
  if (!(target.sigma2 >= 0.0)) throw ParameterError("calibrate: sigma2 must be non-negative");
  CalibrationResult result;
  result.controller = start;

  double count = 0.0, mean = 0.0, m2 = 0.0;
  for (const auto& seq : stream) {
    for (double x : seq) {
      count += 1.0;
      const double d = x - mean;
      mean += d / count;
      m2 += d * (x - mean);
    }
  }
  if (target.sigma2 > 0.0 && (count < 2.0 || m2 <= 0.0)) {
    result.warnings.push_back("surprisal stream has zero variance; variance target " +
                              std::to_string(target.sigma2) + " is unreachable");
  }

  std::vector<std::size_t> order(stream.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t idx : order) {
    const auto& seq = stream[idx];
    if (seq.size() < 2) continue;
    const ControllerGradient g = controller_loss_gradient(result.controller, seq, target);
    result.controller.w -= lr * g.dw;
    result.controller.b -= lr * g.db;
    result.final_loss = g.loss;
    ++result.steps;
  }
  return result;
}

CalibrationResult calibrate(std::span<const std::vector<double>> stream, const CalibrationTarget& target,
                            const CalibrationOptions& options, Rng& rng) {
  SurprisalController start;
  if (options.init == CalibrationInit::first_sequence) {
    const auto first = std::find_if(stream.begin(), stream.end(), [](const auto& s) { return !s.empty(); });
    if (first != stream.end()) {
      const Eigen::Map<const Eigen::VectorXd> v(first->data(), static_cast<Index>(first->size()));
      start.b = -kernels::sample_mean(v);
    }
  } else {
    double count = 0.0, mean = 0.0, m2 = 0.0;
    for (const auto& seq : stream) {
      for (double x : seq) {
        count += 1.0;
        const double d = x - mean;
        mean += d / count;
        m2 += d * (x - mean);
      }
    }
    const double sd = count > 1.0 ? std::sqrt(m2 / (count - 1.0)) : 0.0;
    if (sd > 0.0) {
      start.w = 1.0 / sd;
      start.b = -mean / sd;
    } else {
      start.b = -mean;
    }
  }
  return calibrate_from(start, stream, target, options.lr, rng);
}

Branch sample_branch(double p, ExecMode mode, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw ParameterError("sample_branch: probability " + std::to_string(p) + " outside [0, 1]");
  if (mode == ExecMode::deterministic) return p > 0.5 ? Branch::big : Branch::small;
  return uniform01(rng) < p ? Branch::big : Branch::small;
}

Branch random_gate(double p_fixed, Rng& rng, ExecMode mode) { return sample_branch(p_fixed, mode, rng); }

LearnedGate::LearnedGate(Index input_dim, Index hidden, Rng& init_rng)
    : hidden_(make_linear(input_dim, hidden, init_rng, "gate.hidden")),
      output_(make_linear(hidden, 1, init_rng, "gate.output")) {}

LearnedGate::LearnedGate(LinearParams hidden_layer, LinearParams output_layer)
    : hidden_(std::move(hidden_layer)), output_(std::move(output_layer)) {}

Tensor LearnedGate::logits(const Tensor& features) const {
  return linear_forward(leaky_relu(linear_forward(features, hidden_), 0.125), output_);
}

Tensor LearnedGate::forward(const Tensor& features) const { return ste_threshold(logits(features)); }

std::vector<Tensor> LearnedGate::parameters() const {
  return {hidden_.weight, hidden_.bias, output_.weight, output_.bias};
}

std::int64_t LearnedGate::flops_per_timestep() const {
  return hidden_.weight.size() + hidden_.bias.size() + output_.weight.size() + output_.bias.size();
}

Tensor ste_threshold(const Tensor& logits) {
  Matrix out = (logits.value().array() > 0.0).cast<double>();
  return make_op(std::move(out), {logits}, [](Node& n) { n.input_grad(0) += n.grad; });
}

Tensor gate_regularizer(const Tensor& decisions, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("gate_regularizer: lambda must be non-negative");
  return scale(sum(square(add_scalar(decisions, -0.5))), lambda);
}

double gate_regularizer(std::span<const double> decisions, double lambda) {
  if (!(lambda >= 0.0)) throw ParameterError("gate_regularizer: lambda must be non-negative");
  double acc = 0.0;
  for (double s : decisions) acc += (s - 0.5) * (s - 0.5);
  return lambda * acc;
}

std::size_t GateTrace::big_count() const {
  return static_cast<std::size_t>(std::count(branch.begin(), branch.end(), Branch::big));
}

double GateTrace::mean_p_big() const {
  if (p_big.empty()) return 0.0;
  return std::accumulate(p_big.begin(), p_big.end(), 0.0) / static_cast<double>(p_big.size());
}

}  // namespace scc
