#pragma once

// Autoregressive observation model: a causal encoder producing features h_t
// and a linear predictor of x_t from h_{t-1}. Its prediction error under a
// unit-variance Gaussian gives the per-timestep surprisal.

#include "scc/layers.hpp"

#include <span>
#include <vector>

namespace scc {

using SurprisalTrace = std::vector<double>;

class ARModel {
 public:
  ARModel() = default;
  ARModel(const ArchitectureSpec& spec, Rng& init_rng);

  Index obs_dim() const { return obs_dim_; }
  Index feature_dim() const { return predictor_.weight.rows(); }
  bool frozen() const { return frozen_; }
  void freeze();

  /// Causal features [T x F]. Tracks gradients only when training and not frozen.
  Tensor encode(const Tensor& seq, ForwardContext ctx = {}) const;
  Matrix encode(const Matrix& seq) const;
  /// Prediction of the next observation from the previous feature row.
  Matrix predict_next(const Matrix& h_prev) const;
  /// Predictions for every step: row t uses h_{t-1}, row 0 the zero state.
  Matrix predict_all(const Matrix& features) const;

  SurprisalTrace surprisal_trace(const Matrix& seq) const;
  /// Features and surprisal from one encoder pass.
  std::pair<Matrix, SurprisalTrace> features_and_surprisal(const Matrix& seq) const;

  std::vector<Tensor> parameters() const;
  const Stack& encoder() const { return encoder_; }
  const LinearParams& predictor() const { return predictor_; }

 private:
  Index obs_dim_ = 0;
  Stack encoder_;
  LinearParams predictor_;
  bool frozen_ = false;
};

/// Half squared prediction error.
double surprisal(std::span<const double> x, std::span<const double> x_hat);
double surprisal(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& x_hat);

struct ARTrainOptions {
  int epochs = 10;
  double lr = 0.05;
  double clip_norm = 5.0;
};

/// SGD (one sequence per step) on the mean per-frame squared prediction
/// error. Returns the per-epoch mean of 0.5 * ||x_t - x_hat_t||^2.
std::vector<double> train_ar(ARModel& model, std::span<const Matrix> corpus,
                             const ARTrainOptions& options, Rng& rng);

}  // namespace scc
