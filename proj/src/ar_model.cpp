#include "scc/ar_model.hpp"

#include "scc/kernels.hpp"

#include <algorithm>
#include <numeric>

namespace scc {

ARModel::ARModel(const ArchitectureSpec& spec, Rng& init_rng)
    : obs_dim_(spec.obs_dim), encoder_(spec.ar_encoder, init_rng, "ar.encoder") {
  predictor_ = make_linear(spec.feature_dim(), spec.obs_dim, init_rng, "ar.predictor");
}

void ARModel::freeze() {
  frozen_ = true;
  for (Tensor& p : parameters()) p.set_requires_grad(false);
}

Tensor ARModel::encode(const Tensor& seq, ForwardContext ctx) const {
  if (seq.rows() < 1) throw ContractError("encode: empty sequence");
  if (seq.cols() != obs_dim_) {
    throw DimensionError("encode: observation width " + std::to_string(seq.cols()) +
                         " does not match model width " + std::to_string(obs_dim_));
  }
  if (frozen_) ctx.training = false;
  return encoder_.forward(seq, ctx);
}

Matrix ARModel::encode(const Matrix& seq) const { return encode(Tensor::constant(seq)).value(); }

Matrix ARModel::predict_next(const Matrix& h_prev) const {
  return linear_forward(Tensor::constant(h_prev), predictor_).value();
}

Matrix ARModel::predict_all(const Matrix& features) const {
  Matrix shifted = Matrix::Zero(features.rows(), features.cols());
  if (features.rows() > 1) shifted.bottomRows(features.rows() - 1) = features.topRows(features.rows() - 1);
  return predict_next(shifted);
}

std::pair<Matrix, SurprisalTrace> ARModel::features_and_surprisal(const Matrix& seq) const {
  Matrix features = encode(seq);
  const Matrix pred = predict_all(features);
  SurprisalTrace trace(static_cast<std::size_t>(seq.rows()));
  for (Index t = 0; t < seq.rows(); ++t) {
    trace[static_cast<std::size_t>(t)] = kernels::half_squared_error(seq.row(t), pred.row(t));
  }
  return {std::move(features), std::move(trace)};
}

SurprisalTrace ARModel::surprisal_trace(const Matrix& seq) const {
  return features_and_surprisal(seq).second;
}

std::vector<Tensor> ARModel::parameters() const {
  std::vector<Tensor> p = encoder_.parameters();
  p.push_back(predictor_.weight);
  p.push_back(predictor_.bias);
  return p;
}

double surprisal(std::span<const double> x, std::span<const double> x_hat) {
  if (x.size() != x_hat.size()) {
    throw DimensionError("surprisal: observation has " + std::to_string(x.size()) + " entries, prediction " +
                         std::to_string(x_hat.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (x[i] - x_hat[i]) * (x[i] - x_hat[i]);
  return 0.5 * s;
}

double surprisal(const Eigen::RowVectorXd& x, const Eigen::RowVectorXd& x_hat) {
  if (x.size() != x_hat.size()) throw DimensionError("surprisal: dimension mismatch");
  return kernels::half_squared_error(x, x_hat);
}

std::vector<double> train_ar(ARModel& model, std::span<const Matrix> corpus, const ARTrainOptions& options,
                             Rng& rng) {
  if (model.frozen()) throw ContractError("train_ar: model is frozen");
  std::vector<double> history;
  if (options.epochs <= 0 || corpus.empty()) return history;
  const std::vector<Tensor> params = model.parameters();
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    Index frames = 0;
    for (std::size_t idx : order) {
      const Matrix& seq = corpus[idx];
      const Index steps = seq.rows();
      const Tensor features = model.encode(Tensor::constant(seq), {&rng, true});
      // Predict x_t from h_{t-1}; x_1 from the zero state.
      Tensor shifted_in = features;
      Tensor pred;
      if (steps > 1) {
        std::vector<Index> rows(static_cast<std::size_t>(steps - 1));
        std::iota(rows.begin(), rows.end(), Index{0});
        const Tensor prev = gather_rows(features, rows);
        const Tensor zero = Tensor::constant(Matrix::Zero(1, features.cols()));
        std::vector<Index> first{0};
        std::vector<Index> rest(rows.size());
        std::iota(rest.begin(), rest.end(), Index{1});
        shifted_in = merge_rows(zero, first, prev, rest, steps);
      } else {
        shifted_in = Tensor::constant(Matrix::Zero(1, features.cols()));
      }
      pred = linear_forward(shifted_in, model.predictor());
      const Tensor err = sub(pred, Tensor::constant(seq));
      const Tensor frame_loss = scale(sum(square(err)), 0.5);
      loss_sum += frame_loss.item();
      frames += steps;
      const Tensor loss = scale(frame_loss, 1.0 / static_cast<double>(steps));
      backward(loss);
      if (options.clip_norm > 0.0) clip_grad_norm(params, options.clip_norm);
      sgd_step(params, options.lr);
    }
    history.push_back(loss_sum / static_cast<double>(frames));
  }
  return history;
}

}  // namespace scc
