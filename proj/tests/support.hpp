#pragma once

#include "scc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <vector>

namespace scc::testing {

/// Relative error between the backprop gradient and central differences,
/// ||a - n|| / max(||a||, ||n||), worst over the given parameters.
inline double gradient_error(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params, double h = 1e-6) {
  zero_grad(params);
  backward(loss_fn());
  double worst = 0.0;
  for (Tensor& p : params) {
    const Matrix analytic = p.grad();
    Matrix numeric(p.rows(), p.cols());
    for (Index i = 0; i < p.size(); ++i) {
      double& x = p.value_mut().data()[i];
      const double saved = x;
      x = saved + h;
      const double up = loss_fn().item();
      x = saved - h;
      const double down = loss_fn().item();
      x = saved;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
    worst = std::max(worst, (analytic - numeric).norm() / scale);
  }
  zero_grad(params);
  return worst;
}

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Random row-wise log-softmax matrix [T x classes].
inline Matrix random_log_probs(Index steps, Index classes, Rng& rng, double scale = 1.5) {
  return kernels::log_softmax_rows(random_matrix(steps, classes, rng, scale));
}

/// A weighted sum of the entries, so every output element gets a distinct
/// upstream gradient.
inline Tensor probe(const Tensor& y, Rng& rng) {
  return sum(mul(y, Tensor::constant(random_matrix(y.rows(), y.cols(), rng))));
}

/// Probability of every collapsed label sequence, by enumerating all
/// (n + 1)^T frame paths.
inline std::map<LabelSeq, double> path_marginals(const Matrix& lp) {
  const Index steps = lp.rows();
  const Index classes = lp.cols();
  const Label blank = static_cast<Label>(classes - 1);
  std::map<LabelSeq, double> out;
  std::vector<Label> path(static_cast<std::size_t>(steps), 0);
  while (true) {
    double logp = 0.0;
    for (Index t = 0; t < steps; ++t) logp += lp(t, path[static_cast<std::size_t>(t)]);
    out[collapse(path, blank)] += std::exp(logp);
    Index t = 0;
    while (t < steps && ++path[static_cast<std::size_t>(t)] == classes) path[static_cast<std::size_t>(t++)] = 0;
    if (t == steps) break;
  }
  return out;
}

/// Small, fast experiment used by the harness tests.
inline ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seeds = 2;
  c.epochs = 2;
  c.ar_epochs = 1;
  c.beam_width = 3;
  c.data.unlabeled_count = 40;
  c.data.train_count = 24;
  c.data.validation_count = 8;
  c.data.test_count = 8;
  c.data.max_segments = 4;
  c.data.max_segment_len = 10;
  return c;
}

}  // namespace scc::testing
