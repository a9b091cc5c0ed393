#pragma once

// Connectionist temporal classification: loss, decoders, and error rates.
// Log-probability matrices are [T x (n + 1)] with the blank in the last column.

#include "scc/kernels.hpp"
#include "scc/tensor.hpp"

#include <span>
#include <vector>

namespace scc {

using Label = int;
using LabelSeq = std::vector<Label>;

struct DecodeResult {
  LabelSeq labels;
  double score = 0.0;  // log-probability, <= 0
};

/// Frames needed to emit `labels`: one per label plus a blank between
/// repeated neighbours.
Index ctc_min_frames(std::span<const Label> labels);

/// Blank-interleaved label sequence: b l1 b l2 ... lk b.
std::vector<Label> ctc_extend(std::span<const Label> labels, Label blank);

/// Log-domain forward variables alpha[t][s] over the extended sequence.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> ctc_log_alpha(
    const Eigen::MatrixBase<Derived>& log_probs, std::span<const Label> ext) {
  using Scalar = typename Derived::Scalar;
  const Index steps = log_probs.rows();
  const Index s_len = static_cast<Index>(ext.size());
  const Label blank = static_cast<Label>(log_probs.cols() - 1);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> alpha =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Constant(steps, s_len,
                                                                      kernels::neg_inf<Scalar>());
  alpha(0, 0) = log_probs(0, ext[0]);
  if (s_len > 1) alpha(0, 1) = log_probs(0, ext[1]);
  for (Index t = 1; t < steps; ++t) {
    for (Index s = 0; s < s_len; ++s) {
      Scalar acc = alpha(t - 1, s);
      if (s >= 1) acc = kernels::log_add_exp(acc, alpha(t - 1, s - 1));
      if (s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]) {
        acc = kernels::log_add_exp(acc, alpha(t - 1, s - 2));
      }
      if (acc != kernels::neg_inf<Scalar>()) alpha(t, s) = acc + log_probs(t, ext[s]);
    }
  }
  return alpha;
}

/// Log-domain backward variables beta[t][s], including the emission at t.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> ctc_log_beta(
    const Eigen::MatrixBase<Derived>& log_probs, std::span<const Label> ext) {
  using Scalar = typename Derived::Scalar;
  const Index steps = log_probs.rows();
  const Index s_len = static_cast<Index>(ext.size());
  const Label blank = static_cast<Label>(log_probs.cols() - 1);
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> beta =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Constant(steps, s_len,
                                                                      kernels::neg_inf<Scalar>());
  beta(steps - 1, s_len - 1) = log_probs(steps - 1, ext[s_len - 1]);
  if (s_len > 1) beta(steps - 1, s_len - 2) = log_probs(steps - 1, ext[s_len - 2]);
  for (Index t = steps - 2; t >= 0; --t) {
    for (Index s = 0; s < s_len; ++s) {
      Scalar acc = beta(t + 1, s);
      if (s + 1 < s_len) acc = kernels::log_add_exp(acc, beta(t + 1, s + 1));
      if (s + 2 < s_len && ext[s] != blank && ext[s] != ext[s + 2]) {
        acc = kernels::log_add_exp(acc, beta(t + 1, s + 2));
      }
      if (acc != kernels::neg_inf<Scalar>()) beta(t, s) = acc + log_probs(t, ext[s]);
    }
  }
  return beta;
}

/// log p(labels | log_probs) by the forward recursion. Throws
/// InfeasibleAlignment when T is too short.
double ctc_log_likelihood(const Matrix& log_probs, std::span<const Label> labels);

/// -log p(labels | log_probs) as a differentiable 1 x 1 tensor. The gradient
/// is taken with respect to the log-probabilities themselves.
Tensor ctc_loss(const Tensor& log_probs, std::span<const Label> labels);

/// Remove repeats, then blanks.
LabelSeq collapse(std::span<const Label> path, Label blank);

DecodeResult greedy_decode(const Matrix& log_probs);
/// CTC prefix beam search keeping (blank, non-blank) log-probabilities per
/// prefix; no language model. Returns the most probable collapsed prefix.
DecodeResult beam_search_decode(const Matrix& log_probs, int width);

std::size_t edit_distance(std::span<const Label> a, std::span<const Label> b);

/// Corpus-level error rate in percent: 100 * sum(distance) / sum(|ref|).
double per(std::span<const LabelSeq> hyps, std::span<const LabelSeq> refs);

}  // namespace scc
