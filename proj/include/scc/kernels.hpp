#pragma once

// Scalar-generic numeric kernels shared by the autodiff ops, the CTC code and
// the controllers. Everything here is a pure function of its arguments.

#include <Eigen/Core>

#include <cmath>
#include <limits>

namespace scc::kernels {

template <typename Scalar>
constexpr Scalar neg_inf() {
  return -std::numeric_limits<Scalar>::infinity();
}

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}

template <typename Scalar>
Scalar leaky_relu(Scalar x, Scalar alpha) {
  return x >= Scalar(0) ? x : alpha * x;
}

/// log(exp(a) + exp(b)) without overflow; -inf is the additive identity.
template <typename Scalar>
Scalar log_add_exp(Scalar a, Scalar b) {
  if (a == neg_inf<Scalar>()) return b;
  if (b == neg_inf<Scalar>()) return a;
  if (a < b) std::swap(a, b);
  return a + std::log1p(std::exp(b - a));
}

template <typename Derived>
typename Derived::Scalar log_sum_exp(const Eigen::DenseBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = v.maxCoeff();
  if (m == neg_inf<Scalar>()) return m;
  return m + std::log((v.derived().array() - m).exp().sum());
}

/// Row-wise log-softmax with the max-subtraction trick.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>
log_softmax_rows(const Eigen::MatrixBase<Derived>& x) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

/// Mean of a sample.
template <typename Derived>
typename Derived::Scalar sample_mean(const Eigen::DenseBase<Derived>& v) {
  return v.sum() / static_cast<typename Derived::Scalar>(v.size());
}

/// Unbiased (n - 1) sample variance; needs at least two entries.
template <typename Derived>
typename Derived::Scalar sample_variance(const Eigen::DenseBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = sample_mean(v);
  return (v.derived().array() - m).square().sum() /
         static_cast<Scalar>(v.size() - 1);
}

/// Half squared Euclidean distance, the unit-variance Gaussian surprisal.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar half_squared_error(const Eigen::MatrixBase<DerivedA>& x,
                                             const Eigen::MatrixBase<DerivedB>& x_hat) {
  return typename DerivedA::Scalar(0.5) * (x - x_hat).squaredNorm();
}

}  // namespace scc::kernels
