#pragma once

// Dense real types and the elementary differentiable functions used by the
// model. Everything is 64-bit; the free functions are templated on the Eigen
// expression type so they accept blocks, maps and plain vectors alike.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "acmil/errors.hpp"

namespace acmil {

using Index = Eigen::Index;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<double>;
using Vector = VectorX<double>;

template <typename Derived>
bool all_finite(const Eigen::DenseBase<Derived>& x) {
  return x.allFinite();
}

/// Normalized exponential with max subtraction. Throws DomainError on empty
/// or non-finite input.
template <typename Derived>
VectorX<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& logits) {
  using S = typename Derived::Scalar;
  if (logits.size() == 0) throw DomainError("softmax of an empty vector");
  if (!logits.allFinite()) throw DomainError("softmax of non-finite logits");
  const S peak = logits.maxCoeff();
  VectorX<S> out = (logits.derived().reshaped().array() - peak).exp().matrix();
  out /= out.sum();
  return out;
}

/// Backward pass of softmax: given probabilities p and dL/dp, returns dL/dlogits.
template <typename DP, typename DG>
VectorX<typename DP::Scalar> softmax_backward(const Eigen::MatrixBase<DP>& probs,
                                              const Eigen::MatrixBase<DG>& grad_probs) {
  const auto inner = probs.dot(grad_probs);
  return (probs.array() * (grad_probs.array() - inner)).matrix();
}

template <typename DU, typename DV>
typename DU::Scalar cosine_similarity(const Eigen::MatrixBase<DU>& u,
                                      const Eigen::MatrixBase<DV>& v) {
  if (u.size() != v.size()) throw DomainError("cosine_similarity: length mismatch");
  const auto nu = u.norm();
  const auto nv = v.norm();
  if (nu == 0 || nv == 0) throw DomainError("cosine_similarity: zero vector");
  return u.dot(v) / (nu * nv);
}

/// d cos(u, v) / du.
template <typename DU, typename DV>
VectorX<typename DU::Scalar> cosine_similarity_grad(const Eigen::MatrixBase<DU>& u,
                                                    const Eigen::MatrixBase<DV>& v) {
  const auto nu = u.norm();
  const auto nv = v.norm();
  if (nu == 0 || nv == 0) throw DomainError("cosine_similarity_grad: zero vector");
  const auto c = u.dot(v) / (nu * nv);
  return v / (nu * nv) - (c / (nu * nu)) * u;
}

template <typename Derived>
auto sigmoid(const Eigen::ArrayBase<Derived>& x) {
  return (typename Derived::Scalar(1) + (-x).exp()).inverse();
}

template <typename Derived>
auto relu(const Eigen::ArrayBase<Derived>& x) {
  return x.max(typename Derived::Scalar(0));
}

/// 1 where x > 0, else 0 (subgradient 0 at the kink).
template <typename Derived>
auto relu_derivative(const Eigen::ArrayBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return (x > S(0)).template cast<S>();
}

/// Indices sorted by descending value; equal values keep ascending index order.
std::vector<Index> argsort_descending(std::span<const double> values);

template <typename Derived>
std::vector<Index> argsort_descending(const Eigen::MatrixBase<Derived>& v) {
  const VectorX<double> tmp = v.template cast<double>();
  return argsort_descending(std::span<const double>(tmp.data(), static_cast<size_t>(tmp.size())));
}

/// Central-difference gradient check. `fn` must read the parameters through
/// the spans in `params`; each coordinate is perturbed in place and restored.
/// Returns max |g_fd - g_an| / max(1, |g_fd|, |g_an|) over all coordinates.
double finite_diff_check(const std::function<double()>& fn,
                         const std::vector<std::span<double>>& params,
                         const std::vector<std::span<const double>>& analytic_grads,
                         double eps);

}  // namespace acmil
