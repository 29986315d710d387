#include "acmil/numerics.hpp"

#include <algorithm>
#include <numeric>

namespace acmil {

std::vector<Index> argsort_descending(std::span<const double> values) {
  std::vector<Index> order(values.size());
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Index a, Index b) { return values[a] > values[b]; });
  return order;
}

double finite_diff_check(const std::function<double()>& fn,
                         const std::vector<std::span<double>>& params,
                         const std::vector<std::span<const double>>& analytic_grads,
                         double eps) {
  if (!(eps > 0)) throw DomainError("finite_diff_check: eps must be positive");
  if (params.size() != analytic_grads.size())
    throw DomainError("finite_diff_check: parameter/gradient count mismatch");

  auto eval = [&] {
    const double v = fn();
    if (!std::isfinite(v)) throw NumericalError("finite_diff_check: non-finite function value");
    return v;
  };

  double worst = 0.0;
  for (size_t t = 0; t < params.size(); ++t) {
    auto theta = params[t];
    auto grad = analytic_grads[t];
    if (theta.size() != grad.size())
      throw DomainError("finite_diff_check: shape mismatch in tensor " + std::to_string(t));
    for (size_t i = 0; i < theta.size(); ++i) {
      const double saved = theta[i];
      theta[i] = saved + eps;
      const double up = eval();
      theta[i] = saved - eps;
      const double down = eval();
      theta[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double an = grad[i];
      const double denom = std::max({1.0, std::abs(fd), std::abs(an)});
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
  }
  return worst;
}

}  // namespace acmil
