#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "capsroute/tensor.hpp"

namespace capsroute {

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;  // at worst_index
  double numeric = 0;
};

// Compares the tape gradient of scalar f at x against central differences.
// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
template <typename Real>
GradCheckResult grad_check_detail(const std::function<BasicTensor<Real>(const BasicTensor<Real>&)>& f,
                                  const BasicTensor<Real>& x, double step) {
  if (!(step > 0)) throw ContractError("grad_check step must be positive");

  BasicTape<Real> tape;
  const auto xv = tape.watch(x);
  const auto y = f(xv);
  if (y.numel() != 1) throw ContractError("grad_check needs a scalar function, got shape " + shape_str(y.shape()));
  std::vector<Real> analytic(x.numel(), Real(0));
  if (y.tracked()) {
    const auto grads = tape.backward(y);
    if (auto g = grads.find(xv)) analytic.assign(g->values().begin(), g->values().end());
  }

  GradCheckResult result;
  std::vector<Real> probe(x.values().begin(), x.values().end());
  for (std::size_t k = 0; k < probe.size(); ++k) {
    const Real orig = probe[k];
    probe[k] = orig + static_cast<Real>(step);
    const double up = f(BasicTensor<Real>(x.shape(), probe)).item();
    probe[k] = orig - static_cast<Real>(step);
    const double down = f(BasicTensor<Real>(x.shape(), probe)).item();
    probe[k] = orig;
    const double numeric = (up - down) / (2 * step);
    const double a = analytic[k];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    if (k == 0 || err > result.max_rel_error) {
      result = {err, k, a, numeric};
    }
  }
  return result;
}

template <typename Real>
double grad_check(const std::function<BasicTensor<Real>(const BasicTensor<Real>&)>& f, const BasicTensor<Real>& x,
                  double step) {
  return grad_check_detail<Real>(f, x, step).max_rel_error;
}

}  // namespace capsroute
