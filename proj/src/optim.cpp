#include "capsroute/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace capsroute {

std::size_t OneCycleSchedule::warm_end() const {
  const auto raw = static_cast<std::size_t>(std::floor(warm_frac * static_cast<double>(total_steps)));
  return std::clamp<std::size_t>(raw, 1, total_steps - 1);
}

void OneCycleSchedule::validate() const {
  if (total_steps < 2) throw ContractError("one-cycle schedule needs at least two steps");
  if (!(warm_frac > 0 && warm_frac < 1)) throw ContractError("warm_frac must lie strictly between 0 and 1");
}

Hyper schedule_at(const OneCycleSchedule& s, std::size_t step) {
  s.validate();
  if (step > s.total_steps) {
    throw ContractError("step " + std::to_string(step) + " beyond total_steps " + std::to_string(s.total_steps));
  }
  const std::size_t warm = s.warm_end();
  double toward_peak;  // 0 at the start values, 1 at the peak
  if (step <= warm) {
    toward_peak = static_cast<double>(step) / static_cast<double>(warm);
  } else {
    const double progress = static_cast<double>(step - warm) / static_cast<double>(s.total_steps - warm);
    toward_peak = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  }
  if (step == s.total_steps) toward_peak = 0;
  return {s.lr_start + (s.lr_peak - s.lr_start) * toward_peak,
          s.beta1_start + (s.beta1_peak - s.beta1_start) * toward_peak};
}

double radam_rho(std::size_t t, double beta2) {
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double b2t = std::pow(beta2, static_cast<double>(t));
  return rho_inf - 2.0 * static_cast<double>(t) * b2t / (1.0 - b2t);
}

template <typename Real>
BasicRAdamState<Real>::BasicRAdamState(const std::vector<Shape>& param_shapes, RAdamOptions opts)
    : shapes(param_shapes), options(opts) {
  for (const auto& s : shapes) {
    m.emplace_back(shape_numel(s), Real(0));
    v.emplace_back(shape_numel(s), Real(0));
  }
}

template <typename Real>
void radam_step(BasicRAdamState<Real>& state, std::span<BasicTensor<Real>* const> params,
                std::span<const BasicTensor<Real>> grads, Hyper hyper) {
  if (params.size() != state.shapes.size() || grads.size() != state.shapes.size()) {
    throw ShapeError("optimizer tracks " + std::to_string(state.shapes.size()) + " parameters, got " +
                     std::to_string(params.size()) + " params and " + std::to_string(grads.size()) + " grads");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (params[p]->shape() != state.shapes[p] || grads[p].shape() != state.shapes[p]) {
      throw ShapeError("parameter " + std::to_string(p) + " shape mismatch: expected " + shape_str(state.shapes[p]));
    }
    for (Real g : grads[p].values()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient for parameter " + std::to_string(p));
    }
  }

  const double beta1 = hyper.beta1;
  const double beta2 = state.options.beta2;
  const std::size_t t = ++state.t;
  const double bias1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bias2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  const double rho_inf = 2.0 / (1.0 - beta2) - 1.0;
  const double rho = radam_rho(t, beta2);

  bool adaptive = rho > 4.0;
  double rect = 1.0;
  if (state.options.rectification == Rectification::AdamUnit) {
    adaptive = true;
  } else if (adaptive) {
    rect = std::sqrt((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho));
  }
  state.last_step_rectified = adaptive;

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& m = state.m[p];
    auto& v = state.v[p];
    const Real* g = grads[p].data();
    std::vector<Real> theta(params[p]->values().begin(), params[p]->values().end());
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = static_cast<Real>(beta1 * m[k] + (1.0 - beta1) * g[k]);
      v[k] = static_cast<Real>(beta2 * v[k] + (1.0 - beta2) * g[k] * g[k]);
      const double m_hat = m[k] / bias1;
      double delta;
      if (adaptive) {
        const double v_hat = v[k] / bias2;
        delta = hyper.lr * rect * m_hat / (std::sqrt(v_hat) + state.options.eps);
      } else {
        delta = hyper.lr * m_hat;
      }
      theta[k] = static_cast<Real>(theta[k] - delta);
    }
    *params[p] = BasicTensor<Real>(state.shapes[p], std::move(theta));
  }
}

template struct BasicRAdamState<double>;
template struct BasicRAdamState<float>;
template void radam_step(BasicRAdamState<double>&, std::span<BasicTensor<double>* const>,
                         std::span<const BasicTensor<double>>, Hyper);
template void radam_step(BasicRAdamState<float>&, std::span<BasicTensor<float>* const>,
                         std::span<const BasicTensor<float>>, Hyper);

}  // namespace capsroute
