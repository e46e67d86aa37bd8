#pragma once

// Training regime: rectified Adam and a single-cycle schedule that moves
// (lr, beta1) linearly to a peak over the first warm_frac of steps and back
// to the start along a cosine half-wave.

#include <cstddef>
#include <span>
#include <vector>

#include "capsroute/tensor.hpp"

namespace capsroute {

struct OneCycleSchedule {
  std::size_t total_steps = 1000;
  double lr_start = 1e-5;
  double lr_peak = 5e-4;
  double beta1_start = 0.999;
  double beta1_peak = 0.9 * 0.999;
  double warm_frac = 0.10;

  // floor(warm_frac * total_steps), kept inside [1, total_steps - 1] so both
  // legs exist.
  std::size_t warm_end() const;
  void validate() const;
};

struct Hyper {
  double lr = 0;
  double beta1 = 0;
};

Hyper schedule_at(const OneCycleSchedule& schedule, std::size_t step);

enum class Rectification {
  Auto,         // rectified step when rho_t > 4, momentum-only step otherwise
  AdamUnit,     // always the adaptive step with the rectifier fixed at 1 (plain Adam)
};

struct RAdamOptions {
  double beta2 = 0.999;
  double eps = 1e-8;
  Rectification rectification = Rectification::Auto;
};

template <typename Real>
struct BasicRAdamState {
  explicit BasicRAdamState(const std::vector<Shape>& shapes, RAdamOptions options = {});

  std::size_t t = 0;
  std::vector<std::vector<Real>> m;  // first moments, one per parameter
  std::vector<std::vector<Real>> v;  // second moments
  std::vector<Shape> shapes;
  RAdamOptions options;
  bool last_step_rectified = false;  // which branch the most recent step took
};

/// rho_inf - 2 t beta2^t / (1 - beta2^t), with rho_inf = 2 / (1 - beta2) - 1.
double radam_rho(std::size_t t, double beta2);

/// One update of every parameter. The beta1 in `hyper` drives both the first
/// moment update and its bias correction.
template <typename Real>
void radam_step(BasicRAdamState<Real>& state, std::span<BasicTensor<Real>* const> params,
                std::span<const BasicTensor<Real>> grads, Hyper hyper);

using RAdamState = BasicRAdamState<double>;

}  // namespace capsroute
