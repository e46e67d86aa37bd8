#pragma once

#include <random>

#include "capsroute/tensor.hpp"

namespace testutil {

inline capsroute::Tensor random_tensor(capsroute::Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                                       double mean = 0.0) {
  std::normal_distribution<double> normal(mean, stddev);
  std::vector<double> v(capsroute::shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return capsroute::Tensor(std::move(shape), std::move(v));
}

inline double max_abs_diff(const capsroute::Tensor& a, const capsroute::Tensor& b) {
  double m = 0;
  for (std::size_t k = 0; k < a.numel(); ++k) m = std::max(m, std::abs(a.values()[k] - b.values()[k]));
  return m;
}

}  // namespace testutil
