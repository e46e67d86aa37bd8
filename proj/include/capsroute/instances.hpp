#pragma once

// Random routing instances and the standard gradient-check suite, shared by
// the gradcheck command and the test binaries.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "capsroute/routing.hpp"

namespace capsroute {

enum class Variant { Fixed, VariableInput, VariableOutput, Tied };

std::string_view variant_name(Variant v);
inline constexpr Variant kAllVariants[] = {Variant::Fixed, Variant::VariableInput, Variant::VariableOutput,
                                           Variant::Tied};

struct InstanceShape {
  std::size_t batch = 2;
  std::size_t n_in = 3;
  std::size_t n_out = 2;  // ignored in variable-output mode, where n_out = n_in
  std::size_t d_cov = 2;
  std::size_t d_in = 2;
  std::size_t d_out = 2;
  std::size_t n_iters = 3;
};

struct Instance {
  RoutingConfig config;
  RoutingParams params;
  CapsuleBatch caps;
  std::optional<Tensor> output_bias;

  RouteOptions options(bool capture_trace = false) const;
};

/// Parameters, scores and poses drawn from normals so that no quantity sits
/// at its zero initialization.
Instance make_instance(Variant variant, const InstanceShape& shape, std::mt19937_64& rng);

/// Shape drawn uniformly within the reference ceiling. In variable-output
/// mode n_in is also capped by the output limit, since n_out = n_in there.
InstanceShape random_shape(std::mt19937_64& rng, Variant variant, std::size_t max_batch = 3);

struct GradCheckEntry {
  std::string instance;  // variant name
  std::string wrt;       // W, B, beta_use, beta_ign, a_in, mu_in, output_bias
  double error = 0;
};

/// Central-difference checks through route() on one small instance per
/// variant, with respect to every learned tensor and both inputs.
std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, double step = 1e-5);

}  // namespace capsroute
