#pragma once

// EM routing by agreement: votes, then n_iters rounds of E-Step (routing
// probabilities), D-Step (shares of input data used and ignored by each
// output) and M-Step (output scores from net benefit to use less net cost
// to ignore, plus D_use-weighted Gaussian fits).
//
// Axis letters used throughout: b batch, i input capsule, j output capsule,
// c covector dim, d input dim, h output dim.

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capsroute/tensor.hpp"

namespace capsroute {

// Input scores are clamped to [-kLogitMax, kLogitMax] when data enters the
// system; padded capsules carry -kLogitMax.
inline constexpr double kLogitMax = 30.0;

enum class RoutingMode {
  Fixed,           // W (i,j,d,h), B (i,j,c,h), betas (i,j)
  VariableInput,   // W (j,d,h),   B (j,c,h),   betas (j)
  VariableOutput,  // W (d,h), bias supplied per call, betas (1)
};

std::string_view mode_name(RoutingMode mode);
RoutingMode parse_mode(std::string_view name);

struct RoutingConfig {
  std::optional<std::size_t> n_in;   // unset: any number of inputs
  std::optional<std::size_t> n_out;  // unset: one output per input
  std::size_t d_cov = 4;
  std::size_t d_in = 4;
  std::size_t d_out = 4;
  std::size_t n_iters = 3;
  bool tie_betas = false;
  double var_floor = 1e-8;
  double denom_eps = 1e-12;

  RoutingMode mode() const;
  void validate() const;  // throws ConfigError

  static RoutingConfig fixed(std::size_t n_in, std::size_t n_out, std::size_t d_cov, std::size_t d_in,
                             std::size_t d_out);
  static RoutingConfig variable_input(std::size_t n_out, std::size_t d_cov, std::size_t d_in, std::size_t d_out);
  static RoutingConfig variable_output(std::size_t d_cov, std::size_t d_in, std::size_t d_out);
};

template <typename Real>
struct BasicRoutingParams {
  BasicTensor<Real> W;
  BasicTensor<Real> B;  // shape (0) in variable-output mode
  BasicTensor<Real> beta_use;
  std::optional<BasicTensor<Real>> beta_ign;  // unset when tied

  bool tied() const { return !beta_ign.has_value(); }
  // With tied betas the ignore cost is the use benefit itself.
  const BasicTensor<Real>& beta_ignore() const { return beta_ign ? *beta_ign : beta_use; }

  // Every learned tensor, each listed once.
  std::vector<std::pair<std::string, BasicTensor<Real>*>> named_parameters();
  std::vector<std::pair<std::string, const BasicTensor<Real>*>> named_parameters() const;
};

template <typename Real>
struct BasicCapsuleBatch {
  BasicTensor<Real> a_in;   // (b, n) pre-activation scores
  BasicTensor<Real> mu_in;  // (b, n, d_cov, d_in)

  std::size_t batch() const { return a_in.extent(0); }
  std::size_t count() const { return a_in.extent(1); }
};

template <typename Real>
struct BasicRoutingState {
  BasicTensor<Real> a_out;       // (b, j)
  BasicTensor<Real> mu_out;      // (b, j, c, h)
  BasicTensor<Real> sigma2_out;  // (b, j, c, h)
};

template <typename Real>
struct BasicIterationTrace {
  BasicTensor<Real> R;      // (b, i, j)
  BasicTensor<Real> D_use;  // (b, i, j)
  BasicTensor<Real> D_ign;  // (b, i, j)
  std::optional<BasicTensor<Real>> log_P;  // (b, i, j); unset on the first iteration
  BasicTensor<Real> a_out;  // (b, j) after this iteration's M-Step
};

template <typename Real>
struct BasicRoutingTrace {
  std::vector<BasicIterationTrace<Real>> iterations;
  BasicRoutingState<Real> final_state;
};

template <typename Real>
struct BasicRouteOptions {
  // Required in variable-output mode: (n, c, h) or (b, n, c, h), one slice
  // per output to break symmetry between them.
  std::optional<BasicTensor<Real>> output_bias;
  bool capture_trace = false;
};

template <typename Real>
struct BasicRouteResult {
  BasicRoutingState<Real> output;
  std::optional<BasicRoutingTrace<Real>> trace;
};

template <typename Real>
struct BasicEStepResult {
  BasicTensor<Real> R;
  std::optional<BasicTensor<Real>> log_P;
};

struct ParamCount {
  std::size_t W = 0;
  std::size_t B = 0;
  std::size_t beta_use = 0;
  std::size_t beta_ign = 0;
  std::size_t total() const { return W + B + beta_use + beta_ign; }
};

ParamCount param_count(const RoutingConfig& config);

/// W ~ Normal(0, (1/d_in)^2); B and betas zero. Deterministic in seed.
template <typename Real>
BasicRoutingParams<Real> init_params(const RoutingConfig& config, std::uint64_t seed);

/// Validates parameter shapes against the config.
template <typename Real>
void check_params(const BasicRoutingParams<Real>& params, const RoutingConfig& config);

/// V (b,i,j,c,h) = sum_d mu_in (b,i,c,d) W (..,d,h) + B (..,c,h).
template <typename Real>
BasicTensor<Real> compute_votes(const BasicRoutingParams<Real>& params, const BasicCapsuleBatch<Real>& caps,
                                const RoutingConfig& config,
                                const std::optional<BasicTensor<Real>>& output_bias = std::nullopt);

/// First iteration: R = 1/n_out. Otherwise softmax over j of
/// log f(a_out_j) + log P_ij, the log-space form of f(a)P / sum_j f(a)P.
template <typename Real>
BasicEStepResult<Real> e_step(const BasicTensor<Real>& votes, const BasicRoutingState<Real>* state, bool first_iter);

template <typename Real>
std::pair<BasicTensor<Real>, BasicTensor<Real>> d_step(const BasicTensor<Real>& a_in, const BasicTensor<Real>& R);

template <typename Real>
BasicRoutingState<Real> m_step(const BasicTensor<Real>& votes, const BasicTensor<Real>& D_use,
                               const BasicTensor<Real>& D_ign, const BasicRoutingParams<Real>& params,
                               const RoutingConfig& config);

/// Votes once, then n_iters E/D/M rounds, all on the operands' tape.
template <typename Real>
BasicRouteResult<Real> route(const BasicRoutingParams<Real>& params, const BasicCapsuleBatch<Real>& caps,
                             const RoutingConfig& config, const BasicRouteOptions<Real>& options = {});

using RoutingParams = BasicRoutingParams<double>;
using CapsuleBatch = BasicCapsuleBatch<double>;
using RoutingState = BasicRoutingState<double>;
using IterationTrace = BasicIterationTrace<double>;
using RoutingTrace = BasicRoutingTrace<double>;
using RouteOptions = BasicRouteOptions<double>;
using RouteResult = BasicRouteResult<double>;

// Scalar-loop transliteration of the algorithm with direct Gaussian
// densities, for cross-checking route(). Forward only; refuses
// instances beyond the limits below.
struct ReferenceLimits {
  static constexpr std::size_t max_inputs = 8;
  static constexpr std::size_t max_outputs = 4;
  static constexpr std::size_t max_dim = 4;
};

RoutingState route_reference(const RoutingParams& params, const CapsuleBatch& caps, const RoutingConfig& config,
                             const std::optional<Tensor>& output_bias = std::nullopt,
                             std::vector<std::vector<double>>* first_iter_R = nullptr);

}  // namespace capsroute
