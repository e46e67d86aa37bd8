#include "capsroute/routing.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "capsroute/ops.hpp"

namespace capsroute {

std::string_view mode_name(RoutingMode mode) {
  switch (mode) {
    case RoutingMode::Fixed:
      return "fixed";
    case RoutingMode::VariableInput:
      return "variable-input";
    case RoutingMode::VariableOutput:
      return "variable-output";
  }
  return "unknown";
}

RoutingMode parse_mode(std::string_view name) {
  if (name == "fixed") return RoutingMode::Fixed;
  if (name == "variable-input") return RoutingMode::VariableInput;
  if (name == "variable-output") return RoutingMode::VariableOutput;
  throw ConfigError("unknown routing mode '" + std::string(name) + "'");
}

RoutingMode RoutingConfig::mode() const {
  if (!n_out) return RoutingMode::VariableOutput;
  if (!n_in) return RoutingMode::VariableInput;
  return RoutingMode::Fixed;
}

void RoutingConfig::validate() const {
  if (n_iters < 1) throw ConfigError("n_iters must be at least 1");
  if (d_cov < 1 || d_in < 1 || d_out < 1) throw ConfigError("d_cov, d_in and d_out must be at least 1");
  if (n_in && *n_in < 1) throw ConfigError("n_in must be positive when set");
  if (n_out && *n_out < 1) throw ConfigError("n_out must be positive when set");
  if (!n_out && n_in) throw ConfigError("variable n_out requires variable n_in");
  if (!(var_floor >= 0)) throw ConfigError("var_floor must be nonnegative");
  if (!(denom_eps > 0)) throw ConfigError("denom_eps must be positive");
}

RoutingConfig RoutingConfig::fixed(std::size_t n_in, std::size_t n_out, std::size_t d_cov, std::size_t d_in,
                                   std::size_t d_out) {
  RoutingConfig c;
  c.n_in = n_in;
  c.n_out = n_out;
  c.d_cov = d_cov;
  c.d_in = d_in;
  c.d_out = d_out;
  return c;
}

RoutingConfig RoutingConfig::variable_input(std::size_t n_out, std::size_t d_cov, std::size_t d_in,
                                            std::size_t d_out) {
  RoutingConfig c;
  c.n_out = n_out;
  c.d_cov = d_cov;
  c.d_in = d_in;
  c.d_out = d_out;
  return c;
}

RoutingConfig RoutingConfig::variable_output(std::size_t d_cov, std::size_t d_in, std::size_t d_out) {
  RoutingConfig c;
  c.d_cov = d_cov;
  c.d_in = d_in;
  c.d_out = d_out;
  return c;
}

template <typename Real>
std::vector<std::pair<std::string, BasicTensor<Real>*>> BasicRoutingParams<Real>::named_parameters() {
  std::vector<std::pair<std::string, BasicTensor<Real>*>> out{{"W", &W}};
  if (B.numel() > 0) out.emplace_back("B", &B);
  out.emplace_back("beta_use", &beta_use);
  if (beta_ign) out.emplace_back("beta_ign", &*beta_ign);
  return out;
}

template <typename Real>
std::vector<std::pair<std::string, const BasicTensor<Real>*>> BasicRoutingParams<Real>::named_parameters() const {
  std::vector<std::pair<std::string, const BasicTensor<Real>*>> out;
  for (auto& [name, t] : const_cast<BasicRoutingParams*>(this)->named_parameters()) out.emplace_back(name, t);
  return out;
}

namespace {

struct ParamShapes {
  Shape W, B, beta;
};

ParamShapes param_shapes(const RoutingConfig& c) {
  switch (c.mode()) {
    case RoutingMode::Fixed:
      return {{*c.n_in, *c.n_out, c.d_in, c.d_out}, {*c.n_in, *c.n_out, c.d_cov, c.d_out}, {*c.n_in, *c.n_out}};
    case RoutingMode::VariableInput:
      return {{*c.n_out, c.d_in, c.d_out}, {*c.n_out, c.d_cov, c.d_out}, {*c.n_out}};
    case RoutingMode::VariableOutput:
      return {{c.d_in, c.d_out}, {0}, {1}};
  }
  return {};
}

}  // namespace

ParamCount param_count(const RoutingConfig& config) {
  config.validate();
  const auto shapes = param_shapes(config);
  ParamCount count;
  count.W = shape_numel(shapes.W);
  count.B = shape_numel(shapes.B);
  count.beta_use = shape_numel(shapes.beta);
  count.beta_ign = config.tie_betas ? 0 : count.beta_use;
  return count;
}

template <typename Real>
BasicRoutingParams<Real> init_params(const RoutingConfig& config, std::uint64_t seed) {
  config.validate();
  const auto shapes = param_shapes(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / static_cast<double>(config.d_in));
  std::vector<Real> w(shape_numel(shapes.W));
  for (auto& v : w) v = static_cast<Real>(normal(rng));

  BasicRoutingParams<Real> params{BasicTensor<Real>(shapes.W, std::move(w)), BasicTensor<Real>::zeros(shapes.B),
                                  BasicTensor<Real>::zeros(shapes.beta), std::nullopt};
  if (!config.tie_betas) params.beta_ign = BasicTensor<Real>::zeros(shapes.beta);
  return params;
}

template <typename Real>
void check_params(const BasicRoutingParams<Real>& params, const RoutingConfig& config) {
  config.validate();
  const auto shapes = param_shapes(config);
  auto expect = [](const char* name, const Shape& got, const Shape& want) {
    if (got != want) {
      throw ShapeError(std::string(name) + " has shape " + shape_str(got) + ", expected " + shape_str(want));
    }
  };
  expect("W", params.W.shape(), shapes.W);
  expect("B", params.B.shape(), shapes.B);
  expect("beta_use", params.beta_use.shape(), shapes.beta);
  if (config.tie_betas != params.tied()) {
    throw ConfigError(config.tie_betas ? "config ties betas but params carry a separate beta_ign"
                                       : "config unties betas but params carry no beta_ign");
  }
  if (params.beta_ign) expect("beta_ign", params.beta_ign->shape(), shapes.beta);
}

template <typename Real>
BasicTensor<Real> compute_votes(const BasicRoutingParams<Real>& params, const BasicCapsuleBatch<Real>& caps,
                                const RoutingConfig& config, const std::optional<BasicTensor<Real>>& output_bias) {
  const auto& mu = caps.mu_in;
  if (mu.rank() != 4 || mu.extent(2) != config.d_cov || mu.extent(3) != config.d_in) {
    throw ShapeError("mu_in has shape " + shape_str(mu.shape()) + ", expected (b, n, " + std::to_string(config.d_cov) +
                     ", " + std::to_string(config.d_in) + ")");
  }
  const std::size_t b = mu.extent(0);
  const std::size_t n = mu.extent(1);
  if (config.n_in && n != *config.n_in) {
    throw ShapeError("expected " + std::to_string(*config.n_in) + " input capsules, got " + std::to_string(n));
  }
  const std::size_t c = config.d_cov;
  const std::size_t h = config.d_out;

  switch (config.mode()) {
    case RoutingMode::Fixed: {
      const std::size_t j = *config.n_out;
      auto v = contract(mu, params.W, "bicd,ijdh->bijch");
      return v + reshape(params.B, {1, n, j, c, h});
    }
    case RoutingMode::VariableInput: {
      const std::size_t j = *config.n_out;
      auto v = contract(mu, params.W, "bicd,jdh->bijch");
      return v + reshape(params.B, {1, 1, j, c, h});
    }
    case RoutingMode::VariableOutput: {
      if (!output_bias) {
        throw ConfigError("variable-output routing needs a per-output bias to break symmetry between outputs");
      }
      const auto& bias = *output_bias;
      const bool per_sample = bias.rank() == 4;
      const Shape want = per_sample ? Shape{b, n, c, h} : Shape{n, c, h};
      if (bias.shape() != want) {
        throw ShapeError("output bias has shape " + shape_str(bias.shape()) + ", expected " + shape_str(want));
      }
      auto v = reshape(contract(mu, params.W, "bicd,dh->bich"), {b, n, 1, c, h});
      return v + reshape(bias, {per_sample ? b : 1, 1, n, c, h});
    }
  }
  throw ConfigError("unreachable routing mode");
}

template <typename Real>
BasicEStepResult<Real> e_step(const BasicTensor<Real>& votes, const BasicRoutingState<Real>* state, bool first_iter) {
  if (votes.rank() != 5) throw ShapeError("votes must be (b, i, j, c, h), got " + shape_str(votes.shape()));
  const std::size_t b = votes.extent(0), i = votes.extent(1), j = votes.extent(2);
  const std::size_t c = votes.extent(3), h = votes.extent(4);

  if (first_iter) {
    return {BasicTensor<Real>::full({b, i, j}, Real(1) / static_cast<Real>(j)), std::nullopt};
  }
  if (!state) throw ContractError("e_step after the first iteration needs the previous routing state");
  for (Real s : state->sigma2_out.values()) {
    if (!(s > 0)) throw NumericError("output variance must be positive, got " + std::to_string(s));
  }

  const auto mu = reshape(state->mu_out, {b, 1, j, c, h});
  const auto var = reshape(state->sigma2_out, {b, 1, j, c, h});
  const Real two_pi = static_cast<Real>(2 * std::numbers::pi);

  // log P_ij = sum_ch [ -1/2 log(2 pi var) - (V - mu)^2 / (2 var) ]
  const auto log_norm = sum(log(var * two_pi), {3, 4}) * Real(-0.5);
  const auto mahalanobis = sum(square(votes - mu) / (var * Real(2)), {3, 4});
  const auto log_P = log_norm - mahalanobis;

  // log f(a) = -softplus(-a)
  const auto log_act = reshape(-softplus(-state->a_out), {b, 1, j});
  return {softmax(log_P + log_act, 2), log_P};
}

template <typename Real>
std::pair<BasicTensor<Real>, BasicTensor<Real>> d_step(const BasicTensor<Real>& a_in, const BasicTensor<Real>& R) {
  if (a_in.rank() != 2 || R.rank() != 3 || R.extent(0) != a_in.extent(0) || R.extent(1) != a_in.extent(1)) {
    throw ShapeError("d_step needs a_in (b, i) and R (b, i, j), got " + shape_str(a_in.shape()) + " and " +
                     shape_str(R.shape()));
  }
  const auto gate = reshape(logistic(a_in), {a_in.extent(0), a_in.extent(1), 1});
  auto d_use = gate * R;
  auto d_ign = gate - d_use;
  return {std::move(d_use), std::move(d_ign)};
}

template <typename Real>
BasicRoutingState<Real> m_step(const BasicTensor<Real>& votes, const BasicTensor<Real>& D_use,
                               const BasicTensor<Real>& D_ign, const BasicRoutingParams<Real>& params,
                               const RoutingConfig& config) {
  const std::size_t b = votes.extent(0), j = votes.extent(2);
  const std::size_t c = votes.extent(3), h = votes.extent(4);

  // Net benefit to use less net cost to ignore.
  auto a_out = sum(D_use * params.beta_use - D_ign * params.beta_ignore(), {1});

  const auto denom = reshape(sum(D_use, {1}) + static_cast<Real>(config.denom_eps), {b, j, 1, 1});
  auto mu_out = contract(D_use, votes, "bij,bijch->bjch") / denom;
  const auto dev = square(votes - reshape(mu_out, {b, 1, j, c, h}));
  auto sigma2_out = contract(D_use, dev, "bij,bijch->bjch") / denom + static_cast<Real>(config.var_floor);
  return {std::move(a_out), std::move(mu_out), std::move(sigma2_out)};
}

template <typename Real>
BasicRouteResult<Real> route(const BasicRoutingParams<Real>& params, const BasicCapsuleBatch<Real>& caps,
                             const RoutingConfig& config, const BasicRouteOptions<Real>& options) {
  check_params(params, config);
  if (caps.a_in.rank() != 2 || caps.mu_in.rank() != 4 || caps.a_in.extent(0) != caps.mu_in.extent(0) ||
      caps.a_in.extent(1) != caps.mu_in.extent(1)) {
    throw ShapeError("capsule batch needs a_in (b, n) and mu_in (b, n, c, d), got " + shape_str(caps.a_in.shape()) +
                     " and " + shape_str(caps.mu_in.shape()));
  }

  const auto votes = compute_votes(params, caps, config, options.output_bias);
  BasicRouteResult<Real> result;
  if (options.capture_trace) result.trace.emplace();

  std::optional<BasicRoutingState<Real>> state;
  for (std::size_t it = 0; it < config.n_iters; ++it) {
    auto e = e_step(votes, state ? &*state : nullptr, it == 0);
    auto [d_use, d_ign] = d_step(caps.a_in, e.R);
    state = m_step(votes, d_use, d_ign, params, config);
    if (result.trace) {
      std::optional<BasicTensor<Real>> log_P;
      if (e.log_P) log_P = e.log_P->detach();
      result.trace->iterations.push_back(
          {e.R.detach(), d_use.detach(), d_ign.detach(), std::move(log_P), state->a_out.detach()});
    }
  }
  result.output = std::move(*state);
  if (result.trace) {
    result.trace->final_state = {result.output.a_out.detach(), result.output.mu_out.detach(),
                                 result.output.sigma2_out.detach()};
  }
  return result;
}

#define CAPSROUTE_INSTANTIATE_ROUTING(Real)                                                                 \
  template struct BasicRoutingParams<Real>;                                                                 \
  template BasicRoutingParams<Real> init_params<Real>(const RoutingConfig&, std::uint64_t);                 \
  template void check_params(const BasicRoutingParams<Real>&, const RoutingConfig&);                        \
  template BasicTensor<Real> compute_votes(const BasicRoutingParams<Real>&, const BasicCapsuleBatch<Real>&, \
                                           const RoutingConfig&, const std::optional<BasicTensor<Real>>&);  \
  template BasicEStepResult<Real> e_step(const BasicTensor<Real>&, const BasicRoutingState<Real>*, bool);   \
  template std::pair<BasicTensor<Real>, BasicTensor<Real>> d_step(const BasicTensor<Real>&,                 \
                                                                  const BasicTensor<Real>&);                \
  template BasicRoutingState<Real> m_step(const BasicTensor<Real>&, const BasicTensor<Real>&,               \
                                          const BasicTensor<Real>&, const BasicRoutingParams<Real>&,        \
                                          const RoutingConfig&);                                            \
  template BasicRouteResult<Real> route(const BasicRoutingParams<Real>&, const BasicCapsuleBatch<Real>&,    \
                                        const RoutingConfig&, const BasicRouteOptions<Real>&);

CAPSROUTE_INSTANTIATE_ROUTING(double)
CAPSROUTE_INSTANTIATE_ROUTING(float)

#undef CAPSROUTE_INSTANTIATE_ROUTING

}  // namespace capsroute
