#include "capsroute/instances.hpp"

#include "capsroute/gradcheck.hpp"
#include "capsroute/ops.hpp"

namespace capsroute {

std::string_view variant_name(Variant v) {
  switch (v) {
    case Variant::Fixed:
      return "fixed";
    case Variant::VariableInput:
      return "variable-input";
    case Variant::VariableOutput:
      return "variable-output";
    case Variant::Tied:
      return "tied";
  }
  return "?";
}

RouteOptions Instance::options(bool capture_trace) const {
  RouteOptions o;
  o.output_bias = output_bias;
  o.capture_trace = capture_trace;
  return o;
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

Instance make_instance(Variant variant, const InstanceShape& s, std::mt19937_64& rng) {
  RoutingConfig config;
  switch (variant) {
    case Variant::Fixed:
    case Variant::Tied:
      config = RoutingConfig::fixed(s.n_in, s.n_out, s.d_cov, s.d_in, s.d_out);
      config.tie_betas = variant == Variant::Tied;
      break;
    case Variant::VariableInput:
      config = RoutingConfig::variable_input(s.n_out, s.d_cov, s.d_in, s.d_out);
      break;
    case Variant::VariableOutput:
      config = RoutingConfig::variable_output(s.d_cov, s.d_in, s.d_out);
      break;
  }
  config.n_iters = s.n_iters;
  Instance inst{config, init_params<double>(config, rng()), {}, std::nullopt};
  auto& p = inst.params;
  p.W = normal_tensor(p.W.shape(), 0.5, rng);
  if (p.B.numel() > 0) p.B = normal_tensor(p.B.shape(), 0.5, rng);
  p.beta_use = normal_tensor(p.beta_use.shape(), 1.0, rng);
  if (p.beta_ign) p.beta_ign = normal_tensor(p.beta_ign->shape(), 1.0, rng);
  inst.caps = {normal_tensor({s.batch, s.n_in}, 2.0, rng), normal_tensor({s.batch, s.n_in, s.d_cov, s.d_in}, 1.0, rng)};
  if (variant == Variant::VariableOutput) inst.output_bias = normal_tensor({s.n_in, s.d_cov, s.d_out}, 1.0, rng);
  return inst;
}

InstanceShape random_shape(std::mt19937_64& rng, Variant variant, std::size_t max_batch) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  InstanceShape s;
  s.batch = pick(1, max_batch);
  s.n_in = pick(1, variant == Variant::VariableOutput ? ReferenceLimits::max_outputs : ReferenceLimits::max_inputs);
  s.n_out = pick(1, ReferenceLimits::max_outputs);
  s.d_cov = pick(1, ReferenceLimits::max_dim);
  s.d_in = pick(1, ReferenceLimits::max_dim);
  s.d_out = pick(1, ReferenceLimits::max_dim);
  s.n_iters = pick(1, 4);
  return s;
}

std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, double step) {
  std::mt19937_64 rng(seed);
  std::vector<GradCheckEntry> out;
  for (Variant v : kAllVariants) {
    InstanceShape shape;  // batch 2, 3 inputs, 2 outputs, 2 x 2 poses, 3 iterations
    const Instance base = make_instance(v, shape, rng);
    const auto probe = route(base.params, base.caps, base.config, base.options());
    // Fixed random weights on every output so no gradient vanishes by symmetry.
    const Tensor wa = normal_tensor(probe.output.a_out.shape(), 1.0, rng);
    const Tensor wm = normal_tensor(probe.output.mu_out.shape(), 1.0, rng);
    const Tensor ws = normal_tensor(probe.output.sigma2_out.shape(), 1.0, rng);

    auto objective = [&](const Instance& inst) {
      const auto r = route(inst.params, inst.caps, inst.config, inst.options());
      return sum_all(r.output.a_out * wa) + sum_all(r.output.mu_out * wm) + sum_all(r.output.sigma2_out * ws);
    };
    auto check = [&](const std::string& wrt, const Tensor& x, auto&& substitute) {
      std::function<Tensor(const Tensor&)> f = [&](const Tensor& value) {
        Instance inst = base;
        substitute(inst, value);
        return objective(inst);
      };
      out.push_back({std::string(variant_name(v)), wrt, grad_check<double>(f, x, step)});
    };

    check("W", base.params.W, [](Instance& i, const Tensor& x) { i.params.W = x; });
    if (base.params.B.numel() > 0) check("B", base.params.B, [](Instance& i, const Tensor& x) { i.params.B = x; });
    check("beta_use", base.params.beta_use, [](Instance& i, const Tensor& x) { i.params.beta_use = x; });
    if (base.params.beta_ign) {
      check("beta_ign", *base.params.beta_ign, [](Instance& i, const Tensor& x) { i.params.beta_ign = x; });
    }
    check("a_in", base.caps.a_in, [](Instance& i, const Tensor& x) { i.caps.a_in = x; });
    check("mu_in", base.caps.mu_in, [](Instance& i, const Tensor& x) { i.caps.mu_in = x; });
    if (base.output_bias) {
      check("output_bias", *base.output_bias, [](Instance& i, const Tensor& x) { i.output_bias = x; });
    }
  }
  return out;
}

}  // namespace capsroute
