#include "capsroute/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "capsroute/ops.hpp"

namespace capsroute {

namespace {

// Letters for the leading axes of a generated contraction spec.
std::string leading_labels(std::size_t count) {
  static constexpr char kLetters[] = "abcdefghijklmnopqrstuv";
  if (count > sizeof(kLetters) - 1) throw ShapeError("too many leading axes");
  return std::string(kLetters, count);
}

template <typename Real>
Real logit_of(Real x) {
  if (!(x >= 0 && x <= 1)) throw DomainError("mask value " + std::to_string(x) + " outside [0, 1]");
  const Real lim = static_cast<Real>(kLogitMax);
  if (x == 0) return -lim;
  if (x == 1) return lim;
  return std::clamp(static_cast<Real>(std::log(x) - std::log1p(-x)), -lim, lim);
}

}  // namespace

template <typename Real>
BasicTensor<Real> linear(const BasicTensor<Real>& x, const BasicTensor<Real>& weight, const BasicTensor<Real>& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || bias.rank() != 1) {
    throw ShapeError("linear needs x (..., m), weight (m, k), bias (k)");
  }
  if (x.extent(x.rank() - 1) != weight.extent(0) || bias.extent(0) != weight.extent(1)) {
    throw ShapeError("linear: x " + shape_str(x.shape()) + ", weight " + shape_str(weight.shape()) + ", bias " +
                     shape_str(bias.shape()) + " do not match");
  }
  const std::string lead = leading_labels(x.rank() - 1);
  return contract(x, weight, lead + "y,yz->" + lead + "z") + bias;
}

template <typename Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gain, const BasicTensor<Real>& shift,
                             double eps) {
  if (x.rank() < 1 || x.extent(x.rank() - 1) < 2) {
    throw ContractError("layer_norm needs at least two features on the last axis, got " + shape_str(x.shape()));
  }
  const std::size_t m = x.extent(x.rank() - 1);
  if (gain.shape() != Shape{m} || shift.shape() != Shape{m}) {
    throw ShapeError("layer_norm gain and shift must have shape (" + std::to_string(m) + ")");
  }
  const auto centered = x - mean(x, {-1}, true);
  const auto var = mean(square(centered), {-1}, true);
  const auto inv_std = exp(log(var + static_cast<Real>(eps)) * Real(-0.5));
  return centered * inv_std * gain + shift;
}

template <typename Real>
BasicTensor<Real> mask_to_logits(const BasicTensor<Real>& x) {
  std::vector<Real> out(x.numel());
  const Real* px = x.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = logit_of(px[k]);
  return BasicTensor<Real>(x.shape(), std::move(out));
}

template <typename Real>
BasicTensor<Real> clamp_logits(const BasicTensor<Real>& scores) {
  const Real lim = static_cast<Real>(kLogitMax);
  std::vector<Real> out(scores.values().begin(), scores.values().end());
  for (auto& v : out) {
    if (std::isnan(v)) throw DomainError("score is NaN");
    v = std::clamp(v, -lim, lim);
  }
  return BasicTensor<Real>(scores.shape(), std::move(out));
}

template <typename Real>
BasicTensor<Real> cross_entropy(const BasicTensor<Real>& scores, const BasicTensor<Real>& target) {
  if (scores.rank() != 2 || scores.shape() != target.shape()) {
    throw ShapeError("cross_entropy needs scores and target of the same (b, k) shape, got " +
                     shape_str(scores.shape()) + " and " + shape_str(target.shape()));
  }
  const std::size_t b = scores.extent(0), k = scores.extent(1);
  if (b == 0) throw ContractError("cross_entropy of an empty batch");
  const Real* t = target.data();
  for (std::size_t r = 0; r < b; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const Real v = t[r * k + c];
      if (!(v >= 0)) throw ContractError("target row " + std::to_string(r) + " has a negative entry");
      total += v;
    }
    if (std::abs(total - 1.0) > 1e-6) {
      throw ContractError("target row " + std::to_string(r) + " sums to " + std::to_string(total));
    }
  }
  return sum_all(target * log_softmax(scores, 1)) * static_cast<Real>(-1.0 / static_cast<double>(b));
}

template <typename Real>
BasicTensor<Real> one_hot(std::span<const int> labels, std::size_t classes) {
  std::vector<Real> out(labels.size() * classes, Real(0));
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= classes) {
      throw ContractError("label " + std::to_string(labels[r]) + " outside [0, " + std::to_string(classes) + ")");
    }
    out[r * classes + static_cast<std::size_t>(labels[r])] = Real(1);
  }
  return BasicTensor<Real>({labels.size(), classes}, std::move(out));
}

template <typename Real>
BasicTensor<Real> add_channel_embedding(const BasicTensor<Real>& x, const BasicTensor<Real>& table,
                                        std::span<const std::size_t> channels) {
  if (x.rank() < 1 || table.rank() != 2 || table.extent(1) != x.extent(x.rank() - 1)) {
    throw ShapeError("channel embedding table " + shape_str(table.shape()) + " does not match input " +
                     shape_str(x.shape()));
  }
  Shape lead(x.shape().begin(), x.shape().end() - 1);
  if (shape_numel(lead) != channels.size()) {
    throw ShapeError("need one channel id per leading position of " + shape_str(x.shape()));
  }
  const std::size_t n_channels = table.extent(0);
  std::vector<Real> hot(channels.size() * n_channels, Real(0));
  for (std::size_t k = 0; k < channels.size(); ++k) {
    if (channels[k] >= n_channels) throw ContractError("channel id " + std::to_string(channels[k]) + " out of range");
    hot[k * n_channels + channels[k]] = Real(1);
  }
  Shape hot_shape = lead;
  hot_shape.push_back(n_channels);
  const std::string labels = leading_labels(lead.size());
  return x + contract(BasicTensor<Real>(hot_shape, std::move(hot)), table, labels + "y,yz->" + labels + "z");
}

double sample_beta(std::mt19937_64& rng, BetaParams params) {
  if (!(params.a > 0 && params.b > 0)) throw ContractError("Beta parameters must be positive");
  std::gamma_distribution<double> ga(params.a, 1.0), gb(params.b, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  if (x + y == 0) return 0.5;
  return x / (x + y);
}

template <typename Real>
BasicTensor<Real> mix(const BasicTensor<Real>& a, const BasicTensor<Real>& b, double lambda) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mixup operands differ in shape: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Real la = static_cast<Real>(lambda);
  const Real lb = static_cast<Real>(1.0 - lambda);
  std::vector<Real> out(a.numel());
  const Real* pa = a.data();
  const Real* pb = b.data();
  for (std::size_t k = 0; k < out.size(); ++k) out[k] = la * pa[k] + lb * pb[k];
  return BasicTensor<Real>(a.shape(), std::move(out));
}

template <typename Real>
BasicMixupResult<Real> mixup(std::span<const BasicTensor<Real>> inputs_a, const BasicTensor<Real>& target_a,
                             std::span<const BasicTensor<Real>> inputs_b, const BasicTensor<Real>& target_b,
                             BetaParams params, std::uint64_t seed, std::optional<double> force_lambda) {
  if (inputs_a.size() != inputs_b.size()) throw ShapeError("mixup pairs carry different numbers of inputs");
  double lambda;
  if (force_lambda) {
    lambda = *force_lambda;
  } else {
    std::mt19937_64 rng(seed);
    lambda = sample_beta(rng, params);
  }
  BasicMixupResult<Real> out;
  out.lambda = lambda;
  for (std::size_t k = 0; k < inputs_a.size(); ++k) out.inputs.push_back(mix(inputs_a[k], inputs_b[k], lambda));
  out.target = mix(target_a, target_b, lambda);
  return out;
}

template <typename Real>
BasicCapsuleBatch<Real> mix_capsules(const BasicCapsuleBatch<Real>& a, const BasicCapsuleBatch<Real>& b,
                                     double lambda) {
  const auto mask = mix(logistic(a.a_in.detach()), logistic(b.a_in.detach()), lambda);
  return {mask_to_logits(mask), mix(a.mu_in, b.mu_in, lambda)};
}

#define CAPSROUTE_INSTANTIATE_NN(Real)                                                                          \
  template BasicTensor<Real> linear(const BasicTensor<Real>&, const BasicTensor<Real>&, const BasicTensor<Real>&); \
  template BasicTensor<Real> layer_norm(const BasicTensor<Real>&, const BasicTensor<Real>&,                      \
                                        const BasicTensor<Real>&, double);                                        \
  template BasicTensor<Real> mask_to_logits(const BasicTensor<Real>&);                                           \
  template BasicTensor<Real> clamp_logits(const BasicTensor<Real>&);                                             \
  template BasicTensor<Real> cross_entropy(const BasicTensor<Real>&, const BasicTensor<Real>&);                  \
  template BasicTensor<Real> one_hot<Real>(std::span<const int>, std::size_t);                                   \
  template BasicTensor<Real> add_channel_embedding(const BasicTensor<Real>&, const BasicTensor<Real>&,           \
                                                   std::span<const std::size_t>);                                \
  template BasicTensor<Real> mix(const BasicTensor<Real>&, const BasicTensor<Real>&, double);                    \
  template BasicMixupResult<Real> mixup(std::span<const BasicTensor<Real>>, const BasicTensor<Real>&,            \
                                        std::span<const BasicTensor<Real>>, const BasicTensor<Real>&, BetaParams, \
                                        std::uint64_t, std::optional<double>);                                    \
  template BasicCapsuleBatch<Real> mix_capsules(const BasicCapsuleBatch<Real>&, const BasicCapsuleBatch<Real>&,  \
                                                double);

CAPSROUTE_INSTANTIATE_NN(double)
CAPSROUTE_INSTANTIATE_NN(float)

#undef CAPSROUTE_INSTANTIATE_NN

}  // namespace capsroute
