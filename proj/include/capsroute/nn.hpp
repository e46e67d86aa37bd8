#pragma once

// Non-routing layers and training-time transforms used around routing
// layers: affine maps, layer normalization, mask log-odds, soft-target
// cross entropy and mixup.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "capsroute/routing.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

/// x (..., m) @ weight (m, k) + bias (k).
template <typename Real>
BasicTensor<Real> linear(const BasicTensor<Real>& x, const BasicTensor<Real>& weight, const BasicTensor<Real>& bias);

/// Standardizes the last axis (population variance plus eps), then
/// applies gain and shift.
template <typename Real>
BasicTensor<Real> layer_norm(const BasicTensor<Real>& x, const BasicTensor<Real>& gain, const BasicTensor<Real>& shift,
                             double eps = 1e-5);

/// log(x / (1 - x)) clamped to [-kLogitMax, kLogitMax]. x must lie in
/// [0, 1]. Not differentiable: applied where data enters the model.
template <typename Real>
BasicTensor<Real> mask_to_logits(const BasicTensor<Real>& x);

/// Clamps scores to [-kLogitMax, kLogitMax].
template <typename Real>
BasicTensor<Real> clamp_logits(const BasicTensor<Real>& scores);

/// Mean over the batch of -sum_k target * log_softmax(scores). Target rows
/// must be probability vectors.
template <typename Real>
BasicTensor<Real> cross_entropy(const BasicTensor<Real>& scores, const BasicTensor<Real>& target);

/// One-hot rows (b, k).
template <typename Real>
BasicTensor<Real> one_hot(std::span<const int> labels, std::size_t classes);

/// Adds a learned vector per integer channel: x (..., m) + table[channel].
/// `channels` holds one id per leading position of x.
template <typename Real>
BasicTensor<Real> add_channel_embedding(const BasicTensor<Real>& x, const BasicTensor<Real>& table,
                                        std::span<const std::size_t> channels);

struct BetaParams {
  double a = 0.2;
  double b = 0.2;
};

/// Draws from Beta(a, b) as X / (X + Y) with X ~ Gamma(a), Y ~ Gamma(b).
double sample_beta(std::mt19937_64& rng, BetaParams params);

/// lambda * a + (1 - lambda) * b, elementwise. Untracked.
template <typename Real>
BasicTensor<Real> mix(const BasicTensor<Real>& a, const BasicTensor<Real>& b, double lambda);

template <typename Real>
struct BasicMixupResult {
  std::vector<BasicTensor<Real>> inputs;
  BasicTensor<Real> target;
  double lambda = 1;
};

/// Mixes every input and the target of a pair with one lambda drawn from
/// Beta(params) using `seed`, or with `force_lambda` when given.
template <typename Real>
BasicMixupResult<Real> mixup(std::span<const BasicTensor<Real>> inputs_a, const BasicTensor<Real>& target_a,
                             std::span<const BasicTensor<Real>> inputs_b, const BasicTensor<Real>& target_b,
                             BetaParams params, std::uint64_t seed, std::optional<double> force_lambda = std::nullopt);

/// Mixes capsule batches: poses directly, scores as mask probabilities
/// (logistic, mix, back to clamped logits).
template <typename Real>
BasicCapsuleBatch<Real> mix_capsules(const BasicCapsuleBatch<Real>& a, const BasicCapsuleBatch<Real>& b,
                                     double lambda);

}  // namespace capsroute
