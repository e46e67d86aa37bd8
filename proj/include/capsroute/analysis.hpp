#pragma once

// Pose-trajectory diagnostics and routing-trace summaries.

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "capsroute/routing.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

// Indexed [step][c], where c is a row (pose vector) of the (d_cov, d_out)
// capsule.
struct PoseMetrics {
  std::vector<std::vector<double>> rel_dist;    // |p_t - p_0| / |p_0|
  std::vector<std::vector<double>> norm_ratio;  // |p_t| / |p_0|
  std::vector<std::vector<double>> cosine;      // cos(p_t, p_0); 0 when p_t = 0

  std::size_t steps() const { return rel_dist.size(); }
};

/// Each element of `poses` is one (d_cov, d_out) capsule. Throws
/// DomainError naming c if initial pose vector c is zero.
PoseMetrics pose_trajectory_metrics(std::span<const Tensor> poses);

/// Header "step,rel_dist_0,norm_ratio_0,cosine_0,...", one row per step.
std::string pose_metrics_csv(const PoseMetrics& metrics);

struct IterationSummary {
  Tensor R_entropy;   // (b, i), nats
  Tensor mean_D_use;  // (b, j), averaged over inputs
  Tensor a_out;       // (b, j)
};

std::vector<IterationSummary> trace_summary(const RoutingTrace& trace);

}  // namespace capsroute
