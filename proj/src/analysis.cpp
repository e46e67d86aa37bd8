#include "capsroute/analysis.hpp"

#include <cmath>
#include <sstream>

#include "capsroute/errors.hpp"

namespace capsroute {

PoseMetrics pose_trajectory_metrics(std::span<const Tensor> poses) {
  if (poses.empty()) throw ContractError("pose trajectory needs at least one step");
  const Shape shape = poses.front().shape();
  if (shape.size() != 2) throw ShapeError("pose capsules must be (d_cov, d_out), got " + shape_str(shape));
  const std::size_t rows = shape[0], cols = shape[1];

  auto row = [&](const Tensor& t, std::size_t c) { return t.values().subspan(c * cols, cols); };
  auto dot = [&](std::span<const double> x, std::span<const double> y) {
    double s = 0;
    for (std::size_t k = 0; k < cols; ++k) s += x[k] * y[k];
    return s;
  };

  std::vector<double> base_norm(rows);
  for (std::size_t c = 0; c < rows; ++c) {
    auto p0 = row(poses.front(), c);
    base_norm[c] = std::sqrt(dot(p0, p0));
    if (base_norm[c] == 0) throw DomainError("initial pose vector " + std::to_string(c) + " is zero");
  }

  PoseMetrics out;
  for (const auto& pose : poses) {
    if (pose.shape() != shape) throw ShapeError("pose shape changes along the trajectory");
    std::vector<double> rel(rows), ratio(rows), cosine(rows);
    for (std::size_t c = 0; c < rows; ++c) {
      auto p0 = row(poses.front(), c);
      auto p = row(pose, c);
      double dist2 = 0;
      for (std::size_t k = 0; k < cols; ++k) dist2 += (p[k] - p0[k]) * (p[k] - p0[k]);
      const double norm = std::sqrt(dot(p, p));
      rel[c] = std::sqrt(dist2) / base_norm[c];
      ratio[c] = norm / base_norm[c];
      cosine[c] = norm == 0 ? 0.0 : dot(p, p0) / (norm * base_norm[c]);
    }
    out.rel_dist.push_back(std::move(rel));
    out.norm_ratio.push_back(std::move(ratio));
    out.cosine.push_back(std::move(cosine));
  }
  return out;
}

std::string pose_metrics_csv(const PoseMetrics& m) {
  std::ostringstream os;
  os.precision(17);
  const std::size_t rows = m.steps() ? m.rel_dist.front().size() : 0;
  os << "step";
  for (std::size_t c = 0; c < rows; ++c) os << ",rel_dist_" << c << ",norm_ratio_" << c << ",cosine_" << c;
  os << '\n';
  for (std::size_t t = 0; t < m.steps(); ++t) {
    os << t;
    for (std::size_t c = 0; c < rows; ++c) os << ',' << m.rel_dist[t][c] << ',' << m.norm_ratio[t][c] << ',' << m.cosine[t][c];
    os << '\n';
  }
  return os.str();
}

std::vector<IterationSummary> trace_summary(const RoutingTrace& trace) {
  std::vector<IterationSummary> out;
  for (const auto& it : trace.iterations) {
    const std::size_t b = it.R.extent(0), n_in = it.R.extent(1), n_out = it.R.extent(2);
    const auto R = it.R.values();
    const auto D = it.D_use.values();
    std::vector<double> entropy(b * n_in, 0.0), mean_use(b * n_out, 0.0);
    for (std::size_t s = 0; s < b; ++s) {
      for (std::size_t i = 0; i < n_in; ++i) {
        double h = 0;
        for (std::size_t j = 0; j < n_out; ++j) {
          const double r = R[(s * n_in + i) * n_out + j];
          if (r > 0) h -= r * std::log(r);
          mean_use[s * n_out + j] += D[(s * n_in + i) * n_out + j];
        }
        entropy[s * n_in + i] = h;
      }
      for (std::size_t j = 0; j < n_out; ++j) {
        if (n_in) mean_use[s * n_out + j] /= static_cast<double>(n_in);
      }
    }
    out.push_back({Tensor({b, n_in}, std::move(entropy)), Tensor({b, n_out}, std::move(mean_use)), it.a_out});
  }
  return out;
}

}  // namespace capsroute
