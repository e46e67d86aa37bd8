#include <cmath>
#include <numbers>

#include "capsroute/routing.hpp"

namespace capsroute {

namespace {

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

RoutingState route_reference(const RoutingParams& params, const CapsuleBatch& caps, const RoutingConfig& config,
                             const std::optional<Tensor>& output_bias, std::vector<std::vector<double>>* first_iter_R) {
  check_params(params, config);
  const RoutingMode mode = config.mode();
  const std::size_t nb = caps.mu_in.extent(0);
  const std::size_t ni = caps.mu_in.extent(1);
  const std::size_t nj = mode == RoutingMode::VariableOutput ? ni : *config.n_out;
  const std::size_t nc = config.d_cov, nd = config.d_in, nh = config.d_out;
  if (ni > ReferenceLimits::max_inputs || nj > ReferenceLimits::max_outputs || nc > ReferenceLimits::max_dim ||
      nd > ReferenceLimits::max_dim || nh > ReferenceLimits::max_dim) {
    throw ContractError("instance exceeds the reference implementation's size limits");
  }
  if (caps.mu_in.extent(2) != nc || caps.mu_in.extent(3) != nd) throw ShapeError("mu_in dims do not match config");
  if (config.n_in && ni != *config.n_in) throw ShapeError("input count does not match config");
  if (mode == RoutingMode::VariableOutput && !output_bias) {
    throw ConfigError("variable-output routing needs a per-output bias");
  }

  const double* W = params.W.data();
  const double* B = params.B.data();
  const double* beta_use = params.beta_use.data();
  const double* beta_ign = params.beta_ignore().data();
  const double* mu_in = caps.mu_in.data();
  const double* a_in = caps.a_in.data();

  auto w_at = [&](std::size_t i, std::size_t j, std::size_t d, std::size_t h) {
    switch (mode) {
      case RoutingMode::Fixed:
        return W[((i * nj + j) * nd + d) * nh + h];
      case RoutingMode::VariableInput:
        return W[(j * nd + d) * nh + h];
      case RoutingMode::VariableOutput:
        return W[d * nh + h];
    }
    return 0.0;
  };
  auto b_at = [&](std::size_t s, std::size_t i, std::size_t j, std::size_t c, std::size_t h) {
    switch (mode) {
      case RoutingMode::Fixed:
        return B[((i * nj + j) * nc + c) * nh + h];
      case RoutingMode::VariableInput:
        return B[(j * nc + c) * nh + h];
      case RoutingMode::VariableOutput: {
        const Tensor& bias = *output_bias;
        return bias.rank() == 4 ? bias.at({s, j, c, h}) : bias.at({j, c, h});
      }
    }
    return 0.0;
  };
  auto beta_at = [&](const double* beta, std::size_t i, std::size_t j) {
    switch (mode) {
      case RoutingMode::Fixed:
        return beta[i * nj + j];
      case RoutingMode::VariableInput:
        return beta[j];
      case RoutingMode::VariableOutput:
        return beta[0];
    }
    return 0.0;
  };

  std::vector<double> a_out_all(nb * nj), mu_out_all(nb * nj * nc * nh), var_out_all(nb * nj * nc * nh);

  for (std::size_t s = 0; s < nb; ++s) {
    // V[i][j][c][h]
    std::vector<double> V(ni * nj * nc * nh);
    auto v = [&](std::size_t i, std::size_t j, std::size_t c, std::size_t h) -> double& {
      return V[((i * nj + j) * nc + c) * nh + h];
    };
    for (std::size_t i = 0; i < ni; ++i)
      for (std::size_t j = 0; j < nj; ++j)
        for (std::size_t c = 0; c < nc; ++c)
          for (std::size_t h = 0; h < nh; ++h) {
            double acc = 0;
            for (std::size_t d = 0; d < nd; ++d) acc += w_at(i, j, d, h) * mu_in[((s * ni + i) * nc + c) * nd + d];
            v(i, j, c, h) = acc + b_at(s, i, j, c, h);
          }

    std::vector<double> R(ni * nj), D_use(ni * nj), D_ign(ni * nj);
    std::vector<double> a_out(nj, 0.0), mu(nj * nc * nh, 0.0), var(nj * nc * nh, 0.0);

    for (std::size_t it = 0; it < config.n_iters; ++it) {
      // E-Step
      if (it == 0) {
        for (auto& r : R) r = 1.0 / static_cast<double>(nj);
        if (first_iter_R) first_iter_R->push_back(R);
      } else {
        for (std::size_t i = 0; i < ni; ++i) {
          double total = 0;
          for (std::size_t j = 0; j < nj; ++j) {
            double prod = 1, exponent = 0;
            for (std::size_t c = 0; c < nc; ++c)
              for (std::size_t h = 0; h < nh; ++h) {
                const double s2 = var[(j * nc + c) * nh + h];
                const double diff = v(i, j, c, h) - mu[(j * nc + c) * nh + h];
                prod *= 2 * std::numbers::pi * s2;
                exponent += diff * diff / (2 * s2);
              }
            const double P = 1.0 / std::sqrt(prod) * std::exp(-exponent);
            R[i * nj + j] = logistic(a_out[j]) * P;
            total += R[i * nj + j];
          }
          for (std::size_t j = 0; j < nj; ++j) R[i * nj + j] /= total;
        }
      }
      // D-Step
      for (std::size_t i = 0; i < ni; ++i) {
        const double f = logistic(a_in[s * ni + i]);
        for (std::size_t j = 0; j < nj; ++j) {
          D_use[i * nj + j] = f * R[i * nj + j];
          D_ign[i * nj + j] = f - D_use[i * nj + j];
        }
      }
      // M-Step
      for (std::size_t j = 0; j < nj; ++j) {
        double score = 0, used = 0;
        for (std::size_t i = 0; i < ni; ++i) {
          score += D_use[i * nj + j] * beta_at(beta_use, i, j) - D_ign[i * nj + j] * beta_at(beta_ign, i, j);
          used += D_use[i * nj + j];
        }
        a_out[j] = score;
        for (std::size_t c = 0; c < nc; ++c)
          for (std::size_t h = 0; h < nh; ++h) {
            double m = 0;
            for (std::size_t i = 0; i < ni; ++i) m += D_use[i * nj + j] * v(i, j, c, h);
            m /= used + config.denom_eps;
            double s2 = 0;
            for (std::size_t i = 0; i < ni; ++i) {
              const double diff = v(i, j, c, h) - m;
              s2 += D_use[i * nj + j] * diff * diff;
            }
            mu[(j * nc + c) * nh + h] = m;
            var[(j * nc + c) * nh + h] = s2 / (used + config.denom_eps) + config.var_floor;
          }
      }
    }

    for (std::size_t j = 0; j < nj; ++j) a_out_all[s * nj + j] = a_out[j];
    for (std::size_t k = 0; k < nj * nc * nh; ++k) {
      mu_out_all[s * nj * nc * nh + k] = mu[k];
      var_out_all[s * nj * nc * nh + k] = var[k];
    }
  }

  return {Tensor({nb, nj}, std::move(a_out_all)), Tensor({nb, nj, nc, nh}, std::move(mu_out_all)),
          Tensor({nb, nj, nc, nh}, std::move(var_out_all))};
}

}  // namespace capsroute
