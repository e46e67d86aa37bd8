#pragma once

// Timing harness for route() over a grid of layer sizes and variants.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "capsroute/routing.hpp"

namespace capsroute {

struct BenchGrid {
  std::vector<std::size_t> n_in{8, 16, 32};
  std::vector<std::size_t> n_out{2, 4, 8};
  // fixed, variable-input, variable-output, plus "-tied" forms of the first two
  std::vector<std::string> variants{"fixed", "variable-input"};
  std::size_t d_cov = 4;
  std::size_t d_in = 4;
  std::size_t d_out = 4;
  std::size_t iters = 3;
  std::size_t batch = 8;
};

/// "n_in=8,16,32;n_out=2,4,8;variant=fixed,variable-input". Keys not given
/// keep their defaults; d_cov, d_in, d_out, iters and batch take one value.
BenchGrid parse_grid(std::string_view text);

struct BenchRow {
  std::string variant;
  std::size_t n_in = 0, n_out = 0, d_cov = 0, d_in = 0, d_out = 0, iters = 0;
  double ns_forward = 0;   // per sample
  double ns_backward = 0;  // per sample, forward on a tape plus backward
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::vector<std::string> warnings;  // soft monotonicity findings
};

RoutingConfig bench_config(std::string_view variant, std::size_t n_in, std::size_t n_out, const BenchGrid& grid);

BenchReport run_bench(const BenchGrid& grid, std::size_t reps, std::uint64_t seed);

inline constexpr std::string_view kBenchHeader =
    "variant,n_in,n_out,d_cov,d_in,d_out,iters,ns_per_sample_forward,ns_per_sample_backward";

std::string bench_csv(const BenchReport& report);

/// Checks header, column count and value types; returns the number of data
/// rows. Throws DataError describing the first problem.
std::size_t validate_bench_csv(std::string_view csv);

}  // namespace capsroute
