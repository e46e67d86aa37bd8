#include "capsroute/bench.hpp"

#include <chrono>
#include <random>
#include <sstream>

#include "capsroute/errors.hpp"
#include "capsroute/ops.hpp"

namespace capsroute {

namespace {

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::size_t to_count(const std::string& s, std::string_view key) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size() || s.empty() || s[0] == '-' || v == 0) {
    throw ConfigError("grid key '" + std::string(key) + "' needs positive integers, got '" + s + "'");
  }
  return static_cast<std::size_t>(v);
}

bool known_variant(std::string_view v) {
  return v == "fixed" || v == "variable-input" || v == "variable-output" || v == "fixed-tied" ||
         v == "variable-input-tied";
}

}  // namespace

BenchGrid parse_grid(std::string_view text) {
  BenchGrid g;
  if (text.empty()) return g;
  for (const auto& part : split(text, ';')) {
    if (part.empty()) continue;
    const auto eq = part.find('=');
    if (eq == std::string::npos) throw ConfigError("grid entry '" + part + "' lacks '='");
    const std::string key = part.substr(0, eq);
    const auto values = split(std::string_view(part).substr(eq + 1), ',');
    auto single = [&]() {
      if (values.size() != 1) throw ConfigError("grid key '" + key + "' takes one value");
      return to_count(values[0], key);
    };
    if (key == "n_in" || key == "n_out") {
      std::vector<std::size_t> counts;
      for (const auto& v : values) counts.push_back(to_count(v, key));
      (key == "n_in" ? g.n_in : g.n_out) = counts;
    } else if (key == "variant") {
      for (const auto& v : values) {
        if (!known_variant(v)) throw ConfigError("unknown variant '" + v + "'");
      }
      g.variants = values;
    } else if (key == "d_cov") {
      g.d_cov = single();
    } else if (key == "d_in") {
      g.d_in = single();
    } else if (key == "d_out") {
      g.d_out = single();
    } else if (key == "iters") {
      g.iters = single();
    } else if (key == "batch") {
      g.batch = single();
    } else {
      throw ConfigError("unknown grid key '" + key + "'");
    }
  }
  return g;
}

RoutingConfig bench_config(std::string_view variant, std::size_t n_in, std::size_t n_out, const BenchGrid& grid) {
  RoutingConfig c;
  const bool tied = variant.ends_with("-tied");
  const auto base = tied ? variant.substr(0, variant.size() - 5) : variant;
  if (base == "fixed") {
    c = RoutingConfig::fixed(n_in, n_out, grid.d_cov, grid.d_in, grid.d_out);
  } else if (base == "variable-input") {
    c = RoutingConfig::variable_input(n_out, grid.d_cov, grid.d_in, grid.d_out);
  } else if (base == "variable-output" && !tied) {
    c = RoutingConfig::variable_output(grid.d_cov, grid.d_in, grid.d_out);
  } else {
    throw ConfigError("unknown variant '" + std::string(variant) + "'");
  }
  c.tie_betas = tied;
  c.n_iters = grid.iters;
  return c;
}

BenchReport run_bench(const BenchGrid& grid, std::size_t reps, std::uint64_t seed) {
  if (reps == 0) throw ConfigError("reps must be positive");
  using clock = std::chrono::steady_clock;
  BenchReport report;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_tensor = [&](Shape shape) {
    std::vector<double> v(shape_numel(shape));
    for (auto& x : v) x = normal(rng);
    return Tensor(std::move(shape), std::move(v));
  };

  for (const auto& variant : grid.variants) {
    for (auto n_out : grid.n_out) {
      double previous = 0;
      for (auto n_in : grid.n_in) {
        const auto config = bench_config(variant, n_in, n_out, grid);
        auto params = init_params<double>(config, rng());
        const CapsuleBatch caps{random_tensor({grid.batch, n_in}),
                                random_tensor({grid.batch, n_in, grid.d_cov, grid.d_in})};
        RouteOptions options;
        // Variable-output mode routes n_in inputs to n_in outputs.
        if (config.mode() == RoutingMode::VariableOutput) {
          options.output_bias = random_tensor({n_in, grid.d_cov, grid.d_out});
        }

        auto t0 = clock::now();
        for (std::size_t r = 0; r < reps; ++r) (void)route(params, caps, config, options);
        auto t1 = clock::now();
        for (std::size_t r = 0; r < reps; ++r) {
          Tape tape;
          RoutingParams tracked = params;
          for (auto& [name, t] : tracked.named_parameters()) *t = tape.watch(*t);
          const auto out = route(tracked, caps, config, options);
          (void)tape.backward(sum_all(out.output.a_out) + sum_all(out.output.mu_out));
        }
        auto t2 = clock::now();

        const double samples = static_cast<double>(reps * grid.batch);
        BenchRow row{variant,    n_in,       n_out, grid.d_cov, grid.d_in, grid.d_out, grid.iters,
                     std::chrono::duration<double, std::nano>(t1 - t0).count() / samples,
                     std::chrono::duration<double, std::nano>(t2 - t1).count() / samples};
        if (previous > 0 && row.ns_forward < previous) {
          std::ostringstream w;
          w << variant << " n_out=" << n_out << ": forward time drops from " << previous << " to " << row.ns_forward
            << " ns/sample at n_in=" << n_in;
          report.warnings.push_back(w.str());
        }
        previous = row.ns_forward;
        report.rows.push_back(row);
      }
    }
  }
  return report;
}

std::string bench_csv(const BenchReport& report) {
  std::ostringstream os;
  os << kBenchHeader << '\n';
  for (const auto& r : report.rows) {
    os << r.variant << ',' << r.n_in << ',' << r.n_out << ',' << r.d_cov << ',' << r.d_in << ',' << r.d_out << ','
       << r.iters << ',' << r.ns_forward << ',' << r.ns_backward << '\n';
  }
  return os.str();
}

std::size_t validate_bench_csv(std::string_view csv) {
  auto lines = split(csv, '\n');
  if (!lines.empty() && lines.back().empty()) lines.pop_back();
  if (lines.empty() || lines[0] != kBenchHeader) throw DataError("bench CSV header mismatch");
  for (std::size_t k = 1; k < lines.size(); ++k) {
    const auto cells = split(lines[k], ',');
    const std::string where = "bench CSV row " + std::to_string(k);
    if (cells.size() != 9) throw DataError(where + ": expected 9 columns");
    if (!known_variant(cells[0])) throw DataError(where + ": unknown variant '" + cells[0] + "'");
    for (std::size_t c = 1; c <= 6; ++c) {
      try {
        (void)to_count(cells[c], "column");
      } catch (const ConfigError&) {
        throw DataError(where + ": column " + std::to_string(c) + " is not a positive integer");
      }
    }
    for (std::size_t c = 7; c <= 8; ++c) {
      std::size_t used = 0;
      double v = -1;
      try {
        v = std::stod(cells[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cells[c].size() || !(v > 0)) throw DataError(where + ": column " + std::to_string(c) + " is not a positive time");
    }
  }
  return lines.size() - 1;
}

}  // namespace capsroute
