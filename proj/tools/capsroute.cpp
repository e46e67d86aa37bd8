// capsroute command-line interface.
//
// Exit codes: 0 success, 1 usage, 2 data or format, 3 failed numeric check.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "capsroute/analysis.hpp"
#include "capsroute/bench.hpp"
#include "capsroute/data.hpp"
#include "capsroute/errors.hpp"
#include "capsroute/instances.hpp"
#include "capsroute/model.hpp"
#include "capsroute/ops.hpp"
#include "json.hpp"

using namespace capsroute;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

// Streams for the constellation task: templates come from the spec seed,
// samples from (seed, stream, index).
constexpr std::uint64_t kTrainStream = 1;
constexpr std::uint64_t kValidStream = 2;

struct NumericFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string slurp_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << text;
}

ConstellationSpec load_spec(const std::string& path) {
  if (path.empty()) return {};
  try {
    return parse_constellation_spec(slurp_text(path));
  } catch (const ConfigError& e) {
    throw DataError(std::string("malformed spec: ") + e.what());
  }
}

// ---- gen-data ----

struct GenArgs {
  std::string spec, out;
  std::size_t n = 100;
  std::size_t first = 0;
  std::string dtype = "f64";
};

int cmd_gen_data(const GenArgs& a, std::uint64_t seed) {
  const Constellation task(load_spec(a.spec));
  const auto data = task.generate(seed, a.first, a.n);
  write_capsules(a.out, data, a.dtype == "f32" ? DType::Float32 : DType::Float64);
  std::vector<std::size_t> counts(task.spec().n_classes, 0);
  for (int label : data.labels) ++counts[static_cast<std::size_t>(label)];
  std::cout << "wrote " << data.size() << " samples (" << task.spec().capsules_per_sample() << " capsules each) to "
            << a.out << "\nclass counts:";
  for (auto c : counts) std::cout << ' ' << c;
  std::cout << '\n';
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string task = "constellation";
  std::string spec, train, valid, config, out, log;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> threads;
  std::size_t n_train = 2000, n_valid = 500;
  bool no_mixup = false;
};

int cmd_train(const TrainArgs& a, std::uint64_t seed) {
  TrainConfig config;
  if (!a.config.empty()) {
    try {
      config = parse_train_config(slurp_text(a.config));
    } catch (const ConfigError& e) {
      throw DataError(std::string("malformed training config: ") + e.what());
    }
  }
  config.seed = seed;
  if (a.epochs) config.epochs = *a.epochs;
  if (a.threads) config.threads = *a.threads;
  if (a.no_mixup) config.mixup = false;
  if (config.epochs == 0 || config.threads == 0) throw DataError("epochs and threads must be positive");

  LabeledCapsules train_data, valid_data;
  if (a.task == "constellation") {
    const Constellation task(load_spec(a.spec));
    train_data = task.generate(kTrainStream, 0, a.n_train);
    valid_data = task.generate(kValidStream, 0, a.n_valid);
    config.model.n_classes = task.spec().n_classes;
    config.model.d_cov = task.spec().d_cov;
    config.model.d_in = task.spec().d_in;
  } else {
    if (a.train.empty()) throw DataError("--task capsfile needs --train");
    train_data = read_capsules(a.train);
    if (a.valid.empty()) {
      std::cerr << "note: no --valid file, validating on the training data\n";
      valid_data = train_data;
    } else {
      valid_data = read_capsules(a.valid);
    }
    config.model.d_cov = train_data.caps.mu_in.extent(2);
    config.model.d_in = train_data.caps.mu_in.extent(3);
  }

  Model model = Model::init(config.model, config.seed);
  std::ofstream log;
  if (!a.log.empty()) {
    log.open(a.log, std::ios::trunc);
    if (!log) throw DataError("cannot write " + a.log);
    log << "epoch,train_loss,valid_loss,valid_accuracy,seconds\n";
    log.precision(10);
  }
  std::cout << "epoch,train_loss,valid_loss,valid_accuracy,seconds\n";
  const auto history = train(model, train_data, valid_data, config, [&](const EpochLog& e) {
    std::ostringstream row;
    row.precision(10);
    row << e.epoch << ',' << e.train_loss << ',' << e.valid_loss << ',' << e.valid_accuracy << ',' << e.seconds;
    std::cout << row.str() << std::endl;
    if (log) log << row.str() << '\n';
  });
  if (!a.out.empty()) save_model(a.out, model);
  const auto train_eval = evaluate(model, train_data);
  json summary{{"epochs", history.size()},
               {"train_accuracy", train_eval.accuracy},
               {"valid_accuracy", history.empty() ? 0.0 : history.back().valid_accuracy}};
  std::cout << summary.dump() << '\n';
  return 0;
}

// ---- route ----

struct RouteArgs {
  std::string model, input, trace;
  std::optional<std::size_t> iters;
};

void append_trace(std::ostream& os, int layer, const RoutingTrace& trace, std::size_t sample_offset) {
  for (std::size_t t = 0; t < trace.iterations.size(); ++t) {
    const auto& it = trace.iterations[t];
    const std::size_t b = it.R.extent(0), n_in = it.R.extent(1), n_out = it.R.extent(2);
    for (std::size_t s = 0; s < b; ++s)
      for (std::size_t i = 0; i < n_in; ++i)
        for (std::size_t j = 0; j < n_out; ++j) {
          const std::size_t k = (s * n_in + i) * n_out + j;
          os << layer << ',' << t + 1 << ',' << sample_offset + s << ',' << i << ',' << j << ',' << it.R.values()[k]
             << ',' << it.D_use.values()[k] << ',' << it.D_ign.values()[k] << ',';
          if (it.log_P) os << it.log_P->values()[k];
          os << '\n';
        }
  }
}

int cmd_route(const RouteArgs& a) {
  const Model model = load_model(a.model);
  const auto data = read_capsules(a.input);
  const auto& mu = data.caps.mu_in;
  if (mu.extent(2) != model.config.d_cov || mu.extent(3) != model.config.d_in) {
    throw DataError("input capsules are " + std::to_string(mu.extent(2)) + "x" + std::to_string(mu.extent(3)) +
                    ", model expects " + std::to_string(model.config.d_cov) + "x" + std::to_string(model.config.d_in));
  }
  if (a.iters && *a.iters == 0) throw DataError("--iters must be positive");

  std::ofstream trace;
  if (!a.trace.empty()) {
    trace.open(a.trace, std::ios::trunc);
    if (!trace) throw DataError("cannot write " + a.trace);
    trace.precision(17);
    trace << "layer,iteration,sample,i,j,R,D_use,D_ign,log_P\n";
  }

  const std::size_t k = model.config.n_classes;
  std::cout.precision(10);
  std::cout << "sample";
  if (!data.labels.empty()) std::cout << ",label";
  std::cout << ",prediction";
  for (std::size_t c = 0; c < k; ++c) std::cout << ",p_" << c;
  std::cout << '\n';

  std::size_t correct = 0;
  constexpr std::size_t kChunk = 100;
  for (std::size_t first = 0; first < data.size(); first += kChunk) {
    const std::size_t count = std::min(kChunk, data.size() - first);
    std::vector<std::size_t> idx(count);
    for (std::size_t r = 0; r < count; ++r) idx[r] = first + r;
    const auto batch = select(data, idx);
    const auto result = forward(model, batch.caps, {a.iters, trace.is_open()});
    const auto probs = softmax(result.scores, 1);
    for (std::size_t r = 0; r < count; ++r) {
      const auto row = probs.values().subspan(r * k, k);
      const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      std::cout << first + r;
      if (!data.labels.empty()) {
        std::cout << ',' << batch.labels[r];
        if (pred == batch.labels[r]) ++correct;
      }
      std::cout << ',' << pred;
      for (double p : row) std::cout << ',' << p;
      std::cout << '\n';
    }
    if (trace.is_open()) {
      append_trace(trace, 1, *result.trace1, first);
      append_trace(trace, 2, *result.trace2, first);
    }
  }
  if (!data.labels.empty() && data.size() > 0) {
    std::cerr << "accuracy " << static_cast<double>(correct) / static_cast<double>(data.size()) << '\n';
  }
  return 0;
}

// ---- gradcheck ----

int cmd_gradcheck(std::uint64_t seed, double tol) {
  double worst = 0;
  for (const auto& e : gradcheck_suite(seed)) {
    std::cout << e.instance << ' ' << e.wrt << ' ' << e.error << '\n';
    worst = std::max(worst, e.error);
    if (!std::isfinite(e.error)) worst = INFINITY;
  }
  std::cout << "max relative error " << worst << " (tolerance " << tol << ")\n";
  if (!(worst <= tol)) throw NumericFailure("gradient check failed");
  return 0;
}

// ---- bench ----

int cmd_bench(const std::string& grid_text, std::size_t reps, const std::string& csv_path, std::uint64_t seed) {
  BenchGrid grid;
  try {
    grid = parse_grid(grid_text);
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  const auto report = run_bench(grid, reps, seed);
  const auto csv = bench_csv(report);
  if (csv_path.empty()) {
    std::cout << csv;
  } else {
    write_text(csv_path, csv);
    std::cout << "wrote " << report.rows.size() << " rows to " << csv_path << '\n';
  }
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
  return 0;
}

// ---- inspect ----

json counts_json(const ParamCount& c) {
  return {{"W", c.W}, {"B", c.B}, {"beta_use", c.beta_use}, {"beta_ign", c.beta_ign}, {"total", c.total()}};
}

json sharing_json(std::size_t n_in, std::size_t n_out, std::size_t d_cov, std::size_t d_in, std::size_t d_out,
                  bool tie) {
  auto fixed = RoutingConfig::fixed(n_in, n_out, d_cov, d_in, d_out);
  auto var_in = RoutingConfig::variable_input(n_out, d_cov, d_in, d_out);
  auto var_out = RoutingConfig::variable_output(d_cov, d_in, d_out);
  fixed.tie_betas = var_in.tie_betas = var_out.tie_betas = tie;
  const auto cf = param_count(fixed), ci = param_count(var_in), co = param_count(var_out);
  auto ratio = [](std::size_t a, std::size_t b) { return static_cast<double>(a) / static_cast<double>(b); };
  return {{"dims", {{"n_in", n_in}, {"n_out", n_out}, {"d_cov", d_cov}, {"d_in", d_in}, {"d_out", d_out}, {"tie_betas", tie}}},
          {"param_count", {{"fixed", counts_json(cf)}, {"variable-input", counts_json(ci)}, {"variable-output", counts_json(co)}}},
          {"ratios",
           {{"W_fixed_over_variable_input", ratio(cf.W, ci.W)},
            {"W_fixed_over_variable_output", ratio(cf.W, co.W)},
            {"total_fixed_over_variable_input", ratio(cf.total(), ci.total())}}}};
}

struct InspectArgs {
  std::string model;
  std::size_t n_in = 16, n_out = 5, d_cov = 4, d_in = 4, d_out = 4;
  bool tie = false;
};

int cmd_inspect(const InspectArgs& a) {
  json out;
  if (!a.model.empty()) {
    const Model m = load_model(a.model);
    const auto& c = m.config;
    out["model"] = {{"n_classes", c.n_classes}, {"n_hidden", c.n_hidden}, {"d_cov", c.d_cov},     {"d_in", c.d_in},
                    {"d_hidden", c.d_hidden},   {"n_iters", c.n_iters},   {"tie_betas", c.tie_betas}};
    out["layers"] = {{"layer1", {{"mode", mode_name(c.layer1().mode())}, {"param_count", counts_json(param_count(c.layer1()))}}},
                     {"layer2", {{"mode", mode_name(c.layer2().mode())}, {"param_count", counts_json(param_count(c.layer2()))}}}};
    out["sharing"] = sharing_json(c.n_hidden, c.n_classes, c.d_cov, c.d_hidden, c.d_hidden, c.tie_betas);
  } else {
    out["sharing"] = sharing_json(a.n_in, a.n_out, a.d_cov, a.d_in, a.d_out, a.tie);
  }
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EM capsule routing: data generation, training, inference and diagnostics"};
  app.require_subcommand(1);
  app.fallthrough();
  std::uint64_t seed = 0;
  app.add_option("--seed", seed, "Random seed (sample stream for gen-data)");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a labeled constellation capsule file");
  gen_cmd->add_option("--spec", gen.spec, "Constellation spec (JSON); defaults when omitted");
  gen_cmd->add_option("--out", gen.out, "Output file (.json selects the text form)")->required();
  gen_cmd->add_option("--n", gen.n, "Number of samples");
  gen_cmd->add_option("--first", gen.first, "Index of the first sample in the stream");
  gen_cmd->add_option("--dtype", gen.dtype, "Stored precision")->check(CLI::IsMember({"f32", "f64"}));

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the two-layer routing classifier");
  train_cmd->add_option("--task", tr.task, "Data source")->check(CLI::IsMember({"constellation", "capsfile"}));
  train_cmd->add_option("--spec", tr.spec, "Constellation spec (JSON)");
  train_cmd->add_option("--n-train", tr.n_train, "Constellation training samples");
  train_cmd->add_option("--n-valid", tr.n_valid, "Constellation validation samples");
  train_cmd->add_option("--train", tr.train, "Training capsule file (capsfile task)");
  train_cmd->add_option("--valid", tr.valid, "Validation capsule file (capsfile task)");
  train_cmd->add_option("--config", tr.config, "Training config (JSON)");
  train_cmd->add_option("--out", tr.out, "Model file to write");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs (overrides the config)");
  train_cmd->add_option("--threads", tr.threads, "Data-parallel shards per batch");
  train_cmd->add_option("--log", tr.log, "Per-epoch CSV log");
  train_cmd->add_flag("--no-mixup", tr.no_mixup, "Disable mixup");

  RouteArgs ro;
  auto* route_cmd = app.add_subcommand("route", "Classify capsule samples with a trained model");
  route_cmd->add_option("--model", ro.model, "Model file")->required();
  route_cmd->add_option("--input", ro.input, "Capsule file")->required();
  route_cmd->add_option("--iters", ro.iters, "Routing iterations (defaults to the model's)");
  route_cmd->add_option("--trace", ro.trace, "Per-iteration routing trace CSV");

  double tol = 1e-4;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference checks through route()");
  grad_cmd->add_option("--tol", tol, "Maximum relative error");

  std::string grid_text;
  std::size_t reps = 5;
  std::string csv_path;
  auto* bench_cmd = app.add_subcommand("bench", "Time route() forward and backward over a grid");
  bench_cmd->add_option("--grid", grid_text, "e.g. n_in=8,16,32;n_out=2,4,8;variant=fixed,variable-input");
  bench_cmd->add_option("--reps", reps, "Repetitions per grid point")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--csv", csv_path, "CSV output file (stdout when omitted)");

  InspectArgs in;
  auto* inspect_cmd = app.add_subcommand("inspect", "Parameter counts and sharing ratios");
  inspect_cmd->add_option("--model", in.model, "Model file");
  inspect_cmd->add_option("--n-in", in.n_in, "Input capsules for the sharing table")->check(CLI::PositiveNumber);
  inspect_cmd->add_option("--n-out", in.n_out, "Output capsules for the sharing table")->check(CLI::PositiveNumber);
  inspect_cmd->add_option("--d-cov", in.d_cov, "Pose rows")->check(CLI::PositiveNumber);
  inspect_cmd->add_option("--d-in", in.d_in, "Input pose columns")->check(CLI::PositiveNumber);
  inspect_cmd->add_option("--d-out", in.d_out, "Output pose columns")->check(CLI::PositiveNumber);
  inspect_cmd->add_flag("--tie-betas", in.tie, "Share one beta for use and ignore");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, seed);
    if (*train_cmd) return cmd_train(tr, seed);
    if (*route_cmd) return cmd_route(ro);
    if (*grad_cmd) return cmd_gradcheck(seed, tol);
    if (*bench_cmd) return cmd_bench(grid_text, reps, csv_path, seed);
    if (*inspect_cmd) return cmd_inspect(in);
  } catch (const NumericFailure& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
