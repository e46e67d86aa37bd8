#include <gtest/gtest.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "capsroute/bench.hpp"
#include "capsroute/data.hpp"
#include "capsroute/model.hpp"
#include "capsroute/ops.hpp"
#include "../src/json_util.hpp"

using namespace capsroute;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("capsroute_cli_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Run run(const std::string& args) {
  const auto out = work_dir() / "stdout.txt";
  const std::string cmd = std::string(CAPSROUTE_BIN) + " " + args + " > " + out.string() + " 2> " +
                          (work_dir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out)};
}

std::string path(const std::string& name) { return (work_dir() / name).string(); }

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream in(line);
  for (std::string f; std::getline(in, f, ',');) out.push_back(f);
  return out;
}

}  // namespace

TEST(Cli, GenDataRoundTripAndDeterminism) {
  ASSERT_EQ(run("gen-data --n 100 --seed 7 --out " + path("a.caps")).code, 0);
  ASSERT_EQ(run("gen-data --n 100 --seed 7 --out " + path("b.caps")).code, 0);
  EXPECT_EQ(slurp(path("a.caps")), slurp(path("b.caps")));
  EXPECT_EQ(read_capsules(path("a.caps")).size(), 100u);
  ASSERT_EQ(run("gen-data --n 100 --seed 8 --out " + path("c.caps")).code, 0);
  EXPECT_NE(slurp(path("a.caps")), slurp(path("c.caps")));
}

TEST(Cli, GenDataEmptyAndTextForm) {
  ASSERT_EQ(run("gen-data --n 0 --out " + path("empty.caps")).code, 0);
  const auto empty = read_capsules(path("empty.caps"));
  EXPECT_EQ(empty.size(), 0u);
  EXPECT_EQ(slurp(path("empty.caps")).substr(0, 4), "CAPS");
  ASSERT_EQ(run("gen-data --n 3 --out " + path("small.json")).code, 0);
  EXPECT_EQ(read_capsules(path("small.json")).size(), 3u);
  EXPECT_EQ(slurp(path("small.json")).front(), '{');
}

TEST(Cli, GenDataSpecErrors) {
  std::ofstream(path("bad_spec.json")) << R"({"n_classes": 1})";
  EXPECT_EQ(run("gen-data --spec " + path("bad_spec.json") + " --out " + path("x.caps")).code, 2);
  std::ofstream(path("typo_spec.json")) << R"({"n_clases": 4})";
  EXPECT_EQ(run("gen-data --spec " + path("typo_spec.json") + " --out " + path("x.caps")).code, 2);
  EXPECT_EQ(run("gen-data --spec " + path("missing.json") + " --out " + path("x.caps")).code, 2);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("gen-data").code, 1);
  EXPECT_EQ(run("gen-data --out x --n notanumber").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}

class CliModel : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    std::ofstream(path("small_cfg.json")) << R"({"n_hidden": 8, "n_iters": 2, "lr_peak": 0.005, "batch_size": 10})";
    const auto r = run("train --config " + path("small_cfg.json") + " --n-train 200 --n-valid 100 --epochs 2 --out " +
                       path("model.caps") + " --log " + path("log.csv"));
    ASSERT_EQ(r.code, 0) << r.out;
    train_out = r.out;
  }
  static inline std::string train_out;
};

TEST_F(CliModel, TrainLogsEpochsAndSummary) {
  const auto out = lines(train_out);
  ASSERT_GE(out.size(), 4u);
  EXPECT_EQ(out[0], "epoch,train_loss,valid_loss,valid_accuracy,seconds");
  EXPECT_EQ(split(out[1]).size(), 5u);
  const auto summary = detail::json::parse(out.back());
  EXPECT_EQ(summary["epochs"], 2);
  EXPECT_GE(summary["valid_accuracy"].get<double>(), 0.0);
  const auto log = lines(slurp(path("log.csv")));
  EXPECT_EQ(log.size(), 3u);
}

TEST_F(CliModel, TrainIsDeterministic) {
  const auto r = run("train --config " + path("small_cfg.json") + " --n-train 200 --n-valid 100 --epochs 2");
  ASSERT_EQ(r.code, 0);
  const auto a = split(lines(r.out)[1]), b = split(lines(train_out)[1]);
  EXPECT_EQ(a[1], b[1]);
  EXPECT_EQ(a[2], b[2]);
}

TEST_F(CliModel, NoMixupRuns) {
  const auto r = run("train --config " + path("small_cfg.json") + " --n-train 60 --n-valid 20 --epochs 1 --no-mixup");
  ASSERT_EQ(r.code, 0);
  EXPECT_NE(split(lines(r.out)[1])[1], "nan");
}

TEST_F(CliModel, RouteMatchesLibraryAndTrace) {
  ASSERT_EQ(run("gen-data --n 12 --seed 3 --out " + path("route_in.caps")).code, 0);
  const auto r = run("route --model " + path("model.caps") + " --input " + path("route_in.caps") + " --iters 1 --trace " +
                     path("trace.csv"));
  ASSERT_EQ(r.code, 0);
  const auto out = lines(r.out);
  ASSERT_EQ(out.size(), 13u);
  EXPECT_EQ(out[0], "sample,label,prediction,p_0,p_1,p_2,p_3,p_4");

  const auto model = load_model(path("model.caps"));
  const auto data = read_capsules(path("route_in.caps"));
  const auto probs = softmax(forward(model, data.caps, {1, false}).scores, 1);
  for (std::size_t s = 0; s < 12; ++s) {
    const auto f = split(out[s + 1]);
    ASSERT_EQ(f.size(), 8u);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(std::stod(f[3 + c]), probs.at({s, c}), 1e-9);
  }

  const auto trace = lines(slurp(path("trace.csv")));
  EXPECT_EQ(trace[0], "layer,iteration,sample,i,j,R,D_use,D_ign,log_P");
  std::map<std::string, double> sums;
  for (std::size_t k = 1; k < trace.size(); ++k) {
    const auto f = split(trace[k]);
    EXPECT_EQ(f[1], "1");
    sums[f[0] + "/" + f[2] + "/" + f[3]] += std::stod(f[5]);
  }
  EXPECT_EQ(sums.size(), 12u * (10 + 8));
  for (const auto& [key, s] : sums) EXPECT_NEAR(s, 1.0, 1e-6) << key;
}

TEST_F(CliModel, RouteAccuracyMatchesTraining) {
  // Same stream and count as the training split.
  ASSERT_EQ(run("gen-data --n 200 --seed 1 --out " + path("train_split.caps")).code, 0);
  const auto r = run("route --model " + path("model.caps") + " --input " + path("train_split.caps"));
  ASSERT_EQ(r.code, 0);
  const auto err = slurp(work_dir() / "stderr.txt");
  const double reported = detail::json::parse(lines(train_out).back())["train_accuracy"].get<double>();
  ASSERT_EQ(err.rfind("accuracy ", 0), 0u) << err;
  EXPECT_NEAR(std::stod(err.substr(9)), reported, 1e-9);
}

TEST_F(CliModel, RouteDimensionMismatch) {
  std::ofstream(path("spec3.json")) << R"({"d_cov": 3, "d_in": 3})";
  ASSERT_EQ(run("gen-data --spec " + path("spec3.json") + " --n 2 --out " + path("d3.caps")).code, 0);
  EXPECT_EQ(run("route --model " + path("model.caps") + " --input " + path("d3.caps")).code, 2);
  const auto err = slurp(work_dir() / "stderr.txt");
  EXPECT_NE(err.find("3x3"), std::string::npos);
  EXPECT_NE(err.find("4x4"), std::string::npos);
  std::ofstream(path("junk.caps")) << "CAPXjunk";
  EXPECT_EQ(run("route --model " + path("model.caps") + " --input " + path("junk.caps")).code, 2);
}

TEST_F(CliModel, InspectModel) {
  const auto r = run("inspect --model " + path("model.caps"));
  ASSERT_EQ(r.code, 0);
  const auto j = detail::json::parse(r.out);
  EXPECT_EQ(j["model"]["n_hidden"], 8);
  EXPECT_EQ(j["layers"]["layer1"]["mode"], "variable-input");
  EXPECT_EQ(j["sharing"]["ratios"]["W_fixed_over_variable_input"], 8.0);
}

TEST(Cli, TrainCapsfileAndErrors) {
  ASSERT_EQ(run("gen-data --n 40 --seed 1 --out " + path("tr.caps")).code, 0);
  ASSERT_EQ(run("gen-data --n 20 --seed 2 --out " + path("va.caps")).code, 0);
  std::ofstream(path("tiny_cfg.json")) << R"({"n_hidden": 4, "n_iters": 1, "batch_size": 10})";
  EXPECT_EQ(run("train --task capsfile --train " + path("tr.caps") + " --valid " + path("va.caps") + " --config " +
                path("tiny_cfg.json") + " --epochs 1")
                .code,
            0);
  EXPECT_EQ(run("train --task capsfile --train " + path("nope.caps") + " --epochs 1").code, 2);
  std::ofstream(path("typo_cfg.json")) << R"({"n_hiden": 4})";
  EXPECT_EQ(run("train --config " + path("typo_cfg.json")).code, 2);
  // A NaN pose makes the loss non-finite once poses reach the E-step.
  std::ofstream(path("two_iter_cfg.json")) << R"({"n_hidden": 4, "n_iters": 2, "batch_size": 10})";
  auto poisoned = read_capsules(path("tr.caps"));
  std::vector<double> mu(poisoned.caps.mu_in.values().begin(), poisoned.caps.mu_in.values().end());
  mu[5] = std::nan("");
  poisoned.caps.mu_in = Tensor(poisoned.caps.mu_in.shape(), mu);
  write_capsules(path("nan.caps"), poisoned);
  EXPECT_EQ(run("train --task capsfile --train " + path("nan.caps") + " --config " + path("two_iter_cfg.json") +
                " --epochs 1")
                .code,
            3);
}

TEST(Cli, GradcheckPassesAndFailsOnTolerance) {
  const auto r = run("gradcheck --seed 0");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("max relative error"), std::string::npos);
  EXPECT_EQ(run("gradcheck --tol 1e-30").code, 3);
}

TEST(Cli, InspectSharingRatios) {
  const auto r = run("inspect --n-in 7 --n-out 3 --d-cov 2 --d-in 2 --d-out 2");
  ASSERT_EQ(r.code, 0);
  const auto j = detail::json::parse(r.out);
  EXPECT_EQ(j["sharing"]["ratios"]["W_fixed_over_variable_input"], 7.0);
  EXPECT_EQ(j["sharing"]["ratios"]["W_fixed_over_variable_output"], 21.0);
  EXPECT_EQ(j["sharing"]["param_count"]["fixed"]["W"], 7 * 3 * 2 * 2);
}

TEST(Cli, BenchCsv) {
  const auto r = run("bench --grid \"n_in=4,8;n_out=2;variant=fixed,variable-input;batch=2\" --reps 1 --csv " +
                     path("bench.csv"));
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(validate_bench_csv(slurp(path("bench.csv"))), 4u);
  EXPECT_EQ(run("bench --grid \"n_in=abc\"").code, 2);
}
