#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "capsroute/bench.hpp"
#include "capsroute/model.hpp"
#include "helpers.hpp"

using namespace capsroute;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.n_hidden = 6;
  c.n_iters = 2;
  return c;
}

TrainConfig small_train() {
  TrainConfig t;
  t.model = small_model();
  t.epochs = 2;
  t.batch_size = 10;
  t.schedule.lr_peak = 5e-3;
  return t;
}

}  // namespace

TEST(Model, ShapesAndParameters) {
  const auto model = Model::init(small_model(), 1);
  Model copy = model;
  auto names = copy.named_parameters();
  ASSERT_EQ(names.size(), 8u);
  EXPECT_EQ(names[0].first, "layer1.W");
  EXPECT_EQ(names[0].second->shape(), (Shape{6, 4, 4}));

  const Constellation task{ConstellationSpec{}};
  const auto data = task.generate(0, 0, 3);
  const auto out = forward(model, data.caps, {std::nullopt, true});
  EXPECT_EQ(out.scores.shape(), (Shape{3, 5}));
  ASSERT_TRUE(out.trace1 && out.trace2);
  EXPECT_EQ(out.trace1->iterations.size(), 2u);
  EXPECT_EQ(out.trace2->iterations[0].R.shape(), (Shape{3, 6, 5}));
  EXPECT_EQ(forward(model, data.caps, {1, true}).trace2->iterations.size(), 1u);

  ModelConfig bad = small_model();
  bad.n_classes = 1;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Model, BundleRoundTrip) {
  const auto model = Model::init(small_model(), 2);
  const auto path = std::filesystem::temp_directory_path() / "capsroute_test_model.caps";
  save_model(path.string(), model);
  const auto back = load_model(path.string());
  std::filesystem::remove(path);
  EXPECT_EQ(back.config.n_hidden, 6u);
  EXPECT_EQ(back.config.n_iters, 2u);
  const auto a = model.named_parameters(), b = back.named_parameters();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].first, b[k].first);
    EXPECT_EQ(a[k].second->storage(), b[k].second->storage());
  }

  auto bundle = to_bundle(model);
  bundle.tensors.pop_back();
  EXPECT_THROW(from_bundle(bundle), DataError);
}

TEST(Model, TiedBundle) {
  auto c = small_model();
  c.tie_betas = true;
  const auto back = from_bundle(to_bundle(Model::init(c, 3)));
  EXPECT_TRUE(back.layer1.tied());
  EXPECT_TRUE(back.config.tie_betas);
}

TEST(Model, ZeroBetas) {
  auto model = Model::init(small_model(), 4);
  std::mt19937_64 rng(9);
  for (auto& [name, t] : model.named_parameters()) *t = testutil::random_tensor(t->shape(), rng);
  const auto z = zero_betas(model);
  for (const auto& [name, t] : z.named_parameters()) {
    if (name.find("beta") != std::string::npos) {
      for (double v : t->values()) EXPECT_EQ(v, 0.0);
    }
  }
  EXPECT_EQ(z.layer1.W.storage(), model.layer1.W.storage());
}

TEST(TrainConfig, ParseAndRoundTrip) {
  const auto c = parse_train_config(R"({"n_hidden": 32, "n_iters": 2, "lr_peak": 0.005, "mixup": false})");
  EXPECT_EQ(c.model.n_hidden, 32u);
  EXPECT_EQ(c.model.n_iters, 2u);
  EXPECT_EQ(c.schedule.lr_peak, 0.005);
  EXPECT_FALSE(c.mixup);
  EXPECT_EQ(c.batch_size, 20u);
  EXPECT_EQ(c.schedule.beta1_peak, 0.9 * 0.999);
  EXPECT_EQ(to_text(parse_train_config(to_text(c))), to_text(c));
  EXPECT_THROW(parse_train_config(R"({"lr_peek": 1})"), ConfigError);
  EXPECT_THROW(parse_train_config(R"({"epochs": "five"})"), ConfigError);
  EXPECT_THROW(parse_train_config(R"({"batch_size": 0})"), ConfigError);
}

TEST(TrainConfig, ShippedConfigParses) {
  const auto path = std::filesystem::path(CAPSROUTE_CONFIG_DIR) / "constellation.json";
  std::ifstream in(path);
  ASSERT_TRUE(in) << path;
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto c = parse_train_config(text);
  EXPECT_EQ(c.batch_size, 20u);
  EXPECT_TRUE(c.mixup);
  EXPECT_EQ(c.epochs, 5u);
}

TEST(Training, DeterministicAndLearns) {
  const Constellation task{ConstellationSpec{}};
  const auto tr = task.generate(1, 0, 100), va = task.generate(2, 0, 50);
  auto cfg = small_train();
  auto m1 = Model::init(cfg.model, 0), m2 = Model::init(cfg.model, 0);
  const auto before = evaluate(m1, va);
  EXPECT_NEAR(before.loss, std::log(5.0), 0.5);
  const auto l1 = train(m1, tr, va, cfg), l2 = train(m2, tr, va, cfg);
  ASSERT_EQ(l1.size(), 2u);
  EXPECT_EQ(l1[0].train_loss, l2[0].train_loss);
  EXPECT_EQ(l1[1].valid_loss, l2[1].valid_loss);
  EXPECT_EQ(m1.layer2.W.storage(), m2.layer2.W.storage());
  EXPECT_LT(l1[1].train_loss, std::log(5.0));
  EXPECT_TRUE(std::isfinite(l1[1].valid_loss));
  EXPECT_EQ(evaluate(m1, va).accuracy, l1[1].valid_accuracy);
}

TEST(Training, ThreadsAgreeWithSingleThread) {
  const Constellation task{ConstellationSpec{}};
  const auto tr = task.generate(1, 0, 40), va = task.generate(2, 0, 20);
  auto cfg = small_train();
  cfg.epochs = 1;
  auto m1 = Model::init(cfg.model, 0), m4 = Model::init(cfg.model, 0);
  train(m1, tr, va, cfg);
  cfg.threads = 4;
  train(m4, tr, va, cfg);
  EXPECT_LT(testutil::max_abs_diff(m1.layer1.W, m4.layer1.W), 1e-9);
  auto m4b = Model::init(cfg.model, 0);
  train(m4b, tr, va, cfg);
  EXPECT_EQ(m4.layer1.W.storage(), m4b.layer1.W.storage());
}

TEST(Training, MixupOffRunsAndDiffers) {
  const Constellation task{ConstellationSpec{}};
  const auto tr = task.generate(1, 0, 40), va = task.generate(2, 0, 20);
  auto cfg = small_train();
  cfg.epochs = 1;
  auto a = Model::init(cfg.model, 0), b = Model::init(cfg.model, 0);
  train(a, tr, va, cfg);
  cfg.mixup = false;
  const auto logs = train(b, tr, va, cfg);
  EXPECT_TRUE(std::isfinite(logs[0].train_loss));
  EXPECT_NE(a.layer1.W.storage(), b.layer1.W.storage());
}

TEST(Training, RejectsIncompatibleData) {
  const Constellation task{ConstellationSpec{}};
  auto data = task.generate(1, 0, 10);
  auto model = Model::init(small_model(), 0);
  data.labels[0] = 7;
  EXPECT_ANY_THROW(train(model, data, data, small_train()));
  ModelConfig c3 = small_model();
  c3.d_in = 3;
  c3.d_cov = 3;
  EXPECT_THROW(evaluate(Model::init(c3, 0), task.generate(1, 0, 4)), DataError);
}

TEST(Bench, GridParsing) {
  const auto g = parse_grid("n_in=4,8;n_out=2;variant=fixed,variable-output;iters=2");
  EXPECT_EQ(g.n_in, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(g.n_out, (std::vector<std::size_t>{2}));
  EXPECT_EQ(g.variants.size(), 2u);
  EXPECT_EQ(g.iters, 2u);
  EXPECT_EQ(g.d_cov, 4u);
  EXPECT_THROW(parse_grid("n_inn=4"), ConfigError);
  EXPECT_THROW(parse_grid("variant=diagonal"), ConfigError);
  EXPECT_THROW(parse_grid("n_in=x"), ConfigError);
  EXPECT_THROW(parse_grid("iters=1,2"), ConfigError);
}

TEST(Bench, RunEmitsValidCsv) {
  auto g = parse_grid("n_in=2,4;n_out=2,3;variant=fixed,variable-input,variable-output,fixed-tied");
  g.batch = 2;
  g.d_cov = g.d_in = g.d_out = 2;
  const auto report = run_bench(g, 1, 0);
  EXPECT_EQ(report.rows.size(), 16u);
  const auto csv = bench_csv(report);
  EXPECT_EQ(csv.substr(0, kBenchHeader.size()), kBenchHeader);
  EXPECT_EQ(validate_bench_csv(csv), 16u);
  for (const auto& r : report.rows) {
    EXPECT_GT(r.ns_forward, 0);
    EXPECT_GT(r.ns_backward, 0);
  }
  EXPECT_THROW(validate_bench_csv("variant,n_in\nfixed,2\n"), DataError);
  EXPECT_THROW(validate_bench_csv(std::string(kBenchHeader) + "\nfixed,2,2,2,2,2,3,abc,1\n"), DataError);
  EXPECT_THROW(validate_bench_csv(std::string(kBenchHeader) + "\nfixed,2,2,2,2,2,3,1\n"), DataError);
}
