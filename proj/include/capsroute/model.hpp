#pragma once

// Two-layer routing classifier: a variable-input layer routes any number
// of part capsules to n_hidden capsules, then a fixed layer routes those to
// one capsule per class. Class scores are the final a_out.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capsroute/data.hpp"
#include "capsroute/nn.hpp"
#include "capsroute/optim.hpp"
#include "capsroute/routing.hpp"

namespace capsroute {

struct ModelConfig {
  std::size_t n_classes = 5;
  std::size_t n_hidden = 16;
  std::size_t d_cov = 4;
  std::size_t d_in = 4;
  std::size_t d_hidden = 4;
  std::size_t n_iters = 3;
  bool tie_betas = false;

  RoutingConfig layer1() const;
  RoutingConfig layer2() const;
  void validate() const;
};

struct Model {
  ModelConfig config;
  RoutingParams layer1;
  RoutingParams layer2;

  static Model init(const ModelConfig& config, std::uint64_t seed);

  // "layer1.W", "layer2.beta_use", ...
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;
};

struct ForwardOptions {
  std::optional<std::size_t> n_iters;  // overrides config.n_iters in both layers
  bool capture_trace = false;
};

struct ForwardResult {
  Tensor scores;  // (b, n_classes)
  std::optional<RoutingTrace> trace1;
  std::optional<RoutingTrace> trace2;
};

ForwardResult forward(const Model& model, const CapsuleBatch& caps, const ForwardOptions& options = {});

TensorBundle to_bundle(const Model& model);
Model from_bundle(const TensorBundle& bundle);
void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

// Copy of the model with every beta set to zero.
Model zero_betas(const Model& model);

struct TrainConfig {
  ModelConfig model;
  std::size_t epochs = 5;
  std::size_t batch_size = 20;
  OneCycleSchedule schedule;  // total_steps is derived from epochs and data size
  RAdamOptions radam;
  bool mixup = true;
  BetaParams mixup_beta;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

// JSON object with flat keys (see README); unknown keys are rejected.
TrainConfig parse_train_config(std::string_view text);
std::string to_text(const TrainConfig& config);

struct Evaluation {
  double loss = 0;
  double accuracy = 0;
  std::vector<int> predictions;
};

Evaluation evaluate(const Model& model, const LabeledCapsules& data, std::size_t batch_size = 100,
                    std::optional<std::size_t> n_iters = std::nullopt);

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;  // mean minibatch loss (on mixed batches when mixup is on)
  double valid_loss = 0;
  double valid_accuracy = 0;
  double seconds = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains in place. Throws NumericError when the loss turns non-finite.
std::vector<EpochLog> train(Model& model, const LabeledCapsules& train_data, const LabeledCapsules& valid_data,
                            const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace capsroute
