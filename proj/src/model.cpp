#include "capsroute/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>
#include <thread>

#include "capsroute/nn.hpp"
#include "capsroute/ops.hpp"
#include "json_util.hpp"

namespace capsroute {

RoutingConfig ModelConfig::layer1() const {
  auto c = RoutingConfig::variable_input(n_hidden, d_cov, d_in, d_hidden);
  c.n_iters = n_iters;
  c.tie_betas = tie_betas;
  return c;
}

RoutingConfig ModelConfig::layer2() const {
  auto c = RoutingConfig::fixed(n_hidden, n_classes, d_cov, d_hidden, d_hidden);
  c.n_iters = n_iters;
  c.tie_betas = tie_betas;
  return c;
}

void ModelConfig::validate() const {
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
  layer1().validate();
  layer2().validate();
}

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  std::mt19937_64 rng(seq);
  const auto s1 = rng(), s2 = rng();
  return {config, init_params<double>(config.layer1(), s1), init_params<double>(config.layer2(), s2)};
}

std::vector<std::pair<std::string, Tensor*>> Model::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, t] : layer1.named_parameters()) out.emplace_back("layer1." + name, t);
  for (auto& [name, t] : layer2.named_parameters()) out.emplace_back("layer2." + name, t);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Model*>(this)->named_parameters()) out.emplace_back(name, t);
  return out;
}

ForwardResult forward(const Model& model, const CapsuleBatch& caps, const ForwardOptions& options) {
  auto c1 = model.config.layer1();
  auto c2 = model.config.layer2();
  if (options.n_iters) c1.n_iters = c2.n_iters = *options.n_iters;
  RouteOptions ro;
  ro.capture_trace = options.capture_trace;
  auto hidden = route(model.layer1, caps, c1, ro);
  auto out = route(model.layer2, CapsuleBatch{hidden.output.a_out, hidden.output.mu_out}, c2, ro);
  return {out.output.a_out, std::move(hidden.trace), std::move(out.trace)};
}

// ---- persistence ----

TensorBundle to_bundle(const Model& model) {
  const auto& c = model.config;
  detail::json meta{{"model", "two-layer-routing-classifier"},
                    {"n_classes", c.n_classes},
                    {"n_hidden", c.n_hidden},
                    {"d_cov", c.d_cov},
                    {"d_in", c.d_in},
                    {"d_hidden", c.d_hidden},
                    {"n_iters", c.n_iters},
                    {"tie_betas", c.tie_betas}};
  TensorBundle b{meta.dump(), {}};
  for (const auto& [name, t] : model.named_parameters()) b.tensors.emplace_back(name, t->detach());
  return b;
}

Model from_bundle(const TensorBundle& bundle) {
  detail::json meta;
  try {
    meta = detail::json::parse(bundle.meta);
  } catch (const detail::json::parse_error& e) {
    throw DataError(std::string("model metadata is not JSON: ") + e.what());
  }
  if (!meta.is_object() || meta.value("model", std::string()) != "two-layer-routing-classifier") {
    throw DataError("bundle does not hold a routing classifier");
  }
  ModelConfig c;
  try {
    detail::reject_unknown_keys(meta, {"model", "n_classes", "n_hidden", "d_cov", "d_in", "d_hidden", "n_iters", "tie_betas"},
                                "model metadata");
    detail::read_key(meta, "n_classes", c.n_classes);
    detail::read_key(meta, "n_hidden", c.n_hidden);
    detail::read_key(meta, "d_cov", c.d_cov);
    detail::read_key(meta, "d_in", c.d_in);
    detail::read_key(meta, "d_hidden", c.d_hidden);
    detail::read_key(meta, "n_iters", c.n_iters);
    detail::read_key(meta, "tie_betas", c.tie_betas);
    c.validate();
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  Model m = Model::init(c, 0);
  for (auto& [name, t] : m.named_parameters()) {
    const Tensor& stored = bundle.get(name);
    if (stored.shape() != t->shape()) {
      throw DataError("tensor '" + name + "' has shape " + shape_str(stored.shape()) + ", expected " +
                      shape_str(t->shape()));
    }
    *t = stored;
  }
  if (bundle.tensors.size() != m.named_parameters().size()) throw DataError("model bundle has extra tensors");
  return m;
}

void save_model(const std::string& path, const Model& model) { write_bundle(path, to_bundle(model)); }

Model load_model(const std::string& path) { return from_bundle(read_bundle(path)); }

Model zero_betas(const Model& model) {
  Model out = model;
  for (auto* layer : {&out.layer1, &out.layer2}) {
    layer->beta_use = Tensor::zeros(layer->beta_use.shape());
    if (layer->beta_ign) layer->beta_ign = Tensor::zeros(layer->beta_ign->shape());
  }
  return out;
}

// ---- configuration ----

TrainConfig parse_train_config(std::string_view text) {
  const auto j = detail::parse_json(text, "training config");
  detail::reject_unknown_keys(j,
                              {"n_classes", "n_hidden", "d_cov", "d_in", "d_hidden", "n_iters", "tie_betas", "epochs",
                               "batch_size", "lr_start", "lr_peak", "beta1_start", "beta1_peak", "warm_frac", "beta2",
                               "eps", "mixup", "mixup_a", "mixup_b", "threads", "seed"},
                              "training config");
  TrainConfig c;
  detail::read_key(j, "n_classes", c.model.n_classes);
  detail::read_key(j, "n_hidden", c.model.n_hidden);
  detail::read_key(j, "d_cov", c.model.d_cov);
  detail::read_key(j, "d_in", c.model.d_in);
  detail::read_key(j, "d_hidden", c.model.d_hidden);
  detail::read_key(j, "n_iters", c.model.n_iters);
  detail::read_key(j, "tie_betas", c.model.tie_betas);
  detail::read_key(j, "epochs", c.epochs);
  detail::read_key(j, "batch_size", c.batch_size);
  detail::read_key(j, "lr_start", c.schedule.lr_start);
  detail::read_key(j, "lr_peak", c.schedule.lr_peak);
  detail::read_key(j, "beta1_start", c.schedule.beta1_start);
  detail::read_key(j, "beta1_peak", c.schedule.beta1_peak);
  detail::read_key(j, "warm_frac", c.schedule.warm_frac);
  detail::read_key(j, "beta2", c.radam.beta2);
  detail::read_key(j, "eps", c.radam.eps);
  detail::read_key(j, "mixup", c.mixup);
  detail::read_key(j, "mixup_a", c.mixup_beta.a);
  detail::read_key(j, "mixup_b", c.mixup_beta.b);
  detail::read_key(j, "threads", c.threads);
  detail::read_key(j, "seed", c.seed);
  c.model.validate();
  if (c.epochs == 0 || c.batch_size == 0 || c.threads == 0) {
    throw ConfigError("epochs, batch_size and threads must be positive");
  }
  if (!(c.schedule.warm_frac > 0 && c.schedule.warm_frac < 1)) throw ConfigError("warm_frac must lie in (0, 1)");
  if (!(c.radam.beta2 > 0 && c.radam.beta2 < 1) || !(c.radam.eps > 0)) throw ConfigError("bad RAdam constants");
  if (!(c.mixup_beta.a > 0 && c.mixup_beta.b > 0)) throw ConfigError("mixup Beta parameters must be positive");
  return c;
}

std::string to_text(const TrainConfig& c) {
  detail::json j{{"n_classes", c.model.n_classes},
                 {"n_hidden", c.model.n_hidden},
                 {"d_cov", c.model.d_cov},
                 {"d_in", c.model.d_in},
                 {"d_hidden", c.model.d_hidden},
                 {"n_iters", c.model.n_iters},
                 {"tie_betas", c.model.tie_betas},
                 {"epochs", c.epochs},
                 {"batch_size", c.batch_size},
                 {"lr_start", c.schedule.lr_start},
                 {"lr_peak", c.schedule.lr_peak},
                 {"beta1_start", c.schedule.beta1_start},
                 {"beta1_peak", c.schedule.beta1_peak},
                 {"warm_frac", c.schedule.warm_frac},
                 {"beta2", c.radam.beta2},
                 {"eps", c.radam.eps},
                 {"mixup", c.mixup},
                 {"mixup_a", c.mixup_beta.a},
                 {"mixup_b", c.mixup_beta.b},
                 {"threads", c.threads},
                 {"seed", c.seed}};
  return j.dump(2);
}

// ---- evaluation and training ----

namespace {

void check_data(const Model& model, const LabeledCapsules& data) {
  const auto& mu = data.caps.mu_in;
  if (mu.rank() != 4 || mu.extent(2) != model.config.d_cov || mu.extent(3) != model.config.d_in) {
    throw DataError("capsules have shape " + shape_str(mu.shape()) + ", model expects (b, n, " +
                    std::to_string(model.config.d_cov) + ", " + std::to_string(model.config.d_in) + ")");
  }
  if (data.labels.size() != data.size()) throw DataError("training and evaluation data need one label per sample");
  for (int label : data.labels) {
    if (label < 0 || static_cast<std::size_t>(label) >= model.config.n_classes) {
      throw DataError("label " + std::to_string(label) + " outside [0, " + std::to_string(model.config.n_classes) + ")");
    }
  }
}

std::vector<std::size_t> iota(std::size_t first, std::size_t count) {
  std::vector<std::size_t> v(count);
  std::iota(v.begin(), v.end(), first);
  return v;
}

std::mt19937_64 batch_rng(std::uint64_t seed, std::size_t epoch, std::size_t batch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(batch)};
  return std::mt19937_64(seq);
}

struct ShardResult {
  double loss = 0;
  std::vector<Tensor> grads;
};

ShardResult shard_gradient(const Model& model, const CapsuleBatch& caps, const Tensor& target, double weight) {
  Tape tape;
  Model local = model;
  auto params = local.named_parameters();
  for (auto& [name, t] : params) *t = tape.watch(*t);
  const auto scores = forward(local, caps).scores;
  const auto loss = cross_entropy(scores, target) * weight;
  auto grads = tape.backward(loss);
  ShardResult out{loss.item(), {}};
  for (auto& [name, t] : params) out.grads.push_back(grads.or_zeros(*t));
  return out;
}

CapsuleBatch rows_of(const CapsuleBatch& caps, std::size_t first, std::size_t count) {
  LabeledCapsules as_labeled{caps, {}};
  const auto idx = iota(first, count);
  return select(as_labeled, idx).caps;
}

Tensor target_rows(const Tensor& target, std::size_t first, std::size_t count) {
  const std::size_t k = target.extent(1);
  auto v = target.values().subspan(first * k, count * k);
  return Tensor({count, k}, std::vector<double>(v.begin(), v.end()));
}

}  // namespace

Evaluation evaluate(const Model& model, const LabeledCapsules& data, std::size_t batch_size,
                    std::optional<std::size_t> n_iters) {
  check_data(model, data);
  Evaluation ev;
  const std::size_t n = data.size();
  const std::size_t k = model.config.n_classes;
  double loss_sum = 0;
  std::size_t correct = 0;
  for (std::size_t first = 0; first < n; first += batch_size) {
    const std::size_t count = std::min(batch_size, n - first);
    const auto idx = iota(first, count);
    const auto batch = select(data, idx);
    const auto scores = forward(model, batch.caps, {n_iters, false}).scores;
    const auto target = one_hot<double>(batch.labels, k);
    loss_sum += cross_entropy(scores, target).item() * static_cast<double>(count);
    const auto s = scores.values();
    for (std::size_t r = 0; r < count; ++r) {
      const auto row = s.subspan(r * k, k);
      const int pred = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
      ev.predictions.push_back(pred);
      if (pred == batch.labels[r]) ++correct;
    }
  }
  ev.loss = n ? loss_sum / static_cast<double>(n) : 0.0;
  ev.accuracy = n ? static_cast<double>(correct) / static_cast<double>(n) : 0.0;
  return ev;
}

std::vector<EpochLog> train(Model& model, const LabeledCapsules& train_data, const LabeledCapsules& valid_data,
                            const TrainConfig& config, const EpochCallback& on_epoch) {
  check_data(model, train_data);
  if (!valid_data.labels.empty() || valid_data.size() > 0) check_data(model, valid_data);
  if (train_data.size() == 0) throw DataError("no training samples");
  if (config.batch_size == 0 || config.threads == 0) throw ConfigError("batch_size and threads must be positive");

  const std::size_t n = train_data.size();
  const std::size_t batches = (n + config.batch_size - 1) / config.batch_size;
  OneCycleSchedule schedule = config.schedule;
  schedule.total_steps = std::max<std::size_t>(2, config.epochs * batches);
  schedule.validate();

  std::vector<Shape> shapes;
  for (const auto& [name, t] : model.named_parameters()) shapes.push_back(t->shape());
  RAdamState state(shapes, config.radam);

  std::vector<EpochLog> history;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    auto order = iota(0, n);
    {
      auto rng = batch_rng(config.seed, epoch, static_cast<std::size_t>(-1));
      std::shuffle(order.begin(), order.end(), rng);
    }
    double loss_sum = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t first = b * config.batch_size;
      const std::size_t count = std::min(config.batch_size, n - first);
      const std::span<const std::size_t> idx(order.data() + first, count);
      auto batch = select(train_data, idx);
      CapsuleBatch caps = batch.caps;
      Tensor target = one_hot<double>(batch.labels, model.config.n_classes);
      if (config.mixup) {
        auto rng = batch_rng(config.seed, epoch, b);
        std::vector<std::size_t> partner = iota(0, count);
        std::shuffle(partner.begin(), partner.end(), rng);
        const double lambda = sample_beta(rng, config.mixup_beta);
        auto other = select(batch, partner);
        caps = mix_capsules(batch.caps, other.caps, lambda);
        target = mix(target, one_hot<double>(other.labels, model.config.n_classes), lambda);
      }

      const std::size_t shards = std::min(config.threads, count);
      std::vector<ShardResult> results(shards);
      auto run_shard = [&](std::size_t s) {
        const std::size_t lo = count * s / shards, hi = count * (s + 1) / shards;
        results[s] = shard_gradient(model, rows_of(caps, lo, hi - lo), target_rows(target, lo, hi - lo),
                                    static_cast<double>(hi - lo) / static_cast<double>(count));
      };
      if (shards == 1) {
        run_shard(0);
      } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(shards);
        for (std::size_t s = 0; s < shards; ++s) {
          pool.emplace_back([&, s] {
            try {
              run_shard(s);
            } catch (...) {
              errors[s] = std::current_exception();
            }
          });
        }
        for (auto& t : pool) t.join();
        for (auto& e : errors) {
          if (e) std::rethrow_exception(e);
        }
      }

      double loss = 0;
      std::vector<Tensor> grads = results[0].grads;
      for (std::size_t s = 0; s < shards; ++s) {
        loss += results[s].loss;
        if (s == 0) continue;
        for (std::size_t p = 0; p < grads.size(); ++p) grads[p] = grads[p] + results[s].grads[p];
      }
      if (!std::isfinite(loss)) {
        throw NumericError("loss became non-finite at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
      }
      loss_sum += loss;

      std::vector<Tensor*> params;
      for (auto& [name, t] : model.named_parameters()) params.push_back(t);
      radam_step<double>(state, params, grads, schedule_at(schedule, step));
      ++step;
    }

    EpochLog log;
    log.epoch = epoch;
    log.train_loss = loss_sum / static_cast<double>(batches);
    if (valid_data.size() > 0) {
      const auto ev = evaluate(model, valid_data);
      log.valid_loss = ev.loss;
      log.valid_accuracy = ev.accuracy;
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    history.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return history;
}

}  // namespace capsroute
