#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "capsroute/data.hpp"
#include "json_util.hpp"

namespace capsroute {

Similarity Similarity::compose(const Similarity& rhs) const {
  const double c = std::cos(theta), s = std::sin(theta);
  return {theta + rhs.theta, scale * rhs.scale, tx + scale * (c * rhs.tx - s * rhs.ty),
          ty + scale * (s * rhs.tx + c * rhs.ty)};
}

Similarity Similarity::inverse() const {
  const double c = std::cos(theta), s = std::sin(theta);
  // R(-theta) (-t) / scale
  return {-theta, 1.0 / scale, -(c * tx + s * ty) / scale, -(-s * tx + c * ty) / scale};
}

std::vector<double> Similarity::matrix(std::size_t dim) const {
  if (dim < 3) throw ConfigError("similarity poses need at least a 3 x 3 slot");
  std::vector<double> m(dim * dim, 0.0);
  for (std::size_t k = 0; k < dim; ++k) m[k * dim + k] = 1.0;
  const double a = scale * std::cos(theta), b = scale * std::sin(theta);
  m[0] = a;
  m[1] = -b;
  m[dim] = b;
  m[dim + 1] = a;
  m[dim - 1] = tx;
  m[2 * dim - 1] = ty;
  return m;
}

void ConstellationSpec::validate() const {
  if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
  if (parts_per_class < 2) throw ConfigError("parts_per_class must be at least 2");
  if (d_cov != d_in || d_cov < 3) throw ConfigError("constellation poses need d_cov == d_in >= 3");
  if (!(jitter_std >= 0)) throw ConfigError("jitter_std must be nonnegative");
  auto in_logit_range = [](double s) { return s >= -kLogitMax && s <= kLogitMax; };
  if (!in_logit_range(score_present) || !in_logit_range(score_distractor)) {
    throw ConfigError("scores must lie in [-30, 30]");
  }
  if (!(entity_rotation >= 0) || !(entity_translation >= 0) || !(part_translation >= 0)) {
    throw ConfigError("pose ranges must be nonnegative");
  }
  if (!(entity_scale_min > 0 && entity_scale_min <= entity_scale_max) ||
      !(part_scale_min > 0 && part_scale_min <= part_scale_max)) {
    throw ConfigError("scale ranges need 0 < min <= max");
  }
}

ConstellationSpec parse_constellation_spec(std::string_view text) {
  const auto j = detail::parse_json(text, "constellation spec");
  detail::reject_unknown_keys(j,
                              {"n_classes", "parts_per_class", "d_cov", "d_in", "jitter_std", "n_distractors",
                               "score_present", "score_distractor", "entity_rotation", "entity_scale_min",
                               "entity_scale_max", "entity_translation", "part_scale_min", "part_scale_max",
                               "part_translation", "seed"},
                              "constellation spec");
  ConstellationSpec s;
  detail::read_key(j, "n_classes", s.n_classes);
  detail::read_key(j, "parts_per_class", s.parts_per_class);
  detail::read_key(j, "d_cov", s.d_cov);
  detail::read_key(j, "d_in", s.d_in);
  detail::read_key(j, "jitter_std", s.jitter_std);
  detail::read_key(j, "n_distractors", s.n_distractors);
  detail::read_key(j, "score_present", s.score_present);
  detail::read_key(j, "score_distractor", s.score_distractor);
  detail::read_key(j, "entity_rotation", s.entity_rotation);
  detail::read_key(j, "entity_scale_min", s.entity_scale_min);
  detail::read_key(j, "entity_scale_max", s.entity_scale_max);
  detail::read_key(j, "entity_translation", s.entity_translation);
  detail::read_key(j, "part_scale_min", s.part_scale_min);
  detail::read_key(j, "part_scale_max", s.part_scale_max);
  detail::read_key(j, "part_translation", s.part_translation);
  detail::read_key(j, "seed", s.seed);
  s.validate();
  return s;
}

std::string to_text(const ConstellationSpec& s) {
  detail::json j{{"n_classes", s.n_classes},
                 {"parts_per_class", s.parts_per_class},
                 {"d_cov", s.d_cov},
                 {"d_in", s.d_in},
                 {"jitter_std", s.jitter_std},
                 {"n_distractors", s.n_distractors},
                 {"score_present", s.score_present},
                 {"score_distractor", s.score_distractor},
                 {"entity_rotation", s.entity_rotation},
                 {"entity_scale_min", s.entity_scale_min},
                 {"entity_scale_max", s.entity_scale_max},
                 {"entity_translation", s.entity_translation},
                 {"part_scale_min", s.part_scale_min},
                 {"part_scale_max", s.part_scale_max},
                 {"part_translation", s.part_translation},
                 {"seed", s.seed}};
  return j.dump(2);
}

namespace {

std::mt19937_64 seeded(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

constexpr std::uint64_t kTemplateStream = 0x7e3a9c15d2b84f61ULL;

double log_uniform(std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> u(std::log(lo), std::log(hi));
  return std::exp(u(rng));
}

double symmetric(std::mt19937_64& rng, double half_width) {
  std::uniform_real_distribution<double> u(-half_width, half_width);
  return u(rng);
}

Similarity draw_entity(std::mt19937_64& rng, const ConstellationSpec& s) {
  Similarity e;
  e.theta = symmetric(rng, s.entity_rotation);
  e.scale = log_uniform(rng, s.entity_scale_min, s.entity_scale_max);
  e.tx = symmetric(rng, s.entity_translation);
  e.ty = symmetric(rng, s.entity_translation);
  return e;
}

Similarity draw_offset(std::mt19937_64& rng, const ConstellationSpec& s) {
  Similarity o;
  o.theta = symmetric(rng, std::numbers::pi);
  o.scale = log_uniform(rng, s.part_scale_min, s.part_scale_max);
  o.tx = symmetric(rng, s.part_translation);
  o.ty = symmetric(rng, s.part_translation);
  return o;
}

// out = a * b for d x d row-major matrices.
void matmul(const double* a, const double* b, double* out, std::size_t d) {
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d; ++c) {
      double acc = 0;
      for (std::size_t k = 0; k < d; ++k) acc += a[r * d + k] * b[k * d + c];
      out[r * d + c] = acc;
    }
}

}  // namespace

Constellation::Constellation(ConstellationSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  auto rng = seeded({spec_.seed, kTemplateStream});
  offsets_.reserve(spec_.n_classes * spec_.parts_per_class);
  for (std::size_t k = 0; k < spec_.n_classes * spec_.parts_per_class; ++k) offsets_.push_back(draw_offset(rng, spec_));
}

const Similarity& Constellation::part_offset(std::size_t cls, std::size_t part) const {
  if (cls >= spec_.n_classes || part >= spec_.parts_per_class) throw ContractError("part index out of range");
  return offsets_[cls * spec_.parts_per_class + part];
}

Constellation::Sample Constellation::sample(std::uint64_t stream, std::size_t index) const {
  auto rng = seeded({spec_.seed, stream, index});
  const std::size_t d = spec_.d_cov;
  const std::size_t n = spec_.capsules_per_sample();
  std::uniform_int_distribution<int> pick_class(0, static_cast<int>(spec_.n_classes) - 1);
  std::normal_distribution<double> noise(0.0, spec_.jitter_std > 0 ? spec_.jitter_std : 1.0);

  Sample out;
  out.label = pick_class(rng);
  out.entity = draw_entity(rng, spec_);

  struct Capsule {
    double score;
    std::vector<double> pose;
    int part;
  };
  std::vector<Capsule> caps;
  caps.reserve(n);
  for (std::size_t p = 0; p < spec_.parts_per_class; ++p) {
    auto pose = out.entity.compose(part_offset(static_cast<std::size_t>(out.label), p)).matrix(d);
    caps.push_back({spec_.score_present, std::move(pose), static_cast<int>(p)});
  }
  for (std::size_t q = 0; q < spec_.n_distractors; ++q) {
    const Similarity where = draw_entity(rng, spec_);
    caps.push_back({spec_.score_distractor, where.compose(draw_offset(rng, spec_)).matrix(d), -1});
  }
  if (spec_.jitter_std > 0) {
    for (auto& c : caps) {
      for (auto& v : c.pose) v += noise(rng);
    }
  }
  std::shuffle(caps.begin(), caps.end(), rng);

  out.a_in.reserve(n);
  out.mu.reserve(n * d * d);
  for (auto& c : caps) {
    out.a_in.push_back(c.score);
    out.mu.insert(out.mu.end(), c.pose.begin(), c.pose.end());
    out.part_of.push_back(c.part);
  }
  return out;
}

LabeledCapsules Constellation::generate(std::uint64_t stream, std::size_t first_index, std::size_t count) const {
  const std::size_t n = spec_.capsules_per_sample();
  const std::size_t d = spec_.d_cov;
  std::vector<double> a_in, mu;
  a_in.reserve(count * n);
  mu.reserve(count * n * d * d);
  std::vector<int> labels;
  labels.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    auto s = sample(stream, first_index + k);
    a_in.insert(a_in.end(), s.a_in.begin(), s.a_in.end());
    mu.insert(mu.end(), s.mu.begin(), s.mu.end());
    labels.push_back(s.label);
  }
  return {{Tensor({count, n}, std::move(a_in)), Tensor({count, n, d, d}, std::move(mu))}, std::move(labels)};
}

Constellation::Match Constellation::nearest_template(std::span<const double> mu, std::size_t n) const {
  const std::size_t d = spec_.d_cov;
  const std::size_t dd = d * d;
  if (mu.size() != n * dd) throw ShapeError("nearest_template needs n x d x d poses");

  std::vector<std::vector<double>> offset_mats, inverse_mats;
  for (const auto& o : offsets_) {
    offset_mats.push_back(o.matrix(d));
    inverse_mats.push_back(o.inverse().matrix(d));
  }

  Match best{-1, std::numeric_limits<double>::infinity()};
  std::vector<double> entity(dd), predicted(dd);
  for (std::size_t k = 0; k < spec_.n_classes; ++k) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < spec_.parts_per_class; ++p) {
        matmul(&mu[i * dd], inverse_mats[k * spec_.parts_per_class + p].data(), entity.data(), d);
        double cost = 0;
        for (std::size_t q = 0; q < spec_.parts_per_class && cost < best.cost; ++q) {
          matmul(entity.data(), offset_mats[k * spec_.parts_per_class + q].data(), predicted.data(), d);
          double closest = std::numeric_limits<double>::infinity();
          for (std::size_t i2 = 0; i2 < n; ++i2) {
            double dist = 0;
            for (std::size_t e = 0; e < dd; ++e) {
              const double diff = mu[i2 * dd + e] - predicted[e];
              dist += diff * diff;
            }
            closest = std::min(closest, dist);
          }
          cost += closest;
        }
        if (cost < best.cost) best = {static_cast<int>(k), cost};
      }
    }
  }
  return best;
}

double nearest_template_accuracy(const Constellation& task, const LabeledCapsules& data) {
  if (data.labels.size() != data.size()) throw ContractError("accuracy needs labels");
  const std::size_t n = data.caps.count();
  const std::size_t stride = data.caps.mu_in.numel() / std::max<std::size_t>(1, data.size());
  std::size_t correct = 0;
  for (std::size_t s = 0; s < data.size(); ++s) {
    auto match = task.nearest_template(data.caps.mu_in.values().subspan(s * stride, stride), n);
    if (match.label == data.labels[s]) ++correct;
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

CapsuleBatch collate(std::span<const CapsuleSample> samples, std::size_t d_cov, std::size_t d_in) {
  const std::size_t pose = d_cov * d_in;
  std::size_t n_max = 0;
  for (const auto& s : samples) {
    if (s.mu.size() != s.a_in.size() * pose) throw ShapeError("capsule sample poses do not match its score count");
    n_max = std::max(n_max, s.a_in.size());
  }
  const std::size_t b = samples.size();
  std::vector<double> a_in(b * n_max, -kLogitMax), mu(b * n_max * pose, 0.0);
  for (std::size_t k = 0; k < b; ++k) {
    const auto& s = samples[k];
    std::copy(s.a_in.begin(), s.a_in.end(), a_in.begin() + static_cast<std::ptrdiff_t>(k * n_max));
    std::copy(s.mu.begin(), s.mu.end(), mu.begin() + static_cast<std::ptrdiff_t>(k * n_max * pose));
  }
  return {Tensor({b, n_max}, std::move(a_in)), Tensor({b, n_max, d_cov, d_in}, std::move(mu))};
}

LabeledCapsules select(const LabeledCapsules& data, std::span<const std::size_t> indices) {
  const auto& a = data.caps.a_in;
  const auto& m = data.caps.mu_in;
  const std::size_t n = a.extent(1);
  const std::size_t pose = m.extent(2) * m.extent(3);
  std::vector<double> a_out, mu_out;
  std::vector<int> labels;
  a_out.reserve(indices.size() * n);
  mu_out.reserve(indices.size() * n * pose);
  for (auto idx : indices) {
    if (idx >= data.size()) throw ContractError("sample index out of range");
    a_out.insert(a_out.end(), a.values().begin() + static_cast<std::ptrdiff_t>(idx * n),
                 a.values().begin() + static_cast<std::ptrdiff_t>((idx + 1) * n));
    mu_out.insert(mu_out.end(), m.values().begin() + static_cast<std::ptrdiff_t>(idx * n * pose),
                  m.values().begin() + static_cast<std::ptrdiff_t>((idx + 1) * n * pose));
    if (!data.labels.empty()) labels.push_back(data.labels[idx]);
  }
  return {{Tensor({indices.size(), n}, std::move(a_out)),
           Tensor({indices.size(), n, m.extent(2), m.extent(3)}, std::move(mu_out))},
          std::move(labels)};
}

}  // namespace capsroute
