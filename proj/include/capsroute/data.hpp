#pragma once

// Data entering and leaving the routing engine: the synthetic constellation
// task, the CAPS file container and ingestion of externally produced
// embeddings.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capsroute/routing.hpp"
#include "capsroute/tensor.hpp"

namespace capsroute {

// Planar similarity transform: rotation, uniform scale, then translation.
// Embedded in a d x d pose as a homogeneous matrix with the 2x2 block
// s*R(theta) in the top-left, (tx, ty) in the last column and identity
// elsewhere; composition of such matrices stays in the family.
struct Similarity {
  double theta = 0;
  double scale = 1;
  double tx = 0;
  double ty = 0;

  // (*this) applied after `rhs`, i.e. the matrix product this * rhs.
  Similarity compose(const Similarity& rhs) const;
  Similarity inverse() const;
  std::vector<double> matrix(std::size_t dim) const;  // row-major dim x dim
};

struct ConstellationSpec {
  std::size_t n_classes = 5;
  std::size_t parts_per_class = 6;
  std::size_t d_cov = 4;
  std::size_t d_in = 4;
  double jitter_std = 0.05;
  std::size_t n_distractors = 4;
  double score_present = 4;
  double score_distractor = 0;
  // Entity poses: |theta| <= entity_rotation, log-uniform scale, uniform
  // translation in [-entity_translation, entity_translation]^2.
  double entity_rotation = 0.5;
  double entity_scale_min = 0.8;
  double entity_scale_max = 1.25;
  double entity_translation = 0.5;
  // Per-class part offsets relative to the entity.
  double part_scale_min = 0.5;
  double part_scale_max = 2.0;
  double part_translation = 1.0;
  std::uint64_t seed = 0;

  std::size_t capsules_per_sample() const { return parts_per_class + n_distractors; }
  void validate() const;  // throws ConfigError
};

// Structured-text (JSON) form; unknown keys are rejected.
ConstellationSpec parse_constellation_spec(std::string_view text);
std::string to_text(const ConstellationSpec& spec);

struct LabeledCapsules {
  CapsuleBatch caps;
  std::vector<int> labels;  // empty when unlabeled

  std::size_t size() const { return caps.a_in.rank() == 0 ? 0 : caps.a_in.extent(0); }
};

class Constellation {
 public:
  explicit Constellation(ConstellationSpec spec);

  const ConstellationSpec& spec() const { return spec_; }
  const Similarity& part_offset(std::size_t cls, std::size_t part) const;

  struct Sample {
    int label = 0;
    Similarity entity;
    std::vector<double> a_in;   // (n)
    std::vector<double> mu;     // (n, d_cov, d_in)
    std::vector<int> part_of;   // part index per capsule, -1 for distractors
  };

  // Pure in (spec, stream, index).
  Sample sample(std::uint64_t stream, std::size_t index) const;
  LabeledCapsules generate(std::uint64_t stream, std::size_t first_index, std::size_t count) const;

  struct Match {
    int label = -1;
    double cost = 0;
  };
  // Pose-invariant nearest-template classifier over one sample's poses
  // (n, d, d): for every class, hypothesizes the entity pose from each
  // (capsule, part) pair and scores the best squared-distance fit of the
  // remaining parts.
  Match nearest_template(std::span<const double> mu, std::size_t n) const;

 private:
  ConstellationSpec spec_;
  std::vector<Similarity> offsets_;  // class-major
};

// Train/test split helper: fraction of samples the oracle labels correctly.
double nearest_template_accuracy(const Constellation& task, const LabeledCapsules& data);

// One capsule set of any size; collate() pads to a rectangular batch.
struct CapsuleSample {
  std::vector<double> a_in;
  std::vector<double> mu;  // (n, d_cov, d_in)
};

// Pads with a_in = -kLogitMax and zero poses.
CapsuleBatch collate(std::span<const CapsuleSample> samples, std::size_t d_cov, std::size_t d_in);
LabeledCapsules select(const LabeledCapsules& data, std::span<const std::size_t> indices);

// ---- CAPS container -------------------------------------------------------
//
// Little-endian, row-major. Common 8-byte header:
//   0  char[4] "CAPS"
//   4  u16     version (1)
//   6  u8      dtype: 1 float32, 2 float64
//   7  u8      kind:  1 capsule batch, 2 tensor bundle, 3 embeddings
// See docs/capsule_file.md for the per-kind layouts.

inline constexpr std::uint16_t kCapsVersion = 1;

enum class DType : std::uint8_t { Float32 = 1, Float64 = 2 };
enum class FileKind : std::uint8_t { Capsules = 1, Bundle = 2, Embeddings = 3 };

std::vector<std::uint8_t> encode_capsules(const LabeledCapsules& data, DType dtype = DType::Float64);
LabeledCapsules decode_capsules(std::span<const std::uint8_t> bytes);

// Named tensors plus a free-form metadata string (JSON by convention).
struct TensorBundle {
  std::string meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& get(std::string_view name) const;
};

std::vector<std::uint8_t> encode_bundle(const TensorBundle& bundle, DType dtype = DType::Float64);
TensorBundle decode_bundle(std::span<const std::uint8_t> bytes);

struct EmbeddingSet {
  Tensor vectors;                     // (b, n, m)
  Tensor mask;                        // (b, n), 1 token, 0 padding, mixtures in between
  std::vector<std::size_t> channels;  // (b * n) provenance ids, or empty
  std::vector<int> labels;            // (b) or empty
};

std::vector<std::uint8_t> encode_embeddings(const EmbeddingSet& set, DType dtype = DType::Float64);
EmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes);

// Structured-text equivalents (JSON), selected by a ".json" file suffix.
std::string capsules_to_text(const LabeledCapsules& data, DType dtype = DType::Float64);
LabeledCapsules capsules_from_text(std::string_view text);
std::string bundle_to_text(const TensorBundle& bundle);
TensorBundle bundle_from_text(std::string_view text);
std::string embeddings_to_text(const EmbeddingSet& set);
EmbeddingSet embeddings_from_text(std::string_view text);

void write_capsules(const std::string& path, const LabeledCapsules& data, DType dtype = DType::Float64);
LabeledCapsules read_capsules(const std::string& path);
void write_bundle(const std::string& path, const TensorBundle& bundle, DType dtype = DType::Float64);
TensorBundle read_bundle(const std::string& path);
void write_embeddings(const std::string& path, const EmbeddingSet& set, DType dtype = DType::Float64);
EmbeddingSet read_embeddings(const std::string& path);

struct ReshapeSpec {
  std::size_t d_cov = 1;  // d_in = m / d_cov
};

/// Embedding vectors become capsules (b, n, d_cov, m / d_cov); the mask goes
/// through mask_to_logits into a_in. With `channel_table` (L, m) the vector
/// for each capsule's channel is added first.
CapsuleBatch ingest_embeddings(const EmbeddingSet& set, ReshapeSpec reshape_spec,
                               const Tensor* channel_table = nullptr);

}  // namespace capsroute
