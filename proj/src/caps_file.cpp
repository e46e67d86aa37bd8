#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>

#include "capsroute/data.hpp"
#include "capsroute/nn.hpp"
#include "capsroute/ops.hpp"
#include "json_util.hpp"

static_assert(std::endian::native == std::endian::little, "CAPS I/O assumes a little-endian host");

namespace capsroute {

namespace {

constexpr char kMagic[4] = {'C', 'A', 'P', 'S'};
constexpr std::uint32_t kFlagLabels = 1u;
constexpr std::uint32_t kFlagChannels = 2u;

class ByteWriter {
 public:
  ByteWriter(FileKind kind, DType dtype) : dtype_(dtype) {
    bytes_.insert(bytes_.end(), kMagic, kMagic + 4);
    put<std::uint16_t>(kCapsVersion);
    put<std::uint8_t>(static_cast<std::uint8_t>(dtype));
    put<std::uint8_t>(static_cast<std::uint8_t>(kind));
  }

  template <typename T>
  void put(T v) {
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    bytes_.insert(bytes_.end(), raw, raw + sizeof(T));
  }

  void put_dim(std::size_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw DataError("dimension too large for the format");
    put<std::uint32_t>(static_cast<std::uint32_t>(v));
  }

  void put_reals(std::span<const double> values) {
    for (double v : values) {
      if (dtype_ == DType::Float32) {
        put<float>(static_cast<float>(v));
      } else {
        put<double>(v);
      }
    }
  }

  void put_string(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  DType dtype_;
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, FileKind expected) : bytes_(bytes) {
    if (bytes_.size() < 4 || std::memcmp(bytes_.data(), kMagic, 4) != 0) {
      throw DataError("not a CAPS file (bad magic)", 0);
    }
    pos_ = 4;
    const auto version = get<std::uint16_t>();
    if (version != kCapsVersion) {
      throw VersionError("unsupported CAPS version " + std::to_string(version), 4);
    }
    const auto dtype = get<std::uint8_t>();
    if (dtype != 1 && dtype != 2) throw DataError("unknown dtype code " + std::to_string(dtype), 6);
    dtype_ = static_cast<DType>(dtype);
    const auto kind = get<std::uint8_t>();
    if (kind != static_cast<std::uint8_t>(expected)) {
      throw DataError("CAPS kind " + std::to_string(kind) + ", expected " +
                          std::to_string(static_cast<int>(expected)),
                      7);
    }
  }

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::size_t get_dim() { return get<std::uint32_t>(); }

  std::vector<double> get_reals(std::size_t count) {
    const std::size_t width = dtype_ == DType::Float32 ? 4 : 8;
    if (count > 0 && width > (bytes_.size() - pos_) / count) {
      throw DataError("truncated payload: need " + std::to_string(count) + " values of " + std::to_string(width) +
                          " bytes",
                      bytes_.size());
    }
    std::vector<double> out(count);
    for (auto& v : out) v = dtype_ == DType::Float32 ? static_cast<double>(get<float>()) : get<double>();
    return out;
  }

  std::string get_string(std::size_t len) {
    need(len);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
    pos_ += len;
    return s;
  }

  void finish() const {
    if (pos_ != bytes_.size()) {
      throw DataError(std::to_string(bytes_.size() - pos_) + " trailing bytes after payload", pos_);
    }
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw DataError("truncated: need " + std::to_string(n) + " more bytes", bytes_.size());
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  DType dtype_ = DType::Float64;
};

std::size_t checked_product(std::initializer_list<std::size_t> dims) {
  std::size_t out = 1;
  for (auto d : dims) {
    if (d != 0 && out > std::numeric_limits<std::size_t>::max() / d) throw DataError("dimension product overflows");
    out *= d;
  }
  return out;
}

std::vector<double> rounded(std::span<const double> v, DType dtype) {
  std::vector<double> out(v.begin(), v.end());
  if (dtype == DType::Float32) {
    for (auto& x : out) x = static_cast<double>(static_cast<float>(x));
  }
  return out;
}

std::string dtype_name(DType d) { return d == DType::Float32 ? "float32" : "float64"; }

DType parse_dtype(const detail::json& j) {
  const auto name = j.value("dtype", std::string("float64"));
  if (name == "float32") return DType::Float32;
  if (name == "float64") return DType::Float64;
  throw DataError("unknown dtype '" + name + "'");
}

detail::json parse_text(std::string_view text, std::string_view kind) {
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const detail::json::parse_error& e) {
    throw DataError(std::string("malformed CAPS text: ") + e.what(), e.byte);
  }
  if (!j.is_object() || j.value("format", std::string()) != "CAPS") throw DataError("not a CAPS text document");
  const auto version = j.value("version", 0);
  if (version != kCapsVersion) throw VersionError("unsupported CAPS version " + std::to_string(version), 0);
  if (j.value("kind", std::string()) != kind) throw DataError("CAPS text kind is not '" + std::string(kind) + "'");
  return j;
}

template <typename T>
T field(const detail::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw DataError(std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const detail::json::exception& e) {
    throw DataError(std::string("bad field '") + key + "': " + e.what());
  }
}

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed for " + path);
}

bool text_path(const std::string& path) { return path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0; }

bool binary_bytes(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0;
}

std::string_view as_text(std::span<const std::uint8_t> bytes) {
  return {reinterpret_cast<const char*>(bytes.data()), bytes.size()};
}

}  // namespace

// ---- capsule batches ----

std::vector<std::uint8_t> encode_capsules(const LabeledCapsules& data, DType dtype) {
  const auto& a = data.caps.a_in;
  const auto& mu = data.caps.mu_in;
  if (a.rank() != 2 || mu.rank() != 4 || mu.extent(0) != a.extent(0) || mu.extent(1) != a.extent(1)) {
    throw ShapeError("capsule batch needs a_in (b, n) and mu_in (b, n, d_cov, d_in)");
  }
  const bool labeled = !data.labels.empty();
  if (labeled && data.labels.size() != a.extent(0)) throw ShapeError("one label per sample required");
  ByteWriter w(FileKind::Capsules, dtype);
  w.put_dim(a.extent(0));
  w.put_dim(a.extent(1));
  w.put_dim(mu.extent(2));
  w.put_dim(mu.extent(3));
  w.put<std::uint32_t>(labeled ? kFlagLabels : 0u);
  w.put_reals(a.values());
  w.put_reals(mu.values());
  for (int label : data.labels) w.put<std::int32_t>(label);
  return w.take();
}

LabeledCapsules decode_capsules(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, FileKind::Capsules);
  const auto b = r.get_dim(), n = r.get_dim(), c = r.get_dim(), d = r.get_dim();
  const auto flags = r.get<std::uint32_t>();
  if (flags & ~kFlagLabels) throw DataError("unknown capsule flags", 24);
  auto a_in = r.get_reals(checked_product({b, n}));
  auto mu = r.get_reals(checked_product({b, n, c, d}));
  LabeledCapsules out{{Tensor({b, n}, std::move(a_in)), Tensor({b, n, c, d}, std::move(mu))}, {}};
  if (flags & kFlagLabels) {
    for (std::size_t k = 0; k < b; ++k) out.labels.push_back(r.get<std::int32_t>());
  }
  r.finish();
  return out;
}

std::string capsules_to_text(const LabeledCapsules& data, DType dtype) {
  const auto& a = data.caps.a_in;
  const auto& mu = data.caps.mu_in;
  if (a.rank() != 2 || mu.rank() != 4) throw ShapeError("capsule batch needs a_in (b, n) and mu_in (b, n, d_cov, d_in)");
  detail::json j{{"format", "CAPS"},
                 {"version", kCapsVersion},
                 {"kind", "capsules"},
                 {"dtype", dtype_name(dtype)},
                 {"batch", a.extent(0)},
                 {"n", a.extent(1)},
                 {"d_cov", mu.extent(2)},
                 {"d_in", mu.extent(3)},
                 {"a_in", rounded(a.values(), dtype)},
                 {"mu", rounded(mu.values(), dtype)}};
  if (!data.labels.empty()) j["labels"] = data.labels;
  return j.dump(1);
}

LabeledCapsules capsules_from_text(std::string_view text) {
  const auto j = parse_text(text, "capsules");
  (void)parse_dtype(j);
  const auto b = field<std::size_t>(j, "batch"), n = field<std::size_t>(j, "n");
  const auto c = field<std::size_t>(j, "d_cov"), d = field<std::size_t>(j, "d_in");
  auto a_in = field<std::vector<double>>(j, "a_in");
  auto mu = field<std::vector<double>>(j, "mu");
  if (a_in.size() != checked_product({b, n}) || mu.size() != checked_product({b, n, c, d})) {
    throw DataError("value counts do not match the declared dims");
  }
  LabeledCapsules out{{Tensor({b, n}, std::move(a_in)), Tensor({b, n, c, d}, std::move(mu))}, {}};
  if (j.contains("labels")) {
    out.labels = field<std::vector<int>>(j, "labels");
    if (out.labels.size() != b) throw DataError("label count does not match batch");
  }
  return out;
}

// ---- tensor bundles ----

const Tensor& TensorBundle::get(std::string_view name) const {
  for (const auto& [key, t] : tensors) {
    if (key == name) return t;
  }
  throw DataError("bundle has no tensor '" + std::string(name) + "'");
}

std::vector<std::uint8_t> encode_bundle(const TensorBundle& bundle, DType dtype) {
  ByteWriter w(FileKind::Bundle, dtype);
  w.put_dim(bundle.meta.size());
  w.put_string(bundle.meta);
  w.put_dim(bundle.tensors.size());
  for (const auto& [name, t] : bundle.tensors) {
    if (name.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("tensor name too long");
    if (t.rank() > std::numeric_limits<std::uint8_t>::max()) throw DataError("tensor rank too large");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.put_dim(e);
    w.put_reals(t.values());
  }
  return w.take();
}

TensorBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, FileKind::Bundle);
  TensorBundle out;
  out.meta = r.get_string(r.get_dim());
  const auto count = r.get_dim();
  for (std::size_t k = 0; k < count; ++k) {
    auto name = r.get_string(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = r.get_dim();
    std::size_t numel = 1;
    for (auto e : shape) numel = checked_product({numel, e});
    auto values = r.get_reals(numel);
    out.tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  r.finish();
  return out;
}

std::string bundle_to_text(const TensorBundle& bundle) {
  detail::json tensors = detail::json::array();
  for (const auto& [name, t] : bundle.tensors) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}});
  }
  detail::json j{{"format", "CAPS"}, {"version", kCapsVersion}, {"kind", "bundle"},
                 {"dtype", "float64"}, {"meta", bundle.meta},   {"tensors", tensors}};
  return j.dump(1);
}

TensorBundle bundle_from_text(std::string_view text) {
  const auto j = parse_text(text, "bundle");
  TensorBundle out;
  out.meta = j.value("meta", std::string());
  for (const auto& t : field<detail::json>(j, "tensors")) {
    auto shape = field<Shape>(t, "shape");
    auto values = field<std::vector<double>>(t, "values");
    if (shape_numel(shape) != values.size()) throw DataError("tensor value count does not match its shape");
    out.tensors.emplace_back(field<std::string>(t, "name"), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

// ---- embeddings ----

namespace {

void check_embeddings(const EmbeddingSet& set) {
  if (set.vectors.rank() != 3 || set.mask.rank() != 2 || set.mask.extent(0) != set.vectors.extent(0) ||
      set.mask.extent(1) != set.vectors.extent(1)) {
    throw ShapeError("embeddings need vectors (b, n, m) and mask (b, n)");
  }
  if (!set.channels.empty() && set.channels.size() != set.mask.numel()) {
    throw ShapeError("need one channel id per embedding vector");
  }
  if (!set.labels.empty() && set.labels.size() != set.vectors.extent(0)) throw ShapeError("one label per sample");
}

}  // namespace

std::vector<std::uint8_t> encode_embeddings(const EmbeddingSet& set, DType dtype) {
  check_embeddings(set);
  ByteWriter w(FileKind::Embeddings, dtype);
  w.put_dim(set.vectors.extent(0));
  w.put_dim(set.vectors.extent(1));
  w.put_dim(set.vectors.extent(2));
  std::uint32_t flags = 0;
  if (!set.labels.empty()) flags |= kFlagLabels;
  if (!set.channels.empty()) flags |= kFlagChannels;
  w.put<std::uint32_t>(flags);
  w.put_reals(set.vectors.values());
  w.put_reals(set.mask.values());
  for (auto ch : set.channels) w.put_dim(ch);
  for (int label : set.labels) w.put<std::int32_t>(label);
  return w.take();
}

EmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes, FileKind::Embeddings);
  const auto b = r.get_dim(), n = r.get_dim(), m = r.get_dim();
  const auto flags = r.get<std::uint32_t>();
  if (flags & ~(kFlagLabels | kFlagChannels)) throw DataError("unknown embedding flags", 20);
  EmbeddingSet out;
  out.vectors = Tensor({b, n, m}, r.get_reals(checked_product({b, n, m})));
  out.mask = Tensor({b, n}, r.get_reals(checked_product({b, n})));
  if (flags & kFlagChannels) {
    for (std::size_t k = 0; k < b * n; ++k) out.channels.push_back(r.get_dim());
  }
  if (flags & kFlagLabels) {
    for (std::size_t k = 0; k < b; ++k) out.labels.push_back(r.get<std::int32_t>());
  }
  r.finish();
  return out;
}

std::string embeddings_to_text(const EmbeddingSet& set) {
  check_embeddings(set);
  detail::json j{{"format", "CAPS"},
                 {"version", kCapsVersion},
                 {"kind", "embeddings"},
                 {"dtype", "float64"},
                 {"batch", set.vectors.extent(0)},
                 {"n", set.vectors.extent(1)},
                 {"m", set.vectors.extent(2)},
                 {"vectors", std::vector<double>(set.vectors.values().begin(), set.vectors.values().end())},
                 {"mask", std::vector<double>(set.mask.values().begin(), set.mask.values().end())}};
  if (!set.channels.empty()) j["channels"] = set.channels;
  if (!set.labels.empty()) j["labels"] = set.labels;
  return j.dump(1);
}

EmbeddingSet embeddings_from_text(std::string_view text) {
  const auto j = parse_text(text, "embeddings");
  const auto b = field<std::size_t>(j, "batch"), n = field<std::size_t>(j, "n"), m = field<std::size_t>(j, "m");
  auto vectors = field<std::vector<double>>(j, "vectors");
  auto mask = field<std::vector<double>>(j, "mask");
  if (vectors.size() != checked_product({b, n, m}) || mask.size() != checked_product({b, n})) {
    throw DataError("value counts do not match the declared dims");
  }
  EmbeddingSet out{Tensor({b, n, m}, std::move(vectors)), Tensor({b, n}, std::move(mask)), {}, {}};
  if (j.contains("channels")) out.channels = field<std::vector<std::size_t>>(j, "channels");
  if (j.contains("labels")) out.labels = field<std::vector<int>>(j, "labels");
  try {
    check_embeddings(out);
  } catch (const ShapeError& e) {
    throw DataError(e.what());
  }
  return out;
}

// ---- files ----

void write_capsules(const std::string& path, const LabeledCapsules& data, DType dtype) {
  if (text_path(path)) {
    const auto text = capsules_to_text(data, dtype);
    spill(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  } else {
    spill(path, encode_capsules(data, dtype));
  }
}

LabeledCapsules read_capsules(const std::string& path) {
  const auto bytes = slurp(path);
  return binary_bytes(bytes) ? decode_capsules(bytes) : capsules_from_text(as_text(bytes));
}

void write_bundle(const std::string& path, const TensorBundle& bundle, DType dtype) {
  if (text_path(path)) {
    const auto text = bundle_to_text(bundle);
    spill(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  } else {
    spill(path, encode_bundle(bundle, dtype));
  }
}

TensorBundle read_bundle(const std::string& path) {
  const auto bytes = slurp(path);
  return binary_bytes(bytes) ? decode_bundle(bytes) : bundle_from_text(as_text(bytes));
}

void write_embeddings(const std::string& path, const EmbeddingSet& set, DType dtype) {
  if (text_path(path)) {
    const auto text = embeddings_to_text(set);
    spill(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
  } else {
    spill(path, encode_embeddings(set, dtype));
  }
}

EmbeddingSet read_embeddings(const std::string& path) {
  const auto bytes = slurp(path);
  return binary_bytes(bytes) ? decode_embeddings(bytes) : embeddings_from_text(as_text(bytes));
}

// ---- ingestion ----

CapsuleBatch ingest_embeddings(const EmbeddingSet& set, ReshapeSpec reshape_spec, const Tensor* channel_table) {
  check_embeddings(set);
  const std::size_t b = set.vectors.extent(0), n = set.vectors.extent(1), m = set.vectors.extent(2);
  if (reshape_spec.d_cov == 0 || m % reshape_spec.d_cov != 0) {
    throw ShapeError("embedding length " + std::to_string(m) + " is not divisible by d_cov " +
                     std::to_string(reshape_spec.d_cov));
  }
  Tensor vectors = set.vectors;
  if (channel_table) {
    if (set.channels.empty()) throw ContractError("a channel table needs channel ids");
    vectors = add_channel_embedding(vectors, *channel_table, std::span<const std::size_t>(set.channels));
  }
  return {mask_to_logits(set.mask), reshape(vectors, {b, n, reshape_spec.d_cov, m / reshape_spec.d_cov})};
}

}  // namespace capsroute
