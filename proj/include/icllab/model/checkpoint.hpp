#pragma once

// Checkpoint container (little-endian):
//
//   "ICLLABCK"            8-byte magic
//   u32 version           currently 1
//   u32 scalar_bytes      4 (float) or 8 (double)
//   u64 n, n bytes        model config as JSON
//   u64 count             number of tensors, then per tensor:
//     u32 n, n bytes      name
//     u32 rank, rank x u64 extents
//     numel x scalar      values
//   u64 checksum          FNV-1a over every preceding byte
//
// A file is accepted only if it is complete, its checksum matches, and every
// tensor matches the target model's parameter list by name and shape.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"
#include "icllab/model/model.hpp"

namespace icl {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'L', 'A', 'B', 'C', 'K'};

namespace detail {

inline std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

class ByteWriter {
 public:
  template <typename V>
  void put(V v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(V));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const unsigned char* p, std::size_t n) : p_(p), n_(n) {}
  template <typename V>
  V get() {
    V v;
    std::memcpy(&v, take(sizeof(V)), sizeof(V));
    return v;
  }
  const unsigned char* take(std::size_t n) {
    if (n > n_ - pos_) throw LoadError("checkpoint truncated");
    const auto* out = p_ + pos_;
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == n_; }

 private:
  const unsigned char* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline ModelConfig read_header(ByteReader& r, std::uint32_t& scalar_bytes) {
  if (std::memcmp(r.take(8), kCheckpointMagic, 8) != 0) throw LoadError("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw LoadError("unsupported checkpoint version " + std::to_string(version));
  }
  scalar_bytes = r.get<std::uint32_t>();
  if (scalar_bytes != 4 && scalar_bytes != 8) throw LoadError("unsupported scalar width");
  const auto n = r.get<std::uint64_t>();
  const auto* js = r.take(n);
  try {
    return nlohmann::json::parse(js, js + n).get<ModelConfig>().normalized();
  } catch (const std::exception& e) {
    throw LoadError(std::string("invalid checkpoint config: ") + e.what());
  }
}

// Verifies magic, length and checksum; returns the checksum-covered bytes.
inline std::vector<unsigned char> verified_payload(const std::filesystem::path& path) {
  auto raw = read_file(path);
  if (raw.size() < sizeof(kCheckpointMagic) + sizeof(std::uint64_t)) throw LoadError("checkpoint truncated");
  const auto body = raw.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, raw.data() + body, sizeof stored);
  if (std::memcmp(raw.data(), kCheckpointMagic, 8) != 0) throw LoadError("not a checkpoint file");
  if (fnv1a(raw.data(), body) != stored) throw LoadError("checkpoint corrupted or truncated (checksum mismatch)");
  raw.resize(body);
  return raw;
}

template <typename T>
void read_tensors(ByteReader& r, std::uint32_t scalar_bytes, Model<T>& model) {
  auto params = model.named_parameters();
  const auto count = r.get<std::uint64_t>();
  if (count != params.size()) throw LoadError("checkpoint tensor count does not match model");
  // Values are staged first so a failure leaves the model untouched.
  std::vector<std::vector<T>> staged(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto name_len = r.get<std::uint32_t>();
    const auto* np = r.take(name_len);
    const std::string name(reinterpret_cast<const char*>(np), name_len);
    if (name != params[i].first) throw LoadError("unexpected tensor '" + name + "', wanted '" + params[i].first + "'");
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != params[i].second.shape()) throw LoadError("shape mismatch for tensor '" + name + "'");
    auto& dst = staged[i];
    dst.resize(shape_numel(shape));
    for (auto& v : dst) {
      if (scalar_bytes == 4) {
        v = static_cast<T>(r.get<float>());
      } else {
        v = static_cast<T>(r.get<double>());
      }
    }
  }
  if (!r.done()) throw LoadError("trailing bytes in checkpoint");
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::copy(staged[i].begin(), staged[i].end(), params[i].second.mutable_data().begin());
  }
}

}  // namespace detail

template <typename T>
void checkpoint_save(const Model<T>& model, const std::filesystem::path& path) {
  detail::ByteWriter w;
  w.put_bytes(kCheckpointMagic, 8);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(sizeof(T)));
  const std::string cfg = nlohmann::json(model.config()).dump();
  w.put(static_cast<std::uint64_t>(cfg.size()));
  w.put_bytes(cfg.data(), cfg.size());
  const auto params = model.named_parameters();
  w.put(static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.put(static_cast<std::uint32_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) w.put(static_cast<std::uint64_t>(e));
    w.put_bytes(t.data().data(), t.numel() * sizeof(T));
  }
  w.put(detail::fnv1a(w.bytes().data(), w.bytes().size()));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
    if (!out) throw LoadError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

/// Restores weights into `model`; the stored config must equal the model's.
template <typename T>
void checkpoint_load(Model<T>& model, const std::filesystem::path& path) {
  const auto raw = detail::verified_payload(path);
  detail::ByteReader r(raw.data(), raw.size());
  std::uint32_t scalar_bytes = 0;
  const auto cfg = detail::read_header(r, scalar_bytes);
  if (cfg.arch != model.config().arch) {
    throw LoadError("checkpoint architecture '" + std::string(to_string(cfg.arch)) + "' does not match model '" +
                    std::string(to_string(model.config().arch)) + "'");
  }
  if (!(cfg == model.config())) throw LoadError("checkpoint config does not match model config");
  detail::read_tensors(r, scalar_bytes, model);
}

/// Builds a model from the config stored in the checkpoint.
template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  const auto raw = detail::verified_payload(path);
  detail::ByteReader r(raw.data(), raw.size());
  std::uint32_t scalar_bytes = 0;
  const auto cfg = detail::read_header(r, scalar_bytes);
  Model<T> model(cfg, 0);
  detail::read_tensors(r, scalar_bytes, model);
  return model;
}

inline ModelConfig checkpoint_config(const std::filesystem::path& path) {
  const auto raw = detail::verified_payload(path);
  detail::ByteReader r(raw.data(), raw.size());
  std::uint32_t scalar_bytes = 0;
  return detail::read_header(r, scalar_bytes);
}

}  // namespace icl
