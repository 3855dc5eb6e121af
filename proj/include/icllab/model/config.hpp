#pragma once

#include <compare>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "icllab/errors.hpp"

namespace icl {

enum class Arch { transformer, ssm_single_head, ssm_multi_head, hybrid_parallel, hybrid_sequential };

enum class Stream { attention, ssm };

// What mixes tokens in one layer: attention only, SSM only, or both in parallel.
enum class LayerKind { attention, ssm, parallel };

inline std::string_view to_string(Arch a) {
  switch (a) {
    case Arch::transformer: return "transformer";
    case Arch::ssm_single_head: return "ssm-single-head";
    case Arch::ssm_multi_head: return "ssm-multi-head";
    case Arch::hybrid_parallel: return "hybrid-parallel";
    case Arch::hybrid_sequential: return "hybrid-sequential";
  }
  return "?";
}

inline Arch arch_from_string(std::string_view s) {
  for (auto a : {Arch::transformer, Arch::ssm_single_head, Arch::ssm_multi_head, Arch::hybrid_parallel,
                 Arch::hybrid_sequential}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown architecture '" + std::string(s) + "'");
}

inline std::string_view to_string(Stream s) { return s == Stream::attention ? "attention" : "ssm"; }

inline Stream stream_from_string(std::string_view s) {
  if (s == "attention" || s == "attn") return Stream::attention;
  if (s == "ssm") return Stream::ssm;
  throw ConfigError("unknown stream '" + std::string(s) + "'");
}

inline std::string_view to_string(LayerKind k) {
  switch (k) {
    case LayerKind::attention: return "attn";
    case LayerKind::ssm: return "ssm";
    case LayerKind::parallel: return "parallel";
  }
  return "?";
}

/// One interventable unit: head `head` of stream `stream` at layer `layer`.
struct HeadAddress {
  std::size_t layer = 0;
  Stream stream = Stream::attention;
  std::size_t head = 0;

  auto operator<=>(const HeadAddress&) const = default;
};

inline std::string to_string(const HeadAddress& h) {
  return "L" + std::to_string(h.layer) + "." + std::string(to_string(h.stream)) + ".H" +
         std::to_string(h.head);
}

inline void to_json(nlohmann::json& j, const HeadAddress& h) {
  j = {{"layer", h.layer}, {"stream", std::string(to_string(h.stream))}, {"head", h.head}};
}

inline void from_json(const nlohmann::json& j, HeadAddress& h) {
  h.layer = j.at("layer").get<std::size_t>();
  h.stream = stream_from_string(j.at("stream").get<std::string>());
  h.head = j.at("head").get<std::size_t>();
}

/// Repeating block of `attn_every` SSM layers followed by one attention
/// layer, truncated to `n_layers`.
inline std::vector<LayerKind> hybrid_sequential_schedule(std::size_t n_layers, std::size_t attn_every) {
  if (attn_every == 0) throw ConfigError("attn_every must be >= 1");
  std::vector<LayerKind> kinds;
  kinds.reserve(n_layers);
  for (std::size_t l = 0; l < n_layers; ++l) {
    kinds.push_back(l % (attn_every + 1) == attn_every ? LayerKind::attention : LayerKind::ssm);
  }
  return kinds;
}

struct ModelConfig {
  Arch arch = Arch::transformer;
  std::size_t n_layers = 4;
  std::size_t d_model = 64;
  std::size_t n_attn_heads = 4;
  std::size_t n_ssm_heads = 4;
  std::size_t d_state = 16;
  std::size_t window = 0;  // 0 = full causal attention
  std::size_t attn_every = 6;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 512;
  std::size_t mlp_ratio = 4;
  std::size_t conv_width = 4;

  bool operator==(const ModelConfig&) const = default;

  bool has_attention() const {
    for (auto k : schedule())
      if (k != LayerKind::ssm) return true;
    return false;
  }

  /// Applies forced values (single-head SSM has exactly one SSM head) and
  /// checks the remaining invariants.
  ModelConfig normalized() const {
    ModelConfig c = *this;
    if (c.arch == Arch::ssm_single_head) c.n_ssm_heads = 1;
    c.validate();
    return c;
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("model config: " + m); };
    if (n_layers == 0 || d_model == 0 || vocab_size == 0 || max_seq_len == 0) fail("extents must be positive");
    if (mlp_ratio == 0 || conv_width == 0 || d_state == 0) fail("mlp_ratio, conv_width and d_state must be positive");
    const bool attn = arch == Arch::transformer || arch == Arch::hybrid_parallel || arch == Arch::hybrid_sequential;
    const bool ssm = arch != Arch::transformer;
    if (attn && (n_attn_heads == 0 || d_model % n_attn_heads != 0)) fail("d_model must be divisible by n_attn_heads");
    if (ssm && (n_ssm_heads == 0 || d_model % n_ssm_heads != 0)) fail("d_model must be divisible by n_ssm_heads");
    if (arch == Arch::ssm_single_head && n_ssm_heads != 1) fail("ssm-single-head requires n_ssm_heads = 1");
    if (arch == Arch::hybrid_sequential && attn_every == 0) fail("attn_every must be >= 1");
  }

  std::vector<LayerKind> schedule() const {
    switch (arch) {
      case Arch::transformer: return std::vector<LayerKind>(n_layers, LayerKind::attention);
      case Arch::ssm_single_head:
      case Arch::ssm_multi_head: return std::vector<LayerKind>(n_layers, LayerKind::ssm);
      case Arch::hybrid_parallel: return std::vector<LayerKind>(n_layers, LayerKind::parallel);
      case Arch::hybrid_sequential: return hybrid_sequential_schedule(n_layers, attn_every);
    }
    return {};
  }

  bool has_stream(std::size_t layer, Stream s) const {
    if (layer >= n_layers) return false;
    const auto k = schedule()[layer];
    return k == LayerKind::parallel || (s == Stream::attention ? k == LayerKind::attention : k == LayerKind::ssm);
  }

  /// Number of heads of `s` at `layer`, 0 when the stream is absent.
  std::size_t heads(std::size_t layer, Stream s) const {
    if (!has_stream(layer, s)) return 0;
    return s == Stream::attention ? n_attn_heads : n_ssm_heads;
  }

  std::size_t head_dim(Stream s) const {
    return d_model / (s == Stream::attention ? n_attn_heads : n_ssm_heads);
  }

  void check_address(const HeadAddress& h) const {
    if (h.layer >= n_layers) {
      throw AddressError("layer " + std::to_string(h.layer) + " out of range for " +
                         std::to_string(n_layers) + " layers");
    }
    if (!has_stream(h.layer, h.stream)) {
      throw AddressError(std::string(to_string(h.stream)) + " stream absent at layer " + std::to_string(h.layer));
    }
    if (h.head >= heads(h.layer, h.stream)) throw AddressError("head index out of range: " + to_string(h));
  }

  /// Every head of every stream, ordered by (layer, stream, head).
  std::vector<HeadAddress> all_heads() const {
    std::vector<HeadAddress> out;
    for (std::size_t l = 0; l < n_layers; ++l)
      for (auto s : {Stream::attention, Stream::ssm})
        for (std::size_t h = 0; h < heads(l, s); ++h) out.push_back({l, s, h});
    return out;
  }

  std::vector<HeadAddress> layer_heads(std::size_t layer) const {
    if (layer >= n_layers) throw AddressError("layer " + std::to_string(layer) + " out of range");
    std::vector<HeadAddress> out;
    for (auto s : {Stream::attention, Stream::ssm})
      for (std::size_t h = 0; h < heads(layer, s); ++h) out.push_back({layer, s, h});
    return out;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"arch", std::string(to_string(c.arch))},
                     {"n_layers", c.n_layers},
                     {"d_model", c.d_model},
                     {"n_attn_heads", c.n_attn_heads},
                     {"n_ssm_heads", c.n_ssm_heads},
                     {"d_state", c.d_state},
                     {"window", c.window},
                     {"attn_every", c.attn_every},
                     {"vocab_size", c.vocab_size},
                     {"max_seq_len", c.max_seq_len},
                     {"mlp_ratio", c.mlp_ratio},
                     {"conv_width", c.conv_width}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.arch = arch_from_string(j.at("arch").get<std::string>());
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_model = j.value("d_model", d.d_model);
  c.n_attn_heads = j.value("n_attn_heads", d.n_attn_heads);
  c.n_ssm_heads = j.value("n_ssm_heads", d.n_ssm_heads);
  c.d_state = j.value("d_state", d.d_state);
  c.window = j.value("window", d.window);
  c.attn_every = j.value("attn_every", d.attn_every);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.conv_width = j.value("conv_width", d.conv_width);
}

}  // namespace icl
