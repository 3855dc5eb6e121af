#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "icllab/model/config.hpp"
#include "icllab/model/hooks.hpp"
#include "icllab/numerics/ops.hpp"
#include "icllab/numerics/scan.hpp"

namespace icl {

template <typename T>
struct AttentionWeights {
  Tensor<T> wq, wk, wv;  // [d x d]
};

/// Selective SSM mixer. Channels equal d_model and are split contiguously
/// into heads; B and C are produced per head.
template <typename T>
struct SsmWeights {
  Tensor<T> w_in;    // [d x d]
  Tensor<T> conv;    // [conv_width x d], depthwise causal
  Tensor<T> w_gate;  // [d x d], decay gate
  Tensor<T> b_gate;  // [d]
  Tensor<T> w_b;     // [d x heads*d_state]
  Tensor<T> w_c;     // [d x heads*d_state]
  Tensor<T> w_z;     // [d x d], output gate
};

template <typename T>
struct LayerWeights {
  LayerKind kind = LayerKind::attention;
  Tensor<T> norm_mix, norm_mlp;  // [d]
  std::optional<AttentionWeights<T>> attn;
  std::optional<SsmWeights<T>> ssm;
  Tensor<T> wo;                  // [d x d], shared by both streams in a parallel layer
  Tensor<T> mlp_in, mlp_out;     // [d x r*d], [r*d x d]
};

/// Output of one mixer stream: `stream` is the concatenation of head outputs
/// (the hook values) and `output` its projection by the layer's `wo`.
template <typename T>
struct BlockOutput {
  Tensor<T> stream;
  Tensor<T> output;
};

template <typename T>
class Model {
 public:
  using value_type = T;

  Model(ModelConfig config, std::uint64_t seed) : config_(config.normalized()) { init(seed); }

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  const std::vector<LayerWeights<T>>& layers() const { return layers_; }
  const Tensor<T>& token_embedding() const { return tok_emb_; }
  const std::optional<Tensor<T>>& position_embedding() const { return pos_emb_; }
  const Tensor<T>& final_norm() const { return norm_f_; }
  const Tensor<T>& lm_head() const { return lm_head_; }

  /// Handles to every parameter in a fixed order. Handles share storage with
  /// the model.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb_);
    if (pos_emb_) out.emplace_back("pos_emb", *pos_emb_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto p = "layers." + std::to_string(l) + ".";
      const auto& w = layers_[l];
      out.emplace_back(p + "norm_mix", w.norm_mix);
      if (w.attn) {
        out.emplace_back(p + "attn.wq", w.attn->wq);
        out.emplace_back(p + "attn.wk", w.attn->wk);
        out.emplace_back(p + "attn.wv", w.attn->wv);
      }
      if (w.ssm) {
        out.emplace_back(p + "ssm.w_in", w.ssm->w_in);
        out.emplace_back(p + "ssm.conv", w.ssm->conv);
        out.emplace_back(p + "ssm.w_gate", w.ssm->w_gate);
        out.emplace_back(p + "ssm.b_gate", w.ssm->b_gate);
        out.emplace_back(p + "ssm.w_b", w.ssm->w_b);
        out.emplace_back(p + "ssm.w_c", w.ssm->w_c);
        out.emplace_back(p + "ssm.w_z", w.ssm->w_z);
      }
      out.emplace_back(p + "wo", w.wo);
      out.emplace_back(p + "norm_mlp", w.norm_mlp);
      out.emplace_back(p + "mlp_in", w.mlp_in);
      out.emplace_back(p + "mlp_out", w.mlp_out);
    }
    out.emplace_back("norm_f", norm_f_);
    out.emplace_back("lm_head", lm_head_);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  /// Deep copy with independent storage.
  Model clone() const { return cast<T>(); }

  template <typename U>
  Model<U> cast() const {
    Model<U> out(config_, 0);
    auto src = named_parameters();
    auto dst = out.named_parameters();
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto d = dst[i].second.mutable_data();
      const auto s = src[i].second.data();
      for (std::size_t j = 0; j < s.size(); ++j) d[j] = static_cast<U>(s[j]);
    }
    return out;
  }

  void set_requires_grad(bool flag) {
    for (auto& [name, t] : named_parameters()) t.set_requires_grad(flag);
  }

 private:
  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const auto d = config_.d_model;
    const auto scaled_out = T(1) / std::sqrt(T(2 * config_.n_layers));
    auto normal = [&](Shape shape, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      std::vector<T> v(shape_numel(shape));
      for (auto& x : v) x = static_cast<T>(dist(rng));
      return Tensor<T>(std::move(shape), std::move(v));
    };
    auto linear = [&](std::size_t in, std::size_t out, double gain = 1.0) {
      return normal({in, out}, gain / std::sqrt(static_cast<double>(in)));
    };
    auto ones = [&] { return Tensor<T>::full({d}, T{1}); };

    tok_emb_ = normal({config_.vocab_size, d}, 1.0);
    if (config_.has_attention()) pos_emb_ = normal({config_.max_seq_len, d}, 0.1);
    for (auto kind : config_.schedule()) {
      LayerWeights<T> w;
      w.kind = kind;
      w.norm_mix = ones();
      if (kind != LayerKind::ssm) w.attn = AttentionWeights<T>{linear(d, d), linear(d, d), linear(d, d)};
      if (kind != LayerKind::attention) {
        const auto bc = config_.n_ssm_heads * config_.d_state;
        SsmWeights<T> s;
        s.w_in = linear(d, d);
        s.conv = normal({config_.conv_width, d}, 1.0 / std::sqrt(static_cast<double>(config_.conv_width)));
        s.w_gate = linear(d, d, 0.1);
        // Decay biases spread over logit(0.6)..logit(0.99) so channels start
        // with a range of memory lengths.
        std::vector<T> bias(d);
        for (std::size_t c = 0; c < d; ++c) {
          const double p = 0.6 + 0.39 * (d > 1 ? static_cast<double>(c) / (d - 1) : 0.0);
          bias[c] = static_cast<T>(std::log(p / (1 - p)));
        }
        s.b_gate = Tensor<T>({d}, std::move(bias));
        s.w_b = linear(d, bc);
        s.w_c = linear(d, bc);
        s.w_z = linear(d, d);
        w.ssm = std::move(s);
      }
      w.wo = linear(d, d, scaled_out);
      w.norm_mlp = ones();
      w.mlp_in = linear(d, config_.mlp_ratio * d);
      w.mlp_out = linear(config_.mlp_ratio * d, d, scaled_out);
      layers_.push_back(std::move(w));
    }
    norm_f_ = ones();
    lm_head_ = linear(d, config_.vocab_size);
  }

  ModelConfig config_;
  Tensor<T> tok_emb_;
  std::optional<Tensor<T>> pos_emb_;
  std::vector<LayerWeights<T>> layers_;
  Tensor<T> norm_f_;
  Tensor<T> lm_head_;
};

/// Attention stream on normalized input `x`: causal (optionally windowed)
/// multi-head attention. The result concatenates the per-head
/// attention-weighted value vectors, i.e. the hook values.
template <typename T>
Tensor<T> attention_stream(const Tensor<T>& x, const AttentionWeights<T>& w, std::size_t heads,
                           std::size_t window) {
  auto q = ops::matmul(x, w.wq);
  auto k = ops::matmul(x, w.wk);
  auto v = ops::matmul(x, w.wv);
  return ops::causal_attention(q, k, v, heads, window);
}

/// Selective SSM stream on normalized input `x`:
///   u = silu(conv(x W_in)), a = sigmoid(u W_gate + b), B = u W_B, C = u W_C,
///   y = scan(u, a, B, C), stream = y * silu(x W_z).
template <typename T>
Tensor<T> ssm_stream(const Tensor<T>& x, const SsmWeights<T>& w, std::size_t heads) {
  auto u = ops::silu(ops::causal_conv(ops::matmul(x, w.w_in), w.conv));
  auto a = ops::sigmoid(ops::add_bias(ops::matmul(u, w.w_gate), w.b_gate));
  auto b = ops::matmul(u, w.w_b);
  auto c = ops::matmul(u, w.w_c);
  auto y = ops::selective_scan(u, a, b, c, heads);
  return ops::mul(y, ops::silu(ops::matmul(x, w.w_z)));
}

template <typename T>
BlockOutput<T> attention_block(const Tensor<T>& x, const AttentionWeights<T>& w, const Tensor<T>& wo,
                               std::size_t heads, std::size_t window) {
  auto s = attention_stream(x, w, heads, window);
  return {s, ops::matmul(s, wo)};
}

template <typename T>
BlockOutput<T> ssm_block(const Tensor<T>& x, const SsmWeights<T>& w, const Tensor<T>& wo, std::size_t heads) {
  auto s = ssm_stream(x, w, heads);
  return {s, ops::matmul(s, wo)};
}

namespace detail {

template <typename T>
void validate_request(const ModelConfig& cfg, std::size_t len, const CaptureSet& capture,
                      const InterventionPlan<T>& plan) {
  for (const auto& c : capture) {
    cfg.check_address(c.head);
    if (c.position >= len) throw ContractError("capture position beyond sequence length");
  }
  std::set<CaptureRequest> seen;
  for (const auto& d : plan.directives) {
    cfg.check_address(d.head);
    if (d.position >= len) throw ContractError("intervention position beyond sequence length");
    if (!seen.insert({d.head, d.position}).second) {
      throw ContractError("more than one directive for " + to_string(d.head) + " at position " +
                          std::to_string(d.position));
    }
    if (d.mode != InterventionMode::zero && d.vector.size() != cfg.head_dim(d.head.stream)) {
      throw ContractError("intervention vector for " + to_string(d.head) + " has dimension " +
                          std::to_string(d.vector.size()) + ", expected " +
                          std::to_string(cfg.head_dim(d.head.stream)));
    }
  }
}

// Applies the plan's directives for one (layer, stream) hook, then records
// requested captures from the post-intervention values.
template <typename T>
Tensor<T> apply_hook(const ModelConfig& cfg, std::size_t layer, Stream stream, Tensor<T> value,
                     const ForwardOptions<T>& opts, ForwardResult<T>& result) {
  const auto hd = cfg.head_dim(stream);
  std::vector<ops::PatchDirective<T>> patches;
  for (const auto& d : opts.plan.directives) {
    if (d.head.layer != layer || d.head.stream != stream) continue;
    const auto mode = d.mode == InterventionMode::add ? ops::PatchMode::add : ops::PatchMode::replace;
    patches.push_back({d.position, d.head.head * hd,
                       d.mode == InterventionMode::zero ? std::vector<T>(hd, T{0}) : d.vector, mode});
  }
  if (!patches.empty()) value = ops::patch(value, patches);
  for (const auto& c : opts.capture) {
    if (c.head.layer != layer || c.head.stream != stream) continue;
    const auto row = value.data().subspan(c.position * value.cols() + c.head.head * hd, hd);
    result.captured[c] = std::vector<T>(row.begin(), row.end());
  }
  if (opts.capture_streams) result.streams[{layer, stream}] = value;
  return value;
}

/// Runs every layer and returns the final hidden states [len x d] before the
/// final norm.
template <typename T>
Tensor<T> trunk(const Model<T>& model, std::span<const int> tokens, const ForwardOptions<T>& opts,
                ForwardResult<T>& result) {
  const auto& cfg = model.config();
  const auto len = tokens.size();
  if (len == 0) throw ContractError("empty token sequence");
  if (len > cfg.max_seq_len) throw ContractError("sequence longer than max_seq_len");
  validate_request(cfg, len, opts.capture, opts.plan);

  auto x = ops::embedding(model.token_embedding(), tokens);
  if (model.position_embedding()) x = ops::add(x, ops::slice(*model.position_embedding(), 0, 0, len));
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    const auto& w = model.layers()[l];
    auto h = ops::rmsnorm(x, w.norm_mix);
    Tensor<T> mixed;
    std::optional<Tensor<T>> attn_out, ssm_out;
    if (w.attn) {
      attn_out = apply_hook(cfg, l, Stream::attention,
                               icl::attention_stream(h, *w.attn, cfg.n_attn_heads, cfg.window), opts, result);
    }
    if (w.ssm) {
      ssm_out = apply_hook(cfg, l, Stream::ssm, icl::ssm_stream(h, *w.ssm, cfg.n_ssm_heads), opts, result);
    }
    if (attn_out && ssm_out) {
      mixed = ops::scale(ops::add(*attn_out, *ssm_out), T(0.5));
    } else {
      mixed = attn_out ? *attn_out : *ssm_out;
    }
    if (opts.capture_streams) result.projection_inputs[l] = mixed;
    x = ops::add(x, ops::matmul(mixed, w.wo));
    auto hidden = ops::silu(ops::matmul(ops::rmsnorm(x, w.norm_mlp), w.mlp_in));
    x = ops::add(x, ops::matmul(hidden, w.mlp_out));
  }
  return x;
}

}  // namespace detail

/// Forward pass with optional head captures and interventions.
template <typename T>
ForwardResult<T> forward(const Model<T>& model, std::span<const int> tokens, const ForwardOptions<T>& opts) {
  ForwardResult<T> result;
  auto x = detail::trunk(model, tokens, opts, result);
  if (opts.last_logits_only) {
    x = ops::slice(x, 0, tokens.size() - 1, tokens.size());
  }
  result.logits = ops::matmul(ops::rmsnorm(x, model.final_norm()), model.lm_head());
  return result;
}

template <typename T>
ForwardResult<T> forward(const Model<T>& model, std::span<const int> tokens, const CaptureSet& capture = {},
                         const InterventionPlan<T>& plan = {}) {
  ForwardOptions<T> opts;
  opts.capture = capture;
  opts.plan = plan;
  return forward(model, tokens, opts);
}

/// Logits only at `positions`, for training losses.
template <typename T>
Tensor<T> logits_at(const Model<T>& model, std::span<const int> tokens, std::span<const std::size_t> positions) {
  ForwardResult<T> scratch;
  auto x = detail::trunk(model, tokens, ForwardOptions<T>{}, scratch);
  x = ops::gather_rows(x, positions);
  return ops::matmul(ops::rmsnorm(x, model.final_norm()), model.lm_head());
}

}  // namespace icl
