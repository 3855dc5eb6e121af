#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "icllab/model/checkpoint.hpp"
#include "icllab/model/model.hpp"
#include "support/gradcheck.hpp"
#include "support/micro.hpp"

namespace icl {
namespace {

using icl::testing::kAllArchs;
using icl::testing::micro_config;
using icl::testing::random_tokens;

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
  return m;
}

TEST(Schedule, SixSsmLayersThenAttention) {
  const auto s = hybrid_sequential_schedule(7, 6);
  std::vector<LayerKind> want(6, LayerKind::ssm);
  want.push_back(LayerKind::attention);
  EXPECT_EQ(s, want);
}

TEST(Schedule, AlternatingWhenAttnEveryIsOne) {
  EXPECT_EQ(hybrid_sequential_schedule(4, 1),
            (std::vector<LayerKind>{LayerKind::ssm, LayerKind::attention, LayerKind::ssm, LayerKind::attention}));
}

TEST(Schedule, TruncatesBeforeFirstAttention) {
  EXPECT_EQ(hybrid_sequential_schedule(3, 6), std::vector<LayerKind>(3, LayerKind::ssm));
  EXPECT_THROW(hybrid_sequential_schedule(3, 0), ConfigError);
}

TEST(Config, InvariantsEnforced) {
  auto c = micro_config(Arch::transformer);
  c.n_attn_heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  auto s = micro_config(Arch::ssm_multi_head);
  s.n_ssm_heads = 3;
  EXPECT_THROW(s.validate(), ConfigError);
  auto single = micro_config(Arch::ssm_single_head);
  EXPECT_EQ(single.n_ssm_heads, 1u);
  EXPECT_EQ(single.head_dim(Stream::ssm), single.d_model);
  auto hyb = micro_config(Arch::hybrid_sequential);
  EXPECT_FALSE(hyb.has_stream(0, Stream::attention));
  EXPECT_TRUE(hyb.has_stream(1, Stream::attention));
  EXPECT_THROW(hyb.check_address({0, Stream::attention, 0}), AddressError);
  EXPECT_THROW(hyb.check_address({2, Stream::ssm, 0}), AddressError);
  EXPECT_THROW(hyb.check_address({0, Stream::ssm, 2}), AddressError);
  EXPECT_EQ(micro_config(Arch::hybrid_parallel).all_heads().size(), 8u);
}

TEST(Forward, DeterministicPlainForward) {
  std::mt19937_64 rng(1);
  for (auto arch : kAllArchs) {
    Model<double> m(micro_config(arch), 3);
    auto toks = random_tokens(10, 24, rng);
    EXPECT_EQ(forward(m, toks).logits.values(), forward(m, toks).logits.values());
    EXPECT_EQ(forward(m, toks).logits.shape(), (Shape{10, 24}));
  }
}

TEST(Forward, IdentityPatchLeavesLogitsUnchanged) {
  std::mt19937_64 rng(2);
  for (auto arch : kAllArchs) {
    Model<double> m(micro_config(arch), 5);
    auto toks = random_tokens(9, 24, rng);
    const auto base = forward(m, toks);
    for (const auto& h : m.config().all_heads()) {
      for (std::size_t pos : {std::size_t{0}, std::size_t{4}, std::size_t{8}}) {
        const auto cap = forward(m, toks, CaptureSet{{h, pos}});
        InterventionPlan<double> plan;
        plan.replace(h, pos, cap.head_output(h, pos));
        EXPECT_LE(max_abs_diff(forward(m, toks, {}, plan).logits, base.logits), 1e-6)
            << to_string(arch) << " " << to_string(h);
      }
    }
  }
}

TEST(Forward, AddingZeroVectorIsNoOp) {
  std::mt19937_64 rng(3);
  for (auto arch : kAllArchs) {
    Model<double> m(micro_config(arch), 7);
    auto toks = random_tokens(6, 24, rng);
    InterventionPlan<double> plan;
    for (const auto& h : m.config().all_heads()) plan.add(h, 5, std::vector<double>(m.config().head_dim(h.stream), 0.0));
    EXPECT_EQ(forward(m, toks, {}, plan).logits.values(), forward(m, toks).logits.values());
  }
}

TEST(Forward, InterventionNeverChangesEarlierPositions) {
  std::mt19937_64 rng(4);
  const std::size_t len = 8;
  for (auto arch : kAllArchs) {
    Model<double> m(micro_config(arch), 11);
    auto toks = random_tokens(len, 24, rng);
    const auto base = forward(m, toks).logits;
    for (const auto& h : m.config().all_heads()) {
      for (std::size_t t = 0; t < len; ++t) {
        InterventionPlan<double> plan;
        plan.add(h, t, std::vector<double>(m.config().head_dim(h.stream), 3.0));
        const auto patched = forward(m, toks, {}, plan).logits;
        for (std::size_t p = 0; p < t; ++p)
          for (std::size_t v = 0; v < 24; ++v) ASSERT_EQ(patched.at(p, v), base.at(p, v));
        double changed = 0;
        for (std::size_t v = 0; v < 24; ++v) changed += std::abs(patched.at(t, v) - base.at(t, v));
        EXPECT_GT(changed, 0.0) << to_string(h) << " t=" << t;
      }
    }
  }
}

TEST(Forward, CapturedHeadsConcatenateToStream) {
  std::mt19937_64 rng(5);
  for (auto arch : kAllArchs) {
    Model<double> m(micro_config(arch), 13);
    auto toks = random_tokens(7, 24, rng);
    ForwardOptions<double> opts;
    opts.capture_streams = true;
    for (const auto& h : m.config().all_heads())
      for (std::size_t p = 0; p < toks.size(); ++p) opts.capture.insert({h, p});
    const auto r = forward(m, toks, opts);
    for (const auto& [key, stream] : r.streams) {
      const auto [layer, s] = key;
      const auto hd = m.config().head_dim(s);
      for (std::size_t p = 0; p < toks.size(); ++p) {
        std::vector<double> joined;
        for (std::size_t h = 0; h < m.config().heads(layer, s); ++h) {
          const auto& v = r.head_output({layer, s, h}, p);
          ASSERT_EQ(v.size(), hd);
          joined.insert(joined.end(), v.begin(), v.end());
        }
        const auto row = stream.data().subspan(p * stream.cols(), stream.cols());
        EXPECT_EQ(joined, std::vector<double>(row.begin(), row.end()));
      }
    }
  }
}

TEST(HybridParallel, ProjectionInputIsMeanOfStreams) {
  std::mt19937_64 rng(6);
  Model<double> m(micro_config(Arch::hybrid_parallel), 17);
  for (int trial = 0; trial < 10; ++trial) {
    auto toks = random_tokens(6, 24, rng);
    ForwardOptions<double> opts;
    opts.capture_streams = true;
    const auto r = forward(m, toks, opts);
    for (std::size_t l = 0; l < 2; ++l) {
      const auto& a = r.streams.at({l, Stream::attention});
      const auto& s = r.streams.at({l, Stream::ssm});
      const auto& mix = r.projection_inputs.at(l);
      for (std::size_t i = 0; i < mix.numel(); ++i)
        EXPECT_NEAR(mix.values()[i], 0.5 * (a.values()[i] + s.values()[i]), 1e-15);
    }
  }
}

TEST(HybridParallel, ZeroedAttentionLeavesHalfTheSsmStream) {
  std::mt19937_64 rng(7);
  Model<double> m(micro_config(Arch::hybrid_parallel), 19);
  auto toks = random_tokens(5, 24, rng);
  ForwardOptions<double> opts;
  opts.capture_streams = true;
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t p = 0; p < toks.size(); ++p) opts.plan.zero({0, Stream::attention, h}, p);
  const auto r = forward(m, toks, opts);
  const auto& s = r.streams.at({0, Stream::ssm});
  const auto& mix = r.projection_inputs.at(0);
  for (std::size_t i = 0; i < mix.numel(); ++i) EXPECT_DOUBLE_EQ(mix.values()[i], 0.5 * s.values()[i]);
}

TEST(HybridParallel, EqualStreamsGiveThatStream) {
  // With both streams replaced by the same vectors the mean is that vector.
  std::mt19937_64 rng(8);
  Model<double> m(micro_config(Arch::hybrid_parallel), 23);
  auto toks = random_tokens(4, 24, rng);
  ForwardOptions<double> opts;
  opts.capture_streams = true;
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t p = 0; p < toks.size(); ++p) {
      std::vector<double> v{1.0 + h, -2.0, 0.5 * p, 3.0};
      opts.plan.replace({0, Stream::attention, h}, p, v);
      opts.plan.replace({0, Stream::ssm, h}, p, v);
    }
  const auto r = forward(m, toks, opts);
  EXPECT_EQ(r.projection_inputs.at(0).values(), r.streams.at({0, Stream::attention}).values());
}

TEST(Forward, RejectsInvalidRequests) {
  Model<double> m(micro_config(Arch::hybrid_sequential), 29);
  std::vector<int> toks{1, 2, 3};
  InterventionPlan<double> bad_addr;
  bad_addr.zero({0, Stream::attention, 0}, 0);
  EXPECT_THROW(forward(m, toks, {}, bad_addr), AddressError);
  InterventionPlan<double> bad_dim;
  bad_dim.add({0, Stream::ssm, 0}, 0, {1.0, 2.0});
  EXPECT_THROW(forward(m, toks, {}, bad_dim), ContractError);
  InterventionPlan<double> dup;
  dup.zero({0, Stream::ssm, 0}, 1).zero({0, Stream::ssm, 0}, 1);
  EXPECT_THROW(forward(m, toks, {}, dup), ContractError);
  InterventionPlan<double> past_end;
  past_end.zero({0, Stream::ssm, 0}, 3);
  EXPECT_THROW(forward(m, toks, {}, past_end), ContractError);
  std::vector<int> oov{1, 99};
  EXPECT_THROW(forward(m, oov), IndexError);
}

AttentionWeights<double> random_attention(std::size_t d, std::mt19937_64& rng) {
  using icl::testing::random_tensor;
  return {random_tensor({d, d}, rng, 0.5), random_tensor({d, d}, rng, 0.5), random_tensor({d, d}, rng, 0.5)};
}

TEST(AttentionBlock, SingleTokenReturnsValueVectors) {
  std::mt19937_64 rng(9);
  auto w = random_attention(6, rng);
  auto x = icl::testing::random_tensor({1, 6}, rng);
  const auto out = attention_block(x, w, icl::testing::random_tensor({6, 6}, rng), 2, 0);
  const auto v = ops::matmul(x, w.wv);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.stream.values()[i], v.values()[i], 1e-14);
}

TEST(AttentionBlock, WindowOneAttendsOnlyToSelf) {
  std::mt19937_64 rng(10);
  auto w = random_attention(6, rng);
  auto x = icl::testing::random_tensor({5, 6}, rng);
  const auto out = attention_stream(x, w, 3, 1);
  const auto v = ops::matmul(x, w.wv);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_NEAR(out.values()[i], v.values()[i], 1e-14);
}

// Naive per-head O(n^2) loops as an independent oracle.
TEST(AttentionBlock, MatchesBruteForcePerHead) {
  std::mt19937_64 rng(11);
  for (std::size_t window : {std::size_t{0}, std::size_t{3}}) {
    const std::size_t d = 8, heads = 2, hd = 4, len = 7;
    auto w = random_attention(d, rng);
    auto x = icl::testing::random_tensor({len, d}, rng);
    const auto got = attention_stream(x, w, heads, window);
    const auto q = ops::matmul(x, w.wq), k = ops::matmul(x, w.wk), v = ops::matmul(x, w.wv);
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < len; ++t) {
        std::vector<double> score(len, 0.0);
        double z = 0;
        for (std::size_t j = 0; j <= t; ++j) {
          if (window && t - j >= window) continue;
          double s = 0;
          for (std::size_t c = 0; c < hd; ++c) s += q.at(t, h * hd + c) * k.at(j, h * hd + c);
          score[j] = std::exp(s / std::sqrt(double(hd)));
          z += score[j];
        }
        for (std::size_t c = 0; c < hd; ++c) {
          double acc = 0;
          for (std::size_t j = 0; j <= t; ++j) acc += score[j] / z * v.at(j, h * hd + c);
          EXPECT_NEAR(got.at(t, h * hd + c), acc, 1e-12);
        }
      }
  }
}

TEST(SsmBlock, SequentialMatchesChunkedOnModelWeights) {
  std::mt19937_64 rng(12);
  Model<double> m(micro_config(Arch::ssm_multi_head), 31);
  const auto& w = *m.layers()[0].ssm;
  auto x = icl::testing::random_tensor({12, 8}, rng);
  auto u = ops::silu(ops::causal_conv(ops::matmul(x, w.w_in), w.conv));
  auto a = ops::sigmoid(ops::add_bias(ops::matmul(u, w.w_gate), w.b_gate));
  auto b = ops::matmul(u, w.w_b), c = ops::matmul(u, w.w_c);
  const auto seq = ops::selective_scan(u, a, b, c, 2).values();
  const auto chk = ops::selective_scan_chunked(u, a, b, c, 2, 5);
  for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_NEAR(seq[i], chk[i], 1e-10);
  const auto out = ssm_block(x, w, m.layers()[0].wo, 2);
  EXPECT_EQ(out.stream.shape(), (Shape{12, 8}));
  EXPECT_EQ(out.output.shape(), (Shape{12, 8}));
}

class CheckpointTest : public ::testing::Test {
 protected:
  std::filesystem::path dir_ = std::filesystem::temp_directory_path() / "icllab_ckpt_test";
  void SetUp() override { std::filesystem::create_directories(dir_); }
  void TearDown() override { std::filesystem::remove_all(dir_); }
};

TEST_F(CheckpointTest, RoundTripIsBitwise) {
  std::mt19937_64 rng(13);
  for (auto arch : kAllArchs) {
    Model<float> m(micro_config(arch), 37);
    const auto path = dir_ / (std::string(to_string(arch)) + ".ckpt");
    checkpoint_save(m, path);
    auto loaded = load_model<float>(path);
    EXPECT_EQ(loaded.config(), m.config());
    auto toks = random_tokens(8, 24, rng);
    EXPECT_EQ(forward(loaded, toks).logits.values(), forward(m, toks).logits.values());
    Model<float> other(micro_config(arch), 99);
    checkpoint_load(other, path);
    EXPECT_EQ(forward(other, toks).logits.values(), forward(m, toks).logits.values());
  }
}

TEST_F(CheckpointTest, WrongArchitectureRejected) {
  Model<float> m(micro_config(Arch::transformer), 41);
  checkpoint_save(m, dir_ / "t.ckpt");
  Model<float> ssm(micro_config(Arch::ssm_multi_head), 41);
  EXPECT_THROW(checkpoint_load(ssm, dir_ / "t.ckpt"), LoadError);
}

TEST_F(CheckpointTest, TruncatedFileRejectedWithoutPartialLoad) {
  Model<float> m(micro_config(Arch::hybrid_parallel), 43);
  const auto path = dir_ / "h.ckpt";
  checkpoint_save(m, path);
  const auto size = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, size / 2);
  Model<float> target(micro_config(Arch::hybrid_parallel), 47);
  const auto before = target.named_parameters()[3].second.values();
  EXPECT_THROW(checkpoint_load(target, path), LoadError);
  EXPECT_EQ(target.named_parameters()[3].second.values(), before);
  EXPECT_THROW(load_model<float>(path), LoadError);
  EXPECT_THROW(load_model<float>(dir_ / "missing.ckpt"), LoadError);
}

TEST_F(CheckpointTest, FlippedByteRejected) {
  Model<float> m(micro_config(Arch::transformer), 53);
  const auto path = dir_ / "c.ckpt";
  checkpoint_save(m, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(200);
    f.put('\x7f');
  }
  EXPECT_THROW(load_model<float>(path), LoadError);
}

TEST(Model, GradientsFlowThroughEveryArchitecture) {
  // Finite differences on the token-level loss with respect to a few
  // parameter tensors of each micro model.
  std::mt19937_64 rng(14);
  for (auto arch : kAllArchs) {
    Model<double> m(micro_config(arch, 12), 59);
    auto toks = random_tokens(6, 12, rng);
    std::vector<std::size_t> pos{1, 3, 5};
    std::vector<int> tgt{toks[2], toks[4], toks[0]};
    auto params = m.named_parameters();
    for (std::size_t pi : {std::size_t{0}, params.size() / 2, params.size() - 1}) {
      Tensor<double> p = params[pi].second;
      p.set_requires_grad(true);
      Tape<double> tape;
      {
        TapeGuard<double> g(tape);
        tape.backward(ops::cross_entropy(logits_at(m, toks, pos), tgt));
      }
      const std::vector<double> analytic(p.grad().begin(), p.grad().end());
      p.clear_grad();
      p.set_requires_grad(false);
      auto data = p.mutable_data();
      double diff = 0, norm = 0;
      for (std::size_t j = 0; j < data.size(); j += std::max<std::size_t>(1, data.size() / 16)) {
        const double saved = data[j];
        data[j] = saved + 1e-5;
        const double up = ops::cross_entropy(logits_at(m, toks, pos), tgt).item();
        data[j] = saved - 1e-5;
        const double down = ops::cross_entropy(logits_at(m, toks, pos), tgt).item();
        data[j] = saved;
        const double num = (up - down) / 2e-5;
        diff += (num - analytic[j]) * (num - analytic[j]);
        norm += num * num + analytic[j] * analytic[j];
      }
      EXPECT_LT(std::sqrt(diff), 1e-4 * std::max(1e-8, std::sqrt(norm))) << to_string(arch) << " " << params[pi].first;
    }
  }
}

}  // namespace
}  // namespace icl
