#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "icllab/numerics/ops.hpp"
#include "icllab/numerics/scan.hpp"
#include "support/gradcheck.hpp"

namespace icl {
namespace {

using D = Tensor<double>;
using icl::testing::grad_check;
using icl::testing::project;
using icl::testing::random_tensor;

TEST(Matmul, IdentityTimesMatrix) {
  D eye = D::matrix(3, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  D m = D::matrix(3, 2, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(ops::matmul(eye, m).values(), m.values());
}

TEST(Matmul, HandMultiplication) {
  auto y = ops::matmul(D::matrix(2, 2, {1, 2, 3, 4}), D::matrix(2, 1, {0, 1}));
  EXPECT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y.values(), (std::vector<double>{2, 4}));
}

TEST(Matmul, ZeroMatrix) {
  std::mt19937_64 rng(1);
  auto y = ops::matmul(D::zeros({4, 3}), random_tensor({3, 5}, rng));
  for (double v : y.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeMismatch) {
  EXPECT_THROW(ops::matmul(D::zeros({2, 3}), D::zeros({2, 3})), DimensionError);
}

TEST(Softmax, UniformOnEqualInputs) {
  auto y = ops::softmax(D({3}, {0, 0, 0}), 0);
  for (double v : y.values()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Softmax, NoOverflowOnLargeLogits) {
  auto y = ops::softmax(D({2}, {1000, 0}), 0);
  EXPECT_NEAR(y.at(0), 1.0, 1e-12);
  EXPECT_NEAR(y.at(1), 0.0, 1e-12);
}

TEST(Softmax, LogsOfIntegersGiveProportions) {
  auto y = ops::softmax(D({3}, {std::log(1.0), std::log(2.0), std::log(3.0)}), 0);
  EXPECT_NEAR(y.at(0), 1.0 / 6, 1e-12);
  EXPECT_NEAR(y.at(1), 2.0 / 6, 1e-12);
  EXPECT_NEAR(y.at(2), 3.0 / 6, 1e-12);
}

TEST(Softmax, SlicesAreDistributionsOnBothAxes) {
  std::mt19937_64 rng(7);
  for (int axis : {0, 1}) {
    auto x = random_tensor({5, 7}, rng, 10.0);
    auto y = ops::softmax(x, axis);
    const auto slices = axis == 1 ? 5 : 7;
    for (int s = 0; s < slices; ++s) {
      double total = 0;
      for (int i = 0; i < (axis == 1 ? 7 : 5); ++i) {
        const double p = axis == 1 ? y.at(s, i) : y.at(i, s);
        EXPECT_GE(p, 0.0);
        total += p;
      }
      EXPECT_NEAR(total, 1.0, 1e-6);
    }
  }
  EXPECT_THROW(ops::softmax(D::zeros({2, 2}), 2), DimensionError);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
  std::vector<int> t{2};
  EXPECT_NEAR(ops::cross_entropy(D::zeros({1, 4}), t).item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, DecreasesWithMargin) {
  std::vector<int> t{1};
  double last = std::numeric_limits<double>::infinity();
  for (double margin = -5; margin <= 5; margin += 0.5) {
    const double loss = ops::cross_entropy(D::matrix(1, 3, {0, margin, 0}), t).item();
    EXPECT_LT(loss, last);
    last = loss;
  }
}

TEST(CrossEntropy, BatchOfOneMatchesSingleRowAndMeanOverRows) {
  std::mt19937_64 rng(3);
  auto a = random_tensor({1, 6}, rng);
  auto b = random_tensor({1, 6}, rng);
  std::vector<int> ta{4}, tb{1}, both{4, 1};
  const double la = ops::cross_entropy(a, ta).item();
  const double lb = ops::cross_entropy(b, tb).item();
  EXPECT_NEAR(ops::cross_entropy(ops::concat<double>({a, b}, 0), both).item(), (la + lb) / 2, 1e-14);
}

TEST(CrossEntropy, TargetOutOfRange) {
  std::vector<int> t{4};
  EXPECT_THROW(ops::cross_entropy(D::zeros({1, 4}), t), IndexError);
  std::vector<int> neg{-1};
  EXPECT_THROW(ops::cross_entropy(D::zeros({1, 4}), neg), IndexError);
}

TEST(Backward, SumGivesOnes) {
  D x({4}, {1, -2, 3, 0.5}, true);
  Tape<double> tape;
  {
    TapeGuard<double> g(tape);
    tape.backward(ops::sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  D x({3}, {1.5, -2, 0.25}, true);
  Tape<double> tape;
  {
    TapeGuard<double> g(tape);
    tape.backward(ops::sum(ops::mul(x, x)));
  }
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2 * x.at(i));
}

TEST(Backward, NonScalarLossRejected) {
  D x({3}, {1, 2, 3}, true);
  Tape<double> tape;
  TapeGuard<double> g(tape);
  auto y = ops::scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ContractError);
}

TEST(Backward, LossFromAnotherTapeRejected) {
  D x({3}, {1, 2, 3}, true);
  Tape<double> a, b;
  Tensor<double> loss;
  {
    TapeGuard<double> g(a);
    loss = ops::sum(x);
  }
  EXPECT_THROW(b.backward(loss), ContractError);
}

TEST(Backward, ThreeLayerMlpMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  std::vector<D> in{random_tensor({5, 4}, rng), random_tensor({4, 6}, rng, 0.5),
                    random_tensor({6, 6}, rng, 0.5), random_tensor({6, 3}, rng, 0.5)};
  auto f = [](const std::vector<D>& p) {
    auto h = ops::silu(ops::matmul(p[0], p[1]));
    h = ops::silu(ops::matmul(h, p[2]));
    return project(ops::matmul(h, p[3]), 5);
  };
  EXPECT_LT(grad_check(f, in).max_rel_error, 1e-4);
}

TEST(Backward, DeterministicAcrossRuns) {
  std::mt19937_64 rng(2);
  auto a = random_tensor({6, 8}, rng);
  auto w = random_tensor({8, 8}, rng);
  auto run = [&] {
    D wc = w.clone();
    wc.set_requires_grad(true);
    Tape<double> tape;
    TapeGuard<double> g(tape);
    auto q = ops::matmul(a, wc);
    auto y = ops::causal_attention(q, q, q, 2);
    tape.backward(project(ops::silu(y), 9));
    return std::vector<double>(wc.grad().begin(), wc.grad().end());
  };
  EXPECT_EQ(run(), run());
}

TEST(Numeric, NonFiniteIsAnError) {
  const double big = std::numeric_limits<double>::max();
  EXPECT_THROW(ops::scale(D({2}, {big, 1}), 10.0), NumericError);
  EXPECT_THROW(ops::matmul(D::matrix(1, 2, {big, big}), D::matrix(2, 1, {big, big})), NumericError);
}

TEST(RmsNorm, UnitRootMeanSquareBeforeGain) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 16}, rng, 1.0 + trial);
    auto y = ops::rmsnorm(x, D::full({16}, 1.0));
    for (std::size_t r = 0; r < 3; ++r) {
      double ms = 0;
      for (std::size_t c = 0; c < 16; ++c) ms += y.at(r, c) * y.at(r, c);
      EXPECT_NEAR(std::sqrt(ms / 16), 1.0, 1e-5);
    }
  }
}

TEST(Shapes, SliceConcatMeanEmbedding) {
  D m = D::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(ops::slice(m, 1, 1, 3).values(), (std::vector<double>{2, 3, 5, 6}));
  EXPECT_EQ(ops::slice(m, 0, 1, 2).values(), (std::vector<double>{4, 5, 6}));
  EXPECT_THROW(ops::slice(m, 1, 2, 2), DimensionError);
  EXPECT_EQ(ops::concat<double>({m, m}, 1).shape(), (Shape{2, 6}));
  EXPECT_EQ(ops::concat<double>({m, m}, 0).values()[3], 4.0);
  EXPECT_EQ(ops::mean(m, 0).values(), (std::vector<double>{2.5, 3.5, 4.5}));
  EXPECT_EQ(ops::mean(m, 1).values(), (std::vector<double>{2, 5}));
  std::vector<int> ids{1, 0, 1};
  EXPECT_EQ(ops::embedding(m, ids).values(), (std::vector<double>{4, 5, 6, 1, 2, 3, 4, 5, 6}));
  std::vector<int> bad{2};
  EXPECT_THROW(ops::embedding(m, bad), IndexError);
  EXPECT_THROW(ops::add(m, D::zeros({3, 2})), DimensionError);
  EXPECT_THROW(ops::add_bias(m, D::zeros({2})), DimensionError);
  EXPECT_THROW(D({2, 2}, {1, 2, 3}), DimensionError);
}

TEST(Patch, ReplaceAndAdd) {
  D m = D::matrix(2, 4, {1, 2, 3, 4, 5, 6, 7, 8});
  std::vector<ops::PatchDirective<double>> dirs{{1, 2, {10, 20}, ops::PatchMode::replace},
                                                {0, 0, {1, 1}, ops::PatchMode::add}};
  EXPECT_EQ(ops::patch(m, dirs).values(), (std::vector<double>{2, 3, 3, 4, 5, 6, 10, 20}));
}

// Every differentiable primitive against finite differences on random shapes.
TEST(GradientOracle, EveryPrimitiveOnRandomShapes) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> ext(1, 6);
  int cases = 0;
  for (int trial = 0; trial < 24; ++trial) {
    const auto m = ext(rng), n = ext(rng), k = ext(rng);
    const auto seed = static_cast<std::uint64_t>(trial);
    auto check = [&](const icl::testing::LossFn& f, std::vector<D> in) {
      const auto r = grad_check(f, std::move(in));
      EXPECT_LT(r.max_rel_error, 1e-4) << "trial " << trial;
      ++cases;
    };
    check([&](auto& p) { return project(ops::matmul(p[0], p[1]), seed); },
          {random_tensor({m, k}, rng), random_tensor({k, n}, rng)});
    check([&](auto& p) { return project(ops::add(p[0], p[1]), seed); },
          {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::sub(p[0], p[1]), seed); },
          {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::mul(p[0], p[1]), seed); },
          {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::scale(p[0], -1.7), seed); }, {random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::silu(p[0]), seed); }, {random_tensor({m, n}, rng, 2.0)});
    check([&](auto& p) { return project(ops::sigmoid(p[0]), seed); }, {random_tensor({m, n}, rng, 2.0)});
    check([&](auto& p) { return project(ops::transpose(p[0]), seed); }, {random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::reshape(p[0], {n, m}), seed); }, {random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::add_bias(p[0], p[1]), seed); },
          {random_tensor({m, n}, rng), random_tensor({n}, rng)});
    check([&](auto& p) { return project(ops::softmax(p[0], static_cast<int>(trial % 2)), seed); },
          {random_tensor({m, n}, rng, 2.0)});
    std::vector<int> targets(m);
    for (auto& t : targets) t = static_cast<int>(rng() % n);
    check([&](auto& p) { return ops::cross_entropy(p[0], targets); }, {random_tensor({m, n}, rng, 2.0)});
    check([&](auto& p) { return project(ops::rmsnorm(p[0], p[1]), seed); },
          {random_tensor({m, n + 1}, rng), random_tensor({n + 1}, rng)});
    std::vector<int> ids{0, static_cast<int>(m - 1), 0};
    check([&](auto& p) { return project(ops::embedding(p[0], ids), seed); }, {random_tensor({m, n}, rng)});
    std::vector<std::size_t> rows{m - 1, 0};
    check([&](auto& p) { return project(ops::gather_rows(p[0], rows), seed); }, {random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::slice(p[0], 1, 0, n), seed); }, {random_tensor({m, n + 1}, rng)});
    check([&](auto& p) { return project(ops::concat<double>({p[0], p[1]}, trial % 2), seed); },
          {random_tensor({m, n}, rng), random_tensor({m, n}, rng)});
    check([&](auto& p) { return project(ops::mean(p[0], static_cast<int>(trial % 2)), seed); },
          {random_tensor({m, n}, rng)});
    check(
        [&](auto& p) {
          std::vector<ops::PatchDirective<double>> d{{0, 0, std::vector<double>(n, 0.5), ops::PatchMode::replace},
                                                     {m - 1, 0, std::vector<double>(n, 0.5), ops::PatchMode::add}};
          return project(ops::patch(p[0], d), seed);
        },
        {random_tensor({m + 1, n}, rng)});
    check([&](auto& p) { return project(ops::causal_conv(p[0], p[1]), seed); },
          {random_tensor({m + 2, n}, rng), random_tensor({3, n}, rng)});
    const std::size_t heads = 1 + trial % 2;
    const std::size_t width = heads * (1 + trial % 3);
    const std::size_t window = trial % 3;  // 0 = full attention
    check([&](auto& p) { return project(ops::causal_attention(p[0], p[1], p[2], heads, window), seed); },
          {random_tensor({m + 1, width}, rng), random_tensor({m + 1, width}, rng),
           random_tensor({m + 1, width}, rng)});
    check(
        [&](auto& p) {
          return project(ops::selective_scan(p[0], ops::sigmoid(p[1]), p[2], p[3], heads), seed);
        },
        {random_tensor({m + 1, width}, rng), random_tensor({m + 1, width}, rng),
         random_tensor({m + 1, heads * 3}, rng), random_tensor({m + 1, heads * 3}, rng)});
  }
  EXPECT_GE(cases, 20 * 22);
}

// Random 4-layer composite through attention, scan, norm and MLP blocks.
TEST(GradientOracle, FourLayerComposite) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<D> in{random_tensor({5, 4}, rng), random_tensor({4, 4}, rng, 0.5),
                      random_tensor({4, 4}, rng, 0.5), random_tensor({4}, rng),
                      random_tensor({4, 4}, rng, 0.5)};
    auto f = [&](const std::vector<D>& p) {
      auto h = ops::matmul(p[0], p[1]);                               // layer 1: linear
      h = ops::add(h, ops::causal_attention(h, h, h, 2));             // layer 2: attention
      auto gate = ops::sigmoid(ops::matmul(h, p[2]));
      h = ops::add(h, ops::selective_scan(h, gate, h, h, 2));         // layer 3: scan
      h = ops::silu(ops::matmul(ops::rmsnorm(h, p[3]), p[4]));        // layer 4: norm + mlp
      std::vector<int> t{0, 1, 2, 3, 0};
      return ops::cross_entropy(h, t);
    };
    EXPECT_LT(grad_check(f, in).max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(SelectiveScan, ZeroDecayHasNoMemory) {
  std::mt19937_64 rng(5);
  auto u = random_tensor({6, 4}, rng);
  auto b = random_tensor({6, 3}, rng);
  auto c = random_tensor({6, 3}, rng);
  auto y = ops::selective_scan(u, D::zeros({6, 4}), b, c, 1);
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t k = 0; k < 4; ++k) {
      double expect = 0;
      for (std::size_t n = 0; n < 3; ++n) expect += c.at(t, n) * b.at(t, n) * u.at(t, k);
      EXPECT_NEAR(y.at(t, k), expect, 1e-12);
    }
}

TEST(SelectiveScan, UnitDecayConservesImpulse) {
  // State after an impulse at t = 0 stays B * u0; reading with C = e_n exposes it.
  const std::size_t len = 8;
  std::vector<double> u(len, 0.0);
  u[0] = 2.0;
  std::vector<double> b(len * 2), c(len * 2);
  for (std::size_t t = 0; t < len; ++t) {
    b[t * 2] = 0.5;
    b[t * 2 + 1] = -1.5;
    c[t * 2] = 1.0;
    c[t * 2 + 1] = 0.0;
  }
  auto y = ops::selective_scan(D({len, 1}, u), D::full({len, 1}, 1.0), D({len, 2}, b), D({len, 2}, c), 1);
  for (std::size_t t = 0; t < len; ++t) EXPECT_DOUBLE_EQ(y.at(t, 0), 1.0);
}

TEST(SelectiveScan, SequentialMatchesChunked) {
  std::mt19937_64 rng(99);
  std::uniform_int_distribution<std::size_t> len_d(1, 40), heads_d(1, 3), hw_d(1, 4), st_d(1, 5), ch_d(1, 9);
  for (int cfg = 0; cfg < 50; ++cfg) {
    const auto len = len_d(rng), heads = heads_d(rng), hw = hw_d(rng), st = st_d(rng), chunk = ch_d(rng);
    const auto ch = heads * hw;
    auto u = random_tensor({len, ch}, rng);
    auto a = ops::sigmoid(random_tensor({len, ch}, rng, 3.0));
    auto b = random_tensor({len, heads * st}, rng);
    auto c = random_tensor({len, heads * st}, rng);
    const auto seq = ops::selective_scan(u, a, b, c, heads).values();
    const auto chk = ops::selective_scan_chunked(u, a, b, c, heads, chunk);
    ASSERT_EQ(seq.size(), chk.size());
    for (std::size_t i = 0; i < seq.size(); ++i) EXPECT_NEAR(seq[i], chk[i], 1e-10);
  }
}

}  // namespace
}  // namespace icl
