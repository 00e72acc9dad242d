#include <gtest/gtest.h>

#include <cmath>

#include "stagecct/gradcheck.hpp"
#include "stagecct/mix.hpp"
#include "stagecct/ops.hpp"

namespace stagecct::mix {
namespace {

std::vector<Scalar> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<Scalar> v(numel(shape));
  for (auto& x : v) x = rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

TEST(MixLambda, EndpointsAndArithmetic) {
  Rng rng(1);
  const Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  EXPECT_EQ(vec(mix_lambda(a, b, 1.0)), vec(a));
  EXPECT_EQ(vec(mix_lambda(a, b, 0.0)), vec(b));
  EXPECT_EQ(mix_lambda(2.0, -2.0, 0.75), 1.0);
  EXPECT_THROW(mix_lambda(a, b, 1.5), std::invalid_argument);
  EXPECT_THROW(mix_lambda(a, Tensor::zeros({4, 3}), 0.5), ShapeError);
}

TEST(BlockMask, DegenerateGammas) {
  Rng rng(2);
  const auto ones = sample_block_mask({4, 10, 10}, 0.0, 3, rng);
  EXPECT_EQ(ones.pu, 1.0);
  const auto zeros = sample_block_mask({4, 10, 10}, 1.0, 1, rng);
  EXPECT_EQ(zeros.pu, 0.0);
}

TEST(BlockMask, MillionEntryAlteredFraction) {
  Rng rng(3);
  const auto m = sample_block_mask({1000, 1000}, 0.75, 1, rng);
  EXPECT_NEAR(1.0 - m.pu, 0.75, 0.005);
}

TEST(BlockMask, MeanOverManyMasks) {
  Rng rng(4);
  double total = 0;
  const int n = 500;
  for (int i = 0; i < n; ++i) total += 1.0 - sample_block_mask({16, 24, 8}, 0.75, 1, rng).pu;
  EXPECT_NEAR(total / n, 0.75, 0.01);
}

TEST(BlockMask, PuMatchesRecount) {
  Rng rng(5);
  for (int i = 0; i < 50; ++i) {
    const auto m = sample_block_mask({2, 12, 9}, 0.4, 3, rng);
    EXPECT_EQ(m.pu, unaltered_fraction(m.keep));
  }
}

TEST(BlockMask, LargerBlocksAreContiguousAndCompensated) {
  Rng rng(6);
  double altered = 0;
  const int n = 400;
  for (int i = 0; i < n; ++i) {
    const auto m = sample_block_mask({4, 24, 24}, 0.3, 3, rng);
    ASSERT_TRUE(zeros_are_block_union(m, 3));
    altered += 1.0 - m.pu;
  }
  // Overlapping blocks make the realized fraction fall below gamma.
  EXPECT_GT(altered / n, 0.15);
  EXPECT_LT(altered / n, 0.3);
}

TEST(BlockMask, UnionCheckRejectsStrayZero) {
  BlockMask m;
  m.shape = {5, 5};
  m.keep.assign(25, 1);
  m.keep[12] = 0;
  EXPECT_TRUE(zeros_are_block_union(m, 1));
  EXPECT_FALSE(zeros_are_block_union(m, 3));
}

TEST(BlockMask, BlockLargerThanTensorThrows) {
  Rng rng(7);
  EXPECT_THROW(sample_block_mask({2, 2, 8}, 0.5, 3, rng), ShapeError);
  EXPECT_THROW(sample_block_mask({8, 8}, 0.5, 2, rng), std::invalid_argument);
}

TEST(PatchUp, HardExamples) {
  const Tensor gi({2, 2}, {1, 2, 3, 4}), gj({2, 2}, {5, 6, 7, 8});
  EXPECT_EQ(vec(patchup_hard(gi, gj, Tensor({2, 2}, {1, 0, 0, 1}))), (std::vector<Scalar>{1, 6, 7, 4}));
  EXPECT_EQ(vec(patchup_hard(gi, gj, Tensor::full({2, 2}, 1.0))), vec(gi));
  EXPECT_EQ(vec(patchup_hard(gi, gj, Tensor::zeros({2, 2}))), vec(gj));
  EXPECT_THROW(patchup_hard(gi, Tensor::zeros({4}), Tensor::zeros({2, 2})), ShapeError);
}

TEST(PatchUp, SoftExamples) {
  EXPECT_EQ(vec(patchup_soft(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {3, 6}), Tensor({1, 2}, {1, 0}), 0.5)),
            (std::vector<Scalar>{1, 4}));
  Rng rng(8);
  const Tensor gi = random_tensor({3, 5}, rng), gj = random_tensor({3, 5}, rng);
  const Tensor m = sample_block_mask({3, 5}, 0.5, 1, rng).tensor();
  EXPECT_EQ(vec(patchup_soft(gi, gj, m, 1.0)), vec(gi));
  EXPECT_EQ(vec(patchup_soft(gi, gj, Tensor::full({3, 5}, 1.0), 0.3)), vec(gi));
  EXPECT_EQ(vec(patchup_soft(gi, gj, m, 0.0)), vec(patchup_hard(gi, gj, m)));
}

TEST(PatchUp, ManifoldMixupIdentities) {
  Rng rng(9);
  const Tensor g = random_tensor({2, 6}, rng), h = random_tensor({2, 6}, rng);
  EXPECT_EQ(vec(manifold_mixup(g, h, 1.0)), vec(g));
  EXPECT_EQ(vec(manifold_mixup(g, h, 0.3)), vec(patchup_soft(g, h, Tensor::zeros({2, 6}), 0.3)));
  const Tensor zero = manifold_mixup(g, ops::mul(g, -1.0), 0.5);
  for (double v : zero.values()) EXPECT_EQ(v, 0.0);
}

TEST(PatchUp, SoftGradientReachesPartnerInAlteredRegion) {
  const Tensor gi({1, 3}, {0.5, -1.0, 2.0});
  const Tensor gj({1, 3}, {1.5, 0.25, -0.75}, true);
  const Tensor m({1, 3}, {1, 0, 0});
  Tape tape;
  Tensor out;
  {
    TapeScope scope(tape);
    out = ops::sum(patchup_soft(gi, gj, m, 0.25));
  }
  tape.backward(out);
  const auto g = gj.grad();
  EXPECT_EQ(g[0], 0.0);
  EXPECT_EQ(g[1], 0.75);
  EXPECT_EQ(g[2], 0.75);
  const auto report = grad_check([&](const Tensor& x) { return ops::sum(ops::mul(patchup_soft(gi, x, m, 0.25), x)); }, gj);
  EXPECT_TRUE(report.pass()) << report.worst();
}

TEST(Targets, Examples) {
  EXPECT_EQ(reweighted_target(1, 0, 1.0, 0.3, MixMode::kHard).w, 1.0);
  EXPECT_EQ(reweighted_target(1, 0, 1.0, 0.3, MixMode::kSoft).w, 1.0);
  const auto hard = reweighted_target(1, 0, 0.6, 0.3, MixMode::kHard);
  EXPECT_NEAR(hard.w, 0.6, 1e-12);
  EXPECT_EQ(hard.y, 0.0);
  const auto soft = reweighted_target(1, 0, 0.5, 0.5, MixMode::kSoft);
  EXPECT_NEAR(soft.w, 0.75, 1e-12);
  EXPECT_EQ(soft.y, 0.5);
  EXPECT_THROW(reweighted_target(1.2, 0, 0.5, 0.5, MixMode::kSoft), std::invalid_argument);
}

TEST(PatchUpLoss, Examples) {
  const Tensor p({1}, {0.5});
  EXPECT_NEAR(patchup_loss(p, {1}, {0}, 0.6).item(), 0.6931471805599453, 1e-12);
  const Tensor q({3}, {0.2, 0.7, 0.9});
  const std::vector<double> yi{1, 0, 1}, y{0, 0.5, 1};
  EXPECT_EQ(patchup_loss(q, yi, y, 1.0).item(), patchup_loss(q, yi, yi, 0.0).item());
  EXPECT_NEAR(patchup_loss(q, yi, yi, 0.2).item(), patchup_loss(q, yi, yi, 0.9).item(), 1e-15);
  EXPECT_TRUE(std::isfinite(patchup_loss(Tensor({2}, {0.0, 1.0}), {1, 0}, {1, 0}, 0.5).item()));
}

TEST(PatchUpLoss, GradientCheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<Scalar> v(6);
    for (auto& x : v) x = rng.uniform(0.05, 0.95);
    const std::vector<double> yi{1, 0, 1, 0, 1, 1}, y{0.3, 0.5, 1, 0, 0.1, 0.8};
    const auto report = grad_check([&](const Tensor& p) { return patchup_loss(p, yi, y, 0.4); }, Tensor({6}, v));
    EXPECT_TRUE(report.pass()) << report.worst();
  }
}

TEST(ApplyMix, ProbabilityZeroLeavesActivation) {
  Rng rng(10);
  const Tensor g = random_tensor({4, 3, 2}, rng);
  PatchUpConfig cfg;
  cfg.patchup_prob = 0.0;
  const auto out = apply_mix(g, {1, 0, 1, 0}, cfg, rng);
  EXPECT_FALSE(out.applied);
  EXPECT_TRUE(out.mixed.is_same(g));
}

TEST(ApplyMix, OutcomeBookkeeping) {
  for (auto mode : {MixMode::kHard, MixMode::kSoft, MixMode::kManifold}) {
    Rng rng(11);
    const Tensor g = random_tensor({6, 4, 3}, rng);
    PatchUpConfig cfg;
    cfg.mode = mode;
    const std::vector<double> labels{1, 0, 0, 1, 0, 0};
    const auto out = apply_mix(g, labels, cfg, rng);
    ASSERT_TRUE(out.applied);
    EXPECT_GE(out.lambda, 0.0);
    EXPECT_LE(out.lambda, 1.0);
    auto sorted = out.partner;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
    EXPECT_EQ(out.pu, unaltered_fraction(out.mask.keep));
    const Tensor partner = ops::gather(g, out.partner);
    const Tensor m = out.mask.tensor();
    const Tensor expect = mode == MixMode::kHard ? patchup_hard(g, partner, m) : patchup_soft(g, partner, m, out.lambda);
    EXPECT_EQ(vec(out.mixed), vec(expect));
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const auto t = reweighted_target(labels[i], labels[out.partner[i]], out.pu, out.lambda, mode);
      EXPECT_EQ(out.w[i], t.w);
      EXPECT_EQ(out.y[i], t.y);
    }
  }
}

TEST(Config, Defaults) {
  const PatchUpConfig c;
  EXPECT_EQ(c.patchup_prob, 1.0);
  EXPECT_EQ(c.gamma, 0.75);
  EXPECT_EQ(c.block_size, 1u);
  const auto back = PatchUpConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_THROW(PatchUpConfig::from_json({{"block_size", 2}}), std::invalid_argument);
}

}  // namespace
}  // namespace stagecct::mix
