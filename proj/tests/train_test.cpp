#include <gtest/gtest.h>

#include <cmath>

#include "stagecct/gradcheck.hpp"
#include "stagecct/ops.hpp"
#include "stagecct/train.hpp"

namespace stagecct {
namespace {

using loss::ClassCenters;

std::vector<Scalar> vec(const Tensor& t) { return {t.values().begin(), t.values().end()}; }

ModelConfig small_config() {
  ModelConfig c = ModelConfig::desk();
  c.variables = 6;
  c.extractor_width = 4;
  c.extractor_blocks = 1;
  c.map_height = c.map_width = 8;
  c.tokenizer_hidden_channels = 4;
  c.embed_dim = 8;
  c.heads = 2;
  c.hours = 6;
  c.seq_dim = 3;
  c.head_channels = 4;
  return c;
}

Tensor random_input(std::size_t batch, const ModelConfig& c, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Scalar> v(batch * c.hours * c.variables);
  for (auto& x : v) x = rng.normal();
  return Tensor({batch, c.hours, c.variables}, std::move(v));
}

std::vector<std::vector<Scalar>> snapshot(const Model& m) {
  std::vector<std::vector<Scalar>> out;
  for (const auto& e : m.params().entries()) out.push_back(vec(e.tensor));
  return out;
}

// Gives the zero-initialised classifier some weight so gradients reach the body.
void wake_classifier(Model& m, std::uint64_t seed) {
  Rng rng(seed);
  for (auto& v : m.params().get("head.out.weight").mutable_values()) v = rng.uniform(-1.0, 1.0);
}

TEST(Clip, BandExamples) {
  EXPECT_EQ(loss::clip(std::log(0.5)), std::log(0.5));
  EXPECT_EQ(loss::clip(std::log(0.9)), 0.0);
  EXPECT_EQ(loss::clip(std::log(0.25)), std::log(0.25));
  EXPECT_EQ(loss::clip(std::log(0.75)), std::log(0.75));
  EXPECT_EQ(loss::clip(std::log(0.2)), 0.0);
}

TEST(ClipBce, Examples) {
  EXPECT_NEAR(loss::clip_bce(Tensor::full({4}, 0.5), {1, 0, 0, 1}).item(), -std::log(0.5), 1e-15);
  EXPECT_EQ(loss::clip_bce(Tensor({1}, {0.99}), {1}).item(), 0.0);
  EXPECT_EQ(loss::clip_bce(Tensor({1}, {0.01}), {1}).item(), 0.0);
  EXPECT_THROW(loss::clip_bce(Tensor({2}, {0.5, 0.5}), {1}), ShapeError);
}

TEST(ClipBce, MatchesBceInsideBand) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Scalar> p(8);
    std::vector<double> y(8);
    double bce = 0;
    for (std::size_t i = 0; i < 8; ++i) {
      p[i] = rng.uniform(0.26, 0.74);
      y[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
      bce -= y[i] == 1.0 ? std::log(p[i]) : std::log(1.0 - p[i]);
    }
    EXPECT_NEAR(loss::clip_bce(Tensor({8}, p), y).item(), bce / 8, 1e-12);
  }
}

TEST(ClipBce, GradientCheck) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    std::vector<Scalar> p(6);
    for (auto& x : p) x = rng.uniform(0.3, 0.7);
    const auto r = grad_check([](const Tensor& t) { return loss::clip_bce(t, {1, 0, 1, 1, 0, 0}); }, Tensor({6}, p));
    EXPECT_TRUE(r.pass()) << r.worst();
  }
}

TEST(Centers, WarmupUsesBatchMeans) {
  ClassCenters c(2, 100);
  c.update(std::vector<Scalar>{3, 4, 3, 4, 7, 7}, {1, 1, 0}, 0);
  EXPECT_EQ(c.center(1), (std::vector<Scalar>{3, 4}));
  EXPECT_EQ(c.center(0), (std::vector<Scalar>{7, 7}));
  c.update(std::vector<Scalar>{1, 2, 5, 6}, {0, 0}, 1);
  EXPECT_EQ(c.center(1), (std::vector<Scalar>{0, 0}));
  EXPECT_EQ(c.center(0), (std::vector<Scalar>{3, 4}));
}

TEST(Centers, PostWarmupRunningMean) {
  ClassCenters c(1, 2);
  c.update(std::vector<Scalar>{9, 9}, {1, 1}, 1);
  c.update(std::vector<Scalar>{1, 3}, {1, 1}, 2);  // a = 2, n = 2
  c.update(std::vector<Scalar>{4, 5, 6, 5}, {1, 1, 1, 1}, 3);  // b = 5, n = 4
  EXPECT_NEAR(c.center(1)[0], (2 * 2.0 + 4 * 5.0) / 6, 1e-12);
  EXPECT_EQ(c.count(1), 6u);
}

TEST(Centers, WithinClassPermutationInvariant) {
  Rng rng(4);
  std::vector<Scalar> f(6 * 5);
  for (auto& x : f) x = rng.normal();
  const std::vector<double> y{1, 0, 1, 0, 0, 1};
  ClassCenters a(5), b(5);
  a.update(f, y, 0);
  std::vector<Scalar> g = f;
  std::swap_ranges(g.begin(), g.begin() + 5, g.begin() + 10);  // rows 0 and 2, both positive
  b.update(g, y, 0);
  for (int cls : {0, 1}) {
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(a.center(cls)[j], b.center(cls)[j], 1e-12);
  }
}

TEST(Attention, MinMaxExamples) {
  EXPECT_EQ(loss::attention_from_gradient(std::vector<Scalar>{1, 3, 5}, 3), (std::vector<Scalar>{0, 0.5, 1}));
  EXPECT_EQ(loss::attention_from_gradient(std::vector<Scalar>{2, 2, 2}, 3), (std::vector<Scalar>{0, 0, 0}));
  const std::vector<Scalar> raw{0.3, -1.2, 4.0, 0.7, 0.1, -0.5};
  std::vector<Scalar> scaled(raw);
  for (auto& v : scaled) v *= 8.0;
  EXPECT_EQ(loss::attention_from_gradient(raw, 3), loss::attention_from_gradient(scaled, 3));
  EXPECT_THROW(loss::attention_from_gradient(raw, 4), ShapeError);
}

TEST(CcLoss, Examples) {
  ClassCenters c(2);
  c.update(std::vector<Scalar>{1, 1}, {1}, 0);
  EXPECT_EQ(loss::cc_loss(Tensor({1, 2}, {2, 0}), {1}, c, {1, 0.5}).item(), 1.5);
  EXPECT_EQ(loss::cc_loss(Tensor({1, 2}, {1, 1}), {1}, c, {1, 0.5}).item(), 0.0);
  EXPECT_EQ(loss::cc_loss(Tensor({1, 2}, {9, -3}), {1}, c, {0, 0}).item(), 0.0);
}

TEST(CcLoss, GradientAwayFromKinks) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    ClassCenters c(4);
    std::vector<Scalar> base(12);
    for (auto& v : base) v = rng.normal();
    const std::vector<double> y{1, 0, 1};
    c.update(base, y, 0);
    std::vector<Scalar> f(12), g(12);
    for (std::size_t k = 0; k < 12; ++k) {
      f[k] = base[k] + (rng.bernoulli(0.5) ? 1 : -1) * rng.uniform(0.01, 1.0);
      g[k] = rng.uniform();
    }
    const auto r = grad_check([&](const Tensor& t) { return loss::cc_loss(t, y, c, g); }, Tensor({3, 4}, f));
    EXPECT_TRUE(r.pass()) << r.worst();
  }
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_EQ(loss::total_loss(0.7, 0.2, 0.1).total, 0.7 + 0.2 + 0.1);
  EXPECT_NEAR(loss::total_loss(0.7, 0.2, 0.1).total, 1.0, 1e-12);
  EXPECT_EQ(loss::total_loss(0, 0, 0).total, 0.0);
  EXPECT_EQ(loss::total_loss(0.4, 0, 0).total, 0.4);
  EXPECT_THROW(loss::total_loss(NAN, 0, 0), NumericError);
}

TEST(TrainStep, ZeroLearningRateKeepsParameters) {
  const ModelConfig c = small_config();
  Model m(c, 1);
  wake_classifier(m, 2);
  TrainConfig tc;
  tc.optimizer.learning_rate = 0.0;
  Trainer t(m, tc, 3);
  const auto before = snapshot(m);
  for (int i = 0; i < 5; ++i) {
    const auto l = t.step(random_input(4, c, 10 + i), {1, 0, 1, 0});
    EXPECT_GT(l.total, 0.0);
  }
  EXPECT_EQ(snapshot(m), before);
  EXPECT_EQ(t.iteration(), 5u);
}

TEST(TrainStep, DisabledTermsMatchPlainClipBceDescent) {
  const ModelConfig c = small_config();
  Model trained(c, 4), manual(c, 4);
  wake_classifier(trained, 5);
  wake_classifier(manual, 5);
  TrainConfig tc;
  tc.use_cc = false;
  tc.use_patchup = false;
  tc.optimizer.learning_rate = 0.05;
  Trainer t(trained, tc, 6);
  const std::vector<double> y{1, 0, 0, 1};
  for (int i = 0; i < 3; ++i) {
    const Tensor x = random_input(4, c, 20 + i);
    const auto l = t.step(x, y);
    for (auto& e : manual.params().entries()) e.tensor.clear_grad();
    Tape tape;
    Tensor bce;
    {
      TapeScope scope(tape);
      bce = loss::clip_bce(manual.forward(x).probability, y);
    }
    tape.backward(bce);
    EXPECT_EQ(l.total, bce.item());
    for (auto& e : manual.params().entries()) {
      if (!e.trainable || !e.tensor.has_grad()) continue;
      const auto g = e.tensor.grad();
      auto v = e.tensor.mutable_values();
      for (std::size_t k = 0; k < v.size(); ++k) v[k] -= 0.05 * g[k];
    }
  }
  EXPECT_EQ(snapshot(trained), snapshot(manual));
}

TEST(TrainStep, FirstBackwardLeavesNoResidue) {
  const ModelConfig c = small_config();
  Model a(c, 7), b(c, 7);
  wake_classifier(a, 8);
  wake_classifier(b, 8);
  TrainConfig tc;
  tc.use_cc = false;
  Trainer ta(a, tc, 9), tb(b, tc, 9);
  ta.force_attention_pass = true;
  for (int i = 0; i < 3; ++i) {
    const Tensor x = random_input(4, c, 30 + i);
    EXPECT_EQ(ta.step(x, {1, 0, 1, 1}), tb.step(x, {1, 0, 1, 1}));
  }
  EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(TrainStep, FrozenTokenizerNeverChangesOthersDo) {
  const ModelConfig c = small_config();
  Model m(c, 10);
  TrainConfig tc;
  tc.optimizer.learning_rate = 0.05;
  Trainer t(m, tc, 11);
  const auto before = snapshot(m);
  for (int i = 0; i < 4; ++i) t.step(random_input(4, c, 40 + i), {1, 0, 1, 0});
  const auto after = snapshot(m);
  const auto& entries = m.params().entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].name.rfind("tokenizer.", 0) == 0) {
      EXPECT_EQ(after[i], before[i]) << entries[i].name;
    } else {
      EXPECT_NE(after[i], before[i]) << entries[i].name;
    }
  }
}

TEST(TrainStep, DeterministicAcrossFreshRuns) {
  const ModelConfig c = small_config();
  auto run = [&] {
    Model m(c, 12);
    TrainConfig tc;
    tc.optimizer.kind = OptimizerKind::kAdam;
    tc.optimizer.learning_rate = 1e-3;
    tc.warmup_iters = 10;
    Trainer t(m, tc, 13);
    std::vector<loss::LossBreakdown> out;
    for (int i = 0; i < 50; ++i) out.push_back(t.step(random_input(4, c, 50 + i % 5), {1, 0, 0, 1}));
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(TrainStep, PatchupProbabilityZeroMatchesNoPatchup) {
  const ModelConfig c = small_config();
  Model a(c, 14), b(c, 14);
  TrainConfig ta_cfg, tb_cfg;
  ta_cfg.patchup.patchup_prob = 0.0;
  tb_cfg.use_patchup = false;
  Trainer ta(a, ta_cfg, 15), tb(b, tb_cfg, 15);
  for (int i = 0; i < 3; ++i) {
    const Tensor x = random_input(4, c, 60 + i);
    EXPECT_EQ(ta.step(x, {0, 1, 1, 0}), tb.step(x, {0, 1, 1, 0}));
  }
  EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(TrainStep, LossBreakdownSumsParts) {
  const ModelConfig c = small_config();
  Model m(c, 16);
  wake_classifier(m, 17);
  Trainer t(m, TrainConfig{}, 18);
  const auto l = t.step(random_input(4, c, 70), {1, 0, 1, 0});
  EXPECT_EQ(l.total, l.clip_bce + l.patchup + l.cc);
  EXPECT_GT(l.patchup, 0.0);
}

TEST(TrainStep, ZeroCcWeightMatchesDisabledCc) {
  const ModelConfig c = small_config();
  Model a(c, 19), b(c, 19);
  wake_classifier(a, 20);
  wake_classifier(b, 20);
  TrainConfig weighted, off;
  weighted.cc_weight = 0.0;
  off.use_cc = false;
  Trainer ta(a, weighted, 21), tb(b, off, 21);
  tb.force_attention_pass = true;
  for (int i = 0; i < 3; ++i) {
    const Tensor x = random_input(4, c, 80 + i);
    const auto la = ta.step(x, {1, 0, 0, 1});
    const auto lb = tb.step(x, {1, 0, 0, 1});
    EXPECT_EQ(la.total, lb.total);
    EXPECT_EQ(la.cc, 0.0);
  }
  EXPECT_EQ(snapshot(a), snapshot(b));
}

TEST(TrainStep, CcWeightScalesReportedTerm) {
  const ModelConfig c = small_config();
  Model a(c, 22), b(c, 22);
  wake_classifier(a, 23);
  wake_classifier(b, 23);
  TrainConfig unit, tenth;
  unit.use_patchup = tenth.use_patchup = false;
  unit.optimizer.learning_rate = tenth.optimizer.learning_rate = 0.0;
  tenth.cc_weight = 0.1;
  Trainer ta(a, unit, 24), tb(b, tenth, 24);
  const Tensor x = random_input(4, c, 90);
  const auto la = ta.step(x, {1, 0, 1, 0});
  const auto lb = tb.step(x, {1, 0, 1, 0});
  EXPECT_GT(la.cc, 0.0);
  EXPECT_NEAR(lb.cc, 0.1 * la.cc, 1e-15);
  EXPECT_EQ(lb.clip_bce, la.clip_bce);
}

TEST(TrainStep, ClipBceCanBeLeftOutOfTheTotal) {
  const ModelConfig c = small_config();
  Model m(c, 25);
  wake_classifier(m, 26);
  TrainConfig tc;
  tc.use_clip_bce = false;
  Trainer t(m, tc, 27);
  const auto l = t.step(random_input(4, c, 95), {1, 0, 1, 0});
  EXPECT_EQ(l.clip_bce, 0.0);
  EXPECT_EQ(l.total, l.patchup + l.cc);
}

TEST(TrainConfigTest, ValidationAndJson) {
  TrainConfig tc;
  tc.use_clip_bce = tc.use_cc = tc.use_patchup = false;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
  TrainConfig w;
  w.cc_weight = -1.0;
  EXPECT_THROW(w.validate(), std::invalid_argument);
  w.cc_weight = 0.25;
  w.use_clip_bce = false;
  const auto back = TrainConfig::from_json(w.to_json());
  EXPECT_EQ(back.to_json(), w.to_json());
  EXPECT_EQ(back.cc_weight, 0.25);
  EXPECT_FALSE(back.use_clip_bce);
}

}  // namespace
}  // namespace stagecct
