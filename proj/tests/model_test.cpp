//
// Copyright 2026 The FedPrompt Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include <cmath>
#include <random>
#include <vector>

#include "fedprompt/experiment.hpp"
#include "fedprompt/model.hpp"
#include "gtest/gtest.h"

namespace fedprompt {
namespace {

BackboneConfig small_config(std::uint64_t seed = 1) {
  BackboneConfig c;
  c.dim = 16;
  c.depth = 4;
  c.heads = 2;
  c.seed = seed;
  c.init_scale = 0.2;
  return c;
}

Tensor random_image(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor t({n, n});
  for (double& v : t.data()) v = d(rng);
  return t;
}

struct Fixture {
  BackboneWeights w;
  PromptParams p;
  ccmp::PrototypeBank bank;
  ccmp::ClassPriors priors;
  Tensor tokens;
  ForwardConfig fwd;

  explicit Fixture(std::size_t num_shared = 1, std::uint64_t seed = 3) {
    w = init_backbone(small_config(seed));
    Rng rng(seed);
    p = PromptParams::init(16, num_shared, 4, rng, 0.5);
    bank = ccmp::PrototypeBank({2, 3}, 4, 16, 0.9, 1);
    std::normal_distribution<double> d(0.0, 1.0);
    for (std::size_t l : bank.layers()) {
      for (double& v : bank.layer(l).data()) v = d(rng);
    }
    priors = ccmp::ClassPriors{{0.1, 0.2, 0.3, 0.4}};
    std::mt19937_64 img_rng(seed);
    tokens = embed_patches(w, random_image(16, img_rng));
    fwd.ccmp_layers = {2, 3};
    fwd.tau = 0.5;
  }

  ForwardTrace run() const { return forward_with_prompts(w, p, tokens, &bank, &priors, fwd); }
};

TEST(BackboneTest, SeededInitIsReproducible) {
  const auto a = init_backbone(small_config(1));
  const auto b = init_backbone(small_config(1));
  const auto c = init_backbone(small_config(2));
  EXPECT_EQ(a.fingerprint(), b.fingerprint());
  EXPECT_EQ(a.layers[0].wq, b.layers[0].wq);
  EXPECT_NE(a.fingerprint(), c.fingerprint());
}

TEST(BackboneTest, InvalidGeometryIsConfigError) {
  auto c = small_config();
  c.heads = 3;
  EXPECT_THROW(init_backbone(c), ConfigError);
  c = small_config();
  c.patch_size = 5;
  EXPECT_THROW(init_backbone(c), ConfigError);
  c = small_config();
  c.depth = 0;
  EXPECT_THROW(init_backbone(c), ConfigError);
}

TEST(BackboneTest, DeskDefaultsRunForward) {
  BackboneConfig c;
  const auto w = init_backbone(c);
  EXPECT_EQ(c.num_patches(), 4u);
  Rng rng(1);
  const auto p = PromptParams::init(32, 1, 8, rng);
  ccmp::PrototypeBank bank({5, 6, 7}, 8, 32, 0.9, 1);
  const auto priors = ccmp::ClassPriors::uniform(8);
  ForwardConfig fwd;
  fwd.ccmp_layers = {5, 6, 7};
  std::mt19937_64 img(2);
  const Tensor tokens = embed_patches(w, random_image(16, img));
  EXPECT_EQ(tokens.rows(), 4u);
  EXPECT_EQ(tokens.cols(), 32u);
  const auto tr = forward_with_prompts(w, p, tokens, &bank, &priors, fwd);
  ASSERT_EQ(tr.logits.size(), 8u);
  for (double v : tr.logits) EXPECT_TRUE(std::isfinite(v));
  EXPECT_EQ(tr.cls_in.size(), 8u);
  EXPECT_EQ(tr.scores.size(), 3u);
}

TEST(ForwardTest, DeterministicBitForBit) {
  const Fixture f;
  EXPECT_EQ(f.run().logits, f.run().logits);
}

TEST(ForwardTest, ClsTraceIsInputSide) {
  const Fixture f;
  const auto tr = f.run();
  EXPECT_EQ(tr.cls_in[0], f.w.cls_embed.values());
  EXPECT_NE(tr.cls_in[1], tr.cls_in[0]);
}

TEST(ForwardTest, OneHotPriorInsertsThatClassPrompt) {
  Fixture f;
  f.priors = ccmp::ClassPriors{{0, 0, 1, 0}};
  const auto base = f.run();
  for (const auto& [l, s] : base.scores) EXPECT_EQ(s, (std::vector<double>{0, 0, 1, 0}));
  // Every other column is irrelevant: the mixture is exactly column 2.
  std::mt19937_64 rng(4);
  std::normal_distribution<double> d(0.0, 5.0);
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t c : {0, 1, 3}) f.p.class_prompts.at(i, c) = d(rng);
  }
  EXPECT_EQ(f.run().logits, base.logits);
}

TEST(ForwardTest, WithoutCcmpIsPlainPromptTuning) {
  Fixture f;
  f.fwd.ccmp_layers.clear();
  const auto base = forward_with_prompts(f.w, f.p, f.tokens, nullptr, nullptr, f.fwd);
  EXPECT_TRUE(base.scores.empty());
  f.p.class_prompts.at(0, 0) += 1.0;
  EXPECT_EQ(forward_with_prompts(f.w, f.p, f.tokens, nullptr, nullptr, f.fwd).logits, base.logits);
  f.p.shared.at(0, 0) += 1.0;
  EXPECT_NE(forward_with_prompts(f.w, f.p, f.tokens, nullptr, nullptr, f.fwd).logits, base.logits);
}

TEST(ForwardTest, PromptFreeBaselineDependsOnlyOnHead) {
  Fixture f(0);
  f.fwd.ccmp_layers.clear();
  const auto base = forward_with_prompts(f.w, f.p, f.tokens, nullptr, nullptr, f.fwd);
  f.p.class_prompts.at(1, 1) -= 3.0;
  EXPECT_EQ(forward_with_prompts(f.w, f.p, f.tokens, nullptr, nullptr, f.fwd).logits, base.logits);
  f.p.head.at(0, 0) += 1.0;
  EXPECT_NE(forward_with_prompts(f.w, f.p, f.tokens, nullptr, nullptr, f.fwd).logits[0],
            base.logits[0]);
}

TEST(ForwardTest, RefreshFlagControlsLaterLayers) {
  Fixture f;
  const auto refreshed = f.run();
  EXPECT_EQ(refreshed.scores.size(), 2u);
  f.fwd.refresh = false;
  const auto once = f.run();
  EXPECT_EQ(once.scores.size(), 1u);
  EXPECT_EQ(once.scores.count(2), 1u);
  EXPECT_NE(once.logits, refreshed.logits);
}

TEST(ForwardTest, ContractViolations) {
  Fixture f;
  f.fwd.ccmp_layers = {2, 4};
  EXPECT_THROW(f.run(), ConfigError);
  f.fwd.ccmp_layers = {5};
  EXPECT_THROW(f.run(), ConfigError);
  f.fwd.ccmp_layers = {2};
  f.priors = ccmp::ClassPriors{{0.5, 0.5, 0.5, 0.5}};
  EXPECT_THROW(f.run(), DataError);
  f.priors = ccmp::ClassPriors::uniform(4);
  EXPECT_THROW(forward_with_prompts(f.w, f.p, f.tokens, nullptr, &f.priors, f.fwd), ConfigError);
}

std::vector<double> shared_grad(Fixture& f, bool detach) {
  f.fwd.detach_scores = detach;
  PromptParams p = f.p;
  p.set_requires_grad(true);
  Tape tape;
  PromptVars vars = bind_trainable(tape, p);
  TapeForward out = forward_on_tape(tape, f.w, vars, f.tokens, &f.bank, &f.priors, f.fwd);
  tape.backward(cross_entropy(out.logits, 1));
  return {p.shared.grad().begin(), p.shared.grad().end()};
}

TEST(ForwardTest, DetachingScoresChangesGradientsNotLogits) {
  Fixture f;
  const auto live = f.run();
  f.fwd.detach_scores = true;
  EXPECT_EQ(f.run().logits, live.logits);
  const auto g_live = shared_grad(f, false);
  const auto g_cut = shared_grad(f, true);
  EXPECT_NE(g_live, g_cut);
}

TEST(ForwardTest, BackboneReceivesNoGradient) {
  Fixture f;
  const auto before = f.w.fingerprint();
  shared_grad(f, false);
  EXPECT_EQ(f.w.fingerprint(), before);
  EXPECT_FALSE(f.w.layers[0].wq.has_grad());
  EXPECT_FALSE(f.w.patch_embed.has_grad());
}

TEST(ForwardTest, GradientsMatchFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    GradcheckOptions opt;
    opt.seed = seed;
    const auto r = gradcheck(opt);
    ASSERT_EQ(r.max_rel_error.size(), 3u);
    for (const auto& [block, err] : r.max_rel_error) EXPECT_LT(err, 1e-4) << block << " seed " << seed;
    EXPECT_TRUE(r.passed);
  }
}

TEST(ForwardTest, GradcheckWithoutSharedPrompts) {
  GradcheckOptions opt;
  opt.shared_prompts = 0;
  const auto r = gradcheck(opt);
  EXPECT_EQ(r.max_rel_error.count("P_S"), 0u);
  EXPECT_TRUE(r.passed);
}

TEST(ForwardTest, GradcheckCatchesCorruptedBackward) {
  GradcheckOptions opt;
  opt.matmul_fault = 1.01;
  EXPECT_FALSE(gradcheck(opt).passed);
}

TEST(PredictTest, ArgmaxWithLowestTie) {
  EXPECT_EQ(predict(std::vector<double>{0.1, 0.9}), 1u);
  EXPECT_EQ(predict(std::vector<double>{0.5, 0.5}), 0u);
  EXPECT_THROW(predict(std::vector<double>{}), DimensionError);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(1 + rng() % 10);
    for (double& x : v) x = d(rng);
    std::size_t best = 0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (v[i] > v[best]) best = i;
    }
    EXPECT_EQ(predict(v), best);
  }
}

TEST(PromptParamsTest, BlocksAndCounts) {
  Rng rng(1);
  auto p = PromptParams::init(8, 2, 3, rng);
  EXPECT_EQ(p.blocks().size(), 3u);
  EXPECT_EQ(p.parameter_count(), 8u * 2 + 8 * 3 + 3 * 8);
  auto q = PromptParams::init(8, 0, 3, rng);
  EXPECT_FALSE(q.has_shared());
  EXPECT_EQ(q.blocks().size(), 2u);
  EXPECT_THROW(PromptParams::init(0, 1, 3, rng), ConfigError);
}

}  // namespace
}  // namespace fedprompt
