#include <gtest/gtest.h>

#include <cmath>

#include "lomo/lomo.hpp"
#include "oracles.hpp"

using namespace lomo;

TEST(ModelZoo, SameSeedSameBytes) {
  auto a = build_model(oracle::mlp_config(2, 4, 7));
  auto b = build_model(oracle::mlp_config(2, 4, 7));
  EXPECT_TRUE(oracle::same_bits(oracle::snapshot(*a), oracle::snapshot(*b)));
  auto c = build_model(oracle::mlp_config(2, 4, 8));
  EXPECT_FALSE(oracle::same_bits(oracle::snapshot(*a), oracle::snapshot(*c)));
}

TEST(ModelZoo, InitialValuesStayInRange) {
  auto m = build_model(oracle::transformer_config());
  for (const auto& p : m->parameters())
    for (double v : p.value.data()) {
      ASSERT_GE(v, -kInitRange);
      ASSERT_LE(v, kInitRange);
    }
}

TEST(ModelZoo, TransformerParameterCountByHand) {
  // hidden 32, ffn 64, vocab 64, 2 blocks:
  //   embedding 64*32 = 2048, head 32*64 = 2048, final gain 32
  //   per block: wq wk wv wo 4*1024, gate/up 2*32*64, down 64*32, two gains 2*32
  const std::int64_t per_block = 4 * 1024 + 2 * 2048 + 2048 + 64;
  const std::int64_t expected = 2048 + 2 * per_block + 32 + 2048;
  auto m = build_model(oracle::transformer_config(2, 32, 4, 64));
  EXPECT_EQ(m->parameter_count(), expected);
  EXPECT_EQ(MiniTransformer::closed_form_parameter_count(m->config()), expected);
}

TEST(ModelZoo, ClosedFormMatchesEnumerationAcrossShapes) {
  for (int layers : {0, 1, 3})
    for (int hidden : {4, 12})
      for (int vocab : {5, 17}) {
        auto cfg = oracle::transformer_config(layers, hidden, 2, vocab);
        cfg.ffn_hidden = hidden + 3;
        auto m = build_model(cfg);
        EXPECT_EQ(m->parameter_count(), MiniTransformer::closed_form_parameter_count(cfg));
      }
}

TEST(ModelZoo, HeadsMustDivideHidden) {
  EXPECT_THROW(build_model(oracle::transformer_config(2, 32, 3, 64)), ConfigError);
}

TEST(ModelZoo, RejectsZeroExtents) {
  EXPECT_THROW(build_model(oracle::mlp_config(0, 4)), ConfigError);
  EXPECT_THROW(build_model(oracle::mlp_config(2, 0)), ConfigError);
  EXPECT_THROW(build_model(oracle::transformer_config(2, 32, 4, 0)), ConfigError);
}

TEST(ModelZoo, BatchesAreDeterministic) {
  const auto task = oracle::regression_task(3, 11);
  const Batch a = sample_batch(task, 4, 9);
  const Batch b = sample_batch(task, 4, 9);
  EXPECT_TRUE(a.inputs == b.inputs);
  EXPECT_TRUE(a.targets == b.targets);
  const Batch c = sample_batch(task, 4, 10);
  EXPECT_FALSE(a.inputs == c.inputs);
}

TEST(ModelZoo, RegressionShapes) {
  const Batch b = sample_batch(oracle::regression_task(3), 2, 0);
  EXPECT_EQ(b.inputs.shape(), (Shape{2, 3}));
  EXPECT_EQ(b.targets.shape(), (Shape{2, 1}));
}

TEST(ModelZoo, CopyTargetsEqualInputs) {
  const Batch b = sample_batch(oracle::copy_task(8, 64), 3, 0);
  EXPECT_EQ(b.inputs.shape(), (Shape{3, 8}));
  EXPECT_TRUE(b.inputs == b.targets);
  for (double v : b.inputs.data()) {
    EXPECT_EQ(v, std::floor(v));
    EXPECT_GE(v, 0.0);
    EXPECT_LT(v, 64.0);
  }
}

TEST(ModelZoo, ZeroBatchIsAnError) {
  EXPECT_THROW(sample_batch(oracle::regression_task(), 0, 0), ConfigError);
}

TEST(ModelZoo, UntrainedTransformerSitsAtUniformBaseline) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    auto m = build_model(oracle::transformer_config(2, 32, 4, 64, seed));
    const double loss = m->evaluate(sample_batch(oracle::copy_task(8, 64, seed), 4, 0));
    EXPECT_NEAR(loss, std::log(64.0), 0.05 * std::log(64.0)) << "seed " << seed;
  }
}

TEST(ModelZoo, ParametersAreChargedToTheLedger) {
  MemoryLedger ledger;
  auto m = build_model(oracle::transformer_config(), &ledger);
  EXPECT_EQ(ledger.current(MemoryCategory::Params), m->total_parameter_bytes());
  EXPECT_EQ(ledger.current(MemoryCategory::Params), m->parameter_count() * 4);
  EXPECT_EQ(ledger.allocations(MemoryCategory::Params), m->parameters().size());
  auto cfg = oracle::transformer_config();
  cfg.precision = Precision::HalfEmulated;
  MemoryLedger half;
  auto h = build_model(cfg, &half);
  EXPECT_EQ(half.current(MemoryCategory::Params), h->parameter_count() * 2);
}
