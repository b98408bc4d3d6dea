#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lomo/lomo.hpp"
#include "oracles.hpp"

using namespace lomo;

constexpr auto kGrad = MemoryCategory::Gradients;
constexpr auto kAct = MemoryCategory::Activations;

TEST(Ledger, AllocateThenFree) {
  MemoryLedger l;
  l.record(kGrad, 100);
  l.record(kGrad, -100);
  EXPECT_EQ(l.current(kGrad), 0);
  EXPECT_EQ(l.peak(kGrad), 100);
}

TEST(Ledger, InterleavedPeak) {
  MemoryLedger l;
  l.record(kGrad, 50);
  l.record(kGrad, 70);
  l.record(kGrad, -50);
  EXPECT_EQ(l.current(kGrad), 70);
  EXPECT_EQ(l.peak(kGrad), 120);
}

TEST(Ledger, DoubleFreeIsAnError) {
  MemoryLedger l;
  EXPECT_THROW(l.record(kGrad, -100), AccountingError);
  EXPECT_EQ(l.current(kGrad), 0);
}

TEST(Ledger, RandomWalkKeepsInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    MemoryLedger l(true);
    std::array<std::int64_t, kNumMemoryCategories> sum{}, peak{};
    for (int i = 0; i < 100; ++i) {
      const auto c = kAllMemoryCategories[rng() % kNumMemoryCategories];
      const auto ci = static_cast<std::size_t>(c);
      std::int64_t delta = static_cast<std::int64_t>(rng() % 200) - 90;
      if (sum[ci] + delta < 0) {
        EXPECT_THROW(l.record(c, delta), AccountingError);
        continue;
      }
      const std::int64_t prev_peak = l.peak(c);
      l.record(c, delta);
      sum[ci] += delta;
      peak[ci] = std::max(peak[ci], sum[ci]);
      ASSERT_GE(l.peak(c), prev_peak);
      ASSERT_GE(l.peak(c), l.current(c));
    }
    std::array<std::int64_t, kNumMemoryCategories> from_log{};
    for (const auto& e : l.event_log()) from_log[static_cast<std::size_t>(e.category)] += e.delta;
    for (std::size_t i = 0; i < kNumMemoryCategories; ++i) {
      EXPECT_EQ(l.current(kAllMemoryCategories[i]), sum[i]);
      EXPECT_EQ(from_log[i], sum[i]);
      EXPECT_EQ(l.peak(kAllMemoryCategories[i]), peak[i]);
    }
  }
}

TEST(Ledger, SnapshotSharesSumToHundred) {
  MemoryLedger l;
  l.record(MemoryCategory::Params, 300);
  l.record(kGrad, 100);
  l.record(kGrad, -100);
  l.record(kAct, 600);
  const auto s = l.snapshot();
  double total = 0;
  for (double v : s.peak_share_percent) total += v;
  EXPECT_NEAR(total, 100.0, 1e-12);
  EXPECT_DOUBLE_EQ(s.share_of(kAct), 60.0);
  EXPECT_EQ(s.total_peak, 900);
}

TEST(Ledger, ChargesFollowTensorLifetimes) {
  MemoryLedger l;
  {
    Tensor a({4, 4});
    a.track(&l, kAct);
    Tensor b = std::move(a);
    EXPECT_EQ(l.current(kAct), 64);
  }
  EXPECT_EQ(l.current(kAct), 0);
  EXPECT_EQ(l.allocations(kAct), l.releases(kAct));
}

namespace {

struct RunPeaks {
  LedgerSnapshot snap;
  std::int64_t largest = 0;
  std::int64_t total = 0;
};

RunPeaks peaks_for(OptimizerKind kind, const ModelConfig& cfg, const SyntheticTask& task,
                   int steps = 2) {
  MemoryLedger ledger;
  auto m = build_model(cfg, &ledger);
  auto opt = make_optimizer(kind, *m, {}, std::nullopt);
  for (int s = 0; s < steps; ++s) opt->step(sample_batch(task, 2, s), 0.01);
  return {ledger.snapshot(), m->largest_parameter_bytes(), m->total_parameter_bytes()};
}

}  // namespace

TEST(Ledger, LomoRunHasNoOptimizerStates) {
  const auto r = peaks_for(OptimizerKind::Lomo, oracle::mlp_config(), oracle::regression_task());
  EXPECT_EQ(r.snap.peak_of(MemoryCategory::OptimStates), 0);
  EXPECT_EQ(r.snap.peak_of(kGrad), r.largest);
}

TEST(Ledger, SgdRunHoldsAllGradients) {
  const auto r = peaks_for(OptimizerKind::Sgd, oracle::mlp_config(), oracle::regression_task());
  EXPECT_EQ(r.snap.peak_of(kGrad), r.total);
}

TEST(Ledger, GradientPeakRatioIsLargestOverTotal) {
  for (const auto& [cfg, task] :
       {std::pair{oracle::mlp_config(3, 6, 1), oracle::regression_task()},
        std::pair{oracle::transformer_config(2, 16, 4, 40), oracle::copy_task(6, 40)}}) {
    const auto lomo_run = peaks_for(OptimizerKind::Lomo, cfg, task);
    const auto sgd_run = peaks_for(OptimizerKind::Sgd, cfg, task);
    // a/b == c/d  <=>  a*d == c*b, in integers
    EXPECT_EQ(lomo_run.snap.peak_of(kGrad) * sgd_run.total,
              lomo_run.largest * sgd_run.snap.peak_of(kGrad));
  }
}

TEST(Ledger, CheckpointingLowersActivationPeak) {
  const std::vector<std::pair<ModelConfig, SyntheticTask>> cases = {
      {oracle::mlp_config(2, 8), oracle::regression_task()},
      {oracle::mlp_config(5, 8), oracle::regression_task()},
      {oracle::transformer_config(2, 16, 4, 40), oracle::copy_task(6, 40)},
      {oracle::transformer_config(4, 8, 2, 20), oracle::copy_task(5, 20)},
  };
  for (auto [cfg, task] : cases) {
    cfg.checkpoint = CheckpointPolicy::StoreAll;
    const auto store = peaks_for(OptimizerKind::Lomo, cfg, task, 1);
    cfg.checkpoint = CheckpointPolicy::CheckpointPerLayer;
    const auto ckpt = peaks_for(OptimizerKind::Lomo, cfg, task, 1);
    EXPECT_LT(ckpt.snap.peak_of(kAct), store.snap.peak_of(kAct)) << "layers " << cfg.layers;
  }
}

TEST(Ledger, EveryTransientIsReleased) {
  for (auto kind : {OptimizerKind::Lomo, OptimizerKind::Sgd, OptimizerKind::AdamW}) {
    MemoryLedger ledger;
    auto cfg = oracle::transformer_config(2, 8, 2, 11);
    cfg.checkpoint = CheckpointPolicy::CheckpointPerLayer;
    auto m = build_model(cfg, &ledger);
    auto opt = make_optimizer(kind, *m, ClipMode::by_global_norm(1.0), LossScalerConfig{});
    opt->step(sample_batch(oracle::copy_task(4, 11), 2, 0), 0.01);
    for (auto c : {kGrad, kAct}) {
      EXPECT_EQ(ledger.current(c), 0);
      EXPECT_EQ(ledger.allocations(c), ledger.releases(c));
      EXPECT_GT(ledger.allocations(c), 0u);
    }
    EXPECT_EQ(ledger.allocations(MemoryCategory::Params), m->parameters().size());
  }
}

// --- estimator -----------------------------------------------------------------

namespace {

double gb2(std::int64_t bytes) { return std::round(MemoryEstimate::gib(bytes) * 100.0) / 100.0; }

MemoryEstimate llama7b(OptimizerKind k, bool ac) {
  return estimate(ArchSpec::llama_7b(), {k, TrainPrecision::Mixed16, ac, 512, 8});
}

}  // namespace

TEST(Estimator, Llama7bParameterCount) {
  const auto n = param_count(ArchSpec::llama_7b());
  EXPECT_EQ(n, 6738415616);
  EXPECT_EQ(gb2(n * 2), 12.55);
}

TEST(Estimator, Llama7bTableColumns) {
  struct Row {
    OptimizerKind k;
    double params, grads, optim;
  };
  for (const Row& r : {Row{OptimizerKind::AdamW, 12.55, 12.55, 75.31},
                       Row{OptimizerKind::Sgd, 12.55, 12.55, 25.10},
                       Row{OptimizerKind::Lomo, 12.55, 0.24, 0.00}}) {
    for (bool ac : {false, true}) {
      const auto e = llama7b(r.k, ac);
      EXPECT_NEAR(e.params_gib(), r.params, 0.01);
      EXPECT_NEAR(e.gradients_gib(), r.grads, 0.01);
      EXPECT_NEAR(e.optim_states_gib(), r.optim, 0.01);
      EXPECT_EQ(e.total_bytes,
                e.params_bytes + e.gradients_bytes + e.optim_states_bytes + e.activations_bytes);
    }
  }
}

TEST(Estimator, Llama7bActivationsWithinFivePercent) {
  EXPECT_NEAR(llama7b(OptimizerKind::AdamW, false).activations_gib(), 45.61, 0.05 * 45.61);
  EXPECT_NEAR(llama7b(OptimizerKind::AdamW, true).activations_gib(), 1.79, 0.05 * 1.79);
}

TEST(Estimator, LomoGradientIsTheEmbedding) {
  const auto a = ArchSpec::llama_7b();
  EXPECT_EQ(llama7b(OptimizerKind::Lomo, false).gradients_bytes, a.vocab * a.hidden * 2);
}

TEST(Estimator, ReportsBothOptimizerShares) {
  const auto e = llama7b(OptimizerKind::AdamW, false);
  EXPECT_DOUBLE_EQ(e.optim_share_of_total(),
                   static_cast<double>(e.optim_states_bytes) / e.total_bytes);
  EXPECT_NEAR(e.optim_share_of_model_states(), 0.75, 1e-12);  // 12 of 16 bytes per parameter
  EXPECT_GT(e.optim_share_of_total(), 0.5);
  EXPECT_LT(e.optim_share_of_total(), 0.53);
}

TEST(Estimator, MatchesZooEnumeration) {
  const auto cfg = oracle::transformer_config(2, 32, 4, 64);
  auto m = build_model(cfg);
  EXPECT_EQ(param_count(ArchSpec::from_model(cfg)), m->parameter_count());
}

TEST(Estimator, ZeroLayersIsEmbeddingAndHead) {
  ArchSpec a{0, 16, 4, 32, 100, false};
  EXPECT_EQ(param_count(a), 2 * 100 * 16 + 16);
  a.tie_embeddings = true;
  EXPECT_EQ(param_count(a), 100 * 16 + 16);
  auto m = build_model(oracle::transformer_config(0, 16, 4, 100));
  EXPECT_EQ(m->parameter_count(), 2 * 100 * 16 + 16);
}

TEST(Estimator, LomoGradientAgreesWithLedger) {
  for (const auto& cfg : {oracle::transformer_config(2, 32, 4, 64),
                          oracle::transformer_config(1, 16, 2, 8)}) {
    MemoryLedger ledger;
    auto m = build_model(cfg, &ledger);
    lomo_step(*m, sample_batch(oracle::copy_task(4, cfg.vocab), 2, 0), 0.01);
    const auto e = estimate(ArchSpec::from_model(cfg),
                            {OptimizerKind::Lomo, TrainPrecision::Full32, false, 4, 2});
    EXPECT_EQ(e.gradients_bytes, ledger.peak(kGrad));
    EXPECT_EQ(e.params_bytes, ledger.peak(MemoryCategory::Params));
  }
}

TEST(Estimator, RejectsBadInputs) {
  EXPECT_THROW(param_count(ArchSpec{2, 30, 4, 64, 10, false}), ConfigError);
  EXPECT_THROW(estimate(ArchSpec::llama_7b(), {OptimizerKind::Sgd, TrainPrecision::Mixed16, false, 0, 8}),
               ConfigError);
}
