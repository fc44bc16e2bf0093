// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "grad_cases.hpp"
#include "sella/collab.hpp"
#include "sella/data.hpp"
#include "sella/errors.hpp"
#include "sella/pipeline.hpp"

namespace sella {
namespace {

namespace fs = std::filesystem;
using testing::uniform;

// Straightforward InfoNCE over row-wise cosines, written without the graph.
double info_nce_oracle(const Tensor& a, const Tensor& b, double tau) {
  const std::size_t n = a.rows();
  auto cosine = [&](std::size_t i, std::size_t j) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t c = 0; c < a.cols(); ++c) {
      dot += a(i, c) * b(j, c);
      na += a(i, c) * a(i, c);
      nb += b(j, c) * b(j, c);
    }
    return dot / std::sqrt(na * nb);
  };
  double loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0;
    for (std::size_t j = 0; j < n; ++j) denom += std::exp(cosine(i, j) / tau);
    loss -= std::log(std::exp(cosine(i, i) / tau) / denom);
  }
  return loss / static_cast<double>(n);
}

CollabModel model_with(const Tensor& users, const Tensor& items) {
  CollabModel m(users.rows(), items.rows(), users.cols(), 0);
  m.users.value = users;
  m.items.value = items;
  return m;
}

TEST(Collab, PredictIsDotProduct) {
  const CollabModel m = model_with(Tensor({1, 2}, {1, 2}), Tensor({1, 2}, {3, -1}));
  EXPECT_EQ(m.predict(0, 0), 1.0);
}

TEST(Collab, ZeroUserPredictsZero) {
  std::mt19937_64 rng(1);
  const CollabModel m = model_with(Tensor::zeros(1, 4), uniform(3, 4, rng));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.predict(0, i), 0.0);
}

TEST(Collab, OutOfRangeRowsAreRejected) {
  const CollabModel m(2, 3, 4, 1);
  EXPECT_THROW(m.predict(2, 0), Error);
  EXPECT_THROW(m.predict(0, 3), Error);
}

TEST(Collab, RankingInvariantUnderRotation) {
  std::mt19937_64 rng(2);
  const Tensor u = uniform(3, 2, rng);
  const Tensor v = uniform(6, 2, rng);
  const double th = 0.83;
  Tensor rot = Tensor::zeros(2, 2);
  rot(0, 0) = std::cos(th);
  rot(0, 1) = -std::sin(th);
  rot(1, 0) = std::sin(th);
  rot(1, 1) = std::cos(th);
  const CollabModel a = model_with(u, v);
  Graph g;
  const Tensor u_rot = g.value(g.matmul(g.constant(u), g.constant(rot)));
  const Tensor v_rot = g.value(g.matmul(g.constant(v), g.constant(rot)));
  const CollabModel b = model_with(u_rot, v_rot);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(a.predict(r, i), b.predict(r, i), 1e-12);
  }
}

TEST(Collab, InitialScaleIsSmall) {
  const CollabModel m(50, 80, 16, 3);
  double sq = 0;
  for (double x : m.items.value.data()) sq += x * x;
  const double std_hat = std::sqrt(sq / static_cast<double>(m.items.value.size()));
  EXPECT_NEAR(std_hat, kCollabInitStd, 0.002);
}

TEST(CollabLoss, KnownValues) {
  const CollabModel m = model_with(Tensor({1, 2}, {1, 0}), Tensor({2, 2}, {1, 0, 0.5, 0}));
  const std::vector<LabeledPair> exact = {{0, 0, 1}};
  const std::vector<LabeledPair> wrong = {{0, 0, 0}};
  const std::vector<LabeledPair> half = {{0, 1, 1}};
  EXPECT_EQ(collab_loss(m, exact), 0.0);
  EXPECT_EQ(collab_loss(m, wrong), 1.0);
  EXPECT_EQ(collab_loss(m, half), 0.25);
  const std::vector<LabeledPair> both = {{0, 0, 0}, {0, 1, 1}};
  EXPECT_DOUBLE_EQ(collab_loss(m, both), 0.625);
}

TEST(InfoNce, SingleRowIsZero) {
  std::mt19937_64 rng(4);
  EXPECT_NEAR(info_nce(uniform(1, 5, rng), uniform(1, 5, rng), 0.07), 0.0, 1e-15);
}

TEST(InfoNce, IdentityPairsAtUnitTemperature) {
  const Tensor eye = Tensor::identity(2);
  const double e = std::exp(1.0);
  EXPECT_NEAR(info_nce(eye, eye, 1.0), -std::log(e / (e + 1.0)), 1e-12);
  EXPECT_NEAR(info_nce(eye, eye, 1.0), info_nce_oracle(eye, eye, 1.0), 1e-12);
}

TEST(InfoNce, HotTemperatureApproachesLogBatch) {
  std::mt19937_64 rng(5);
  const Tensor a = uniform(6, 4, rng);
  const Tensor b = uniform(6, 4, rng);
  EXPECT_NEAR(info_nce(a, b, 1e6), std::log(6.0), 1e-5);
}

TEST(InfoNce, MatchesOracleAndIsNonNegative) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + trial % 7;
    const Tensor a = uniform(n, 5, rng);
    const Tensor b = uniform(n, 5, rng);
    const double tau = 0.05 + 0.1 * (trial % 5);
    const double got = info_nce(a, b, tau);
    EXPECT_NEAR(got, info_nce_oracle(a, b, tau), 1e-9 * std::max(1.0, got));
    EXPECT_GE(got, 0.0);
  }
}

TEST(AlignLoss, AgreesWithInfoNceOnProjectedRows) {
  std::mt19937_64 rng(7);
  const CollabModel m = model_with(uniform(2, 3, rng), uniform(5, 3, rng));
  const ProjCtoL proj(3, 6, 4, 8);
  SemanticBank bank;
  bank.vectors.value = uniform(5, 4, rng);
  for (std::int64_t i = 0; i < 5; ++i) bank.item_ids.push_back(i);
  const std::vector<std::size_t> rows = {4, 1, 2};
  Tensor picked_c = Tensor::zeros(3, 3);
  Tensor picked_s = Tensor::zeros(3, 4);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) picked_c(r, c) = m.items.value(rows[r], c);
    for (std::size_t c = 0; c < 4; ++c) picked_s(r, c) = bank.vectors.value(rows[r], c);
  }
  EXPECT_NEAR(align_loss(m, proj, bank, rows, 0.3), info_nce_oracle(proj.apply(picked_c), picked_s, 0.3), 1e-12);
}

TEST(Stage2Gradient, CollabPlusAlignment) {
  for (const auto& c : testing::stage_loss_cases()) {
    if (c.name != "stage2_collab_plus_align") continue;
    for (std::uint64_t seed = 0; seed < 3; ++seed) EXPECT_LE(c.run(seed), 1e-4) << "seed " << seed;
  }
}

TEST(ProjCtoL, SaveLoadRoundTrip) {
  const ProjCtoL p(4, 6, 5, 9);
  const fs::path path = fs::temp_directory_path() / "sella_test_proj_c2l.bin";
  p.save(path);
  const ProjCtoL back = ProjCtoL::load(path);
  EXPECT_EQ(back.w1.value, p.w1.value);
  EXPECT_EQ(back.b2.value, p.b2.value);
}

struct Stage2Fixture : ::testing::Test {
  void SetUp() override {
    SynthConfig sc;
    sc.n_users = 40;
    sc.n_items = 50;
    sc.density = 0.3;
    ds = tag_warm_cold(temporal_split(synth_generate(sc), {0.5, 0.25, 0.25}));
    std::mt19937_64 rng(11);
    bank.vectors.value = uniform(ds.num_items(), 8, rng);
    for (std::size_t r = 0; r < ds.num_items(); ++r) bank.item_ids.push_back(ds.item_id_at(r));
    cfg.epochs = 4;
    cfg.patience = 10;
    cfg.proj_hidden = 12;
    cfg.batch_size = 32;
    cfg.align_batch_size = 16;
    cfg.tau = 0.2;
    cfg.lr = 1e-2;
  }
  InteractionDataset ds;
  SemanticBank bank;
  AlignConfig cfg;
};

TEST_F(Stage2Fixture, WithoutAlignmentSemanticSideIsUntouched) {
  cfg.lambda = 0.0;
  const Stage2Result r = train_stage2(ds, bank, 6, cfg);
  EXPECT_EQ(r.bank.vectors.value, bank.vectors.value);
  const ProjCtoL fresh(6, cfg.proj_hidden, 8, cfg.seed + 1);
  EXPECT_EQ(r.proj.w1.value, fresh.w1.value);
  EXPECT_EQ(r.proj.w2.value, fresh.w2.value);
  EXPECT_EQ(r.bank.provenance, Provenance::kAligned);
}

TEST_F(Stage2Fixture, AlignmentRaisesMeanCosine) {
  cfg.lambda = 1.0;
  const CollabModel init(ds.num_users(), ds.num_items(), 6, cfg.seed);
  const ProjCtoL proj0(6, cfg.proj_hidden, 8, cfg.seed + 1);
  const double before = mean_item_cosine(init, proj0, bank);
  const Stage2Result r = train_stage2(ds, bank, 6, cfg);
  EXPECT_GT(mean_item_cosine(r.collab, r.proj, r.bank), before);
}

TEST_F(Stage2Fixture, RequiresDistilledBankOfCatalogSize) {
  SemanticBank aligned = bank;
  aligned.provenance = Provenance::kAligned;
  EXPECT_THROW(train_stage2(ds, aligned, 6, cfg), Error);
  SemanticBank short_bank;
  short_bank.vectors.value = Tensor::zeros(3, 8);
  short_bank.item_ids = {0, 1, 2};
  EXPECT_THROW(train_stage2(ds, short_bank, 6, cfg), Error);
}

TEST_F(Stage2Fixture, Deterministic) {
  const Stage2Result a = train_stage2(ds, bank, 6, cfg);
  const Stage2Result b = train_stage2(ds, bank, 6, cfg);
  EXPECT_EQ(a.collab.items.value, b.collab.items.value);
  EXPECT_EQ(a.bank.vectors.value, b.bank.vectors.value);
  EXPECT_EQ(a.best_epoch, b.best_epoch);
}

}  // namespace
}  // namespace sella
