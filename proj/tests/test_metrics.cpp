// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "grad_cases.hpp"
#include "sella/errors.hpp"
#include "sella/metrics.hpp"
#include "sella/util.hpp"

namespace sella {
namespace {

using testing::uniform;

// Quadratic pairwise definition, ties counted as one half.
double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double hits = 0;
  double pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1;
      hits += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return hits / pairs;
}

TEST(Auc, HandExamples) {
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}), 1.0);
  EXPECT_EQ(auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}), 0.0);
  EXPECT_EQ(auc(std::vector<double>{0.5, 0.5, 0.5}, std::vector<int>{1, 0, 1}), 0.5);
  EXPECT_EQ(auc(std::vector<double>{0.9, 0.8, 0.3}, std::vector<int>{1, 0, 1}), 0.5);
}

TEST(Auc, SingleClassIsAnError) {
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricError);
  EXPECT_THROW(auc(std::vector<double>{0.1}, std::vector<int>{0}), MetricError);
  EXPECT_THROW(auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1}), Error);
}

TEST(Auc, MatchesPairwiseDefinition) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> s(n);
    std::vector<int> y(n);
    // Coarse scores force plenty of ties.
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng() % 7) / 7.0;
      y[i] = static_cast<int>(rng() % 2);
    }
    y[0] = 1;
    y[1] = 0;
    EXPECT_NEAR(auc(s, y), pairwise_auc(s, y), 1e-12);
  }
}

TEST(Auc, InvariantUnderMonotoneTransform) {
  std::mt19937_64 rng(2);
  std::vector<double> s(40);
  std::vector<int> y(40);
  for (std::size_t i = 0; i < 40; ++i) {
    s[i] = std::uniform_real_distribution<double>(-2, 2)(rng);
    y[i] = static_cast<int>(i % 3 == 0);
  }
  std::vector<double> t = s;
  for (double& v : t) v = std::exp(3 * v) + 1;
  EXPECT_EQ(auc(s, y), auc(t, y));
}

TEST(Uauc, SkipsSingleClassUsers) {
  const std::vector<std::int64_t> users = {1, 1, 2, 2, 3};
  const std::vector<double> s = {0.9, 0.1, 0.2, 0.8, 0.5};
  const std::vector<int> y = {1, 0, 1, 0, 1};
  const UaucResult r = uauc(users, s, y);
  EXPECT_EQ(r.value, 0.5);
  EXPECT_EQ(r.eligible_users, 2u);
  EXPECT_EQ(r.excluded_users, 1u);
}

TEST(Uauc, NoEligibleUserIsAnError) {
  const std::vector<std::int64_t> users = {1, 2};
  EXPECT_THROW(uauc(users, std::vector<double>{0.1, 0.2}, std::vector<int>{1, 0}), MetricError);
}

TEST(Uauc, MatchesPerUserMean) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 20 + rng() % 40;
    std::vector<std::int64_t> users(n);
    std::vector<double> s(n);
    std::vector<int> y(n);
    std::map<std::int64_t, std::pair<std::vector<double>, std::vector<int>>> by_user;
    for (std::size_t i = 0; i < n; ++i) {
      users[i] = static_cast<std::int64_t>(rng() % 5);
      s[i] = static_cast<double>(rng() % 11);
      y[i] = static_cast<int>(rng() % 2);
      by_user[users[i]].first.push_back(s[i]);
      by_user[users[i]].second.push_back(y[i]);
    }
    double total = 0;
    std::size_t eligible = 0;
    for (const auto& [u, sy] : by_user) {
      const auto& labels = sy.second;
      const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
      if (!both) continue;
      total += pairwise_auc(sy.first, labels);
      ++eligible;
    }
    if (eligible == 0) continue;
    const UaucResult r = uauc(users, s, y);
    EXPECT_NEAR(r.value, total / static_cast<double>(eligible), 1e-12);
    EXPECT_EQ(r.eligible_users, eligible);
    EXPECT_EQ(r.eligible_users + r.excluded_users, by_user.size());
  }
}

TEST(WarmColdReport, SlicesPartitionTheExamples) {
  std::vector<ScoredExample> ex = {
      {1, 1, false, 0.9}, {1, 0, false, 0.2}, {2, 1, true, 0.4}, {2, 0, true, 0.6}, {3, 1, true, 0.3}};
  const MetricsReport r = warm_cold_report("synthetic", "SeLLa-Rec", ex);
  EXPECT_EQ(r.all.count, 5u);
  EXPECT_EQ(r.warm.count + r.cold.count, r.all.count);
  ASSERT_TRUE(r.warm.auc.has_value());
  EXPECT_EQ(*r.warm.auc, 1.0);
  ASSERT_TRUE(r.cold.auc.has_value());
  EXPECT_EQ(*r.cold.auc, 0.0);
  const auto j = r.to_json();
  EXPECT_EQ(j["variant"], "SeLLa-Rec");
  EXPECT_NE(r.table().find("cold"), std::string::npos);
}

TEST(WarmColdReport, SingleClassSliceHasNoAuc) {
  std::vector<ScoredExample> ex = {{1, 1, false, 0.9}, {1, 0, false, 0.2}, {2, 1, true, 0.4}};
  const MetricsReport r = warm_cold_report("synthetic", "x", ex);
  EXPECT_FALSE(r.cold.auc.has_value());
  EXPECT_FALSE(r.cold.uauc.has_value());
}

TEST(CosineBin, Edges) {
  EXPECT_EQ(cosine_bin(-1.0), 0u);
  EXPECT_EQ(cosine_bin(1.0), kCosineBins - 1);
  EXPECT_EQ(cosine_bin(0.0), kCosineBins / 2);
  EXPECT_EQ(cosine_bin(-0.999), 0u);
}

struct AlignedParts {
  AlignedParts() : collab(2, 5, 3, 1), proj(3, 4, 6, 2) {
    std::mt19937_64 rng(4);
    collab.items.value = uniform(5, 3, rng);
    bank.vectors.value = uniform(5, 6, rng);
    for (std::int64_t i = 0; i < 5; ++i) bank.item_ids.push_back(100 + i);
  }
  CollabModel collab;
  ProjCtoL proj;
  SemanticBank bank;
};

TEST(CosineReport, IdenticalVectorsLandInTopBin) {
  AlignedParts p;
  p.bank.vectors.value = p.proj.apply(p.collab.items.value);
  const CosineReport r = cosine_report(p.collab, p.proj, p.bank);
  ASSERT_EQ(r.cosines.size(), 5u);
  EXPECT_EQ(r.histogram[kCosineBins - 1], 5u);
  EXPECT_NEAR(r.mean, 1.0, 1e-12);
}

TEST(CosineReport, ZeroRowsAreSkippedAndCounted) {
  AlignedParts p;
  for (std::size_t c = 0; c < 6; ++c) p.bank.vectors.value(2, c) = 0.0;
  const CosineReport r = cosine_report(p.collab, p.proj, p.bank);
  EXPECT_EQ(r.skipped, 1u);
  EXPECT_EQ(r.cosines.size(), 4u);
  std::size_t total = 0;
  for (std::size_t h : r.histogram) total += h;
  EXPECT_EQ(total, 4u);
  const auto cos = item_cosines(p.collab, p.proj, p.bank);
  double mean = 0;
  for (double c : cos) mean += c / 5.0;
  EXPECT_NEAR(mean_item_cosine(p.collab, p.proj, p.bank), mean, 1e-12);
}

TEST(CosineReport, CsvHasOneRowPerBin) {
  AlignedParts p;
  const std::string csv = cosine_report(p.collab, p.proj, p.bank).csv();
  std::size_t lines = 0;
  for (char ch : csv) lines += ch == '\n';
  EXPECT_EQ(lines, kCosineBins + 1);
}

TEST(EmbeddingExport, TwoRowsPerItemAndExactValues) {
  AlignedParts p;
  const auto path = std::filesystem::temp_directory_path() / "sella_test_embeddings.csv";
  embedding_export(p.bank, p.collab, p.proj, path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "item_id,source,v0,v1,v2,v3,v4,v5");
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  ASSERT_EQ(rows.size(), 10u);
  const Tensor projected = p.proj.apply(p.collab.items.value);
  for (std::size_t r = 0; r < 10; ++r) {
    std::stringstream ss(rows[r]);
    std::string field;
    std::getline(ss, field, ',');
    EXPECT_EQ(std::stoll(field), 100 + static_cast<std::int64_t>(r % 5));
    std::getline(ss, field, ',');
    const bool collab_side = r < 5;
    EXPECT_EQ(field.find("collab") != std::string::npos, collab_side) << field;
    const Tensor& src = collab_side ? projected : p.bank.vectors.value;
    for (std::size_t c = 0; c < 6; ++c) {
      std::getline(ss, field, ',');
      EXPECT_EQ(std::stod(field), src(r % 5, c));
    }
  }
}

TEST(AttentionCsv, HeaderAndQuoting) {
  std::map<std::size_t, Tensor> layers;
  layers[1] = Tensor::identity(2);
  const std::vector<std::string> labels = {"a,b", "<Item_ID>"};
  const std::string csv = attention_csv(layers, labels);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "layer,row,row_token,\"a,b\",<Item_ID>");
  EXPECT_NE(csv.find("1,1,<Item_ID>,0,1"), std::string::npos) << csv;
}

TEST(AttentionCapture, RowsSumToOneAndAreCausal) {
  MiniLM lm(testing::tiny_lm_config(5), 12);
  Graph g;
  AttentionCapture cap;
  cap.layers = {0, 1};
  lm.hidden_states(g, lm.embed_tokens(g, std::vector<TokenId>{7, tokens::kItemId, 8, 9}), true, &cap);
  ASSERT_EQ(cap.averaged.size(), 2u);
  for (const auto& [layer, a] : cap.averaged) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
      double total = 0;
      for (std::size_t c = 0; c < a.cols(); ++c) {
        if (c > r) {
          EXPECT_EQ(a(r, c), 0.0);
        }
        total += a(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-12) << "layer " << layer;
    }
  }
}

}  // namespace
}  // namespace sella
