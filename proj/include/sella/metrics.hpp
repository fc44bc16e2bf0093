// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "sella/collab.hpp"
#include "sella/distill.hpp"
#include "sella/tensor.hpp"

namespace sella {

// Probability that a random positive outranks a random negative, ties
// counted as one half. Rank-sum method, O(n log n).
// Throws MetricError unless both classes are present.
double auc(std::span<const double> scores, std::span<const int> labels);

struct UaucResult {
  double value = 0.0;
  std::size_t eligible_users = 0;
  std::size_t excluded_users = 0;
};

// Mean per-user AUC over users with at least one positive and one negative.
// Throws MetricError when no user is eligible.
UaucResult uauc(std::span<const std::int64_t> users, std::span<const double> scores, std::span<const int> labels);

struct ScoredExample {
  std::int64_t user_id = 0;
  int label = 0;
  bool cold = false;
  double score = 0.0;
};

struct SliceMetrics {
  std::size_t count = 0;
  std::size_t positives = 0;
  std::optional<double> auc;   // empty when the slice has a single class
  std::optional<double> uauc;  // empty when no user is eligible
  std::size_t uauc_users = 0;
  std::size_t uauc_excluded = 0;
};

SliceMetrics slice_metrics(std::span<const ScoredExample> examples);

struct MetricsReport {
  std::string dataset;
  std::string variant;
  SliceMetrics all;
  SliceMetrics warm;
  SliceMetrics cold;

  nlohmann::json to_json() const;
  // Aligned text table: one row per slice, AUC then UAUC.
  std::string table() const;
};

MetricsReport warm_cold_report(std::string dataset, std::string variant, std::span<const ScoredExample> examples);

inline constexpr std::size_t kCosineBins = 50;

struct CosineReport {
  std::vector<double> cosines;  // per item, skipped items omitted
  std::vector<std::size_t> histogram;
  std::size_t skipped = 0;
  double mean = 0.0;
  double median = 0.0;

  // "bin_lo,bin_hi,count" rows over [-1, 1].
  std::string csv() const;
  nlohmann::json summary() const;
};

// Bin index of a cosine in [-1, 1]; 1.0 falls in the top bin.
std::size_t cosine_bin(double c);

CosineReport cosine_report(const CollabModel& collab, const ProjCtoL& proj, const SemanticBank& bank);

// Header "item_id,source,v0,...". Rows for projected collaborative vectors
// (source collab-projected) come first, then the semantic rows.
void embedding_export(const SemanticBank& bank, const CollabModel& collab, const ProjCtoL& proj,
                      const std::filesystem::path& path);

// One CSV block per layer: "layer,row,row_token,<token labels...>".
std::string attention_csv(const std::map<std::size_t, Tensor>& per_layer, std::span<const std::string> labels);

}  // namespace sella
