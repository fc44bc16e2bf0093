// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace sella {

enum class Split { kTrain, kValid, kTest };

std::string_view split_name(Split s);
Split parse_split(std::string_view s);

struct Interaction {
  std::int64_t user_id = 0;
  std::int64_t item_id = 0;
  int rating = 0;
  std::int64_t timestamp = 0;
  int label = 0;
  Split split = Split::kTrain;
  bool cold = false;
};

// Users, titled items and time-sorted binary interactions. Items may exist
// in the catalog without any interaction.
class InteractionDataset {
 public:
  std::map<std::int64_t, std::string> items;
  std::set<std::int64_t> users;
  std::vector<Interaction> interactions;

  // Sorts interactions by (timestamp, user, item) and rebuilds every index.
  // Throws DataError if an interaction references an unknown user or item.
  void finalize();

  // Dense row index of an id in sorted order (embedding table row).
  std::size_t user_index(std::int64_t user_id) const;
  std::size_t item_index(std::int64_t item_id) const;
  std::int64_t item_id_at(std::size_t row) const { return item_ids_.at(row); }
  std::int64_t user_id_at(std::size_t row) const { return user_ids_.at(row); }
  std::size_t num_users() const { return user_ids_.size(); }
  std::size_t num_items() const { return item_ids_.size(); }

  // Positions (into `interactions`) of the user's interactions, in time order.
  const std::vector<std::size_t>& history(std::int64_t user_id) const;

  // Up to `k` most recent interactions of the same user strictly before
  // position `pos`, oldest first.
  std::vector<std::size_t> history_before(std::size_t pos, std::size_t k) const;

  std::vector<std::size_t> positions(Split split) const;

 private:
  std::vector<std::int64_t> user_ids_;
  std::vector<std::int64_t> item_ids_;
  std::map<std::int64_t, std::size_t> user_row_;
  std::map<std::int64_t, std::size_t> item_row_;
  std::map<std::int64_t, std::vector<std::size_t>> history_;
  std::vector<std::size_t> rank_in_history_;
};

// label = 1 iff rating > threshold.
int binarize(int rating, int threshold);

struct TimeWindow {
  std::int64_t start = 0;
  std::int64_t end = 0;  // inclusive
};

struct IngestOptions {
  int threshold = 3;
  // Users with fewer interactions (inside the window) are dropped.
  std::size_t min_user_interactions = 0;
  std::optional<TimeWindow> window;
};

// Reads "user item rating timestamp" rows and "item title ..." rows,
// separated by tabs or "::". Only interacted items enter the catalog.
InteractionDataset ingest(const std::filesystem::path& ratings_path, const std::filesystem::path& items_path,
                          const IngestOptions& options);

// Global chronological split: the earliest fraction goes to train, then
// valid, then test.
InteractionDataset temporal_split(InteractionDataset ds, const std::array<double, 3>& ratios);

// cold = item never seen in the train split.
InteractionDataset tag_warm_cold(InteractionDataset ds);

struct SynthConfig {
  std::size_t n_users = 200;
  std::size_t n_items = 300;
  std::size_t rank = 4;
  double density = 0.05;
  double noise = 0.1;
  std::uint64_t seed = 7;
  double cold_fraction = 0.05;
  double item_bias_scale = 2.0;
  double user_bias_scale = 0.5;
  double cluster_scale = 0.5;
  double popularity_exponent = 1.2;
  bool positive_factors = false;
  std::size_t words_per_title = 2;
};

// Latent factors per user [1, user_bias, z] and per item [item_bias, 1, w],
// where w is a signed unit axis in rank-2 dims (the item's cluster). A label
// is 1 iff <user, item> + noise > 0. Titles are drawn from a per-cluster word
// list; cold items have all interactions in the last quarter of the timeline.
InteractionDataset synth_generate(const SynthConfig& cfg);

// Cluster id of each synthetic title word list, for tests and diagnostics.
std::size_t synth_cluster_count(std::size_t rank);

// Manifest with per-split counts, cold statistics and a content hash.
nlohmann::json dataset_manifest(const InteractionDataset& ds);
std::string dataset_hash(const InteractionDataset& ds);

void save_dataset(const InteractionDataset& ds, const std::filesystem::path& dir);
InteractionDataset load_dataset(const std::filesystem::path& dir);

}  // namespace sella
