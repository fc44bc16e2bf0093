// SPDX-License-Identifier: Apache-2.0
#include "sella/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "sella/errors.hpp"
#include "sella/util.hpp"

namespace sella {
namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  const bool colons = line.find("::") != std::string::npos;
  const std::string sep = colons ? "::" : "\t";
  std::size_t start = 0;
  while (true) {
    std::size_t p = line.find(sep, start);
    if (p == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, p - start));
    start = p + sep.size();
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

std::int64_t parse_int(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    long long v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw DataError(where + ": expected integer, got '" + s + "'");
  }
}

std::string clean_title(std::string t) {
  for (char& c : t) {
    if (c == '\t' || c == '\n' || c == '\r') c = ' ';
  }
  return t;
}

// Per-cluster title vocabulary for synthetic data.
constexpr std::array<std::array<const char*, 6>, 8> kClusterWords = {{
    {"nebula", "orbit", "rocket", "comet", "galaxy", "pulsar"},
    {"castle", "dragon", "sword", "wizard", "quest", "throne"},
    {"detective", "alibi", "clue", "verdict", "suspect", "motive"},
    {"romance", "wedding", "letter", "sunset", "promise", "heart"},
    {"robot", "circuit", "signal", "cipher", "network", "drone"},
    {"ocean", "harbor", "voyage", "island", "anchor", "tide"},
    {"haunted", "shadow", "crypt", "whisper", "lantern", "raven"},
    {"stadium", "coach", "rookie", "season", "trophy", "rival"},
}};

}  // namespace

std::string_view split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kValid: return "valid";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::kTrain;
  if (s == "valid") return Split::kValid;
  if (s == "test") return Split::kTest;
  throw DataError("unknown split '" + std::string(s) + "'");
}

int binarize(int rating, int threshold) { return rating > threshold ? 1 : 0; }

void InteractionDataset::finalize() {
  std::stable_sort(interactions.begin(), interactions.end(), [](const Interaction& a, const Interaction& b) {
    if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
    if (a.user_id != b.user_id) return a.user_id < b.user_id;
    return a.item_id < b.item_id;
  });
  user_ids_.assign(users.begin(), users.end());
  item_ids_.clear();
  for (const auto& [id, title] : items) item_ids_.push_back(id);
  user_row_.clear();
  item_row_.clear();
  for (std::size_t i = 0; i < user_ids_.size(); ++i) user_row_[user_ids_[i]] = i;
  for (std::size_t i = 0; i < item_ids_.size(); ++i) item_row_[item_ids_[i]] = i;
  history_.clear();
  rank_in_history_.assign(interactions.size(), 0);
  for (std::size_t p = 0; p < interactions.size(); ++p) {
    const Interaction& x = interactions[p];
    if (!users.contains(x.user_id)) throw DataError("interaction references unknown user " + std::to_string(x.user_id));
    if (!items.contains(x.item_id)) throw DataError("interaction references unknown item " + std::to_string(x.item_id));
    auto& h = history_[x.user_id];
    rank_in_history_[p] = h.size();
    h.push_back(p);
  }
}

std::size_t InteractionDataset::user_index(std::int64_t user_id) const {
  auto it = user_row_.find(user_id);
  if (it == user_row_.end()) throw LookupError("unknown user id " + std::to_string(user_id));
  return it->second;
}

std::size_t InteractionDataset::item_index(std::int64_t item_id) const {
  auto it = item_row_.find(item_id);
  if (it == item_row_.end()) throw LookupError("unknown item id " + std::to_string(item_id));
  return it->second;
}

const std::vector<std::size_t>& InteractionDataset::history(std::int64_t user_id) const {
  static const std::vector<std::size_t> kEmpty;
  auto it = history_.find(user_id);
  return it == history_.end() ? kEmpty : it->second;
}

std::vector<std::size_t> InteractionDataset::history_before(std::size_t pos, std::size_t k) const {
  const auto& h = history(interactions.at(pos).user_id);
  const std::size_t rank = rank_in_history_.at(pos);
  const std::size_t from = rank > k ? rank - k : 0;
  return {h.begin() + static_cast<std::ptrdiff_t>(from), h.begin() + static_cast<std::ptrdiff_t>(rank)};
}

std::vector<std::size_t> InteractionDataset::positions(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t p = 0; p < interactions.size(); ++p) {
    if (interactions[p].split == split) out.push_back(p);
  }
  return out;
}

InteractionDataset ingest(const std::filesystem::path& ratings_path, const std::filesystem::path& items_path,
                          const IngestOptions& options) {
  if (options.threshold != 3 && options.threshold != 4) {
    throw ContractViolation("ingest: threshold must be 3 or 4, got " + std::to_string(options.threshold));
  }
  std::map<std::int64_t, std::string> titles;
  {
    std::ifstream is(items_path);
    if (!is) throw DataError("cannot open items file " + items_path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line == "\r") continue;
      const std::string where = items_path.filename().string() + ":" + std::to_string(lineno);
      auto f = split_fields(line);
      if (f.size() < 2) throw DataError(where + ": expected 'item<sep>title', got '" + line + "'");
      titles[parse_int(f[0], where)] = clean_title(f[1]);
    }
  }

  std::vector<Interaction> rows;
  {
    std::ifstream is(ratings_path);
    if (!is) throw DataError("cannot open ratings file " + ratings_path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty() || line == "\r") continue;
      const std::string where = ratings_path.filename().string() + ":" + std::to_string(lineno);
      auto f = split_fields(line);
      if (f.size() != 4) {
        throw DataError(where + ": expected 4 fields (user, item, rating, timestamp), got " + std::to_string(f.size()));
      }
      Interaction x;
      x.user_id = parse_int(f[0], where);
      x.item_id = parse_int(f[1], where);
      x.rating = static_cast<int>(parse_int(f[2], where));
      x.timestamp = parse_int(f[3], where);
      if (x.rating < 1 || x.rating > 5) throw DataError(where + ": rating " + f[2] + " outside 1..5");
      if (!titles.contains(x.item_id)) throw DataError(where + ": item " + f[1] + " missing from items file");
      if (options.window && (x.timestamp < options.window->start || x.timestamp > options.window->end)) continue;
      x.label = binarize(x.rating, options.threshold);
      rows.push_back(x);
    }
  }

  std::map<std::int64_t, std::size_t> per_user;
  for (const auto& x : rows) ++per_user[x.user_id];

  InteractionDataset ds;
  for (const auto& x : rows) {
    if (per_user[x.user_id] < options.min_user_interactions) continue;
    ds.users.insert(x.user_id);
    ds.items.emplace(x.item_id, titles[x.item_id]);
    ds.interactions.push_back(x);
  }
  if (ds.interactions.empty()) throw DataError("ingest: no interactions left after filtering (empty dataset)");
  ds.finalize();
  return ds;
}

InteractionDataset temporal_split(InteractionDataset ds, const std::array<double, 3>& ratios) {
  if (ds.interactions.empty()) throw DataError("temporal_split: empty dataset");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0)) throw ContractViolation("temporal_split: ratios must be positive");
    total += r;
  }
  ds.finalize();
  const std::size_t n = ds.interactions.size();
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios[0] / total));
  const auto n_upto_valid =
      static_cast<std::size_t>(std::floor(static_cast<double>(n) * (ratios[0] + ratios[1]) / total));
  const std::size_t n_valid = n_upto_valid - n_train;
  const std::size_t n_test = n - n_upto_valid;
  if (n_train == 0 || n_valid == 0 || n_test == 0) {
    throw DataError("temporal_split: empty partition (train " + std::to_string(n_train) + ", valid " +
                    std::to_string(n_valid) + ", test " + std::to_string(n_test) + ")");
  }
  for (std::size_t p = 0; p < n; ++p) {
    ds.interactions[p].split = p < n_train ? Split::kTrain : (p < n_upto_valid ? Split::kValid : Split::kTest);
  }
  return ds;
}

InteractionDataset tag_warm_cold(InteractionDataset ds) {
  std::set<std::int64_t> seen;
  for (const auto& x : ds.interactions) {
    if (x.split == Split::kTrain) seen.insert(x.item_id);
  }
  for (auto& x : ds.interactions) x.cold = !seen.contains(x.item_id);
  return ds;
}

std::size_t synth_cluster_count(std::size_t rank) { return rank >= 3 ? 2 * (rank - 2) : 1; }

InteractionDataset synth_generate(const SynthConfig& cfg) {
  if (cfg.n_users == 0 || cfg.n_items == 0) throw ContractViolation("synth_generate: zero users or items");
  if (cfg.rank == 0) throw ContractViolation("synth_generate: rank must be positive");
  if (!(cfg.density > 0.0 && cfg.density <= 1.0)) throw ContractViolation("synth_generate: density must be in (0, 1]");
  const std::size_t n_clusters = synth_cluster_count(cfg.rank);
  if (n_clusters > kClusterWords.size()) {
    throw ContractViolation("synth_generate: rank " + std::to_string(cfg.rank) + " needs more than " +
                            std::to_string(kClusterWords.size()) + " title clusters");
  }
  if (cfg.words_per_title == 0 || cfg.words_per_title > kClusterWords[0].size()) {
    throw ContractViolation("synth_generate: words_per_title out of range");
  }

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw = [&](double scale) {
    const double v = scale * normal(rng);
    return cfg.positive_factors ? std::abs(v) : v;
  };

  const std::size_t r = cfg.rank;
  std::vector<std::vector<double>> user_f(cfg.n_users, std::vector<double>(r, 0.0));
  std::vector<std::vector<double>> item_f(cfg.n_items, std::vector<double>(r, 0.0));
  std::vector<std::size_t> cluster(cfg.n_items, 0);
  for (auto& u : user_f) {
    u[0] = 1.0;
    if (r >= 2) u[1] = draw(cfg.user_bias_scale);
    for (std::size_t k = 2; k < r; ++k) u[k] = draw(cfg.cluster_scale);
  }
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    auto& q = item_f[i];
    q[0] = draw(cfg.item_bias_scale);
    if (r >= 2) q[1] = 1.0;
    if (r >= 3) {
      std::size_t c = std::uniform_int_distribution<std::size_t>(0, n_clusters - 1)(rng);
      if (cfg.positive_factors) c -= c % 2;
      cluster[i] = c;
      q[2 + c / 2] = (c % 2 == 0) ? 1.0 : -1.0;
    }
  }

  // Popularity: Zipf weights over a random permutation of items.
  std::vector<std::size_t> perm(cfg.n_items);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<double> weight(cfg.n_items);
  for (std::size_t k = 0; k < cfg.n_items; ++k) {
    weight[perm[k]] = 1.0 / std::pow(static_cast<double>(k + 1), cfg.popularity_exponent);
  }

  // Cold items come from the less popular half.
  std::vector<bool> cold(cfg.n_items, false);
  {
    std::vector<std::size_t> tail(perm.begin() + static_cast<std::ptrdiff_t>(cfg.n_items / 2), perm.end());
    std::shuffle(tail.begin(), tail.end(), rng);
    const auto n_cold = static_cast<std::size_t>(std::llround(cfg.cold_fraction * static_cast<double>(cfg.n_items)));
    for (std::size_t k = 0; k < std::min(n_cold, tail.size()); ++k) cold[tail[k]] = true;
  }

  const std::size_t total_pairs = cfg.n_users * cfg.n_items;
  const auto target = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.density * static_cast<double>(total_pairs))));
  std::set<std::pair<std::size_t, std::size_t>> pairs;
  {
    std::uniform_int_distribution<std::size_t> pick_user(0, cfg.n_users - 1);
    std::discrete_distribution<std::size_t> pick_item(weight.begin(), weight.end());
    std::size_t attempts = 0;
    while (pairs.size() < target && attempts < 50 * target) {
      pairs.emplace(pick_user(rng), pick_item(rng));
      ++attempts;
    }
    if (pairs.size() < target) {
      std::vector<std::pair<std::size_t, std::size_t>> rest;
      for (std::size_t u = 0; u < cfg.n_users; ++u) {
        for (std::size_t i = 0; i < cfg.n_items; ++i) {
          if (!pairs.contains({u, i})) rest.emplace_back(u, i);
        }
      }
      std::shuffle(rest.begin(), rest.end(), rng);
      for (std::size_t k = 0; pairs.size() < target; ++k) pairs.insert(rest[k]);
    }
  }

  constexpr std::int64_t kStart = 1'000'000'000;
  constexpr double kSpan = 20.0 * 30.0 * 86400.0;  // twenty months
  InteractionDataset ds;
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    std::string title;
    std::vector<std::size_t> idx(kClusterWords[0].size());
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t w = 0; w < cfg.words_per_title; ++w) {
      if (w) title += ' ';
      title += kClusterWords[cluster[i]][idx[w]];
    }
    ds.items.emplace(static_cast<std::int64_t>(i + 1), title);
  }
  for (const auto& [u, i] : pairs) {
    double score = 0.0;
    for (std::size_t k = 0; k < r; ++k) score += user_f[u][k] * item_f[i][k];
    score += cfg.noise * normal(rng);
    const double t = cold[i] ? 0.75 + 0.25 * unif(rng) : unif(rng);
    Interaction x;
    x.user_id = static_cast<std::int64_t>(u + 1);
    x.item_id = static_cast<std::int64_t>(i + 1);
    x.label = score > 0.0 ? 1 : 0;
    x.rating = x.label ? (score > 1.0 ? 5 : 4) : (score < -1.0 ? 1 : 3);
    x.timestamp = kStart + static_cast<std::int64_t>(t * kSpan);
    ds.users.insert(x.user_id);
    ds.interactions.push_back(x);
  }
  ds.finalize();
  return ds;
}

std::string dataset_hash(const InteractionDataset& ds) {
  std::uint64_t h = fnv1a64("sella-dataset-v1");
  for (const auto& [id, title] : ds.items) {
    h = fnv1a64(std::to_string(id) + "\t" + title + "\n", h);
  }
  for (const auto& x : ds.interactions) {
    std::ostringstream os;
    os << x.user_id << '\t' << x.item_id << '\t' << x.rating << '\t' << x.timestamp << '\t' << x.label << '\t'
       << split_name(x.split) << '\t' << x.cold << '\n';
    h = fnv1a64(os.str(), h);
  }
  return hex64(h);
}

nlohmann::json dataset_manifest(const InteractionDataset& ds) {
  nlohmann::json m;
  m["users"] = ds.users.size();
  m["items"] = ds.items.size();
  m["interactions"] = ds.interactions.size();
  std::size_t positives = 0;
  std::map<Split, std::array<std::size_t, 3>> per;  // count, positives, cold
  std::set<std::int64_t> cold_items;
  std::set<std::int64_t> interacted;
  for (const auto& x : ds.interactions) {
    positives += static_cast<std::size_t>(x.label);
    auto& c = per[x.split];
    ++c[0];
    c[1] += static_cast<std::size_t>(x.label);
    c[2] += x.cold ? 1 : 0;
    if (x.cold) cold_items.insert(x.item_id);
    interacted.insert(x.item_id);
  }
  m["positives"] = positives;
  for (Split s : {Split::kTrain, Split::kValid, Split::kTest}) {
    const auto c = per[s];
    m["splits"][std::string(split_name(s))] = {{"count", c[0]}, {"positives", c[1]}, {"cold", c[2]}};
  }
  m["cold_items"] = cold_items.size();
  m["interacted_items"] = interacted.size();
  if (!ds.interactions.empty()) {
    m["first_timestamp"] = ds.interactions.front().timestamp;
    m["last_timestamp"] = ds.interactions.back().timestamp;
  }
  m["data_hash"] = dataset_hash(ds);
  return m;
}

void save_dataset(const InteractionDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ostringstream items;
  for (const auto& [id, title] : ds.items) items << id << '\t' << title << '\n';
  write_file(dir / "items.tsv", items.str());
  std::ostringstream rows;
  for (const auto& x : ds.interactions) {
    rows << x.user_id << '\t' << x.item_id << '\t' << x.rating << '\t' << x.timestamp << '\t' << x.label << '\t'
         << split_name(x.split) << '\t' << (x.cold ? 1 : 0) << '\n';
  }
  write_file(dir / "interactions.tsv", rows.str());
  write_file(dir / "manifest.json", dataset_manifest(ds).dump(2) + "\n");
}

InteractionDataset load_dataset(const std::filesystem::path& dir) {
  InteractionDataset ds;
  {
    std::istringstream is(read_file(dir / "items.tsv"));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto tab = line.find('\t');
      const std::string where = "items.tsv:" + std::to_string(lineno);
      if (tab == std::string::npos) throw DataError(where + ": missing tab");
      ds.items[parse_int(line.substr(0, tab), where)] = line.substr(tab + 1);
    }
  }
  {
    std::istringstream is(read_file(dir / "interactions.tsv"));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const std::string where = "interactions.tsv:" + std::to_string(lineno);
      std::vector<std::string> f;
      std::istringstream ls(line);
      std::string tok;
      while (std::getline(ls, tok, '\t')) f.push_back(tok);
      if (f.size() != 7) throw DataError(where + ": expected 7 fields");
      Interaction x;
      x.user_id = parse_int(f[0], where);
      x.item_id = parse_int(f[1], where);
      x.rating = static_cast<int>(parse_int(f[2], where));
      x.timestamp = parse_int(f[3], where);
      x.label = static_cast<int>(parse_int(f[4], where));
      x.split = parse_split(f[5]);
      x.cold = parse_int(f[6], where) != 0;
      ds.users.insert(x.user_id);
      ds.interactions.push_back(x);
    }
  }
  if (ds.interactions.empty()) throw DataError("dataset at " + dir.string() + " is empty");
  ds.finalize();
  return ds;
}

}  // namespace sella
