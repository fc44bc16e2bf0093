// SPDX-License-Identifier: Apache-2.0
#include "sella/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "sella/errors.hpp"

namespace sella {
namespace {

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << v;
  return os.str();
}

std::string full(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

nlohmann::json slice_json(const SliceMetrics& s) {
  nlohmann::json j;
  j["count"] = s.count;
  j["positives"] = s.positives;
  j["auc"] = s.auc ? nlohmann::json(*s.auc) : nlohmann::json(nullptr);
  j["uauc"] = s.uauc ? nlohmann::json(*s.uauc) : nlohmann::json(nullptr);
  j["uauc_users"] = s.uauc_users;
  j["uauc_excluded"] = s.uauc_excluded;
  return j;
}

}  // namespace

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw ContractViolation("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Average rank (1-based) for each tie group, summed over positives.
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        rank_sum += avg_rank;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) {
    throw MetricError("auc undefined: " + std::to_string(pos) + " positives, " + std::to_string(neg) + " negatives");
  }
  const double p = static_cast<double>(pos);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(neg));
}

UaucResult uauc(std::span<const std::int64_t> users, std::span<const double> scores, std::span<const int> labels) {
  if (users.size() != scores.size() || scores.size() != labels.size()) {
    throw ContractViolation("uauc: users, scores and labels differ in length");
  }
  std::map<std::int64_t, std::vector<std::size_t>> by_user;
  for (std::size_t i = 0; i < users.size(); ++i) by_user[users[i]].push_back(i);
  UaucResult r;
  double total = 0.0;
  for (const auto& [user, idx] : by_user) {
    std::vector<double> s;
    std::vector<int> l;
    int pos = 0;
    for (std::size_t i : idx) {
      s.push_back(scores[i]);
      l.push_back(labels[i]);
      pos += labels[i] ? 1 : 0;
    }
    if (pos == 0 || pos == static_cast<int>(idx.size())) {
      ++r.excluded_users;
      continue;
    }
    total += auc(s, l);
    ++r.eligible_users;
  }
  if (r.eligible_users == 0) throw MetricError("uauc undefined: no user has both a positive and a negative");
  r.value = total / static_cast<double>(r.eligible_users);
  return r;
}

SliceMetrics slice_metrics(std::span<const ScoredExample> examples) {
  SliceMetrics m;
  m.count = examples.size();
  std::vector<double> s;
  std::vector<int> l;
  std::vector<std::int64_t> u;
  for (const auto& e : examples) {
    s.push_back(e.score);
    l.push_back(e.label);
    u.push_back(e.user_id);
    m.positives += e.label ? 1 : 0;
  }
  if (m.positives > 0 && m.positives < m.count) m.auc = auc(s, l);
  try {
    const UaucResult r = uauc(u, s, l);
    m.uauc = r.value;
    m.uauc_users = r.eligible_users;
    m.uauc_excluded = r.excluded_users;
  } catch (const MetricError&) {
    std::map<std::int64_t, int> seen;
    for (auto id : u) seen[id] = 1;
    m.uauc_excluded = seen.size();
  }
  return m;
}

nlohmann::json MetricsReport::to_json() const {
  return {{"dataset", dataset},
          {"variant", variant},
          {"all", slice_json(all)},
          {"warm", slice_json(warm)},
          {"cold", slice_json(cold)}};
}

std::string MetricsReport::table() const {
  auto cell = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string("n/a"); };
  std::ostringstream os;
  os << "dataset: " << dataset << "  variant: " << variant << "\n";
  os << std::left << std::setw(6) << "slice" << std::right << std::setw(8) << "count" << std::setw(8) << "pos"
     << std::setw(9) << "AUC" << std::setw(9) << "UAUC" << std::setw(7) << "users" << "\n";
  const std::pair<const char*, const SliceMetrics*> rows[] = {{"all", &all}, {"warm", &warm}, {"cold", &cold}};
  for (const auto& [name, s] : rows) {
    os << std::left << std::setw(6) << name << std::right << std::setw(8) << s->count << std::setw(8)
       << s->positives << std::setw(9) << cell(s->auc) << std::setw(9) << cell(s->uauc) << std::setw(7)
       << s->uauc_users << "\n";
  }
  return os.str();
}

MetricsReport warm_cold_report(std::string dataset, std::string variant, std::span<const ScoredExample> examples) {
  MetricsReport r;
  r.dataset = std::move(dataset);
  r.variant = std::move(variant);
  std::vector<ScoredExample> warm;
  std::vector<ScoredExample> cold;
  for (const auto& e : examples) (e.cold ? cold : warm).push_back(e);
  r.all = slice_metrics(examples);
  r.warm = slice_metrics(warm);
  r.cold = slice_metrics(cold);
  return r;
}

std::size_t cosine_bin(double c) {
  const double t = (std::clamp(c, -1.0, 1.0) + 1.0) / 2.0 * static_cast<double>(kCosineBins);
  return std::min(kCosineBins - 1, static_cast<std::size_t>(t));
}

std::string CosineReport::csv() const {
  std::ostringstream os;
  os << "bin_lo,bin_hi,count\n";
  const double w = 2.0 / static_cast<double>(kCosineBins);
  for (std::size_t b = 0; b < histogram.size(); ++b) {
    os << fmt(-1.0 + w * static_cast<double>(b), 2) << "," << fmt(-1.0 + w * static_cast<double>(b + 1), 2) << ","
       << histogram[b] << "\n";
  }
  return os.str();
}

nlohmann::json CosineReport::summary() const {
  return {{"items", cosines.size()}, {"skipped", skipped}, {"mean", mean}, {"median", median}};
}

CosineReport cosine_report(const CollabModel& collab, const ProjCtoL& proj, const SemanticBank& bank) {
  if (collab.num_items() != bank.size()) throw ContractViolation("cosine_report: collab and bank item counts differ");
  if (proj.in_dim() != collab.dim() || proj.out_dim() != bank.dim()) {
    throw ContractViolation("cosine_report: projection does not match the tables");
  }
  const Tensor projected = proj.apply(collab.items.value);
  CosineReport r;
  r.histogram.assign(kCosineBins, 0);
  for (std::size_t i = 0; i < bank.size(); ++i) {
    auto a = projected.row_span(i);
    auto b = bank.row(i);
    const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
    const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
    if (na == 0.0 || nb == 0.0) {
      ++r.skipped;
      continue;
    }
    const double c = std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / (na * nb);
    r.cosines.push_back(c);
    ++r.histogram[cosine_bin(c)];
  }
  if (!r.cosines.empty()) {
    r.mean = std::accumulate(r.cosines.begin(), r.cosines.end(), 0.0) / static_cast<double>(r.cosines.size());
    std::vector<double> sorted = r.cosines;
    std::sort(sorted.begin(), sorted.end());
    const std::size_t n = sorted.size();
    r.median = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  }
  return r;
}

void embedding_export(const SemanticBank& bank, const CollabModel& collab, const ProjCtoL& proj,
                      const std::filesystem::path& path) {
  if (collab.num_items() != bank.size()) throw ContractViolation("embedding_export: item counts differ");
  const Tensor projected = proj.apply(collab.items.value);
  std::ostringstream os;
  os << "item_id,source";
  for (std::size_t c = 0; c < bank.dim(); ++c) os << ",v" << c;
  os << "\n";
  auto emit = [&](std::int64_t id, const char* source, std::span<const double> v) {
    os << id << "," << source;
    for (double x : v) os << "," << full(x);
    os << "\n";
  };
  for (std::size_t i = 0; i < bank.size(); ++i) emit(bank.item_ids[i], "collab-projected", projected.row_span(i));
  for (std::size_t i = 0; i < bank.size(); ++i) emit(bank.item_ids[i], "semantic", bank.row(i));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << os.str();
  if (!f) throw Error("write failed for " + path.string());
}

std::string attention_csv(const std::map<std::size_t, Tensor>& per_layer, std::span<const std::string> labels) {
  std::ostringstream os;
  os << "layer,row,row_token";
  for (const auto& l : labels) os << "," << csv_field(l);
  os << "\n";
  for (const auto& [layer, m] : per_layer) {
    if (m.rows() != labels.size() || m.cols() != labels.size()) {
      throw ContractViolation("attention_csv: matrix shape does not match the token labels");
    }
    for (std::size_t r = 0; r < m.rows(); ++r) {
      os << layer << "," << r << "," << csv_field(labels[r]);
      for (std::size_t c = 0; c < m.cols(); ++c) os << "," << full(m(r, c));
      os << "\n";
    }
  }
  return os.str();
}

}  // namespace sella
