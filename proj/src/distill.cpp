// SPDX-License-Identifier: Apache-2.0
#include "sella/distill.hpp"

#include "sella/errors.hpp"
#include "sella/util.hpp"

namespace sella {
namespace {

constexpr std::string_view kItemPrefix = "item :";
constexpr std::string_view kItemSuffix = ". this item is about";

}  // namespace

std::string_view provenance_name(Provenance p) {
  return p == Provenance::kDistilled ? "distilled" : "aligned";
}

void SemanticBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_tensor(dir / "bank.tensor", vectors.value);
  nlohmann::json m;
  m["provenance"] = provenance_name(provenance);
  m["source"] = source;
  m["dim"] = dim();
  auto& idx = m["index"];
  idx = nlohmann::json::array();
  for (std::size_t r = 0; r < item_ids.size(); ++r) idx.push_back({{"item_id", item_ids[r]}, {"row", r}});
  write_file(dir / "bank.json", m.dump(2) + "\n");
}

SemanticBank SemanticBank::load(const std::filesystem::path& dir) {
  if (!std::filesystem::exists(dir / "bank.json")) throw PrerequisiteError("no semantic bank in " + dir.string());
  SemanticBank b;
  b.vectors.value = load_tensor(dir / "bank.tensor");
  auto m = nlohmann::json::parse(read_file(dir / "bank.json"));
  b.provenance = m.at("provenance") == "aligned" ? Provenance::kAligned : Provenance::kDistilled;
  b.source = m.at("source");
  for (const auto& e : m.at("index")) b.item_ids.push_back(e.at("item_id"));
  if (b.item_ids.size() != b.vectors.value.rows()) throw DataError("bank index does not match tensor rows");
  return b;
}

std::size_t item_prompt_overhead(const Tokenizer& tok) {
  return tok.encode(kItemPrefix).size() + tok.encode(kItemSuffix).size();
}

std::vector<TokenId> item_prompt(const Tokenizer& tok, std::string_view title, std::size_t max_len) {
  const std::size_t overhead = item_prompt_overhead(tok);
  if (max_len <= overhead) throw ContractViolation("item_prompt: max_len too small for the template");
  std::vector<TokenId> title_ids = tok.encode(title.empty() ? std::string_view("unknown") : title);
  const std::size_t budget = max_len - overhead;
  if (title_ids.size() > budget) {
    title_ids.erase(title_ids.begin(), title_ids.end() - static_cast<std::ptrdiff_t>(budget));
  }
  std::vector<TokenId> ids = tok.encode(kItemPrefix);
  ids.insert(ids.end(), title_ids.begin(), title_ids.end());
  auto suffix = tok.encode(kItemSuffix);
  ids.insert(ids.end(), suffix.begin(), suffix.end());
  return ids;
}

std::vector<double> distill_item(const MiniLM& lm, const Tokenizer& tok, std::string_view title) {
  const auto ids = item_prompt(tok, title, lm.config().max_len);
  Graph g;
  const Tensor& h = g.value(lm.hidden_states(g, lm.embed_tokens(g, ids), true));
  auto last = h.row_span(h.rows() - 1);
  return {last.begin(), last.end()};
}

SemanticBank distill_all(const MiniLM& lm, const Tokenizer& tok, const InteractionDataset& ds, std::string source) {
  SemanticBank bank;
  bank.source = std::move(source);
  bank.provenance = Provenance::kDistilled;
  const std::size_t n = ds.num_items();
  const std::size_t d = lm.config().d_model;
  bank.vectors.value = Tensor::zeros(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    const std::int64_t id = ds.item_id_at(r);
    const auto v = distill_item(lm, tok, ds.items.at(id));
    std::copy(v.begin(), v.end(), bank.vectors.value.row_span(r).begin());
    bank.item_ids.push_back(id);
  }
  return bank;
}

}  // namespace sella
