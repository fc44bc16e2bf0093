// SPDX-License-Identifier: Apache-2.0
#include "sella/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "sella/errors.hpp"

namespace sella {

ProjWtoL::ProjWtoL(std::size_t d_l, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(d_l)));
  w.value = Tensor::zeros(d_l, d_l);
  for (double& v : w.value.data()) v = normal(rng);
}

Tensor ProjWtoL::apply(const Tensor& x) const {
  Graph g;
  return g.value(apply(g, g.constant(x)));
}

void ProjWtoL::save(const std::filesystem::path& path) const { save_tensor(path, w.value); }

ProjWtoL ProjWtoL::load(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw PrerequisiteError("no warm projection at " + path.string());
  ProjWtoL p;
  p.w.value = load_tensor(path);
  return p;
}

FusionPrompt FusionPrompt::locate(std::vector<TokenId> ids) {
  FusionPrompt fp;
  for (std::size_t t = 0; t < ids.size(); ++t) {
    std::optional<std::size_t>* slot = nullptr;
    const char* name = nullptr;
    if (ids[t] == tokens::kUserId) slot = &fp.user_pos, name = "<User_ID>";
    if (ids[t] == tokens::kItemId) slot = &fp.item_pos, name = "<Item_ID>";
    if (ids[t] == tokens::kWarmId) slot = &fp.warm_pos, name = "<Warm_ID>";
    if (!slot) continue;
    if (slot->has_value()) throw ContractViolation(std::string("prompt contains ") + name + " more than once");
    *slot = t;
  }
  fp.ids = std::move(ids);
  return fp;
}

std::size_t FusionPrompt::placeholder_count() const {
  return static_cast<std::size_t>(user_pos.has_value()) + item_pos.has_value() + warm_pos.has_value();
}

ProjectedTokens project_tokens(Graph& g, NodeId collab_user, NodeId collab_item, NodeId semantic_item,
                               const ProjCtoL& proj_c, const ProjWtoL& proj_w) {
  const std::size_t dc = proj_c.in_dim();
  const std::size_t dl = proj_c.out_dim();
  if (g.value(collab_user).cols() != dc || g.value(collab_item).cols() != dc) {
    throw ContractViolation("project_tokens: collaborative vectors must have width " + std::to_string(dc));
  }
  if (g.value(semantic_item).cols() != dl || proj_w.dim() != dl) {
    throw ContractViolation("project_tokens: semantic vector and warm projection must have width " +
                            std::to_string(dl));
  }
  return {proj_c.apply(g, collab_user), proj_c.apply(g, collab_item), proj_w.apply(g, semantic_item)};
}

ProjectedValues project_tokens(const Tensor& collab_user, const Tensor& collab_item, const Tensor& semantic_item,
                               const ProjCtoL& proj_c, const ProjWtoL& proj_w) {
  Graph g;
  auto t = project_tokens(g, g.constant(collab_user), g.constant(collab_item), g.constant(semantic_item), proj_c,
                          proj_w);
  return {g.value(t.user), g.value(t.item), g.value(t.warm)};
}

NodeId inject(Graph& g, NodeId plain, std::span<const NodeId> rows, std::span<const std::size_t> positions) {
  if (rows.size() != positions.size()) throw ContractViolation("inject: rows and positions differ in count");
  if (rows.empty()) return plain;
  const std::size_t len = g.value(plain).rows();
  std::vector<std::size_t> sorted(positions.begin(), positions.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ContractViolation("inject: duplicate placeholder position");
  }
  if (sorted.back() >= len) {
    throw ContractViolation("inject: position " + std::to_string(sorted.back()) + " outside sequence of length " +
                            std::to_string(len));
  }
  NodeId block = rows.size() == 1 ? rows[0] : g.concat_rows(rows);
  return g.scatter_rows(plain, block, std::vector<std::size_t>(positions.begin(), positions.end()));
}

NodeId fused_embeddings(Graph& g, const FusionParts& parts, const FusionPrompt& prompt, std::size_t user_row,
                        std::size_t item_row) {
  NodeId plain = parts.lm->embed_tokens(g, prompt.ids);
  if (prompt.placeholder_count() == 0) return plain;
  std::vector<NodeId> rows;
  std::vector<std::size_t> positions;
  if (prompt.user_pos || prompt.item_pos) {
    if (user_row >= parts.collab->num_users() || item_row >= parts.collab->num_items()) {
      throw LookupError("fused forward: collaborative row out of range");
    }
  }
  if (prompt.user_pos) {
    NodeId u = g.embedding_lookup(g.parameter(parts.collab->users), {user_row});
    rows.push_back(parts.proj_c->apply(g, u));
    positions.push_back(*prompt.user_pos);
  }
  if (prompt.item_pos) {
    NodeId i = g.embedding_lookup(g.parameter(parts.collab->items), {item_row});
    rows.push_back(parts.proj_c->apply(g, i));
    positions.push_back(*prompt.item_pos);
  }
  if (prompt.warm_pos) {
    if (item_row >= parts.bank->size()) throw LookupError("fused forward: item row missing from the bank");
    NodeId s = g.embedding_lookup(g.parameter(parts.bank->vectors), {item_row});
    rows.push_back(parts.proj_w->apply(g, s));
    positions.push_back(*prompt.warm_pos);
  }
  return inject(g, plain, rows, positions);
}

NodeId fused_probability(Graph& g, const FusionParts& parts, const FusionPrompt& prompt, std::size_t user_row,
                         std::size_t item_row, AttentionCapture* capture) {
  NodeId e = fused_embeddings(g, parts, prompt, user_row, item_row);
  return parts.lm->yes_probability(g, parts.lm->hidden_states(g, e, true, capture));
}

double fused_score(const FusionParts& parts, const FusionPrompt& prompt, std::size_t user_row, std::size_t item_row) {
  Graph g;
  return g.value(fused_probability(g, parts, prompt, user_row, item_row)).item();
}

}  // namespace sella
