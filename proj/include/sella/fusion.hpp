// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "sella/autograd.hpp"
#include "sella/collab.hpp"
#include "sella/distill.hpp"
#include "sella/minilm.hpp"
#include "sella/tokenizer.hpp"

namespace sella {

// Square map applied to semantic item vectors before they fill the warm
// placeholder. No bias.
class ProjWtoL {
 public:
  ProjWtoL() = default;
  ProjWtoL(std::size_t d_l, std::uint64_t seed);

  std::size_t dim() const { return w.value.rows(); }

  NodeId apply(Graph& g, NodeId x) const { return g.matmul(x, g.parameter(w)); }
  Tensor apply(const Tensor& x) const;

  ParamGroup group() { return {"proj_w2l", {&w}}; }

  void save(const std::filesystem::path& path) const;
  static ProjWtoL load(const std::filesystem::path& path);

  Parameter w{"proj_w2l.w", {}, false};
};

// Token ids of a recommendation prompt and where each placeholder sits.
struct FusionPrompt {
  std::vector<TokenId> ids;
  std::optional<std::size_t> user_pos;
  std::optional<std::size_t> item_pos;
  std::optional<std::size_t> warm_pos;

  // Throws ContractViolation if a placeholder occurs more than once.
  static FusionPrompt locate(std::vector<TokenId> ids);
  std::size_t placeholder_count() const;
};

struct ProjectedTokens {
  NodeId user;
  NodeId item;
  NodeId warm;
};

// user = proj_c(e_user), item = proj_c(e_item), warm = proj_w(e_semantic).
// The collaborative pair shares one projection.
ProjectedTokens project_tokens(Graph& g, NodeId collab_user, NodeId collab_item, NodeId semantic_item,
                               const ProjCtoL& proj_c, const ProjWtoL& proj_w);

struct ProjectedValues {
  Tensor user;
  Tensor item;
  Tensor warm;
};
ProjectedValues project_tokens(const Tensor& collab_user, const Tensor& collab_item, const Tensor& semantic_item,
                               const ProjCtoL& proj_c, const ProjWtoL& proj_w);

// Replaces rows of the plain lookup at `positions` with `rows` (one row
// each). Positions must be distinct and in range.
NodeId inject(Graph& g, NodeId plain, std::span<const NodeId> rows, std::span<const std::size_t> positions);

// Plain BCE on the fused probability.
inline NodeId stage3_loss(Graph& g, NodeId p, int label) { return bce(g, p, label); }
inline double stage3_loss(double p, int label) { return bce(p, label); }

// Everything a fused forward pass reads. The language model is frozen.
struct FusionParts {
  const MiniLM* lm = nullptr;
  const CollabModel* collab = nullptr;
  const ProjCtoL* proj_c = nullptr;
  const ProjWtoL* proj_w = nullptr;
  const SemanticBank* bank = nullptr;
};

// Final-layer input embeddings for `prompt` with every present placeholder
// replaced, before positions are added.
NodeId fused_embeddings(Graph& g, const FusionParts& parts, const FusionPrompt& prompt, std::size_t user_row,
                        std::size_t item_row);

// Yes probability of the fused forward pass (adapters on).
NodeId fused_probability(Graph& g, const FusionParts& parts, const FusionPrompt& prompt, std::size_t user_row,
                         std::size_t item_row, AttentionCapture* capture = nullptr);

double fused_score(const FusionParts& parts, const FusionPrompt& prompt, std::size_t user_row, std::size_t item_row);

}  // namespace sella
