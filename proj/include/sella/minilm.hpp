// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "sella/autograd.hpp"
#include "sella/parameter.hpp"
#include "sella/tokenizer.hpp"

namespace sella {

struct LmConfig {
  std::size_t d_model = 128;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_len = 256;
  std::size_t ffn_mult = 4;
  std::size_t lora_rank = 8;
  double lora_alpha = 16.0;
  std::uint64_t seed = 1;

  nlohmann::json to_json() const;
  static LmConfig from_json(const nlohmann::json& j);
};

// Low-rank adapter on one weight matrix W [in, out]. `down` is A^T [in, r]
// and `up` is B^T [r, out], so the adapted product is x W + (alpha/r) x A^T B^T.
struct LoraPair {
  Parameter* down = nullptr;
  Parameter* up = nullptr;
};

// Head-averaged attention weights captured during a forward pass.
struct AttentionCapture {
  std::vector<std::size_t> layers;
  std::map<std::size_t, Tensor> averaged;
};

// Pre-norm decoder-only transformer with learned absolute positions and an
// output head tied to the token embedding table.
class MiniLM {
 public:
  MiniLM(const LmConfig& cfg, std::size_t vocab_size);
  MiniLM(const MiniLM&) = delete;
  MiniLM& operator=(const MiniLM&) = delete;
  MiniLM(MiniLM&&) = default;
  MiniLM& operator=(MiniLM&&) = default;

  const LmConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }

  const ParamGroup& backbone() const { return backbone_; }
  const ParamGroup& lora() const { return lora_; }
  const Parameter& token_embeddings() const { return *tok_emb_; }

  // Plain lookup E^L(P): [len, d_model], no positions.
  NodeId embed_tokens(Graph& g, std::span<const TokenId> ids) const;

  // Adds positions to `embeddings` [len, d_model] and runs every block and
  // the final norm. Returns the last-layer hidden states [len, d_model].
  NodeId hidden_states(Graph& g, NodeId embeddings, bool lora_enabled, AttentionCapture* capture = nullptr) const;

  // Full vocabulary logits for every row of `hidden`.
  NodeId logits(Graph& g, NodeId hidden) const;

  // The two-way Yes/No probability at the last position as a graph node.
  NodeId yes_probability(Graph& g, NodeId hidden) const;

  // Convenience forward over concrete embeddings: [len, d_model] -> [len, |V|].
  Tensor forward(const Tensor& embeddings, bool lora_enabled) const;

  // Yes probability for a token sequence.
  double score(std::span<const TokenId> ids, bool lora_enabled) const;

  void save(const std::filesystem::path& dir) const;
  static MiniLM load(const std::filesystem::path& dir);

 private:
  struct Block {
    Parameter *ln1_g, *ln1_b;
    Parameter *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
    Parameter *ln2_g, *ln2_b;
    Parameter *w1, *b1, *w2, *b2;
    LoraPair lq, lk, lv, lo, l1, l2;
  };

  Parameter* make(std::string name, Tensor value, ParamGroup& group);
  NodeId linear(Graph& g, NodeId x, const Parameter* w, const Parameter* b, const LoraPair& lora,
                bool lora_enabled) const;

  LmConfig cfg_;
  std::size_t vocab_size_;
  std::vector<std::unique_ptr<Parameter>> storage_;
  ParamGroup backbone_{"backbone", {}};
  ParamGroup lora_{"lora", {}};
  Parameter* tok_emb_ = nullptr;
  Parameter* pos_emb_ = nullptr;
  Parameter* lnf_g_ = nullptr;
  Parameter* lnf_b_ = nullptr;
  std::vector<Block> blocks_;
};

// exp(l_yes) / (exp(l_yes) + exp(l_no)), computed without overflow.
double yes_no_probability(std::span<const double> logits_row);

inline constexpr double kProbClamp = 1e-12;

// Binary cross-entropy with the probability clamped to [1e-12, 1 - 1e-12].
double bce(double p, int label);
NodeId bce(Graph& g, NodeId p, int label);

// One user-history entry for prompt rendering.
struct HistoryEntry {
  std::string title;
  int label = 0;
};

// Which collaborative placeholders a recommendation prompt carries.
struct PromptSlots {
  bool user = false;
  bool item = false;
  bool warm = false;
};

// Recommendation prompt. With no slots this is the stage-1 prompt; the
// fused prompt differs only by the placeholder tokens. Only the `k` most
// recent history entries are used.
std::string render_rec_prompt(std::span<const HistoryEntry> history, std::string_view target_title,
                              const PromptSlots& slots, std::size_t k);

// Encodes the recommendation prompt, dropping the oldest history entries
// until it fits in `max_len` tokens.
std::vector<TokenId> build_rec_prompt(const Tokenizer& tok, std::span<const HistoryEntry> history,
                                      std::string_view target_title, const PromptSlots& slots, std::size_t k,
                                      std::size_t max_len);

inline std::vector<TokenId> build_sft_prompt(const Tokenizer& tok, std::span<const HistoryEntry> history,
                                             std::string_view target_title, std::size_t k, std::size_t max_len) {
  return build_rec_prompt(tok, history, target_title, PromptSlots{}, k, max_len);
}

// Template text fed to the tokenizer builder alongside item titles.
std::vector<std::string> template_corpus();

}  // namespace sella
