// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "sella/data.hpp"
#include "sella/minilm.hpp"
#include "sella/parameter.hpp"
#include "sella/tokenizer.hpp"

namespace sella {

enum class Provenance { kDistilled, kAligned };

std::string_view provenance_name(Provenance p);

// Per-item semantic vectors harvested from the fine-tuned language model.
// Row order follows the dataset's dense item index. The vectors live in a
// Parameter because later stages train them.
struct SemanticBank {
  Parameter vectors{"bank", {}, false};
  std::vector<std::int64_t> item_ids;
  Provenance provenance = Provenance::kDistilled;
  std::string source;

  std::size_t size() const { return item_ids.size(); }
  std::size_t dim() const { return vectors.value.cols(); }
  std::span<const double> row(std::size_t i) const { return vectors.value.row_span(i); }

  void save(const std::filesystem::path& dir) const;
  static SemanticBank load(const std::filesystem::path& dir);
};

// Number of prompt tokens around the title in the item prompt.
std::size_t item_prompt_overhead(const Tokenizer& tok);

// "item : <title> . this item is about". Titles that do not fit in max_len
// lose their leading tokens.
std::vector<TokenId> item_prompt(const Tokenizer& tok, std::string_view title, std::size_t max_len);

// Last-layer hidden state at the final prompt position, adapters enabled.
std::vector<double> distill_item(const MiniLM& lm, const Tokenizer& tok, std::string_view title);

// One vector per catalog item, including items absent from train.
SemanticBank distill_all(const MiniLM& lm, const Tokenizer& tok, const InteractionDataset& ds,
                         std::string source = {});

}  // namespace sella
