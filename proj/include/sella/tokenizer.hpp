// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace sella {

using TokenId = std::size_t;

// Reserved ids are fixed; every vocabulary starts with them in this order.
namespace tokens {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kYes = 2;
inline constexpr TokenId kNo = 3;
inline constexpr TokenId kUserId = 4;
inline constexpr TokenId kItemId = 5;
inline constexpr TokenId kWarmId = 6;
inline constexpr std::size_t kReservedCount = 7;
}  // namespace tokens

// Word-level tokenizer: whitespace separates words and each punctuation
// character is its own token. Reserved token literals ("[YES]", "<Item_ID>",
// ...) are matched whole.
class Tokenizer {
 public:
  Tokenizer();

  // Ids are assigned by first occurrence over the corpus.
  static Tokenizer build(std::span<const std::string> corpus);

  static std::vector<std::string> split_words(std::string_view text);

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids) const;

  TokenId id(std::string_view token) const;
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }
  std::size_t size() const { return vocab_.size(); }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

 private:
  void add(const std::string& token);

  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace sella
