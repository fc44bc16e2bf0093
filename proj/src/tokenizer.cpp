// SPDX-License-Identifier: Apache-2.0
#include "sella/tokenizer.hpp"

#include <cctype>
#include <sstream>

#include "sella/errors.hpp"
#include "sella/util.hpp"

namespace sella {
namespace {

constexpr std::array<const char*, tokens::kReservedCount> kReserved = {
    "<pad>", "<unk>", "[YES]", "[NO]", "<User_ID>", "<Item_ID>", "<Warm_ID>"};

bool is_reserved_literal(std::string_view w) {
  for (const char* r : kReserved) {
    if (w == r) return true;
  }
  return false;
}

}  // namespace

Tokenizer::Tokenizer() {
  for (const char* r : kReserved) add(r);
}

void Tokenizer::add(const std::string& token) {
  if (index_.contains(token)) return;
  index_.emplace(token, vocab_.size());
  vocab_.push_back(token);
}

std::vector<std::string> Tokenizer::split_words(std::string_view text) {
  std::vector<std::string> out;
  for (const std::string& chunk : split_whitespace(text)) {
    if (is_reserved_literal(chunk)) {
      out.push_back(chunk);
      continue;
    }
    std::string word;
    for (char c : chunk) {
      if (std::ispunct(static_cast<unsigned char>(c))) {
        if (!word.empty()) out.push_back(std::move(word));
        word.clear();
        out.emplace_back(1, c);
      } else {
        word += c;
      }
    }
    if (!word.empty()) out.push_back(std::move(word));
  }
  return out;
}

Tokenizer Tokenizer::build(std::span<const std::string> corpus) {
  Tokenizer t;
  for (const std::string& text : corpus) {
    for (const std::string& w : split_words(text)) t.add(w);
  }
  return t;
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const std::string& w : split_words(text)) {
    auto it = index_.find(w);
    ids.push_back(it == index_.end() ? tokens::kUnk : it->second);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    if (k) out += ' ';
    out += token(ids[k]);
  }
  return out;
}

TokenId Tokenizer::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? tokens::kUnk : it->second;
}

const std::string& Tokenizer::token(TokenId id) const {
  if (id >= vocab_.size()) throw LookupError("tokenizer: id " + std::to_string(id) + " out of range");
  return vocab_[id];
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::string s;
  for (const auto& t : vocab_) s += t + "\n";
  write_file(path, s);
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::istringstream is(read_file(path));
  std::string line;
  Tokenizer t;
  t.vocab_.clear();
  t.index_.clear();
  while (std::getline(is, line)) t.add(line);
  for (std::size_t k = 0; k < kReserved.size(); ++k) {
    if (k >= t.vocab_.size() || t.vocab_[k] != kReserved[k]) {
      throw DataError("vocabulary " + path.string() + " does not start with the reserved tokens");
    }
  }
  return t;
}

}  // namespace sella
