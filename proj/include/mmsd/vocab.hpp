#pragma once

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmsd/errors.hpp"

namespace mmsd {

// Token table with three reserved ids. Content ids are dense and assigned in
// first-seen order, so a vocabulary built from the same corpus in the same
// order is always identical.
class Vocab {
 public:
  static constexpr int pad_id = 0;
  static constexpr int cls_id = 1;
  static constexpr int unk_id = 2;
  static constexpr int reserved = 3;

  int add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    int id = static_cast<int>(tokens_.size()) + reserved;
    ids_.emplace(token, id);
    tokens_.push_back(token);
    return id;
  }

  int lookup(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? unk_id : it->second;
  }

  std::size_t size() const { return tokens_.size() + reserved; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  // Plain text, one token per line; line number == id - 3.
  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write vocabulary file " + path.string());
    for (const std::string& tok : tokens_) out << tok << '\n';
  }

  static Vocab load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot read vocabulary file " + path.string());
    Vocab v;
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) v.add(line);
    }
    return v;
  }

  static Vocab from_tokens(const std::vector<std::string>& tokens) {
    Vocab v;
    for (const std::string& tok : tokens) v.add(tok);
    return v;
  }

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;
};

// Lowercased alphanumeric runs; everything else is a separator.
inline std::vector<std::string> split_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct TokenSeq {
  std::vector<int> ids;            // length max_len, [CLS] first, [PAD] tail
  std::vector<std::uint8_t> mask;  // 1 for [CLS] and content tokens
};

// [CLS] + up to max_len-1 content ids, right-padded. Empty text is valid and
// produces [CLS] followed by padding.
inline TokenSeq tokenize(const std::string& text, const Vocab& vocab, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("tokenize requires max_len >= 2");
  TokenSeq seq;
  seq.ids.assign(max_len, Vocab::pad_id);
  seq.mask.assign(max_len, 0);
  seq.ids[0] = Vocab::cls_id;
  seq.mask[0] = 1;
  std::size_t pos = 1;
  for (const std::string& tok : split_tokens(text)) {
    if (pos >= max_len) break;
    seq.ids[pos] = vocab.lookup(tok);
    seq.mask[pos] = 1;
    ++pos;
  }
  return seq;
}

}  // namespace mmsd
