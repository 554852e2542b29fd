#pragma once

// Symbol-level vocabulary for the toy domain. Three blocks:
//   [0, n_specials)           control tokens
//   [n_specials, ...)         single characters
//   [..., size)               template segments registered as single symbols
// encode() is a longest-match left-to-right scan, so template text costs one
// token per segment while problem/solution content encodes per character.

#include <algorithm>
#include <array>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dail/common.hpp"

namespace dail {

using TokenId = int;

struct SpecialTokens {
  TokenId bos = 0;
  TokenId eos = 1;
  TokenId think_open = 2;
  TokenId think_close = 3;
  TokenId sep = 4;
  TokenId boxed_open = 5;
  TokenId boxed_close = 6;
};

class Vocabulary {
 public:
  static constexpr int kNumSpecials = 7;

  static const std::vector<std::string>& special_texts() {
    static const std::vector<std::string> texts = {
        "<bos>", "<eos>", "<think>", "</think>", "<sep>", "\\boxed{", "}"};
    return texts;
  }

  static std::string default_charset() {
    std::string cs;
    for (char c = '0'; c <= '9'; ++c) cs.push_back(c);
    for (char c = 'a'; c <= 'z'; ++c) cs.push_back(c);
    for (char c = 'A'; c <= 'Z'; ++c) cs.push_back(c);
    cs += " \n+-*=;.,:$%^_{()[]<>/\\?#!'&|~@";
    return cs;
  }

  // segments: multi-character symbols (template chunks). Deduplicated and
  // sorted so the id assignment is deterministic.
  static Vocabulary build(const std::vector<std::string>& segments,
                          const std::string& charset = default_charset()) {
    std::vector<std::string> symbols = special_texts();
    std::set<char> seen;
    for (char c : charset) {
      if (!seen.insert(c).second) continue;
      symbols.emplace_back(1, c);
    }
    std::set<std::string> uniq(segments.begin(), segments.end());
    for (const auto& seg : uniq) {
      if (seg.empty()) continue;
      if (std::find(symbols.begin(), symbols.end(), seg) == symbols.end())
        symbols.push_back(seg);
    }
    return from_symbols(std::move(symbols));
  }

  static Vocabulary from_symbols(std::vector<std::string> symbols) {
    Vocabulary v;
    v.symbols_ = std::move(symbols);
    if (v.symbols_.size() < kNumSpecials)
      throw std::invalid_argument("vocabulary missing special tokens");
    for (int i = 0; i < kNumSpecials; ++i) {
      if (v.symbols_[static_cast<size_t>(i)] != special_texts()[static_cast<size_t>(i)])
        throw std::invalid_argument("vocabulary special block mismatch at id " +
                                    std::to_string(i));
    }
    std::set<std::string> uniq;
    for (size_t i = 0; i < v.symbols_.size(); ++i) {
      const auto& s = v.symbols_[i];
      if (s.empty()) throw std::invalid_argument("empty vocabulary symbol");
      if (!uniq.insert(s).second)
        throw std::invalid_argument("duplicate vocabulary symbol: " + s);
      v.by_first_[static_cast<unsigned char>(s[0])].push_back(static_cast<TokenId>(i));
    }
    // Longest first so the scanner's first hit is the longest match; ties are
    // impossible (symbols are unique strings).
    for (auto& bucket : v.by_first_) {
      std::sort(bucket.begin(), bucket.end(), [&](TokenId a, TokenId b) {
        const auto& sa = v.symbols_[static_cast<size_t>(a)];
        const auto& sb = v.symbols_[static_cast<size_t>(b)];
        if (sa.size() != sb.size()) return sa.size() > sb.size();
        return a < b;
      });
    }
    return v;
  }

  int size() const { return static_cast<int>(symbols_.size()); }
  const SpecialTokens& specials() const { return specials_; }

  const std::string& symbol(TokenId id) const {
    if (id < 0 || id >= size())
      throw std::out_of_range("token id out of range: " + std::to_string(id));
    return symbols_[static_cast<size_t>(id)];
  }

  const std::vector<std::string>& symbols() const { return symbols_; }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> out;
    out.reserve(text.size() / 2 + 4);
    size_t pos = 0;
    while (pos < text.size()) {
      const auto& bucket = by_first_[static_cast<unsigned char>(text[pos])];
      TokenId hit = -1;
      for (TokenId id : bucket) {
        const auto& sym = symbols_[static_cast<size_t>(id)];
        if (text.compare(pos, sym.size(), sym) == 0) {
          hit = id;
          break;
        }
      }
      if (hit < 0)
        throw std::invalid_argument("unencodable byte at offset " +
                                    std::to_string(pos) + ": '" +
                                    std::string(1, text[pos]) + "'");
      out.push_back(hit);
      pos += symbols_[static_cast<size_t>(hit)].size();
    }
    return out;
  }

  std::string decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) out += symbol(id);
    return out;
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& s : symbols_) {
      h = fnv1a64(s, h);
      h = fnv1a64("\x1f", h);
    }
    return h;
  }

 private:
  std::vector<std::string> symbols_;
  SpecialTokens specials_;
  std::array<std::vector<TokenId>, 256> by_first_;
};

}  // namespace dail
