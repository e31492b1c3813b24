#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "coapt/errors.hpp"

namespace coapt {

using TokenId = std::uint32_t;
using TokenSequence = std::vector<TokenId>;

inline constexpr TokenId kSosId = 0;
inline constexpr TokenId kEosId = 1;
inline constexpr TokenId kUnkId = 2;
inline constexpr TokenId kFirstWordId = 3;

/// Lowercase, trim, collapse internal whitespace runs to a single space.
inline std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (unsigned char ch : text) {
    if (std::isspace(ch)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(ch)));
  }
  return out;
}

/// Normalized word pieces: split on spaces and hyphens, empties dropped.
inline std::vector<std::string> word_pieces(std::string_view text) {
  std::vector<std::string> pieces;
  std::string cur;
  for (char ch : normalize_text(text)) {
    if (ch == ' ' || ch == '-') {
      if (!cur.empty()) pieces.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) pieces.push_back(std::move(cur));
  return pieces;
}

enum class UnknownPolicy { error, unk };

/// Word-level vocabulary with reserved ids 0 = <sos>, 1 = <eos>, 2 = <unk>.
class Vocabulary {
 public:
  Vocabulary() : id_to_word_{"<sos>", "<eos>", "<unk>"} {}

  std::size_t size() const { return id_to_word_.size(); }

  bool contains(const std::string& word) const { return word_to_id_.count(word) != 0; }

  TokenId id(const std::string& word) const {
    auto it = word_to_id_.find(word);
    if (it == word_to_id_.end()) throw UnknownWordError(word);
    return it->second;
  }

  const std::string& word(TokenId id) const {
    if (id >= id_to_word_.size())
      throw IntegrityError("token id " + std::to_string(id) + " is not assigned (vocabulary size " +
                           std::to_string(size()) + ")");
    return id_to_word_[id];
  }

  /// Words (non-reserved) in id order.
  std::vector<std::string> words() const { return {id_to_word_.begin() + kFirstWordId, id_to_word_.end()}; }

  /// `<id>\t<word>` per line, ascending ids, reserved entries included.
  std::string dump() const {
    std::ostringstream os;
    for (std::size_t i = 0; i < id_to_word_.size(); ++i) os << i << '\t' << id_to_word_[i] << '\n';
    return os.str();
  }

  static Vocabulary parse(std::string_view text) {
    Vocabulary v;
    v.id_to_word_.clear();
    std::istringstream is{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos) throw FormatError("vocabulary line " + std::to_string(lineno) + " has no tab");
      std::size_t id = 0;
      try {
        id = std::stoul(line.substr(0, tab));
      } catch (const std::exception&) {
        throw FormatError("vocabulary line " + std::to_string(lineno) + " has a bad id");
      }
      if (id != v.id_to_word_.size())
        throw FormatError("vocabulary ids must be dense and sorted; line " + std::to_string(lineno));
      v.id_to_word_.push_back(line.substr(tab + 1));
    }
    if (v.id_to_word_.size() < kFirstWordId || v.id_to_word_[kSosId] != "<sos>" ||
        v.id_to_word_[kEosId] != "<eos>" || v.id_to_word_[kUnkId] != "<unk>")
      throw FormatError("vocabulary is missing reserved entries");
    for (std::size_t i = kFirstWordId; i < v.id_to_word_.size(); ++i) {
      if (!v.word_to_id_.emplace(v.id_to_word_[i], static_cast<TokenId>(i)).second)
        throw FormatError("duplicate vocabulary word '" + v.id_to_word_[i] + "'");
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write vocabulary to " + path);
    out << dump();
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read vocabulary from " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.id_to_word_ == b.id_to_word_; }

 private:
  friend Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpora);
  std::map<std::string, TokenId> word_to_id_;
  std::vector<std::string> id_to_word_;
};

/// Collects the normalized word pieces of every entry, sorts them and assigns
/// ids from 3 upward.
inline Vocabulary build_vocab(const std::vector<std::vector<std::string>>& corpora) {
  std::set<std::string> pieces;
  bool any = false;
  for (const auto& corpus : corpora)
    for (const auto& entry : corpus) {
      any = true;
      auto ps = word_pieces(entry);
      if (ps.empty()) throw ConfigError("empty word in corpus (\"" + entry + "\")");
      pieces.insert(ps.begin(), ps.end());
    }
  if (!any) throw ConfigError("cannot build a vocabulary from empty corpora");
  Vocabulary v;
  for (const auto& p : pieces) {
    v.word_to_id_.emplace(p, static_cast<TokenId>(v.id_to_word_.size()));
    v.id_to_word_.push_back(p);
  }
  return v;
}

inline TokenSequence encode(std::string_view text, const Vocabulary& v,
                            UnknownPolicy on_unknown = UnknownPolicy::error) {
  TokenSequence seq;
  for (const auto& piece : word_pieces(text)) {
    if (v.contains(piece)) {
      seq.push_back(v.id(piece));
    } else if (on_unknown == UnknownPolicy::unk) {
      seq.push_back(kUnkId);
    } else {
      throw UnknownWordError(piece);
    }
  }
  return seq;
}

inline std::string decode(const TokenSequence& seq, const Vocabulary& v) {
  std::string out;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (i) out.push_back(' ');
    out += v.word(seq[i]);
  }
  return out;
}

}  // namespace coapt
