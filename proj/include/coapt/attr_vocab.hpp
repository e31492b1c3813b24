#pragma once

#include <algorithm>
#include <cstddef>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "coapt/tokenizer.hpp"

namespace coapt {

/// Per-class attribute word sets: K ordered lists of at most N words each.
struct AttributeVocab {
  std::string dataset;
  std::string generator;
  std::size_t num_words = 0;  // N
  std::size_t num_sets = 0;   // K
  std::map<std::string, std::vector<std::vector<std::string>>> classes;
  std::vector<std::string> warnings;

  bool has_class(const std::string& name) const { return classes.count(normalize_text(name)) > 0; }

  std::vector<std::string> class_names() const {
    std::vector<std::string> out;
    for (const auto& [name, sets] : classes) out.push_back(name);
    return out;
  }

  const std::vector<std::vector<std::string>>& sets_of(const std::string& class_name) const {
    auto it = classes.find(normalize_text(class_name));
    if (it == classes.end()) throw LookupError("class \"" + class_name + "\" is not in the attribute vocabulary");
    return it->second;
  }
};

/// Normalizes words, drops duplicates inside each set and checks the K/N
/// structure. Warnings are appended to `v.warnings`.
inline void validate_vocab(AttributeVocab& v) {
  if (v.num_sets == 0) throw FormatError("field \"num_sets\" must be at least 1");
  if (v.classes.empty()) throw FormatError("field \"classes\" is empty");
  std::map<std::string, std::vector<std::vector<std::string>>> normalized;
  for (auto& [raw_name, sets] : v.classes) {
    const std::string name = normalize_text(raw_name);
    if (name.empty()) throw FormatError("field \"classes\" has an empty class name");
    if (normalized.count(name)) throw FormatError("class \"" + name + "\" appears twice after normalization");
    if (sets.size() != v.num_sets)
      throw IntegrityError("class \"" + name + "\" has " + std::to_string(sets.size()) + " attribute sets, expected " +
                           std::to_string(v.num_sets));
    std::vector<std::vector<std::string>> clean;
    for (std::size_t k = 0; k < sets.size(); ++k) {
      std::vector<std::string> out;
      for (const auto& w : sets[k]) {
        std::string word = normalize_text(w);
        if (word.empty())
          throw FormatError("class \"" + name + "\" set " + std::to_string(k) + " contains an empty word");
        if (std::find(out.begin(), out.end(), word) != out.end()) {
          v.warnings.push_back("class \"" + name + "\" set " + std::to_string(k) + ": dropped duplicate \"" + word +
                               "\"");
          continue;
        }
        out.push_back(std::move(word));
      }
      if (v.num_words && out.size() > v.num_words)
        throw FormatError("class \"" + name + "\" set " + std::to_string(k) + " has " + std::to_string(out.size()) +
                          " words, more than num_words = " + std::to_string(v.num_words));
      if (out.size() < v.num_words)
        v.warnings.push_back("class \"" + name + "\" set " + std::to_string(k) + " has only " +
                             std::to_string(out.size()) + " of " + std::to_string(v.num_words) + " words");
      clean.push_back(std::move(out));
    }
    normalized.emplace(name, std::move(clean));
  }
  v.classes = std::move(normalized);
}

inline AttributeVocab parse_vocab(const std::string& text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("vocabulary is not valid JSON: ") + e.what(), e.byte);
  }
  if (!doc.is_object()) throw FormatError("vocabulary root must be an object");
  auto field = [&](const char* name) -> const json& {
    if (!doc.contains(name)) throw FormatError(std::string("missing field \"") + name + "\"");
    return doc.at(name);
  };
  AttributeVocab v;
  const auto& dataset = field("dataset");
  const auto& generator = field("generator");
  const auto& num_words = field("num_words");
  const auto& num_sets = field("num_sets");
  const auto& classes = field("classes");
  if (!dataset.is_string()) throw FormatError("field \"dataset\" must be a string");
  if (!generator.is_string()) throw FormatError("field \"generator\" must be a string");
  if (!num_words.is_number_unsigned()) throw FormatError("field \"num_words\" must be a non-negative integer");
  if (!num_sets.is_number_unsigned()) throw FormatError("field \"num_sets\" must be a non-negative integer");
  if (!classes.is_object()) throw FormatError("field \"classes\" must be an object");
  v.dataset = dataset.get<std::string>();
  v.generator = generator.get<std::string>();
  v.num_words = num_words.get<std::size_t>();
  v.num_sets = num_sets.get<std::size_t>();
  for (const auto& [name, sets] : classes.items()) {
    if (!sets.is_array()) throw FormatError("field \"classes\" entry \"" + name + "\" must be a list of word lists");
    std::vector<std::vector<std::string>> lists;
    for (const auto& set : sets) {
      if (!set.is_array()) throw FormatError("field \"classes\" entry \"" + name + "\" must be a list of word lists");
      std::vector<std::string> words;
      for (const auto& w : set) {
        if (!w.is_string()) throw FormatError("field \"classes\" entry \"" + name + "\" has a non-string word");
        words.push_back(w.get<std::string>());
      }
      lists.push_back(std::move(words));
    }
    v.classes[name] = std::move(lists);
  }
  validate_vocab(v);
  return v;
}

inline AttributeVocab load_vocab(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open vocabulary file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_vocab(ss.str());
}

inline std::string serialize_vocab(const AttributeVocab& v) {
  nlohmann::ordered_json doc;
  doc["dataset"] = v.dataset;
  doc["generator"] = v.generator;
  doc["num_words"] = v.num_words;
  doc["num_sets"] = v.num_sets;
  doc["classes"] = nlohmann::ordered_json::object();
  for (const auto& [name, sets] : v.classes) doc["classes"][name] = sets;
  return doc.dump(2) + "\n";
}

inline void save_vocab(const AttributeVocab& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write vocabulary file " + path);
  out << serialize_vocab(v);
}

/// Set 0 is the fixed training vocabulary.
inline const std::vector<std::string>& training_set(const AttributeVocab& v, const std::string& class_name) {
  return v.sets_of(class_name).front();
}

inline const std::vector<std::vector<std::string>>& inference_sets(const AttributeVocab& v,
                                                                   const std::string& class_name) {
  return v.sets_of(class_name);
}

/// Longest whole-word prefix of set `k` such that
/// SOS + M soft + class tokens + attribute tokens + EOS fits in `ctx_len`.
inline std::vector<std::string> fit_to_budget(const AttributeVocab& v, const std::string& class_name, std::size_t k,
                                              std::size_t soft_count, std::size_t class_token_count,
                                              std::size_t ctx_len, const Vocabulary& tokenizer,
                                              UnknownPolicy policy = UnknownPolicy::error) {
  const auto& sets = v.sets_of(class_name);
  if (k >= sets.size())
    throw LookupError("attribute set " + std::to_string(k) + " does not exist for \"" + class_name + "\" (K = " +
                      std::to_string(sets.size()) + ")");
  const std::size_t fixed = 2 + soft_count + class_token_count;
  if (fixed > ctx_len)
    throw OverflowError("class \"" + class_name + "\" does not fit in " + std::to_string(ctx_len) +
                            " slots even without attributes",
                        fixed - ctx_len);
  std::size_t budget = ctx_len - fixed;
  std::vector<std::string> out;
  for (const auto& w : sets[k]) {
    const std::size_t cost = encode(w, tokenizer, policy).size();
    if (cost > budget) break;
    budget -= cost;
    out.push_back(w);
  }
  return out;
}

}  // namespace coapt
