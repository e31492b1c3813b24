#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "coapt/ops.hpp"
#include "coapt/rng.hpp"
#include "coapt/tokenizer.hpp"

namespace coapt {

/// Frozen word-embedding table together with the vocabulary that indexes it.
class TokenTable {
 public:
  TokenTable() = default;

  TokenTable(Vocabulary vocab, Tensor rows) : vocab_(std::move(vocab)), rows_(std::move(rows)) {
    if (rows_.rank() != 2 || rows_.rows() != vocab_.size())
      throw DimensionError("token table has " + shape_str(rows_.shape()) + " rows for a vocabulary of " +
                           std::to_string(vocab_.size()));
    rows_.freeze();
  }

  /// Rows drawn from N(0, 1/d) for every id; entries in `fixed` (keyed by
  /// normalized word) replace the drawn row.
  static TokenTable build(Vocabulary vocab, std::size_t dim, std::uint64_t seed,
                          const std::map<std::string, std::vector<double>>& fixed = {}) {
    if (dim == 0) throw ParameterError("token table dimension must be positive");
    Rng rng(seed);
    std::vector<double> data = rng.normal_vector(vocab.size() * dim, 1.0 / std::sqrt(static_cast<double>(dim)));
    for (const auto& [word, row] : fixed) {
      if (row.size() != dim)
        throw DimensionError("embedding for '" + word + "' has " + std::to_string(row.size()) + " values, expected " +
                             std::to_string(dim));
      const auto id = vocab.id(word);
      std::copy(row.begin(), row.end(), data.begin() + static_cast<std::ptrdiff_t>(id * dim));
    }
    const auto n = vocab.size();
    return TokenTable(std::move(vocab), Tensor({n, dim}, std::move(data)));
  }

  const Vocabulary& vocab() const { return vocab_; }
  const Tensor& matrix() const { return rows_; }
  std::size_t dim() const { return rows_.cols(); }
  std::size_t size() const { return rows_.rows(); }

  std::vector<double> row(TokenId id) const {
    if (id >= size()) throw IntegrityError("token id " + std::to_string(id) + " outside the embedding table");
    auto d = dim();
    return {rows_.data().begin() + static_cast<std::ptrdiff_t>(id * d),
            rows_.data().begin() + static_cast<std::ptrdiff_t>((id + 1) * d)};
  }

  TokenSequence encode(std::string_view text, UnknownPolicy policy = UnknownPolicy::error) const {
    return coapt::encode(text, vocab_, policy);
  }

 private:
  Vocabulary vocab_;
  Tensor rows_;
};

enum class PromptInit { gaussian, phrase };

/// Trainable soft prompts for the text encoder and, optionally, the image
/// encoder. These are the only prompt rows that ever change during training.
struct SoftPromptBank {
  Tensor text;    // M×d, undefined when M = 0
  Tensor vision;  // M_v×d_v, undefined when vision prompts are disabled
  PromptInit init_mode = PromptInit::gaussian;

  std::size_t count() const { return text.defined() ? text.rows() : 0; }
  std::size_t vision_count() const { return vision.defined() ? vision.rows() : 0; }

  std::vector<Tensor> trainables() const {
    std::vector<Tensor> out;
    if (text.defined()) out.push_back(text);
    if (vision.defined()) out.push_back(vision);
    return out;
  }

  SoftPromptBank clone() const {
    SoftPromptBank b;
    if (text.defined()) b.text = text.clone();
    if (vision.defined()) b.vision = vision.clone();
    b.init_mode = init_mode;
    return b;
  }
};

/// Gaussian mode draws N(0, 0.02²) entries; phrase mode copies the frozen rows
/// of an initialization phrase such as "a photo of a" (exactly M tokens).
/// Vision prompts, when requested, are always Gaussian.
inline SoftPromptBank init_soft_prompts(PromptInit mode, std::size_t dim, std::size_t count, std::uint64_t seed,
                                        const std::optional<std::string>& phrase = std::nullopt,
                                        const TokenTable* table = nullptr, std::size_t vision_count = 0,
                                        std::size_t vision_dim = 0) {
  constexpr double kInitStd = 0.02;
  SoftPromptBank bank;
  bank.init_mode = mode;
  Rng rng(seed);
  if (mode == PromptInit::phrase) {
    if (!phrase || !table) throw ConfigError("phrase initialization needs a phrase and an embedding table");
    if (table->dim() != dim) throw DimensionError("phrase table width differs from prompt width");
    auto ids = table->encode(*phrase);
    if (ids.size() != count)
      throw ConfigError("initialization phrase \"" + *phrase + "\" has " + std::to_string(ids.size()) +
                        " tokens but " + std::to_string(count) + " soft prompts were requested");
    std::vector<double> data;
    for (auto id : ids) {
      auto r = table->row(id);
      data.insert(data.end(), r.begin(), r.end());
    }
    if (count) bank.text = Tensor({count, dim}, std::move(data), true);
  } else if (count) {
    bank.text = rng.normal_matrix(count, dim, kInitStd, true);
  }
  if (vision_count) {
    if (vision_dim == 0) throw ParameterError("vision prompts need a positive width");
    bank.vision = rng.normal_matrix(vision_count, vision_dim, kInitStd, true);
  }
  return bank;
}

enum class SlotKind { sos, soft, class_token, attribute, eos, pad };

struct Slot {
  SlotKind kind;
  std::size_t index = 0;  // soft prompt m or attribute token n
  friend bool operator==(const Slot&, const Slot&) = default;
};

/// Text query {SOS, p_1..p_M, class tokens, attribute tokens, EOS, PAD...}.
///
/// Only the frozen rows are stored; the soft rows are spliced in from the
/// bank at encode time, so a query stays valid while the bank trains.
struct AssembledQuery {
  Tensor frozen_rows;        // L×d; rows at SOFT slots are zero placeholders
  std::vector<Slot> slots;   // one per position
  std::size_t soft_count = 0;
  std::size_t class_tokens = 0;
  std::size_t attribute_tokens = 0;
  std::size_t class_index = 0;
  std::size_t attr_set_index = 0;

  std::size_t length() const { return slots.size(); }
  std::size_t eos_position() const { return 1 + soft_count + class_tokens + attribute_tokens; }
  std::size_t used_length() const { return eos_position() + 1; }
  std::size_t pad_count() const { return length() - used_length(); }

  /// Full L×d sequence with `soft` (M×d) at positions 1..M.
  Tensor embeddings_with(const Tensor& soft) const {
    if (soft_count == 0) return frozen_rows;
    if (!soft.defined() || soft.rows() != soft_count || soft.cols() != frozen_rows.cols())
      throw DimensionError("soft prompt block does not match the query layout");
    std::vector<Tensor> parts{ops::slice_rows(frozen_rows, 0, 1), soft};
    const std::size_t rest = length() - 1 - soft_count;
    parts.push_back(ops::slice_rows(frozen_rows, 1 + soft_count, rest));
    return ops::concat_rows(parts);
  }

  Tensor embeddings(const SoftPromptBank& bank) const { return embeddings_with(bank.text); }
};

/// Builds the attribute-augmented query for one class. Rejects layouts that
/// do not fit `ctx_len`; never truncates.
inline AssembledQuery assemble_text_query(const std::string& class_name, const std::vector<std::string>& attrs,
                                          const SoftPromptBank& bank, const TokenTable& table, std::size_t ctx_len,
                                          UnknownPolicy policy = UnknownPolicy::error, std::size_t class_index = 0,
                                          std::size_t attr_set_index = 0) {
  const std::size_t d = table.dim();
  const std::size_t m = bank.count();
  if (m && bank.text.cols() != d)
    throw DimensionError("soft prompts have width " + std::to_string(bank.text.cols()) + ", table has " +
                         std::to_string(d));
  TokenSequence cls = table.encode(class_name, policy);
  if (cls.empty()) throw ConfigError("class name \"" + class_name + "\" has no tokens");
  TokenSequence attr_ids;
  for (const auto& a : attrs) {
    auto ids = table.encode(a, policy);
    attr_ids.insert(attr_ids.end(), ids.begin(), ids.end());
  }
  const std::size_t needed = 2 + m + cls.size() + attr_ids.size();
  if (needed > ctx_len)
    throw OverflowError("query for \"" + class_name + "\" needs " + std::to_string(needed) + " slots but the context holds " +
                            std::to_string(ctx_len) + " (excess " + std::to_string(needed - ctx_len) + ")",
                        needed - ctx_len);

  AssembledQuery q;
  q.soft_count = m;
  q.class_tokens = cls.size();
  q.attribute_tokens = attr_ids.size();
  q.class_index = class_index;
  q.attr_set_index = attr_set_index;
  std::vector<double> rows(ctx_len * d, 0.0);
  auto put = [&](std::size_t pos, TokenId id) {
    auto r = table.row(id);
    std::copy(r.begin(), r.end(), rows.begin() + static_cast<std::ptrdiff_t>(pos * d));
  };
  std::size_t pos = 0;
  put(pos++, kSosId);
  q.slots.push_back({SlotKind::sos, 0});
  for (std::size_t i = 0; i < m; ++i, ++pos) q.slots.push_back({SlotKind::soft, i});
  for (auto id : cls) {
    put(pos++, id);
    q.slots.push_back({SlotKind::class_token, 0});
  }
  for (std::size_t n = 0; n < attr_ids.size(); ++n) {
    put(pos++, attr_ids[n]);
    q.slots.push_back({SlotKind::attribute, n});
  }
  put(pos++, kEosId);
  q.slots.push_back({SlotKind::eos, 0});
  for (; pos < ctx_len; ++pos) q.slots.push_back({SlotKind::pad, 0});
  q.frozen_rows = Tensor({ctx_len, d}, std::move(rows));
  q.frozen_rows.freeze();
  return q;
}

/// Appends the vision prompts after the image token rows.
inline Tensor assemble_image_input(const Tensor& image_tokens, const SoftPromptBank& bank) {
  ops::detail::require_matrix(image_tokens, "assemble_image_input");
  if (bank.vision_count() == 0) return image_tokens;
  if (bank.vision.cols() != image_tokens.cols())
    throw DimensionError("vision prompts have width " + std::to_string(bank.vision.cols()) + " but image tokens have " +
                         std::to_string(image_tokens.cols()));
  return ops::concat_rows({image_tokens, bank.vision});
}

}  // namespace coapt
