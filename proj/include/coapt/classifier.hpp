#pragma once

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "coapt/encoders.hpp"
#include "coapt/meta_net.hpp"

namespace coapt {

struct ClassifierConfig {
  double temperature = 0.01;
  std::size_t ensemble_k = 3;
  BiasMode bias_mode = BiasMode::bias_on_feature;

  void validate() const {
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (ensemble_k < 1) throw ConfigError("ensemble_k must be at least 1");
  }
};

/// cos(f, t_i) for every row of `text`: [1×d], [C×d] -> [1×C].
inline Tensor cosine_logits(const Tensor& image, const Tensor& text) {
  if (image.rank() != 2 || image.rows() != 1 || text.rank() != 2 || text.cols() != image.cols())
    throw DimensionError("cosine scores need [1xd] and [Cxd] features, got " + shape_str(image.shape()) + " and " +
                         shape_str(text.shape()));
  return ops::matmul(ops::normalize_rows(image), ops::transpose(ops::normalize_rows(text)));
}

/// P(y = i | x) = softmax_i(cos(f, t_i) / τ).
inline Tensor class_probabilities(const Tensor& image, const Tensor& text, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  return ops::softmax_rows(cosine_logits(image, text), temperature);
}

/// Applies the meta-network output to the text features for the feature-side
/// modes. Returns `text` unchanged for `off`.
inline Tensor adapt_text_features(const Tensor& image, const Tensor& text, const MetaNetParams& meta, BiasMode mode) {
  switch (mode) {
    case BiasMode::off:
      return text;
    case BiasMode::bias_on_feature:
      return ops::add(text, meta_bias_rows(text, image, meta));
    case BiasMode::affine_on_feature: {
      Tensor out = meta_bias_rows(text, image, meta);
      const std::size_t d = text.cols();
      if (out.cols() != 2 * d) throw DimensionError("affine mode needs a meta-net with 2d outputs");
      Tensor scale = ops::add_scalar(ops::slice_cols(out, 0, d), 1.0);
      Tensor shift = ops::slice_cols(out, d, d);
      return ops::add(ops::mul(scale, text), shift);
    }
    case BiasMode::bias_on_prompts:
      throw ContractError("bias_on_prompts needs the re-encoding path (Scorer)");
  }
  return text;
}

/// Probabilities after adding β_i = g_M(t_i, f) to each text feature.
inline Tensor adapted_probabilities(const Tensor& image, const Tensor& text, const MetaNetParams& meta,
                                    double temperature) {
  return class_probabilities(image, adapt_text_features(image, text, meta, BiasMode::bias_on_feature), temperature);
}

/// Mean of the per-set distributions produced by `per_set(k)`, k = 0..K-1.
/// Failures are re-thrown with the offending set index.
inline Tensor ensemble_probabilities(std::size_t k_sets, const std::function<Tensor(std::size_t)>& per_set) {
  if (k_sets < 1) throw ParameterError("ensemble needs at least one vocabulary set");
  std::vector<Tensor> parts;
  parts.reserve(k_sets);
  for (std::size_t k = 0; k < k_sets; ++k) {
    try {
      parts.push_back(per_set(k));
    } catch (const OverflowError& e) {
      throw OverflowError("attribute set " + std::to_string(k) + ": " + e.what(), e.excess());
    } catch (const LookupError& e) {
      throw LookupError("attribute set " + std::to_string(k) + ": " + e.what());
    }
  }
  if (k_sets == 1) return parts.front();
  return ops::scale(ops::add_n(parts), 1.0 / static_cast<double>(k_sets));
}

/// Number of probabilities clamped at the loss floor since process start.
inline std::atomic<std::uint64_t>& loss_clamp_warnings() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

/// Mean over rows of −log p[row, label[row]], with p clamped at 1e-12.
inline Tensor cross_entropy_loss(const Tensor& probs, const std::vector<std::size_t>& labels) {
  if (probs.rank() != 2 || probs.rows() != labels.size())
    throw DimensionError("cross_entropy_loss: " + std::to_string(labels.size()) + " labels for probabilities " +
                         shape_str(probs.shape()));
  std::vector<Tensor> terms;
  terms.reserve(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= probs.cols()) throw LookupError("label " + std::to_string(labels[i]) + " out of range");
    std::size_t clamped = 0;
    terms.push_back(ops::neg_log(ops::pick(probs, i, labels[i]), 1e-12, &clamped));
    if (clamped) loss_clamp_warnings().fetch_add(clamped);
  }
  Tensor total = terms.size() == 1 ? terms.front() : ops::add_n(terms);
  return ops::scale(total, 1.0 / static_cast<double>(labels.size()));
}

/// Frozen encoders plus scoring configuration: turns (image, class queries,
/// trainable state) into class distributions.
class Scorer {
 public:
  Scorer(const FrozenEncoders& encoders, ClassifierConfig cfg) : enc_(&encoders), cfg_(cfg) { cfg_.validate(); }

  const ClassifierConfig& config() const { return cfg_; }
  const FrozenEncoders& encoders() const { return *enc_; }

  Tensor image_feature(const Tensor& input, const SoftPromptBank& bank) const {
    return encode_image(input, enc_->image, bank);
  }

  /// Stacked text features [C×d], one row per query.
  Tensor text_features(const std::vector<AssembledQuery>& queries, const SoftPromptBank& bank) const {
    if (queries.empty()) throw ConfigError("no class queries");
    std::vector<Tensor> rows;
    rows.reserve(queries.size());
    for (const auto& q : queries) rows.push_back(encode_text(q, enc_->text, bank));
    return rows.size() == 1 ? rows.front() : ops::concat_rows(rows);
  }

  /// Class distribution [1×C] for one image feature given precomputed text
  /// features. `queries` is only consulted for the prompt-side bias mode.
  Tensor probabilities(const Tensor& image, const Tensor& text, const std::vector<AssembledQuery>& queries,
                       const SoftPromptBank& bank, const MetaNetParams& meta) const {
    if (cfg_.bias_mode != BiasMode::bias_on_prompts)
      return class_probabilities(image, adapt_text_features(image, text, meta, cfg_.bias_mode), cfg_.temperature);
    Tensor beta = meta_bias_rows(text, image, meta);
    std::vector<Tensor> rows;
    rows.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
      Tensor soft = bank.text;
      if (bank.count()) soft = ops::add_row(bank.text, ops::slice_rows(beta, i, 1));
      rows.push_back(encode_text_with(queries[i], enc_->text, soft));
    }
    Tensor adapted = rows.size() == 1 ? rows.front() : ops::concat_rows(rows);
    return class_probabilities(image, adapted, cfg_.temperature);
  }

  /// Convenience: encode everything and score one image input.
  Tensor predict(const Tensor& input, const std::vector<AssembledQuery>& queries, const SoftPromptBank& bank,
                 const MetaNetParams& meta) const {
    return probabilities(image_feature(input, bank), text_features(queries, bank), queries, bank, meta);
  }

  /// Averaged distribution over K query sets (one set per attribute sample).
  Tensor predict_ensemble(const Tensor& input, const std::vector<std::vector<AssembledQuery>>& sets,
                          const SoftPromptBank& bank, const MetaNetParams& meta) const {
    Tensor f = image_feature(input, bank);
    return ensemble_probabilities(sets.size(), [&](std::size_t k) {
      return probabilities(f, text_features(sets[k], bank), sets[k], bank, meta);
    });
  }

 private:
  const FrozenEncoders* enc_;
  ClassifierConfig cfg_;
};

inline std::size_t argmax(const Tensor& row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.numel(); ++i)
    if (row.data()[i] > row.data()[best]) best = i;
  return best;
}

}  // namespace coapt
