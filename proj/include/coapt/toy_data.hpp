#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "coapt/attr_vocab.hpp"
#include "coapt/config.hpp"
#include "coapt/embedding_io.hpp"

namespace coapt {

struct Example {
  Tensor input;  // [1×d] feature or P×d_v image tokens
  std::size_t label = 0;
};

/// Labeled support and query examples over one class list.
struct ToyDataset {
  std::string domain = "source";
  std::vector<std::string> classes;
  std::vector<Example> support;
  std::vector<Example> query;

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto* part : {&support, &query})
      for (const auto& e : *part) {
        h = coapt::checksum(e.input, h);
        const double label = static_cast<double>(e.label);
        h = coapt::checksum(std::span<const double>(&label, 1), h);
      }
    return h;
  }
};

/// A frozen backbone together with the data and vocabularies it is evaluated
/// on. Everything is a deterministic function of (config, seed).
struct ToyWorld {
  std::uint64_t seed = 0;
  FrozenEncoders encoders;
  AttributeVocab vocab;  // covers source and target classes
  ToyDataset source;
  ToyDataset target;  // cross-dataset classes; empty when not configured
  SoftPromptBank initial_bank;
  MetaNetParams initial_meta;
  std::vector<std::string> warnings;
};

struct BaseNovelSplit {
  std::vector<std::size_t> base;
  std::vector<std::size_t> novel;
};

/// Seeded half/half split of class indices; the extra class goes to base.
inline BaseNovelSplit split_base_novel(const std::vector<std::string>& classes, std::uint64_t seed) {
  if (classes.size() < 2) throw ConfigError("a base/novel split needs at least 2 classes");
  auto perm = Rng(derive_seed(seed, 0x5B17)).permutation(classes.size());
  const std::size_t n_base = (classes.size() + 1) / 2;
  BaseNovelSplit s;
  s.base.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_base));
  s.novel.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_base), perm.end());
  std::sort(s.base.begin(), s.base.end());
  std::sort(s.novel.begin(), s.novel.end());
  return s;
}

/// First `count` words of set k (fewer if the set is shorter).
inline std::vector<std::string> attribute_prefix(const AttributeVocab& v, const std::string& class_name, std::size_t k,
                                                 std::size_t count) {
  const auto& sets = inference_sets(v, class_name);
  if (k >= sets.size())
    throw LookupError("attribute set " + std::to_string(k) + " does not exist for \"" + class_name + "\"");
  const auto& words = sets[k];
  return {words.begin(), words.begin() + static_cast<std::ptrdiff_t>(std::min(count, words.size()))};
}

namespace detail {

inline std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n == 0.0) throw DegenerateInputError("cannot normalize a zero vector");
  for (double& x : v) x /= n;
  return v;
}

/// Removes from `v` its components along the orthonormal `basis`.
inline void project_out(std::vector<double>& v, const std::vector<std::vector<double>>& basis) {
  for (const auto& b : basis) {
    double dot = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) dot += v[i] * b[i];
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= dot * b[i];
  }
}

inline std::vector<std::vector<double>> orthonormal_basis(const std::vector<std::vector<double>>& vectors) {
  std::vector<std::vector<double>> basis;
  for (auto v : vectors) {
    double before = 0.0;
    for (double x : v) before += x * x;
    project_out(v, basis);
    project_out(v, basis);  // second pass for numerical orthogonality
    double after = 0.0;
    for (double x : v) after += x * x;
    if (after > 1e-20 * std::max(before, 1e-300)) basis.push_back(unit(std::move(v)));
  }
  return basis;
}

inline std::string generated_class_name(bool target, std::size_t i) {
  std::string idx = std::to_string(i);
  if (idx.size() < 2) idx.insert(0, 2 - idx.size(), '0');
  return (target ? "target" : "class") + idx;
}

inline std::string generated_word(std::size_t g, std::size_t k, std::size_t n) {
  return "w" + std::to_string(g) + "s" + std::to_string(k) + "n" + std::to_string(n);
}

/// Text feature of [SOS, rows..., EOS] with no soft prompts.
inline std::vector<double> encode_concept(const TextEncoderParams& p, const std::vector<std::vector<double>>& rows) {
  std::vector<double> data = p.table.row(kSosId);
  for (const auto& r : rows) data.insert(data.end(), r.begin(), r.end());
  auto eos = p.table.row(kEosId);
  data.insert(data.end(), eos.begin(), eos.end());
  Tensor x({rows.size() + 2, p.dim()}, std::move(data));
  return encode_text_rows(x, rows.size() + 1, p).values();
}

}  // namespace detail

/// Builds source/target vocabularies, the frozen backbone, the initial
/// trainable state and the labeled examples.
///
/// Image clusters follow `cfg.geometry`:
///  * aligned: class c is centred on the text feature of a concept sequence.
///    Generated attribute words sit near that concept with probability
///    `attr_correlation` and are drawn independently otherwise.
///  * symmetric: centres lie in the orthogonal complement of every text
///    feature the untrained model can produce for the configured queries, and
///    query noise is shared across classes. Untrained predictions are then
///    independent of the label.
inline ToyWorld make_toy_world(const ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const std::size_t d = cfg.dims.dim;
  ToyWorld w;
  w.seed = seed;
  Rng rng(derive_seed(seed, 0xDA7A));

  // --- vocabularies -------------------------------------------------------
  const bool external_vocab = !cfg.vocab_path.empty();
  const bool real_images = !cfg.image_embeddings.empty();
  if (real_images && !external_vocab) throw ConfigError("image_embeddings needs a vocab file");
  if (cfg.image_input == ImageInput::tokens && real_images)
    throw ConfigError("image_embeddings supplies features, set image_input = features");

  std::vector<std::string> source_names, target_names;
  AttributeVocab vocab;
  if (external_vocab) {
    vocab = load_vocab(cfg.vocab_path);
    source_names = vocab.class_names();
    if (!cfg.target_vocab_path.empty()) {
      auto tv = load_vocab(cfg.target_vocab_path);
      if (tv.num_sets != vocab.num_sets)
        throw ConfigError("target vocabulary has K = " + std::to_string(tv.num_sets) + ", source has K = " +
                          std::to_string(vocab.num_sets));
      for (auto& [name, sets] : tv.classes) {
        if (vocab.classes.count(name)) throw ConfigError("class \"" + name + "\" is in both source and target vocab");
        target_names.push_back(name);
        vocab.classes.emplace(name, sets);
      }
      vocab.warnings.insert(vocab.warnings.end(), tv.warnings.begin(), tv.warnings.end());
    }
  } else {
    for (std::size_t i = 0; i < cfg.num_classes; ++i) source_names.push_back(detail::generated_class_name(false, i));
    for (std::size_t i = 0; i < cfg.target_classes; ++i) target_names.push_back(detail::generated_class_name(true, i));
    vocab.dataset = "toy";
    vocab.generator = "seeded";
    // Never hand out fewer words than requested; the budget check must see them.
    vocab.num_words = std::max(cfg.words_per_set, cfg.num_attrs);
    vocab.num_sets = cfg.num_sets;
    std::size_t g = 0;
    for (const auto* group : {&source_names, &target_names})
      for (const auto& name : *group) {
        auto& sets = vocab.classes[name];
        for (std::size_t k = 0; k < cfg.num_sets; ++k) {
          std::vector<std::string> words;
          for (std::size_t n = 0; n < vocab.num_words; ++n) words.push_back(detail::generated_word(g, k, n));
          sets.push_back(std::move(words));
        }
        ++g;
      }
  }
  if (cfg.k_ensemble > vocab.num_sets)
    throw ConfigError("k_ensemble = " + std::to_string(cfg.k_ensemble) + " but the vocabulary has only " +
                      std::to_string(vocab.num_sets) + " sets per class");
  w.warnings = vocab.warnings;

  // --- real image features (optional) --------------------------------------
  EmbeddingExport images;
  if (real_images) {
    images = load_embedding_export(cfg.image_embeddings, static_cast<std::uint32_t>(d));
    if (images.kind != EmbeddingKind::image) throw ConfigError(cfg.image_embeddings + " is not an image export");
    std::vector<std::string> seen;
    for (const auto& r : images.records) {
      const auto slash = r.name.find('/');
      if (slash == std::string::npos || slash == 0)
        throw FormatError("image record \"" + r.name + "\" is not named <class>/<id>");
      const std::string cls = normalize_text(r.name.substr(0, slash));
      if (std::find(seen.begin(), seen.end(), cls) == seen.end()) seen.push_back(cls);
    }
    for (const auto& cls : seen)
      if (!vocab.has_class(cls)) throw LookupError("class \"" + cls + "\" has images but no attribute vocabulary");
    source_names = seen;
  }

  // --- token table ----------------------------------------------------------
  std::vector<std::vector<std::string>> corpora;
  for (const auto& [name, sets] : vocab.classes) {
    corpora.push_back({name});
    for (const auto& s : sets) corpora.push_back(s);
  }
  corpora.push_back({cfg.init_phrase});
  Vocabulary tokens = build_vocab(corpora);

  std::vector<std::string> all_names = source_names;
  all_names.insert(all_names.end(), target_names.begin(), target_names.end());
  std::vector<std::vector<double>> concepts;
  std::map<std::string, std::vector<double>> fixed;
  const double row_std = 1.0 / std::sqrt(static_cast<double>(d));
  if (!external_vocab) {
    for (std::size_t g = 0; g < all_names.size(); ++g) concepts.push_back(rng.normal_vector(d, row_std));
    for (std::size_t g = 0; g < all_names.size(); ++g)
      for (std::size_t k = 0; k < cfg.num_sets; ++k)
        for (std::size_t n = 0; n < vocab.num_words; ++n) {
          // Draw both branches so every correlation level consumes the same
          // random stream and differs only in which branch is taken.
          const double u = rng.uniform();
          auto jitter = rng.normal_vector(d, 0.5 * row_std);
          auto random_row = rng.normal_vector(d, row_std);
          std::vector<double> row(d);
          for (std::size_t i = 0; i < d; ++i)
            row[i] = u < cfg.attr_correlation ? concepts[g][i] + jitter[i] : random_row[i];
          fixed[detail::generated_word(g, k, n)] = std::move(row);
        }
  }
  if (!cfg.token_embeddings.empty()) {
    auto exported = load_embedding_export(cfg.token_embeddings, static_cast<std::uint32_t>(d));
    std::size_t used = 0;
    for (auto& [word, row] : token_rows(exported))
      if (tokens.contains(word)) {
        fixed[word] = std::move(row);
        ++used;
      }
    const std::size_t missing = tokens.size() - kFirstWordId - std::min(used, tokens.size() - kFirstWordId);
    if (missing)
      w.warnings.push_back(std::to_string(missing) + " vocabulary words have no exported embedding; using seeded rows");
  }
  TokenTable table = TokenTable::build(std::move(tokens), d, derive_seed(seed, 0x70CE), fixed);

  // --- frozen backbone and initial trainable state ---------------------------
  const ImageMode image_mode = cfg.image_input == ImageInput::tokens ? ImageMode::toy : ImageMode::passthrough;
  w.encoders = build_frozen_encoders(derive_seed(seed, 0xE1C0), cfg.dims, std::move(table), image_mode);
  const std::size_t dv = cfg.dims.image_dim ? cfg.dims.image_dim : d;
  w.initial_bank = init_soft_prompts(cfg.prompt_init, d, cfg.soft_prompts, derive_seed(seed, 0xBA4C),
                                     cfg.init_phrase, &w.encoders.text.table, cfg.vision_prompts, dv);
  w.initial_meta = init_meta_net(d, cfg.meta_hidden, derive_seed(seed, 0x3E7A),
                                 cfg.classifier.bias_mode == BiasMode::affine_on_feature);
  w.vocab = std::move(vocab);

  auto make_group = [&](const std::vector<std::string>& names, const std::string& domain) {
    ToyDataset ds;
    ds.domain = domain;
    ds.classes = names;
    return ds;
  };
  w.source = make_group(source_names, "source");
  w.target = make_group(target_names, "target");

  NoGradScope no_grad;

  if (real_images) {
    std::map<std::string, std::size_t> seen_count;
    for (const auto& r : images.records) {
      const std::string cls = normalize_text(r.name.substr(0, r.name.find('/')));
      const auto label = static_cast<std::size_t>(
          std::find(source_names.begin(), source_names.end(), cls) - source_names.begin());
      Example e{Tensor({1, d}, std::vector<double>(r.values.begin(), r.values.end())), label};
      (seen_count[cls]++ < cfg.shots ? w.source.support : w.source.query).push_back(std::move(e));
    }
    for (const auto& cls : source_names)
      if (seen_count[cls] <= cfg.shots)
        throw ConfigError("class \"" + cls + "\" has " + std::to_string(seen_count[cls]) +
                          " images, need more than shots = " + std::to_string(cfg.shots));
    return w;
  }

  // --- class centres ---------------------------------------------------------
  const std::size_t groups = all_names.size();
  std::vector<std::vector<double>> centres(groups);
  if (cfg.image_input == ImageInput::tokens) {
    const std::size_t p = cfg.image_tokens;
    for (auto& c : centres) c = rng.normal_vector(p * dv, 1.0);
  } else if (cfg.geometry == Geometry::aligned) {
    const auto& text = w.encoders.text;
    for (std::size_t g = 0; g < groups; ++g) {
      std::vector<std::vector<double>> rows;
      if (!external_vocab) {
        rows.assign(4, concepts[g]);
      } else {
        // Images resemble their own description: class name plus set 0.
        for (auto id : text.table.encode(all_names[g])) rows.push_back(text.table.row(id));
        const std::size_t cls_tokens = rows.size();
        auto words = fit_to_budget(w.vocab, all_names[g], 0, 0, cls_tokens, text.context_length, text.table.vocab());
        for (const auto& word : words)
          for (auto id : text.table.encode(word)) rows.push_back(text.table.row(id));
      }
      centres[g] = detail::unit(detail::encode_concept(text, rows));
    }
  } else {
    std::vector<std::vector<double>> feats;
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t k = 0; k < w.vocab.num_sets; ++k) {
        auto attrs = attribute_prefix(w.vocab, all_names[g], k, cfg.num_attrs);
        auto q = assemble_text_query(all_names[g], attrs, w.initial_bank, w.encoders.text.table, cfg.dims.ctx_len);
        feats.push_back(encode_text(q, w.encoders.text, w.initial_bank).values());
      }
    auto basis = detail::orthonormal_basis(feats);
    if (basis.size() + groups > d)
      throw ConfigError("symmetric geometry needs dim > " + std::to_string(basis.size() + groups - 1) +
                        " for this many classes and attribute sets");
    for (std::size_t g = 0; g < groups; ++g) {
      auto v = rng.normal_vector(d, 1.0);
      detail::project_out(v, basis);
      detail::project_out(v, basis);
      centres[g] = detail::unit(std::move(v));
    }
  }

  // --- examples ---------------------------------------------------------------
  const std::size_t width = cfg.image_input == ImageInput::tokens ? dv : d;
  const std::size_t rows = cfg.image_input == ImageInput::tokens ? cfg.image_tokens : 1;
  const double noise_std = cfg.cluster_spread / std::sqrt(static_cast<double>(width));
  auto sample = [&](std::size_t g, const std::vector<double>& noise) {
    std::vector<double> v(centres[g]);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += noise[i];
    return Tensor({rows, width}, std::move(v));
  };
  auto fill = [&](ToyDataset& ds, std::size_t first_global) {
    for (std::size_t c = 0; c < ds.classes.size(); ++c)
      for (std::size_t s = 0; s < cfg.shots; ++s)
        ds.support.push_back({sample(first_global + c, rng.normal_vector(rows * width, noise_std)), c});
    if (cfg.geometry == Geometry::symmetric) {
      for (std::size_t j = 0; j < cfg.queries; ++j) {
        auto noise = rng.normal_vector(rows * width, noise_std);
        for (std::size_t c = 0; c < ds.classes.size(); ++c) ds.query.push_back({sample(first_global + c, noise), c});
      }
    } else {
      for (std::size_t c = 0; c < ds.classes.size(); ++c)
        for (std::size_t j = 0; j < cfg.queries; ++j)
          ds.query.push_back({sample(first_global + c, rng.normal_vector(rows * width, noise_std)), c});
    }
  };
  fill(w.source, 0);
  fill(w.target, source_names.size());
  return w;
}

/// Query set of `source` under a seeded domain shift of strength `alpha`:
/// f' = R(alpha) f + alpha * spread * n. R rotates random coordinate planes by
/// alpha * pi/4; alpha = 0 returns the queries unchanged.
inline ToyDataset shift_domain(const ToyDataset& source, double alpha, double spread, std::uint64_t seed) {
  if (!(alpha >= 0.0)) throw ParameterError("domain shift must be non-negative");
  ToyDataset out;
  out.domain = "shift=" + detail::fmt(alpha);
  out.classes = source.classes;
  out.support = source.support;
  if (source.query.empty()) return out;
  const std::size_t width = source.query.front().input.cols();
  Rng plane_rng(derive_seed(seed, 0xD0D0));
  auto perm = plane_rng.permutation(width);
  std::vector<double> angle(width / 2);
  for (auto& a : angle) a = (plane_rng.uniform() < 0.5 ? -1.0 : 1.0) * alpha * std::numbers::pi / 4.0;
  Rng noise_rng(derive_seed(seed, 0xD1D1));
  const double noise_std = spread / std::sqrt(static_cast<double>(width));
  for (const auto& e : source.query) {
    auto v = e.input.values();
    auto noise = noise_rng.normal_vector(v.size(), noise_std);
    for (std::size_t r = 0; r < e.input.rows(); ++r) {
      double* row = v.data() + r * width;
      for (std::size_t p = 0; p + 1 < width; p += 2) {
        const double c = std::cos(angle[p / 2]), s = std::sin(angle[p / 2]);
        const double a = row[perm[p]], b = row[perm[p + 1]];
        row[perm[p]] = c * a - s * b;
        row[perm[p + 1]] = s * a + c * b;
      }
    }
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += alpha * noise[i];
    out.query.push_back({Tensor(e.input.shape(), std::move(v)), e.label});
  }
  return out;
}

}  // namespace coapt
