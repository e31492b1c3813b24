#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "coapt/ops.hpp"
#include "coapt/rng.hpp"

namespace coapt {

/// Where and how the meta-network output is applied.
enum class BiasMode {
  bias_on_feature,    // t + β
  bias_on_prompts,    // soft prompts + β, then re-encode
  affine_on_feature,  // (1 + s) ⊙ t + shift
  off,                // no meta-network
};

inline std::string to_string(BiasMode m) {
  switch (m) {
    case BiasMode::bias_on_feature: return "bias_on_feature";
    case BiasMode::bias_on_prompts: return "bias_on_prompts";
    case BiasMode::affine_on_feature: return "affine_on_feature";
    case BiasMode::off: return "off";
  }
  return "?";
}

inline BiasMode parse_bias_mode(const std::string& s) {
  if (s == "bias_on_feature") return BiasMode::bias_on_feature;
  if (s == "bias_on_prompts") return BiasMode::bias_on_prompts;
  if (s == "affine_on_feature") return BiasMode::affine_on_feature;
  if (s == "off") return BiasMode::off;
  throw ConfigError("unknown bias_mode '" + s + "'");
}

/// Two-layer bias generator: concat(t, f) [2d] → linear → ReLU → linear.
/// Output width is d, or 2d for the affine variant (scale offset, shift).
struct MetaNetParams {
  Tensor w1, b1;  // 2d×h, 1×h
  Tensor w2, b2;  // h×out, 1×out
  std::size_t dim = 0;
  std::size_t hidden = 0;
  std::size_t out_dim = 0;
  std::shared_ptr<std::atomic<std::uint64_t>> evaluations = std::make_shared<std::atomic<std::uint64_t>>(0);

  std::vector<Tensor> trainables() const { return {w1, b1, w2, b2}; }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : trainables()) h = coapt::checksum(t, h);
    return h;
  }

  MetaNetParams clone() const {
    MetaNetParams p;
    p.w1 = w1.clone();
    p.b1 = b1.clone();
    p.w2 = w2.clone();
    p.b2 = b2.clone();
    p.dim = dim;
    p.hidden = hidden;
    p.out_dim = out_dim;
    return p;
  }
};

inline std::size_t default_hidden_width(std::size_t dim) { return (dim + 1) / 2; }

/// Layer 1 from N(0, 1/(2d)); layer 2 zero so the initial output is exactly 0.
/// `hidden` = 0 selects ceil(d/2).
inline MetaNetParams init_meta_net(std::size_t dim, std::size_t hidden, std::uint64_t seed, bool affine = false) {
  if (dim == 0) throw ParameterError("meta-net width must be positive");
  if (hidden == 0) hidden = default_hidden_width(dim);
  Rng rng(derive_seed(seed, 0x3E7A));
  MetaNetParams p;
  p.dim = dim;
  p.hidden = hidden;
  p.out_dim = affine ? 2 * dim : dim;
  p.w1 = rng.normal_matrix(2 * dim, hidden, 1.0 / std::sqrt(2.0 * static_cast<double>(dim)), true);
  p.b1 = Tensor::zeros({1, hidden}, true);
  p.w2 = Tensor::zeros({hidden, p.out_dim}, true);
  p.b2 = Tensor::zeros({1, p.out_dim}, true);
  return p;
}

/// One meta-net evaluation per row: text features [C×d] paired with a single
/// image feature [1×d] give outputs [C×out].
inline Tensor meta_bias_rows(const Tensor& text, const Tensor& image, const MetaNetParams& p) {
  if (text.rank() != 2 || text.cols() != p.dim || image.rank() != 2 || image.rows() != 1 || image.cols() != p.dim)
    throw DimensionError("meta-net expects [Cx" + std::to_string(p.dim) + "] text and [1x" + std::to_string(p.dim) +
                         "] image features, got " + shape_str(text.shape()) + " and " + shape_str(image.shape()));
  const std::size_t c = text.rows();
  Tensor in = ops::concat_cols({text, ops::repeat_rows(image, c)});
  Tensor hidden = ops::relu(ops::add_row(ops::matmul(in, p.w1), p.b1));
  p.evaluations->fetch_add(c, std::memory_order_relaxed);
  return ops::add_row(ops::matmul(hidden, p.w2), p.b2);
}

/// β = g_M(t, f) for a single pair.
inline Tensor meta_bias(const Tensor& text, const Tensor& image, const MetaNetParams& p) {
  return meta_bias_rows(text, image, p);
}

}  // namespace coapt
