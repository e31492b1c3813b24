#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "coapt/prompt_assembly.hpp"
#include "coapt/transformer.hpp"

namespace coapt {

struct EncoderDims {
  std::size_t dim = 64;         // shared feature width d
  std::size_t depth = 2;        // text blocks
  std::size_t heads = 4;
  std::size_t ctx_len = 77;
  std::size_t ff_mult = 4;
  std::size_t image_dim = 0;    // d_v for toy image tokens; 0 means d
  std::size_t image_depth = 0;  // 0 means same as depth
  std::size_t image_ctx = 64;   // max image tokens incl. vision prompts
};

/// Frozen text tower g_T.
struct TextEncoderParams {
  TokenTable table;
  Tensor positional;  // ctx_len×d
  std::vector<BlockParams> blocks;
  Tensor final_gain, final_shift;
  Tensor projection;  // d×d
  std::size_t context_length = 0;

  std::size_t dim() const { return projection.cols(); }

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out{table.matrix(), positional};
    for (const auto& b : blocks)
      for (const auto& t : b.tensors()) out.push_back(t);
    out.push_back(final_gain);
    out.push_back(final_shift);
    out.push_back(projection);
    return out;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : tensors()) h = coapt::checksum(t, h);
    return h;
  }

  void freeze() {
    for (auto t : tensors()) t.freeze();
  }
};

enum class ImageMode { toy, passthrough };

/// Frozen image tower g_V: either a small transformer over image tokens or a
/// pass-through for precomputed feature vectors.
struct ImageEncoderParams {
  ImageMode mode = ImageMode::passthrough;
  std::size_t feature_dim = 0;
  std::size_t input_dim = 0;
  std::size_t context_length = 0;
  Tensor input_projection;  // d_v×d
  Tensor positional;        // image_ctx×d
  std::vector<BlockParams> blocks;
  Tensor final_gain, final_shift;
  Tensor projection;  // d×d

  std::vector<Tensor> tensors() const {
    std::vector<Tensor> out;
    if (mode == ImageMode::passthrough) return out;
    out.push_back(input_projection);
    out.push_back(positional);
    for (const auto& b : blocks)
      for (const auto& t : b.tensors()) out.push_back(t);
    out.push_back(final_gain);
    out.push_back(final_shift);
    out.push_back(projection);
    return out;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL ^ static_cast<std::uint64_t>(mode);
    for (const auto& t : tensors()) h = coapt::checksum(t, h);
    return h;
  }

  void freeze() {
    for (auto t : tensors()) t.freeze();
  }
};

struct FrozenEncoders {
  TextEncoderParams text;
  ImageEncoderParams image;
};

/// Seeded stand-in for a pretrained dual encoder. Weight matrices are drawn
/// from N(0, 1/d); everything is frozen before returning.
inline FrozenEncoders build_frozen_encoders(std::uint64_t seed, const EncoderDims& dims, TokenTable table,
                                            ImageMode image_mode = ImageMode::passthrough) {
  const std::size_t d = dims.dim;
  if (d == 0 || dims.heads == 0 || d % dims.heads != 0)
    throw ParameterError("feature width must be a positive multiple of the head count");
  if (dims.ctx_len < 2) throw ParameterError("context length must hold at least SOS and EOS");
  if (table.dim() != d)
    throw DimensionError("token table width " + std::to_string(table.dim()) + " differs from encoder width " +
                         std::to_string(d));
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));
  Rng rng(derive_seed(seed, 0x7E47));

  FrozenEncoders enc;
  auto& t = enc.text;
  t.table = std::move(table);
  t.context_length = dims.ctx_len;
  t.positional = rng.normal_matrix(dims.ctx_len, d, 0.01);
  for (std::size_t b = 0; b < dims.depth; ++b)
    t.blocks.push_back(BlockParams::random(rng, d, dims.heads, dims.ff_mult * d, w_std));
  t.final_gain = Tensor::filled({1, d}, 1.0);
  t.final_shift = Tensor::zeros({1, d});
  t.projection = rng.normal_matrix(d, d, w_std);
  t.freeze();

  auto& im = enc.image;
  im.mode = image_mode;
  im.feature_dim = d;
  if (image_mode == ImageMode::toy) {
    Rng irng(derive_seed(seed, 0x1A6E));
    const std::size_t dv = dims.image_dim ? dims.image_dim : d;
    const std::size_t depth = dims.image_depth ? dims.image_depth : dims.depth;
    im.input_dim = dv;
    im.context_length = dims.image_ctx;
    im.input_projection = irng.normal_matrix(dv, d, 1.0 / std::sqrt(static_cast<double>(dv)));
    im.positional = irng.normal_matrix(dims.image_ctx, d, 0.01);
    for (std::size_t b = 0; b < depth; ++b)
      im.blocks.push_back(BlockParams::random(irng, d, dims.heads, dims.ff_mult * d, w_std));
    im.final_gain = Tensor::filled({1, d}, 1.0);
    im.final_shift = Tensor::zeros({1, d});
    im.projection = irng.normal_matrix(d, d, w_std);
  } else {
    im.input_dim = d;
  }
  im.freeze();
  return enc;
}

/// Runs the text tower over an embedded sequence (rows already include the
/// token embeddings) and pools the hidden state at `eos`. Rows after the EOS
/// position are padding; they are masked out of attention and never reach the
/// pooled row, so only the first eos+1 rows are processed.
inline Tensor encode_text_rows(const Tensor& rows, std::size_t eos, const TextEncoderParams& p) {
  if (rows.rank() != 2 || rows.cols() != p.dim())
    throw DimensionError("text rows " + shape_str(rows.shape()) + " do not match encoder width " +
                         std::to_string(p.dim()));
  if (rows.rows() > p.context_length)
    throw OverflowError("sequence of length " + std::to_string(rows.rows()) + " exceeds encoder context " +
                            std::to_string(p.context_length),
                        rows.rows() - p.context_length);
  if (eos >= rows.rows()) throw ContractError("EOS position outside the sequence");
  const std::size_t used = eos + 1;
  Tensor x = used == rows.rows() ? rows : ops::slice_rows(rows, 0, used);
  x = ops::add(x, ops::slice_rows(p.positional, 0, used));
  for (const auto& b : p.blocks) x = attention_block(x, b, p.context_length, used);
  Tensor pooled = ops::slice_rows(x, eos, 1);
  return ops::matmul(ops::layer_norm(pooled, p.final_gain, p.final_shift), p.projection);
}

/// Text feature for a query whose soft rows are given explicitly (M×d).
inline Tensor encode_text_with(const AssembledQuery& q, const TextEncoderParams& p, const Tensor& soft) {
  if (q.frozen_rows.cols() != p.dim())
    throw DimensionError("query width " + std::to_string(q.frozen_rows.cols()) + " differs from encoder width " +
                         std::to_string(p.dim()));
  if (q.length() > p.context_length)
    throw OverflowError("query of length " + std::to_string(q.length()) + " exceeds encoder context " +
                            std::to_string(p.context_length),
                        q.length() - p.context_length);
  return encode_text_rows(q.embeddings_with(soft), q.eos_position(), p);
}

inline Tensor encode_text(const AssembledQuery& q, const TextEncoderParams& p, const SoftPromptBank& bank) {
  return encode_text_with(q, p, bank.text);
}

/// Image feature [1×d]. Toy mode takes an image-token matrix (P×d_v);
/// pass-through mode takes a precomputed [1×d] feature and returns it.
inline Tensor encode_image(const Tensor& x, const ImageEncoderParams& p, const SoftPromptBank& bank) {
  if (p.mode == ImageMode::passthrough) {
    if (bank.vision_count() > 0) throw ConfigError("vision prompts cannot be used with pass-through image features");
    if (x.rank() != 2 || x.rows() != 1 || x.cols() != p.feature_dim)
      throw DimensionError("pass-through image feature must be [1x" + std::to_string(p.feature_dim) + "], got " +
                           shape_str(x.shape()));
    return x;
  }
  if (x.rank() != 2 || x.cols() != p.input_dim)
    throw DimensionError("image tokens must have width " + std::to_string(p.input_dim) + ", got " + shape_str(x.shape()));
  Tensor tokens = assemble_image_input(x, bank);
  if (tokens.rows() > p.context_length)
    throw OverflowError("image input of " + std::to_string(tokens.rows()) + " tokens exceeds " +
                            std::to_string(p.context_length),
                        tokens.rows() - p.context_length);
  Tensor h = ops::add(ops::matmul(tokens, p.input_projection), ops::slice_rows(p.positional, 0, tokens.rows()));
  for (const auto& b : p.blocks) h = attention_block(h, b, p.context_length);
  Tensor pooled = ops::mean_rows(h);
  return ops::matmul(ops::layer_norm(pooled, p.final_gain, p.final_shift), p.projection);
}

}  // namespace coapt
