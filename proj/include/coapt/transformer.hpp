#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "coapt/ops.hpp"
#include "coapt/rng.hpp"

namespace coapt {

/// Weights of one pre-norm transformer block (self-attention + feed-forward).
struct BlockParams {
  std::size_t heads = 1;
  Tensor ln1_gain, ln1_shift;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_shift;
  Tensor w1, b1, w2, b2;

  std::size_t width() const { return wq.rows(); }

  std::vector<Tensor> tensors() const {
    return {ln1_gain, ln1_shift, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_shift, w1, b1, w2, b2};
  }

  void freeze() {
    for (auto t : tensors()) t.freeze();
  }

  /// Unit layer-norm gains, zero biases, N(0, stddev²) weight matrices.
  static BlockParams random(Rng& rng, std::size_t d, std::size_t heads, std::size_t ff, double stddev) {
    if (d == 0 || heads == 0 || d % heads != 0)
      throw ParameterError("block width " + std::to_string(d) + " is not divisible by " +
                           std::to_string(heads) + " heads");
    BlockParams p;
    p.heads = heads;
    p.ln1_gain = Tensor::filled({1, d}, 1.0);
    p.ln1_shift = Tensor::zeros({1, d});
    p.wq = rng.normal_matrix(d, d, stddev);
    p.bq = Tensor::zeros({1, d});
    p.wk = rng.normal_matrix(d, d, stddev);
    p.bk = Tensor::zeros({1, d});
    p.wv = rng.normal_matrix(d, d, stddev);
    p.bv = Tensor::zeros({1, d});
    p.wo = rng.normal_matrix(d, d, stddev);
    p.bo = Tensor::zeros({1, d});
    p.ln2_gain = Tensor::filled({1, d}, 1.0);
    p.ln2_shift = Tensor::zeros({1, d});
    p.w1 = rng.normal_matrix(d, ff, stddev);
    p.b1 = Tensor::zeros({1, ff});
    p.w2 = rng.normal_matrix(ff, d, 1.0 / std::sqrt(static_cast<double>(ff)));
    p.b2 = Tensor::zeros({1, d});
    return p;
  }

  /// Every entry zero, gains included.
  static BlockParams zeros(std::size_t d, std::size_t heads, std::size_t ff) {
    BlockParams p;
    p.heads = heads;
    p.ln1_gain = Tensor::zeros({1, d});
    p.ln1_shift = Tensor::zeros({1, d});
    p.wq = Tensor::zeros({d, d});
    p.bq = Tensor::zeros({1, d});
    p.wk = Tensor::zeros({d, d});
    p.bk = Tensor::zeros({1, d});
    p.wv = Tensor::zeros({d, d});
    p.bv = Tensor::zeros({1, d});
    p.wo = Tensor::zeros({d, d});
    p.bo = Tensor::zeros({1, d});
    p.ln2_gain = Tensor::zeros({1, d});
    p.ln2_shift = Tensor::zeros({1, d});
    p.w1 = Tensor::zeros({d, ff});
    p.b1 = Tensor::zeros({1, ff});
    p.w2 = Tensor::zeros({ff, d});
    p.b2 = Tensor::zeros({1, d});
    return p;
  }
};

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return ops::add_row(ops::matmul(x, w), b);
}

/// Multi-head self-attention followed by a GELU feed-forward layer, each in a
/// pre-norm residual branch. Attention is bidirectional; keys at positions
/// >= `valid_len` are masked out, so rows beyond it never influence rows
/// before it.
inline Tensor attention_block(const Tensor& x, const BlockParams& p, std::size_t context_length,
                              std::size_t valid_len = std::numeric_limits<std::size_t>::max(),
                              double ln_eps = 1e-5) {
  ops::detail::require_matrix(x, "attention_block");
  const std::size_t len = x.rows();
  const std::size_t d = x.cols();
  if (len > context_length)
    throw OverflowError("attention_block: sequence of " + std::to_string(len) + " tokens exceeds context length " +
                            std::to_string(context_length),
                        len - context_length);
  if (d != p.width())
    throw DimensionError("attention_block: input width " + std::to_string(d) + " but block width " +
                         std::to_string(p.width()));

  const std::size_t dh = d / p.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor h = ops::layer_norm(x, p.ln1_gain, p.ln1_shift, ln_eps);
  Tensor q = linear(h, p.wq, p.bq);
  Tensor k = linear(h, p.wk, p.bk);
  Tensor v = linear(h, p.wv, p.bv);

  std::vector<Tensor> head_out;
  head_out.reserve(p.heads);
  for (std::size_t hd = 0; hd < p.heads; ++hd) {
    Tensor qh = ops::slice_cols(q, hd * dh, dh);
    Tensor kh = ops::slice_cols(k, hd * dh, dh);
    Tensor vh = ops::slice_cols(v, hd * dh, dh);
    Tensor scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt);
    Tensor attn = ops::softmax_rows(scores, 1.0, valid_len);
    head_out.push_back(ops::matmul(attn, vh));
  }
  Tensor mixed = p.heads == 1 ? head_out.front() : ops::concat_cols(head_out);
  Tensor x1 = ops::add(x, linear(mixed, p.wo, p.bo));

  Tensor h2 = ops::layer_norm(x1, p.ln2_gain, p.ln2_shift, ln_eps);
  Tensor ff = linear(ops::gelu(linear(h2, p.w1, p.b1)), p.w2, p.b2);
  return ops::add(x1, ff);
}

}  // namespace coapt
