#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "coapt/tensor.hpp"

// Differentiable operations over rank-2 tensors. Every op computes its
// forward value eagerly and, when an input requires a gradient and a tape is
// active, records the matching backward rule.

namespace coapt::ops {

namespace detail {

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

using coapt::detail::finish;

/// C = A·B. dA = dC·Bᵀ, dB = Aᵀ·dC.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  std::vector<double> c(m * n, 0.0);
  const auto A = a.data();
  const auto B = b.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double av = A[i * k + p];
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += av * B[p * n + j];
    }
  return finish({m, n}, std::move(c), {a, b},
                [a, b, m, k, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  const auto A = a.data();
                  const auto B = b.data();
                  if (auto* ga = gi[0])
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                        (*ga)[i * k + p] += s;
                      }
                  if (auto* gb = gi[1])
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t p = 0; p < k; ++p) {
                        const double av = A[i * k + p];
                        for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += av * g[i * n + j];
                      }
                });
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a(i, j);
  return finish({n, m}, std::move(out), {a},
                [m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) (*gi[0])[i * n + j] += g[j * m + i];
                });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return finish(a.shape(), std::move(out), {a, b},
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (auto* slot : gi)
                    if (slot)
                      for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
                });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return finish(a.shape(), std::move(out), {a, b},
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                  if (gi[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] -= g[i];
                });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return finish(a.shape(), std::move(out), {a, b},
                [a, b](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * b.data()[i];
                  if (gi[1])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[1])[i] += g[i] * a.data()[i];
                });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * s;
  return finish(a.shape(), std::move(out), {a},
                [s](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * s;
                });
}

/// x[m×n] + b[1×n], bias broadcast over rows.
inline Tensor add_row(const Tensor& x, const Tensor& b) {
  detail::require_matrix(x, "add_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (b.numel() != n)
    throw DimensionError("add_row: bias " + shape_str(b.shape()) + " does not match " +
                         shape_str(x.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + b.data()[j];
  return finish({m, n}, std::move(out), {x, b},
                [m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0])
                    for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                  if (gi[1])
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) (*gi[1])[j] += g[i * n + j];
                });
}

/// x[m×n] ⊙ s[1×n], broadcast over rows.
inline Tensor mul_row(const Tensor& x, const Tensor& s) {
  detail::require_matrix(x, "mul_row");
  const std::size_t m = x.rows(), n = x.cols();
  if (s.numel() != n)
    throw DimensionError("mul_row: scale " + shape_str(s.shape()) + " does not match " +
                         shape_str(x.shape()));
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] * s.data()[j];
  return finish({m, n}, std::move(out), {x, s},
                [x, s, m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  if (gi[0])
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) (*gi[0])[i * n + j] += g[i * n + j] * s.data()[j];
                  if (gi[1])
                    for (std::size_t i = 0; i < m; ++i)
                      for (std::size_t j = 0; j < n; ++j) (*gi[1])[j] += g[i * n + j] * x.data()[i * n + j];
                });
}

inline Tensor add_scalar(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + s;
  return finish(a.shape(), std::move(out), {a},
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i];
                });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  return finish(a.shape(), std::move(out), {a},
                [a](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i)
                    if (a.data()[i] > 0.0) (*gi[0])[i] += g[i];
                });
}

/// tanh-approximated GELU.
inline Tensor gelu(const Tensor& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.data()[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x)));
  }
  return finish(a.shape(), std::move(out), {a},
                [a](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const double x = a.data()[i];
                    const double u = k * (x + c * x * x * x);
                    const double th = std::tanh(u);
                    const double du = k * (1.0 + 3.0 * c * x * x);
                    const double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
                    (*gi[0])[i] += g[i] * d;
                  }
                });
}

/// Row-wise softmax of x/temperature. Columns at index >= `valid_cols` are
/// masked and receive probability exactly zero.
inline Tensor softmax_rows(const Tensor& x, double temperature,
                           std::size_t valid_cols = std::numeric_limits<std::size_t>::max()) {
  detail::require_matrix(x, "softmax_rows");
  if (!(temperature > 0.0)) throw ParameterError("softmax_rows: temperature must be positive");
  const std::size_t m = x.rows(), n = x.cols();
  const std::size_t v = std::min(valid_cols, n);
  if (v == 0) throw ParameterError("softmax_rows: no unmasked column");
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < v; ++j) {
      out[i * n + j] = std::exp((row[j] - mx) / temperature);
      sum += out[i * n + j];
    }
    for (std::size_t j = 0; j < v; ++j) out[i * n + j] /= sum;
  }
  auto probs = out;
  return finish({m, n}, std::move(out), {x},
                [probs = std::move(probs), m, n, temperature](std::span<const double> g,
                                                              std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < m; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * probs[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      (*gi[0])[i * n + j] += probs[i * n + j] * (g[i * n + j] - dot) / temperature;
                  }
                });
}

/// Per-row normalization to zero mean and unit variance, then gain ⊙ x + shift.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  if (!(eps > 0.0)) throw ParameterError("layer_norm: eps must be positive");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || shift.numel() != n)
    throw DimensionError("layer_norm: gain/shift must have " + std::to_string(n) + " entries");
  std::vector<double> xhat(m * n), inv_std(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += row[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (row[j] - mean) * inv_std[i];
      out[i * n + j] = gain.data()[j] * xhat[i * n + j] + shift.data()[j];
    }
  }
  return finish({m, n}, std::move(out), {x, gain, shift},
                [xhat = std::move(xhat), inv_std = std::move(inv_std), gain, m, n](
                    std::span<const double> g, std::span<std::vector<double>*> gi) {
                  const double nn = static_cast<double>(n);
                  for (std::size_t i = 0; i < m; ++i) {
                    if (gi[0]) {
                      double s1 = 0.0, s2 = 0.0;
                      for (std::size_t j = 0; j < n; ++j) {
                        const double gh = g[i * n + j] * gain.data()[j];
                        s1 += gh;
                        s2 += gh * xhat[i * n + j];
                      }
                      for (std::size_t j = 0; j < n; ++j) {
                        const double gh = g[i * n + j] * gain.data()[j];
                        (*gi[0])[i * n + j] += inv_std[i] * (gh - s1 / nn - xhat[i * n + j] * s2 / nn);
                      }
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                      if (gi[1]) (*gi[1])[j] += g[i * n + j] * xhat[i * n + j];
                      if (gi[2]) (*gi[2])[j] += g[i * n + j];
                    }
                  }
                });
}

/// Scales each row to unit L2 norm. Zero rows are rejected; non-finite rows
/// pass through as NaN so the training loop can report divergence.
inline Tensor normalize_rows(const Tensor& x) {
  detail::require_matrix(x, "normalize_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> norms(m), out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += x(i, j) * x(i, j);
    norms[i] = std::sqrt(s);
    if (norms[i] == 0.0) throw DegenerateInputError("zero-norm feature vector at row " + std::to_string(i));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x(i, j) / norms[i];
  }
  auto unit = out;
  return finish({m, n}, std::move(out), {x},
                [unit = std::move(unit), norms = std::move(norms), m, n](
                    std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < m; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * unit[i * n + j];
                    for (std::size_t j = 0; j < n; ++j)
                      (*gi[0])[i * n + j] += (g[i * n + j] - dot * unit[i * n + j]) / norms[i];
                  }
                });
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_rows");
    if (p.cols() != n)
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    m += p.rows();
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    off += p.numel();
  }
  return finish({m, n}, std::move(out), parts,
                [offsets = std::move(offsets)](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t k = 0; k < gi.size(); ++k) {
                    if (!gi[k]) continue;
                    auto& buf = *gi[k];
                    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[offsets[k] + i];
                  }
                });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::size_t n = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    detail::require_matrix(p, "concat_cols");
    if (p.rows() != m)
      throw DimensionError("concat_cols: row mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    widths.push_back(p.cols());
    n += p.cols();
  }
  std::vector<double> out(m * n);
  std::size_t c0 = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out[i * n + c0 + j] = p(i, j);
    c0 += p.cols();
  }
  return finish({m, n}, std::move(out), parts,
                [widths = std::move(widths), m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  std::size_t c = 0;
                  for (std::size_t k = 0; k < gi.size(); ++k) {
                    const std::size_t w = widths[k];
                    if (gi[k])
                      for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) (*gi[k])[i * w + j] += g[i * n + c + j];
                    c += w;
                  }
                });
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_rows");
  if (count == 0 || begin + count > x.rows())
    throw DimensionError("slice_rows: rows [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                         ") out of range for " + shape_str(x.shape()));
  const std::size_t n = x.cols();
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return finish({count, n}, std::move(out), {x},
                [begin, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[begin * n + i] += g[i];
                });
}

inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t count) {
  detail::require_matrix(x, "slice_cols");
  if (count == 0 || begin + count > x.cols())
    throw DimensionError("slice_cols: columns out of range for " + shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(m * count);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x(i, begin + j);
  return finish({m, count}, std::move(out), {x},
                [begin, count, m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < count; ++j) (*gi[0])[i * n + begin + j] += g[i * count + j];
                });
}

/// Column means, [m×n] -> [1×n].
inline Tensor mean_rows(const Tensor& x) {
  detail::require_matrix(x, "mean_rows");
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += x(i, j);
  for (auto& v : out) v /= static_cast<double>(m);
  return finish({1, n}, std::move(out), {x},
                [m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) (*gi[0])[i * n + j] += g[j] / static_cast<double>(m);
                });
}

/// Sum of all entries as a scalar tensor.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return finish({1}, {s}, {x}, [](std::span<const double> g, std::span<std::vector<double>*> gi) {
    for (auto& v : *gi[0]) v += g[0];
  });
}

/// Single entry (r, c) as a scalar tensor.
inline Tensor pick(const Tensor& x, std::size_t r, std::size_t c) {
  detail::require_matrix(x, "pick");
  if (r >= x.rows() || c >= x.cols())
    throw DimensionError("pick: index out of range for " + shape_str(x.shape()));
  const std::size_t idx = r * x.cols() + c;
  return finish({1}, {x.data()[idx]}, {x}, [idx](std::span<const double> g, std::span<std::vector<double>*> gi) {
    (*gi[0])[idx] += g[0];
  });
}

/// −log(max(x, floor)) elementwise. `clamped`, when given, counts entries that
/// hit the floor.
inline Tensor neg_log(const Tensor& x, double floor = 1e-12, std::size_t* clamped = nullptr) {
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    double v = x.data()[i];
    if (v < floor) {
      v = floor;
      if (clamped) ++*clamped;
    }
    out[i] = -std::log(v);
  }
  return finish(x.shape(), std::move(out), {x},
                [x, floor](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const double v = x.data()[i];
                    if (v >= floor) (*gi[0])[i] -= g[i] / v;
                  }
                });
}

/// Sum of a list of equally shaped tensors.
inline Tensor add_n(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("add_n: no inputs");
  std::vector<double> out(parts.front().numel(), 0.0);
  for (const auto& p : parts) {
    detail::require_same(parts.front(), p, "add_n");
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += p.data()[i];
  }
  return finish(parts.front().shape(), std::move(out), parts,
                [](std::span<const double> g, std::span<std::vector<double>*> gi) {
                  for (auto* slot : gi)
                    if (slot)
                      for (std::size_t i = 0; i < g.size(); ++i) (*slot)[i] += g[i];
                });
}

/// Repeats a [1×n] row m times.
inline Tensor repeat_rows(const Tensor& row, std::size_t m) {
  detail::require_matrix(row, "repeat_rows");
  if (row.rows() != 1) throw DimensionError("repeat_rows: expected a single row, got " + shape_str(row.shape()));
  const std::size_t n = row.cols();
  std::vector<double> out;
  out.reserve(m * n);
  for (std::size_t i = 0; i < m; ++i) out.insert(out.end(), row.data().begin(), row.data().end());
  return finish({m, n}, std::move(out), {row}, [m, n](std::span<const double> g, std::span<std::vector<double>*> gi) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) (*gi[0])[j] += g[i * n + j];
  });
}

}  // namespace coapt::ops
