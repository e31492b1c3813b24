#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <vector>

#include "coapt/tensor.hpp"

namespace coapt {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;   // index into the params list
  std::size_t worst_index = 0;   // flat index within that param
  double analytic = 0.0;         // at the worst coordinate
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

/// Compares backward() against central differences for every coordinate of
/// `params`. `loss_fn` must build a scalar loss from the current parameter
/// values; it is called under a fresh tape for the analytic pass and with
/// recording disabled for the numeric passes.
///
/// Relative error per coordinate is |analytic - numeric| / max(|analytic|, 1e-8).
inline GradCheckResult finite_diff_check(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params,
                                         double h = 1e-5) {
  if (!(h > 0.0)) throw ParameterError("finite_diff_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss = loss_fn();
    if (loss.numel() != 1) throw ContractError("finite_diff_check: loss must be scalar");
    if (loss.requires_grad()) {
      Gradients g = tape.backward(loss);
      for (const auto& p : params) analytic.push_back(g.get_or_zero(p));
    } else {
      for (const auto& p : params) analytic.push_back(Tensor::zeros(p.shape()));
    }
  }

  auto eval = [&] {
    NoGradScope off;
    return loss_fn().item();
  };

  const double base_a = eval();
  const double base_b = eval();
  if (std::memcmp(&base_a, &base_b, sizeof(double)) != 0)
    throw DeterminismError("finite_diff_check: loss differs between two identical evaluations");

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double fp = eval();
      values[i] = saved - h;
      const double fm = eval();
      values[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[pi].data()[i];
      const double rel = std::abs(a - numeric) / std::max(std::abs(a), 1e-8);
      ++res.coordinates;
      if (res.coordinates == 1 || rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = pi;
        res.worst_index = i;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

}  // namespace coapt
