#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "kari/numcore/ops.hpp"
#include "kari/numcore/tensor.hpp"

namespace kari::nc {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // elements whose stencil crossed a relu kink
};

namespace detail {

inline GradCheckResult run_grad_check(const std::function<Tensor(const ParamSet&)>& f, ParamSet& params, double h,
                                      bool skip_kinks) {
  std::vector<std::uint8_t> base_mask, mask;
  auto eval = [&](std::vector<std::uint8_t>* sink) {
    sink->clear();
    relu_mask_sink = skip_kinks ? sink : nullptr;
    const double v = f(params).item();
    relu_mask_sink = nullptr;
    return v;
  };

  relu_mask_sink = skip_kinks ? &base_mask : nullptr;
  const Tensor loss = f(params);
  relu_mask_sink = nullptr;
  const Gradients analytic = backward(loss, params);

  GradCheckResult res;
  for (auto& [name, tensor] : params) {
    auto& data = tensor.leaf_data();
    const auto& ga = analytic.at(name);
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = eval(&mask);
      bool crossed = skip_kinks && mask != base_mask;
      data[i] = orig - h;
      const double fm = eval(&mask);
      crossed = crossed || (skip_kinks && mask != base_mask);
      data[i] = orig;
      if (crossed) {
        ++res.skipped;
        continue;
      }
      const double num = (fp - fm) / (2.0 * h);
      const double denom = std::max({std::abs(ga[i]), std::abs(num), 1e-8});
      const double err = std::abs(ga[i] - num) / denom;
      ++res.checked;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = name;
        res.worst_index = i;
        res.analytic = ga[i];
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace detail

/// Compares reverse-mode gradients of `f` against central differences
/// (f(p+h) - f(p-h)) / 2h for every element of every parameter. The relative
/// error of one element is |a - n| / max(|a|, |n|, 1e-8).
///
/// `f` must rebuild its graph from `params` on every call; parameters are
/// perturbed in place and restored afterwards.
inline GradCheckResult grad_check(const std::function<Tensor(const ParamSet&)>& f, ParamSet& params,
                                  double h = 1e-5) {
  return detail::run_grad_check(f, params, h, false);
}

/// Same comparison, but an element is left out (and counted in `skipped`)
/// when perturbing it by +-h flips any relu activation inside `f`: the
/// function is not differentiable across that stencil, so the central
/// difference there measures the kink rather than the gradient.
inline GradCheckResult grad_check_smooth(const std::function<Tensor(const ParamSet&)>& f, ParamSet& params,
                                         double h = 1e-5) {
  return detail::run_grad_check(f, params, h, true);
}

}  // namespace kari::nc
