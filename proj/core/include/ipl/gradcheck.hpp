#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ipl/tensor.hpp"

namespace ipl::nn {

// Result of one finite-difference comparison.
struct GradCheckResult {
  bool ok = true;
  double max_rel_err = 0.0;
  std::string detail;  // set when ok is false
};

// Checks reverse-mode gradients of `fn` against central differences at the
// given inputs. `fn` receives tape-watched copies of `inputs` and must return
// a scalar tensor tracked on the same tape.
//
//   rel_err = |ad - fd| / max(1, |ad|, |fd|)
//
// eps must lie in (0, 1e-3]. Run this at double precision; central
// differences at float lose too many digits to resolve the tolerance.
template <class S>
GradCheckResult finite_diff_check(
    const std::function<TensorT<S>(Tape<S>&, std::vector<TensorT<S>>&)>& fn,
    const std::vector<TensorT<S>>& inputs, double eps = 1e-5, double tol = 1e-4) {
  if (!(eps > 0.0) || eps > 1e-3) throw ShapeMismatch("finite_diff_check: eps must be in (0, 1e-3]");

  // Reverse-mode gradients at the base point.
  std::vector<TensorT<S>> base;
  base.reserve(inputs.size());
  for (const auto& t : inputs) base.push_back(t.clone());
  Tape<S> tape;
  std::vector<TensorT<S>> watched;
  watched.reserve(base.size());
  for (auto& t : base) watched.push_back(tape.watch(t));
  TensorT<S> loss = fn(tape, watched);
  tape.backward(loss);
  std::vector<std::vector<S>> ad;
  ad.reserve(watched.size());
  for (auto& t : watched) ad.push_back(tape.grad(t));

  GradCheckResult result;
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    const Index n = inputs[which].numel();
    for (Index i = 0; i < n; ++i) {
      auto eval = [&](double delta) {
        std::vector<TensorT<S>> pert;
        pert.reserve(inputs.size());
        for (const auto& t : inputs) pert.push_back(t.clone());
        pert[which][i] += static_cast<S>(delta);
        Tape<S> fresh;
        std::vector<TensorT<S>> w;
        w.reserve(pert.size());
        for (auto& t : pert) w.push_back(fresh.watch(t));
        return static_cast<double>(fn(fresh, w).scalar_value());
      };
      const double fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
      const double a = static_cast<double>(ad[which][static_cast<std::size_t>(i)]);
      const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      if (rel > result.max_rel_err) result.max_rel_err = rel;
      if (rel > tol && result.ok) {
        result.ok = false;
        result.detail = "input " + std::to_string(which) + " element " + std::to_string(i) +
                        ": ad=" + std::to_string(a) + " fd=" + std::to_string(fd) +
                        " rel=" + std::to_string(rel);
      }
    }
  }
  return result;
}

}  // namespace ipl::nn
