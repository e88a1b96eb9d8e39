#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mug/tensor.hpp"

namespace mug {

struct GradCheckOptions {
  double eps = 1e-5;
  /// Entries verified per parameter tensor; smaller tensors are checked in
  /// full. Entry selection is a seeded draw, so runs are reproducible.
  size_t max_entries_per_param = 24;
  uint64_t sample_seed = 0x6d7567636864ull;
  /// Central differences of a loss of magnitude ~1 resolve gradients only
  /// down to about ulp(loss) / (2 eps) ~ 1e-11. Entries where analytic and
  /// numeric are BOTH below this floor are consistent at measurement
  /// resolution and contribute zero relative error; they are counted in
  /// `below_resolution`. An analytic/numeric mismatch across the floor still
  /// fails through the relative formula.
  double zero_atol = 1e-6;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  size_t entries_checked = 0;
  size_t below_resolution = 0;
  std::string worst_param;
  size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Central-difference verification of reverse-mode gradients.
///
/// `loss_fn(with_grad)` must evaluate the loss from the current contents of
/// `params`; when `with_grad` is true it must also run a backward pass that
/// accumulates into each parameter's grad (grads are zeroed here first).
/// Meant to run on the double instantiation, i.e. verification mode.
///
/// For every checked entry theta the relative error is
///   |analytic - numeric| / max(1e-12, |analytic| + |numeric|)
/// with numeric = (L(theta+eps) - L(theta-eps)) / (2 eps).
template <typename T>
GradCheckResult grad_check(const std::function<T(bool with_grad)>& loss_fn,
                           const std::vector<std::pair<std::string, Tensor<T>*>>& params,
                           const GradCheckOptions& opts = {});

}  // namespace mug
