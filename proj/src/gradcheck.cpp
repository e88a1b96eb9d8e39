#include "mug/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace mug {

namespace {

/// Deterministic choice of `want` distinct entry indices out of `n`.
std::vector<size_t> pick_entries(size_t n, size_t want, uint64_t seed) {
  std::vector<size_t> all(n);
  for (size_t i = 0; i < n; ++i) all[i] = i;
  if (want >= n) return all;
  Rng rng(seed);
  rng.shuffle(all);
  all.resize(want);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace

template <typename T>
GradCheckResult grad_check(const std::function<T(bool)>& loss_fn,
                           const std::vector<std::pair<std::string, Tensor<T>*>>& params,
                           const GradCheckOptions& opts) {
  for (auto& [name, t] : params) t->zero_grad();
  T base = loss_fn(true);
  if (!std::isfinite(static_cast<double>(base)))
    throw VerifyError("grad_check: non-finite loss at the unperturbed point");

  // Snapshot analytic gradients before finite differencing mutates anything.
  std::vector<std::vector<T>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, t] : params) {
    t->ensure_grad();
    analytic.push_back(t->grad);
  }

  GradCheckResult res;
  for (size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p].first;
    Tensor<T>* t = params[p].second;
    uint64_t seed = hash_combine(hash_combine(opts.sample_seed, name), uint64_t{p});
    for (size_t i : pick_entries(t->numel(), opts.max_entries_per_param, seed)) {
      T saved = t->data[i];
      t->data[i] = saved + static_cast<T>(opts.eps);
      T up = loss_fn(false);
      t->data[i] = saved - static_cast<T>(opts.eps);
      T down = loss_fn(false);
      t->data[i] = saved;
      if (!std::isfinite(static_cast<double>(up)) || !std::isfinite(static_cast<double>(down)))
        throw VerifyError("grad_check: non-finite loss while perturbing '" + name + "' entry " +
                          std::to_string(i));
      double numeric = (static_cast<double>(up) - static_cast<double>(down)) / (2.0 * opts.eps);
      double a = static_cast<double>(analytic[p][i]);
      ++res.entries_checked;
      if (std::abs(a) < opts.zero_atol && std::abs(numeric) < opts.zero_atol) {
        ++res.below_resolution;
        continue;
      }
      double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_param = name;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
  }
  return res;
}

template GradCheckResult grad_check<float>(
    const std::function<float(bool)>&,
    const std::vector<std::pair<std::string, Tensor<float>*>>&, const GradCheckOptions&);
template GradCheckResult grad_check<double>(
    const std::function<double(bool)>&,
    const std::vector<std::pair<std::string, Tensor<double>*>>&, const GradCheckOptions&);

}  // namespace mug
