// scratch diagnostics
#include <cstdio>

#include "mug/eval.hpp"

int main() {
  mug::ModelConfig config;
  for (double eps : {1e-5, 1e-4, 1e-3, 3e-3}) {
    for (uint64_t seed : {7ull, 1ull, 2ull, 3ull, 4ull}) {
      mug::GradCheckOptions opts;
      opts.eps = eps;
      opts.max_entries_per_param = 8;
      auto r = mug::joint_loss_grad_check(config, seed, opts);
      std::printf("eps=%.0e seed=%llu max=%.3g worst=%s[%zu] a=%.6g n=%.6g\n", eps,
                  (unsigned long long)seed, r.max_rel_err, r.worst_param.c_str(), r.worst_index,
                  r.worst_analytic, r.worst_numeric);
    }
  }
  return 0;
}
