#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

#include "mug/gradcheck.hpp"
#include "mug/tensor.hpp"

using namespace mug;

namespace {

TensorD rand_tensor(std::vector<size_t> shape, uint64_t seed, bool requires_grad = true) {
  TensorD t = TensorD::zeros(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.data) v = rng.normal();
  t.requires_grad = requires_grad;
  return t;
}

}  // namespace

TEST_CASE("matmul forward examples") {
  Tape<double> t;
  auto identity = t.constant({2, 2}, {1, 0, 0, 1});
  auto m = t.constant({2, 2}, {1, 2, 3, 4});
  CHECK(t.value(t.matmul(identity, m)) == std::vector<double>{1, 2, 3, 4});

  auto z = t.constant({2, 3}, std::vector<double>(6, 0.0));
  auto any = t.constant({3, 4}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});
  CHECK(t.value(t.matmul(z, any)) == std::vector<double>(8, 0.0));

  // oracle: hand expansion of the 2x2 * 2x1 product
  auto a = t.constant({2, 2}, {1, 2, 3, 4});
  auto b = t.constant({2, 1}, {5, 6});
  CHECK(t.value(t.matmul(a, b)) == std::vector<double>{1 * 5 + 2 * 6, 3 * 5 + 4 * 6});
}

TEST_CASE("matmul shape error names both shapes") {
  Tape<double> t;
  auto a = t.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = t.constant({2, 2}, std::vector<double>(4, 1.0));
  try {
    t.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("softmax rows examples") {
  Tape<double> t;
  auto sym = t.value(t.softmax_rows(t.constant({1, 2}, {0, 0})));
  CHECK(sym[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sym[1] == doctest::Approx(0.5).epsilon(1e-12));

  auto sat = t.value(t.softmax_rows(t.constant({1, 2}, {1000, 0})));
  CHECK(sat[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sat[1] == doctest::Approx(0.0).epsilon(1e-12));

  // oracle: direct exp/sum evaluation
  std::vector<double> row{std::log(1.0), std::log(2.0), std::log(3.0)};
  double z = 0.0;
  for (double x : row) z += std::exp(x);
  auto got = t.value(t.softmax_rows(t.constant({1, 3}, row)));
  for (size_t i = 0; i < 3; ++i)
    CHECK(got[i] == doctest::Approx(std::exp(row[i]) / z).epsilon(1e-12));
  CHECK(got[0] == doctest::Approx(1.0 / 6.0).epsilon(1e-9));
  CHECK(got[1] == doctest::Approx(2.0 / 6.0).epsilon(1e-9));
  CHECK(got[2] == doctest::Approx(3.0 / 6.0).epsilon(1e-9));

  TensorD x = rand_tensor({5, 7}, 11, false);
  auto y = t.value(t.softmax_rows(t.constant(x)));
  for (size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (size_t c = 0; c < 7; ++c) s += y[r * 7 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("layer norm examples") {
  Tape<double> t;
  auto gamma1 = t.constant({2}, {1, 1});
  auto beta0 = t.constant({2}, {0, 0});

  auto flat = t.value(t.layer_norm_rows(t.constant({1, 2}, {3, 3}), gamma1, beta0, 1e-6));
  CHECK(flat[0] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(flat[1] == doctest::Approx(0.0).epsilon(1e-9));

  auto already = t.value(t.layer_norm_rows(t.constant({1, 2}, {1, -1}), gamma1, beta0, 1e-6));
  CHECK(already[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(already[1] == doctest::Approx(-1.0).epsilon(1e-5));

  // oracle by hand: mean 1, biased std 1, then affine
  auto affine = t.value(t.layer_norm_rows(t.constant({1, 2}, {0, 2}), t.constant({2}, {2, 2}),
                                          t.constant({2}, {1, 1}), 1e-6));
  CHECK(affine[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(affine[1] == doctest::Approx(3.0).epsilon(1e-5));
}

TEST_CASE("grad_check on a linear loss is essentially exact") {
  TensorD theta = rand_tensor({3, 4}, 17);
  auto loss_fn = [&](bool with_grad) -> double {
    Tape<double> t;
    auto root = t.sum_all(t.leaf(theta));
    if (with_grad) t.backward(root);
    return t.scalar(root);
  };
  auto res = grad_check<double>(loss_fn, {{"theta", &theta}});
  CHECK(res.max_rel_err < 1e-10);
  for (double g : theta.grad) CHECK(g == 1.0);
}

TEST_CASE("grad_check reports zero for an unused parameter") {
  TensorD used = rand_tensor({2, 2}, 3);
  TensorD unused = rand_tensor({2, 2}, 4);
  auto loss_fn = [&](bool with_grad) -> double {
    Tape<double> t;
    auto root = t.sum_all(t.square(t.leaf(used)));
    if (with_grad) t.backward(root);
    return t.scalar(root);
  };
  auto res = grad_check<double>(loss_fn, {{"used", &used}, {"unused", &unused}});
  CHECK(res.max_rel_err < 1e-8);
  for (double g : unused.grad) CHECK(g == 0.0);
}

TEST_CASE("every primitive backward matches central differences") {
  using Apply =
      std::function<Tape<double>::Val(Tape<double>&, Tape<double>::Val, Tape<double>::Val)>;
  struct Case {
    const char* name;
    std::vector<size_t> a_shape, b_shape;  // b unused when empty
    Apply apply;
  };
  std::vector<Case> cases{
      {"add", {3, 4}, {3, 4}, [](auto& t, auto a, auto b) { return t.add(a, b); }},
      {"sub", {3, 4}, {3, 4}, [](auto& t, auto a, auto b) { return t.sub(a, b); }},
      {"mul", {3, 4}, {3, 4}, [](auto& t, auto a, auto b) { return t.mul(a, b); }},
      {"scale", {3, 4}, {}, [](auto& t, auto a, auto) { return t.scale(a, 0.37); }},
      {"square", {3, 4}, {}, [](auto& t, auto a, auto) { return t.square(a); }},
      {"gelu", {3, 4}, {}, [](auto& t, auto a, auto) { return t.gelu(a); }},
      {"add_bias_rows", {3, 4}, {4},
       [](auto& t, auto a, auto b) { return t.add_bias_rows(a, b); }},
      {"matmul", {3, 4}, {4, 2}, [](auto& t, auto a, auto b) { return t.matmul(a, b); }},
      {"transpose", {3, 4}, {}, [](auto& t, auto a, auto) { return t.transpose(a); }},
      {"softmax_rows", {3, 4}, {}, [](auto& t, auto a, auto) { return t.softmax_rows(a); }},
      {"layer_norm_rows", {3, 4}, {4},
       [](auto& t, auto a, auto b) {
         auto beta = t.constant({4}, {0.1, -0.2, 0.3, 0.0});
         return t.layer_norm_rows(a, b, beta, 1e-6);
       }},
      {"index_rows with repeats", {3, 4}, {},
       [](auto& t, auto a, auto) { return t.index_rows(a, {2, 0, 2, 1, 2}); }},
      {"concat_rows", {2, 4}, {3, 4},
       [](auto& t, auto a, auto b) { return t.concat_rows(a, b); }},
      {"repeat_row", {1, 4}, {}, [](auto& t, auto a, auto) { return t.repeat_row(a, 5); }},
      {"slice_cols", {3, 6}, {}, [](auto& t, auto a, auto) { return t.slice_cols(a, 1, 3); }},
      {"concat_cols", {3, 2}, {3, 3},
       [](auto& t, auto a, auto b) { return t.concat_cols({a, b, a}); }},
      {"softmax_rows_masked", {4, 4}, {},
       [](auto& t, auto a, auto) {
         BoolMask mask;
         mask.rows = mask.cols = 4;
         mask.allowed.assign(16, 0);
         for (size_t q = 0; q < 4; ++q)
           for (size_t k = 0; k <= q; ++k) mask.allowed[q * 4 + k] = 1;
         return t.softmax_rows_masked(a, mask);
       }},
      {"cross_entropy_rows", {4, 5}, {},
       [](auto& t, auto a, auto) { return t.cross_entropy_rows(a, {1, 4, 0, 2}, {1, 1, 0, 1}); }},
  };

  for (auto& c : cases) {
    CAPTURE(c.name);
    TensorD a = rand_tensor(c.a_shape, fnv1a(c.name, std::strlen(c.name)));
    TensorD b = c.b_shape.empty() ? TensorD{} : rand_tensor(c.b_shape, 99);
    std::vector<std::pair<std::string, TensorD*>> params{{"a", &a}};
    if (!c.b_shape.empty()) params.emplace_back("b", &b);
    auto loss_fn = [&](bool with_grad) -> double {
      Tape<double> t;
      auto av = t.leaf(a);
      Tape<double>::Val bv{};
      if (!c.b_shape.empty()) bv = t.leaf(b);
      auto out = c.apply(t, av, bv);
      // funnel through square+sum so every output element feeds the loss
      auto root = t.shape(out) == std::vector<size_t>{1} ? out : t.sum_all(t.square(out));
      if (with_grad) t.backward(root);
      return t.scalar(root);
    };
    GradCheckOptions opts;
    opts.max_entries_per_param = 64;
    auto res = grad_check<double>(loss_fn, params, opts);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, c.name, ": worst ", res.worst_param, "[",
                  res.worst_index, "] analytic=", res.worst_analytic,
                  " numeric=", res.worst_numeric);
  }
}

TEST_CASE("forward evaluation is bit-deterministic") {
  TensorD a = rand_tensor({6, 6}, 21);
  TensorD b = rand_tensor({6, 6}, 22);
  auto run = [&]() {
    Tape<double> t;
    auto x = t.matmul(t.leaf(a), t.leaf(b));
    auto y = t.softmax_rows(t.gelu(x));
    return t.value(y);
  };
  auto v1 = run();
  auto v2 = run();
  CHECK(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(double)) == 0);
}

namespace {

struct TwoLosses {
  Tape<double>::Val l1, l2, sum;
};

/// Shared-trunk two-loss graph; both losses consume the same intermediate so
/// gradient contributions interleave.
TwoLosses build_two_losses(Tape<double>& t, TensorD& w, TensorD& m) {
  auto x = t.matmul(t.leaf(w), t.leaf(m));
  auto l1 = t.sum_all(t.square(x));
  auto l2 = t.sum_all(t.gelu(t.scale(x, 0.5)));
  return {l1, l2, t.add(l1, l2)};
}

}  // namespace

TEST_CASE("gradient accumulation is additive bit-exactly") {
  // Bit-exact additivity is a property of the accumulation discipline, so it
  // is checked on losses whose compute paths meet only at the leaves. When a
  // differentiable intermediate is shared, backward(L1+L2) propagates the
  // summed adjoint through one matmul while the sequential form propagates
  // two adjoints separately; those perform different float arithmetic and can
  // only agree to rounding (checked below at 1e-12).
  TensorD w = rand_tensor({4, 4}, 31);
  TensorD m = rand_tensor({4, 4}, 32);

  auto build_disjoint = [](Tape<double>& t, TensorD& a, TensorD& b) {
    auto l1 = t.sum_all(t.square(t.matmul(t.leaf(a), t.leaf(b))));
    auto l2 = t.sum_all(t.gelu(t.matmul(t.leaf(a), t.leaf(b))));
    return TwoLosses{l1, l2, t.add(l1, l2)};
  };

  Tape<double> combined;
  auto g1 = build_disjoint(combined, w, m);
  combined.backward(g1.sum);
  std::vector<double> joint_w = w.grad, joint_m = m.grad;

  w.zero_grad();
  m.zero_grad();
  Tape<double> sequential;
  auto g2 = build_disjoint(sequential, w, m);
  sequential.backward(g2.l1);
  sequential.backward(g2.l2);

  CHECK(std::memcmp(joint_w.data(), w.grad.data(), joint_w.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(joint_m.data(), m.grad.data(), joint_m.size() * sizeof(double)) == 0);

  // shared-trunk variant agrees to rounding
  w.zero_grad();
  m.zero_grad();
  Tape<double> shared1;
  auto s1 = build_two_losses(shared1, w, m);
  shared1.backward(s1.sum);
  std::vector<double> shared_w = w.grad;
  w.zero_grad();
  m.zero_grad();
  Tape<double> shared2;
  auto s2 = build_two_losses(shared2, w, m);
  shared2.backward(s2.l1);
  shared2.backward(s2.l2);
  for (size_t i = 0; i < shared_w.size(); ++i)
    CHECK(w.grad[i] == doctest::Approx(shared_w[i]).epsilon(1e-12));
}

TEST_CASE("backward result is identical for any valid topological order") {
  TensorD w = rand_tensor({4, 4}, 41);
  TensorD m = rand_tensor({4, 4}, 42);

  Tape<double> t1;
  auto a1 = build_two_losses(t1, w, m);
  t1.backward(a1.sum);
  std::vector<double> ref_w = w.grad, ref_m = m.grad;

  w.zero_grad();
  m.zero_grad();
  Tape<double> t2;
  auto a2 = build_two_losses(t2, w, m);
  // Alternative valid topological order: visit each loss branch en bloc
  // (l2's chain first, then l1's), leaves last.
  std::vector<uint32_t> order{a2.sum.idx, a2.l2.idx};
  order.push_back(a2.l2.idx - 1);  // gelu
  order.push_back(a2.l2.idx - 2);  // scale
  order.push_back(a2.l1.idx);
  order.push_back(a2.l1.idx - 1);  // square
  // remaining nodes in reverse creation order
  for (uint32_t i = a2.sum.idx + 1; i-- > 0;)
    if (std::find(order.begin(), order.end(), i) == order.end()) order.push_back(i);
  t2.backward_in_order(a2.sum, order);

  CHECK(std::memcmp(ref_w.data(), w.grad.data(), ref_w.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(ref_m.data(), m.grad.data(), ref_m.size() * sizeof(double)) == 0);
}

TEST_CASE("rejects non-topological backward orders") {
  Tape<double> t;
  TensorD w = rand_tensor({2, 2}, 43);
  auto x = t.square(t.leaf(w));
  auto root = t.sum_all(x);
  // leaf before its consumer: invalid
  std::vector<uint32_t> bad{0, x.idx, root.idx};
  CHECK_THROWS_AS(t.backward_in_order(root, bad), Error);
}

TEST_CASE("repeated backward doubles leaf gradients exactly") {
  TensorD w = rand_tensor({3, 3}, 51);
  Tape<double> t;
  auto root = t.sum_all(t.square(t.leaf(w)));
  t.backward(root);
  std::vector<double> once = w.grad;
  t.backward(root);
  for (size_t i = 0; i < once.size(); ++i) CHECK(w.grad[i] == once[i] + once[i]);
}

TEST_CASE("tape clear releases every node and stays usable") {
  Tape<double> t;
  TensorD w = rand_tensor({3, 3}, 61);
  t.sum_all(t.leaf(w));
  CHECK(t.node_count() > 0);
  t.clear();
  CHECK(t.node_count() == 0);
  CHECK(t.scalar(t.constant({1}, {2.0})) == 2.0);
}

TEST_CASE("non-finite gradients are rejected with the parameter name") {
  TensorD w = rand_tensor({2, 2}, 71);
  w.name = "w";
  Tape<double> t;
  auto huge = t.constant({2, 2}, std::vector<double>(4, std::numeric_limits<double>::infinity()));
  auto root = t.sum_all(t.mul(t.leaf(w), huge));
  try {
    t.backward(root);
    FAIL("expected VerifyError");
  } catch (const VerifyError& e) {
    CHECK(std::string(e.what()).find("'w'") != std::string::npos);
  }
}

TEST_CASE("backward requires a scalar root") {
  Tape<double> t;
  TensorD w = rand_tensor({2, 2}, 81);
  auto x = t.leaf(w);
  CHECK_THROWS_AS(t.backward(x), ShapeError);
}

TEST_CASE("tensor data must match its shape") {
  CHECK_THROWS_AS(TensorD({2, 3}, {1.0, 2.0}), ShapeError);
}
