#include "mug/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

namespace mug {

std::string shape_str(const std::vector<size_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

std::string fmt_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

std::string fmt_float(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

// c[m,n] += a[m,k] * b[k,n]; for every (i,j) the contraction index runs
// left to right, which pins the floating-point result.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
  for (size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
std::vector<T> transpose_copy(const std::vector<T>& x, size_t rows, size_t cols) {
  std::vector<T> y(x.size());
  for (size_t r = 0; r < rows; ++r)
    for (size_t c = 0; c < cols; ++c) y[c * rows + r] = x[r * cols + c];
  return y;
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

void require_2d(const std::vector<size_t>& s, const char* op) {
  if (s.size() != 2)
    throw ShapeError(std::string(op) + ": expected a 2-d tensor, got " + shape_str(s));
}

// tanh-form gelu constants
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

}  // namespace

template <typename T>
typename Tape<T>::Val Tape<T>::make_node(std::vector<size_t> shape, std::vector<T> val,
                                         std::vector<Val> inputs, const char* op,
                                         std::function<void(Tape&, uint32_t)> back) {
  Node n;
  n.shape = std::move(shape);
  n.val = std::move(val);
  n.op = op;
  n.inputs.reserve(inputs.size());
  for (Val in : inputs) {
    n.inputs.push_back(Edge{in.idx, next_edge_id_++});
    if (node(in).requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Val{static_cast<uint32_t>(nodes_.size() - 1)};
}

template <typename T>
typename Tape<T>::Val Tape<T>::leaf(Tensor<T>& t) {
  auto it = leaf_cache_.find(&t);
  if (it != leaf_cache_.end()) return Val{it->second};
  Node n;
  n.shape = t.shape;
  n.val = t.data;
  n.bound = &t;
  n.requires_grad = t.requires_grad;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  uint32_t idx = static_cast<uint32_t>(nodes_.size() - 1);
  leaf_cache_.emplace(&t, idx);
  return Val{idx};
}

template <typename T>
typename Tape<T>::Val Tape<T>::constant(std::vector<size_t> shape, std::vector<T> data) {
  if (data.size() != Tensor<T>::numel_of(shape))
    throw ShapeError("constant: data length does not match shape " + shape_str(shape));
  Node n;
  n.shape = std::move(shape);
  n.val = std::move(data);
  n.op = "const";
  nodes_.push_back(std::move(n));
  return Val{static_cast<uint32_t>(nodes_.size() - 1)};
}

template <typename T>
T Tape<T>::scalar(Val v) const {
  const Node& n = node(v);
  if (n.val.size() != 1)
    throw ShapeError("scalar: tensor has shape " + shape_str(n.shape));
  return n.val[0];
}

// --------------------------------------------------------------- elementwise

template <typename T>
typename Tape<T>::Val Tape<T>::add(Val a, Val b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.shape != nb.shape)
    throw ShapeError("add: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] + nb.val[i];
  return make_node(na.shape, std::move(out), {a, b}, "add", [](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    t.push_contrib(s.inputs[0], s.grad);
    t.push_contrib(s.inputs[1], s.grad);
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::sub(Val a, Val b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.shape != nb.shape)
    throw ShapeError("sub: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] - nb.val[i];
  return make_node(na.shape, std::move(out), {a, b}, "sub", [](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    t.push_contrib(s.inputs[0], s.grad);
    std::vector<T> neg(s.grad.size());
    for (size_t i = 0; i < neg.size(); ++i) neg[i] = -s.grad[i];
    t.push_contrib(s.inputs[1], std::move(neg));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::mul(Val a, Val b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  if (na.shape != nb.shape)
    throw ShapeError("mul: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape));
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * nb.val[i];
  return make_node(na.shape, std::move(out), {a, b}, "mul", [](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    const std::vector<T>& av = t.nodes_[s.inputs[0].producer].val;
    const std::vector<T>& bv = t.nodes_[s.inputs[1].producer].val;
    std::vector<T> da(s.grad.size()), db(s.grad.size());
    for (size_t i = 0; i < s.grad.size(); ++i) {
      da[i] = s.grad[i] * bv[i];
      db[i] = s.grad[i] * av[i];
    }
    t.push_contrib(s.inputs[0], std::move(da));
    t.push_contrib(s.inputs[1], std::move(db));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::scale(Val a, T c) {
  const Node& na = node(a);
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * c;
  return make_node(na.shape, std::move(out), {a}, "scale", [c](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    std::vector<T> da(s.grad.size());
    for (size_t i = 0; i < da.size(); ++i) da[i] = s.grad[i] * c;
    t.push_contrib(s.inputs[0], std::move(da));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::square(Val a) {
  const Node& na = node(a);
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na.val[i] * na.val[i];
  return make_node(na.shape, std::move(out), {a}, "square", [](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    const std::vector<T>& xv = t.nodes_[s.inputs[0].producer].val;
    std::vector<T> da(s.grad.size());
    for (size_t i = 0; i < da.size(); ++i) da[i] = s.grad[i] * T(2) * xv[i];
    t.push_contrib(s.inputs[0], std::move(da));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::gelu(Val a) {
  const Node& na = node(a);
  std::vector<T> out(na.val.size());
  for (size_t i = 0; i < out.size(); ++i) {
    double x = static_cast<double>(na.val[i]);
    double u = kGeluC * (x + kGeluA * x * x * x);
    out[i] = static_cast<T>(0.5 * x * (1.0 + std::tanh(u)));
  }
  return make_node(na.shape, std::move(out), {a}, "gelu", [](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    const std::vector<T>& xv = t.nodes_[s.inputs[0].producer].val;
    std::vector<T> da(s.grad.size());
    for (size_t i = 0; i < da.size(); ++i) {
      double x = static_cast<double>(xv[i]);
      double u = kGeluC * (x + kGeluA * x * x * x);
      double th = std::tanh(u);
      double sech2 = 1.0 - th * th;
      double d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      da[i] = static_cast<T>(static_cast<double>(s.grad[i]) * d);
    }
    t.push_contrib(s.inputs[0], std::move(da));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::add_bias_rows(Val x, Val bias) {
  const Node& nx = node(x);
  const Node& nb = node(bias);
  require_2d(nx.shape, "add_bias_rows");
  if (nb.shape.size() != 1 || nb.shape[0] != nx.shape[1])
    throw ShapeError("add_bias_rows: bias " + shape_str(nb.shape) + " does not match " +
                     shape_str(nx.shape));
  size_t m = nx.shape[0], n = nx.shape[1];
  std::vector<T> out(nx.val.size());
  for (size_t r = 0; r < m; ++r)
    for (size_t c = 0; c < n; ++c) out[r * n + c] = nx.val[r * n + c] + nb.val[c];
  return make_node(nx.shape, std::move(out), {x, bias}, "add_bias_rows",
                   [m, n](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     t.push_contrib(s.inputs[0], s.grad);
                     std::vector<T> db(n, T(0));
                     for (size_t r = 0; r < m; ++r)
                       for (size_t c = 0; c < n; ++c) db[c] += s.grad[r * n + c];
                     t.push_contrib(s.inputs[1], std::move(db));
                   });
}

// ------------------------------------------------------------------- matmul

template <typename T>
typename Tape<T>::Val Tape<T>::matmul(Val a, Val b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require_2d(na.shape, "matmul");
  require_2d(nb.shape, "matmul");
  if (na.shape[1] != nb.shape[0])
    throw ShapeError("matmul: inner dimensions differ, " + shape_str(na.shape) + " vs " +
                     shape_str(nb.shape));
  size_t m = na.shape[0], k = na.shape[1], n = nb.shape[1];
  std::vector<T> out(m * n, T(0));
  matmul_acc(na.val.data(), nb.val.data(), out.data(), m, k, n);
  return make_node({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    const std::vector<T>& av = t.nodes_[s.inputs[0].producer].val;
    const std::vector<T>& bv = t.nodes_[s.inputs[1].producer].val;
    // dA = dC * B^T, dB = A^T * dC
    std::vector<T> bt = transpose_copy(bv, k, n);
    std::vector<T> da(m * k, T(0));
    matmul_acc(s.grad.data(), bt.data(), da.data(), m, n, k);
    t.push_contrib(s.inputs[0], std::move(da));
    std::vector<T> at = transpose_copy(av, m, k);
    std::vector<T> db(k * n, T(0));
    matmul_acc(at.data(), s.grad.data(), db.data(), k, m, n);
    t.push_contrib(s.inputs[1], std::move(db));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::transpose(Val a) {
  const Node& na = node(a);
  require_2d(na.shape, "transpose");
  size_t m = na.shape[0], n = na.shape[1];
  return make_node({n, m}, transpose_copy(na.val, m, n), {a}, "transpose",
                   [m, n](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     t.push_contrib(s.inputs[0], transpose_copy(s.grad, n, m));
                   });
}

// ------------------------------------------------------------ row softmaxes

template <typename T>
typename Tape<T>::Val Tape<T>::softmax_rows(Val x) {
  const Node& nx = node(x);
  require_2d(nx.shape, "softmax_rows");
  size_t m = nx.shape[0], n = nx.shape[1];
  std::vector<T> out(m * n);
  for (size_t r = 0; r < m; ++r) {
    const T* row = nx.val.data() + r * n;
    T* orow = out.data() + r * n;
    T mx = row[0];
    for (size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    T sum = T(0);
    for (size_t c = 0; c < n; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (size_t c = 0; c < n; ++c) orow[c] /= sum;
  }
  return make_node(nx.shape, std::move(out), {x}, "softmax_rows", [m, n](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    const std::vector<T>& y = s.val;
    std::vector<T> dx(m * n);
    for (size_t r = 0; r < m; ++r) {
      T dot = T(0);
      for (size_t c = 0; c < n; ++c) dot += s.grad[r * n + c] * y[r * n + c];
      for (size_t c = 0; c < n; ++c)
        dx[r * n + c] = y[r * n + c] * (s.grad[r * n + c] - dot);
    }
    t.push_contrib(s.inputs[0], std::move(dx));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::softmax_rows_masked(Val x, const BoolMask& mask) {
  const Node& nx = node(x);
  require_2d(nx.shape, "softmax_rows_masked");
  size_t m = nx.shape[0], n = nx.shape[1];
  if (mask.rows != m || mask.cols != n)
    throw ShapeError("softmax_rows_masked: mask " + std::to_string(mask.rows) + "x" +
                     std::to_string(mask.cols) + " does not match " + shape_str(nx.shape));
  auto allowed = std::make_shared<std::vector<uint8_t>>(mask.allowed);
  std::vector<T> out(m * n, T(0));
  for (size_t r = 0; r < m; ++r) {
    const T* row = nx.val.data() + r * n;
    const uint8_t* al = allowed->data() + r * n;
    T* orow = out.data() + r * n;
    bool any = false;
    T mx = T(0);
    for (size_t c = 0; c < n; ++c) {
      if (!al[c]) continue;
      mx = any ? std::max(mx, row[c]) : row[c];
      any = true;
    }
    if (!any) throw ConfigError("softmax_rows_masked: row " + std::to_string(r) + " allows no key");
    T sum = T(0);
    for (size_t c = 0; c < n; ++c) {
      if (!al[c]) continue;
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (size_t c = 0; c < n; ++c)
      if (al[c]) orow[c] /= sum;
  }
  return make_node(nx.shape, std::move(out), {x}, "softmax_rows_masked",
                   [m, n, allowed](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     const std::vector<T>& y = s.val;
                     std::vector<T> dx(m * n, T(0));
                     for (size_t r = 0; r < m; ++r) {
                       const uint8_t* al = allowed->data() + r * n;
                       T dot = T(0);
                       for (size_t c = 0; c < n; ++c)
                         if (al[c]) dot += s.grad[r * n + c] * y[r * n + c];
                       for (size_t c = 0; c < n; ++c)
                         if (al[c]) dx[r * n + c] = y[r * n + c] * (s.grad[r * n + c] - dot);
                     }
                     t.push_contrib(s.inputs[0], std::move(dx));
                   });
}

// ---------------------------------------------------------------- layernorm

template <typename T>
typename Tape<T>::Val Tape<T>::layer_norm_rows(Val x, Val gamma, Val beta, T eps) {
  const Node& nx = node(x);
  const Node& ng = node(gamma);
  const Node& nb = node(beta);
  require_2d(nx.shape, "layer_norm_rows");
  size_t m = nx.shape[0], n = nx.shape[1];
  if (ng.shape != std::vector<size_t>{n} || nb.shape != std::vector<size_t>{n})
    throw ShapeError("layer_norm_rows: gamma/beta must be [" + std::to_string(n) + "]");
  if (eps <= T(0)) throw ConfigError("layer_norm_rows: eps must be positive");
  auto xhat = std::make_shared<std::vector<T>>(m * n);
  auto inv_std = std::make_shared<std::vector<T>>(m);
  std::vector<T> out(m * n);
  for (size_t r = 0; r < m; ++r) {
    const T* row = nx.val.data() + r * n;
    T mean = T(0);
    for (size_t c = 0; c < n; ++c) mean += row[c];
    mean /= static_cast<T>(n);
    T var = T(0);
    for (size_t c = 0; c < n; ++c) {
      T d = row[c] - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (size_t c = 0; c < n; ++c) {
      T xh = (row[c] - mean) * is;
      (*xhat)[r * n + c] = xh;
      out[r * n + c] = ng.val[c] * xh + nb.val[c];
    }
  }
  return make_node(nx.shape, std::move(out), {x, gamma, beta}, "layer_norm_rows",
                   [m, n, xhat, inv_std](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     const std::vector<T>& gv = t.nodes_[s.inputs[1].producer].val;
                     std::vector<T> dx(m * n), dgamma(n, T(0)), dbeta(n, T(0));
                     for (size_t r = 0; r < m; ++r) {
                       const T* dy = s.grad.data() + r * n;
                       const T* xh = xhat->data() + r * n;
                       T mg = T(0), mgx = T(0);
                       for (size_t c = 0; c < n; ++c) {
                         T g = dy[c] * gv[c];
                         mg += g;
                         mgx += g * xh[c];
                       }
                       mg /= static_cast<T>(n);
                       mgx /= static_cast<T>(n);
                       T is = (*inv_std)[r];
                       for (size_t c = 0; c < n; ++c) {
                         T g = dy[c] * gv[c];
                         dx[r * n + c] = (g - mg - xh[c] * mgx) * is;
                         dgamma[c] += dy[c] * xh[c];
                         dbeta[c] += dy[c];
                       }
                     }
                     t.push_contrib(s.inputs[0], std::move(dx));
                     t.push_contrib(s.inputs[1], std::move(dgamma));
                     t.push_contrib(s.inputs[2], std::move(dbeta));
                   });
}

// ----------------------------------------------------------- row shuffling

template <typename T>
typename Tape<T>::Val Tape<T>::index_rows(Val x, std::vector<uint32_t> indices) {
  const Node& nx = node(x);
  require_2d(nx.shape, "index_rows");
  size_t m = nx.shape[0], n = nx.shape[1];
  for (uint32_t i : indices)
    if (i >= m)
      throw ShapeError("index_rows: index " + std::to_string(i) + " out of range [0," +
                       std::to_string(m) + ")");
  auto idx = std::make_shared<std::vector<uint32_t>>(std::move(indices));
  std::vector<T> out(idx->size() * n);
  for (size_t r = 0; r < idx->size(); ++r)
    std::copy_n(nx.val.data() + (*idx)[r] * n, n, out.data() + r * n);
  return make_node({idx->size(), n}, std::move(out), {x}, "index_rows",
                   [m, n, idx](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     std::vector<T> dx(m * n, T(0));
                     for (size_t r = 0; r < idx->size(); ++r) {
                       T* drow = dx.data() + (*idx)[r] * n;
                       const T* grow = s.grad.data() + r * n;
                       for (size_t c = 0; c < n; ++c) drow[c] += grow[c];
                     }
                     t.push_contrib(s.inputs[0], std::move(dx));
                   });
}

template <typename T>
typename Tape<T>::Val Tape<T>::concat_rows(Val a, Val b) {
  const Node& na = node(a);
  const Node& nb = node(b);
  require_2d(na.shape, "concat_rows");
  require_2d(nb.shape, "concat_rows");
  if (na.shape[1] != nb.shape[1])
    throw ShapeError("concat_rows: column mismatch " + shape_str(na.shape) + " vs " +
                     shape_str(nb.shape));
  size_t ma = na.shape[0], mb = nb.shape[0], n = na.shape[1];
  std::vector<T> out;
  out.reserve((ma + mb) * n);
  out.insert(out.end(), na.val.begin(), na.val.end());
  out.insert(out.end(), nb.val.begin(), nb.val.end());
  return make_node({ma + mb, n}, std::move(out), {a, b}, "concat_rows",
                   [ma, mb, n](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     t.push_contrib(s.inputs[0],
                                    std::vector<T>(s.grad.begin(), s.grad.begin() + ma * n));
                     t.push_contrib(s.inputs[1],
                                    std::vector<T>(s.grad.begin() + ma * n, s.grad.end()));
                   });
}

template <typename T>
typename Tape<T>::Val Tape<T>::repeat_row(Val x, size_t count) {
  const Node& nx = node(x);
  require_2d(nx.shape, "repeat_row");
  if (nx.shape[0] != 1) throw ShapeError("repeat_row: expected a single row, got " + shape_str(nx.shape));
  size_t n = nx.shape[1];
  std::vector<T> out(count * n);
  for (size_t r = 0; r < count; ++r) std::copy_n(nx.val.data(), n, out.data() + r * n);
  return make_node({count, n}, std::move(out), {x}, "repeat_row",
                   [count, n](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     std::vector<T> dx(n, T(0));
                     for (size_t r = 0; r < count; ++r)
                       for (size_t c = 0; c < n; ++c) dx[c] += s.grad[r * n + c];
                     t.push_contrib(s.inputs[0], std::move(dx));
                   });
}

template <typename T>
typename Tape<T>::Val Tape<T>::slice_cols(Val x, size_t start, size_t len) {
  const Node& nx = node(x);
  require_2d(nx.shape, "slice_cols");
  size_t m = nx.shape[0], n = nx.shape[1];
  if (start + len > n)
    throw ShapeError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") exceeds " + shape_str(nx.shape));
  std::vector<T> out(m * len);
  for (size_t r = 0; r < m; ++r)
    std::copy_n(nx.val.data() + r * n + start, len, out.data() + r * len);
  return make_node({m, len}, std::move(out), {x}, "slice_cols",
                   [m, n, start, len](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     std::vector<T> dx(m * n, T(0));
                     for (size_t r = 0; r < m; ++r)
                       std::copy_n(s.grad.data() + r * len, len, dx.data() + r * n + start);
                     t.push_contrib(s.inputs[0], std::move(dx));
                   });
}

template <typename T>
typename Tape<T>::Val Tape<T>::concat_cols(const std::vector<Val>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  size_t m = node(parts[0]).shape.size() == 2 ? node(parts[0]).shape[0] : 0;
  size_t total = 0;
  std::vector<size_t> widths;
  for (Val p : parts) {
    const Node& np = node(p);
    require_2d(np.shape, "concat_cols");
    if (np.shape[0] != m)
      throw ShapeError("concat_cols: row mismatch " + shape_str(np.shape));
    widths.push_back(np.shape[1]);
    total += np.shape[1];
  }
  std::vector<T> out(m * total);
  size_t off = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    const Node& np = node(parts[i]);
    for (size_t r = 0; r < m; ++r)
      std::copy_n(np.val.data() + r * widths[i], widths[i], out.data() + r * total + off);
    off += widths[i];
  }
  return make_node({m, total}, std::move(out), parts, "concat_cols",
                   [m, total, widths](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     size_t off = 0;
                     for (size_t i = 0; i < widths.size(); ++i) {
                       std::vector<T> dp(m * widths[i]);
                       for (size_t r = 0; r < m; ++r)
                         std::copy_n(s.grad.data() + r * total + off, widths[i],
                                     dp.data() + r * widths[i]);
                       t.push_contrib(s.inputs[i], std::move(dp));
                       off += widths[i];
                     }
                   });
}

// --------------------------------------------------------------- reductions

template <typename T>
typename Tape<T>::Val Tape<T>::sum_all(Val x) {
  const Node& nx = node(x);
  T sum = T(0);
  for (T v : nx.val) sum += v;
  size_t len = nx.val.size();
  return make_node({1}, {sum}, {x}, "sum_all", [len](Tape& t, uint32_t self) {
    Node& s = t.nodes_[self];
    t.push_contrib(s.inputs[0], std::vector<T>(len, s.grad[0]));
  });
}

template <typename T>
typename Tape<T>::Val Tape<T>::cross_entropy_rows(Val logits, const std::vector<int32_t>& labels,
                                                  const std::vector<uint8_t>& supervised) {
  const Node& nl = node(logits);
  require_2d(nl.shape, "cross_entropy_rows");
  size_t m = nl.shape[0], n = nl.shape[1];
  if (labels.size() != m || supervised.size() != m)
    throw ShapeError("cross_entropy_rows: labels/mask length must equal row count " +
                     std::to_string(m));
  size_t count = 0;
  for (size_t r = 0; r < m; ++r) {
    if (!supervised[r]) continue;
    ++count;
    if (labels[r] < 0 || static_cast<size_t>(labels[r]) >= n)
      throw ShapeError("cross_entropy_rows: label " + std::to_string(labels[r]) +
                       " out of range [0," + std::to_string(n) + ") at row " + std::to_string(r));
  }
  if (count == 0) throw ConfigError("cross_entropy_rows: no supervised position");
  auto probs = std::make_shared<std::vector<T>>(m * n, T(0));
  auto lab = std::make_shared<std::vector<int32_t>>(labels);
  auto sup = std::make_shared<std::vector<uint8_t>>(supervised);
  T total = T(0);
  for (size_t r = 0; r < m; ++r) {
    if (!(*sup)[r]) continue;
    const T* row = nl.val.data() + r * n;
    T mx = row[0];
    for (size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    T sum = T(0);
    for (size_t c = 0; c < n; ++c) {
      T e = std::exp(row[c] - mx);
      (*probs)[r * n + c] = e;
      sum += e;
    }
    for (size_t c = 0; c < n; ++c) (*probs)[r * n + c] /= sum;
    total += (mx + std::log(sum)) - row[(*lab)[r]];
  }
  T loss = total / static_cast<T>(count);
  return make_node({1}, {loss}, {logits}, "cross_entropy_rows",
                   [m, n, count, probs, lab, sup](Tape& t, uint32_t self) {
                     Node& s = t.nodes_[self];
                     T g = s.grad[0] / static_cast<T>(count);
                     std::vector<T> dx(m * n, T(0));
                     for (size_t r = 0; r < m; ++r) {
                       if (!(*sup)[r]) continue;
                       for (size_t c = 0; c < n; ++c) dx[r * n + c] = g * (*probs)[r * n + c];
                       dx[r * n + static_cast<size_t>((*lab)[r])] -= g;
                     }
                     t.push_contrib(s.inputs[0], std::move(dx));
                   });
}

// ----------------------------------------------------------------- backward

template <typename T>
void Tape<T>::push_contrib(const Edge& e, std::vector<T> contrib) {
  Node& p = nodes_[e.producer];
  if (!p.requires_grad) return;
  p.pending.emplace_back(e.id, std::move(contrib));
}

template <typename T>
void Tape<T>::finalize_grad(uint32_t idx) {
  Node& n = nodes_[idx];
  n.grad.assign(n.val.size(), T(0));
  std::sort(n.pending.begin(), n.pending.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [eid, contrib] : n.pending) {
    (void)eid;
    for (size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += contrib[i];
  }
  n.pending.clear();
  n.pending.shrink_to_fit();
}

template <typename T>
std::vector<Tensor<T>*> Tape<T>::backward(Val root) {
  std::vector<uint32_t> order;
  order.reserve(root.idx + 1);
  for (uint32_t i = root.idx + 1; i-- > 0;) order.push_back(i);
  return run_backward(root, order);
}

template <typename T>
std::vector<Tensor<T>*> Tape<T>::backward_in_order(Val root,
                                                   const std::vector<uint32_t>& order) {
  // Every node must appear after all of its consumers within the order.
  std::vector<int64_t> pos(nodes_.size(), -1);
  for (size_t i = 0; i < order.size(); ++i) {
    if (order[i] >= nodes_.size()) throw Error("backward_in_order: index out of range");
    if (pos[order[i]] >= 0) throw Error("backward_in_order: duplicate index in order");
    pos[order[i]] = static_cast<int64_t>(i);
  }
  for (uint32_t i : order)
    for (const Edge& e : nodes_[i].inputs)
      if (pos[e.producer] >= 0 && pos[e.producer] <= pos[i])
        throw Error("backward_in_order: order is not topological");
  return run_backward(root, order);
}

template <typename T>
std::vector<Tensor<T>*> Tape<T>::run_backward(Val root, const std::vector<uint32_t>& order) {
  const Node& rn = node(root);
  if (rn.val.size() != 1)
    throw ShapeError("backward: root must be scalar, got " + shape_str(rn.shape));
  std::vector<Tensor<T>*> touched;
  if (!rn.requires_grad) return touched;

  // Restrict the sweep to ancestors of the root.
  std::vector<uint8_t> reachable(nodes_.size(), 0);
  std::vector<uint32_t> stack{root.idx};
  reachable[root.idx] = 1;
  while (!stack.empty()) {
    uint32_t i = stack.back();
    stack.pop_back();
    for (const Edge& e : nodes_[i].inputs) {
      if (!reachable[e.producer] && nodes_[e.producer].requires_grad) {
        reachable[e.producer] = 1;
        stack.push_back(e.producer);
      }
    }
  }

  for (uint32_t i : order) {
    if (!reachable[i] || !nodes_[i].requires_grad) continue;
    if (i == root.idx) {
      nodes_[i].grad.assign(1, T(1));
      nodes_[i].pending.clear();
    } else {
      finalize_grad(i);
    }
    Node& n = nodes_[i];
    if (n.bound) {
      n.bound->ensure_grad();
      for (size_t j = 0; j < n.grad.size(); ++j) n.bound->grad[j] += n.grad[j];
      if (!all_finite(n.bound->grad))
        throw VerifyError("non-finite gradient in parameter '" +
                          (n.bound->name.empty() ? std::string("<unnamed>") : n.bound->name) +
                          "'");
      touched.push_back(n.bound);
    } else if (n.back) {
      n.back(*this, i);
    }
    n.grad.clear();
    n.grad.shrink_to_fit();
  }

  // Report touched leaves in binding order so callers iterate deterministically.
  std::sort(touched.begin(), touched.end(), [this](Tensor<T>* a, Tensor<T>* b) {
    return leaf_cache_.at(a) < leaf_cache_.at(b);
  });
  return touched;
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  nodes_.shrink_to_fit();
  leaf_cache_.clear();
  next_edge_id_ = 0;
}

template class Tape<float>;
template class Tape<double>;

}  // namespace mug
