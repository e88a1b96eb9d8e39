#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mug/common.hpp"

namespace mug {

/// Dense row-major tensor. Plain storage; differentiation happens on a Tape.
/// Instantiated for float (training) and double (verification mode).
template <typename T>
struct Tensor {
  std::vector<size_t> shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // same length as data once a backward pass has touched it
  std::string name;     // set for registered model parameters

  Tensor() = default;
  Tensor(std::vector<size_t> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel_of(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(std::vector<size_t> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.assign(numel_of(t.shape), T(0));
    return t;
  }

  static size_t numel_of(const std::vector<size_t>& s) {
    size_t n = 1;
    for (size_t d : s) n *= d;
    return n;
  }

  size_t numel() const { return data.size(); }
  size_t rows() const { return shape.empty() ? 1 : shape[0]; }
  size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  T& at(size_t r, size_t c) { return data[r * cols() + c]; }
  T at(size_t r, size_t c) const { return data[r * cols() + c]; }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
  void zero_grad() {
    if (!grad.empty()) grad.assign(grad.size(), T(0));
  }
};

/// Dense boolean attention mask; allowed(q, k) == true means query q may
/// attend to key k.
struct BoolMask {
  size_t rows = 0;
  size_t cols = 0;
  std::vector<uint8_t> allowed;

  bool at(size_t q, size_t k) const { return allowed[q * cols + k] != 0; }
};

/// Reverse-mode autodiff tape over whole-tensor primitives.
///
/// Nodes are recorded in construction order, which is a topological order by
/// construction. Gradient contributions are accumulated per input edge and
/// summed in ascending edge-creation order, so the result of backward() is
/// bit-identical for every valid topological processing order, and running
/// backward twice on two loss roots accumulates exactly what a single
/// backward on their sum would produce.
///
/// All reductions are fixed left-to-right over row-major storage.
template <typename T>
class Tape {
 public:
  struct Val {
    uint32_t idx = UINT32_MAX;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Binds an external parameter tensor as a leaf. Repeated calls with the
  /// same tensor return the same node. backward() adds into `t.grad`.
  Val leaf(Tensor<T>& t);

  Val constant(std::vector<size_t> shape, std::vector<T> data);
  Val constant(const Tensor<T>& t) { return constant(t.shape, t.data); }
  /// Constant cast from another storage precision (exact for f32 -> f64).
  template <typename U>
  Val constant_cast(const Tensor<U>& t) {
    std::vector<T> d(t.data.begin(), t.data.end());
    return constant(t.shape, std::move(d));
  }

  // ---- primitives -------------------------------------------------------
  Val add(Val a, Val b);
  Val sub(Val a, Val b);
  Val mul(Val a, Val b);  // elementwise
  Val scale(Val a, T c);
  Val square(Val a);
  Val gelu(Val a);  // tanh approximation
  Val add_bias_rows(Val x, Val bias);
  Val matmul(Val a, Val b);
  Val transpose(Val a);
  Val softmax_rows(Val x);
  Val softmax_rows_masked(Val x, const BoolMask& mask);
  Val layer_norm_rows(Val x, Val gamma, Val beta, T eps);
  Val index_rows(Val x, std::vector<uint32_t> indices);
  Val concat_rows(Val a, Val b);
  Val repeat_row(Val x, size_t n);
  Val slice_cols(Val x, size_t start, size_t len);
  Val concat_cols(const std::vector<Val>& parts);
  Val sum_all(Val x);  // -> [1]
  /// Mean token cross entropy with log-sum-exp stabilization over rows where
  /// supervised != 0. Throws if no row is supervised.
  Val cross_entropy_rows(Val logits, const std::vector<int32_t>& labels,
                         const std::vector<uint8_t>& supervised);

  // ---- inspection -------------------------------------------------------
  const std::vector<size_t>& shape(Val v) const { return node(v).shape; }
  const std::vector<T>& value(Val v) const { return node(v).val; }
  T scalar(Val v) const;
  size_t node_count() const { return nodes_.size(); }

  /// Reverse-mode sweep from a scalar root. Accumulates into the bound leaf
  /// tensors' grads and returns the leaves that received gradient, in
  /// binding order. Throws VerifyError if a leaf gradient is non-finite.
  std::vector<Tensor<T>*> backward(Val root);

  /// Same sweep but processing nodes in the given topological order
  /// (root-to-inputs). Exists to verify order independence.
  std::vector<Tensor<T>*> backward_in_order(Val root, const std::vector<uint32_t>& order);

  /// Releases every node and intermediate buffer.
  void clear();

 private:
  struct Edge {
    uint32_t producer;
    uint64_t id;
  };
  struct Node {
    std::vector<size_t> shape;
    std::vector<T> val;
    std::vector<Edge> inputs;
    std::function<void(Tape&, uint32_t)> back;  // reads grad_of(self), pushes to inputs
    std::vector<T> grad;                        // per-backward scratch
    std::vector<std::pair<uint64_t, std::vector<T>>> pending;
    Tensor<T>* bound = nullptr;
    bool requires_grad = false;
    const char* op = "";
  };

  Node& node(Val v) {
    if (v.idx >= nodes_.size()) throw Error("invalid tape value handle");
    return nodes_[v.idx];
  }
  const Node& node(Val v) const {
    if (v.idx >= nodes_.size()) throw Error("invalid tape value handle");
    return nodes_[v.idx];
  }

  Val make_node(std::vector<size_t> shape, std::vector<T> val, std::vector<Val> inputs,
                const char* op, std::function<void(Tape&, uint32_t)> back);
  void push_contrib(const Edge& e, std::vector<T> contrib);
  void finalize_grad(uint32_t idx);
  std::vector<Tensor<T>*> run_backward(Val root, const std::vector<uint32_t>& order);

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor<T>*, uint32_t> leaf_cache_;
  uint64_t next_edge_id_ = 0;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;
using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace mug
