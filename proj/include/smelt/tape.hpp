#pragma once

#include <atomic>
#include <cstdint>
#include <span>
#include <vector>

#include "smelt/tensor.hpp"

namespace smelt {

// Handle into a Tape.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Single-use reverse-mode tape over dense tensors. A tape is built once per
// forward pass and discarded; it is confined to one thread. Nodes are stored
// in topological (construction) order, so the backward pass is a single
// reverse sweep with deterministic accumulation order.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Differentiable input.
  Var leaf(Tensor v);
  // Non-differentiable input; gradients are never propagated into it.
  Var constant(Tensor v);
  Var constant_scalar(double v) { return constant(Tensor::scalar(v)); }

  const Tensor& val(Var v) const { return nodes_[static_cast<size_t>(v.id)].value; }
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.id)].needs_grad; }
  size_t size() const { return nodes_.size(); }

  // Elementwise ops broadcast a row vector [1xC], column vector [Rx1] or
  // scalar against a matrix [RxC]; one-sided only.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  Var scale(Var a, double c);

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var concat(Var a, Var b, int axis);  // 0 = stack rows, 1 = join columns

  Var sigmoid(Var a);
  Var tanh(Var a);
  Var relu(Var a);
  Var sqrt(Var a);
  Var clamp(Var a, double lo, double hi);  // subgradient 1 strictly inside (lo,hi)

  Var softmax(Var a);      // row-wise
  Var log_softmax(Var a);  // row-wise
  Var norm_rows(Var a, double eps = 1e-5);  // row standardization, no affine

  Var sum(Var a);       // -> scalar [1]
  Var mean(Var a);      // -> scalar [1]
  Var sum_rows(Var a);  // [RxC] -> [Rx1]

  // Adjoints of `loss` (must be scalar) w.r.t. each entry of `wrt`.
  // Unreached or non-differentiable entries get zero adjoints.
  std::vector<Tensor> grad(Var loss, std::span<const Var> wrt);

  // Process-wide count of backward sweeps; used to assert gradient-free paths.
  static uint64_t backward_passes() { return backward_count_.load(std::memory_order_relaxed); }

 private:
  enum class Op : uint8_t {
    kInput,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kScale,
    kMatmul,
    kTranspose,
    kConcatRows,
    kConcatCols,
    kSigmoid,
    kTanh,
    kRelu,
    kSqrt,
    kClamp,
    kSoftmax,
    kLogSoftmax,
    kNormRows,
    kSum,
    kMean,
    kSumRows,
  };

  struct Node {
    Tensor value;
    int p0 = -1;
    int p1 = -1;
    Op op = Op::kInput;
    double c0 = 0.0;
    double c1 = 0.0;
    bool needs_grad = false;
  };

  Var push(Node n, const char* opname);
  const Tensor& value_of(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  void backward_into(const Node& n, const Tensor& g, std::vector<Tensor>& adjoints) const;
  void accumulate(int target, const Tensor& contrib, std::vector<Tensor>& adjoints) const;

  std::vector<Node> nodes_;
  static std::atomic<uint64_t> backward_count_;
};

}  // namespace smelt
