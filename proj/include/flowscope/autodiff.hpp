#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "flowscope/tensor.hpp"

namespace flowscope {

class Tape;

// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Passed to a node's backward rule. input_grad(i) is null when input i does
// not take part in differentiation.
class BackwardContext {
 public:
  const Tensor& out_grad() const { return *out_grad_; }
  const Tensor& output() const { return *output_; }
  const Tensor& input(std::size_t i) const { return *inputs_[i]; }
  Tensor* input_grad(std::size_t i) const { return input_grads_[i]; }

 private:
  friend class Tape;
  const Tensor* out_grad_ = nullptr;
  const Tensor* output_ = nullptr;
  std::vector<const Tensor*> inputs_;
  std::vector<Tensor*> input_grads_;
};

using BackwardFn = std::function<void(const BackwardContext&)>;

// Result of reverse accumulation from one scalar.
class Gradients {
 public:
  // d(output)/d(var); zeros when var does not influence the output.
  Tensor of(Var v) const;
  bool reached(Var v) const;
  const Tape* tape() const noexcept { return tape_; }
  std::size_t output_id() const noexcept { return output_id_; }

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::size_t output_id_ = 0;
  std::vector<Tensor> grads_;
};

// Linear record of primitive operations. Node ids are issued in creation
// order, so inputs always precede outputs and a reverse sweep over ids is a
// valid topological order.
class Tape {
 public:
  explicit Tape(bool record_gradients = true) : record_(record_gradients) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool records_gradients() const noexcept { return record_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  bool owns(Var v) const noexcept { return v.tape() == this && v.id() < nodes_.size(); }

  // Registers an op result. The rule is dropped when no input takes part in
  // differentiation or the tape does not record.
  Var push(Tensor value, std::vector<Var> inputs, BackwardFn rule);

  // Reverse-mode sweep from a one-element output.
  Gradients backward(Var scalar_output) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn rule;
    bool requires_grad = false;
  };

  bool record_;
  std::deque<Node> nodes_;
};

// Boolean admissibility pattern for softmax_rows (true = entry participates).
struct RowMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static RowMask all(std::size_t rows, std::size_t cols) { return {rows, cols, std::vector<std::uint8_t>(rows * cols, 1)}; }
  static RowMask causal(std::size_t n);
  bool at(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
  void set(std::size_t r, std::size_t c, bool v) { allowed[r * cols + c] = v ? 1 : 0; }
};

inline constexpr double kLayerNormEps = 1e-5;

// Differentiable primitives. Matrices are rank-2 tensors.
Var matmul(Var a, Var b);
Var matmul_transposed(Var a, Var b);  // a · bᵀ
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var add_row_vector(Var a, Var bias);  // bias[n] added to every row of a[m×n]
Var gelu(Var a);
Var relu(Var a);
Var softmax_rows(Var x, const RowMask* mask = nullptr);
Var layer_norm(Var x, Var gain, Var bias, double eps = kLayerNormEps);
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(Var a, std::span<const std::size_t> rows);
Var sum(Var a);
Var dot(Var a, Var b);
Var element(Var a, std::size_t row, std::size_t col);
Var stop_gradient(Var a);
// Sum over (row, target) pairs of -log softmax(a[row])[target].
Var cross_entropy_rows(Var logits, std::span<const std::size_t> rows, std::span<const std::size_t> targets);

// Plain kernels shared with the ops above.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor softmax_rows(const Tensor& x, const RowMask* mask = nullptr);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps);

}  // namespace flowscope
