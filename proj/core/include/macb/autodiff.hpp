#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "macb/tensor.hpp"

// Tape-based reverse-mode differentiation over dense tensors.
//
// Every primitive records its output value and a closure that pushes the
// output's adjoint back into its inputs. `Tape::backward` replays the tape in
// reverse. Nodes built only from constants carry no gradient and their
// closures are never run.
namespace macb::ad {

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rank() const { return value().rank(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  double item() const { return value().item(); }

  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  // Adjoint propagation for node `self`: read grad(self), accumulate into inputs.
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var variable(Tensor value);
  Var record(Tensor value, std::vector<std::size_t> inputs, const char* op, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_[id].inputs; }
  const char* op(std::size_t id) const { return nodes_[id].op; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  // Adjoint of node `id` after backward(); zeros if it received none.
  Tensor grad(std::size_t id) const;
  Tensor grad(Var v) const { return grad(v.id()); }
  // Adjoint accumulator for an input node, zero-filled on first use; nullptr
  // when the node does not require a gradient.
  double* accumulator(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  std::span<const double> grad_span(std::size_t id) const { return nodes_[id].grad; }

  // Clears all adjoints, seeds d(root)/d(root) = 1 and back-propagates.
  // Root must hold a single element. May be called repeatedly for different
  // roots on the same tape.
  void backward(Var root);

  // Label used in errors: "<op>#<id>" for the node about to be recorded.
  std::string next_label(const char* op) const;

 private:
  struct Node {
    Tensor value;
    std::vector<double> grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    const char* op = "";
    bool requires_grad = false;
  };
  std::deque<Node> nodes_;
};

// Elementwise, numpy-style broadcasting.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);

Var relu(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
Var exp(Var a);
Var log(Var a);
Var abs(Var a);
Var sqrt(Var a);
Var square(Var a);
// Values outside [lo, hi] are pinned and pass zero gradient.
Var clamp(Var a, double lo, double hi);

Var matmul(Var a, Var b);
Var transpose(Var a);
Var permute(Var a, const std::vector<std::size_t>& axes);
Var reshape(Var a, Shape shape);

Var softmax(Var a);
Var log_softmax(Var a);
// Normalizes the last axis to zero mean, unit variance (no affine).
Var layer_norm(Var a, double eps = 1e-5);

Var sum(Var a);
Var mean(Var a);
Var sum_axis(Var a, std::size_t axis, bool keepdim = false);
Var mean_axis(Var a, std::size_t axis, bool keepdim = false);
// Population variance over all elements / along an axis.
Var var(Var a);
Var var_axis(Var a, std::size_t axis, bool keepdim = false);

Var concat(const std::vector<Var>& parts, std::size_t axis);
Var stack(const std::vector<Var>& parts);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator+(double c, Var a) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }
inline Var operator-(double c, Var a) { return add_scalar(neg(a), c); }

}  // namespace macb::ad
