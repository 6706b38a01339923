#pragma once

// Tape-based reverse-mode differentiation. Every differentiable operation
// evaluates eagerly, appends a node holding its value and an adjoint
// closure, and returns a Var handle. Tape::backward walks the nodes in
// reverse recording order exactly once.

#include <cstddef>
#include <deque>
#include <functional>
#include <vector>

#include "hdt/kernels.hpp"
#include "hdt/tensor.hpp"

namespace hdt {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return tape->value(id).shape(); }
};

template <typename T>
class Tape {
 public:
  /// Adjoint of one node. Receives the node's output gradient and
  /// accumulates into its inputs through Tape::grad_buffer.
  using Adjoint = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is collected by backward().
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true, {}); }

  /// Leaf that never receives a gradient.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Records an operation output. The adjoint is dropped when no input
  /// needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Adjoint adjoint) {
    return record(std::move(value), std::vector<Var<T>>(inputs), std::move(adjoint));
  }
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, Adjoint adjoint) {
    bool needs = false;
    for (const auto& v : inputs) needs = needs || nodes_.at(v.id).requires_grad;
    return push(std::move(value), needs, needs ? std::move(adjoint) : Adjoint{});
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient accumulator of node id, allocated as zeros on first use.
  /// Returns nullptr when the node does not require a gradient.
  Tensor<T>* grad_buffer(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return nullptr;
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return &n.grad;
  }

  /// Gradient of node id after backward(), or nullptr if none reached it.
  const Tensor<T>* grad(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.has_grad ? &n.grad : nullptr;
  }
  const Tensor<T>* grad(Var<T> v) const { return grad(v.id); }

  /// Seeds d(loss)/d(loss) = 1 and runs every adjoint in reverse order.
  void backward(Var<T> loss) {
    if (loss.tape != this) throw Error("backward: variable belongs to a different tape");
    if (nodes_.at(loss.id).value.size() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " + nodes_[loss.id].value.shape().str());
    }
    if (backward_done_) throw Error("backward: tape was already differentiated");
    backward_done_ = true;
    if (Tensor<T>* g = grad_buffer(loss.id)) (*g)[0] += T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.adjoint || !n.has_grad) continue;
      n.adjoint(*this, n.grad);
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    Adjoint adjoint;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Adjoint adjoint) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.adjoint = std::move(adjoint);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

/// Differentiable operations. Each mirrors the kernel of the same name.
namespace ad {

using kernels::Conv2dOptions;
using kernels::Padding;

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, const Conv2dOptions& opt = {});

template <typename T>
Var<T> deformable_conv2d(Var<T> x, Var<T> w, Var<T> b, Var<T> offsets);

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

template <typename T>
Var<T> softmax(Var<T> x);

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b);

template <typename T>
Var<T> batched_matmul(Var<T> a, Var<T> b, bool transpose_b);

template <typename T>
Var<T> leaky_relu(Var<T> x);

template <typename T>
Var<T> sigmoid(Var<T> x);

template <typename T>
Var<T> gelu(Var<T> x);

template <typename T>
Var<T> global_avg_pool(Var<T> x);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

template <typename T>
Var<T> sub(Var<T> a, Var<T> b);

/// Elementwise product of equal shapes.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

/// x (B×H×W×C) gated by a per-channel vector w (B×C).
template <typename T>
Var<T> mul_channel(Var<T> x, Var<T> w);

template <typename T>
Var<T> scale(Var<T> x, T factor);

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts);

template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t count);

template <typename T>
Var<T> reshape(Var<T> x, Shape shape);

template <typename T>
Var<T> roll(Var<T> x, long dy, long dx);

template <typename T>
Var<T> pad_reflect(Var<T> x, std::size_t bottom, std::size_t right);

template <typename T>
Var<T> crop(Var<T> x, std::size_t height, std::size_t width);

/// Rolls by -shift, then splits into window×window token groups.
template <typename T>
Var<T> window_partition(Var<T> x, std::size_t window, std::size_t shift = 0);

/// Inverse of window_partition, including the roll back by +shift.
template <typename T>
Var<T> window_reverse(Var<T> windows, std::size_t window, std::size_t batch, std::size_t height, std::size_t width,
                      std::size_t shift = 0);

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads);

template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t heads);

/// log(1 + mu·clamp(x, 0, 1)) / log(1 + mu).
template <typename T>
Var<T> mu_law(Var<T> x, T mu);

template <typename T>
Var<T> sum(Var<T> x);

template <typename T>
Var<T> mean(Var<T> x);

/// Sum of x ⊙ weights for a constant weight tensor.
template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights);

/// mean(|a - target|) for a constant target.
template <typename T>
Var<T> mean_abs_diff(Var<T> a, const Tensor<T>& target);

}  // namespace ad

}  // namespace hdt
