#pragma once

// Reverse-mode differentiation over a recorded tape of primitive operations.
//
// A Graph is rebuilt for every forward pass: each op call computes its output
// immediately and appends a node holding the value, a gradient buffer and a
// backward closure. backward() walks the tape in exact reverse recording
// order. External tensors (network parameters, inputs) are bound as leaves;
// when a bound tensor has requires_grad, the gradient reaching its leaf is
// added into the tensor's own accumulator.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ifnet/tensor.hpp"

namespace ifnet {

template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;

  explicit BatchNormState(std::size_t channels = 0)
      : running_mean(Shape{channels}),
        running_var(Shape{channels}, std::vector<T>(channels, T(1))) {}
};

template <typename T>
class Graph {
 public:
  class Var {
   public:
    Var() = default;
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return generation_ != 0; }

   private:
    friend class Graph;
    Var(std::size_t id, std::uint64_t generation) : id_(id), generation_(generation) {}
    std::size_t id_ = 0;
    std::uint64_t generation_ = 0;
  };

  Graph();

  // Leaves.
  Var bind(Tensor<T>& tensor);
  // Read-only leaf; never receives gradient.
  Var bind(const Tensor<T>& tensor);
  Var constant(Tensor<T> tensor);

  // Primitives. Shapes are checked; violations raise ShapeMismatch naming the op.
  // x [B, C, H, W], weight [Cout, C, k, k] -> [B, Cout, Ho, Wo]
  Var conv2d(Var x, Var weight, std::size_t stride, std::size_t padding);
  // x [B, ...] flattened to [B, K], weight [Out, K], bias [Out] -> [B, Out]
  Var affine(Var x, Var weight, Var bias);
  // Per-channel normalization over every axis but axis 1; no learned scale/shift.
  // In train mode batch statistics are used and the running statistics move
  // by `momentum`; otherwise the running statistics are used.
  Var batch_norm(Var x, BatchNormState<T>& state, bool train, T momentum, T eps = T(1e-5));
  Var batch_norm(Var x, const BatchNormState<T>& state, T eps = T(1e-5));
  Var relu(Var x);
  Var square(Var x);
  // Rows of [B, D] divided by max(norm, 1e-12).
  Var l2_normalize(Var x);
  Var reshape(Var x, Shape shape);

  Var sum(Var x);
  Var mean(Var x);
  // Full reductions; the subgradient goes to the lowest linear index among ties.
  Var max(Var x);
  Var min(Var x);

  // a [N, D], b [M, D] -> [N, M] Euclidean distances.
  Var pairwise_distance(Var a, Var b);
  // anchors [N, D], candidates [N * per_anchor, D] -> [N, per_anchor], entry
  // (i, j) = distance(anchor i, candidate i * per_anchor + j).
  Var grouped_distance(Var anchors, Var candidates, std::size_t per_anchor);

  // Flat-index gather -> [indices.size()].
  Var gather(Var x, std::vector<std::size_t> flat_indices);
  // Row gather over axis 0 of a rank-2 tensor -> [rows.size(), D].
  Var gather_rows(Var x, std::vector<std::size_t> rows);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul_elementwise(Var a, std::vector<T> factors);  // factors are constants
  Var add_scalar(Var a, T value);
  Var mul_scalar(Var a, T value);

  const Tensor<T>& value(Var v) const;
  // Gradient reaching the node after backward(); zeros when none did.
  std::vector<T> grad(Var v) const;

  void backward(Var output, const Tensor<T>& seed);
  void backward(Var scalar_output);

  // Names of ops visited by the last backward pass, in visiting order.
  const std::vector<std::string_view>& backward_trace() const noexcept { return trace_; }
  std::vector<std::string_view> recorded_ops() const;
  std::size_t size() const noexcept { return nodes_.size(); }

  // Every branch decision taken during forward (relu signs, reduction
  // winners, mining choices) is folded into one signature. Two evaluations
  // with equal signatures lie on the same smooth piece. at_kink() reports an
  // exact tie or an exactly-zero hinge input seen during forward.
  std::uint64_t branch_signature() const noexcept { return signature_; }
  bool at_kink() const noexcept { return at_kink_; }
  void note_branch(std::uint64_t decision);
  void note_tie() noexcept { at_kink_ = true; }

  void reset();

 private:
  struct Node {
    std::string_view op;
    Tensor<T> owned;
    const Tensor<T>* bound = nullptr;
    Tensor<T>* grad_target = nullptr;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void(Graph&, std::size_t)> backward;

    const Tensor<T>& value() const { return bound ? *bound : owned; }
  };

  std::size_t check(Var v, std::string_view op) const;
  Node& node(Var v) { return nodes_[check(v, "access")]; }
  const Node& node(Var v) const { return nodes_[check(v, "access")]; }
  std::vector<T>& grad_buffer(std::size_t id);
  Var push(std::string_view op, Tensor<T> value, bool needs_grad,
           std::function<void(Graph&, std::size_t)> backward);
  Var reduce_extreme(Var x, bool take_max);
  Var batch_norm_impl(Var x, const BatchNormState<T>& stats, BatchNormState<T>* update,
                      bool train, T momentum, T eps);
  Var elementwise_binary(Var a, Var b, T sign_b, std::string_view op);

  std::vector<Node> nodes_;
  std::vector<std::string_view> trace_;
  std::uint64_t generation_;
  std::uint64_t signature_ = 0;
  bool at_kink_ = false;
};

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace ifnet
