#pragma once

// Tape-based reverse-mode differentiation.
//
// A Graph records every value produced during one forward pass together
// with a closure that pushes the node's gradient to its parents. Parameter
// leaves reference tensors owned by a ParameterSet, which must outlive the
// graph and stay unmodified until backward() returns.

#include <cstddef>
#include <functional>
#include <vector>

#include "nbisect/tensornet/kernels.hpp"
#include "nbisect/tensornet/params.hpp"
#include "nbisect/tensornet/tensor.hpp"

namespace nbisect::tn {

struct Var {
  std::size_t id = 0;
};

class Graph;

// Called once during backward with the node's accumulated gradient.
using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

class Graph {
 public:
  // Constant input; receives no gradient.
  Var input(Tensor value);
  // Leaf bound to parameter `index` of `params`.
  Var parameter(const ParameterSet& params, std::size_t index);
  Var parameter(const ParameterSet& params, std::string_view name);

  // Records a computed value. `backward` may be empty for non-differentiable
  // nodes. The node requires a gradient iff any parent does.
  Var record(Tensor value, std::vector<Var> parents, BackwardFn backward);

  // Extra edge for custom ops whose closure touches `parent` without
  // listing it at record time.
  void add_dependency(Var child, Var parent);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  // Gradient buffer of `v` for accumulation inside a BackwardFn, or nullptr
  // when `v` needs no gradient. Lazily allocated as zeros.
  Tensor* grad_slot(Var v);
  // Accumulated gradient (zeros when the node was never reached).
  Tensor grad(Var v) const;

  // Reverse sweep from a scalar `loss`. Throws GraphCycle when the
  // dependency graph reachable from `loss` is not acyclic, ShapeMismatch when
  // `loss` is not a single element.
  void backward(Var loss);

  // Gradients for every parameter of `params`; zero for parameters that
  // were not bound or not reached.
  Gradients parameter_grads(const ParameterSet& params) const;
  // Same values, but moves gradient buffers out of the graph instead of
  // copying them; the graph's own gradients are left empty.
  Gradients take_parameter_grads(const ParameterSet& params);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor own;
    const Tensor* external = nullptr;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    Tensor grad;
    bool requires_grad = false;
    bool has_grad = false;
    long param_index = -1;
    const ParameterSet* param_owner = nullptr;
  };

  const Node& node(Var v) const;
  Node& node(Var v);

  std::vector<Node> nodes_;
};

// Differentiable operations. Shapes follow the matching kernels.
namespace ops {

Var dense(Graph& g, Var x, Var W, Var b);
Var conv2d(Graph& g, Var x, Var kernels, Var bias, kernels::Conv2dParams p);
Var relu(Graph& g, Var x);
Var add(Graph& g, Var a, Var b);
// x: [B, T, d] plus pos: [T, d] broadcast over the batch.
Var add_positional(Graph& g, Var x, Var pos);
Var scale(Graph& g, Var x, double factor);
Var square(Graph& g, Var x);
Var sum(Graph& g, Var x);
Var reshape(Graph& g, Var x, Shape shape);
Var attention(Graph& g, Var x, Var Wq, Var Wk, Var Wv, Var Wo, std::size_t heads);
Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-5);
Var patchify(Graph& g, Var x, std::size_t patch);
Var patch_merge(Graph& g, Var x);
Var global_avg_pool(Graph& g, Var x);
Var mean_tokens(Graph& g, Var x);
// Mean softmax cross-entropy against one-hot `targets`; scalar output.
Var cross_entropy(Graph& g, Var logits, const Tensor& targets);

}  // namespace ops

}  // namespace nbisect::tn
