#include "nbisect/tensornet/graph.hpp"

#include <memory>

#include "nbisect/error.hpp"

namespace nbisect::tn {

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) throw GraphCycle("reference to unknown node " + std::to_string(v.id));
  return nodes_[v.id];
}

Graph::Node& Graph::node(Var v) {
  if (v.id >= nodes_.size()) throw GraphCycle("reference to unknown node " + std::to_string(v.id));
  return nodes_[v.id];
}

Var Graph::input(Tensor value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Graph::parameter(const ParameterSet& params, std::size_t index) {
  Node n;
  n.external = &params[index].value;
  n.requires_grad = true;
  n.param_index = static_cast<long>(index);
  n.param_owner = &params;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Graph::parameter(const ParameterSet& params, std::string_view name) {
  return parameter(params, params.index(name));
}

Var Graph::record(Tensor value, std::vector<Var> parents, BackwardFn backward) {
  Node n;
  n.own = std::move(value);
  for (Var p : parents) {
    n.requires_grad = n.requires_grad || node(p).requires_grad;
    n.parents.push_back(p.id);
  }
  if (!backward) n.requires_grad = false;
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

void Graph::add_dependency(Var child, Var parent) {
  Node& c = node(child);
  node(parent);
  c.parents.push_back(parent.id);
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.external ? *n.external : n.own;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor* Graph::grad_slot(Var v) {
  Node& n = node(v);
  if (!n.requires_grad) return nullptr;
  if (!n.has_grad) {
    n.grad = Tensor(value(v).shape());
    n.has_grad = true;
  }
  return &n.grad;
}

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  return n.has_grad ? n.grad : Tensor(value(v).shape());
}

void Graph::backward(Var loss) {
  if (value(loss).size() != 1)
    throw ShapeMismatch("backward() needs a scalar loss, got shape " + to_string(value(loss).shape()));

  // Kahn's algorithm over the subgraph reachable from the loss, walking
  // child -> parent edges. Nodes left unprocessed sit on a cycle.
  const std::size_t N = nodes_.size();
  std::vector<char> reach(N, 0);
  std::vector<std::size_t> stack{loss.id};
  reach[loss.id] = 1;
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    for (std::size_t p : nodes_[i].parents)
      if (!reach[p]) {
        reach[p] = 1;
        stack.push_back(p);
      }
  }
  std::vector<std::size_t> pending(N, 0);
  std::size_t reachable = 0;
  for (std::size_t i = 0; i < N; ++i) {
    if (!reach[i]) continue;
    ++reachable;
    for (std::size_t p : nodes_[i].parents) ++pending[p];
  }
  if (pending[loss.id] != 0) throw GraphCycle("loss node is its own ancestor");

  Tensor* seed = grad_slot(loss);
  if (!seed) return;
  (*seed)[0] += 1.0;

  std::vector<std::size_t> ready{loss.id};
  std::size_t processed = 0;
  while (!ready.empty()) {
    const std::size_t i = ready.back();
    ready.pop_back();
    ++processed;
    Node& n = nodes_[i];
    if (n.backward && n.has_grad) n.backward(*this, n.grad);
    for (std::size_t p : n.parents)
      if (--pending[p] == 0) ready.push_back(p);
  }
  if (processed != reachable)
    throw GraphCycle("dependency cycle: " + std::to_string(reachable - processed) + " nodes never became ready");
}

Gradients Graph::parameter_grads(const ParameterSet& params) const {
  Gradients out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) out.emplace_back(params[i].value.shape());
  for (const Node& n : nodes_) {
    if (n.param_owner != &params || !n.has_grad) continue;
    Tensor& dst = out[static_cast<std::size_t>(n.param_index)];
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
  }
  return out;
}

Gradients Graph::take_parameter_grads(const ParameterSet& params) {
  Gradients out(params.size());
  for (Node& n : nodes_) {
    if (n.param_owner != &params || !n.has_grad) continue;
    Tensor& dst = out[static_cast<std::size_t>(n.param_index)];
    if (dst.size() == 0 && dst.shape().empty()) {
      dst = std::move(n.grad);
    } else {
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += n.grad[j];
      n.grad = Tensor();
    }
    n.has_grad = false;
  }
  for (std::size_t i = 0; i < params.size(); ++i)
    if (out[i].shape() != params[i].value.shape()) out[i] = Tensor(params[i].value.shape());
  return out;
}

// --- ops -----------------------------------------------------------------------

namespace ops {

namespace {

void accumulate(Tensor* dst, const Tensor& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace

Var dense(Graph& g, Var x, Var W, Var b) {
  Tensor y = kernels::dense_forward(g.value(x), g.value(W), g.value(b));
  return g.record(std::move(y), {x, W, b}, [x, W, b](Graph& g, const Tensor& dy) {
    kernels::dense_backward(g.value(x), g.value(W), dy, g.grad_slot(x), g.grad_slot(W), g.grad_slot(b));
  });
}

Var conv2d(Graph& g, Var x, Var k, Var bias, kernels::Conv2dParams p) {
  Tensor y = kernels::conv2d_forward(g.value(x), g.value(k), g.value(bias), p);
  return g.record(std::move(y), {x, k, bias}, [x, k, bias, p](Graph& g, const Tensor& dy) {
    kernels::conv2d_backward(g.value(x), g.value(k), dy, p, g.grad_slot(x), g.grad_slot(k),
                             g.grad_slot(bias));
  });
}

Var relu(Graph& g, Var x) {
  Tensor y = kernels::relu_forward(g.value(x));
  return g.record(std::move(y), {x}, [x](Graph& g, const Tensor& dy) {
    Tensor* dx = g.grad_slot(x);
    if (!dx) return;
    const Tensor& xv = g.value(x);
    for (std::size_t i = 0; i < xv.size(); ++i)
      if (xv[i] > 0) (*dx)[i] += dy[i];
  });
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.shape() != bv.shape())
    throw ShapeMismatch("add: " + to_string(av.shape()) + " vs " + to_string(bv.shape()));
  Tensor y = av;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  return g.record(std::move(y), {a, b}, [a, b](Graph& g, const Tensor& dy) {
    accumulate(g.grad_slot(a), dy);
    accumulate(g.grad_slot(b), dy);
  });
}

Var add_positional(Graph& g, Var x, Var pos) {
  const Tensor& xv = g.value(x);
  const Tensor& pv = g.value(pos);
  require_rank(xv, 3, "add_positional input");
  require_shape(pv, {xv.dim(1), xv.dim(2)}, "add_positional table");
  Tensor y = xv;
  const std::size_t per = pv.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += pv[i % per];
  return g.record(std::move(y), {x, pos}, [x, pos, per](Graph& g, const Tensor& dy) {
    accumulate(g.grad_slot(x), dy);
    if (Tensor* dp = g.grad_slot(pos))
      for (std::size_t i = 0; i < dy.size(); ++i) (*dp)[i % per] += dy[i];
  });
}

Var scale(Graph& g, Var x, double factor) {
  Tensor y = g.value(x);
  for (double& v : y.data()) v *= factor;
  return g.record(std::move(y), {x}, [x, factor](Graph& g, const Tensor& dy) {
    if (Tensor* dx = g.grad_slot(x))
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += factor * dy[i];
  });
}

Var square(Graph& g, Var x) {
  Tensor y = g.value(x);
  for (double& v : y.data()) v *= v;
  return g.record(std::move(y), {x}, [x](Graph& g, const Tensor& dy) {
    if (Tensor* dx = g.grad_slot(x)) {
      const Tensor& xv = g.value(x);
      for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += 2 * xv[i] * dy[i];
    }
  });
}

Var sum(Graph& g, Var x) {
  double s = 0;
  for (double v : g.value(x).data()) s += v;
  return g.record(Tensor::scalar(s), {x}, [x](Graph& g, const Tensor& dy) {
    if (Tensor* dx = g.grad_slot(x))
      for (double& v : dx->data()) v += dy[0];
  });
}

Var reshape(Graph& g, Var x, Shape shape) {
  Tensor y = g.value(x).reshaped(std::move(shape));
  return g.record(std::move(y), {x}, [x](Graph& g, const Tensor& dy) { accumulate(g.grad_slot(x), dy); });
}

Var attention(Graph& g, Var x, Var Wq, Var Wk, Var Wv, Var Wo, std::size_t heads) {
  auto cache = std::make_shared<kernels::AttentionCache>();
  Tensor y = kernels::attention_forward(g.value(x), g.value(Wq), g.value(Wk), g.value(Wv), g.value(Wo),
                                        heads, cache.get());
  return g.record(std::move(y), {x, Wq, Wk, Wv, Wo},
                  [=](Graph& g, const Tensor& dy) {
                    kernels::attention_backward(g.value(x), g.value(Wq), g.value(Wk), g.value(Wv),
                                                g.value(Wo), heads, *cache, dy, g.grad_slot(x),
                                                g.grad_slot(Wq), g.grad_slot(Wk), g.grad_slot(Wv),
                                                g.grad_slot(Wo));
                  });
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
  auto normalized = std::make_shared<Tensor>();
  auto inv_std = std::make_shared<Tensor>();
  Tensor y = kernels::layer_norm_forward(g.value(x), g.value(gamma), g.value(beta), eps, normalized.get(),
                                         inv_std.get());
  return g.record(std::move(y), {x, gamma, beta}, [=](Graph& g, const Tensor& dy) {
    kernels::layer_norm_backward(*normalized, *inv_std, g.value(gamma), dy, g.grad_slot(x),
                                 g.grad_slot(gamma), g.grad_slot(beta));
  });
}

Var patchify(Graph& g, Var x, std::size_t patch) {
  Tensor y = kernels::patchify_forward(g.value(x), patch);
  return g.record(std::move(y), {x}, [x, patch](Graph& g, const Tensor& dy) {
    if (Tensor* dx = g.grad_slot(x)) accumulate(dx, kernels::patchify_backward(dx->shape(), dy, patch));
  });
}

Var patch_merge(Graph& g, Var x) {
  Tensor y = kernels::patch_merge_forward(g.value(x));
  return g.record(std::move(y), {x}, [x](Graph& g, const Tensor& dy) {
    accumulate(g.grad_slot(x), kernels::patch_merge_backward(dy));
  });
}

Var global_avg_pool(Graph& g, Var x) {
  Tensor y = kernels::global_avg_pool_forward(g.value(x));
  return g.record(std::move(y), {x}, [x](Graph& g, const Tensor& dy) {
    if (Tensor* dx = g.grad_slot(x)) accumulate(dx, kernels::global_avg_pool_backward(dx->shape(), dy));
  });
}

Var mean_tokens(Graph& g, Var x) {
  Tensor y = kernels::mean_tokens_forward(g.value(x));
  return g.record(std::move(y), {x}, [x](Graph& g, const Tensor& dy) {
    if (Tensor* dx = g.grad_slot(x)) accumulate(dx, kernels::mean_tokens_backward(dx->shape(), dy));
  });
}

Var cross_entropy(Graph& g, Var logits, const Tensor& targets) {
  auto ce = std::make_shared<kernels::CrossEntropy>(kernels::softmax_cross_entropy(g.value(logits), targets));
  return g.record(Tensor::scalar(ce->loss), {logits}, [logits, ce](Graph& g, const Tensor& dy) {
    if (Tensor* dl = g.grad_slot(logits))
      for (std::size_t i = 0; i < dl->size(); ++i) (*dl)[i] += dy[0] * ce->grad[i];
  });
}

}  // namespace ops

}  // namespace nbisect::tn
