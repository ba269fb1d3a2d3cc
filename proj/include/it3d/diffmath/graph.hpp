#pragma once

#include "it3d/diffmath/tensor.hpp"

#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace it3d {

template <typename Scalar>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while its graph lives.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Graph<Scalar>* graph, int id) : graph_(graph), id_(id) {}

  Graph<Scalar>& graph() const {
    if (!graph_) throw std::logic_error("Var: unbound handle");
    return *graph_;
  }
  Graph<Scalar>* graph_ptr() const noexcept { return graph_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  const Tensor<Scalar>& value() const { return graph().value(*this); }
  const Shape& shape() const { return value().shape(); }
  Index dim(Index axis) const { return value().dim(axis); }
  bool requires_grad() const { return graph().requires_grad(*this); }

 private:
  Graph<Scalar>* graph_ = nullptr;
  int id_ = -1;
};

using Varf = Var<float>;
using Vard = Var<double>;

/// Gradients keyed by parameter name, ordered by name.
template <typename Scalar>
class GradientMap {
 public:
  using Map = std::map<std::string, Tensor<Scalar>>;

  const Tensor<Scalar>& operator[](const std::string& name) const {
    auto it = grads_.find(name);
    if (it == grads_.end()) throw std::out_of_range("GradientMap: no gradient for '" + name + "'");
    return it->second;
  }
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  std::size_t size() const { return grads_.size(); }
  auto begin() const { return grads_.begin(); }
  auto end() const { return grads_.end(); }
  Map& entries() { return grads_; }

 private:
  Map grads_;
};

/// Append-only tape of primitive applications. Each node stores its forward
/// value and, when any input needs a gradient, a closure that maps the
/// output gradient onto input gradients. One backward pass per graph.
template <typename Scalar>
class Graph {
 public:
  using TensorT = Tensor<Scalar>;
  using VarT = Var<Scalar>;
  /// grad_inputs[i] is null when input i needs no gradient; otherwise it is a
  /// zero-initialised (or partially accumulated) tensor shaped like input i.
  using BackwardFn = std::function<void(const TensorT& grad_out, std::span<TensorT*> grad_inputs)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Named differentiable leaf. Names are unique within a graph.
  VarT param(const std::string& name, TensorT value) {
    check_open("param");
    if (param_ids_.count(name)) throw std::invalid_argument("Graph: duplicate parameter '" + name + "'");
    const int id = push(std::move(value), true, "param");
    nodes_[id].name = name;
    param_ids_[name] = id;
    return VarT(this, id);
  }

  /// Looks up an already registered parameter.
  VarT find_param(const std::string& name) const {
    auto it = param_ids_.find(name);
    if (it == param_ids_.end()) throw std::out_of_range("Graph: unknown parameter '" + name + "'");
    return VarT(const_cast<Graph*>(this), it->second);
  }
  bool has_param(const std::string& name) const { return param_ids_.count(name) != 0; }

  /// Non-differentiable leaf.
  VarT constant(TensorT value) {
    check_open("constant");
    return VarT(this, push(std::move(value), false, "constant"));
  }

  /// Appends a primitive application. `backward` is dropped when no input needs
  /// a gradient.
  VarT record(std::string_view op, TensorT value, std::vector<VarT> inputs, BackwardFn backward) {
    check_open(op);
    bool needs = false;
    for (const VarT& in : inputs) {
      if (in.graph_ptr() != this) throw std::logic_error(std::string(op) + ": input from another graph");
      needs = needs || nodes_[static_cast<std::size_t>(in.id())].requires_grad;
    }
    const int id = push(std::move(value), needs, op);
    if (needs) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      n.inputs.reserve(inputs.size());
      for (const VarT& in : inputs) n.inputs.push_back(in.id());
      n.backward = std::move(backward);
    }
    return VarT(this, id);
  }

  const TensorT& value(const VarT& v) const { return node(v).value; }
  bool requires_grad(const VarT& v) const { return node(v).requires_grad; }
  std::string_view op_name(const VarT& v) const { return node(v).op; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool consumed() const noexcept { return consumed_; }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    for (const auto& [name, id] : param_ids_) names.push_back(name);
    return names;
  }

  /// Reverse-mode sweep from `output` seeded with `seed`. Returns a gradient
  /// for every registered parameter (zeros for parameters the output does not
  /// reach). Consumes the graph.
  GradientMap<Scalar> backward(const VarT& output, const TensorT& seed) {
    if (consumed_) throw std::logic_error("Graph::backward: graph already consumed");
    const Node& out = node(output);
    if (seed.shape() != out.value.shape()) {
      throw_shape_error("backward", "seed shape must equal output shape", seed.shape(), out.value.shape());
    }
    consumed_ = true;

    std::vector<TensorT> grads(nodes_.size());
    std::vector<char> has(nodes_.size(), 0);
    const auto oid = static_cast<std::size_t>(output.id());
    if (out.requires_grad) {
      grads[oid] = seed;
      has[oid] = 1;
    }

    std::vector<TensorT*> slots;
    for (std::size_t i = oid + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!has[i] || !n.backward) continue;
      slots.assign(n.inputs.size(), nullptr);
      for (std::size_t k = 0; k < n.inputs.size(); ++k) {
        const auto in = static_cast<std::size_t>(n.inputs[k]);
        if (!nodes_[in].requires_grad) continue;
        if (!has[in]) {
          grads[in] = TensorT(nodes_[in].value.shape());
          has[in] = 1;
        }
        slots[k] = &grads[in];
      }
      n.backward(grads[i], std::span<TensorT*>(slots));
      if (n.op != "param") grads[i] = TensorT();
    }

    GradientMap<Scalar> result;
    for (const auto& [name, id] : param_ids_) {
      const auto pid = static_cast<std::size_t>(id);
      result.entries().emplace(name, has[pid] ? std::move(grads[pid]) : TensorT(nodes_[pid].value.shape()));
    }
    return result;
  }

  /// Backward from a single-element output with seed 1.
  GradientMap<Scalar> backward(const VarT& output) {
    return backward(output, TensorT::full(value(output).shape(), Scalar(1)));
  }

 private:
  struct Node {
    TensorT value;
    bool requires_grad = false;
    std::string op;
    std::string name;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  int push(TensorT value, bool requires_grad, std::string_view op) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.op = std::string(op);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size() - 1);
  }

  const Node& node(const VarT& v) const {
    if (v.graph_ptr() != this || v.id() < 0 || static_cast<std::size_t>(v.id()) >= nodes_.size()) {
      throw std::logic_error("Graph: handle does not belong to this graph");
    }
    return nodes_[static_cast<std::size_t>(v.id())];
  }

  void check_open(std::string_view op) const {
    if (consumed_) throw std::logic_error(std::string(op) + ": graph already consumed by backward");
  }

  std::vector<Node> nodes_;
  std::map<std::string, int> param_ids_;
  bool consumed_ = false;
};

using Graphf = Graph<float>;
using Graphd = Graph<double>;

}  // namespace it3d
