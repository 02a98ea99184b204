#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d {

/// A trainable tensor that outlives individual graphs.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  /// Receives the L2 penalty in the optimizer (convolution kernels only).
  bool decay = false;

  Parameter(std::string n, Tensor v, bool decays)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros(value.shape())), decay(decays) {}

  void zero_grad() { grad.fill(0.0); }
};

class Graph;

/// Handle to a node of a Graph.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// View handed to a node's backward function.
class BackwardContext {
 public:
  BackwardContext(Graph& g, std::size_t node) : graph_(g), node_(node) {}

  const Tensor& out_grad() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  /// Gradient buffer of input i, or nullptr when that input needs none.
  Tensor* input_grad(std::size_t i);

 private:
  Graph& graph_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

/// Tape of primitive applications for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the tape is already a
/// topological order and backward() walks it once in reverse.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var input(Tensor value, bool requires_grad = true);
  /// Leaf bound to a Parameter; backward() adds into parameter.grad.
  Var parameter(Parameter& p);

  /// Appends a node. The backward function is dropped when no input
  /// requires a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, std::string op);

  /// Populates gradients of every node reachable from a scalar loss.
  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of a node after backward(); zeros for nodes the loss does not reach.
  const Tensor& grad(Var v);
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  const std::string& op_name(Var v) const { return nodes_.at(v.id).op; }
  std::size_t size() const { return nodes_.size(); }

 private:
  friend class BackwardContext;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Parameter* parameter = nullptr;
    bool requires_grad = false;
    std::string op;
  };

  Tensor& grad_buffer(std::size_t id);

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace p3d
