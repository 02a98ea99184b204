#include "p3d/autograd.hpp"

#include <stdexcept>

namespace p3d {

const Tensor& Var::value() const {
  if (!graph) throw std::logic_error("unbound Var");
  return graph->value(*this);
}

const Tensor& BackwardContext::out_grad() const { return graph_.nodes_[node_].grad; }
const Tensor& BackwardContext::output() const { return graph_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].value;
}

Tensor* BackwardContext::input_grad(std::size_t i) {
  const std::size_t id = graph_.nodes_[node_].inputs.at(i);
  if (!graph_.nodes_[id].requires_grad) return nullptr;
  return &graph_.grad_buffer(id);
}

Var Graph::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.op = "constant";
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.op = "input";
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::parameter(Parameter& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.parameter = &p;
  n.op = "parameter:" + p.name;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Var Graph::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, std::string op) {
  Node n;
  n.value = std::move(value);
  n.op = std::move(op);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.graph != this) throw std::invalid_argument("input belongs to a different graph");
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.shape() != n.value.shape() || n.grad.size() != n.value.size()) {
    n.grad = Tensor::zeros(n.value.shape());
  }
  return n.grad;
}

const Tensor& Graph::grad(Var v) { return grad_buffer(v.id); }

void Graph::backward(Var loss) {
  if (loss.graph != this) throw std::invalid_argument("loss belongs to a different graph");
  if (nodes_[loss.id].value.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_string(nodes_[loss.id].value.shape()));
  }
  if (backward_done_) throw std::logic_error("backward already run on this graph");
  backward_done_ = true;
  for (Node& n : nodes_) {
    if (n.requires_grad) n.grad = Tensor::zeros(n.value.shape());
  }
  nodes_[loss.id].grad.fill(1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad) continue;
    if (n.backward) {
      BackwardContext ctx(*this, i);
      n.backward(ctx);
    }
    if (n.parameter) n.parameter->grad.accumulate(n.grad);
  }
}

}  // namespace p3d
