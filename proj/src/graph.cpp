#include "evit/graph.hpp"

namespace evit {

void Graph::record(std::string op, std::vector<Tensor> inputs, Tensor output,
                   std::function<void()> backward_fn) {
  Node node;
  node.op = std::move(op);
  node.inputs = std::move(inputs);
  node.output = std::move(output);
  node.backward_fn = std::move(backward_fn);
  nodes_.push_back(std::move(node));
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined()) throw StateError("backward on an undefined loss");
  if (nodes_.empty()) throw StateError("backward on an empty graph");
  if (ran_backward_) {
    throw StateError("backward ran already on this graph; run a fresh forward first");
  }
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        std::to_string(loss.numel()) + " elements");
  }
  if (!loss.requires_grad()) {
    throw StateError("loss is detached from the graph (requires_grad is false)");
  }
  ran_backward_ = true;
  loss.impl()->grad.reset();
  Tensor seed = loss;
  seed.ensure_grad();
  seed.grad().fill(1.0);
  for (size_t i = nodes_.size(); i-- > 0;) {
    Node& node = nodes_[i];
    // Branches that never reach the loss have no output gradient; skip them.
    if (!node.output.grad().defined()) continue;
    node.backward_fn();
  }
}

void Graph::clear() {
  nodes_.clear();
  ran_backward_ = false;
}

}  // namespace evit
