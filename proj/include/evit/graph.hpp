#pragma once

#include <functional>
#include <string>
#include <vector>

#include "evit/tensor.hpp"

namespace evit {

// Linear tape of executed ops. Ops append nodes in execution order, which
// makes reverse iteration a valid reverse-topological order for backward.
// Gradients accumulate with += so tensors used several times (residual
// branches) receive contributions from every consumer.
class Graph {
 public:
  void record(std::string op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and walks the tape backwards. The loss must
  // be a scalar that was produced while recording onto this graph.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  bool ran_backward() const { return ran_backward_; }
  void clear();

 private:
  struct Node {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

}  // namespace evit
