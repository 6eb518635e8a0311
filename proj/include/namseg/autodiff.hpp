#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "namseg/tensor.hpp"

namespace namseg {

// Handle to a value recorded on a Tape.
struct Var {
  std::size_t id = 0;
};

// Reverse-mode automatic differentiation over the ops:: primitives.
//
// Every op evaluates eagerly, records its output and a closure that maps the
// output gradient back onto its inputs. backward() replays the closures in
// reverse recording order, so gradients from several uses of a value add up.
class Tape {
 public:
  // Leaf values. Parameters accumulate gradients, constants never do.
  Var parameter(Tensor value);
  Var constant(Tensor value);

  Var conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad);
  Var relu(Var x);
  Var maxpool2(Var x);
  Var gap(Var x);
  Var fc(Var x, Var weight, Var bias);
  Var concat(std::span<const Var> parts);
  // Scalar [1] loss node.
  Var softmax_xent(Var logits, std::size_t label);

  const Tensor& value(Var v) const;

  // Seeds d root / d root = 1; root must hold a single element.
  void backward(Var root);
  // Seeds the root with an explicit upstream gradient.
  void backward(Var root, const Tensor& upstream);

  // Gradient of the last backward root with respect to v (zeros when nothing
  // flowed into v). Throws StateError before backward().
  const Tensor& grad(Var v) const;

  std::size_t size() const { return nodes_.size(); }
  void clear();

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until something flows in
    bool needs_grad = false;
    std::function<void(Tape&, const Node&)> back;
  };

  Var push(Tensor value, bool needs_grad, std::function<void(Tape&, const Node&)> back);
  const Node& node(Var v) const;
  void accumulate(Var v, const Tensor& g);
  bool needs(Var v) const { return nodes_[v.id].needs_grad; }

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

}  // namespace namseg
