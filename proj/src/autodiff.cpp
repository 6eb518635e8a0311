#include "namseg/autodiff.hpp"

#include <string>

#include "namseg/errors.hpp"
#include "namseg/ops.hpp"

namespace namseg {

Var Tape::push(Tensor value, bool needs_grad, std::function<void(Tape&, const Node&)> back) {
  nodes_.push_back(Node{std::move(value), Tensor(), needs_grad, std::move(back)});
  backward_done_ = false;
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (v.id >= nodes_.size()) {
    throw StateError("tape: variable " + std::to_string(v.id) + " was never recorded");
  }
  return nodes_[v.id];
}

void Tape::accumulate(Var v, const Tensor& g) {
  Node& n = nodes_[v.id];
  if (!n.needs_grad) return;
  if (n.grad.empty()) {
    n.grad = g;
    return;
  }
  auto dst = n.grad.data();
  const auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

Var Tape::parameter(Tensor value) { return push(std::move(value), true, nullptr); }

Var Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Tape::conv2d(Var input, Var kernel, Var bias, std::size_t stride, std::size_t pad) {
  Tensor out = ops::conv2d(node(input).value, node(kernel).value, node(bias).value, stride, pad);
  const bool ng = needs(input) || needs(kernel) || needs(bias);
  return push(std::move(out), ng, [=](Tape& t, const Node& self) {
    auto g = ops::conv2d_backward(t.nodes_[input.id].value, t.nodes_[kernel.id].value, stride, pad,
                                  self.grad, t.needs(input));
    if (t.needs(input)) t.accumulate(input, g.input);
    t.accumulate(kernel, g.kernel);
    t.accumulate(bias, g.bias);
  });
}

Var Tape::relu(Var x) {
  return push(ops::relu(node(x).value), needs(x), [=](Tape& t, const Node& self) {
    t.accumulate(x, ops::relu_backward(t.nodes_[x.id].value, self.grad));
  });
}

Var Tape::maxpool2(Var x) {
  auto pooled = ops::maxpool2_indexed(node(x).value);
  const Shape in_shape = node(x).value.shape();
  return push(std::move(pooled.output), needs(x),
              [=, argmax = std::move(pooled.argmax)](Tape& t, const Node& self) {
                t.accumulate(x, ops::maxpool2_backward(in_shape, argmax, self.grad));
              });
}

Var Tape::gap(Var x) {
  const Shape in_shape = node(x).value.shape();
  return push(ops::gap(node(x).value), needs(x), [=](Tape& t, const Node& self) {
    t.accumulate(x, ops::gap_backward(in_shape, self.grad));
  });
}

Var Tape::fc(Var x, Var weight, Var bias) {
  Tensor out = ops::fc(node(x).value, node(weight).value, node(bias).value);
  const bool ng = needs(x) || needs(weight) || needs(bias);
  return push(std::move(out), ng, [=](Tape& t, const Node& self) {
    auto g = ops::fc_backward(t.nodes_[x.id].value, t.nodes_[weight.id].value, self.grad);
    t.accumulate(x, g.input);
    t.accumulate(weight, g.weight);
    t.accumulate(bias, g.bias);
  });
}

Var Tape::concat(std::span<const Var> parts) {
  std::vector<Tensor> values;
  std::vector<Var> ids(parts.begin(), parts.end());
  bool ng = false;
  for (Var p : parts) {
    values.push_back(node(p).value);
    ng = ng || needs(p);
  }
  return push(ops::concat(values), ng, [ids](Tape& t, const Node& self) {
    std::size_t offset = 0;
    for (Var p : ids) {
      const Shape& shape = t.nodes_[p.id].value.shape();
      const std::size_t n = shape_size(shape);
      std::vector<double> slice(self.grad.data().begin() + static_cast<std::ptrdiff_t>(offset),
                                self.grad.data().begin() + static_cast<std::ptrdiff_t>(offset + n));
      t.accumulate(p, Tensor(shape, std::move(slice)));
      offset += n;
    }
  });
}

Var Tape::softmax_xent(Var logits, std::size_t label) {
  auto r = ops::softmax_xent(node(logits).value, label);
  return push(Tensor::scalar(r.loss), needs(logits),
              [=, dl = std::move(r.grad_logits)](Tape& t, const Node& self) {
                Tensor g = dl;
                for (double& v : g.data()) v *= self.grad[0];
                t.accumulate(logits, g);
              });
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

void Tape::backward(Var root) {
  if (nodes_.empty()) throw StateError("backward called before any forward pass was recorded");
  const Node& r = node(root);
  if (r.value.size() != 1) {
    throw StateError("backward without an upstream gradient needs a scalar root, got " +
                     shape_string(r.value.shape()));
  }
  backward(root, Tensor(r.value.shape(), 1.0));
}

void Tape::backward(Var root, const Tensor& upstream) {
  if (nodes_.empty()) throw StateError("backward called before any forward pass was recorded");
  const Node& r = node(root);
  if (upstream.shape() != r.value.shape()) {
    throw DimensionError("backward: upstream gradient shape " + shape_string(upstream.shape()) +
                         " does not match root " + shape_string(r.value.shape()));
  }
  for (auto& n : nodes_) n.grad = Tensor();
  nodes_[root.id].grad = upstream;
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.back || n.grad.empty() || !n.needs_grad) continue;
    n.back(*this, n);
  }
  // Materialise zero gradients for anything that received none.
  for (auto& n : nodes_) {
    if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  }
  backward_done_ = true;
}

const Tensor& Tape::grad(Var v) const {
  if (!backward_done_) throw StateError("gradient requested before backward()");
  return node(v).grad;
}

void Tape::clear() {
  nodes_.clear();
  backward_done_ = false;
}

}  // namespace namseg
