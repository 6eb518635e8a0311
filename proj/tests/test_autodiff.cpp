#include <doctest.h>

#include <cmath>
#include <functional>

#include "namseg/autodiff.hpp"
#include "namseg/errors.hpp"
#include "support.hpp"

using namespace namseg;
using testing::random_tensor;

namespace {

struct Graph {
  Tensor input, kernel, bias, fc_w, fc_b;
};

double loss_of(const Graph& g) {
  Tape t;
  const Var x = t.constant(g.input);
  const Var h = t.relu(t.conv2d(x, t.parameter(g.kernel), t.parameter(g.bias), 1, 1));
  const Var pooled = t.gap(t.maxpool2(h));
  const Var logits = t.fc(pooled, t.parameter(g.fc_w), t.parameter(g.fc_b));
  return t.value(t.softmax_xent(logits, 1))[0];
}

}  // namespace

TEST_CASE("tape gradients agree with central differences") {
  Rng rng(21);
  Graph g{random_tensor({2, 6, 6}, rng), random_tensor({3, 2, 3, 3}, rng, -0.5, 0.5),
          random_tensor({3}, rng, -0.1, 0.1), random_tensor({2, 3}, rng), random_tensor({2}, rng)};

  Tape t;
  const Var x = t.parameter(g.input);
  const Var k = t.parameter(g.kernel);
  const Var b = t.parameter(g.bias);
  const Var w = t.parameter(g.fc_w);
  const Var c = t.parameter(g.fc_b);
  const Var h = t.relu(t.conv2d(x, k, b, 1, 1));
  const Var loss = t.softmax_xent(t.fc(t.gap(t.maxpool2(h)), w, c), 1);
  t.backward(loss);

  const double step = 1e-6;
  auto check = [&](Tensor Graph::*member, Var v) {
    Tensor& target = g.*member;
    for (std::size_t i = 0; i < target.size(); ++i) {
      const double saved = target[i];
      target[i] = saved + step;
      const double up = loss_of(g);
      target[i] = saved - step;
      const double down = loss_of(g);
      target[i] = saved;
      const double numeric = (up - down) / (2 * step);
      CHECK(t.grad(v)[i] == doctest::Approx(numeric).epsilon(1e-5).scale(1e-3));
    }
  };
  check(&Graph::input, x);
  check(&Graph::kernel, k);
  check(&Graph::bias, b);
  check(&Graph::fc_w, w);
  check(&Graph::fc_b, c);
}

TEST_CASE("gradients of a value used twice add up") {
  Tape t;
  const Var a = t.parameter(Tensor({2}, std::vector<double>{1.0, -2.0}));
  const std::vector<Var> parts{a, a};
  const Var joined = t.concat(parts);
  t.backward(joined, Tensor({4}, std::vector<double>{1, 2, 3, 4}));
  CHECK(t.grad(a).values() == std::vector<double>{4, 6});
}

TEST_CASE("constants and untouched parameters report zero gradients") {
  Tape t;
  const Var k = t.constant(Tensor({2}, 1.0));
  const Var unused = t.parameter(Tensor({3}, 1.0));
  const Var p = t.parameter(Tensor({2}, std::vector<double>{0.3, 0.1}));
  const Var loss = t.softmax_xent(t.concat(std::vector<Var>{p}), 0);
  (void)k;
  t.backward(loss);
  CHECK(t.grad(unused).values() == std::vector<double>{0, 0, 0});
}

TEST_CASE("tape misuse raises state errors") {
  Tape t;
  CHECK_THROWS_AS(t.backward(Var{0}), StateError);
  const Var p = t.parameter(Tensor({3}, 1.0));
  CHECK_THROWS_AS(t.grad(p), StateError);
  CHECK_THROWS_AS(t.backward(p), Error);  // non-scalar root needs an explicit seed
  CHECK_THROWS_AS(t.backward(Var{99}), StateError);
  t.clear();
  CHECK(t.size() == 0);
}
