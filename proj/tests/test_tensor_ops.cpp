#include <doctest.h>

#include <cmath>

#include "namseg/errors.hpp"
#include "namseg/ops.hpp"
#include "support.hpp"

using namespace namseg;
using testing::max_abs_diff;
using testing::random_tensor;

namespace {

// Direct loop definitions, written independently of the im2col kernels.
Tensor conv_loops(const Tensor& in, const Tensor& k, const Tensor& b, std::size_t s, std::size_t p) {
  const long C = static_cast<long>(in.dim(0)), H = static_cast<long>(in.dim(1)),
             W = static_cast<long>(in.dim(2));
  const long O = static_cast<long>(k.dim(0)), KH = static_cast<long>(k.dim(2)),
             KW = static_cast<long>(k.dim(3));
  const long OH = (H + 2 * static_cast<long>(p) - KH) / static_cast<long>(s) + 1;
  const long OW = (W + 2 * static_cast<long>(p) - KW) / static_cast<long>(s) + 1;
  Tensor out({static_cast<std::size_t>(O), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
  for (long o = 0; o < O; ++o)
    for (long y = 0; y < OH; ++y)
      for (long x = 0; x < OW; ++x) {
        double acc = b[static_cast<std::size_t>(o)];
        for (long c = 0; c < C; ++c)
          for (long ky = 0; ky < KH; ++ky)
            for (long kx = 0; kx < KW; ++kx) {
              const long iy = y * static_cast<long>(s) + ky - static_cast<long>(p);
              const long ix = x * static_cast<long>(s) + kx - static_cast<long>(p);
              if (iy < 0 || ix < 0 || iy >= H || ix >= W) continue;
              acc += in[static_cast<std::size_t>((c * H + iy) * W + ix)] *
                     k[static_cast<std::size_t>(((o * C + c) * KH + ky) * KW + kx)];
            }
        out[static_cast<std::size_t>((o * OH + y) * OW + x)] = acc;
      }
  return out;
}

double sum_product(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST_CASE("tensor construction validates shape and data") {
  CHECK_THROWS_AS(Tensor({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.at(1, 2) == 1.5);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
  t[0] = std::nan("");
  CHECK_FALSE(t.all_finite());
}

TEST_CASE("conv2d matches the loop definition") {
  Rng rng(11);
  struct Case { std::size_t c, h, w, o, k, s, p; };
  for (const Case cs : {Case{1, 5, 5, 1, 3, 1, 1}, Case{3, 8, 6, 4, 3, 1, 1}, Case{2, 7, 7, 3, 3, 2, 1},
                        Case{2, 6, 6, 2, 1, 1, 0}, Case{3, 9, 9, 2, 5, 2, 2}}) {
    const Tensor in = random_tensor({cs.c, cs.h, cs.w}, rng);
    const Tensor k = random_tensor({cs.o, cs.c, cs.k, cs.k}, rng);
    const Tensor b = random_tensor({cs.o}, rng);
    const Tensor got = ops::conv2d(in, k, b, cs.s, cs.p);
    const Tensor want = conv_loops(in, k, b, cs.s, cs.p);
    REQUIRE(got.shape() == want.shape());
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("conv2d rejects bad geometry") {
  const Tensor in({2, 6, 6}, 1.0);
  CHECK_THROWS_AS(ops::conv2d(in, Tensor({1, 3, 3, 3}), Tensor({1}), 1, 1), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(in, Tensor({1, 2, 2, 2}), Tensor({1}), 1, 0), GeometryError);
  CHECK_THROWS_AS(ops::conv2d(in, Tensor({1, 2, 3, 3}), Tensor({1}), 0, 1), GeometryError);
  CHECK_THROWS_AS(ops::conv2d(in, Tensor({1, 2, 3, 3}), Tensor({1}), 2, 0), GeometryError);
  CHECK_THROWS_AS(ops::conv2d(Tensor({6, 6}), Tensor({1, 1, 3, 3}), Tensor({1}), 1, 1),
                  DimensionError);
}

TEST_CASE("conv2d backward is the adjoint of the forward map") {
  // <dOut, conv(x)> is linear in x, K and b; its gradients must equal the
  // loop-computed directional derivatives.
  Rng rng(5);
  for (std::size_t stride : {1u, 2u}) {
    const Tensor in = random_tensor({3, 7, 7}, rng);
    const Tensor k = random_tensor({2, 3, 3, 3}, rng);
    const Tensor b = random_tensor({2}, rng);
    const Tensor out = ops::conv2d(in, k, b, stride, 1);
    const Tensor g = random_tensor(out.shape(), rng);
    const ops::ConvGrads grads = ops::conv2d_backward(in, k, stride, 1, g);
    const Tensor zero_b({2}, 0.0);

    const Tensor dx = random_tensor(in.shape(), rng);
    CHECK(sum_product(grads.input, dx) ==
          doctest::Approx(sum_product(g, conv_loops(dx, k, zero_b, stride, 1))).epsilon(1e-12));
    const Tensor dk = random_tensor(k.shape(), rng);
    CHECK(sum_product(grads.kernel, dk) ==
          doctest::Approx(sum_product(g, conv_loops(in, dk, zero_b, stride, 1))).epsilon(1e-12));
    double gb0 = 0.0;
    for (std::size_t i = 0; i < out.size() / 2; ++i) gb0 += g[i];
    CHECK(grads.bias[0] == doctest::Approx(gb0).epsilon(1e-12));

    const ops::ConvGrads no_input = ops::conv2d_backward(in, k, stride, 1, g, false);
    CHECK(no_input.input.empty());
    CHECK(no_input.kernel == grads.kernel);
  }
}

TEST_CASE("relu and its subgradient") {
  const Tensor x({4}, std::vector<double>{-1.0, 0.0, 2.0, -0.5});
  CHECK(ops::relu(x).values() == std::vector<double>{0.0, 0.0, 2.0, 0.0});
  const Tensor g({4}, std::vector<double>{1, 1, 1, 1});
  CHECK(ops::relu_backward(x, g).values() == std::vector<double>{0.0, 0.0, 1.0, 0.0});
}

TEST_CASE("maxpool picks the first maximum and routes gradients there") {
  const Tensor x({1, 2, 4}, std::vector<double>{1, 3, 5, 5, 3, 2, 5, 1});
  const ops::PoolResult r = ops::maxpool2_indexed(x);
  CHECK(r.output.values() == std::vector<double>{3, 5});
  CHECK(r.argmax == std::vector<std::size_t>{1, 2});
  const Tensor back = ops::maxpool2_backward(x.shape(), r.argmax, Tensor({1, 1, 2}, std::vector<double>{7, 9}));
  CHECK(back.values() == std::vector<double>{0, 7, 9, 0, 0, 0, 0, 0});
  CHECK_THROWS_AS(ops::maxpool2(Tensor({1, 3, 4})), GeometryError);
}

TEST_CASE("gap is the spatial mean") {
  Rng rng(2);
  const Tensor x = random_tensor({3, 4, 5}, rng);
  const Tensor m = ops::gap(x);
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < 20; ++i) s += x[c * 20 + i];
    CHECK(m[c] == doctest::Approx(s / 20.0).epsilon(1e-14));
  }
  const Tensor g = ops::gap_backward(x.shape(), Tensor({3}, std::vector<double>{20, 40, 60}));
  CHECK(g[0] == doctest::Approx(1.0));
  CHECK(g[59] == doctest::Approx(3.0));
}

TEST_CASE("fc and its gradients") {
  const Tensor x({3}, std::vector<double>{1, 2, 3});
  const Tensor w({2, 3}, std::vector<double>{1, 0, -1, 2, 1, 0});
  const Tensor b({2}, std::vector<double>{0.5, -0.5});
  CHECK(ops::fc(x, w, b).values() == std::vector<double>{-1.5, 3.5});
  const ops::FcGrads g = ops::fc_backward(x, w, Tensor({2}, std::vector<double>{1, 2}));
  CHECK(g.input.values() == std::vector<double>{5, 2, -1});
  CHECK(g.weight.values() == std::vector<double>{1, 2, 3, 2, 4, 6});
  CHECK(g.bias.values() == std::vector<double>{1, 2});
}

TEST_CASE("softmax cross-entropy against an extended-precision oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const double scale = trial < 40 ? 5.0 : 400.0;  // large logits exercise the max shift
    const Tensor z = random_tensor({2}, rng, -scale, scale);
    const std::size_t label = static_cast<std::size_t>(trial % 2);
    const long double z0 = z[0], z1 = z[1];
    const long double m = std::max(z0, z1);
    const long double lse = m + std::log(std::exp(z0 - m) + std::exp(z1 - m));
    const long double loss = lse - (label ? z1 : z0);
    const long double p1 = std::exp(z1 - lse);
    const ops::XentResult r = ops::softmax_xent(z, label);
    CHECK(std::abs(r.loss - static_cast<double>(loss)) <= 1e-12 * std::max(1.0L, loss));
    CHECK(r.grad_logits[1] == doctest::Approx(static_cast<double>(p1 - (label ? 1 : 0))).epsilon(1e-12));
    CHECK(r.grad_logits[0] + r.grad_logits[1] == doctest::Approx(0.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ops::softmax_xent(Tensor({2}), 2), IndexError);
}

TEST_CASE("concat joins flattened parts") {
  const std::vector<Tensor> parts{Tensor({2}, std::vector<double>{1, 2}), Tensor({1}, 3.0)};
  CHECK(ops::concat(parts).values() == std::vector<double>{1, 2, 3});
}
