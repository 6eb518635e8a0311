#include "namseg/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <string>

#include "namseg/errors.hpp"

namespace namseg::ops {

namespace {

struct ConvShape {
  std::size_t c_in, h, w;
  std::size_t c_out, kh, kw;
  std::size_t out_h, out_w;
  std::size_t stride, pad;

  std::size_t patch() const { return c_in * kh * kw; }
  std::size_t pixels() const { return out_h * out_w; }
};

// A multi-threaded GEMM may split work differently between runs; pin to one
// thread so results stay bit-reproducible.
void pin_blas_threads() {
  static const bool pinned = [] {
    openblas_set_num_threads(1);
    return true;
  }();
  (void)pinned;
}

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                        const char* axis) {
  const std::size_t padded = in + 2 * pad;
  if (padded < k || (padded - k) % stride != 0) {
    throw GeometryError(std::string("conv2d: non-integral output ") + axis + " for input " +
                        std::to_string(in) + ", kernel " + std::to_string(k) + ", stride " +
                        std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  return (padded - k) / stride + 1;
}

ConvShape conv_shape(const Tensor& input, const Tensor& kernel, std::size_t stride,
                     std::size_t pad) {
  if (input.rank() != 3) {
    throw DimensionError("conv2d: input must be [C,H,W], got " + shape_string(input.shape()));
  }
  if (kernel.rank() != 4) {
    throw DimensionError("conv2d: kernel must be [C_out,C_in,kH,kW], got " +
                         shape_string(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(0)) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                         " input channels, input has " + std::to_string(input.dim(0)));
  }
  if (kernel.dim(2) % 2 == 0 || kernel.dim(3) % 2 == 0) {
    throw GeometryError("conv2d: kernel extents must be odd, got " + shape_string(kernel.shape()));
  }
  if (stride == 0) throw GeometryError("conv2d: stride must be >= 1");
  ConvShape s{};
  s.c_in = input.dim(0);
  s.h = input.dim(1);
  s.w = input.dim(2);
  s.c_out = kernel.dim(0);
  s.kh = kernel.dim(2);
  s.kw = kernel.dim(3);
  s.stride = stride;
  s.pad = pad;
  s.out_h = conv_extent(s.h, s.kh, stride, pad, "height");
  s.out_w = conv_extent(s.w, s.kw, stride, pad, "width");
  return s;
}

// Valid output-column range [lo, hi) whose input column ox*stride+k-pad is
// inside [0, extent).
std::pair<std::size_t, std::size_t> valid_range(std::size_t extent, std::size_t out,
                                                std::size_t k, std::size_t stride,
                                                std::size_t pad) {
  const auto shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  const auto st = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + st - 1) / st;
  std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(extent) - 1 - shift);
  hi = hi < 0 ? 0 : hi / st + 1;
  lo = std::min<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(out));
  hi = std::clamp<std::ptrdiff_t>(hi, lo, static_cast<std::ptrdiff_t>(out));
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// Per-thread scratch reused across calls; conv buffers run to megabytes and
// fresh allocations would dominate small convolutions.
std::vector<double>& scratch(int slot, std::size_t n) {
  thread_local std::vector<double> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b;
}

// Unfolds input patches into a [C_in*kH*kW, H'*W'] matrix.
void im2col(const ConvShape& s, std::span<const double> in, double* col) {
  for (std::size_t c = 0; c < s.c_in; ++c) {
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      const auto [oy_lo, oy_hi] = valid_range(s.h, s.out_h, ky, s.stride, s.pad);
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        const auto [ox_lo, ox_hi] = valid_range(s.w, s.out_w, kx, s.stride, s.pad);
        double* row = col + ((c * s.kh + ky) * s.kw + kx) * s.pixels();
        std::fill(row, row + oy_lo * s.out_w, 0.0);
        std::fill(row + oy_hi * s.out_w, row + s.pixels(), 0.0);
        for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
          const std::size_t iy = oy * s.stride + ky - s.pad;
          const double* src = in.data() + (c * s.h + iy) * s.w;
          double* dst = row + oy * s.out_w;
          std::fill(dst, dst + ox_lo, 0.0);
          std::fill(dst + ox_hi, dst + s.out_w, 0.0);
          if (s.stride == 1) {
            std::copy(src + (ox_lo + kx - s.pad), src + (ox_hi + kx - s.pad), dst + ox_lo);
          } else {
            for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) dst[ox] = src[ox * s.stride + kx - s.pad];
          }
        }
      }
    }
  }
}

void col2im(const ConvShape& s, const double* col, std::span<double> out) {
  for (std::size_t c = 0; c < s.c_in; ++c) {
    for (std::size_t ky = 0; ky < s.kh; ++ky) {
      const auto [oy_lo, oy_hi] = valid_range(s.h, s.out_h, ky, s.stride, s.pad);
      for (std::size_t kx = 0; kx < s.kw; ++kx) {
        const auto [ox_lo, ox_hi] = valid_range(s.w, s.out_w, kx, s.stride, s.pad);
        const double* row = col + ((c * s.kh + ky) * s.kw + kx) * s.pixels();
        for (std::size_t oy = oy_lo; oy < oy_hi; ++oy) {
          const std::size_t iy = oy * s.stride + ky - s.pad;
          double* dst = out.data() + (c * s.h + iy) * s.w;
          const double* src = row + oy * s.out_w;
          for (std::size_t ox = ox_lo; ox < ox_hi; ++ox) dst[ox * s.stride + kx - s.pad] += src[ox];
        }
      }
    }
  }
}

int blas_int(std::size_t v) { return static_cast<int>(v); }

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
  const ConvShape s = conv_shape(input, kernel, stride, pad);
  if (bias.rank() != 1 || bias.dim(0) != s.c_out) {
    throw DimensionError("conv2d: bias must be [" + std::to_string(s.c_out) + "], got " +
                         shape_string(bias.shape()));
  }
  pin_blas_threads();
  Tensor out({s.c_out, s.out_h, s.out_w});
  auto o = out.data();
  for (std::size_t co = 0; co < s.c_out; ++co) {
    std::fill_n(o.data() + co * s.pixels(), s.pixels(), bias[co]);
  }
  double* col = scratch(0, s.patch() * s.pixels()).data();
  im2col(s, input.data(), col);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(s.c_out), blas_int(s.pixels()),
              blas_int(s.patch()), 1.0, kernel.data().data(), blas_int(s.patch()), col,
              blas_int(s.pixels()), 1.0, o.data(), blas_int(s.pixels()));
  return out;
}

ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                          std::size_t pad, const Tensor& grad_out, bool input_grad) {
  const ConvShape s = conv_shape(input, kernel, stride, pad);
  if (grad_out.shape() != Shape{s.c_out, s.out_h, s.out_w}) {
    throw DimensionError("conv2d_backward: upstream gradient shape " +
                         shape_string(grad_out.shape()) + " does not match output");
  }
  pin_blas_threads();
  ConvGrads g{input_grad ? Tensor(input.shape()) : Tensor(), Tensor(kernel.shape()),
              Tensor({s.c_out})};
  const auto go = grad_out.data();
  for (std::size_t co = 0; co < s.c_out; ++co) {
    double acc = 0.0;
    const double* row = go.data() + co * s.pixels();
    for (std::size_t p = 0; p < s.pixels(); ++p) acc += row[p];
    g.bias[co] = acc;
  }

  double* col = scratch(0, s.patch() * s.pixels()).data();
  im2col(s, input.data(), col);
  // dK = dOut [C_out, P] . col^T [P, CKK]
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(s.c_out), blas_int(s.patch()),
              blas_int(s.pixels()), 1.0, go.data(), blas_int(s.pixels()), col,
              blas_int(s.pixels()), 0.0, g.kernel.data().data(), blas_int(s.patch()));
  if (!input_grad) return g;
  // dcol = K^T [CKK, C_out] . dOut [C_out, P]
  double* dcol = scratch(1, s.patch() * s.pixels()).data();
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(s.patch()), blas_int(s.pixels()),
              blas_int(s.c_out), 1.0, kernel.data().data(), blas_int(s.patch()), go.data(),
              blas_int(s.pixels()), 0.0, dcol, blas_int(s.pixels()));
  col2im(s, dcol, g.input.data());
  return g;
}

Tensor relu(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& x, const Tensor& grad_out) {
  if (x.shape() != grad_out.shape()) throw DimensionError("relu_backward: shape mismatch");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] > 0.0 ? grad_out[i] : 0.0;
  return g;
}

PoolResult maxpool2_indexed(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("maxpool2: input must be [C,H,W]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % 2 != 0 || w % 2 != 0) {
    throw GeometryError("maxpool2: spatial size must be even, got " + shape_string(x.shape()));
  }
  PoolResult r{Tensor({c, h / 2, w / 2}), {}};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; y += 2) {
      for (std::size_t xx = 0; xx < w; xx += 2) {
        std::size_t best = (ch * h + y) * w + xx;
        for (std::size_t idx : {best + 1, best + w, best + w + 1}) {
          if (x[idx] > x[best]) best = idx;
        }
        r.output[o] = x[best];
        r.argmax[o] = best;
        ++o;
      }
    }
  }
  return r;
}

Tensor maxpool2(const Tensor& x) { return maxpool2_indexed(x).output; }

Tensor maxpool2_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                         const Tensor& grad_out) {
  if (argmax.size() != grad_out.size()) throw DimensionError("maxpool2_backward: index mismatch");
  Tensor g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_out[i];
  return g;
}

Tensor gap(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("gap: input must be [K,H,W]");
  const std::size_t k = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out({k});
  for (std::size_t ch = 0; ch < k; ++ch) {
    double acc = 0.0;
    const double* p = x.data().data() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    out[ch] = acc / static_cast<double>(hw);
  }
  return out;
}

Tensor gap_backward(const Shape& input_shape, const Tensor& grad_out) {
  if (input_shape.size() != 3 || grad_out.size() != input_shape[0]) {
    throw DimensionError("gap_backward: shape mismatch");
  }
  const std::size_t hw = input_shape[1] * input_shape[2];
  Tensor g(input_shape);
  for (std::size_t ch = 0; ch < input_shape[0]; ++ch) {
    std::fill_n(g.data().data() + ch * hw, hw, grad_out[ch] / static_cast<double>(hw));
  }
  return g;
}

Tensor fc(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (weight.rank() != 2 || x.rank() != 1 || bias.rank() != 1 || weight.dim(1) != x.dim(0) ||
      bias.dim(0) != weight.dim(0)) {
    throw DimensionError("fc: incompatible shapes x " + shape_string(x.shape()) + ", weight " +
                         shape_string(weight.shape()) + ", bias " + shape_string(bias.shape()));
  }
  const std::size_t m = weight.dim(0), k = weight.dim(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += weight[i * k + j] * x[j];
    out[i] = acc + bias[i];
  }
  return out;
}

FcGrads fc_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out) {
  const std::size_t m = weight.dim(0), k = weight.dim(1);
  if (x.size() != k || grad_out.size() != m) throw DimensionError("fc_backward: shape mismatch");
  FcGrads g{Tensor({k}), Tensor(weight.shape()), grad_out};
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      g.weight[i * k + j] = grad_out[i] * x[j];
      g.input[j] += weight[i * k + j] * grad_out[i];
    }
  }
  return g;
}

Tensor concat(std::span<const Tensor> parts) {
  std::vector<double> joined;
  for (const auto& p : parts) joined.insert(joined.end(), p.data().begin(), p.data().end());
  if (joined.empty()) throw DimensionError("concat: nothing to join");
  const std::size_t n = joined.size();
  return Tensor({n}, std::move(joined));
}

Tensor softmax(const Tensor& logits) {
  const double mx = *std::max_element(logits.data().begin(), logits.data().end());
  Tensor p(logits.shape());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p.data()) v /= z;
  return p;
}

XentResult softmax_xent(const Tensor& logits, std::size_t label) {
  if (logits.rank() != 1) throw DimensionError("softmax_xent: logits must be 1-d");
  if (label >= logits.size()) {
    throw IndexError("softmax_xent: label " + std::to_string(label) + " out of range for " +
                     std::to_string(logits.size()) + " classes");
  }
  const double mx = *std::max_element(logits.data().begin(), logits.data().end());
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - mx);
  const double log_z = std::log(z) + mx;
  XentResult r{log_z - logits[label], Tensor(logits.shape())};
  for (std::size_t i = 0; i < logits.size(); ++i) r.grad_logits[i] = std::exp(logits[i] - log_z);
  r.grad_logits[label] -= 1.0;
  return r;
}

}  // namespace namseg::ops
