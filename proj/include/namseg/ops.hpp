#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "namseg/tensor.hpp"

// Forward and backward kernels for the layer primitives of the classifier.
// Each backward function takes the upstream gradient of the op's output and
// returns gradients with respect to the op's inputs.
namespace namseg::ops {

// Cross-correlation (no kernel flip) with zero padding.
// input [C_in,H,W], kernel [C_out,C_in,kH,kW], bias [C_out] -> [C_out,H',W'].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              std::size_t stride, std::size_t pad);

struct ConvGrads {
  Tensor input;
  Tensor kernel;
  Tensor bias;
};
// With input_grad false the (costly) input gradient is skipped and left empty.
ConvGrads conv2d_backward(const Tensor& input, const Tensor& kernel, std::size_t stride,
                          std::size_t pad, const Tensor& grad_out, bool input_grad = true);

Tensor relu(const Tensor& x);
// Subgradient at exactly zero is zero.
Tensor relu_backward(const Tensor& x, const Tensor& grad_out);

// 2x2 window maximum with stride 2. argmax holds the flat input index chosen
// for each output cell (first maximum in raster order on ties).
struct PoolResult {
  Tensor output;
  std::vector<std::size_t> argmax;
};
PoolResult maxpool2_indexed(const Tensor& x);
Tensor maxpool2(const Tensor& x);
Tensor maxpool2_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                         const Tensor& grad_out);

// Global average pooling: [K,H,W] -> [K], arithmetic mean over space.
Tensor gap(const Tensor& x);
Tensor gap_backward(const Shape& input_shape, const Tensor& grad_out);

// weight [M,K] . x [K] + bias [M].
Tensor fc(const Tensor& x, const Tensor& weight, const Tensor& bias);

struct FcGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;
};
FcGrads fc_backward(const Tensor& x, const Tensor& weight, const Tensor& grad_out);

// Flattens and joins 1-d tensors end to end.
Tensor concat(std::span<const Tensor> parts);

Tensor softmax(const Tensor& logits);

struct XentResult {
  double loss = 0.0;
  Tensor grad_logits;  // d loss / d logits = softmax - onehot
};
// -log softmax(logits)[label], evaluated with max subtraction.
XentResult softmax_xent(const Tensor& logits, std::size_t label);

}  // namespace namseg::ops
