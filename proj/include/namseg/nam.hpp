#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "namseg/model.hpp"
#include "namseg/pixels.hpp"
#include "namseg/tensor.hpp"

namespace namseg {

// Nodule activation map.
//
// Per GAP tap t the raw map is the nodule-row FC weights applied to the head
// activations, raw_t(x,y) = sum_k w[1, t*K+k] * a_k(x,y). Because the GAP is
// a mean, the nodule logit decomposes as
//
//   logits[1] = fc_bias[1] + sum_t mean(raw_t)
//
// and `score` holds the sum. `map` is the input-resolution view: every raw
// map bilinearly upsampled (corner aligned), scaled by its tap's 1/(h_t*w_t)
// and summed over taps.
struct Nam {
  Tensor map;                    // [H,W]
  std::vector<Tensor> raw_maps;  // per tap [h_t,w_t]
  double score = 0.0;

  std::size_t height() const { return map.dim(0); }
  std::size_t width() const { return map.dim(1); }
  double at(int x, int y) const {
    return map.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x));
  }
};

// Throws NumericError if the model holds non-finite weights.
Nam compute_nam(const Model& model, const Tensor& image);

// NAM from already computed head activations (one [K,h,w] tensor per tap).
Nam nam_from_activations(const Tensor& fc_weight, const std::vector<Tensor>& tap_activations,
                         std::size_t height, std::size_t width);

// Corner-aligned bilinear resize of a [h,w] map to [height,width].
Tensor upsample_bilinear(const Tensor& raw, std::size_t height, std::size_t width);

// Copy of the [1,H,W] image with the masked pixels replaced by `fill`.
Tensor fill_region(const Tensor& image, const PixelSet& mask, double fill);

// Residual NAM: the NAM of the image with `mask` filled by the background
// level. An empty mask reproduces compute_nam exactly.
Nam compute_rnam(const Model& model, const Tensor& image, const PixelSet& mask, double fill);

// Sum over scope pixels of the squared difference of the two maps.
// Throws DomainError for an empty scope, DimensionError on map shape mismatch
// and IndexError for scope pixels outside the map.
double nam_distance(const Nam& a, const Nam& b, const PixelSet& scope);

// Plain-text matrix: one row per line, space-separated decimals.
std::string encode_matrix(const Tensor& map);
void write_matrix(const std::filesystem::path& path, const Tensor& map);

}  // namespace namseg
