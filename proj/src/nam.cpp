#include "namseg/nam.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "namseg/errors.hpp"
#include "namseg/text.hpp"

namespace namseg {

Tensor upsample_bilinear(const Tensor& raw, std::size_t height, std::size_t width) {
  if (raw.rank() != 2) throw DimensionError("upsample: expected a [h,w] map");
  const std::size_t h = raw.dim(0), w = raw.dim(1);
  Tensor out({height, width});
  auto coord = [](std::size_t o, std::size_t out_n, std::size_t in_n) {
    if (out_n == 1 || in_n == 1) return 0.0;
    return static_cast<double>(o) * static_cast<double>(in_n - 1) / static_cast<double>(out_n - 1);
  };
  for (std::size_t y = 0; y < height; ++y) {
    const double sy = coord(y, height, h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < width; ++x) {
      const double sx = coord(x, width, w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = raw.at(y0, x0) * (1.0 - fx) + raw.at(y0, x1) * fx;
      const double bottom = raw.at(y1, x0) * (1.0 - fx) + raw.at(y1, x1) * fx;
      out.at(y, x) = top * (1.0 - fy) + bottom * fy;
    }
  }
  return out;
}

Nam nam_from_activations(const Tensor& fc_weight, const std::vector<Tensor>& taps,
                         std::size_t height, std::size_t width) {
  if (taps.empty()) throw DimensionError("NAM needs at least one tap");
  const std::size_t features = fc_weight.dim(1);
  Nam nam;
  nam.map = Tensor({height, width}, 0.0);
  std::size_t offset = 0;
  for (const Tensor& a : taps) {
    const std::size_t k = a.dim(0), h = a.dim(1), w = a.dim(2), hw = h * w;
    if (offset + k > features) throw DimensionError("NAM: more activation channels than FC columns");
    Tensor raw({h, w}, 0.0);
    for (std::size_t ch = 0; ch < k; ++ch) {
      const double wk = fc_weight[features + offset + ch];  // row 1
      const double* src = a.data().data() + ch * hw;
      for (std::size_t i = 0; i < hw; ++i) raw[i] += wk * src[i];
    }
    double sum = 0.0;
    for (double v : raw.data()) sum += v;
    nam.score += sum / static_cast<double>(hw);
    const Tensor up = upsample_bilinear(raw, height, width);
    const double norm = 1.0 / static_cast<double>(hw);
    for (std::size_t i = 0; i < up.size(); ++i) nam.map[i] += norm * up[i];
    nam.raw_maps.push_back(std::move(raw));
    offset += k;
  }
  if (offset != features) throw DimensionError("NAM: FC columns do not match activation channels");
  return nam;
}

Nam compute_nam(const Model& model, const Tensor& image) {
  if (!model.all_finite()) throw NumericError("cannot build a NAM from a model with non-finite weights");
  const ForwardResult f = forward(model, image);
  return nam_from_activations(model.fc_weight(), f.tap_activations, image.dim(1), image.dim(2));
}

Tensor fill_region(const Tensor& image, const PixelSet& mask, double fill) {
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (!mask.within(static_cast<int>(w), static_cast<int>(h))) {
    throw IndexError("mask extends beyond the image bounds");
  }
  Tensor out = image;
  for (const Pixel& p : mask) out[static_cast<std::size_t>(p.y) * w + static_cast<std::size_t>(p.x)] = fill;
  return out;
}

Nam compute_rnam(const Model& model, const Tensor& image, const PixelSet& mask, double fill) {
  return compute_nam(model, fill_region(image, mask, fill));
}

double nam_distance(const Nam& a, const Nam& b, const PixelSet& scope) {
  if (scope.empty()) throw DomainError("nam_distance: empty scope");
  if (a.map.shape() != b.map.shape()) {
    throw DimensionError("nam_distance: map shapes " + shape_string(a.map.shape()) + " and " +
                         shape_string(b.map.shape()) + " differ");
  }
  if (!scope.within(static_cast<int>(a.width()), static_cast<int>(a.height()))) {
    throw IndexError("nam_distance: scope extends beyond the map");
  }
  double sum = 0.0;
  for (const Pixel& p : scope) {
    const double d = a.at(p.x, p.y) - b.at(p.x, p.y);
    sum += d * d;
  }
  return sum;
}

std::string encode_matrix(const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("matrix dump expects a [H,W] map");
  std::ostringstream os;
  for (std::size_t y = 0; y < map.dim(0); ++y) {
    for (std::size_t x = 0; x < map.dim(1); ++x) {
      if (x) os << ' ';
      os << text::format_double(map.at(y, x));
    }
    os << '\n';
  }
  return os.str();
}

void write_matrix(const std::filesystem::path& path, const Tensor& map) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << encode_matrix(map);
}

}  // namespace namseg
