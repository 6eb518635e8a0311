#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

namespace namseg {

struct Pixel {
  int x = 0;
  int y = 0;

  friend bool operator==(const Pixel&, const Pixel&) = default;
  // Raster order: row first, then column.
  friend bool operator<(const Pixel& a, const Pixel& b) {
    return a.y != b.y ? a.y < b.y : a.x < b.x;
  }
};

// Inclusive pixel bounds.
struct BBox {
  int xmin = 0;
  int ymin = 0;
  int xmax = -1;
  int ymax = -1;

  int width() const { return xmax - xmin + 1; }
  int height() const { return ymax - ymin + 1; }
  bool contains(double x, double y) const {
    return x >= xmin && x <= xmax && y >= ymin && y <= ymax;
  }
  BBox dilated(int by) const { return {xmin - by, ymin - by, xmax + by, ymax + by}; }
  BBox clipped(int width, int height) const;

  friend bool operator==(const BBox&, const BBox&) = default;
};

// Binary image, row-major, 1 = set.
struct BinaryMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int w, int h) : width(w), height(h), bits(static_cast<std::size_t>(w * h), 0) {}

  bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y * width + x)]; }
  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y * width + x)]; }
};

// Set of pixels kept sorted in raster order without duplicates.
class PixelSet {
 public:
  PixelSet() = default;
  explicit PixelSet(std::vector<Pixel> pixels);
  static PixelSet from_mask(const BinaryMask& mask);

  std::size_t size() const { return pixels_.size(); }
  bool empty() const { return pixels_.empty(); }
  const std::vector<Pixel>& pixels() const { return pixels_; }
  auto begin() const { return pixels_.begin(); }
  auto end() const { return pixels_.end(); }

  bool contains(Pixel p) const;
  // Tight bounds; nullopt for the empty set.
  std::optional<BBox> bbox() const;
  // Mean pixel coordinate; nullopt for the empty set.
  std::optional<std::pair<double, double>> centroid() const;

  BinaryMask to_mask(int width, int height) const;
  bool within(int width, int height) const;
  bool is_4_connected() const;

  friend bool operator==(const PixelSet&, const PixelSet&) = default;

 private:
  std::vector<Pixel> pixels_;
};

std::size_t intersection_size(const PixelSet& a, const PixelSet& b);
PixelSet set_intersection(const PixelSet& a, const PixelSet& b);
PixelSet set_union(const PixelSet& a, const PixelSet& b);
bool is_subset(const PixelSet& inner, const PixelSet& outer);

// 4-connected components of the set bits, in raster order of their first pixel.
std::vector<PixelSet> connected_components(const BinaryMask& mask);

// The 4-connected component of `region` that contains `seed` (empty if the
// seed is not in the region).
PixelSet component_containing(const PixelSet& region, Pixel seed);

}  // namespace namseg
