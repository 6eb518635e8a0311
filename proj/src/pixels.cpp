#include "namseg/pixels.hpp"

#include <algorithm>
#include <deque>

namespace namseg {

BBox BBox::clipped(int width, int height) const {
  return {std::max(xmin, 0), std::max(ymin, 0), std::min(xmax, width - 1),
          std::min(ymax, height - 1)};
}

PixelSet::PixelSet(std::vector<Pixel> pixels) : pixels_(std::move(pixels)) {
  std::sort(pixels_.begin(), pixels_.end());
  pixels_.erase(std::unique(pixels_.begin(), pixels_.end()), pixels_.end());
}

PixelSet PixelSet::from_mask(const BinaryMask& mask) {
  PixelSet s;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y)) s.pixels_.push_back({x, y});
    }
  }
  return s;
}

bool PixelSet::contains(Pixel p) const {
  return std::binary_search(pixels_.begin(), pixels_.end(), p);
}

std::optional<BBox> PixelSet::bbox() const {
  if (pixels_.empty()) return std::nullopt;
  BBox b{pixels_.front().x, pixels_.front().y, pixels_.front().x, pixels_.back().y};
  for (const auto& p : pixels_) {
    b.xmin = std::min(b.xmin, p.x);
    b.xmax = std::max(b.xmax, p.x);
  }
  return b;
}

std::optional<std::pair<double, double>> PixelSet::centroid() const {
  if (pixels_.empty()) return std::nullopt;
  double sx = 0.0, sy = 0.0;
  for (const auto& p : pixels_) {
    sx += p.x;
    sy += p.y;
  }
  const auto n = static_cast<double>(pixels_.size());
  return std::pair{sx / n, sy / n};
}

BinaryMask PixelSet::to_mask(int width, int height) const {
  BinaryMask m(width, height);
  for (const auto& p : pixels_) {
    if (m.in_bounds(p.x, p.y)) m.at(p.x, p.y) = 1;
  }
  return m;
}

bool PixelSet::within(int width, int height) const {
  return std::all_of(pixels_.begin(), pixels_.end(), [&](const Pixel& p) {
    return p.x >= 0 && p.y >= 0 && p.x < width && p.y < height;
  });
}

bool PixelSet::is_4_connected() const {
  if (pixels_.empty()) return false;
  return component_containing(*this, pixels_.front()).size() == pixels_.size();
}

std::size_t intersection_size(const PixelSet& a, const PixelSet& b) {
  std::size_t n = 0;
  auto i = a.begin(), j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) {
      ++i;
    } else if (*j < *i) {
      ++j;
    } else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

PixelSet set_intersection(const PixelSet& a, const PixelSet& b) {
  std::vector<Pixel> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return PixelSet(std::move(out));
}

PixelSet set_union(const PixelSet& a, const PixelSet& b) {
  std::vector<Pixel> out;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return PixelSet(std::move(out));
}

bool is_subset(const PixelSet& inner, const PixelSet& outer) {
  return std::includes(outer.begin(), outer.end(), inner.begin(), inner.end());
}

namespace {

constexpr int kDx[4] = {1, -1, 0, 0};
constexpr int kDy[4] = {0, 0, 1, -1};

}  // namespace

std::vector<PixelSet> connected_components(const BinaryMask& mask) {
  std::vector<PixelSet> out;
  std::vector<std::uint8_t> seen(mask.bits.size(), 0);
  std::deque<Pixel> queue;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y) || seen[static_cast<std::size_t>(y * mask.width + x)]) continue;
      std::vector<Pixel> comp;
      queue.push_back({x, y});
      seen[static_cast<std::size_t>(y * mask.width + x)] = 1;
      while (!queue.empty()) {
        const Pixel p = queue.front();
        queue.pop_front();
        comp.push_back(p);
        for (int d = 0; d < 4; ++d) {
          const int nx = p.x + kDx[d], ny = p.y + kDy[d];
          if (!mask.in_bounds(nx, ny) || !mask.at(nx, ny)) continue;
          auto& s = seen[static_cast<std::size_t>(ny * mask.width + nx)];
          if (s) continue;
          s = 1;
          queue.push_back({nx, ny});
        }
      }
      out.emplace_back(std::move(comp));
    }
  }
  return out;
}

PixelSet component_containing(const PixelSet& region, Pixel seed) {
  if (!region.contains(seed)) return {};
  const BBox b = *region.bbox();
  BinaryMask local(b.width(), b.height());
  for (const auto& p : region) local.at(p.x - b.xmin, p.y - b.ymin) = 1;
  std::vector<Pixel> comp;
  std::deque<Pixel> queue{{seed.x - b.xmin, seed.y - b.ymin}};
  local.at(seed.x - b.xmin, seed.y - b.ymin) = 0;
  while (!queue.empty()) {
    const Pixel p = queue.front();
    queue.pop_front();
    comp.push_back({p.x + b.xmin, p.y + b.ymin});
    for (int d = 0; d < 4; ++d) {
      const int nx = p.x + kDx[d], ny = p.y + kDy[d];
      if (!local.in_bounds(nx, ny) || !local.at(nx, ny)) continue;
      local.at(nx, ny) = 0;
      queue.push_back({nx, ny});
    }
  }
  return PixelSet(std::move(comp));
}

}  // namespace namseg
