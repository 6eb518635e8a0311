#include "namseg/segment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "namseg/errors.hpp"

namespace namseg {

const char* scope_origin_name(ScopeOrigin origin) {
  return origin == ScopeOrigin::one_gap_c1 ? "C1" : "Cmulti";
}

const char* outcome_name(Outcome outcome) {
  switch (outcome) {
    case Outcome::no_nodule: return "no_nodule";
    case Outcome::detected: return "detected";
    case Outcome::detection_failed: return "detection_failed";
  }
  return "unknown";
}

void ScopeConfig::validate() const {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("scope tau must lie in [0,1]");
  if (!(min_dynamic >= 0.0 && min_dynamic <= 1.0)) {
    throw ConfigError("scope min_dynamic must lie in [0,1]");
  }
}

void IcmConfig::validate() const {
  if (phases < 2) throw ConfigError("ICM needs at least 2 phases");
  if (beta && !(*beta >= 0.0 && std::isfinite(*beta))) throw ConfigError("ICM beta must be >= 0");
  if (!(beta_scale >= 0.0) || !(beta_cap >= 0.0)) throw ConfigError("ICM beta scale/cap must be >= 0");
  if (max_iters < 1) throw ConfigError("ICM max_iters must be >= 1");
  if (window_margin < 0) throw ConfigError("ICM window_margin must be >= 0");
}

// ---- watershed -------------------------------------------------------------------

namespace {

struct MapView {
  int width;
  int height;
  std::span<const double> values;
};

MapView checked_map(const Tensor& map) {
  if (map.rank() != 2) throw DimensionError("expected a [H,W] map, got " + shape_string(map.shape()));
  if (!map.all_finite()) throw NumericError("map contains non-finite values");
  return {static_cast<int>(map.dim(1)), static_cast<int>(map.dim(0)), map.data()};
}

double median_of(std::span<const double> values) {
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  return n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
}

class UnionFind {
 public:
  std::size_t add() {
    parent_.push_back(parent_.size());
    return parent_.size() - 1;
  }
  std::size_t find(std::size_t i) {
    while (parent_[i] != i) {
      parent_[i] = parent_[parent_[i]];
      i = parent_[i];
    }
    return i;
  }
  void attach(std::size_t child_root, std::size_t root) { parent_[child_root] = root; }

 private:
  std::vector<std::size_t> parent_;
};

constexpr int kDx[4] = {1, -1, 0, 0};
constexpr int kDy[4] = {0, 0, 1, -1};

}  // namespace

std::vector<Basin> watershed_basins(const Tensor& map, double min_dynamic) {
  const MapView m = checked_map(map);
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  const double merge_below = min_dynamic * (*hi - *lo);
  const std::size_t n = m.values.size();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return m.values[a] > m.values[b]; });

  // Flood from the top: a pixel joins the basin of its processed neighbours;
  // where basins meet, the lower-peaked one is absorbed if its dynamic is small.
  constexpr std::size_t unset = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> basin_of(n, unset);
  std::vector<std::size_t> peak_index;  // per basin id
  UnionFind sets;
  auto higher = [&](std::size_t a, std::size_t b) {
    const double va = m.values[peak_index[a]], vb = m.values[peak_index[b]];
    return va != vb ? va > vb : peak_index[a] < peak_index[b];
  };

  std::vector<std::size_t> roots;
  for (const std::size_t i : order) {
    const int x = static_cast<int>(i) % m.width, y = static_cast<int>(i) / m.width;
    roots.clear();
    for (int d = 0; d < 4; ++d) {
      const int nx = x + kDx[d], ny = y + kDy[d];
      if (nx < 0 || ny < 0 || nx >= m.width || ny >= m.height) continue;
      const std::size_t j = static_cast<std::size_t>(ny * m.width + nx);
      if (basin_of[j] == unset) continue;
      const std::size_t r = sets.find(basin_of[j]);
      if (std::find(roots.begin(), roots.end(), r) == roots.end()) roots.push_back(r);
    }
    if (roots.empty()) {
      basin_of[i] = sets.add();
      peak_index.push_back(i);
      continue;
    }
    std::sort(roots.begin(), roots.end(), higher);
    for (std::size_t k = 1; k < roots.size(); ++k) {
      if (m.values[peak_index[roots[k]]] - m.values[i] <= merge_below) sets.attach(roots[k], roots[0]);
    }
    basin_of[i] = roots[0];
  }

  std::vector<std::size_t> slot(peak_index.size(), unset);
  std::vector<Basin> basins;
  std::vector<std::vector<Pixel>> members;
  for (std::size_t b = 0; b < peak_index.size(); ++b) {
    if (sets.find(b) != b) continue;
    slot[b] = basins.size();
    const std::size_t p = peak_index[b];
    basins.push_back({{}, {static_cast<int>(p) % m.width, static_cast<int>(p) / m.width}, m.values[p]});
    members.emplace_back();
  }
  for (std::size_t i = 0; i < n; ++i) {
    members[slot[sets.find(basin_of[i])]].push_back(
        {static_cast<int>(i) % m.width, static_cast<int>(i) / m.width});
  }
  for (std::size_t b = 0; b < basins.size(); ++b) basins[b].pixels = PixelSet(std::move(members[b]));
  std::sort(basins.begin(), basins.end(), [](const Basin& a, const Basin& b) {
    return a.peak_value != b.peak_value ? a.peak_value > b.peak_value : a.peak < b.peak;
  });
  return basins;
}

std::vector<Scope> extract_top_scopes(const Nam& nam, std::size_t n, const ScopeConfig& cfg) {
  if (n == 0) throw DomainError("extract_top_scopes: n must be >= 1");
  cfg.validate();
  const MapView m = checked_map(nam.map);
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  if (!(*hi - *lo > 1e-12 * std::max(1.0, std::abs(*hi)))) {
    throw DegenerateMapError("activation map is constant, no distinct maximum");
  }
  const double floor = median_of(m.values);

  std::vector<Scope> scopes;
  for (const Basin& basin : watershed_basins(nam.map, cfg.min_dynamic)) {
    if (scopes.size() == n) break;
    if (!scopes.empty() && basin.peak_value <= floor) break;
    const double threshold = floor + cfg.tau * (basin.peak_value - floor);
    std::vector<Pixel> kept;
    for (const Pixel& p : basin.pixels) {
      if (nam.at(p.x, p.y) >= threshold) kept.push_back(p);
    }
    scopes.push_back({component_containing(PixelSet(std::move(kept)), basin.peak),
                      ScopeOrigin::one_gap_c1, basin.peak, basin.peak_value});
  }
  return scopes;
}

Scope extract_scope(const Nam& nam, const ScopeConfig& cfg) {
  return extract_top_scopes(nam, 1, cfg).front();
}

// ---- ICM ---------------------------------------------------------------------

int PhaseLabels::brightest_phase() const {
  int best = 0;
  for (int k = 1; k < static_cast<int>(means.size()); ++k) {
    if (means[static_cast<std::size_t>(k)] >= means[static_cast<std::size_t>(best)]) best = k;
  }
  return best;
}

double icm_energy(std::span<const double> values, int width, int height,
                  std::span<const int> labels, std::span<const double> means, double beta) {
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (values.size() != n || labels.size() != n) throw DimensionError("icm_energy: size mismatch");
  double unary = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = values[i] - means[static_cast<std::size_t>(labels[i])];
    unary += d * d;
  }
  std::size_t cuts = 0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const int l = labels[static_cast<std::size_t>(y * width + x)];
      if (x + 1 < width && labels[static_cast<std::size_t>(y * width + x + 1)] != l) ++cuts;
      if (y + 1 < height && labels[static_cast<std::size_t>((y + 1) * width + x)] != l) ++cuts;
    }
  }
  return unary + beta * static_cast<double>(cuts);
}

std::vector<double> icm_initial_means(std::span<const double> values, int phases) {
  if (values.empty()) throw DimensionError("icm_initial_means: no values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double last = static_cast<double>(sorted.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(phases));
  for (int k = 0; k < phases; ++k) {
    const double pos = (2.0 * k + 1.0) / (2.0 * phases) * last;
    const std::size_t i = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(i);
    const double next = i + 1 < sorted.size() ? sorted[i + 1] : sorted[i];
    means[static_cast<std::size_t>(k)] = sorted[i] + frac * (next - sorted[i]);
  }
  if (std::adjacent_find(means.begin(), means.end(), std::greater_equal<>()) != means.end()) {
    const double lo = sorted.front(), hi = sorted.back();
    for (int k = 0; k < phases; ++k) {
      means[static_cast<std::size_t>(k)] = lo + (2.0 * k + 1.0) / (2.0 * phases) * (hi - lo);
    }
  }
  return means;
}

PhaseLabels icm_segment_values(std::span<const double> values, int width, int height,
                               const IcmConfig& cfg, Window placement) {
  cfg.validate();
  if (width < 2 || height < 2) throw GeometryError("ICM window must be at least 2x2");
  const std::size_t n = static_cast<std::size_t>(width) * static_cast<std::size_t>(height);
  if (values.size() != n) throw DimensionError("ICM: value count does not match window size");
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("ICM: non-finite intensity");
  }

  PhaseLabels out;
  out.window = {placement.x0, placement.y0, width, height};
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  out.beta = cfg.beta ? *cfg.beta : std::min(cfg.beta_scale * range * range, cfg.beta_cap);
  out.initial_means = icm_initial_means(values, cfg.phases);
  out.means = out.initial_means;
  const std::size_t phases = out.means.size();

  out.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    double best_d = std::abs(values[i] - out.means[0]);
    for (std::size_t k = 1; k < phases; ++k) {
      const double d = std::abs(values[i] - out.means[k]);
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(k);
      }
    }
    out.labels[i] = best;
  }

  auto energy = [&](const std::vector<int>& labels, const std::vector<double>& means) {
    return icm_energy(values, width, height, labels, means, out.beta);
  };
  double current = energy(out.labels, out.means);
  out.energies.push_back(current);

  std::vector<double> sums(phases), counts(phases), cost(phases);
  for (int iter = 0; iter < cfg.max_iters; ++iter) {
    // Phase means; an empty phase keeps its previous mean.
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[static_cast<std::size_t>(out.labels[i])] += values[i];
      counts[static_cast<std::size_t>(out.labels[i])] += 1.0;
    }
    std::vector<double> means = out.means;
    for (std::size_t k = 0; k < phases; ++k) {
      if (counts[k] > 0.0) means[k] = sums[k] / counts[k];
    }
    if (const double e = energy(out.labels, means); e <= current) {
      out.means = std::move(means);
      current = e;
    }

    const std::vector<int> before = out.labels;
    bool changed = false;
    for (int y = 0; y < height; ++y) {
      for (int x = 0; x < width; ++x) {
        const std::size_t i = static_cast<std::size_t>(y * width + x);
        for (std::size_t k = 0; k < phases; ++k) {
          const double d = values[i] - out.means[k];
          cost[k] = d * d;
        }
        for (int dir = 0; dir < 4; ++dir) {
          const int nx = x + kDx[dir], ny = y + kDy[dir];
          if (nx < 0 || ny < 0 || nx >= width || ny >= height) continue;
          const int nl = out.labels[static_cast<std::size_t>(ny * width + nx)];
          for (std::size_t k = 0; k < phases; ++k) {
            if (static_cast<int>(k) != nl) cost[k] += out.beta;
          }
        }
        const int cur = out.labels[i];
        int best = cur;
        for (std::size_t k = 0; k < phases; ++k) {
          if (cost[k] < cost[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
        }
        if (best != cur) {
          out.labels[i] = best;
          changed = true;
        }
      }
    }
    const double after = energy(out.labels, out.means);
    if (after > current) {
      // Only reachable through rounding; keep the last accepted state.
      out.labels = before;
      out.energies.push_back(current);
      break;
    }
    current = after;
    out.energies.push_back(current);
    ++out.sweeps;
    if (!changed) break;
  }
  return out;
}

Window icm_window(const Scope& scope, int image_width, int image_height, int margin) {
  const auto box = scope.pixels.bbox();
  if (!box) throw GeometryError("ICM window requested for an empty scope");
  const BBox w = box->dilated(margin).clipped(image_width, image_height);
  return {w.xmin, w.ymin, w.width(), w.height()};
}

PhaseLabels icm_segment(const Tensor& image, const Scope& scope, const IcmConfig& cfg) {
  if (image.rank() != 3 || image.dim(0) != 1) throw GeometryError("ICM expects a [1,H,W] image");
  const int h = static_cast<int>(image.dim(1)), w = static_cast<int>(image.dim(2));
  if (!scope.pixels.within(w, h)) throw GeometryError("scope extends beyond the image");
  const Window win = icm_window(scope, w, h, cfg.window_margin);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(win.width * win.height));
  for (int y = win.y0; y < win.y0 + win.height; ++y) {
    for (int x = win.x0; x < win.x0 + win.width; ++x) {
      values.push_back(image.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x)));
    }
  }
  return icm_segment_values(values, win.width, win.height, cfg, win);
}

// ---- candidates ------------------------------------------------------------------

Candidate Candidate::from_pixels(PixelSet pixels) {
  Candidate c;
  c.area = pixels.size();
  if (const auto box = pixels.bbox()) c.bbox = *box;
  c.pixels = std::move(pixels);
  return c;
}

std::vector<Candidate> extract_candidates(const PhaseLabels& labels, const Scope& scope,
                                          std::size_t min_area) {
  const Window& win = labels.window;
  const int bright = labels.brightest_phase();
  BinaryMask mask(win.width, win.height);
  for (int y = 0; y < win.height; ++y) {
    for (int x = 0; x < win.width; ++x) {
      mask.at(x, y) = labels.labels[static_cast<std::size_t>(y * win.width + x)] == bright;
    }
  }
  std::vector<Candidate> out;
  for (const PixelSet& component : connected_components(mask)) {
    if (component.size() < min_area) continue;
    std::vector<Pixel> shifted;
    shifted.reserve(component.size());
    for (const Pixel& p : component) shifted.push_back({p.x + win.x0, p.y + win.y0});
    PixelSet pixels(std::move(shifted));
    if (intersection_size(pixels, scope.pixels) == 0) continue;
    out.push_back(Candidate::from_pixels(std::move(pixels)));
  }
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.area != b.area) return a.area > b.area;
    if (a.bbox.xmin != b.bbox.xmin) return a.bbox.xmin < b.bbox.xmin;
    return a.bbox.ymin < b.bbox.ymin;
  });
  return out;
}

Selection select_candidate(const Model& model, const Tensor& image, const Nam& nam,
                           const Scope& scope, std::span<const Candidate> candidates,
                           double fill_value) {
  if (candidates.empty()) throw SelectionError("no candidates to select from");
  Selection sel;
  sel.scores.reserve(candidates.size());
  for (const Candidate& c : candidates) {
    sel.scores.push_back(nam_distance(nam, compute_rnam(model, image, c.pixels, fill_value), scope.pixels));
  }
  auto better = [&](std::size_t a, std::size_t b) {
    if (sel.scores[a] != sel.scores[b]) return sel.scores[a] > sel.scores[b];
    const Candidate& ca = candidates[a];
    const Candidate& cb = candidates[b];
    if (ca.area != cb.area) return ca.area > cb.area;
    if (ca.bbox.xmin != cb.bbox.xmin) return ca.bbox.xmin < cb.bbox.xmin;
    if (ca.bbox.ymin != cb.bbox.ymin) return ca.bbox.ymin < cb.bbox.ymin;
    return ca.pixels.pixels() < cb.pixels.pixels();
  };
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (better(i, sel.index)) sel.index = i;
  }
  return sel;
}

// ---- slice pipeline ----------------------------------------------------------------

std::vector<PixelSet> SliceResult::masks(bool coarse) const {
  std::vector<PixelSet> out;
  for (const NoduleResult& r : nodules) {
    const PixelSet& m = coarse ? r.coarse_mask : r.fine_mask;
    if (!m.empty()) out.push_back(m);
  }
  return out;
}

namespace {

// C_multi: the highest multi-GAP blob whose peak lies in C1, clipped to C1.
Scope refine_scope(const Scope& c1, const std::vector<Scope>& multi_scopes) {
  for (const Scope& s : multi_scopes) {
    if (!c1.pixels.contains(s.peak)) continue;
    PixelSet clipped = component_containing(set_intersection(s.pixels, c1.pixels), s.peak);
    if (clipped.empty()) continue;
    return {std::move(clipped), ScopeOrigin::multi_gap_cmulti, s.peak, s.peak_value};
  }
  return c1;
}

}  // namespace

SliceResult segment_slice(const Model& one_gap, const Model* multi_gap, const Tensor& image,
                          const SegmentConfig& cfg) {
  if (cfg.max_nodules < 1 || cfg.max_nodules > 2) throw ConfigError("max_nodules must be 1 or 2");
  SliceResult result;
  const ForwardResult f = forward(one_gap, image);
  result.classification = classify_logits(f.logits);
  if (result.classification.label != Label::nodule) return result;

  const std::size_t h = image.dim(1), w = image.dim(2);
  try {
    if (!one_gap.all_finite()) throw NumericError("one-GAP model has non-finite weights");
    result.nam = nam_from_activations(one_gap.fc_weight(), f.tap_activations, h, w);
    const std::vector<Scope> c1s = extract_top_scopes(*result.nam, cfg.max_nodules, cfg.scope);
    std::vector<Scope> multi_scopes;
    if (multi_gap) {
      result.multi_nam = compute_nam(*multi_gap, image);
      try {
        multi_scopes = extract_top_scopes(*result.multi_nam, std::numeric_limits<std::size_t>::max(),
                                          cfg.scope);
      } catch (const DegenerateMapError&) {
        // No blob in the multi-GAP map: screening stays on C1.
      }
    }

    PixelSet taken;
    for (const Scope& c1 : c1s) {
      NoduleResult r;
      r.scope_c1 = c1;
      r.scope = refine_scope(c1, multi_scopes);
      r.phases = icm_segment(image, r.scope, cfg.icm);
      r.candidates = extract_candidates(r.phases, r.scope, cfg.min_area);
      if (r.candidates.empty()) continue;
      for (const Candidate& c : r.candidates) r.coarse_mask = set_union(r.coarse_mask, c.pixels);
      if (!cfg.coarse_only) {
        r.selection = select_candidate(one_gap, image, *result.nam, c1, r.candidates, cfg.fill_value);
        r.fine_mask = r.candidates[r.selection->index].pixels;
      }
      const PixelSet& out = cfg.coarse_only ? r.coarse_mask : r.fine_mask;
      if (intersection_size(out, taken) > 0) continue;
      taken = set_union(taken, out);
      result.nodules.push_back(std::move(r));
    }
    if (result.nodules.empty()) {
      result.outcome = Outcome::detection_failed;
      result.failure = "no candidate inside the scope";
      return result;
    }
    result.outcome = Outcome::detected;
  } catch (const DegenerateMapError& e) {
    result.outcome = Outcome::detection_failed;
    result.failure = e.what();
    result.nodules.clear();
  } catch (const SelectionError& e) {
    result.outcome = Outcome::detection_failed;
    result.failure = e.what();
    result.nodules.clear();
  }
  return result;
}

}  // namespace namseg
