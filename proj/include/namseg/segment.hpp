#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "namseg/model.hpp"
#include "namseg/nam.hpp"
#include "namseg/pixels.hpp"
#include "namseg/tensor.hpp"

namespace namseg {

// ---- scopes ------------------------------------------------------------------

enum class ScopeOrigin { one_gap_c1, multi_gap_cmulti };
const char* scope_origin_name(ScopeOrigin origin);

// 4-connected region around an activation blob that bounds candidate search.
struct Scope {
  PixelSet pixels;
  ScopeOrigin origin = ScopeOrigin::one_gap_c1;
  Pixel peak;               // location of the blob maximum
  double peak_value = 0.0;
};

struct ScopeConfig {
  // Pixels are kept when map >= floor + tau * (peak - floor), floor being the
  // map median (the resting activation level).
  double tau = 0.4;
  // Maxima whose dynamic (peak minus the highest saddle towards a higher
  // peak) is at most this fraction of the map range are merged into the
  // neighbouring basin before basins are ranked.
  double min_dynamic = 0.1;

  void validate() const;
};

// Catchment basin of a flooding watershed on the negated map.
struct Basin {
  PixelSet pixels;
  Pixel peak;
  double peak_value = 0.0;
};

// Basins of `map` ([H,W]) ranked by decreasing peak value. Every pixel
// belongs to exactly one basin.
std::vector<Basin> watershed_basins(const Tensor& map, double min_dynamic);

// Basin of the global maximum, thresholded and reduced to the connected part
// around the peak. Throws DegenerateMapError for a constant map.
Scope extract_scope(const Nam& nam, const ScopeConfig& cfg = {});

// Up to n prominent basins (peak above the map median) ranked by peak value,
// each thresholded relative to its own peak. The first equals extract_scope.
std::vector<Scope> extract_top_scopes(const Nam& nam, std::size_t n, const ScopeConfig& cfg = {});

// ---- ICM multi-phase segmentation --------------------------------------------

struct IcmConfig {
  int phases = 4;
  // Smoothness weight; when unset it is derived per window as
  // min(beta_scale * range^2, beta_cap), range being the window's intensity range.
  std::optional<double> beta;
  double beta_scale = 0.25;
  double beta_cap = 0.05;
  int max_iters = 30;
  int window_margin = 8;

  void validate() const;
};

// Placement of the ICM window in image coordinates.
struct Window {
  int x0 = 0;
  int y0 = 0;
  int width = 0;
  int height = 0;

  bool contains(int x, int y) const {
    return x >= x0 && y >= y0 && x < x0 + width && y < y0 + height;
  }
};

struct PhaseLabels {
  Window window;
  std::vector<int> labels;            // row-major over the window
  std::vector<double> means;          // final phase means
  std::vector<double> initial_means;  // quantile initialisation
  std::vector<double> energies;       // energy after initialisation and after every sweep
  double beta = 0.0;
  int sweeps = 0;

  int label_at(int x, int y) const {
    return labels[static_cast<std::size_t>((y - window.y0) * window.width + (x - window.x0))];
  }
  // Phase with the largest mean (highest index on ties).
  int brightest_phase() const;
};

// E(L) = sum_p (I(p) - mu_L(p))^2 + beta * #{4-neighbour pairs with L(p) != L(q)}.
double icm_energy(std::span<const double> values, int width, int height,
                  std::span<const int> labels, std::span<const double> means, double beta);

// Initial phase means at the (2k+1)/(2P) quantiles; if two coincide the
// levels are spread evenly over [min,max] instead.
std::vector<double> icm_initial_means(std::span<const double> values, int phases);

// ICM on a raw window of intensities. Labels start at the nearest initial
// mean; each iteration re-estimates phase means then sweeps in raster order.
// Stops when a sweep changes nothing or max_iters is reached. The recorded
// energy never increases. Throws GeometryError for windows under 2x2.
PhaseLabels icm_segment_values(std::span<const double> values, int width, int height,
                               const IcmConfig& cfg, Window placement = {});

// The scope's bounding box dilated by window_margin, clipped to the image.
Window icm_window(const Scope& scope, int image_width, int image_height, int margin);

PhaseLabels icm_segment(const Tensor& image, const Scope& scope, const IcmConfig& cfg);

// ---- candidates ----------------------------------------------------------------

struct Candidate {
  PixelSet pixels;
  std::size_t area = 0;
  BBox bbox;

  static Candidate from_pixels(PixelSet pixels);
};

// 4-connected components of the brightest phase that touch the scope, at
// least min_area pixels, largest first (ties: smaller xmin, then ymin).
std::vector<Candidate> extract_candidates(const PhaseLabels& labels, const Scope& scope,
                                          std::size_t min_area = 4);

struct Selection {
  std::size_t index = 0;
  std::vector<double> scores;  // per candidate, R-NAM distance over the scope
};

// Masks each candidate in turn, recomputes the NAM and scores the squared
// change over `scope`. The largest change wins; ties go to the larger area,
// then the smaller bbox xmin. Throws SelectionError for an empty list.
Selection select_candidate(const Model& model, const Tensor& image, const Nam& nam,
                           const Scope& scope, std::span<const Candidate> candidates,
                           double fill_value);

// ---- full slice pipeline ----------------------------------------------------------

struct SegmentConfig {
  ScopeConfig scope;
  IcmConfig icm;
  std::size_t min_area = 4;
  double fill_value = 0.2;  // background level used to mask candidates
  bool coarse_only = false;  // skip R-NAM selection
  std::size_t max_nodules = 1;  // 2 = top-two-blob mode
};

enum class Outcome { no_nodule, detected, detection_failed };
const char* outcome_name(Outcome outcome);

struct NoduleResult {
  Scope scope_c1;
  Scope scope;  // C: C1 or the multi-GAP refinement
  PhaseLabels phases;
  std::vector<Candidate> candidates;
  std::optional<Selection> selection;
  PixelSet coarse_mask;  // union of all candidates
  PixelSet fine_mask;    // selected candidate (empty when coarse_only)
};

struct SliceResult {
  Outcome outcome = Outcome::no_nodule;
  Classification classification;
  std::string failure;  // reason when detection failed
  std::optional<Nam> nam;
  std::optional<Nam> multi_nam;
  std::vector<NoduleResult> nodules;

  // Per-nodule output masks; coarse masks when coarse_only.
  std::vector<PixelSet> masks(bool coarse) const;
};

// Classifies with the one-GAP model and, for positives, localises and
// segments. The multi-GAP model only narrows the screening scope.
SliceResult segment_slice(const Model& one_gap, const Model* multi_gap, const Tensor& image,
                          const SegmentConfig& cfg);

}  // namespace namseg
