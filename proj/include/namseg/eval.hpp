#pragma once

#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "namseg/model.hpp"
#include "namseg/pixels.hpp"

namespace namseg {

// 2|a∩b| / (|a|+|b|); 1 for two empty sets.
double dice(const PixelSet& a, const PixelSet& b);

// A prediction detects a truth nodule when the masks overlap and the
// prediction's centroid lies in the truth bbox grown by centroid_margin.
struct DetectionRule {
  int centroid_margin = 2;
};
bool is_detection(const PixelSet& pred, const PixelSet& truth, const DetectionRule& rule = {});

struct SliceRecord {
  std::size_t id = 0;
  Label label = Label::no_nodule;
  std::vector<PixelSet> truth;
  std::vector<PixelSet> pred;
};

// Per-slice matching: each truth nodule takes the first unused prediction
// that detects it.
struct SliceOutcome {
  std::size_t id = 0;
  Label label = Label::no_nodule;
  std::size_t truths = 0;
  std::size_t predictions = 0;
  std::size_t matched = 0;
  std::size_t unmatched_predictions = 0;
  double slice_dice = 0.0;  // union of predictions vs union of truth (positives)
  struct Match {
    double dice;
    std::size_t pred_area;
    std::size_t truth_area;
  };
  std::vector<Match> matches;
};

// Throws DataError for duplicate ids, negatives carrying truth or positives
// without it.
std::vector<SliceOutcome> detection_outcomes(std::span<const SliceRecord> records,
                                             const DetectionRule& rule = {});

struct Stats {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;  // sample SD; 0 when n < 2
};
Stats summarize(std::span<const double> values);

struct MetricsReport {
  std::size_t n_slices = 0;
  std::size_t n_positive = 0;
  std::size_t n_negative = 0;
  std::size_t n_two_nodule = 0;
  double tpr = 0.0;         // positive slices with at least one nodule detected
  double fpr = 0.0;         // negative slices with any prediction
  double fpr_nodule = 0.0;  // positive slices with a prediction that detects nothing
  Stats dice;               // all positive slices, missed ones at 0
  Stats tp_dice;            // per detected nodule
  Stats tp_doa;             // per detected nodule, |area difference| * px_to_mm2
  std::size_t two_both = 0;
  std::size_t two_one = 0;
};

struct SizeBin {
  double lo = 0.0;
  double hi = std::numeric_limits<double>::infinity();
  std::size_t nodules = 0;  // truth nodules in the bin
  Stats tp_dice;
  Stats tp_doa;
};

struct EvalConfig {
  double px_to_mm2 = 1.0;
  DetectionRule rule;
  // Bin edges on the truth equivalent diameter, 2*sqrt(area*px_to_mm2/pi).
  std::vector<double> bin_edges{0.0, 8.0, 12.0, 16.0, std::numeric_limits<double>::infinity()};
};

struct EvalResult {
  MetricsReport metrics;
  std::vector<SizeBin> bins;
};

// Throws DataError for empty input.
EvalResult report(std::span<const SliceRecord> records, const EvalConfig& cfg = {});

double equivalent_diameter(std::size_t area, double px_to_mm2);

// CSV emission. Means and SDs of empty groups are left blank.
std::string metrics_csv_header();
std::string metrics_csv_row(const std::string& config, const MetricsReport& m);
std::string size_bins_csv_header();
std::string size_bins_csv_rows(const std::string& config, const std::vector<SizeBin>& bins);

}  // namespace namseg
