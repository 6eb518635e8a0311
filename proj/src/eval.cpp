#include "namseg/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>

#include "namseg/errors.hpp"
#include "namseg/text.hpp"

namespace namseg {

double dice(const PixelSet& a, const PixelSet& b) {
  if (a.empty() && b.empty()) return 1.0;
  return 2.0 * static_cast<double>(intersection_size(a, b)) / static_cast<double>(a.size() + b.size());
}

bool is_detection(const PixelSet& pred, const PixelSet& truth, const DetectionRule& rule) {
  if (pred.empty() || truth.empty() || intersection_size(pred, truth) == 0) return false;
  const auto [cx, cy] = *pred.centroid();
  return truth.bbox()->dilated(rule.centroid_margin).contains(cx, cy);
}

std::vector<SliceOutcome> detection_outcomes(std::span<const SliceRecord> records,
                                             const DetectionRule& rule) {
  std::set<std::size_t> seen;
  std::vector<SliceOutcome> out;
  out.reserve(records.size());
  for (const SliceRecord& r : records) {
    if (!seen.insert(r.id).second) throw DataError("duplicate slice id " + std::to_string(r.id));
    if (r.label == Label::no_nodule && !r.truth.empty()) {
      throw DataError("negative slice " + std::to_string(r.id) + " carries truth masks");
    }
    if (r.label == Label::nodule && r.truth.empty()) {
      throw DataError("positive slice " + std::to_string(r.id) + " has no truth mask");
    }
    SliceOutcome o;
    o.id = r.id;
    o.label = r.label;
    o.truths = r.truth.size();
    o.predictions = r.pred.size();
    std::vector<bool> used(r.pred.size(), false);
    for (const PixelSet& t : r.truth) {
      for (std::size_t j = 0; j < r.pred.size(); ++j) {
        if (used[j] || !is_detection(r.pred[j], t, rule)) continue;
        used[j] = true;
        o.matches.push_back({dice(r.pred[j], t), r.pred[j].size(), t.size()});
        break;
      }
    }
    o.matched = o.matches.size();
    o.unmatched_predictions = o.predictions - o.matched;
    if (r.label == Label::nodule) {
      PixelSet all_pred, all_truth;
      for (const PixelSet& p : r.pred) all_pred = set_union(all_pred, p);
      for (const PixelSet& t : r.truth) all_truth = set_union(all_truth, t);
      o.slice_dice = dice(all_pred, all_truth);
    }
    out.push_back(std::move(o));
  }
  return out;
}

Stats summarize(std::span<const double> values) {
  Stats s;
  s.n = values.size();
  if (s.n == 0) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  return s;
}

double equivalent_diameter(std::size_t area, double px_to_mm2) {
  return 2.0 * std::sqrt(static_cast<double>(area) * px_to_mm2 / std::numbers::pi);
}

EvalResult report(std::span<const SliceRecord> records, const EvalConfig& cfg) {
  if (records.empty()) throw DataError("no slices to evaluate");
  if (!(cfg.px_to_mm2 > 0.0)) throw ConfigError("px_to_mm2 must be positive");
  if (cfg.bin_edges.size() < 2 || !std::is_sorted(cfg.bin_edges.begin(), cfg.bin_edges.end()) ||
      std::adjacent_find(cfg.bin_edges.begin(), cfg.bin_edges.end()) != cfg.bin_edges.end()) {
    throw ConfigError("size bin edges must be strictly increasing, at least two");
  }
  const std::vector<SliceOutcome> outcomes = detection_outcomes(records, cfg.rule);

  EvalResult res;
  MetricsReport& m = res.metrics;
  const std::size_t nbins = cfg.bin_edges.size() - 1;
  std::vector<std::vector<double>> bin_dice(nbins), bin_doa(nbins);
  res.bins.resize(nbins);
  for (std::size_t b = 0; b < nbins; ++b) {
    res.bins[b].lo = cfg.bin_edges[b];
    res.bins[b].hi = cfg.bin_edges[b + 1];
  }
  auto bin_of = [&](std::size_t area) -> std::optional<std::size_t> {
    const double d = equivalent_diameter(area, cfg.px_to_mm2);
    for (std::size_t b = 0; b < nbins; ++b) {
      if (d >= cfg.bin_edges[b] && d < cfg.bin_edges[b + 1]) return b;
    }
    return std::nullopt;
  };

  std::size_t detected = 0, fp_neg = 0, fp_pos = 0;
  std::vector<double> slice_dice, tp_dice, tp_doa;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const SliceOutcome& o = outcomes[i];
    ++m.n_slices;
    if (o.label == Label::no_nodule) {
      ++m.n_negative;
      if (o.predictions > 0) ++fp_neg;
      continue;
    }
    ++m.n_positive;
    if (o.matched > 0) ++detected;
    if (o.unmatched_predictions > 0) ++fp_pos;
    slice_dice.push_back(o.slice_dice);
    if (o.truths == 2) {
      ++m.n_two_nodule;
      if (o.matched == 2) ++m.two_both;
      if (o.matched == 1) ++m.two_one;
    }
    for (const PixelSet& t : records[i].truth) {
      if (const auto b = bin_of(t.size())) ++res.bins[*b].nodules;
    }
    for (const SliceOutcome::Match& match : o.matches) {
      const double doa = std::abs(static_cast<double>(match.pred_area) -
                                  static_cast<double>(match.truth_area)) * cfg.px_to_mm2;
      tp_dice.push_back(match.dice);
      tp_doa.push_back(doa);
      if (const auto b = bin_of(match.truth_area)) {
        bin_dice[*b].push_back(match.dice);
        bin_doa[*b].push_back(doa);
      }
    }
  }
  auto rate = [](std::size_t k, std::size_t n) {
    return n ? static_cast<double>(k) / static_cast<double>(n) : 0.0;
  };
  m.tpr = rate(detected, m.n_positive);
  m.fpr = rate(fp_neg, m.n_negative);
  m.fpr_nodule = rate(fp_pos, m.n_positive);
  m.dice = summarize(slice_dice);
  m.tp_dice = summarize(tp_dice);
  m.tp_doa = summarize(tp_doa);
  for (std::size_t b = 0; b < nbins; ++b) {
    res.bins[b].tp_dice = summarize(bin_dice[b]);
    res.bins[b].tp_doa = summarize(bin_doa[b]);
  }
  return res;
}

namespace {

std::string num(double v) { return text::format_fixed(v, 6); }

std::string stats_fields(const Stats& s) {
  return s.n ? num(s.mean) + "," + num(s.sd) : std::string(",");
}

std::string edge(double v) { return std::isinf(v) ? std::string("inf") : text::format_double(v); }

}  // namespace

std::string metrics_csv_header() {
  return "config,n_slices,n_positive,n_negative,n_two_nodule,tpr,fpr,fpr_nodule,dice_mean,dice_sd,"
         "tp_dice_mean,tp_dice_sd,tp_doa_mean,tp_doa_sd,two_both,two_one\n";
}

std::string metrics_csv_row(const std::string& config, const MetricsReport& m) {
  std::ostringstream os;
  os << config << ',' << m.n_slices << ',' << m.n_positive << ',' << m.n_negative << ','
     << m.n_two_nodule << ',' << num(m.tpr) << ',' << num(m.fpr) << ',' << num(m.fpr_nodule) << ','
     << stats_fields(m.dice) << ',' << stats_fields(m.tp_dice) << ',' << stats_fields(m.tp_doa) << ','
     << m.two_both << ',' << m.two_one << '\n';
  return os.str();
}

std::string size_bins_csv_header() {
  return "config,bin_lo,bin_hi,n_nodules,n_detected,tp_dice_mean,tp_dice_sd,tp_doa_mean,tp_doa_sd\n";
}

std::string size_bins_csv_rows(const std::string& config, const std::vector<SizeBin>& bins) {
  std::ostringstream os;
  for (const SizeBin& b : bins) {
    os << config << ',' << edge(b.lo) << ',' << edge(b.hi) << ',' << b.nodules << ',' << b.tp_dice.n << ','
       << stats_fields(b.tp_dice) << ',' << stats_fields(b.tp_doa) << '\n';
  }
  return os.str();
}

}  // namespace namseg
