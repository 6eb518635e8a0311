#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "namseg/errors.hpp"
#include "namseg/segment.hpp"
#include "support.hpp"

using namespace namseg;

namespace {

Nam bumps(std::size_t h, std::size_t w, std::vector<std::array<double, 4>> peaks) {
  Nam nam;
  nam.map = Tensor({h, w}, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (const auto& [cx, cy, height, sigma] : peaks) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        nam.map.at(y, x) += height * std::exp(-d2 / (2 * sigma * sigma));
      }
  return nam;
}

Pixel argmax(const Nam& nam) {
  Pixel best{0, 0};
  for (int y = 0; y < static_cast<int>(nam.height()); ++y)
    for (int x = 0; x < static_cast<int>(nam.width()); ++x)
      if (nam.at(x, y) > nam.at(best.x, best.y)) best = {x, y};
  return best;
}

std::vector<int> nearest_labels(std::span<const double> values, std::span<const double> means) {
  std::vector<int> out;
  for (double v : values) {
    int best = 0;
    for (std::size_t k = 1; k < means.size(); ++k)
      if (std::abs(v - means[k]) < std::abs(v - means[static_cast<std::size_t>(best)])) best = static_cast<int>(k);
    out.push_back(best);
  }
  return out;
}

// Exhaustive minimum of the energy over all 2-phase labelings, each with its
// optimal (phase mean) intensities.
double brute_force_two_phase(std::span<const double> values, int w, int h, double beta) {
  const std::size_t n = values.size();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t bits = 0; bits < (std::size_t{1} << n); ++bits) {
    std::vector<int> labels(n);
    double sum[2] = {0, 0}, count[2] = {0, 0};
    for (std::size_t i = 0; i < n; ++i) {
      labels[i] = static_cast<int>((bits >> i) & 1);
      sum[labels[i]] += values[i];
      count[labels[i]] += 1;
    }
    const std::vector<double> means{count[0] ? sum[0] / count[0] : 0.0, count[1] ? sum[1] / count[1] : 0.0};
    best = std::min(best, icm_energy(values, w, h, labels, means, beta));
  }
  return best;
}

PhaseLabels label_map(int w, int h, const std::vector<PixelSet>& bright) {
  PhaseLabels p;
  p.window = {0, 0, w, h};
  p.labels.assign(static_cast<std::size_t>(w * h), 0);
  p.means = {0.1, 0.8, 0.4};
  for (const PixelSet& s : bright)
    for (const Pixel& q : s) p.labels[static_cast<std::size_t>(q.y * w + q.x)] = 1;
  return p;
}

PixelSet rect(int x0, int y0, int x1, int y1) {
  std::vector<Pixel> px;
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) px.push_back({x, y});
  return PixelSet(std::move(px));
}

Scope scope_of(PixelSet pixels) {
  Scope s;
  s.peak = *pixels.begin();
  s.pixels = std::move(pixels);
  return s;
}

ModelConfig small() {
  ModelConfig c;
  c.input_height = 16;
  c.input_width = 16;
  c.stage_channels = {4, 8};
  c.gap_taps = {1};
  c.head_channels = 4;
  return c;
}

Model zero_model() {
  Model m = Model::build(small(), 1);
  for (Parameter& p : m.parameters()) p.value.fill(0.0);
  return m;
}

}  // namespace

TEST_CASE("scope of a single bump contains the peak") {
  const Nam nam = bumps(32, 32, {{15, 17, 4.0, 3.0}});
  const Scope s = extract_scope(nam);
  CHECK(s.pixels.contains({15, 17}));
  CHECK(s.peak == Pixel{15, 17});
  CHECK(s.pixels.is_4_connected());
  CHECK(s.origin == ScopeOrigin::one_gap_c1);
  for (const Pixel& p : s.pixels) CHECK(nam.at(p.x, p.y) >= 0.4 * 4.0 - 1e-3);
}

TEST_CASE("scope stays in the higher of two bumps") {
  const Nam nam = bumps(32, 48, {{12, 16, 5.0, 3.0}, {36, 16, 3.0, 3.0}});
  const Scope s = extract_scope(nam);
  CHECK(s.pixels.contains(argmax(nam)));
  for (const Pixel& p : s.pixels) CHECK(p.x < 24);

  const std::vector<Scope> two = extract_top_scopes(nam, 2);
  REQUIRE(two.size() == 2);
  CHECK(two[0].pixels.contains(argmax(nam)));
  CHECK(intersection_size(two[0].pixels, two[1].pixels) == 0);
  CHECK(two[1].pixels.contains({36, 16}));
  CHECK(two[0].pixels == s.pixels);
  CHECK(extract_top_scopes(nam, 1).front().pixels == s.pixels);
}

TEST_CASE("a single bump yields a single scope") {
  const Nam nam = bumps(24, 24, {{10, 10, 2.0, 2.5}});
  CHECK(extract_top_scopes(nam, 2).size() == 1);
}

TEST_CASE("weak side maxima merge into the main basin") {
  // A shoulder on the main bump: its dynamic is far below 10% of the range.
  const Nam nam = bumps(32, 32, {{12, 16, 5.0, 3.0}, {19, 16, 0.3, 1.0}});
  const std::vector<Basin> basins = watershed_basins(nam.map, 0.1);
  std::size_t total = 0;
  for (const Basin& b : basins) total += b.pixels.size();
  CHECK(total == 32 * 32);
  CHECK(basins.front().pixels.contains({19, 16}));
  CHECK(extract_top_scopes(nam, 2).size() == 1);
}

TEST_CASE("degenerate maps and bad arguments") {
  Nam flat;
  flat.map = Tensor({8, 8}, 0.7);
  CHECK_THROWS_AS(extract_scope(flat), DegenerateMapError);
  CHECK_THROWS_AS(extract_top_scopes(flat, 2), DegenerateMapError);
  const Nam nam = bumps(8, 8, {{3, 3, 1.0, 1.0}});
  CHECK_THROWS_AS(extract_top_scopes(nam, 0), DomainError);
  Nam bad = nam;
  bad.map[5] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(extract_scope(bad), NumericError);
}

TEST_CASE("quantile initialisation") {
  const std::vector<double> v{8, 0, 7, 1, 6, 2, 5, 3, 4};
  CHECK(icm_initial_means(v, 4) == std::vector<double>{1, 3, 5, 7});
  // Mostly-constant window: tied quantiles fall back to evenly spread levels.
  const std::vector<double> flat{0, 0, 0, 0, 0, 0, 0, 8};
  CHECK(icm_initial_means(flat, 2) == std::vector<double>{2, 6});
}

TEST_CASE("icm with beta 0 is the nearest-mean labelling") {
  Rng rng(12);
  IcmConfig cfg;
  cfg.beta = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int w = 2 + static_cast<int>(rng.below(12)), h = 2 + static_cast<int>(rng.below(12));
    std::vector<double> v(static_cast<std::size_t>(w * h));
    for (double& x : v) x = rng.uniform();
    const PhaseLabels r = icm_segment_values(v, w, h, cfg);
    CHECK(r.labels == nearest_labels(v, r.means));
    const std::vector<int> first = nearest_labels(v, r.initial_means);
    CHECK(r.energies.front() == icm_energy(v, w, h, first, r.initial_means, 0.0));
  }
}

TEST_CASE("icm energy never increases") {
  Rng rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = 2 + static_cast<int>(rng.below(20)), h = 2 + static_cast<int>(rng.below(20));
    std::vector<double> v(static_cast<std::size_t>(w * h));
    for (double& x : v) x = rng.uniform();
    IcmConfig cfg;
    cfg.phases = 2 + static_cast<int>(rng.below(4));
    cfg.beta = rng.uniform(0, 0.3);
    const PhaseLabels r = icm_segment_values(v, w, h, cfg);
    for (std::size_t s = 1; s < r.energies.size(); ++s) CHECK(r.energies[s] <= r.energies[s - 1]);
    CHECK(r.energies.back() ==
          doctest::Approx(icm_energy(v, w, h, r.labels, r.means, r.beta)).epsilon(1e-12));
  }
}

TEST_CASE("icm reaches the exact partition of a two-intensity window") {
  Rng rng(14);
  IcmConfig cfg;
  cfg.phases = 2;
  cfg.beta = 1.0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(9);
    std::size_t bright = 0;
    for (double& x : v) {
      x = rng.bernoulli(0.5) ? 200.0 : 10.0;
      bright += x == 200.0;
    }
    if (bright == 0 || bright == 9) continue;
    const PhaseLabels r = icm_segment_values(v, 3, 3, cfg);
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK((v[i] == 200.0) == (r.labels[i] == r.brightest_phase()));
    }
    CHECK(r.energies.back() == doctest::Approx(brute_force_two_phase(v, 3, 3, 1.0)));
  }
}

TEST_CASE("icm never beats the exhaustive optimum on 3x3 windows") {
  Rng rng(15);
  IcmConfig cfg;
  cfg.phases = 2;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> v(9);
    for (double& x : v) x = rng.uniform();
    cfg.beta = rng.uniform(0, 0.1);
    const PhaseLabels r = icm_segment_values(v, 3, 3, cfg);
    CHECK(r.energies.back() >= brute_force_two_phase(v, 3, 3, *cfg.beta) - 1e-12);
  }
}

TEST_CASE("icm configuration and geometry errors") {
  const std::vector<double> v(5, 1.0);
  CHECK_THROWS_AS(icm_segment_values(v, 5, 1, IcmConfig{}), GeometryError);
  IcmConfig bad;
  bad.phases = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.beta = -1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = {};
  bad.max_iters = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("icm window is the dilated scope box clipped to the image") {
  const Scope s = scope_of(rect(2, 10, 5, 12));
  const Window w = icm_window(s, 20, 16, 8);
  CHECK(w.x0 == 0);
  CHECK(w.y0 == 2);
  CHECK(w.width == 14);
  CHECK(w.height == 14);
}

TEST_CASE("candidates are bright components touching the scope") {
  const PixelSet blob = rect(2, 2, 4, 4);
  const PhaseLabels one = label_map(12, 12, {blob});
  const std::vector<Candidate> c = extract_candidates(one, scope_of(rect(3, 3, 6, 6)));
  REQUIRE(c.size() == 1);
  CHECK(c[0].pixels == blob);
  CHECK(c[0].area == 9);
  CHECK(c[0].bbox == BBox{2, 2, 4, 4});

  CHECK(extract_candidates(one, scope_of(rect(8, 8, 10, 10))).empty());

  const PixelSet small_blob = rect(8, 2, 9, 4);
  const PhaseLabels two = label_map(12, 12, {small_blob, blob});
  const std::vector<Candidate> both = extract_candidates(two, scope_of(rect(0, 3, 11, 3)));
  REQUIRE(both.size() == 2);
  CHECK(both[0].pixels == blob);
  CHECK(both[1].pixels == small_blob);

  const PhaseLabels speck = label_map(12, 12, {blob, rect(8, 8, 8, 9)});
  CHECK(extract_candidates(speck, scope_of(rect(0, 0, 11, 11))).size() == 1);
}

TEST_CASE("candidate selection") {
  const Model m = zero_model();
  const Tensor img({1, 16, 16}, 0.3);
  const Nam nam = compute_nam(m, img);
  const Scope scope = scope_of(rect(0, 0, 15, 15));
  const std::vector<Candidate> none;
  CHECK_THROWS_AS(select_candidate(m, img, nam, scope, none, 0.2), SelectionError);

  const std::vector<Candidate> single{Candidate::from_pixels(rect(1, 1, 2, 2))};
  CHECK(select_candidate(m, img, nam, scope, single, 0.2).index == 0);

  // A zero-weight model scores every candidate 0: the larger area wins,
  // whatever the list order.
  std::vector<Candidate> cands{Candidate::from_pixels(rect(1, 1, 2, 2)),
                               Candidate::from_pixels(rect(8, 8, 10, 10))};
  const Selection a = select_candidate(m, img, nam, scope, cands, 0.2);
  CHECK(a.scores == std::vector<double>{0.0, 0.0});
  CHECK(a.index == 1);
  std::reverse(cands.begin(), cands.end());
  CHECK(select_candidate(m, img, nam, scope, cands, 0.2).index == 0);
}

TEST_CASE("negative classification stops the pipeline") {
  const Model m = zero_model();  // equal logits: ties go negative
  const SliceResult r = segment_slice(m, nullptr, Tensor({1, 16, 16}, 0.3), SegmentConfig{});
  CHECK(r.outcome == Outcome::no_nodule);
  CHECK(r.nodules.empty());
  CHECK(r.masks(false).empty());
  CHECK_FALSE(r.nam.has_value());
}

TEST_CASE("a flat activation map is a detection failure, not a negative") {
  Model m = zero_model();
  m.fc_bias()[1] = 1.0;  // positive, but the NAM is identically zero
  const SliceResult r = segment_slice(m, nullptr, Tensor({1, 16, 16}, 0.3), SegmentConfig{});
  CHECK(r.classification.label == Label::nodule);
  CHECK(r.outcome == Outcome::detection_failed);
  CHECK(r.masks(false).empty());
  CHECK_FALSE(r.failure.empty());
}
