#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "namseg/data.hpp"
#include "namseg/errors.hpp"
#include "namseg/pgm.hpp"
#include "support.hpp"

using namespace namseg;

namespace {

SyntheticConfig small_cfg(std::uint64_t seed) {
  SyntheticConfig c;
  c.image_height = 32;
  c.image_width = 32;
  c.nodule_radius_max = 5.0;
  c.seed = seed;
  return c;
}

double mean_over(const Tensor& img, const PixelSet& s, bool inside) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < static_cast<int>(img.dim(1)); ++y)
    for (int x = 0; x < static_cast<int>(img.dim(2)); ++x)
      if (s.contains({x, y}) == inside) {
        sum += img.at(0, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
        ++n;
      }
  return sum / static_cast<double>(n);
}

}  // namespace

TEST_CASE("generation is deterministic and labelled as requested") {
  const std::vector<Sample> a = generate(small_cfg(3), 6, 4);
  const std::vector<Sample> b = generate(small_cfg(3), 6, 4);
  REQUIRE(a.size() == 10);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == i);
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].truth_masks == b[i].truth_masks);
    CHECK((a[i].label == Label::nodule) == (i < 6));
    CHECK((a[i].label == Label::nodule) == !a[i].truth_masks.empty());
  }
  CHECK_FALSE(generate(small_cfg(4), 6, 4)[0].image == a[0].image);
}

TEST_CASE("nodules are brighter than their surroundings") {
  for (const Sample& s : generate(small_cfg(5), 10, 0)) {
    REQUIRE(!s.truth_masks.empty());
    const PixelSet& m = s.truth_masks.front();
    CHECK(m.is_4_connected());
    CHECK(mean_over(s.image, m, true) > mean_over(s.image, m, false) + 0.1);
  }
}

TEST_CASE("pixels are quantised to 16 bits") {
  const Sample s = generate(small_cfg(6), 1, 0).front();
  for (double v : s.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(std::abs(v * 65535.0 - std::round(v * 65535.0)) < 1e-9);
  }
}

TEST_CASE("two-nodule scenes keep their nodules apart") {
  SyntheticConfig big;
  big.seed = 7;
  for (std::uint64_t i = 0; i < 50; ++i) {
    Rng rng = Rng::stream(7, i);
    const Scene s = random_scene_with_nodules(big, rng, 2, false);
    REQUIRE(s.nodules.size() == 2);
    const NoduleSpec &p = s.nodules[0], &q = s.nodules[1];
    CHECK(std::hypot(p.cx - q.cx, p.cy - q.cy) >= p.radius + q.radius + big.nodule_gap - 1e-9);
  }
}

TEST_CASE("nearby decoys sit at the requested gap") {
  SyntheticConfig cfg;
  int placed = 0;
  for (std::uint64_t i = 0; i < 50; ++i) {
    Rng rng = Rng::stream(9, i);
    Scene s = random_scene_with_nodules(cfg, rng, 1, false);
    if (!add_nearby_decoy(cfg, rng, s, 3.0, 6.0)) continue;
    ++placed;
    const NoduleSpec& n = s.nodules.front();
    const DecoySpec& d = s.decoys.back();
    const double centre = std::hypot(n.cx - d.cx, n.cy - d.cy);
    if (d.kind == DecoyKind::ring) {
      CHECK(centre - d.size - n.radius >= 3.0 - 1e-9);
      CHECK(centre - d.size - n.radius <= 6.0 + 1e-9);
    } else {
      CHECK(centre - n.radius >= 3.0 - 1e-9);
      CHECK(centre - n.radius <= 6.0 + 1e-9);
    }
  }
  CHECK(placed > 25);
}

TEST_CASE("adjacent decoys in positive slices") {
  SyntheticConfig cfg;
  cfg.decoy_rate = 1.0;
  cfg.adjacent_decoy_rate = 1.0;
  cfg.two_nodule_rate = 0.0;
  int near = 0;
  for (std::uint64_t i = 0; i < 40; ++i) {
    Rng rng = Rng::stream(21, i);
    const Scene s = random_scene(cfg, rng, Label::nodule);
    REQUIRE(s.decoys.size() == 1);
    const NoduleSpec& n = s.nodules.front();
    const DecoySpec& d = s.decoys.front();
    const double rim = std::hypot(n.cx - d.cx, n.cy - d.cy) - n.radius -
                       (d.kind == DecoyKind::ring ? d.size : 0.0);
    near += rim >= 3.0 - 1e-9 && rim <= 8.0 + 1e-9;
  }
  CHECK(near > 30);
  Rng rng(3);
  CHECK(random_scene(cfg, rng, Label::no_nodule).nodules.empty());
}

TEST_CASE("configuration validation") {
  SyntheticConfig c;
  c.nodule_radius_max = 40;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.decoy_rate = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.adjacent_decoy_rate = -0.1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.nodule_contrast_min = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  std::map<std::string, std::string> kv;
  for (const std::string& line : std::vector<std::string>{"noise_sigma=0.1", "seed=9"}) {
    kv[line.substr(0, line.find('='))] = line.substr(line.find('=') + 1);
  }
  const SyntheticConfig parsed = SyntheticConfig::from_map(kv);
  CHECK(parsed.noise_sigma == 0.1);
  CHECK(parsed.seed == 9);
}

TEST_CASE("stratified split is 4:1:1 per class and disjoint") {
  std::vector<Label> labels(2000, Label::nodule);
  labels.resize(4000, Label::no_nodule);
  const DataSplit s = split_stratified(labels, 42);
  CHECK(s.val.size() == 666);
  CHECK(s.test.size() == 666);
  CHECK(s.train.size() == 2668);
  std::set<std::size_t> all;
  for (const auto* part : {&s.train, &s.val, &s.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 4000);
  std::size_t pos_test = 0;
  for (std::size_t id : s.test) pos_test += labels[id] == Label::nodule;
  CHECK(pos_test == 333);
  const DataSplit again = split_stratified(labels, 42);
  CHECK(again.test == s.test);

  std::vector<Label> few{Label::nodule, Label::nodule, Label::no_nodule, Label::no_nodule,
                         Label::no_nodule, Label::no_nodule};
  CHECK_THROWS_AS(split_stratified(few, 1), DataError);
}

TEST_CASE("mask files round-trip") {
  const std::vector<PixelSet> masks{PixelSet({{1, 1}, {2, 1}, {3, 1}, {2, 2}}), PixelSet({{7, 0}}),
                                    PixelSet{}};
  int w = 0, h = 0;
  CHECK(parse_masks(encode_masks(masks, 8, 4), &w, &h) == masks);
  CHECK(w == 8);
  CHECK(h == 4);
  CHECK_THROWS_AS(parse_masks("NAMSEG-MASKS 2\n"), FormatError);
  CHECK_THROWS_AS(parse_masks("NAMSEG-MASKS 1\nsize 4 4\nmasks 1\nmask 0 1\n0 3 5\n"), FormatError);
}

TEST_CASE("pgm round-trip stays within one grey level") {
  Rng rng(1);
  const Tensor img = testing::random_tensor({1, 5, 7}, rng, 0.0, 1.0);
  for (PgmEncoding enc : {PgmEncoding::ascii, PgmEncoding::binary}) {
    const Tensor back = parse_pgm(encode_pgm(img, enc));
    REQUIRE(back.shape() == img.shape());
    CHECK(testing::max_abs_diff(back, img) <= 0.5 / 65535.0 + 1e-12);
    CHECK(parse_pgm(encode_pgm(back, enc)) == back);
  }
}

TEST_CASE("pgm parsing") {
  const Tensor t = parse_pgm("P2\n# comment\n3 1\n255\n0 51 255\n");
  CHECK(t.shape() == Shape{1, 1, 3});
  CHECK(t[1] == doctest::Approx(0.2));
  CHECK(t[2] == 1.0);
  const std::string p5 = std::string("P5 2 1 255\n") + '\x00' + '\xff';
  CHECK(parse_pgm(p5)[1] == 1.0);
  CHECK_THROWS_AS(parse_pgm("P2\n2 1\n0\n0 0\n"), FormatError);
  CHECK_THROWS_AS(parse_pgm("P2\n2 2\n255\n0 0 0\n"), FormatError);
  CHECK_THROWS_AS(parse_pgm("P6\n1 1\n255\n\0\0\0"), FormatError);
  CHECK_THROWS_AS(parse_pgm(std::string("P5 2 1 65535\n") + '\x01'), FormatError);
}

TEST_CASE("dataset directories round-trip") {
  testing::TempDir dir("dataset");
  const SyntheticConfig cfg = small_cfg(11);
  const std::vector<Sample> samples = generate(cfg, 6, 6);
  std::vector<Label> labels;
  for (const Sample& s : samples) labels.push_back(s.label);
  const DataSplit split = split_stratified(labels, 11);
  write_dataset(dir.path(), cfg, samples, split);

  const DatasetIndex index = read_dataset_index(dir.path());
  CHECK(index.ids.size() == 12);
  CHECK(index.manifest.at("split_ratio") == "4:1:1");
  CHECK(SyntheticConfig::from_map(index.manifest) == cfg);
  CHECK(index.ids_in("test") == split.test);
  CHECK(index.ids_in("train").size() == split.train.size());
  CHECK(index.background_level() == cfg.background_level);
  for (const Sample& s : samples) {
    CHECK(index.labels.at(s.id) == s.label);
    CHECK(read_image(index, s.id) == s.image);
    CHECK(read_truth(index, s.id) == s.truth_masks);
  }
  CHECK(read_labeled(index, "val").size() == split.val.size());
  CHECK_THROWS_AS(read_dataset_index(dir / "nope"), DataError);
}
