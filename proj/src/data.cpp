#include "namseg/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "namseg/errors.hpp"
#include "namseg/pgm.hpp"
#include "namseg/text.hpp"

namespace namseg {

namespace fs = std::filesystem;

// ---- configuration ---------------------------------------------------------

void SyntheticConfig::validate() const {
  auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (image_height < 8 || image_width < 8) throw ConfigError("image must be at least 8x8");
  if (!(nodule_radius_min >= 2.0)) throw ConfigError("nodule_radius_min must be >= 2");
  if (nodule_radius_max < nodule_radius_min) {
    throw ConfigError("nodule_radius_max must be >= nodule_radius_min");
  }
  const double span = static_cast<double>(std::min(image_height, image_width)) - 1.0;
  if (2.0 * (nodule_radius_max + 2.0) >= span) {
    throw ConfigError("nodule_radius_max " + text::format_double(nodule_radius_max) +
                      " is too large for a " + std::to_string(image_width) + "x" +
                      std::to_string(image_height) + " image");
  }
  if (!(nodule_contrast_min > 0.0) || nodule_contrast_max < nodule_contrast_min) {
    throw ConfigError("nodule contrast range must satisfy 0 < min <= max");
  }
  if (!in_unit(decoy_rate) || !in_unit(adjacent_decoy_rate) || !in_unit(two_nodule_rate)) {
    throw ConfigError("decoy_rate, adjacent_decoy_rate and two_nodule_rate must lie in [0,1]");
  }
  if (noise_sigma < 0.0 || lung_texture < 0.0 || !(edge_softness > 0.0) || nodule_gap < 0.0) {
    throw ConfigError("noise_sigma, lung_texture, nodule_gap must be >= 0 and edge_softness > 0");
  }
}

std::string SyntheticConfig::to_text() const {
  std::ostringstream os;
  auto d = [](double v) { return text::format_double(v); };
  os << "image_height=" << image_height << "\n"
     << "image_width=" << image_width << "\n"
     << "background_level=" << d(background_level) << "\n"
     << "noise_sigma=" << d(noise_sigma) << "\n"
     << "lung_texture=" << d(lung_texture) << "\n"
     << "nodule_radius_min=" << d(nodule_radius_min) << "\n"
     << "nodule_radius_max=" << d(nodule_radius_max) << "\n"
     << "nodule_contrast_min=" << d(nodule_contrast_min) << "\n"
     << "nodule_contrast_max=" << d(nodule_contrast_max) << "\n"
     << "edge_softness=" << d(edge_softness) << "\n"
     << "decoy_rate=" << d(decoy_rate) << "\n"
     << "adjacent_decoy_rate=" << d(adjacent_decoy_rate) << "\n"
     << "two_nodule_rate=" << d(two_nodule_rate) << "\n"
     << "nodule_gap=" << d(nodule_gap) << "\n"
     << "seed=" << seed << "\n";
  return os.str();
}

SyntheticConfig SyntheticConfig::from_map(const std::map<std::string, std::string>& values) {
  SyntheticConfig c;
  auto num = [&](const char* key, double& field) {
    if (auto it = values.find(key); it != values.end()) field = text::parse_double(it->second);
  };
  auto size = [&](const char* key, std::size_t& field) {
    if (auto it = values.find(key); it != values.end()) field = text::parse_u64(it->second);
  };
  size("image_height", c.image_height);
  size("image_width", c.image_width);
  num("background_level", c.background_level);
  num("noise_sigma", c.noise_sigma);
  num("lung_texture", c.lung_texture);
  num("nodule_radius_min", c.nodule_radius_min);
  num("nodule_radius_max", c.nodule_radius_max);
  num("nodule_contrast_min", c.nodule_contrast_min);
  num("nodule_contrast_max", c.nodule_contrast_max);
  num("edge_softness", c.edge_softness);
  num("decoy_rate", c.decoy_rate);
  num("adjacent_decoy_rate", c.adjacent_decoy_rate);
  num("two_nodule_rate", c.two_nodule_rate);
  num("nodule_gap", c.nodule_gap);
  if (auto it = values.find("seed"); it != values.end()) c.seed = text::parse_u64(it->second);
  return c;
}

// ---- scenes ----------------------------------------------------------------

namespace {

constexpr double kRingSigma = 0.8;
constexpr double kBarSigma = 0.9;
constexpr int kPlacementTries = 200;

double decoy_halo(const DecoySpec& d) {
  return d.kind == DecoyKind::ring ? 3.0 * kRingSigma : 3.0 * kBarSigma;
}

bool fits(const SyntheticConfig& cfg, double cx, double cy, double extent) {
  return cx - extent >= 1.0 && cy - extent >= 1.0 &&
         cx + extent <= static_cast<double>(cfg.image_width) - 2.0 &&
         cy + extent <= static_cast<double>(cfg.image_height) - 2.0;
}

NoduleSpec random_nodule(const SyntheticConfig& cfg, Rng& rng) {
  NoduleSpec n;
  n.radius = rng.uniform(cfg.nodule_radius_min, cfg.nodule_radius_max);
  n.contrast = rng.uniform(cfg.nodule_contrast_min, cfg.nodule_contrast_max);
  const double m = n.radius + 2.0;
  n.cx = rng.uniform(m, static_cast<double>(cfg.image_width) - 1.0 - m);
  n.cy = rng.uniform(m, static_cast<double>(cfg.image_height) - 1.0 - m);
  return n;
}

DecoySpec random_decoy_shape(const SyntheticConfig& cfg, Rng& rng) {
  DecoySpec d;
  d.kind = rng.bernoulli(0.5) ? DecoyKind::ring : DecoyKind::bar;
  d.size = d.kind == DecoyKind::ring ? rng.uniform(4.0, 7.0) : rng.uniform(6.0, 12.0);
  d.angle = rng.uniform(0.0, std::numbers::pi);
  d.contrast = rng.uniform(cfg.nodule_contrast_min, cfg.nodule_contrast_max);
  return d;
}

bool clear_of_nodules(const Scene& scene, const DecoySpec& d, double gap) {
  return std::all_of(scene.nodules.begin(), scene.nodules.end(), [&](const NoduleSpec& n) {
    return std::hypot(n.cx - d.cx, n.cy - d.cy) >= n.radius + d.extent() + gap;
  });
}

void add_random_decoy(const SyntheticConfig& cfg, Rng& rng, Scene& scene) {
  DecoySpec d = random_decoy_shape(cfg, rng);
  for (int t = 0; t < kPlacementTries; ++t) {
    d.cx = rng.uniform(0.0, static_cast<double>(cfg.image_width) - 1.0);
    d.cy = rng.uniform(0.0, static_cast<double>(cfg.image_height) - 1.0);
    if (fits(cfg, d.cx, d.cy, d.extent()) && clear_of_nodules(scene, d, 3.0)) {
      scene.decoys.push_back(d);
      return;
    }
  }
}

double segment_distance(double px, double py, const DecoySpec& bar) {
  const double ux = std::cos(bar.angle), uy = std::sin(bar.angle);
  const double t = std::clamp((px - bar.cx) * ux + (py - bar.cy) * uy, -bar.size, bar.size);
  return std::hypot(px - (bar.cx + t * ux), py - (bar.cy + t * uy));
}

}  // namespace

double DecoySpec::extent() const { return size + decoy_halo(*this); }

Scene random_scene_with_nodules(const SyntheticConfig& cfg, Rng& rng, std::size_t nodules,
                                bool decoy) {
  cfg.validate();
  Scene scene;
  if (nodules >= 1) scene.nodules.push_back(random_nodule(cfg, rng));
  for (std::size_t k = 1; k < nodules; ++k) {
    for (int t = 0; t < kPlacementTries; ++t) {
      const NoduleSpec n = random_nodule(cfg, rng);
      const bool apart = std::all_of(scene.nodules.begin(), scene.nodules.end(), [&](const NoduleSpec& o) {
        return std::hypot(n.cx - o.cx, n.cy - o.cy) >= n.radius + o.radius + cfg.nodule_gap;
      });
      if (apart) {
        scene.nodules.push_back(n);
        break;
      }
    }
  }
  if (decoy) add_random_decoy(cfg, rng, scene);
  return scene;
}

Scene random_scene(const SyntheticConfig& cfg, Rng& rng, Label label) {
  std::size_t nodules = 0;
  if (label == Label::nodule) nodules = rng.bernoulli(cfg.two_nodule_rate) ? 2 : 1;
  const bool decoy = rng.bernoulli(cfg.decoy_rate);
  if (decoy && nodules > 0 && rng.bernoulli(cfg.adjacent_decoy_rate)) {
    Scene scene = random_scene_with_nodules(cfg, rng, nodules, false);
    if (!add_nearby_decoy(cfg, rng, scene, 3.0, 8.0)) add_random_decoy(cfg, rng, scene);
    return scene;
  }
  return random_scene_with_nodules(cfg, rng, nodules, decoy);
}

bool add_nearby_decoy(const SyntheticConfig& cfg, Rng& rng, Scene& scene, double min_gap,
                      double max_gap) {
  if (scene.nodules.empty()) return false;
  const NoduleSpec& n = scene.nodules.front();
  DecoySpec d = random_decoy_shape(cfg, rng);
  for (int t = 0; t < kPlacementTries; ++t) {
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double gap = rng.uniform(min_gap, max_gap);
    // Rings sit with their rim `gap` from the nodule edge; bars run
    // tangentially with their midpoint `gap` from the edge.
    const double dist = d.kind == DecoyKind::ring ? n.radius + gap + d.size : n.radius + gap;
    d.cx = n.cx + dist * std::cos(theta);
    d.cy = n.cy + dist * std::sin(theta);
    if (d.kind == DecoyKind::bar) d.angle = theta + std::numbers::pi / 2.0;
    if (!fits(cfg, d.cx, d.cy, d.extent())) continue;
    bool clear = true;
    for (std::size_t i = 1; i < scene.nodules.size(); ++i) {
      const NoduleSpec& o = scene.nodules[i];
      clear = clear && std::hypot(o.cx - d.cx, o.cy - d.cy) >= o.radius + d.extent() + 3.0;
    }
    if (!clear) continue;
    scene.decoys.push_back(d);
    return true;
  }
  return false;
}

Sample render(const SyntheticConfig& cfg, const Scene& scene, Rng& rng) {
  cfg.validate();
  const std::size_t h = cfg.image_height, w = cfg.image_width;

  struct Wave {
    double fx, fy, phase, amp;
  };
  Wave waves[3];
  double amp_sum = 0.0;
  for (auto& wv : waves) {
    const double freq = rng.uniform(1.0 / 48.0, 1.0 / 20.0);
    const double dir = rng.uniform(0.0, std::numbers::pi);
    wv = {freq * std::cos(dir), freq * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi),
          rng.uniform(0.5, 1.0)};
    amp_sum += wv.amp;
  }

  Sample s;
  s.image = Tensor({1, h, w});
  s.label = scene.nodules.empty() ? Label::no_nodule : Label::nodule;
  std::vector<std::vector<Pixel>> truth(scene.nodules.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = static_cast<double>(x), py = static_cast<double>(y);
      double v = cfg.background_level;
      double tex = 0.0;
      for (const auto& wv : waves) {
        tex += wv.amp * std::cos(2.0 * std::numbers::pi * (wv.fx * px + wv.fy * py) + wv.phase);
      }
      v += cfg.lung_texture * tex / amp_sum;
      for (std::size_t k = 0; k < scene.nodules.size(); ++k) {
        const NoduleSpec& n = scene.nodules[k];
        const double d = std::hypot(px - n.cx, py - n.cy);
        v += n.contrast / (1.0 + std::exp(-(n.radius - d) / cfg.edge_softness));
        if (d <= n.radius) truth[k].push_back({static_cast<int>(x), static_cast<int>(y)});
      }
      for (const DecoySpec& dcy : scene.decoys) {
        if (dcy.kind == DecoyKind::ring) {
          const double r = std::hypot(px - dcy.cx, py - dcy.cy) - dcy.size;
          v += dcy.contrast * std::exp(-r * r / (2.0 * kRingSigma * kRingSigma));
        } else {
          const double r = segment_distance(px, py, dcy);
          v += dcy.contrast * std::exp(-r * r / (2.0 * kBarSigma * kBarSigma));
        }
      }
      v += cfg.noise_sigma * rng.normal();
      s.image[y * w + x] = std::round(std::clamp(v, 0.0, 1.0) * 65535.0) / 65535.0;
    }
  }
  for (auto& t : truth) s.truth_masks.emplace_back(std::move(t));
  return s;
}

std::vector<Sample> generate(const SyntheticConfig& cfg, std::size_t n_pos, std::size_t n_neg) {
  cfg.validate();
  std::vector<Sample> out;
  out.reserve(n_pos + n_neg);
  for (std::size_t i = 0; i < n_pos + n_neg; ++i) {
    Rng rng = Rng::stream(cfg.seed, i);
    const Label label = i < n_pos ? Label::nodule : Label::no_nodule;
    Sample s = render(cfg, random_scene(cfg, rng, label), rng);
    s.id = i;
    out.push_back(std::move(s));
  }
  return out;
}

LabeledSet labeled_subset(std::span<const Sample> samples, std::span<const std::size_t> ids) {
  LabeledSet out;
  out.reserve(ids.size());
  for (std::size_t id : ids) out.push_back(samples[id].labeled());
  return out;
}

// ---- splitting ---------------------------------------------------------------

DataSplit split_stratified(std::span<const Label> labels, std::uint64_t seed) {
  if (labels.size() < 6) throw DataError("split needs at least 6 samples");
  DataSplit split;
  Rng rng(seed);
  for (Label cls : {Label::nodule, Label::no_nodule}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == cls) members.push_back(i);
    }
    if (members.size() < 3) {
      throw DataError(std::string("split needs at least 3 samples of class ") + label_name(cls) +
                      ", got " + std::to_string(members.size()));
    }
    rng.shuffle(std::span<std::size_t>(members));
    const std::size_t held = (members.size() + 3) / 6;
    const std::size_t n_train = members.size() - 2 * held;
    split.train.insert(split.train.end(), members.begin(), members.begin() + n_train);
    split.val.insert(split.val.end(), members.begin() + n_train, members.begin() + n_train + held);
    split.test.insert(split.test.end(), members.begin() + n_train + held, members.end());
  }
  for (auto* part : {&split.train, &split.val, &split.test}) std::sort(part->begin(), part->end());
  return split;
}

// ---- masks -------------------------------------------------------------------

std::string encode_masks(const std::vector<PixelSet>& masks, int width, int height) {
  std::ostringstream os;
  os << "NAMSEG-MASKS 1\nsize " << width << " " << height << "\nmasks " << masks.size() << "\n";
  for (std::size_t i = 0; i < masks.size(); ++i) {
    std::vector<std::array<int, 3>> runs;
    for (const Pixel& p : masks[i]) {
      if (!runs.empty() && runs.back()[0] == p.y && runs.back()[1] + runs.back()[2] == p.x) {
        ++runs.back()[2];
      } else {
        runs.push_back({p.y, p.x, 1});
      }
    }
    os << "mask " << i << " " << runs.size() << "\n";
    for (const auto& r : runs) os << r[0] << " " << r[1] << " " << r[2] << "\n";
  }
  return os.str();
}

std::vector<PixelSet> parse_masks(const std::string& body, int* width, int* height) {
  std::istringstream is(body);
  std::string tag;
  int version = 0;
  if (!(is >> tag >> version) || tag != "NAMSEG-MASKS" || version != 1) {
    throw FormatError("mask file: expected header 'NAMSEG-MASKS 1'");
  }
  int w = 0, h = 0;
  std::size_t count = 0;
  if (!(is >> tag >> w >> h) || tag != "size" || w <= 0 || h <= 0) {
    throw FormatError("mask file: bad size line");
  }
  if (!(is >> tag >> count) || tag != "masks") throw FormatError("mask file: bad masks line");
  std::vector<PixelSet> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t index = 0, runs = 0;
    if (!(is >> tag >> index >> runs) || tag != "mask" || index != i) {
      throw FormatError("mask file: bad header for mask " + std::to_string(i));
    }
    std::vector<Pixel> px;
    for (std::size_t r = 0; r < runs; ++r) {
      int y = 0, x0 = 0, len = 0;
      if (!(is >> y >> x0 >> len) || len <= 0 || y < 0 || y >= h || x0 < 0 || x0 + len > w) {
        throw FormatError("mask file: bad run in mask " + std::to_string(i));
      }
      for (int x = x0; x < x0 + len; ++x) px.push_back({x, y});
    }
    out.emplace_back(std::move(px));
  }
  if (width) *width = w;
  if (height) *height = h;
  return out;
}

namespace {

std::string slurp_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << body;
  if (!os) throw Error("failed writing " + path.string());
}

}  // namespace

void write_masks(const fs::path& path, const std::vector<PixelSet>& masks, int width, int height) {
  write_text(path, encode_masks(masks, width, height));
}

std::vector<PixelSet> read_masks(const fs::path& path) {
  try {
    return parse_masks(slurp_text(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---- dataset directories ---------------------------------------------------------

std::string sample_name(std::size_t id) { return text::zero_pad(id, 6); }

void write_dataset(const fs::path& dir, const SyntheticConfig& cfg, std::span<const Sample> samples,
                   const DataSplit& split, const std::map<std::string, std::string>& extra) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "truth");
  std::ostringstream labels, splits;
  labels << "id,label\n";
  splits << "id,split\n";
  std::map<std::size_t, const char*> part;
  for (auto id : split.train) part[id] = "train";
  for (auto id : split.val) part[id] = "val";
  for (auto id : split.test) part[id] = "test";
  std::size_t n_pos = 0;
  for (const Sample& s : samples) {
    const std::string name = sample_name(s.id);
    write_pgm(s.image, dir / "images" / (name + ".pgm"));
    write_masks(dir / "truth" / (name + ".masks"), s.truth_masks, static_cast<int>(s.image.dim(2)),
                static_cast<int>(s.image.dim(1)));
    labels << name << "," << label_name(s.label) << "\n";
    if (auto it = part.find(s.id); it != part.end()) splits << name << "," << it->second << "\n";
    if (s.label == Label::nodule) ++n_pos;
  }
  write_text(dir / "labels.csv", labels.str());
  write_text(dir / "split.csv", splits.str());

  std::ostringstream manifest;
  manifest << "kind=synthetic_dataset\n"
           << cfg.to_text() << "n_pos=" << n_pos << "\n"
           << "n_neg=" << samples.size() - n_pos << "\n"
           << "split_ratio=4:1:1\n";
  for (const auto& [k, v] : extra) manifest << k << "=" << v << "\n";
  write_text(dir / "manifest.txt", manifest.str());
}

std::map<std::string, std::string> read_key_values(const fs::path& path) {
  std::map<std::string, std::string> out;
  std::istringstream is(slurp_text(path));
  std::string line;
  while (std::getline(is, line)) {
    const auto t = text::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string_view::npos) throw FormatError(path.string() + ": line without '='");
    out[std::string(text::trim(t.substr(0, eq)))] = std::string(text::trim(t.substr(eq + 1)));
  }
  return out;
}

namespace {

std::vector<std::pair<std::string, std::string>> read_two_column_csv(const fs::path& path,
                                                                     const std::string& header) {
  std::istringstream is(slurp_text(path));
  std::string line;
  if (!std::getline(is, line) || text::trim(line) != header) {
    throw FormatError(path.string() + ": expected header '" + header + "'");
  }
  std::vector<std::pair<std::string, std::string>> rows;
  while (std::getline(is, line)) {
    if (text::trim(line).empty()) continue;
    const auto cols = text::split(text::trim(line), ',');
    if (cols.size() != 2) throw FormatError(path.string() + ": malformed row '" + line + "'");
    rows.emplace_back(cols[0], cols[1]);
  }
  return rows;
}

}  // namespace

DatasetIndex read_dataset_index(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  DatasetIndex index;
  index.dir = dir;
  for (const auto& [id, label] : read_two_column_csv(dir / "labels.csv", "id,label")) {
    const std::size_t n = text::parse_u64(id);
    if (!index.labels.emplace(n, parse_label(label)).second) {
      throw DataError("duplicate id " + id + " in labels.csv");
    }
    index.ids.push_back(n);
  }
  if (fs::exists(dir / "split.csv")) {
    for (const auto& [id, part] : read_two_column_csv(dir / "split.csv", "id,split")) {
      index.split[text::parse_u64(id)] = part;
    }
  }
  if (fs::exists(dir / "manifest.txt")) index.manifest = read_key_values(dir / "manifest.txt");
  return index;
}

std::vector<std::size_t> DatasetIndex::ids_in(const std::string& split_name) const {
  if (split_name == "all") return ids;
  std::vector<std::size_t> out;
  for (std::size_t id : ids) {
    auto it = split.find(id);
    if (it != split.end() && it->second == split_name) out.push_back(id);
  }
  return out;
}

double DatasetIndex::background_level() const {
  auto it = manifest.find("background_level");
  return it == manifest.end() ? SyntheticConfig{}.background_level : text::parse_double(it->second);
}

Tensor read_image(const DatasetIndex& index, std::size_t id) {
  return read_pgm(index.dir / "images" / (sample_name(id) + ".pgm"));
}

LabeledSet read_labeled(const DatasetIndex& index, const std::string& split_name) {
  LabeledSet out;
  for (std::size_t id : index.ids_in(split_name)) {
    out.push_back({read_image(index, id), index.labels.at(id)});
  }
  return out;
}

std::vector<PixelSet> read_truth(const DatasetIndex& index, std::size_t id) {
  const fs::path p = index.dir / "truth" / (sample_name(id) + ".masks");
  if (!fs::exists(p)) return {};
  return read_masks(p);
}

}  // namespace namseg
