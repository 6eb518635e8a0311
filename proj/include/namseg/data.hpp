#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "namseg/model.hpp"
#include "namseg/pixels.hpp"
#include "namseg/rng.hpp"
#include "namseg/tensor.hpp"

namespace namseg {

// Generator for textured, noisy slices with bright soft-edged discs
// ("nodules") and bright non-disc distractors (rings and bars).
struct SyntheticConfig {
  std::size_t image_height = 64;
  std::size_t image_width = 64;
  double background_level = 0.2;
  double noise_sigma = 0.05;
  double lung_texture = 0.03;  // amplitude of the low-frequency background pattern
  double nodule_radius_min = 3.0;
  double nodule_radius_max = 9.0;
  double nodule_contrast_min = 0.25;
  double nodule_contrast_max = 0.6;
  double edge_softness = 0.6;  // logistic edge width in pixels
  double decoy_rate = 0.3;
  // Chance that a positive slice's decoy is placed 3-8 px from the nodule
  // edge instead of anywhere in the slice.
  double adjacent_decoy_rate = 0.5;
  double two_nodule_rate = 0.01;
  double nodule_gap = 12.0;  // minimum edge-to-edge distance between two nodules
  std::uint64_t seed = 0;

  void validate() const;
  // key=value lines, one per field.
  std::string to_text() const;
  static SyntheticConfig from_map(const std::map<std::string, std::string>& values);

  friend bool operator==(const SyntheticConfig&, const SyntheticConfig&) = default;
};

struct NoduleSpec {
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;
  double contrast = 0.0;
};

enum class DecoyKind { ring, bar };

struct DecoySpec {
  DecoyKind kind = DecoyKind::ring;
  double cx = 0.0;
  double cy = 0.0;
  double size = 0.0;  // ring radius, or bar half-length
  double angle = 0.0;
  double contrast = 0.0;

  // Radius of the disc that contains the whole decoy.
  double extent() const;
};

struct Scene {
  std::vector<NoduleSpec> nodules;
  std::vector<DecoySpec> decoys;
};

struct Sample {
  std::size_t id = 0;
  Tensor image;  // [1,H,W]
  Label label = Label::no_nodule;
  // Evaluation-only ground truth; one pixel set per nodule, empty for negatives.
  std::vector<PixelSet> truth_masks;

  LabeledImage labeled() const { return {image, label}; }
};

// Random scene for a slice with the given label. Positives get one nodule, or
// two with probability two_nodule_rate; any slice gets a decoy with
// probability decoy_rate (next to the first nodule with probability
// adjacent_decoy_rate).
Scene random_scene(const SyntheticConfig& cfg, Rng& rng, Label label);
Scene random_scene_with_nodules(const SyntheticConfig& cfg, Rng& rng, std::size_t nodules,
                                bool decoy);

// Tries to place a decoy near (but not touching) nodule 0 of the scene: its
// closest point lies between min_gap and max_gap pixels from the nodule edge.
bool add_nearby_decoy(const SyntheticConfig& cfg, Rng& rng, Scene& scene, double min_gap,
                      double max_gap);

// Renders the scene with background texture and noise drawn from rng. Pixel
// values are clamped to [0,1] and quantised to multiples of 1/65535.
Sample render(const SyntheticConfig& cfg, const Scene& scene, Rng& rng);

// Samples 0..n_pos-1 are positives, n_pos..n_pos+n_neg-1 negatives. Sample i
// draws from its own stream Rng::stream(cfg.seed, i).
std::vector<Sample> generate(const SyntheticConfig& cfg, std::size_t n_pos, std::size_t n_neg);

LabeledSet labeled_subset(std::span<const Sample> samples, std::span<const std::size_t> ids);

// ---- splitting -------------------------------------------------------------

struct DataSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

// Stratified 4:1:1 split of indices into `labels`; per class val and test
// each receive round(n/6) items. Throws DataError unless every class has at
// least 3 members.
DataSplit split_stratified(std::span<const Label> labels, std::uint64_t seed);

// ---- run-length mask files ---------------------------------------------------

// Text format:
//   NAMSEG-MASKS 1
//   size <W> <H>
//   masks <N>
//   mask <i> <R>        (then R lines "<y> <x0> <length>")
std::string encode_masks(const std::vector<PixelSet>& masks, int width, int height);
std::vector<PixelSet> parse_masks(const std::string& text, int* width = nullptr,
                                  int* height = nullptr);
void write_masks(const std::filesystem::path& path, const std::vector<PixelSet>& masks, int width,
                 int height);
std::vector<PixelSet> read_masks(const std::filesystem::path& path);

// ---- dataset directories -------------------------------------------------------

// images/NNNNNN.pgm, labels.csv (id,label), split.csv (id,split),
// truth/NNNNNN.masks, manifest.txt.
void write_dataset(const std::filesystem::path& dir, const SyntheticConfig& cfg,
                   std::span<const Sample> samples, const DataSplit& split,
                   const std::map<std::string, std::string>& extra_manifest = {});

std::string sample_name(std::size_t id);

struct DatasetIndex {
  std::filesystem::path dir;
  std::vector<std::size_t> ids;
  std::map<std::size_t, Label> labels;
  std::map<std::size_t, std::string> split;  // id -> train/val/test
  std::map<std::string, std::string> manifest;

  std::vector<std::size_t> ids_in(const std::string& split_name) const;
  double background_level() const;
};

DatasetIndex read_dataset_index(const std::filesystem::path& dir);
Tensor read_image(const DatasetIndex& index, std::size_t id);
// Labels only: this is the only path from a dataset directory into training.
LabeledSet read_labeled(const DatasetIndex& index, const std::string& split_name);
std::vector<PixelSet> read_truth(const DatasetIndex& index, std::size_t id);

std::map<std::string, std::string> read_key_values(const std::filesystem::path& path);

}  // namespace namseg
