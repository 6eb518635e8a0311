#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "namseg/autodiff.hpp"
#include "namseg/tensor.hpp"

namespace namseg {

enum class Label : int { no_nodule = 0, nodule = 1 };

const char* label_name(Label label);
Label parse_label(const std::string& text);

// Backbone: stages of [conv3x3 -> relu -> conv3x3 -> relu -> maxpool2].
// A Conv+GAP head (conv3x3 -> relu -> gap) hangs off every stage listed in
// gap_taps; the GAP features of all heads are concatenated into one FC layer.
struct ModelConfig {
  std::size_t input_height = 64;
  std::size_t input_width = 64;
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::vector<std::size_t> gap_taps{2};
  std::size_t head_channels = 32;
  std::size_t num_classes = 2;
  double head_lr_multiplier = 10.0;
  // Inputs enter the network as (pixel - input_mean) * input_scale.
  double input_mean = 0.0;
  double input_scale = 1.0;

  // Throws ConfigError on an invalid configuration.
  void validate() const;

  // Heads on the deepest `taps` stages: 1 = one-GAP, 2/3 = multi-GAP.
  static ModelConfig with_taps(std::size_t taps);

  std::size_t feature_length() const { return gap_taps.size() * head_channels; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Parameter {
  std::string name;
  Tensor value;
  bool head = false;  // Conv+GAP heads and the FC layer train at the boosted rate
};

class Model {
 public:
  // Deterministic fan-in scaled uniform initialisation; biases start at zero.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }

  std::span<Parameter> parameters() { return params_; }
  std::span<const Parameter> parameters() const { return params_; }

  const Tensor& stage_kernel(std::size_t stage, std::size_t conv) const;
  const Tensor& stage_bias(std::size_t stage, std::size_t conv) const;
  const Tensor& head_kernel(std::size_t tap) const;
  const Tensor& head_bias(std::size_t tap) const;

  // fc_weight is [num_classes, feature_length]; row 1 holds the nodule-class
  // weights, column block t*K..(t+1)*K belongs to tap t.
  const Tensor& fc_weight() const { return params_[params_.size() - 2].value; }
  const Tensor& fc_bias() const { return params_[params_.size() - 1].value; }
  Tensor& fc_weight() { return params_[params_.size() - 2].value; }
  Tensor& fc_bias() { return params_[params_.size() - 1].value; }

  bool all_finite() const;

  friend bool operator==(const Model& a, const Model& b);

 private:
  Model(ModelConfig config, std::vector<Parameter> params)
      : config_(std::move(config)), params_(std::move(params)) {}
  friend Model load_model(const std::filesystem::path& path);

  ModelConfig config_;
  std::vector<Parameter> params_;
};

struct ForwardResult {
  Tensor logits;                       // [num_classes]; logits[1] is the nodule score
  std::vector<Tensor> tap_activations;  // per tap, post-relu head maps [K,h_t,w_t]
};

// Throws GeometryError when the image is not [1,H,W] at the configured size.
ForwardResult forward(const Model& model, const Tensor& image);

// Forward pass recorded on a tape, for training and gradient checks.
struct TapeForward {
  std::vector<Var> params;  // parallel to model.parameters()
  Var logits;
};
TapeForward record_forward(Tape& tape, const Model& model, const Tensor& image);

struct Classification {
  Label label = Label::no_nodule;
  double probability = 0.0;  // softmax probability of the nodule class
};

// argmax of softmax; an exact tie goes to no_nodule.
Classification classify_logits(const Tensor& logits);
Classification classify(const Model& model, const Tensor& image);

// ---- training --------------------------------------------------------------

// Images with slice-level labels only. Pixel annotations have no way in.
struct LabeledImage {
  Tensor image;
  Label label = Label::no_nodule;
};
using LabeledSet = std::vector<LabeledImage>;

struct TrainConfig {
  double initial_lr = 1e-2;
  double lr_decay_per_epoch = 0.99;
  double momentum = 0.9;
  std::size_t batch_size = 30;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  // Batch gradients with a larger global L2 norm are rescaled to it; 0 disables.
  double max_grad_norm = 1.0;

  void validate() const;
  double lr_at_epoch(std::size_t epoch) const;

  // Initial rates per number of GAP heads: 1e-2 / 2e-3 / 1e-3.
  static double default_lr_for_taps(std::size_t taps);
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;        // backbone rate used during this epoch
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct TrainResult {
  Model model;  // snapshot with the best validation accuracy
  std::vector<EpochMetrics> log;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;
};

// Mean loss and mean parameter gradients over a batch.
struct BatchGradient {
  double loss = 0.0;
  std::size_t correct = 0;
  std::vector<Tensor> grads;  // parallel to model.parameters()
};
BatchGradient batch_gradient(const Model& model, std::span<const LabeledImage* const> batch);

// Rescales grads in place so their joint L2 norm is at most max_norm (0 = no-op).
// Returns the norm before clipping.
double clip_global_norm(std::span<Tensor> grads, double max_norm);

// SGD with momentum: v <- momentum * v + g; p <- p - rate * v. Head and FC
// parameters use head_lr, backbone parameters use backbone_lr.
class SgdMomentum {
 public:
  SgdMomentum(const Model& model, double momentum);
  void step(Model& model, std::span<const Tensor> grads, double backbone_lr, double head_lr);

 private:
  double momentum_;
  std::vector<Tensor> velocity_;
};

double accuracy(const Model& model, const LabeledSet& set);

// Sets input_mean / input_scale to the pixel mean and 1/sd over `set`.
// Throws DataError for an empty or constant set.
void fit_input_normalization(ModelConfig& config, const LabeledSet& set);

// Throws DataError if the training set is empty or lacks one of the classes.
TrainResult train(Model model, const LabeledSet& train_set, const LabeledSet& val_set,
                  const TrainConfig& config);

// ---- persistence -----------------------------------------------------------

// "NAMSEG01\n", key=value header lines, a blank line, then every parameter as
// little-endian f64 in declaration order.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

std::string format_config(const ModelConfig& config);

}  // namespace namseg
