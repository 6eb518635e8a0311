#include "namseg/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "namseg/errors.hpp"
#include "namseg/ops.hpp"
#include "namseg/rng.hpp"
#include "namseg/text.hpp"

namespace namseg {

const char* label_name(Label label) { return label == Label::nodule ? "nodule" : "no_nodule"; }

Label parse_label(const std::string& text) {
  if (text == "nodule" || text == "1") return Label::nodule;
  if (text == "no_nodule" || text == "0") return Label::no_nodule;
  throw FormatError("unknown label '" + text + "'");
}

// ---- configuration ---------------------------------------------------------

void ModelConfig::validate() const {
  if (num_classes != 2) throw ConfigError("num_classes must be 2 (nodule / no-nodule)");
  if (stage_channels.empty()) throw ConfigError("at least one backbone stage is required");
  for (auto c : stage_channels) {
    if (c == 0) throw ConfigError("stage channel counts must be positive");
  }
  if (head_channels == 0) throw ConfigError("head_channels must be positive");
  if (gap_taps.empty()) throw ConfigError("at least one GAP tap is required");
  for (std::size_t i = 0; i < gap_taps.size(); ++i) {
    if (gap_taps[i] >= stage_channels.size()) {
      throw ConfigError("gap tap " + std::to_string(gap_taps[i]) + " is not a stage index (have " +
                        std::to_string(stage_channels.size()) + " stages)");
    }
    if (i > 0 && gap_taps[i] <= gap_taps[i - 1]) {
      throw ConfigError("gap taps must be strictly increasing");
    }
  }
  const std::size_t div = std::size_t{1} << stage_channels.size();
  if (input_height == 0 || input_width == 0 || input_height % div != 0 ||
      input_width % div != 0) {
    throw ConfigError("input size " + std::to_string(input_height) + "x" +
                      std::to_string(input_width) + " must be a positive multiple of " +
                      std::to_string(div) + " for " + std::to_string(stage_channels.size()) +
                      " pooling stages");
  }
  if (!std::isfinite(head_lr_multiplier) || head_lr_multiplier < 0.0) {
    throw ConfigError("head_lr_multiplier must be finite and non-negative");
  }
  if (!std::isfinite(input_mean) || !std::isfinite(input_scale) || !(input_scale > 0.0)) {
    throw ConfigError("input_mean must be finite and input_scale finite and > 0");
  }
}

ModelConfig ModelConfig::with_taps(std::size_t taps) {
  ModelConfig c;
  if (taps == 0 || taps > c.stage_channels.size()) {
    throw ConfigError("number of GAP taps must be between 1 and " +
                      std::to_string(c.stage_channels.size()));
  }
  c.gap_taps.clear();
  for (std::size_t s = c.stage_channels.size() - taps; s < c.stage_channels.size(); ++s) {
    c.gap_taps.push_back(s);
  }
  return c;
}

// ---- construction ----------------------------------------------------------

namespace {

std::size_t stage_param_index(std::size_t stage, std::size_t conv) { return stage * 4 + conv * 2; }

Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  std::vector<Parameter> params;
  auto add_conv = [&](const std::string& name, std::size_t c_out, std::size_t c_in, bool head) {
    const double bound = std::sqrt(6.0 / static_cast<double>(c_in * 9));
    params.push_back({name + ".kernel", uniform_tensor({c_out, c_in, 3, 3}, bound, rng), head});
    params.push_back({name + ".bias", Tensor({c_out}, 0.0), head});
  };

  std::size_t c_in = 1;
  for (std::size_t s = 0; s < config.stage_channels.size(); ++s) {
    const std::size_t c = config.stage_channels[s];
    add_conv("stage" + std::to_string(s) + ".conv0", c, c_in, false);
    add_conv("stage" + std::to_string(s) + ".conv1", c, c, false);
    c_in = c;
  }
  for (std::size_t t = 0; t < config.gap_taps.size(); ++t) {
    add_conv("head" + std::to_string(t) + ".conv", config.head_channels,
             config.stage_channels[config.gap_taps[t]], true);
  }
  const std::size_t features = config.feature_length();
  const double fc_bound = std::sqrt(3.0 / static_cast<double>(features));
  params.push_back({"fc.weight", uniform_tensor({config.num_classes, features}, fc_bound, rng), true});
  params.push_back({"fc.bias", Tensor({config.num_classes}, 0.0), true});
  return Model(config, std::move(params));
}

const Tensor& Model::stage_kernel(std::size_t stage, std::size_t conv) const {
  return params_.at(stage_param_index(stage, conv)).value;
}
const Tensor& Model::stage_bias(std::size_t stage, std::size_t conv) const {
  return params_.at(stage_param_index(stage, conv) + 1).value;
}
const Tensor& Model::head_kernel(std::size_t tap) const {
  return params_.at(config_.stage_channels.size() * 4 + tap * 2).value;
}
const Tensor& Model::head_bias(std::size_t tap) const {
  return params_.at(config_.stage_channels.size() * 4 + tap * 2 + 1).value;
}

bool Model::all_finite() const {
  return std::all_of(params_.begin(), params_.end(),
                     [](const Parameter& p) { return p.value.all_finite(); });
}

bool operator==(const Model& a, const Model& b) {
  if (!(a.config_ == b.config_) || a.params_.size() != b.params_.size()) return false;
  for (std::size_t i = 0; i < a.params_.size(); ++i) {
    const auto x = a.params_[i].value.data();
    const auto y = b.params_[i].value.data();
    if (x.size() != y.size() || std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

// ---- inference ---------------------------------------------------------------

namespace {

void check_image(const ModelConfig& cfg, const Tensor& image) {
  if (image.shape() != Shape{1, cfg.input_height, cfg.input_width}) {
    throw GeometryError("image shape " + shape_string(image.shape()) + " does not match model input [1," +
                        std::to_string(cfg.input_height) + "," + std::to_string(cfg.input_width) +
                        "]");
  }
}

Tensor normalize_input(const ModelConfig& cfg, const Tensor& image) {
  Tensor x = image;
  for (double& v : x.data()) v = (v - cfg.input_mean) * cfg.input_scale;
  return x;
}

}  // namespace

ForwardResult forward(const Model& model, const Tensor& image) {
  const ModelConfig& cfg = model.config();
  check_image(cfg, image);
  ForwardResult r;
  std::vector<Tensor> features;
  Tensor x = normalize_input(cfg, image);
  std::size_t next_tap = 0;
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    x = ops::relu(ops::conv2d(x, model.stage_kernel(s, 0), model.stage_bias(s, 0), 1, 1));
    x = ops::relu(ops::conv2d(x, model.stage_kernel(s, 1), model.stage_bias(s, 1), 1, 1));
    x = ops::maxpool2(x);
    if (next_tap < cfg.gap_taps.size() && cfg.gap_taps[next_tap] == s) {
      Tensor a = ops::relu(ops::conv2d(x, model.head_kernel(next_tap), model.head_bias(next_tap), 1, 1));
      features.push_back(ops::gap(a));
      r.tap_activations.push_back(std::move(a));
      ++next_tap;
    }
  }
  r.logits = ops::fc(ops::concat(features), model.fc_weight(), model.fc_bias());
  return r;
}

TapeForward record_forward(Tape& tape, const Model& model, const Tensor& image) {
  const ModelConfig& cfg = model.config();
  check_image(cfg, image);
  TapeForward f;
  for (const auto& p : model.parameters()) f.params.push_back(tape.parameter(p.value));
  const std::size_t n_stages = cfg.stage_channels.size();
  std::vector<Var> features;
  Var x = tape.constant(normalize_input(cfg, image));
  std::size_t next_tap = 0;
  for (std::size_t s = 0; s < n_stages; ++s) {
    const std::size_t k = stage_param_index(s, 0);
    x = tape.relu(tape.conv2d(x, f.params[k], f.params[k + 1], 1, 1));
    x = tape.relu(tape.conv2d(x, f.params[k + 2], f.params[k + 3], 1, 1));
    x = tape.maxpool2(x);
    if (next_tap < cfg.gap_taps.size() && cfg.gap_taps[next_tap] == s) {
      const std::size_t h = n_stages * 4 + next_tap * 2;
      features.push_back(tape.gap(tape.relu(tape.conv2d(x, f.params[h], f.params[h + 1], 1, 1))));
      ++next_tap;
    }
  }
  const std::size_t n = f.params.size();
  f.logits = tape.fc(tape.concat(features), f.params[n - 2], f.params[n - 1]);
  return f;
}

Classification classify_logits(const Tensor& logits) {
  const Tensor p = ops::softmax(logits);
  return {logits[1] > logits[0] ? Label::nodule : Label::no_nodule, p[1]};
}

Classification classify(const Model& model, const Tensor& image) {
  return classify_logits(forward(model, image).logits);
}

// ---- training ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(initial_lr > 0.0) || !std::isfinite(initial_lr)) throw ConfigError("initial_lr must be > 0");
  if (!(max_grad_norm >= 0.0) || !std::isfinite(max_grad_norm)) {
    throw ConfigError("max_grad_norm must be finite and >= 0");
  }
  if (!(lr_decay_per_epoch > 0.0 && lr_decay_per_epoch <= 1.0)) {
    throw ConfigError("lr_decay_per_epoch must lie in (0, 1]");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
}

double TrainConfig::lr_at_epoch(std::size_t epoch) const {
  return initial_lr * std::pow(lr_decay_per_epoch, static_cast<double>(epoch));
}

double TrainConfig::default_lr_for_taps(std::size_t taps) {
  switch (taps) {
    case 1: return 1e-2;
    case 2: return 2e-3;
    case 3: return 1e-3;
    default: throw ConfigError("no default learning rate for " + std::to_string(taps) + " taps");
  }
}

BatchGradient batch_gradient(const Model& model, std::span<const LabeledImage* const> batch) {
  if (batch.empty()) throw DataError("empty batch");
  BatchGradient out;
  for (const auto& p : model.parameters()) out.grads.emplace_back(p.value.shape(), 0.0);
  Tape tape;
  for (const LabeledImage* sample : batch) {
    tape.clear();
    const TapeForward f = record_forward(tape, model, sample->image);
    const Var loss = tape.softmax_xent(f.logits, static_cast<std::size_t>(sample->label));
    tape.backward(loss);
    out.loss += tape.value(loss)[0];
    if (classify_logits(tape.value(f.logits)).label == sample->label) ++out.correct;
    for (std::size_t i = 0; i < f.params.size(); ++i) {
      auto dst = out.grads[i].data();
      const auto src = tape.grad(f.params[i]).data();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.loss *= inv;
  for (auto& g : out.grads) {
    for (double& v : g.data()) v *= inv;
  }
  return out;
}

SgdMomentum::SgdMomentum(const Model& model, double momentum) : momentum_(momentum) {
  for (const auto& p : model.parameters()) velocity_.emplace_back(p.value.shape(), 0.0);
}

void SgdMomentum::step(Model& model, std::span<const Tensor> grads, double backbone_lr,
                       double head_lr) {
  auto params = model.parameters();
  if (grads.size() != params.size()) throw DimensionError("sgd: gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double rate = params[i].head ? head_lr : backbone_lr;
    auto v = velocity_[i].data();
    auto p = params[i].value.data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      p[j] -= rate * v[j];
    }
  }
}

double clip_global_norm(std::span<Tensor> grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) {
      for (double& v : g.data()) v *= scale;
    }
  }
  return norm;
}

void fit_input_normalization(ModelConfig& config, const LabeledSet& set) {
  double sum = 0.0, n = 0.0;
  for (const auto& s : set) {
    for (double v : s.image.data()) sum += v;
    n += static_cast<double>(s.image.size());
  }
  if (n == 0.0) throw DataError("cannot fit input normalization on an empty set");
  const double mean = sum / n;
  double sq = 0.0;
  for (const auto& s : set) {
    for (double v : s.image.data()) sq += (v - mean) * (v - mean);
  }
  const double sd = std::sqrt(sq / n);
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
    throw DataError("cannot fit input normalization: constant pixels");
  }
  config.input_mean = mean;
  config.input_scale = 1.0 / sd;
}

double accuracy(const Model& model, const LabeledSet& set) {
  if (set.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& s : set) {
    if (classify(model, s.image).label == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

TrainResult train(Model model, const LabeledSet& train_set, const LabeledSet& val_set,
                  const TrainConfig& config) {
  config.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  const auto positives = std::count_if(train_set.begin(), train_set.end(),
                                       [](const LabeledImage& s) { return s.label == Label::nodule; });
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(train_set.size())) {
    throw DataError("training set must contain both nodule and no_nodule images");
  }

  Rng rng(config.seed);
  SgdMomentum sgd(model, config.momentum);
  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainResult result{model, {}, 0, -1.0};
  std::vector<const LabeledImage*> batch;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = config.lr_at_epoch(epoch);
    const double head_lr = lr * model.config().head_lr_multiplier;
    rng.shuffle(std::span<std::size_t>(order));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(&train_set[order[i]]);
      BatchGradient g = batch_gradient(model, batch);
      clip_global_norm(g.grads, config.max_grad_norm);
      loss_sum += g.loss * static_cast<double>(batch.size());
      correct += g.correct;
      sgd.step(model, g.grads, lr, head_lr);
    }
    if (!model.all_finite()) {
      throw NumericError("training diverged: non-finite weights after epoch " +
                         std::to_string(epoch + 1));
    }
    EpochMetrics m;
    m.epoch = epoch + 1;
    m.lr = lr;
    m.train_loss = loss_sum / static_cast<double>(train_set.size());
    m.train_accuracy = static_cast<double>(correct) / static_cast<double>(train_set.size());
    m.val_accuracy = val_set.empty() ? m.train_accuracy : accuracy(model, val_set);
    result.log.push_back(m);
    if (m.val_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = m.val_accuracy;
      result.best_epoch = m.epoch;
      result.model = model;
    }
  }
  return result;
}

// ---- persistence -------------------------------------------------------------

namespace {

constexpr std::string_view kMagic = "NAMSEG01";

void put_f64_le(std::ostream& os, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xffu);
  os.write(bytes, 8);
}

double get_f64_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string format_config(const ModelConfig& c) {
  std::ostringstream os;
  os << "input_height=" << c.input_height << "\n"
     << "input_width=" << c.input_width << "\n"
     << "stage_channels=" << text::join_sizes(c.stage_channels) << "\n"
     << "gap_taps=" << text::join_sizes(c.gap_taps) << "\n"
     << "head_channels=" << c.head_channels << "\n"
     << "num_classes=" << c.num_classes << "\n"
     << "head_lr_multiplier=" << text::format_double(c.head_lr_multiplier) << "\n"
     << "input_mean=" << text::format_double(c.input_mean) << "\n"
     << "input_scale=" << text::format_double(c.input_scale) << "\n";
  return os.str();
}

void save_model(const Model& model, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << kMagic << "\n" << format_config(model.config());
  os << "parameters=" << model.parameters().size() << "\n\n";
  for (const auto& p : model.parameters()) {
    for (double v : p.value.data()) put_f64_le(os, v);
  }
  if (!os) throw Error("failed writing " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";

  if (bytes.size() < kMagic.size() + 1 || bytes.compare(0, kMagic.size(), kMagic) != 0 ||
      bytes[kMagic.size()] != '\n') {
    throw FormatError(where + "bad magic, expected \"" + std::string(kMagic) + "\"");
  }
  std::size_t pos = kMagic.size() + 1;
  std::map<std::string, std::string> header;
  while (true) {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw FormatError(where + "truncated header");
    const std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) break;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError(where + "header line without '=': " + line);
    if (!header.emplace(line.substr(0, eq), line.substr(eq + 1)).second) {
      throw FormatError(where + "duplicate header key " + line.substr(0, eq));
    }
  }
  auto take = [&](const std::string& key) {
    auto it = header.find(key);
    if (it == header.end()) throw FormatError(where + "missing header key " + key);
    std::string v = it->second;
    header.erase(it);
    return v;
  };

  ModelConfig cfg;
  std::size_t declared = 0;
  try {
    cfg.input_height = text::parse_u64(take("input_height"));
    cfg.input_width = text::parse_u64(take("input_width"));
    cfg.stage_channels = text::parse_size_list(take("stage_channels"));
    cfg.gap_taps = text::parse_size_list(take("gap_taps"));
    cfg.head_channels = text::parse_u64(take("head_channels"));
    cfg.num_classes = text::parse_u64(take("num_classes"));
    cfg.head_lr_multiplier = text::parse_double(take("head_lr_multiplier"));
    cfg.input_mean = text::parse_double(take("input_mean"));
    cfg.input_scale = text::parse_double(take("input_scale"));
    declared = text::parse_u64(take("parameters"));
    cfg.validate();
  } catch (const FormatError&) {
    throw;
  } catch (const Error& e) {
    throw FormatError(where + "invalid model config: " + e.what());
  }
  if (!header.empty()) throw FormatError(where + "unknown header key " + header.begin()->first);

  Model model = Model::build(cfg, 0);
  if (declared != model.params_.size()) {
    throw FormatError(where + "header declares " + std::to_string(declared) +
                      " parameters, config implies " + std::to_string(model.params_.size()));
  }
  std::size_t needed = 0;
  for (const auto& p : model.params_) needed += p.value.size() * 8;
  const std::size_t available = bytes.size() - pos;
  if (available < needed) {
    throw FormatError(where + "truncated weights: need " + std::to_string(needed) + " bytes, have " +
                      std::to_string(available));
  }
  if (available > needed) {
    throw FormatError(where + std::to_string(available - needed) +
                      " trailing bytes after the declared parameters");
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  for (auto& p : model.params_) {
    for (double& v : p.value.data()) {
      v = get_f64_le(raw);
      raw += 8;
    }
  }
  return model;
}

}  // namespace namseg
