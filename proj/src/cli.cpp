#include "namseg/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "namseg/data.hpp"
#include "namseg/errors.hpp"
#include "namseg/eval.hpp"
#include "namseg/model.hpp"
#include "namseg/nam.hpp"
#include "namseg/pgm.hpp"
#include "namseg/segment.hpp"
#include "namseg/text.hpp"

namespace fs = std::filesystem;

namespace namseg::cli {

using Entries = std::vector<std::pair<std::string, std::string>>;

void write_manifest(const fs::path& path, const Entries& entries) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  for (const auto& [k, v] : entries) os << k << '=' << v << '\n';
}

namespace {

void write_text(const fs::path& path, const std::string& body) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os << body;
}

std::string num(double v) { return text::format_double(v); }

// --config FILE is expanded into --key=value arguments placed ahead of the
// command line, so explicit flags win (every option keeps its last value).
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> out;
  std::vector<std::string> injected;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      out.push_back(args[i]);
      continue;
    }
    if (!fs::exists(path)) throw CLI::ValidationError("--config", "file not found: " + path);
    for (const auto& [k, v] : read_key_values(path)) injected.push_back("--" + k + "=" + v);
  }
  if (!out.empty()) out.insert(out.begin() + 1, injected.begin(), injected.end());
  return out;
}

std::vector<std::size_t> parse_channels(const std::string& s) { return text::parse_size_list(s); }

std::vector<double> parse_edges(const std::string& s) {
  std::vector<double> edges;
  for (const std::string& part : text::split(s, ',')) {
    const std::string_view t = text::trim(part);
    edges.push_back(t == "inf" ? std::numeric_limits<double>::infinity() : text::parse_double(t));
  }
  return edges;
}

void require_dir(const fs::path& dir, const std::string& what) {
  if (!fs::is_directory(dir)) throw DataError(what + " not found: " + dir.string());
}

// ---- synth -------------------------------------------------------------------

struct SynthArgs {
  SyntheticConfig cfg;
  std::uint64_t seed = 0;
  std::size_t pos = 2000;
  std::size_t neg = 2000;
  std::string out;
};

void add_synth(CLI::App& sub, SynthArgs& a) {
  sub.add_option("--seed", a.seed, "generator and split seed")->required();
  sub.add_option("--out", a.out, "dataset directory")->required();
  sub.add_option("--pos", a.pos, "nodule slices");
  sub.add_option("--neg", a.neg, "slices without nodules");
  sub.add_option("--height", a.cfg.image_height);
  sub.add_option("--width", a.cfg.image_width);
  sub.add_option("--background", a.cfg.background_level);
  sub.add_option("--noise", a.cfg.noise_sigma);
  sub.add_option("--texture", a.cfg.lung_texture);
  sub.add_option("--radius-min", a.cfg.nodule_radius_min);
  sub.add_option("--radius-max", a.cfg.nodule_radius_max);
  sub.add_option("--contrast-min", a.cfg.nodule_contrast_min);
  sub.add_option("--contrast-max", a.cfg.nodule_contrast_max);
  sub.add_option("--edge-softness", a.cfg.edge_softness);
  sub.add_option("--decoy-rate", a.cfg.decoy_rate);
  sub.add_option("--adjacent-decoy-rate", a.cfg.adjacent_decoy_rate,
                 "chance that a positive slice's decoy sits next to the nodule");
  sub.add_option("--two-nodule-rate", a.cfg.two_nodule_rate);
  sub.add_option("--nodule-gap", a.cfg.nodule_gap);
}

int cmd_synth(SynthArgs& a, std::ostream& out) {
  a.cfg.seed = a.seed;
  a.cfg.validate();
  const std::vector<Sample> samples = generate(a.cfg, a.pos, a.neg);
  std::vector<Label> labels;
  labels.reserve(samples.size());
  for (const Sample& s : samples) labels.push_back(s.label);
  const DataSplit split = split_stratified(labels, a.seed);
  write_dataset(a.out, a.cfg, samples, split);
  out << "wrote " << samples.size() << " slices to " << a.out << " (train " << split.train.size()
      << ", val " << split.val.size() << ", test " << split.test.size() << ")\n";
  return ok;
}

// ---- train -------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t taps = 1;
  std::optional<double> lr;
  double decay = 0.99;
  double momentum = 0.9;
  double max_grad_norm = TrainConfig{}.max_grad_norm;
  std::size_t batch = 30;
  std::size_t epochs = 20;
  std::string channels = "16,32,64";
  std::size_t head_channels = 32;
  double head_lr_mult = 10.0;
};

void add_train(CLI::App& sub, TrainArgs& a) {
  sub.add_option("--data", a.data, "dataset directory")->required();
  sub.add_option("--out", a.out, "output directory")->required();
  sub.add_option("--seed", a.seed, "initialisation and shuffling seed")->required();
  sub.add_option("--gap-taps", a.taps, "number of Conv+GAP heads (1 = one-GAP)")
      ->check(CLI::Range(1, 3));
  sub.add_option("--lr", a.lr, "initial learning rate (default depends on --gap-taps)");
  sub.add_option("--decay", a.decay, "learning rate decay per epoch");
  sub.add_option("--momentum", a.momentum);
  sub.add_option("--max-grad-norm", a.max_grad_norm, "0 disables gradient clipping");
  sub.add_option("--batch", a.batch);
  sub.add_option("--epochs", a.epochs);
  sub.add_option("--channels", a.channels, "backbone channels per stage, comma separated");
  sub.add_option("--head-channels", a.head_channels);
  sub.add_option("--head-lr-mult", a.head_lr_mult);
}

int cmd_train(const TrainArgs& a, std::ostream& out) {
  require_dir(a.data, "dataset");
  const DatasetIndex index = read_dataset_index(a.data);
  const LabeledSet train_set = read_labeled(index, "train");
  const LabeledSet val_set = read_labeled(index, "val");
  if (train_set.empty()) throw DataError("dataset has no training slices");

  ModelConfig mc;
  mc.input_height = train_set.front().image.dim(1);
  mc.input_width = train_set.front().image.dim(2);
  mc.stage_channels = parse_channels(a.channels);
  if (a.taps > mc.stage_channels.size()) throw ConfigError("more GAP taps than stages");
  mc.gap_taps.clear();
  for (std::size_t s = mc.stage_channels.size() - a.taps; s < mc.stage_channels.size(); ++s) {
    mc.gap_taps.push_back(s);
  }
  mc.head_channels = a.head_channels;
  mc.head_lr_multiplier = a.head_lr_mult;
  fit_input_normalization(mc, train_set);
  mc.validate();

  TrainConfig tc;
  tc.initial_lr = a.lr.value_or(TrainConfig::default_lr_for_taps(a.taps));
  tc.lr_decay_per_epoch = a.decay;
  tc.momentum = a.momentum;
  tc.max_grad_norm = a.max_grad_norm;
  tc.batch_size = a.batch;
  tc.epochs = a.epochs;
  tc.seed = a.seed;
  tc.validate();

  const TrainResult result = train(Model::build(mc, a.seed), train_set, val_set, tc);
  fs::create_directories(a.out);
  const fs::path dir(a.out);
  save_model(result.model, dir / "model.bin");

  std::ostringstream log;
  log << "epoch,lr,train_loss,train_accuracy,val_accuracy\n";
  for (const EpochMetrics& e : result.log) {
    log << e.epoch << ',' << num(e.lr) << ',' << num(e.train_loss) << ',' << num(e.train_accuracy)
        << ',' << num(e.val_accuracy) << '\n';
  }
  write_text(dir / "train_log.csv", log.str());

  const LabeledSet test_set = read_labeled(index, "test");
  Entries m{{"kind", "model"}, {"data", a.data}, {"seed", std::to_string(a.seed)},
            {"gap_heads", std::to_string(a.taps)}};
  for (const std::string& line : text::split(format_config(mc), '\n')) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) m.emplace_back(line.substr(0, eq), line.substr(eq + 1));
  }
  m.insert(m.end(), {{"initial_lr", num(tc.initial_lr)},
                     {"lr_decay_per_epoch", num(tc.lr_decay_per_epoch)},
                     {"momentum", num(tc.momentum)},
                     {"max_grad_norm", num(tc.max_grad_norm)},
                     {"batch_size", std::to_string(tc.batch_size)},
                     {"epochs", std::to_string(tc.epochs)},
                     {"best_epoch", std::to_string(result.best_epoch)},
                     {"best_val_accuracy", num(result.best_val_accuracy)}});
  if (!test_set.empty()) {
    m.emplace_back("test_accuracy", num(accuracy(result.model, test_set)));
  }
  write_manifest(dir / "manifest.txt", m);
  out << "best epoch " << result.best_epoch << ", validation accuracy "
      << text::format_fixed(result.best_val_accuracy, 4) << "\n";
  return ok;
}

// ---- segment -----------------------------------------------------------------

struct SegmentArgs {
  std::string data;
  std::string model;
  std::string multi_model;
  std::string out;
  std::string split = "test";
  bool coarse_only = false;
  bool two_nodule = false;
  bool dump_nam = false;
  bool dump_phases = false;
  bool pbm = false;
  SegmentConfig cfg;
  std::optional<double> beta;
  std::optional<double> fill;
};

void add_segment(CLI::App& sub, SegmentArgs& a) {
  sub.add_option("--data", a.data, "dataset directory")->required();
  sub.add_option("--model", a.model, "one-GAP weights")->required();
  sub.add_option("--multi-model", a.multi_model, "multi-GAP weights (scope refinement)");
  sub.add_option("--out", a.out, "output directory")->required();
  sub.add_option("--split", a.split, "train, val, test or all");
  sub.add_flag("--coarse-only", a.coarse_only, "output the union of candidates, skip selection");
  sub.add_flag("--two-nodule", a.two_nodule, "segment the top two activation blobs");
  sub.add_flag("--dump-nam", a.dump_nam, "write NAM matrices");
  sub.add_flag("--dump-phases", a.dump_phases, "write ICM phase labels");
  sub.add_flag("--pbm", a.pbm, "write masks as PBM bitmaps as well");
  sub.add_option("--tau", a.cfg.scope.tau, "scope threshold as a fraction of peak above the map median");
  sub.add_option("--min-dynamic", a.cfg.scope.min_dynamic, "merge activation maxima below this fraction of the range");
  sub.add_option("--phases", a.cfg.icm.phases, "ICM intensity phases");
  sub.add_option("--beta", a.beta, "fixed smoothness weight (default: derived per window)");
  sub.add_option("--beta-scale", a.cfg.icm.beta_scale, "derived beta = scale * range^2");
  sub.add_option("--beta-cap", a.cfg.icm.beta_cap, "upper bound on the derived beta");
  sub.add_option("--max-iters", a.cfg.icm.max_iters, "ICM sweep limit");
  sub.add_option("--window-margin", a.cfg.icm.window_margin, "pixels added around the scope box");
  sub.add_option("--min-area", a.cfg.min_area, "smallest candidate in pixels");
  sub.add_option("--fill", a.fill, "value used to mask candidates (default: dataset background)");
}

std::string join_field(const std::vector<std::string>& parts) {
  std::string s;
  for (std::size_t i = 0; i < parts.size(); ++i) s += (i ? ";" : "") + parts[i];
  return s;
}

std::string encode_phases(const SliceResult& r) {
  std::ostringstream os;
  for (const NoduleResult& n : r.nodules) {
    const Window& w = n.phases.window;
    os << "window " << w.x0 << ' ' << w.y0 << ' ' << w.width << ' ' << w.height << '\n';
    os << "means";
    for (double m : n.phases.means) os << ' ' << num(m);
    os << '\n';
    for (int y = 0; y < w.height; ++y) {
      for (int x = 0; x < w.width; ++x) {
        os << (x ? " " : "") << n.phases.labels[static_cast<std::size_t>(y * w.width + x)];
      }
      os << '\n';
    }
  }
  return os.str();
}

int cmd_segment(SegmentArgs& a, std::ostream& out) {
  require_dir(a.data, "dataset");
  if (!fs::exists(a.model)) throw DataError("model weights not found: " + a.model);
  const DatasetIndex index = read_dataset_index(a.data);
  const Model one_gap = load_model(a.model);
  std::optional<Model> multi;
  if (!a.multi_model.empty()) {
    if (!fs::exists(a.multi_model)) throw DataError("model weights not found: " + a.multi_model);
    multi = load_model(a.multi_model);
  }
  a.cfg.icm.beta = a.beta;
  a.cfg.fill_value = a.fill.value_or(index.background_level());
  a.cfg.coarse_only = a.coarse_only;
  a.cfg.max_nodules = a.two_nodule ? 2 : 1;
  a.cfg.scope.validate();
  a.cfg.icm.validate();

  const fs::path dir(a.out);
  fs::create_directories(dir / "masks");
  if (a.dump_nam) fs::create_directories(dir / "nam");
  if (a.dump_phases) fs::create_directories(dir / "phases");
  if (a.pbm) fs::create_directories(dir / "pbm");

  std::ostringstream decisions;
  decisions << "id,classified,probability,outcome,scope_origin,candidates,selected\n";
  std::size_t n = 0, detected = 0;
  for (const std::size_t id : index.ids_in(a.split)) {
    const Tensor image = read_image(index, id);
    const SliceResult r = segment_slice(one_gap, multi ? &*multi : nullptr, image, a.cfg);
    const std::string name = sample_name(id);
    std::vector<std::string> origins, counts, selected;
    for (const NoduleResult& nr : r.nodules) {
      origins.push_back(scope_origin_name(nr.scope.origin));
      counts.push_back(std::to_string(nr.candidates.size()));
      selected.push_back(nr.selection ? std::to_string(nr.selection->index) : "");
    }
    decisions << name << ',' << label_name(r.classification.label) << ','
              << text::format_fixed(r.classification.probability, 6) << ',' << outcome_name(r.outcome)
              << ',' << join_field(origins) << ',' << join_field(counts) << ','
              << join_field(selected) << '\n';
    const int w = static_cast<int>(image.dim(2)), h = static_cast<int>(image.dim(1));
    if (r.outcome == Outcome::detected) {
      const std::vector<PixelSet> masks = r.masks(a.coarse_only);
      write_masks(dir / "masks" / (name + ".masks"), masks, w, h);
      if (a.pbm) {
        PixelSet all;
        for (const PixelSet& m : masks) all = set_union(all, m);
        write_pbm(all.to_mask(w, h), dir / "pbm" / (name + ".pbm"));
      }
      ++detected;
    }
    if (a.dump_nam && r.nam) {
      write_matrix(dir / "nam" / (name + ".txt"), r.nam->map);
      if (r.multi_nam) write_matrix(dir / "nam" / (name + ".multi.txt"), r.multi_nam->map);
    }
    if (a.dump_phases && !r.nodules.empty()) {
      write_text(dir / "phases" / (name + ".txt"), encode_phases(r));
    }
    ++n;
  }
  write_text(dir / "decisions.csv", decisions.str());

  const IcmConfig& icm = a.cfg.icm;
  write_manifest(dir / "manifest.txt",
                 {{"kind", "segmentation"},
                  {"data", a.data},
                  {"model", a.model},
                  {"multi_model", a.multi_model},
                  {"split", a.split},
                  {"coarse_only", a.coarse_only ? "true" : "false"},
                  {"two_nodule", a.two_nodule ? "true" : "false"},
                  {"tau", num(a.cfg.scope.tau)},
                  {"min_dynamic", num(a.cfg.scope.min_dynamic)},
                  {"phases", std::to_string(icm.phases)},
                  {"beta", icm.beta ? num(*icm.beta) : "auto"},
                  {"beta_scale", num(icm.beta_scale)},
                  {"beta_cap", num(icm.beta_cap)},
                  {"max_iters", std::to_string(icm.max_iters)},
                  {"window_margin", std::to_string(icm.window_margin)},
                  {"min_area", std::to_string(a.cfg.min_area)},
                  {"fill", num(a.cfg.fill_value)},
                  {"slices", std::to_string(n)},
                  {"detected", std::to_string(detected)}});
  out << "segmented " << n << " slices, " << detected << " with a nodule mask\n";
  return ok;
}

// ---- eval --------------------------------------------------------------------

struct EvalArgs {
  std::string data;
  std::vector<std::string> preds;
  std::vector<std::string> names;
  std::string out;
  std::string split = "test";
  double px_to_mm2 = 1.0;
  int centroid_margin = 2;
  std::string bins = "0,8,12,16,inf";
};

void add_eval(CLI::App& sub, EvalArgs& a) {
  sub.add_option("--data", a.data, "dataset directory")->required();
  sub.add_option("--pred", a.preds, "segmentation output directory (repeatable)")
      ->required()
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sub.add_option("--name", a.names, "configuration name per --pred")
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  sub.add_option("--out", a.out, "output directory")->required();
  sub.add_option("--split", a.split);
  sub.add_option("--px-to-mm2", a.px_to_mm2);
  sub.add_option("--centroid-margin", a.centroid_margin);
  sub.add_option("--bins", a.bins, "equivalent-diameter bin edges");
}

std::vector<SliceRecord> load_records(const DatasetIndex& index, const std::string& split,
                                      const fs::path& pred_dir) {
  const fs::path masks = fs::is_directory(pred_dir / "masks") ? pred_dir / "masks" : pred_dir;
  require_dir(masks, "prediction directory");
  const std::vector<std::size_t> ids = index.ids_in(split);
  const std::set<std::size_t> wanted(ids.begin(), ids.end());
  std::map<std::size_t, fs::path> found;
  for (const fs::directory_entry& e : fs::directory_iterator(masks)) {
    if (e.path().extension() != ".masks") continue;
    const std::size_t id = text::parse_u64(e.path().stem().string());
    if (!wanted.count(id)) {
      throw DataError("prediction " + e.path().filename().string() + " has no slice in split '" +
                      split + "'");
    }
    found[id] = e.path();
  }
  std::vector<SliceRecord> records;
  records.reserve(ids.size());
  for (const std::size_t id : ids) {
    SliceRecord r;
    r.id = id;
    r.label = index.labels.at(id);
    r.truth = read_truth(index, id);
    if (auto it = found.find(id); it != found.end()) r.pred = read_masks(it->second);
    records.push_back(std::move(r));
  }
  return records;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  require_dir(a.data, "dataset");
  if (!a.names.empty() && a.names.size() != a.preds.size()) {
    throw ConfigError("--name must be given once per --pred");
  }
  const DatasetIndex index = read_dataset_index(a.data);
  EvalConfig cfg;
  cfg.px_to_mm2 = a.px_to_mm2;
  cfg.rule.centroid_margin = a.centroid_margin;
  cfg.bin_edges = parse_edges(a.bins);

  std::string metrics = metrics_csv_header();
  std::string bins = size_bins_csv_header();
  for (std::size_t i = 0; i < a.preds.size(); ++i) {
    const std::string name =
        a.names.empty() ? fs::path(a.preds[i]).lexically_normal().filename().string() : a.names[i];
    const std::vector<SliceRecord> records = load_records(index, a.split, a.preds[i]);
    const EvalResult res = report(records, cfg);
    metrics += metrics_csv_row(name, res.metrics);
    bins += size_bins_csv_rows(name, res.bins);
    out << name << ": TPR " << text::format_fixed(res.metrics.tpr, 3) << ", FPR "
        << text::format_fixed(res.metrics.fpr, 3) << ", TP Dice "
        << text::format_fixed(res.metrics.tp_dice.mean, 3) << "\n";
  }
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_text(dir / "metrics.csv", metrics);
  write_text(dir / "size_bins.csv", bins);
  Entries m{{"kind", "evaluation"}, {"data", a.data}, {"split", a.split},
            {"px_to_mm2", num(a.px_to_mm2)}, {"centroid_margin", std::to_string(a.centroid_margin)},
            {"bins", a.bins}};
  for (std::size_t i = 0; i < a.preds.size(); ++i) {
    m.emplace_back("pred" + std::to_string(i), a.preds[i]);
    if (!a.names.empty()) m.emplace_back("name" + std::to_string(i), a.names[i]);
  }
  write_manifest(dir / "manifest.txt", m);
  return ok;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Weakly supervised nodule segmentation from activation maps", "namseg"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.option_defaults()->always_capture_default();
  std::string config_path;

  SynthArgs synth;
  TrainArgs train_args;
  SegmentArgs segment;
  EvalArgs eval;
  CLI::App* s_synth = app.add_subcommand("synth", "generate a synthetic dataset");
  CLI::App* s_train = app.add_subcommand("train", "train a one- or multi-GAP classifier");
  CLI::App* s_segment = app.add_subcommand("segment", "segment nodules in classified slices");
  CLI::App* s_eval = app.add_subcommand("eval", "score masks against truth");
  for (CLI::App* sub : {s_synth, s_train, s_segment, s_eval}) {
    sub->add_option("--config", config_path, "key=value file; flags override it");
  }
  add_synth(*s_synth, synth);
  add_train(*s_train, train_args);
  add_segment(*s_segment, segment);
  add_eval(*s_eval, eval);

  try {
    std::vector<std::string> expanded = expand_config(args);
    std::reverse(expanded.begin(), expanded.end());
    app.parse(expanded);
  } catch (const CLI::Success& e) {
    app.exit(e, out, err);
    return ok;
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return usage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  }

  try {
    if (s_synth->parsed()) return cmd_synth(synth, out);
    if (s_train->parsed()) return cmd_train(train_args, out);
    if (s_segment->parsed()) return cmd_segment(segment, out);
    return cmd_eval(eval, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return usage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
}

}  // namespace namseg::cli
