#include "emmil/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "emmil/common.hpp"
#include "json.hpp"

namespace emmil::pipeline {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Strict reader for one JSON object: every key must be consumed.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const char* key) const { return j_.contains(key); }

  const json* raw(const char* key) {
    if (!j_.contains(key)) return nullptr;
    seen_.insert(key);
    return &j_.at(key);
  }

  void get(const char* key, double& out) {
    if (const auto* v = raw(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  void get(const char* key, int& out) {
    if (const auto* v = raw(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
      const auto x = v->get<long long>();
      if (x < INT32_MIN || x > INT32_MAX) throw ConfigError(where(key) + " out of range");
      out = static_cast<int>(x);
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const auto* v = raw(key)) {
      if (!v->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, bool& out) {
    if (const auto* v = raw(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const auto* v = raw(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void get(const char* key, std::optional<double>& out) {
    if (has(key)) {
      double x = 0.0;
      get(key, x);
      out = x;
    }
  }
  void get(const char* key, std::vector<double>& out) {
    if (const auto* v = raw(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array of numbers");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_number()) throw ConfigError(where(key) + " must be an array of numbers");
        out.push_back(e.get<double>());
      }
    }
  }

  std::optional<Section> sub(const char* key) {
    if (const auto* v = raw(key)) return Section(*v, where(key));
    return std::nullopt;
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw ConfigError("unknown key " + where(key.c_str()));
  }

 private:
  std::string where(const char* key = nullptr) const {
    std::string p = path_.empty() ? std::string("config") : path_;
    return key ? p + "." + key : p;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class E>
E enum_from(const std::string& name, std::initializer_list<std::pair<const char*, E>> options, const char* what) {
  for (const auto& [n, e] : options)
    if (name == n) return e;
  throw ConfigError(std::string("unknown ") + what + ": " + name);
}

const char* preset_name(CorpusPreset p) {
  switch (p) {
    case CorpusPreset::standard: return "standard";
    case CorpusPreset::mixed: return "mixed";
    case CorpusPreset::dispersed: return "dispersed";
  }
  return "?";
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() || base.empty() ? path : base / path).lexically_normal();
}

void log(const char* stage, const std::string& msg) { std::fprintf(stderr, "[%s] %s\n", stage, msg.c_str()); }

// Rewraps failures with the stage name, keeping the error category.
template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(std::string(name) + ": " + e.what());
  } catch (const DataError& e) {
    throw DataError(std::string(name) + ": " + e.what());
  } catch (const std::exception& e) {
    throw TrainingError(std::string(name) + ": " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void PipelineConfig::validate() const {
  try {
    em.validate();
    setup.train.validate();
    setup.features.validate();
    patchio::validate(patch.fine);
    patchio::validate(patch.coarse);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (setup.features.input_size != setup.augment.crop_size)
    throw ConfigError("classifier input size must equal augment.crop_size");
  if (setup.augment.crop_size > patch.fine.patch_size) throw ConfigError("augment.crop_size exceeds the patch size");
  if (!(setup.augment.stain_sigma >= 0.0)) throw ConfigError("augment.stain_sigma must be >= 0");
  if (!(patch.min_foreground >= 0.0 && patch.min_foreground <= 1.0))
    throw ConfigError("patch.min_foreground must be in [0, 1]");
  if (!(patch.bg_luma_threshold > 0.0 && patch.bg_luma_threshold <= 1.0))
    throw ConfigError("patch.bg_luma_threshold must be in (0, 1]");
  if (!(fusion.holdout_frac > 0.0 && fusion.holdout_frac < 1.0))
    throw ConfigError("fusion.holdout_frac must be in (0, 1)");
  if (!(fusion.l2 >= 0.0)) throw ConfigError("fusion.l2 must be >= 0");
  if (!(fusion.pnorm >= 1.0)) throw ConfigError("fusion.pnorm must be >= 1");
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("eval.train_frac must be in (0, 1)");
  if (synth.num_classes < 2) throw ConfigError("synth.num_classes must be >= 2");
  if (synth.images_per_class < 2) throw ConfigError("synth.images_per_class must be >= 2");
  if (synth.images_per_group < 1) throw ConfigError("synth.images_per_group must be >= 1");
  const int coarse_span = patch.coarse.patch_size * patch.coarse.downsample_factor;
  if (synth.image_size < coarse_span || synth.image_size % patch.fine.patch_size != 0)
    throw ConfigError("synth.image_size must be a multiple of the patch size and hold one coarse patch");
  if (synth.disc_fraction && !(*synth.disc_fraction > 0.0 && *synth.disc_fraction < 1.0))
    throw ConfigError("synth.disc_fraction must be in (0, 1)");
  if (synth.stain_jitter && !(*synth.stain_jitter >= 0.0 && *synth.stain_jitter < 0.5))
    throw ConfigError("synth.stain_jitter must be in [0, 0.5)");
  if (synth.min_disc_strength && !(*synth.min_disc_strength >= 0.0 && *synth.min_disc_strength <= 1.0))
    throw ConfigError("synth.min_disc_strength must be in [0, 1]");
  const auto& ib = image_baseline;
  if (ib.downsample < 1 || ib.epochs < 1 || ib.crops_per_epoch < 1) throw ConfigError("image_baseline values must be >= 1");
  if (ib.crop_size < 8 || ib.crop_size % 8 != 0) throw ConfigError("image_baseline.crop_size must be a multiple of 8");
  if (ib.crop_size > synth.image_size / ib.downsample)
    throw ConfigError("image_baseline.crop_size exceeds the downsampled image");
}

PipelineConfig parse_config(const std::string& text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  PipelineConfig cfg;
  Section top(root, "");
  top.get("seed", cfg.seed);

  if (auto s = top.sub("paths")) {
    std::string data = cfg.dataset_dir.string(), out = cfg.output_dir.string();
    s->get("dataset_dir", data);
    s->get("output_dir", out);
    s->finish();
    cfg.dataset_dir = data;
    cfg.output_dir = out;
  }
  cfg.dataset_dir = resolve(base_dir, cfg.dataset_dir.string());
  cfg.output_dir = resolve(base_dir, cfg.output_dir.string());

  if (auto s = top.sub("synth")) {
    std::string preset = preset_name(cfg.synth.preset);
    s->get("preset", preset);
    cfg.synth.preset = enum_from<CorpusPreset>(
        preset, {{"standard", CorpusPreset::standard}, {"mixed", CorpusPreset::mixed}, {"dispersed", CorpusPreset::dispersed}},
        "synth.preset");
    s->get("num_classes", cfg.synth.num_classes);
    s->get("images_per_class", cfg.synth.images_per_class);
    s->get("image_size", cfg.synth.image_size);
    s->get("images_per_group", cfg.synth.images_per_group);
    s->get("disc_fraction", cfg.synth.disc_fraction);
    s->get("stain_jitter", cfg.synth.stain_jitter);
    s->get("min_disc_strength", cfg.synth.min_disc_strength);
    s->finish();
  }

  if (auto s = top.sub("patch")) {
    int size = cfg.patch.fine.patch_size, stride = cfg.patch.fine.stride, factor = cfg.patch.coarse.downsample_factor;
    s->get("size", size);
    s->get("stride", stride);
    s->get("coarse_factor", factor);
    s->get("min_foreground", cfg.patch.min_foreground);
    s->get("bg_luma_threshold", cfg.patch.bg_luma_threshold);
    s->finish();
    cfg.patch.fine = {patchio::ScaleId::fine, 1, size, stride};
    cfg.patch.coarse = {patchio::ScaleId::coarse, factor, size, stride};
  }

  if (auto s = top.sub("augment")) {
    s->get("crop_size", cfg.setup.augment.crop_size);
    s->get("stain_sigma", cfg.setup.augment.stain_sigma);
    s->finish();
  }
  cfg.setup.features.input_size = cfg.setup.augment.crop_size;

  if (auto s = top.sub("classifier")) {
    std::string arch = cfg.setup.arch.kind == classifier::ArchKind::mlp ? "mlp" : "softmax";
    std::string feat = cfg.setup.features.kind == classifier::FeatureKind::block_stats ? "block_stats" : "raw_pixels";
    s->get("arch", arch);
    s->get("hidden_units", cfg.setup.arch.hidden_units);
    s->get("features", feat);
    s->get("block", cfg.setup.features.block);
    s->get("learning_rate", cfg.setup.train.learning_rate);
    s->get("momentum", cfg.setup.train.momentum);
    s->get("batch_size", cfg.setup.train.batch_size);
    s->get("l2", cfg.setup.train.l2);
    s->get("snapshot_points", cfg.setup.train.snapshot_points);
    s->get("final_lr_scale", cfg.setup.train.final_lr_scale);
    s->get("balance_classes", cfg.setup.train.balance_classes);
    s->finish();
    cfg.setup.arch.kind =
        enum_from<classifier::ArchKind>(arch, {{"mlp", classifier::ArchKind::mlp}, {"softmax", classifier::ArchKind::softmax}},
                                        "classifier.arch");
    cfg.setup.features.kind = enum_from<classifier::FeatureKind>(
        feat, {{"block_stats", classifier::FeatureKind::block_stats}, {"raw_pixels", classifier::FeatureKind::raw_pixels}},
        "classifier.features");
  }

  if (auto s = top.sub("em")) {
    std::string mode = cfg.em.selection_mode == em::SelectionMode::percentile ? "percentile" : "smi_top1";
    s->get("p1", cfg.em.p1);
    s->get("p2", cfg.em.p2);
    s->get("sigma", cfg.em.sigma);
    s->get("epochs_per_m", cfg.em.epochs_per_m);
    s->get("max_iters", cfg.em.max_iters);
    s->get("change_tol", cfg.em.change_tol);
    s->get("smoothing", cfg.em.smoothing_enabled);
    s->get("selection", mode);
    s->finish();
    cfg.em.selection_mode = enum_from<em::SelectionMode>(
        mode, {{"percentile", em::SelectionMode::percentile}, {"smi_top1", em::SelectionMode::smi_top1}}, "em.selection");
  }
  cfg.setup.train.epochs = cfg.em.epochs_per_m;
  cfg.setup.train.seed = derive_seed(cfg.seed, {1});

  if (auto s = top.sub("fusion")) {
    s->get("normalize", cfg.fusion.normalize);
    s->get("l2", cfg.fusion.l2);
    s->get("holdout_frac", cfg.fusion.holdout_frac);
    s->get("pnorm", cfg.fusion.pnorm);
    s->finish();
  }
  if (auto s = top.sub("eval")) {
    s->get("train_frac", cfg.train_frac);
    s->finish();
  }
  if (auto s = top.sub("image_baseline")) {
    s->get("downsample", cfg.image_baseline.downsample);
    s->get("crop_size", cfg.image_baseline.crop_size);
    s->get("crops_per_epoch", cfg.image_baseline.crops_per_epoch);
    s->get("epochs", cfg.image_baseline.epochs);
    s->finish();
  }
  top.finish();
  cfg.validate();
  return cfg;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto cfg = parse_config(ss.str(), path.parent_path());
  if (const char* env = std::getenv("EMMIL_OUTPUT_DIR"); env && *env) cfg.output_dir = fs::path(env).lexically_normal();
  return cfg;
}

std::string config_to_json(const PipelineConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["paths"] = {{"dataset_dir", c.dataset_dir.string()}, {"output_dir", c.output_dir.string()}};
  ojson synth;
  synth["preset"] = preset_name(c.synth.preset);
  synth["num_classes"] = c.synth.num_classes;
  synth["images_per_class"] = c.synth.images_per_class;
  synth["image_size"] = c.synth.image_size;
  synth["images_per_group"] = c.synth.images_per_group;
  if (c.synth.disc_fraction) synth["disc_fraction"] = *c.synth.disc_fraction;
  if (c.synth.stain_jitter) synth["stain_jitter"] = *c.synth.stain_jitter;
  if (c.synth.min_disc_strength) synth["min_disc_strength"] = *c.synth.min_disc_strength;
  j["synth"] = synth;
  j["patch"] = {{"size", c.patch.fine.patch_size},
                {"stride", c.patch.fine.stride},
                {"coarse_factor", c.patch.coarse.downsample_factor},
                {"min_foreground", c.patch.min_foreground},
                {"bg_luma_threshold", c.patch.bg_luma_threshold}};
  j["augment"] = {{"crop_size", c.setup.augment.crop_size}, {"stain_sigma", c.setup.augment.stain_sigma}};
  j["classifier"] = {{"arch", c.setup.arch.kind == classifier::ArchKind::mlp ? "mlp" : "softmax"},
                     {"hidden_units", c.setup.arch.hidden_units},
                     {"features", c.setup.features.kind == classifier::FeatureKind::block_stats ? "block_stats" : "raw_pixels"},
                     {"block", c.setup.features.block},
                     {"learning_rate", c.setup.train.learning_rate},
                     {"momentum", c.setup.train.momentum},
                     {"batch_size", c.setup.train.batch_size},
                     {"l2", c.setup.train.l2},
                     {"snapshot_points", c.setup.train.snapshot_points},
                     {"final_lr_scale", c.setup.train.final_lr_scale},
                     {"balance_classes", c.setup.train.balance_classes}};
  j["em"] = {{"p1", c.em.p1},
             {"p2", c.em.p2},
             {"sigma", c.em.sigma},
             {"epochs_per_m", c.em.epochs_per_m},
             {"max_iters", c.em.max_iters},
             {"change_tol", c.em.change_tol},
             {"smoothing", c.em.smoothing_enabled},
             {"selection", c.em.selection_mode == em::SelectionMode::percentile ? "percentile" : "smi_top1"}};
  j["fusion"] = {{"normalize", c.fusion.normalize},
                 {"l2", c.fusion.l2},
                 {"holdout_frac", c.fusion.holdout_frac},
                 {"pnorm", c.fusion.pnorm}};
  j["eval"] = {{"train_frac", c.train_frac}};
  j["image_baseline"] = {{"downsample", c.image_baseline.downsample},
                         {"crop_size", c.image_baseline.crop_size},
                         {"crops_per_epoch", c.image_baseline.crops_per_epoch},
                         {"epochs", c.image_baseline.epochs}};
  return j.dump(2);
}

synth::CorpusSpec corpus_spec(const PipelineConfig& config) {
  synth::CorpusSpec spec;
  switch (config.synth.preset) {
    case CorpusPreset::standard: spec = synth::default_corpus_spec(config.synth.num_classes); break;
    case CorpusPreset::mixed: spec = synth::mixed_corpus_spec(); break;
    case CorpusPreset::dispersed: spec = synth::dispersed_corpus_spec(); break;
  }
  spec.images_per_class = config.synth.images_per_class;
  spec.image_size = config.synth.image_size;
  spec.patch_size = config.patch.fine.patch_size;
  spec.images_per_group = config.synth.images_per_group;
  if (config.synth.disc_fraction)
    for (auto& c : spec.classes) c.disc_fraction = *config.synth.disc_fraction;
  if (config.synth.stain_jitter) spec.stain_jitter = *config.synth.stain_jitter;
  if (config.synth.min_disc_strength) spec.min_disc_strength = *config.synth.min_disc_strength;
  return spec;
}

std::uint64_t corpus_seed(const PipelineConfig& c) { return derive_seed(c.seed, {6}); }
std::uint64_t split_seed(const PipelineConfig& c) { return derive_seed(c.seed, {3}); }
std::uint64_t holdout_seed(const PipelineConfig& c) { return derive_seed(c.seed, {2}); }
std::uint64_t fusion_seed(const PipelineConfig& c) { return derive_seed(c.seed, {4}); }

// ---------------------------------------------------------------------------
// Experiment drivers

Prepared prepare(const synth::Corpus& corpus, const PipelineConfig& config) {
  Prepared p;
  p.all = build_dataset(corpus.images, corpus.num_classes, config.patch);
  for (const auto& bag : p.all.bags)
    if (bag.fine.valid_count() == 0) throw DataError("image " + bag.id + " has no foreground patches");
  assign_holdout(p.all, config.fusion.holdout_frac, holdout_seed(config));
  std::vector<std::string> groups;
  for (const auto& img : corpus.images) groups.push_back(img.group_id);
  try {
    p.split = eval::split_by_group(groups, config.train_frac, split_seed(config));
  } catch (const std::invalid_argument& e) {
    throw DataError(e.what());
  }
  p.train = select_bags(p.all, p.split.train);
  p.test = select_bags(p.all, p.split.test);
  return p;
}

namespace {

// Hold-out flags for a grid, falling back to every valid patch when the
// hold-out is empty (grids with a single valid patch).
std::span<const std::uint8_t> holdout_or_all(const BagEntry& bag, patchio::ScaleId s) {
  const auto& flags = bag.holdout(s);
  const auto& grid = bag.grid(s);
  for (std::size_t j = 0; j < flags.size(); ++j)
    if (flags[j] && grid.patches[j].valid) return flags;
  return {};
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

TrainedModels train_models(const PatchDataset& train, const PipelineConfig& config, const em::EmConfig& em_config,
                           const em::IterationObserver& observer) {
  TrainedModels out;
  out.em = em::run_em(train, em_config, config.setup, observer);
  out.train_histograms.resize(train.bags.size());
  parallel_for(train.bags.size(), [&](std::size_t i) {
    const auto& bag = train.bags[i];
    const auto maps = fusion::model_maps(out.em, bag);
    out.train_histograms[i] = fusion::image_histogram(maps, holdout_or_all(bag, patchio::ScaleId::fine),
                                                      holdout_or_all(bag, patchio::ScaleId::coarse),
                                                      config.fusion.normalize);
  });
  std::vector<std::vector<double>> inputs;
  for (const auto& h : out.train_histograms) inputs.push_back(h.values);
  out.fusion = fusion::fit_fusion(inputs, truth_labels(train), train.num_classes, config.fusion.l2, fusion_seed(config));
  return out;
}

std::vector<int> truth_labels(const PatchDataset& dataset) {
  std::vector<int> y;
  for (const auto& bag : dataset.bags) y.push_back(bag.label);
  return y;
}

std::vector<em::ProbMap> fused_maps(const em::EmResult& models, const PatchDataset& dataset) {
  const auto maps = em::compute_prob_maps(models, dataset);
  std::vector<em::ProbMap> out(maps.size());
  parallel_for(maps.size(), [&](std::size_t i) { out[i] = em::fuse_scales(maps[i].first, maps[i].second); });
  return out;
}

Scored predict_lr(const TrainedModels& models, const PatchDataset& dataset, bool normalize) {
  Scored s;
  s.labels.resize(dataset.bags.size());
  s.scores.resize(dataset.bags.size());
  parallel_for(dataset.bags.size(), [&](std::size_t i) {
    const auto maps = fusion::model_maps(models.em, dataset.bags[i]);
    const auto h = fusion::image_histogram(maps, dataset.bags[i], fusion::PatchSubset::all, normalize);
    auto pred = fusion::predict_fusion(models.fusion, h.values);
    s.labels[i] = pred.label;
    s.scores[i] = std::move(pred.probs);
  });
  return s;
}

Scored predict_vote(const em::EmResult& models, const PatchDataset& dataset) {
  Scored s;
  for (const auto& map : fused_maps(models, dataset)) {
    s.labels.push_back(fusion::vote_predict(map));
    s.scores.push_back(fusion::mean_probabilities(map));
  }
  return s;
}

Scored predict_max(const em::EmResult& models, const PatchDataset& dataset) {
  Scored s;
  for (const auto& map : fused_maps(models, dataset)) {
    s.labels.push_back(fusion::max_predict(map));
    s.scores.push_back(fusion::max_probabilities(map));
  }
  return s;
}

Scored feature_pooling_lr(const em::EmResult& models, const PatchDataset& train, const PatchDataset& test,
                          const PipelineConfig& config) {
  const auto& model = models.fine.final;
  if (model.arch.kind != classifier::ArchKind::mlp) throw ConfigError("feature pooling needs an mlp classifier");
  const double p = config.fusion.pnorm;
  std::vector<std::vector<double>> xtrain(train.bags.size()), xtest(test.bags.size());
  parallel_for(train.bags.size(), [&](std::size_t i) {
    const auto& bag = train.bags[i];
    xtrain[i] = fusion::pooled_hidden_features(model, bag.fine, holdout_or_all(bag, patchio::ScaleId::fine), p);
  });
  parallel_for(test.bags.size(),
               [&](std::size_t i) { xtest[i] = fusion::pooled_hidden_features(model, test.bags[i].fine, {}, p); });
  const auto lr = fusion::fit_fusion(xtrain, truth_labels(train), train.num_classes, config.fusion.l2,
                                     derive_seed(config.seed, {7}));
  Scored s;
  for (const auto& x : xtest) {
    auto pred = fusion::predict_fusion(lr, x);
    s.labels.push_back(pred.label);
    s.scores.push_back(std::move(pred.probs));
  }
  return s;
}

Scored five_crop_baseline(const synth::Corpus& corpus, const eval::SplitPlan& split, const PipelineConfig& config) {
  const auto& ib = config.image_baseline;
  std::vector<RgbImage> small(corpus.images.size());
  parallel_for(corpus.images.size(),
               [&](std::size_t i) { small[i] = patchio::downsample(corpus.images[i].image, ib.downsample); });
  std::vector<RgbImage> train_images;
  std::vector<int> train_labels;
  for (auto i : split.train) {
    train_images.push_back(small[i]);
    train_labels.push_back(corpus.images[i].label);
  }
  auto train = config.setup.train;
  train.epochs = ib.epochs;
  train.seed = derive_seed(config.seed, {5});
  const auto model = fusion::fit_image_model(train_images, train_labels, corpus.num_classes, ib.crop_size, train,
                                             config.setup.arch, ib.crops_per_epoch);
  Scored s;
  s.labels.resize(split.test.size());
  s.scores.resize(split.test.size());
  parallel_for(split.test.size(), [&](std::size_t t) {
    s.scores[t] = fusion::five_crop_predict(model, small[split.test[t]], ib.crop_size);
    s.labels[t] = argmax(s.scores[t]);
  });
  return s;
}

em::EmConfig no_em_config(const em::EmConfig& config) {
  em::EmConfig c = config;
  c.epochs_per_m = config.epochs_per_m * config.max_iters;
  c.max_iters = 1;
  return c;
}

namespace {

eval::Report scored_report(const std::string& name, const PatchDataset& test, const Scored& s, const PipelineConfig& cfg,
                           const std::string& echo) {
  auto r = eval::make_report(name, truth_labels(test), s.labels, s.scores, test.num_classes);
  r.config_json = echo;
  r.seed = cfg.seed;
  return r;
}

std::optional<double> train_mask_f1(const synth::Corpus& corpus, const em::EmResult& em) {
  if (corpus.masks.empty()) return std::nullopt;
  return eval::mask_f1(em.masks, corpus.masks);
}

}  // namespace

MatrixResult run_matrix(const synth::Corpus& corpus, const PipelineConfig& config) {
  const std::string echo = config_to_json(config);
  const auto prep = stage("prepare", [&] { return prepare(corpus, config); });
  MatrixResult result;
  auto add = [&](const std::string& name, const Scored& s, std::optional<double> f1 = std::nullopt) {
    result.rows.push_back({scored_report(name, prep.test, s, config, echo), f1});
    log("matrix", name + ": acc " + std::to_string(result.rows.back().report.accuracy));
  };

  em::EmConfig base = config.em;
  base.selection_mode = em::SelectionMode::percentile;

  {
    const auto m = stage("train CNN", [&] { return train_models(prep.train, config, no_em_config(base)); });
    add("CNN-Vote", predict_vote(m.em, prep.test));
    add("CNN-SMI", predict_max(m.em, prep.test));
    add("CNN-LR", predict_lr(m, prep.test, config.fusion.normalize));
  }
  {
    const auto m = stage("train EM-CNN", [&] { return train_models(prep.train, config, base); });
    const auto f1 = train_mask_f1(corpus, m.em);
    add("EM-CNN-Vote", predict_vote(m.em, prep.test), f1);
    add("EM-CNN-SMI", predict_max(m.em, prep.test), f1);
    add("EM-CNN-LR", predict_lr(m, prep.test, config.fusion.normalize), f1);
    if (config.setup.arch.kind == classifier::ArchKind::mlp)
      add("EM-CNN-Fea-LR", stage("feature pooling", [&] { return feature_pooling_lr(m.em, prep.train, prep.test, config); }),
          f1);
  }
  {
    auto c = base;
    c.smoothing_enabled = false;
    const auto m = stage("train EM-CNN w/o smoothing", [&] { return train_models(prep.train, config, c); });
    add("EM-CNN-LR w/o smoothing", predict_lr(m, prep.test, config.fusion.normalize), train_mask_f1(corpus, m.em));
  }
  {
    auto c = base;
    c.selection_mode = em::SelectionMode::smi_top1;
    const auto m = stage("train SMI-CNN", [&] { return train_models(prep.train, config, c); });
    add("SMI-CNN-SMI", predict_max(m.em, prep.test), train_mask_f1(corpus, m.em));
  }
  add("CNN-Image", stage("image baseline", [&] { return five_crop_baseline(corpus, prep.split, config); }));

  std::vector<eval::Report> reports;
  for (const auto& r : result.rows) reports.push_back(r.report);
  result.table = eval::method_table(reports);
  return result;
}

std::string matrix_to_json(const MatrixResult& result, const PipelineConfig& config) {
  ojson j;
  j["config"] = ojson::parse(config_to_json(config));
  j["seed"] = config.seed;
  ojson rows = ojson::array();
  for (const auto& row : result.rows) {
    auto r = ojson::parse(eval::report_to_json(row.report));
    r.erase("config");
    r.erase("seed");
    r["mask_f1"] = row.mask_f1 ? ojson(*row.mask_f1) : ojson(nullptr);
    rows.push_back(std::move(r));
  }
  j["methods"] = std::move(rows);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Commands

namespace {

// Files produced by one command, recorded in its manifest.
class Outputs {
 public:
  Outputs(const PipelineConfig& config, std::string command) : dir_(config.output_dir), command_(std::move(command)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw DataError("cannot create output directory " + dir_.string() + ": " + ec.message());
  }

  fs::path path(const fs::path& rel) const { return dir_ / rel; }

  void write(const fs::path& rel, const std::string& text) {
    const auto p = dir_ / rel;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    out << text;
    if (!out) throw DataError("write failed for " + p.string());
    record(p);
  }

  void record(const fs::path& p) { files_.push_back(p); }

  void finish() {
    ojson j;
    j["command"] = command_;
    ojson list = ojson::array();
    for (const auto& p : files_) {
      std::ifstream in(p, std::ios::binary);
      std::stringstream ss;
      ss << in.rdbuf();
      const auto bytes = ss.str();
      char hex[17];
      std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(hash_string(bytes)));
      const auto rel = p.lexically_relative(dir_);
      list.push_back({{"path", rel.empty() ? p.string() : rel.string()}, {"bytes", bytes.size()}, {"fnv1a64", hex}});
    }
    j["files"] = std::move(list);
    const auto manifest = dir_ / ("manifest_" + command_ + ".json");
    std::ofstream out(manifest, std::ios::binary);
    if (!out) throw DataError("cannot write " + manifest.string());
    out << j.dump(2) << '\n';
  }

 private:
  fs::path dir_;
  std::string command_;
  std::vector<fs::path> files_;
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("missing file " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

synth::Corpus load_corpus(const PipelineConfig& config) {
  return stage("load corpus", [&] { return synth::read_corpus(config.dataset_dir); });
}

const char* model_file(patchio::ScaleId s, classifier::CheckpointTag t) {
  if (s == patchio::ScaleId::fine) return t == classifier::CheckpointTag::mid ? "models/fine_mid.json" : "models/fine_final.json";
  return t == classifier::CheckpointTag::mid ? "models/coarse_mid.json" : "models/coarse_final.json";
}

std::string masks_to_json(const std::vector<em::HiddenMask>& masks) {
  ojson j = ojson::object();
  for (const auto& m : masks) {
    std::vector<int> grid(m.grid.begin(), m.grid.end());
    j[m.image_id] = {{"rows", m.rows}, {"cols", m.cols}, {"grid", grid}};
  }
  return j.dump() + "\n";
}

std::vector<std::size_t> indices_of(const PatchDataset& all, const std::vector<std::string>& ids) {
  std::vector<std::size_t> idx;
  for (const auto& id : ids) {
    auto it = std::find_if(all.bags.begin(), all.bags.end(), [&](const BagEntry& b) { return b.id == id; });
    if (it == all.bags.end()) throw DataError("split refers to unknown image " + id);
    idx.push_back(static_cast<std::size_t>(it - all.bags.begin()));
  }
  return idx;
}

struct Loaded {
  TrainedModels models;
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::map<std::string, em::HiddenMask> masks;
};

Loaded load_trained(const PipelineConfig& config) {
  return stage("load models", [&] {
    const auto& dir = config.output_dir;
    Loaded l;
    auto load = [&](patchio::ScaleId s, classifier::CheckpointTag t) {
      return classifier::model_from_json(read_text(dir / model_file(s, t)));
    };
    using patchio::ScaleId;
    using classifier::CheckpointTag;
    l.models.em.fine.mid = load(ScaleId::fine, CheckpointTag::mid);
    l.models.em.fine.final = load(ScaleId::fine, CheckpointTag::final);
    l.models.em.coarse.mid = load(ScaleId::coarse, CheckpointTag::mid);
    l.models.em.coarse.final = load(ScaleId::coarse, CheckpointTag::final);
    l.models.fusion = fusion::fusion_model_from_json(read_text(dir / "models/fusion.json"));
    try {
      const auto split = json::parse(read_text(dir / "split.json"));
      l.train_ids = split.at("train").get<std::vector<std::string>>();
      l.test_ids = split.at("test").get<std::vector<std::string>>();
      const auto masks = json::parse(read_text(dir / "masks.json"));
      for (const auto& [id, m] : masks.items()) {
        em::HiddenMask hm{id, m.at("rows").get<int>(), m.at("cols").get<int>(), {}};
        for (int v : m.at("grid").get<std::vector<int>>()) hm.grid.push_back(v ? 1 : 0);
        l.masks.emplace(id, std::move(hm));
      }
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed training output: ") + e.what());
    }
    return l;
  });
}

}  // namespace

void cmd_synth(const PipelineConfig& config) {
  Outputs out(config, "synth");
  const auto corpus = stage("synthesize", [&] {
    auto spec = corpus_spec(config);
    try {
      synth::validate(spec);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    return synth::generate_dataset(spec, corpus_seed(config));
  });
  stage("write corpus", [&] { synth::write_corpus(corpus, config.dataset_dir); });
  out.record(config.dataset_dir / "manifest.jsonl");
  out.record(config.dataset_dir / "oracle_masks.json");
  for (const auto& img : corpus.images) out.record(config.dataset_dir / "images" / (img.id + ".ppm"));
  out.write("synth_config.json", config_to_json(config) + "\n");
  out.finish();
  log("synth", std::to_string(corpus.images.size()) + " images written to " + config.dataset_dir.string());
}

void cmd_train(const PipelineConfig& config) {
  const auto corpus = load_corpus(config);
  Outputs out(config, "train");
  const auto prep = stage("prepare", [&] { return prepare(corpus, config); });
  log("train", std::to_string(prep.train.bags.size()) + " training images, " + std::to_string(prep.test.bags.size()) +
                   " test images");
  const auto models = stage("em", [&] {
    return train_models(prep.train, config, config.em, [](const em::IterationRecord& r) {
      char buf[128];
      std::snprintf(buf, sizeof buf, "iteration %d: mask change %.4f, loss %.4f", r.iteration, r.mask_change, r.mean_loss);
      log("em", buf);
    });
  });

  stage("write models", [&] {
    using patchio::ScaleId;
    using classifier::CheckpointTag;
    out.write(model_file(ScaleId::fine, CheckpointTag::mid), classifier::to_json(models.em.fine.mid) + "\n");
    out.write(model_file(ScaleId::fine, CheckpointTag::final), classifier::to_json(models.em.fine.final) + "\n");
    out.write(model_file(ScaleId::coarse, CheckpointTag::mid), classifier::to_json(models.em.coarse.mid) + "\n");
    out.write(model_file(ScaleId::coarse, CheckpointTag::final), classifier::to_json(models.em.coarse.final) + "\n");
    out.write("models/fusion.json", fusion::to_json(models.fusion) + "\n");
    out.write("em_history.json", em::history_to_json(models.em) + "\n");
    out.write("masks.json", masks_to_json(models.em.masks));

    ojson split;
    split["seed"] = prep.split.seed;
    std::vector<std::string> train_ids, test_ids;
    for (const auto& b : prep.train.bags) train_ids.push_back(b.id);
    for (const auto& b : prep.test.bags) test_ids.push_back(b.id);
    split["train"] = train_ids;
    split["test"] = test_ids;
    out.write("split.json", split.dump(2) + "\n");

    const auto csv = out.path("fusion_train_histograms.csv");
    fusion::write_histograms_csv(csv, models.train_histograms, truth_labels(prep.train));
    out.record(csv);
    out.write("train_config.json", config_to_json(config) + "\n");
  });
  out.finish();
}

void cmd_eval(const PipelineConfig& config) {
  const auto corpus = load_corpus(config);
  const auto loaded = load_trained(config);
  Outputs out(config, "eval");
  const auto all = stage("prepare", [&] { return build_dataset(corpus.images, corpus.num_classes, config.patch); });
  const auto test = select_bags(all, indices_of(all, loaded.test_ids));
  const auto scored = stage("predict", [&] { return predict_lr(loaded.models, test, config.fusion.normalize); });
  auto report = eval::make_report("EM-CNN-LR", truth_labels(test), scored.labels, scored.scores, test.num_classes);
  report.config_json = config_to_json(config);
  report.seed = config.seed;
  out.write("report.json", eval::report_to_json(report));
  out.write("report.txt", eval::report_to_text(report));
  out.write("confusion.csv", eval::confusion_to_csv(report.confusion));
  out.finish();
  std::fputs(eval::report_to_text(report).c_str(), stdout);
}

void cmd_heatmap(const PipelineConfig& config, const std::string& image_id) {
  if (image_id.empty()) throw ConfigError("heatmap needs --image-id");
  const auto corpus = load_corpus(config);
  const auto loaded = load_trained(config);
  Outputs out(config, "heatmap");
  auto it = std::find_if(corpus.images.begin(), corpus.images.end(),
                         [&](const synth::SlideImage& s) { return s.id == image_id; });
  if (it == corpus.images.end()) throw DataError("unknown image id " + image_id);
  const auto single = stage("prepare", [&] {
    return build_dataset(std::span<const synth::SlideImage>(&*it, 1), corpus.num_classes, config.patch);
  });

  const auto maps = em::compute_prob_maps(loaded.models.em, single);
  const auto fused = em::fuse_scales(maps[0].first, maps[0].second);
  auto values = em::label_values(fused, it->label);
  if (config.em.smoothing_enabled) values = em::gaussian_smooth(values, config.em.sigma);

  em::HiddenMask mask;
  if (auto m = loaded.masks.find(image_id); m != loaded.masks.end()) {
    mask = m->second;
  } else {
    // Test images have no EM mask; apply the selection rule to this image alone.
    mask = em::e_step(maps, single, config.em).front();
  }
  const auto smoothed_path = out.path("heatmaps/" + image_id + "_smoothed.pgm");
  const auto mask_path = out.path("heatmaps/" + image_id + "_mask.pgm");
  fs::create_directories(smoothed_path.parent_path());
  em::write_value_pgm(smoothed_path, values);
  em::write_mask_pgm(mask_path, mask);
  out.record(smoothed_path);
  out.record(mask_path);
  out.finish();
  log("heatmap", "wrote " + smoothed_path.string() + " and " + mask_path.string());
}

void cmd_matrix(const PipelineConfig& config) {
  const auto corpus = load_corpus(config);
  Outputs out(config, "matrix");
  const auto result = run_matrix(corpus, config);
  out.write("matrix.txt", result.table);
  out.write("matrix.json", matrix_to_json(result, config));
  out.finish();
  std::fputs(result.table.c_str(), stdout);
}

}  // namespace emmil::pipeline
