#ifndef EMMIL_PIPELINE_HPP
#define EMMIL_PIPELINE_HPP

// Configuration, experiment drivers and the batch commands behind the CLI.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "emmil/dataset.hpp"
#include "emmil/em.hpp"
#include "emmil/eval.hpp"
#include "emmil/fusion.hpp"
#include "emmil/synth.hpp"

namespace emmil::pipeline {

enum class CorpusPreset { standard, mixed, dispersed };

struct SynthSettings {
  CorpusPreset preset = CorpusPreset::standard;
  int num_classes = 3;  // standard preset only
  int images_per_class = 24;
  int image_size = 256;
  int images_per_group = 1;
  std::optional<double> disc_fraction;  // overrides the preset
  std::optional<double> stain_jitter;
  std::optional<double> min_disc_strength;
};

struct FusionSettings {
  bool normalize = true;
  double l2 = 1e-3;
  double holdout_frac = 0.1;
  double pnorm = 3.0;  // feature pooling for the Fea-LR variant
};

struct ImageBaselineSettings {
  int downsample = 2;
  int crop_size = 64;
  int crops_per_epoch = 8;
  int epochs = 12;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  std::filesystem::path dataset_dir = "data";
  std::filesystem::path output_dir = "out";
  SynthSettings synth;
  PatchOptions patch;
  em::TrainingSetup setup;  // classifier, features, augmentation
  em::EmConfig em;
  FusionSettings fusion;
  double train_frac = 0.8;
  ImageBaselineSettings image_baseline;

  void validate() const;
};

/// Parses a JSON config. Unknown keys, wrong types and out-of-range values
/// raise ConfigError. Relative paths resolve against `base_dir`.
PipelineConfig parse_config(const std::string& text, const std::filesystem::path& base_dir = {});

/// Reads a config file; EMMIL_OUTPUT_DIR, when set, replaces paths.output_dir.
PipelineConfig load_config(const std::filesystem::path& path);

/// The fully resolved configuration as canonical JSON (the config echo).
std::string config_to_json(const PipelineConfig& config);

synth::CorpusSpec corpus_spec(const PipelineConfig& config);

// Seeds for the independent random streams of one experiment.
std::uint64_t corpus_seed(const PipelineConfig& config);
std::uint64_t split_seed(const PipelineConfig& config);
std::uint64_t holdout_seed(const PipelineConfig& config);
std::uint64_t fusion_seed(const PipelineConfig& config);

/// A corpus turned into patch bags and split by group.
struct Prepared {
  PatchDataset all;
  eval::SplitPlan split;
  PatchDataset train;
  PatchDataset test;
};

Prepared prepare(const synth::Corpus& corpus, const PipelineConfig& config);

/// Patch models from EM plus the histogram fusion model fitted on the
/// training bags' hold-out patches.
struct TrainedModels {
  em::EmResult em;
  fusion::FusionModel fusion;
  std::vector<fusion::FusionHistogram> train_histograms;
};

TrainedModels train_models(const PatchDataset& train, const PipelineConfig& config, const em::EmConfig& em_config,
                           const em::IterationObserver& observer = {});

/// Predicted labels and per-class scores for a set of bags.
struct Scored {
  std::vector<int> labels;
  std::vector<std::vector<double>> scores;
};

std::vector<int> truth_labels(const PatchDataset& dataset);

/// Each bag's final-checkpoint fine map fused with its coarse map.
std::vector<em::ProbMap> fused_maps(const em::EmResult& models, const PatchDataset& dataset);

Scored predict_lr(const TrainedModels& models, const PatchDataset& dataset, bool normalize);
Scored predict_vote(const em::EmResult& models, const PatchDataset& dataset);
Scored predict_max(const em::EmResult& models, const PatchDataset& dataset);

/// p-norm pooled hidden features of the final fine model with an LR on top;
/// training features come from hold-out patches. Requires an mlp.
Scored feature_pooling_lr(const em::EmResult& models, const PatchDataset& train, const PatchDataset& test,
                          const PipelineConfig& config);

/// Whole-image baseline on downsampled images with five-crop inference.
Scored five_crop_baseline(const synth::Corpus& corpus, const eval::SplitPlan& split, const PipelineConfig& config);

/// The EM variant the "EM off" rows use: one M-step on every patch with the
/// same total epoch budget.
em::EmConfig no_em_config(const em::EmConfig& config);

struct MatrixRow {
  eval::Report report;
  std::optional<double> mask_f1;  // training-set hidden masks vs. the oracle
};

struct MatrixResult {
  std::vector<MatrixRow> rows;
  std::string table;
};

MatrixResult run_matrix(const synth::Corpus& corpus, const PipelineConfig& config);
std::string matrix_to_json(const MatrixResult& result, const PipelineConfig& config);

// Batch commands. Each writes under config.output_dir and records the files
// it produced in manifest_<command>.json.
void cmd_synth(const PipelineConfig& config);
void cmd_train(const PipelineConfig& config);
void cmd_eval(const PipelineConfig& config);
void cmd_heatmap(const PipelineConfig& config, const std::string& image_id);
void cmd_matrix(const PipelineConfig& config);

}  // namespace emmil::pipeline

#endif  // EMMIL_PIPELINE_HPP
