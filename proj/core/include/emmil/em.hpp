#ifndef EMMIL_EM_HPP
#define EMMIL_EM_HPP

// EM driver for discriminative patch selection.
//
// M-step: train one patch classifier per scale on the currently selected
// patches, each labeled with its image's label.
// E-step: predict P(y_i | x_ij) at both scales, average the fine prediction
// with the coarse patch containing its center, optionally smooth the
// true-label probability over the grid, and keep patches whose value reaches
// T_i = min(image percentile P1, class percentile P2).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emmil/classifier.hpp"
#include "emmil/dataset.hpp"
#include "emmil/patchio.hpp"

namespace emmil::em {

using classifier::CheckpointTag;
using classifier::Model;
using patchio::ScaleId;

struct ProbMap {
  std::string image_id;
  ScaleId scale = ScaleId::fine;
  CheckpointTag tag = CheckpointTag::final;
  patchio::GridGeometry geometry;
  int num_classes = 0;
  std::vector<double> probs;        // rows * cols * C, zero where invalid
  std::vector<std::uint8_t> valid;  // rows * cols

  std::span<const double> at(std::size_t cell) const {
    return {probs.data() + cell * static_cast<std::size_t>(num_classes), static_cast<std::size_t>(num_classes)};
  }
  std::span<double> at(std::size_t cell) {
    return {probs.data() + cell * static_cast<std::size_t>(num_classes), static_cast<std::size_t>(num_classes)};
  }
  std::size_t valid_count() const;
};

/// Scalar per grid cell with a validity mask; invalid cells hold 0.
struct ValueGrid {
  std::string image_id;
  int rows = 0;
  int cols = 0;
  std::vector<double> values;
  std::vector<std::uint8_t> valid;

  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

struct HiddenMask {
  std::string image_id;
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> grid;

  std::size_t count() const;
  bool operator==(const HiddenMask&) const = default;
};

enum class SelectionMode { percentile, smi_top1 };

struct EmConfig {
  double p1 = 0.2;
  double p2 = 0.15;
  double sigma = 1.0;
  int epochs_per_m = 2;
  int max_iters = 6;
  double change_tol = 0.02;
  bool smoothing_enabled = true;
  SelectionMode selection_mode = SelectionMode::percentile;

  void validate() const;
};

/// Everything the M-step needs to train a patch model.
struct TrainingSetup {
  classifier::TrainConfig train;
  classifier::FeatureConfig features;
  classifier::Architecture arch;
  patchio::AugmentConfig augment;
};

struct ScaleModels {
  Model mid;
  Model final;
  double last_epoch_loss = 0.0;
  double first_epoch_loss = 0.0;
};

struct IterationRecord {
  int iteration = 0;
  std::vector<double> selected_fraction;  // per class, over valid fine patches
  double mask_change = 0.0;
  double mean_loss = 0.0;  // mean of both scales' last-epoch objective
};

struct EmResult {
  ScaleModels fine;
  ScaleModels coarse;
  std::vector<HiddenMask> masks;                     // final E-step output
  std::vector<std::vector<HiddenMask>> mask_history;  // E-step output per iteration
  std::vector<IterationRecord> history;

  const ScaleModels& models(ScaleId s) const { return s == ScaleId::fine ? fine : coarse; }
};

/// Every valid fine patch selected.
std::vector<HiddenMask> init_masks(const PatchDataset& dataset);

/// Coarse mask by footprint OR: a coarse patch is selected iff a selected fine
/// patch has its center inside the coarse patch.
HiddenMask coarse_mask(const HiddenMask& fine_mask, const BagEntry& bag);

/// Trains the scale's model on selected, non-hold-out valid patches with
/// augmentation. `iteration` keys the random streams.
ScaleModels m_step(std::span<const HiddenMask> masks, const PatchDataset& dataset, ScaleId scale,
                   const ScaleModels* warm, const TrainingSetup& setup, const EmConfig& config, int iteration);

/// Un-augmented predictions (center crop to the model input) for every valid patch.
ProbMap compute_prob_map(const Model& model, const patchio::PatchGrid& grid);

/// Final-checkpoint maps for each bag: {fine, coarse}.
std::vector<std::pair<ProbMap, ProbMap>> compute_prob_maps(const EmResult& models, const PatchDataset& dataset);

/// Averages each fine vector with the coarse vector whose footprint contains
/// the fine patch center; invalid coarse cells pass the fine vector through.
ProbMap fuse_scales(const ProbMap& fine, const ProbMap& coarse);

/// Probability of `label` per cell.
ValueGrid label_values(const ProbMap& map, int label);

/// Truncated (radius ceil(3 sigma)) Gaussian with weights renormalized over
/// in-bounds valid cells. sigma = 0 is the identity.
ValueGrid gaussian_smooth(const ValueGrid& grid, double sigma);

/// Nearest-rank percentile: the value at 1-based rank ceil(p * n) of the
/// sorted values.
double nearest_rank_percentile(std::vector<double> values, double p);

std::vector<HiddenMask> select_discriminative(std::span<const ValueGrid> values, std::span<const int> labels,
                                              int num_classes, double p1, double p2);

/// Exactly one cell per image: the maximum, ties to the smallest (row, col).
std::vector<HiddenMask> smi_select(std::span<const ValueGrid> values);

/// One E-step from final-checkpoint maps: fuse, take the true-label value,
/// smooth (if enabled) and select.
std::vector<HiddenMask> e_step(std::span<const std::pair<ProbMap, ProbMap>> maps, const PatchDataset& dataset,
                               const EmConfig& config, std::vector<ValueGrid>* smoothed_out = nullptr);

/// Optional progress callback, invoked after each E-step.
using IterationObserver = std::function<void(const IterationRecord&)>;

EmResult run_em(const PatchDataset& dataset, const EmConfig& config, const TrainingSetup& setup,
                const IterationObserver& observer = {});

std::string history_to_json(const EmResult& result);

/// ASCII PGM heatmaps: value = round(255 p); masks as 0/255.
void write_value_pgm(const std::filesystem::path& path, const ValueGrid& grid);
void write_mask_pgm(const std::filesystem::path& path, const HiddenMask& mask);

}  // namespace emmil::em

#endif  // EMMIL_EM_HPP
