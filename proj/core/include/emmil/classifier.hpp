#ifndef EMMIL_CLASSIFIER_HPP
#define EMMIL_CLASSIFIER_HPP

// Patch-level discriminative model P(y | x; theta).
//
// Two architectures share one flat parameter vector layout:
//   softmax: W (C x D), b (C)
//   mlp:     W1 (H x D), b1 (H), W2 (C x H), b2 (C), ReLU hidden layer
// Inputs are engineered features of a fixed-size RGB patch, z-scored with
// statistics frozen when the model is first fit.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emmil/image.hpp"

namespace emmil::classifier {

enum class FeatureKind { raw_pixels, block_stats };

struct FeatureConfig {
  FeatureKind kind = FeatureKind::block_stats;
  int block = 4;        // cell side in pixels for block_stats
  int input_size = 28;  // patches fed to the model are input_size x input_size

  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  int dimension() const;
  bool operator==(const FeatureConfig&) const = default;
};

/// Un-normalized features. block_stats: per cell (row-major) the per-channel
/// mean then per-channel std of intensities scaled to [0, 1].
std::vector<double> extract_features(const RgbImage& pixels, const FeatureConfig& config);

struct NormStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // floored at 1e-6

  static NormStats identity(int dimension);
  void apply(std::span<double> x) const;
  bool operator==(const NormStats&) const = default;
};

enum class ArchKind { softmax, mlp };

struct Architecture {
  ArchKind kind = ArchKind::mlp;
  int hidden_units = 64;
  bool operator==(const Architecture&) const = default;
};

enum class CheckpointTag { mid, final };

std::string to_string(CheckpointTag tag);

struct Model {
  Architecture arch;
  FeatureConfig features;
  NormStats norm;
  int num_classes = 0;
  std::vector<double> theta;
  CheckpointTag tag = CheckpointTag::final;

  int input_dim() const { return features.dimension(); }
  bool operator==(const Model&) const = default;
};

std::size_t parameter_count(const Architecture& arch, int input_dim, int num_classes);

/// Zero parameters, identity normalization.
Model zero_model(const Architecture& arch, const FeatureConfig& features, int num_classes);

/// Glorot-uniform weights, zero biases.
Model init_model(const Architecture& arch, const FeatureConfig& features, const NormStats& norm, int num_classes,
                 std::uint64_t seed);

struct TrainConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  int batch_size = 32;
  int epochs = 2;
  double l2 = 1e-4;
  std::uint64_t seed = 1;
  std::vector<double> snapshot_points{0.5, 1.0};
  double final_lr_scale = 0.1;   // learning rate decays linearly to lr * this over the fit
  bool balance_classes = true;   // weight samples by n / (C * n_class)

  void validate() const;
};

/// A normalized feature vector with its label and loss weight.
struct Sample {
  std::vector<double> x;
  int label = 0;
  double weight = 1.0;
};

struct LabeledPatch {
  const RgbImage* pixels = nullptr;
  int label = 0;
};

/// Produces the training view of a patch for one epoch.
using Augmenter = std::function<RgbImage(const RgbImage& pixels, std::uint64_t seed)>;

struct FitResult {
  std::vector<Model> snapshots;     // one per snapshot point, final last
  std::vector<double> epoch_loss;   // mean mini-batch objective per epoch
};

/// Seeded shuffled mini-batch SGD with momentum on mean cross-entropy plus
/// (l2/2)|theta|^2. Patches larger than the model input are center-cropped
/// after augmentation. With a warm start, architecture, features and
/// normalization come from the warm model and training continues from its
/// parameters.
FitResult fit(std::span<const LabeledPatch> patches, const TrainConfig& config, const FeatureConfig& features,
              const Architecture& arch, int num_classes, const Model* warm_start = nullptr,
              const Augmenter& augment = {});

/// Features of the model's input view (center crop when larger), normalized.
std::vector<double> model_input(const Model& model, const RgbImage& pixels);

std::vector<double> predict_proba(const Model& model, const RgbImage& pixels);
std::vector<double> predict_proba_features(const Model& model, std::span<const double> x);

/// Mean weighted cross-entropy plus (l2/2)|theta|^2.
double loss(const Model& model, std::span<const Sample> batch, double l2);
std::vector<double> gradient(const Model& model, std::span<const Sample> batch, double l2);

/// Max relative error between the analytic gradient and central differences
/// on up to `coordinates` randomly chosen parameters.
double grad_check(const Model& model, std::span<const Sample> batch, double l2, double epsilon, std::uint64_t seed,
                  int coordinates = 100);

/// Post-ReLU hidden activations; mlp only.
std::vector<double> hidden_features(const Model& model, const RgbImage& pixels);
std::vector<double> hidden_features_from_input(const Model& model, std::span<const double> x);

/// Versioned JSON; bit-exact round trip for finite parameters.
std::string to_json(const Model& model);
Model model_from_json(const std::string& text);

}  // namespace emmil::classifier

#endif  // EMMIL_CLASSIFIER_HPP
