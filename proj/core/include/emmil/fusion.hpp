#ifndef EMMIL_FUSION_HPP
#define EMMIL_FUSION_HPP

// Image-level decision fusion and the aggregation baselines.
//
// The fusion input for an image is the concatenation of four class
// histograms, one per patch model (fine/mid, fine/final, coarse/mid,
// coarse/final), each the sum (or mean) of the model's patch probability
// vectors. A multinomial logistic regression maps it to the image label.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "emmil/classifier.hpp"
#include "emmil/dataset.hpp"
#include "emmil/em.hpp"

namespace emmil::fusion {

struct FusionHistogram {
  std::string image_id;
  int num_classes = 0;
  bool normalized = true;
  std::vector<double> values;  // 4 blocks of length C, block order fixed
};

enum class PatchSubset { all, fusion_holdout };

/// Maps of one image in block order: fine/mid, fine/final, coarse/mid, coarse/final.
using ModelMaps = std::array<em::ProbMap, 4>;

/// Maps of one bag for all four models of an EM run.
ModelMaps model_maps(const em::EmResult& models, const BagEntry& bag);

/// Sums probability vectors over valid cells whose include flag is set
/// (empty flags = every valid cell), per block; divides each block by its
/// cell count when normalize is set.
FusionHistogram image_histogram(const ModelMaps& maps, std::span<const std::uint8_t> fine_include,
                                std::span<const std::uint8_t> coarse_include, bool normalize);

FusionHistogram image_histogram(const ModelMaps& maps, const BagEntry& bag, PatchSubset subset, bool normalize);

/// Multinomial logistic regression over standardized inputs.
struct FusionModel {
  int num_classes = 0;
  int input_dim = 0;
  double l2 = 0.0;
  std::vector<double> mean;    // input standardization
  std::vector<double> stddev;
  std::vector<double> weights;  // C rows of (input_dim + 1), bias last
  int iterations = 0;
  double final_loss = 0.0;
  double final_grad_norm = 0.0;  // infinity norm at termination
};

/// Full-batch accelerated gradient descent (Nesterov momentum with adaptive
/// restart) on L2-regularized mean cross-entropy, until the gradient
/// infinity-norm drops below 1e-6 or 10000 iterations. Every class must have
/// at least one example.
FusionModel fit_fusion(std::span<const std::vector<double>> inputs, std::span<const int> labels, int num_classes,
                       double l2, std::uint64_t seed);

/// Regularized objective of a fitted model on the given data.
double fusion_loss(const FusionModel& model, std::span<const std::vector<double>> inputs, std::span<const int> labels);

struct Prediction {
  int label = 0;
  std::vector<double> probs;
};

/// Argmax of the softmax scores; ties go to the smallest class index.
Prediction predict_fusion(const FusionModel& model, std::span<const double> input);

/// Mean probability vector over valid cells.
std::vector<double> mean_probabilities(const em::ProbMap& map);
int vote_predict(const em::ProbMap& map);

/// Per class, the largest probability any valid patch assigns to it.
std::vector<double> max_probabilities(const em::ProbMap& map);
/// Class of the globally largest (patch, class) probability; ties go to the
/// smallest (row, col, class).
int max_predict(const em::ProbMap& map);

/// Elementwise ((1/N) sum |f_i|^p)^(1/p).
std::vector<double> pnorm_pool(std::span<const std::vector<double>> features, double p);

/// p-norm pooled hidden activations of an mlp over the valid cells of a grid
/// whose include flag is set (empty = all valid).
std::vector<double> pooled_hidden_features(const classifier::Model& model, const patchio::PatchGrid& grid,
                                           std::span<const std::uint8_t> include, double p);

struct CropOffset {
  int row = 0;
  int col = 0;
  bool operator==(const CropOffset&) const = default;
};

/// Top-left, top-right, bottom-left, bottom-right, center.
std::array<CropOffset, 5> five_crop_offsets(int width, int height, int crop_size);

/// Mean of predict_proba over the five crops.
std::vector<double> five_crop_predict(const classifier::Model& model, const RgbImage& image, int crop_size);

/// Whole-image baseline: a patch classifier trained on random crops (with a
/// random dihedral transform) of whole images. Each image contributes
/// `crops_per_epoch` crops per epoch.
classifier::Model fit_image_model(std::span<const RgbImage> images, std::span<const int> labels, int num_classes,
                                  int crop_size, const classifier::TrainConfig& train,
                                  const classifier::Architecture& arch, int crops_per_epoch);

std::string to_json(const FusionModel& model);
FusionModel fusion_model_from_json(const std::string& text);

/// CSV: image_id,label,h0..h{4C-1}
void write_histograms_csv(const std::filesystem::path& path, std::span<const FusionHistogram> histograms,
                          std::span<const int> labels);

}  // namespace emmil::fusion

#endif  // EMMIL_FUSION_HPP
