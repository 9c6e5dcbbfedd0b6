#ifndef EMMIL_DATASET_HPP
#define EMMIL_DATASET_HPP

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "emmil/patchio.hpp"
#include "emmil/synth.hpp"

namespace emmil {

struct PatchOptions {
  patchio::ScaleSpec fine{patchio::ScaleId::fine, 1, 32, 32};
  patchio::ScaleSpec coarse{patchio::ScaleId::coarse, 2, 32, 32};
  double min_foreground = 0.3;
  double bg_luma_threshold = 0.85;
};

/// One bag: an image's patch grids at both scales. The hold-out flags mark
/// patches reserved for training the image-level fusion model; they are
/// never used to train the patch classifier.
struct BagEntry {
  std::string id;
  std::string group_id;
  int label = 0;
  patchio::PatchGrid fine;
  patchio::PatchGrid coarse;
  std::vector<std::uint8_t> fine_holdout;
  std::vector<std::uint8_t> coarse_holdout;

  const patchio::PatchGrid& grid(patchio::ScaleId s) const { return s == patchio::ScaleId::fine ? fine : coarse; }
  const std::vector<std::uint8_t>& holdout(patchio::ScaleId s) const {
    return s == patchio::ScaleId::fine ? fine_holdout : coarse_holdout;
  }
};

struct PatchDataset {
  std::vector<BagEntry> bags;
  int num_classes = 0;
};

PatchDataset build_dataset(std::span<const synth::SlideImage> images, int num_classes, const PatchOptions& options);

/// Marks round(frac * valid) valid patches per image and scale (at least one
/// when frac > 0 and the grid has two or more valid patches) as hold-out.
void assign_holdout(PatchDataset& dataset, double frac, std::uint64_t seed);

/// Subset of bags by index, preserving order.
PatchDataset select_bags(const PatchDataset& dataset, std::span<const std::size_t> indices);

}  // namespace emmil

#endif  // EMMIL_DATASET_HPP
