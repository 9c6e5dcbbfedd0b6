#include "emmil/dataset.hpp"

#include <cmath>
#include <stdexcept>

#include "emmil/common.hpp"

namespace emmil {

PatchDataset build_dataset(std::span<const synth::SlideImage> images, int num_classes, const PatchOptions& options) {
  if (num_classes < 2) throw std::invalid_argument("dataset needs at least 2 classes");
  PatchDataset ds;
  ds.num_classes = num_classes;
  ds.bags.resize(images.size());
  parallel_for(images.size(), [&](std::size_t i) {
    const auto& slide = images[i];
    if (slide.label < 0 || slide.label >= num_classes) {
      throw DataError("label out of range for image " + slide.id);
    }
    BagEntry& bag = ds.bags[i];
    bag.id = slide.id;
    bag.group_id = slide.group_id;
    bag.label = slide.label;
    bag.fine = patchio::extract_grid(slide.id, slide.image, options.fine, options.min_foreground,
                                     options.bg_luma_threshold);
    bag.coarse = patchio::extract_grid(slide.id, slide.image, options.coarse, options.min_foreground,
                                       options.bg_luma_threshold);
    bag.fine_holdout.assign(bag.fine.patches.size(), 0);
    bag.coarse_holdout.assign(bag.coarse.patches.size(), 0);
  });
  return ds;
}

namespace {

void mark_holdout(const patchio::PatchGrid& grid, std::vector<std::uint8_t>& flags, double frac, std::uint64_t seed) {
  flags.assign(grid.patches.size(), 0);
  std::vector<std::size_t> valid;
  for (std::size_t j = 0; j < grid.patches.size(); ++j)
    if (grid.patches[j].valid) valid.push_back(j);
  if (frac <= 0.0 || valid.size() < 2) return;
  auto count = static_cast<std::size_t>(std::lround(frac * static_cast<double>(valid.size())));
  count = std::clamp<std::size_t>(count, 1, valid.size() - 1);
  Rng rng(seed);
  rng.shuffle(valid.begin(), valid.end());
  for (std::size_t j = 0; j < count; ++j) flags[valid[j]] = 1;
}

}  // namespace

void assign_holdout(PatchDataset& dataset, double frac, std::uint64_t seed) {
  if (frac < 0.0 || frac >= 1.0) throw std::invalid_argument("holdout fraction must be in [0, 1)");
  for (auto& bag : dataset.bags) {
    const std::uint64_t key = hash_string(bag.id);
    mark_holdout(bag.fine, bag.fine_holdout, frac, derive_seed(seed, {7, key, 0}));
    mark_holdout(bag.coarse, bag.coarse_holdout, frac, derive_seed(seed, {7, key, 1}));
  }
}

PatchDataset select_bags(const PatchDataset& dataset, std::span<const std::size_t> indices) {
  PatchDataset out;
  out.num_classes = dataset.num_classes;
  out.bags.reserve(indices.size());
  for (std::size_t i : indices) out.bags.push_back(dataset.bags.at(i));
  return out;
}

}  // namespace emmil
