#include "emmil/em.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "emmil/common.hpp"
#include "emmil/image.hpp"
#include "json.hpp"

namespace emmil::em {

std::size_t ProbMap::valid_count() const {
  return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

std::size_t HiddenMask::count() const {
  return static_cast<std::size_t>(std::count(grid.begin(), grid.end(), std::uint8_t{1}));
}

void EmConfig::validate() const {
  if (!(p1 > 0.0 && p1 < 1.0)) throw std::invalid_argument("P1 must be in (0, 1)");
  if (!(p2 > 0.0 && p2 < 1.0)) throw std::invalid_argument("P2 must be in (0, 1)");
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
  if (epochs_per_m < 1) throw std::invalid_argument("epochs_per_m must be >= 1");
  if (max_iters < 1) throw std::invalid_argument("max_iters must be >= 1");
  if (change_tol < 0.0 || change_tol > 1.0) throw std::invalid_argument("change_tol must be in [0, 1]");
}

std::vector<HiddenMask> init_masks(const PatchDataset& dataset) {
  std::vector<HiddenMask> masks;
  masks.reserve(dataset.bags.size());
  for (const auto& bag : dataset.bags) {
    HiddenMask m{bag.id, bag.fine.rows(), bag.fine.cols(), {}};
    m.grid.reserve(bag.fine.patches.size());
    for (const auto& p : bag.fine.patches) m.grid.push_back(p.valid ? 1 : 0);
    masks.push_back(std::move(m));
  }
  return masks;
}

namespace {

// Center of a grid cell in original-image pixels.
double center_px(int index, const patchio::GridGeometry& g) {
  return (index * g.stride + g.patch_size / 2.0) * g.downsample;
}

// Index of the cell whose footprint contains the original-pixel coordinate,
// or -1 when none does.
int containing_cell(double px, int count, const patchio::GridGeometry& g) {
  const double step = static_cast<double>(g.stride) * g.downsample;
  int idx = static_cast<int>(std::floor(px / step));
  idx = std::min(idx, count - 1);
  if (idx < 0) return -1;
  const double start = idx * step;
  const double end = start + static_cast<double>(g.patch_size) * g.downsample;
  return (px >= start && px < end) ? idx : -1;
}

void check_masks(std::span<const HiddenMask> masks, const PatchDataset& dataset) {
  if (masks.size() != dataset.bags.size()) throw std::invalid_argument("one mask per bag required");
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i].rows != dataset.bags[i].fine.rows() || masks[i].cols != dataset.bags[i].fine.cols()) {
      throw std::invalid_argument("mask dimensions do not match the fine grid of " + dataset.bags[i].id);
    }
  }
}

}  // namespace

HiddenMask coarse_mask(const HiddenMask& fine_mask, const BagEntry& bag) {
  const auto& fg = bag.fine.geometry;
  const auto& cg = bag.coarse.geometry;
  HiddenMask out{bag.id, cg.rows, cg.cols, std::vector<std::uint8_t>(cg.size(), 0)};
  for (int r = 0; r < fg.rows; ++r) {
    for (int c = 0; c < fg.cols; ++c) {
      if (!fine_mask.grid[static_cast<std::size_t>(r) * fg.cols + c]) continue;
      const int cr = containing_cell(center_px(r, fg), cg.rows, cg);
      const int cc = containing_cell(center_px(c, fg), cg.cols, cg);
      if (cr >= 0 && cc >= 0) out.grid[static_cast<std::size_t>(cr) * cg.cols + cc] = 1;
    }
  }
  return out;
}

ScaleModels m_step(std::span<const HiddenMask> masks, const PatchDataset& dataset, ScaleId scale,
                   const ScaleModels* warm, const TrainingSetup& setup, const EmConfig& config, int iteration) {
  check_masks(masks, dataset);
  std::vector<classifier::LabeledPatch> selected;
  std::vector<std::size_t> per_class(static_cast<std::size_t>(dataset.num_classes), 0);
  for (std::size_t i = 0; i < dataset.bags.size(); ++i) {
    const auto& bag = dataset.bags[i];
    const auto& grid = bag.grid(scale);
    const auto& holdout = bag.holdout(scale);
    const HiddenMask scale_mask = scale == ScaleId::fine ? masks[i] : coarse_mask(masks[i], bag);
    for (std::size_t j = 0; j < grid.patches.size(); ++j) {
      if (!grid.patches[j].valid || holdout[j] || !scale_mask.grid[j]) continue;
      selected.push_back({&grid.patches[j].pixels, bag.label});
      ++per_class[static_cast<std::size_t>(bag.label)];
    }
  }
  for (int k = 0; k < dataset.num_classes; ++k) {
    if (per_class[static_cast<std::size_t>(k)] == 0) {
      throw TrainingError("M-step (" + std::string(patchio::to_string(scale)) + " scale, iteration " +
                          std::to_string(iteration) + "): class " + std::to_string(k) +
                          " has no selected patches; consider relaxing P2");
    }
  }

  classifier::TrainConfig train = setup.train;
  train.epochs = config.epochs_per_m;
  train.snapshot_points = {0.5, 1.0};
  train.seed = derive_seed(setup.train.seed,
                           {11, static_cast<std::uint64_t>(iteration), static_cast<std::uint64_t>(scale)});
  const patchio::AugmentConfig aug = setup.augment;
  const auto basis = patchio::StainBasis::hematoxylin_eosin();
  classifier::Augmenter augmenter = [aug, basis](const RgbImage& px, std::uint64_t seed) {
    return patchio::augment(px, aug, seed, basis);
  };

  auto fitted = classifier::fit(selected, train, setup.features, setup.arch, dataset.num_classes,
                                warm ? &warm->final : nullptr, augmenter);
  ScaleModels out;
  out.mid = std::move(fitted.snapshots.front());
  out.final = std::move(fitted.snapshots.back());
  out.first_epoch_loss = fitted.epoch_loss.front();
  out.last_epoch_loss = fitted.epoch_loss.back();
  return out;
}

ProbMap compute_prob_map(const Model& model, const patchio::PatchGrid& grid) {
  ProbMap map;
  map.image_id = grid.image_id;
  map.scale = grid.scale;
  map.tag = model.tag;
  map.geometry = grid.geometry;
  map.num_classes = model.num_classes;
  map.probs.assign(grid.patches.size() * static_cast<std::size_t>(model.num_classes), 0.0);
  map.valid.assign(grid.patches.size(), 0);
  parallel_for(grid.patches.size(), [&](std::size_t j) {
    const auto& p = grid.patches[j];
    if (!p.valid) return;
    const auto probs = classifier::predict_proba_features(model, classifier::model_input(model, p.pixels));
    std::copy(probs.begin(), probs.end(), map.at(j).begin());
    map.valid[j] = 1;
  });
  return map;
}

std::vector<std::pair<ProbMap, ProbMap>> compute_prob_maps(const EmResult& models, const PatchDataset& dataset) {
  std::vector<std::pair<ProbMap, ProbMap>> maps;
  maps.reserve(dataset.bags.size());
  for (const auto& bag : dataset.bags) {
    maps.emplace_back(compute_prob_map(models.fine.final, bag.fine), compute_prob_map(models.coarse.final, bag.coarse));
  }
  return maps;
}

ProbMap fuse_scales(const ProbMap& fine, const ProbMap& coarse) {
  if (fine.num_classes != coarse.num_classes) throw std::invalid_argument("class count mismatch between scales");
  ProbMap out = fine;
  const auto& fg = fine.geometry;
  const auto& cg = coarse.geometry;
  const auto C = static_cast<std::size_t>(fine.num_classes);
  for (int r = 0; r < fg.rows; ++r) {
    const int cr = containing_cell(center_px(r, fg), cg.rows, cg);
    for (int c = 0; c < fg.cols; ++c) {
      const std::size_t cell = static_cast<std::size_t>(r) * fg.cols + c;
      if (!fine.valid[cell]) continue;
      const int cc = containing_cell(center_px(c, fg), cg.cols, cg);
      if (cr < 0 || cc < 0) throw std::out_of_range("fine patch center outside the coarse grid");
      const std::size_t coarse_cell = static_cast<std::size_t>(cr) * cg.cols + cc;
      if (!coarse.valid[coarse_cell]) continue;
      auto dst = out.at(cell);
      const auto src = coarse.at(coarse_cell);
      for (std::size_t k = 0; k < C; ++k) dst[k] = 0.5 * (dst[k] + src[k]);
    }
  }
  return out;
}

ValueGrid label_values(const ProbMap& map, int label) {
  if (label < 0 || label >= map.num_classes) throw std::invalid_argument("label out of range");
  ValueGrid g{map.image_id, map.geometry.rows, map.geometry.cols, {}, map.valid};
  g.values.assign(g.size(), 0.0);
  for (std::size_t j = 0; j < g.size(); ++j)
    if (map.valid[j]) g.values[j] = map.at(j)[static_cast<std::size_t>(label)];
  return g;
}

ValueGrid gaussian_smooth(const ValueGrid& grid, double sigma) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("sigma must be >= 0");
  if (sigma == 0.0) return grid;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int d = -radius; d <= radius; ++d) kernel[static_cast<std::size_t>(d + radius)] = std::exp(-0.5 * d * d / (sigma * sigma));

  // The renormalized response is conv(v * m) / conv(m); both convolutions
  // separate into a horizontal and a vertical pass.
  const int R = grid.rows;
  const int C = grid.cols;
  std::vector<double> num(grid.size(), 0.0), den(grid.size(), 0.0);
  std::vector<double> hnum(grid.size(), 0.0), hden(grid.size(), 0.0);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      double sn = 0.0, sd = 0.0;
      for (int d = std::max(-radius, -c); d <= std::min(radius, C - 1 - c); ++d) {
        const std::size_t src = static_cast<std::size_t>(r) * C + (c + d);
        if (!grid.valid[src]) continue;
        const double w = kernel[static_cast<std::size_t>(d + radius)];
        sn += w * grid.values[src];
        sd += w;
      }
      hnum[static_cast<std::size_t>(r) * C + c] = sn;
      hden[static_cast<std::size_t>(r) * C + c] = sd;
    }
  }
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      double sn = 0.0, sd = 0.0;
      for (int d = std::max(-radius, -r); d <= std::min(radius, R - 1 - r); ++d) {
        const std::size_t src = static_cast<std::size_t>(r + d) * C + c;
        const double w = kernel[static_cast<std::size_t>(d + radius)];
        sn += w * hnum[src];
        sd += w * hden[src];
      }
      num[static_cast<std::size_t>(r) * C + c] = sn;
      den[static_cast<std::size_t>(r) * C + c] = sd;
    }
  }

  ValueGrid out = grid;
  for (std::size_t j = 0; j < out.size(); ++j) out.values[j] = grid.valid[j] ? num[j] / den[j] : 0.0;
  return out;
}

double nearest_rank_percentile(std::vector<double> values, double p) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("percentile must be in (0, 1)");
  std::sort(values.begin(), values.end());
  const auto n = static_cast<double>(values.size());
  // The small slack keeps exact products such as 0.2 * 10 from rounding up a rank.
  auto rank = static_cast<std::size_t>(std::ceil(p * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

std::vector<HiddenMask> select_discriminative(std::span<const ValueGrid> values, std::span<const int> labels,
                                              int num_classes, double p1, double p2) {
  if (values.size() != labels.size()) throw std::invalid_argument("one label per value grid required");
  std::vector<std::vector<double>> per_class(static_cast<std::size_t>(num_classes));
  std::vector<std::vector<double>> per_image(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw std::invalid_argument("label out of range");
    for (std::size_t j = 0; j < values[i].size(); ++j) {
      if (!values[i].valid[j]) continue;
      per_image[i].push_back(values[i].values[j]);
      per_class[static_cast<std::size_t>(labels[i])].push_back(values[i].values[j]);
    }
    if (per_image[i].empty()) throw DataError("image " + values[i].image_id + " has no valid patches");
  }
  std::vector<double> class_threshold(static_cast<std::size_t>(num_classes), 0.0);
  for (int k = 0; k < num_classes; ++k) {
    const auto& v = per_class[static_cast<std::size_t>(k)];
    class_threshold[static_cast<std::size_t>(k)] = v.empty() ? 0.0 : nearest_rank_percentile(v, p2);
  }

  std::vector<HiddenMask> masks(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& g = values[i];
    const double image_threshold = nearest_rank_percentile(per_image[i], p1);
    const double t = std::min(image_threshold, class_threshold[static_cast<std::size_t>(labels[i])]);
    HiddenMask& m = masks[i];
    m.image_id = g.image_id;
    m.rows = g.rows;
    m.cols = g.cols;
    m.grid.assign(g.size(), 0);
    for (std::size_t j = 0; j < g.size(); ++j) m.grid[j] = (g.valid[j] && g.values[j] >= t) ? 1 : 0;
  }
  return masks;
}

std::vector<HiddenMask> smi_select(std::span<const ValueGrid> values) {
  std::vector<HiddenMask> masks(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto& g = values[i];
    std::size_t best = g.size();
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!g.valid[j]) continue;
      if (best == g.size() || g.values[j] > g.values[best]) best = j;
    }
    if (best == g.size()) throw DataError("image " + g.image_id + " has no valid patches");
    masks[i] = {g.image_id, g.rows, g.cols, std::vector<std::uint8_t>(g.size(), 0)};
    masks[i].grid[best] = 1;
  }
  return masks;
}

std::vector<HiddenMask> e_step(std::span<const std::pair<ProbMap, ProbMap>> maps, const PatchDataset& dataset,
                               const EmConfig& config, std::vector<ValueGrid>* smoothed_out) {
  if (maps.size() != dataset.bags.size()) throw std::invalid_argument("one map pair per bag required");
  std::vector<ValueGrid> values(maps.size());
  std::vector<int> labels(maps.size());
  parallel_for(maps.size(), [&](std::size_t i) {
    labels[i] = dataset.bags[i].label;
    ValueGrid v = label_values(fuse_scales(maps[i].first, maps[i].second), labels[i]);
    values[i] = config.smoothing_enabled ? gaussian_smooth(v, config.sigma) : std::move(v);
  });
  auto masks = config.selection_mode == SelectionMode::smi_top1
                   ? smi_select(values)
                   : select_discriminative(values, labels, dataset.num_classes, config.p1, config.p2);
  if (smoothed_out) *smoothed_out = std::move(values);
  return masks;
}

EmResult run_em(const PatchDataset& dataset, const EmConfig& config, const TrainingSetup& setup,
                const IterationObserver& observer) {
  config.validate();
  if (dataset.bags.empty()) throw DataError("empty dataset");
  EmResult result;
  std::vector<HiddenMask> masks = init_masks(dataset);

  for (int it = 1; it <= config.max_iters; ++it) {
    const bool first = it == 1;
    result.fine = m_step(masks, dataset, ScaleId::fine, first ? nullptr : &result.fine, setup, config, it);
    result.coarse = m_step(masks, dataset, ScaleId::coarse, first ? nullptr : &result.coarse, setup, config, it);

    const auto maps = compute_prob_maps(result, dataset);
    auto next = e_step(maps, dataset, config);

    IterationRecord rec;
    rec.iteration = it;
    rec.mean_loss = 0.5 * (result.fine.last_epoch_loss + result.coarse.last_epoch_loss);
    std::vector<double> selected(static_cast<std::size_t>(dataset.num_classes), 0.0);
    std::vector<double> valid(static_cast<std::size_t>(dataset.num_classes), 0.0);
    std::size_t changed = 0, total_valid = 0;
    for (std::size_t i = 0; i < dataset.bags.size(); ++i) {
      const auto& bag = dataset.bags[i];
      const auto k = static_cast<std::size_t>(bag.label);
      for (std::size_t j = 0; j < bag.fine.patches.size(); ++j) {
        if (!bag.fine.patches[j].valid) continue;
        ++total_valid;
        valid[k] += 1.0;
        selected[k] += next[i].grid[j];
        if (next[i].grid[j] != masks[i].grid[j]) ++changed;
      }
    }
    for (std::size_t k = 0; k < selected.size(); ++k) {
      rec.selected_fraction.push_back(valid[k] > 0 ? selected[k] / valid[k] : 0.0);
    }
    rec.mask_change = total_valid ? static_cast<double>(changed) / static_cast<double>(total_valid) : 0.0;
    result.history.push_back(rec);
    result.mask_history.push_back(next);
    if (observer) observer(rec);

    masks = std::move(next);
    if (rec.mask_change < config.change_tol) break;
  }
  result.masks = std::move(masks);
  return result;
}

std::string history_to_json(const EmResult& result) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& rec : result.history) {
    j.push_back({{"iteration", rec.iteration},
                 {"selected_fraction", rec.selected_fraction},
                 {"mask_change", rec.mask_change},
                 {"mean_loss", rec.mean_loss}});
  }
  return j.dump(2);
}

void write_value_pgm(const std::filesystem::path& path, const ValueGrid& grid) {
  std::vector<int> px(grid.size(), 0);
  for (std::size_t j = 0; j < grid.size(); ++j) {
    if (grid.valid[j]) px[j] = static_cast<int>(std::clamp(std::floor(255.0 * grid.values[j] + 0.5), 0.0, 255.0));
  }
  write_pgm(path, grid.cols, grid.rows, px);
}

void write_mask_pgm(const std::filesystem::path& path, const HiddenMask& mask) {
  std::vector<int> px(mask.grid.size());
  for (std::size_t j = 0; j < px.size(); ++j) px[j] = mask.grid[j] ? 255 : 0;
  write_pgm(path, mask.cols, mask.rows, px);
}

}  // namespace emmil::em
