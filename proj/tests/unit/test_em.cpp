#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "emmil/common.hpp"
#include "emmil/dataset.hpp"
#include "emmil/em.hpp"
#include "oracles.hpp"

namespace {

using namespace emmil;
using namespace emmil::em;

em::ValueGrid grid_of(int rows, int cols, std::vector<double> values, std::vector<std::uint8_t> valid = {}) {
  em::ValueGrid g;
  g.image_id = "g";
  g.rows = rows;
  g.cols = cols;
  g.values = std::move(values);
  g.valid = valid.empty() ? std::vector<std::uint8_t>(g.values.size(), 1) : std::move(valid);
  return g;
}

em::ValueGrid random_grid(std::uint64_t seed) {
  Rng rng(seed);
  const int rows = 1 + static_cast<int>(rng.below(12)), cols = 1 + static_cast<int>(rng.below(12));
  std::vector<double> v(static_cast<std::size_t>(rows * cols));
  std::vector<std::uint8_t> m(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) {
    m[j] = rng.uniform() < 0.8;
    v[j] = m[j] ? rng.uniform() : 0.0;
  }
  return grid_of(rows, cols, v, m);
}

PatchDataset tiny_dataset(std::uint64_t seed, int images_per_class = 3) {
  auto spec = synth::default_corpus_spec(3);
  spec.images_per_class = images_per_class;
  spec.image_size = 128;
  const auto corpus = synth::generate_dataset(spec, seed);
  auto ds = build_dataset(corpus.images, 3, PatchOptions{});
  assign_holdout(ds, 0.1, seed);
  return ds;
}

TrainingSetup tiny_setup() {
  TrainingSetup s;
  s.arch = {classifier::ArchKind::softmax, 0};
  s.features.input_size = 28;
  s.features.block = 7;
  s.augment.crop_size = 28;
  s.train.epochs = 2;
  return s;
}

TEST(Smoothing, UniformGridUnchanged) {
  const auto g = grid_of(5, 7, std::vector<double>(35, 0.37));
  const auto s = gaussian_smooth(g, 1.3);
  for (double v : s.values) EXPECT_NEAR(v, 0.37, 1e-15);
}

TEST(Smoothing, ZeroSigmaIsIdentity) {
  const auto g = random_grid(3);
  EXPECT_EQ(gaussian_smooth(g, 0.0).values, g.values);
}

TEST(Smoothing, ImpulseMatchesKernel) {
  std::vector<double> v(25, 0.0);
  v[12] = 1.0;
  const auto s = gaussian_smooth(grid_of(5, 5, v), 1.0);
  // Independent discrete kernel: radius 3 window clipped to the 5x5 grid.
  auto w = [](int dr, int dc) { return std::exp(-0.5 * (dr * dr + dc * dc)); };
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 5; ++c) {
      double den = 0.0;
      for (int rr = 0; rr < 5; ++rr)
        for (int cc = 0; cc < 5; ++cc)
          if (std::abs(rr - r) <= 3 && std::abs(cc - c) <= 3) den += w(rr - r, cc - c);
      EXPECT_NEAR(s.values[static_cast<std::size_t>(r * 5 + c)], w(2 - r, 2 - c) / den, 1e-12);
    }
  }
}

TEST(Smoothing, MatchesBruteForceWithMasks) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto g = random_grid(seed);
    const double sigma = 0.3 + Rng(seed + 1000).uniform() * 2.0;
    const auto fast = gaussian_smooth(g, sigma);
    const auto slow = oracle::smooth(g, sigma);
    for (std::size_t j = 0; j < g.size(); ++j) ASSERT_NEAR(fast.values[j], slow.values[j], 1e-12) << seed;
  }
}

TEST(Percentile, NearestRankExample) {
  std::vector<double> v;
  for (int i = 1; i <= 10; ++i) v.push_back(i / 10.0);
  EXPECT_DOUBLE_EQ(nearest_rank_percentile(v, 0.2), 0.2);
  const std::vector<ValueGrid> grids{grid_of(2, 5, v)};
  const std::vector<int> labels{0};
  // Class percentile 0.9 gives a larger threshold, so the image one applies.
  const auto masks = select_discriminative(grids, labels, 1, 0.2, 0.9);
  EXPECT_EQ(masks[0].count(), 9u);
  EXPECT_GE(masks[0].count(), 8u);
}

TEST(Percentile, TiesSelectEverything) {
  const std::vector<ValueGrid> grids{grid_of(3, 3, std::vector<double>(9, 0.5))};
  const std::vector<int> labels{0};
  EXPECT_EQ(select_discriminative(grids, labels, 1, 0.6, 0.6)[0].count(), 9u);
}

TEST(Percentile, LowerClassThresholdSelectsMore) {
  // Image 0 holds the high values, image 1 the low ones; both share a class.
  std::vector<double> hi, lo;
  for (int i = 0; i < 10; ++i) {
    hi.push_back(0.5 + i / 20.0);
    lo.push_back(i / 20.0);
  }
  const std::vector<ValueGrid> grids{grid_of(1, 10, hi), grid_of(1, 10, lo)};
  const std::vector<int> same{0, 0};
  const std::vector<int> separate{0, 1};
  const auto joint = select_discriminative(grids, same, 2, 0.5, 0.3);
  const auto alone = select_discriminative(grids, separate, 2, 0.5, 0.99);
  EXPECT_GT(joint[0].count(), alone[0].count());
  EXPECT_EQ(joint[0].count(), 10u);
}

TEST(Percentile, InvalidCellsNeverSelected) {
  auto g = grid_of(2, 2, {0.9, 0.8, 0.0, 0.7}, {1, 1, 0, 1});
  const std::vector<ValueGrid> grids{g};
  const std::vector<int> labels{0};
  const auto m = select_discriminative(grids, labels, 1, 0.1, 0.1);
  EXPECT_EQ(m[0].grid[2], 0);
  EXPECT_EQ(m[0].count(), 3u);
}

TEST(Smi, SelectsSingleMaximum) {
  std::vector<double> v(20, 0.1);
  v[2 * 5 + 3] = 0.9;
  const std::vector<ValueGrid> grids{grid_of(4, 5, v)};
  const auto m = smi_select(grids);
  EXPECT_EQ(m[0].count(), 1u);
  EXPECT_EQ(m[0].grid[13], 1);
}

TEST(Smi, TiesGoToFirstCell) {
  std::vector<double> v(9, 0.1);
  v[5] = 0.8;
  v[7] = 0.8;
  const std::vector<ValueGrid> grids{grid_of(3, 3, v)};
  EXPECT_EQ(smi_select(grids)[0].grid[5], 1);
  EXPECT_EQ(smi_select(grids)[0].count(), 1u);
}

ProbMap map_of(ScaleId scale, int down, int rows, int cols, std::vector<double> probs, std::vector<std::uint8_t> valid) {
  ProbMap m;
  m.image_id = "m";
  m.scale = scale;
  m.geometry = {down, 32, 32, rows, cols};
  m.num_classes = 2;
  m.probs = std::move(probs);
  m.valid = std::move(valid);
  return m;
}

TEST(FuseScales, AveragesContainingCoarseCell) {
  const auto fine = map_of(ScaleId::fine, 1, 1, 1, {0.2, 0.8}, {1});
  const auto coarse = map_of(ScaleId::coarse, 2, 1, 1, {0.6, 0.4}, {1});
  const auto f = fuse_scales(fine, coarse);
  EXPECT_NEAR(f.probs[0], 0.4, 1e-15);
  EXPECT_NEAR(f.probs[1], 0.6, 1e-15);
  const auto same = fuse_scales(fine, map_of(ScaleId::coarse, 2, 1, 1, {0.2, 0.8}, {1}));
  EXPECT_EQ(same.probs, fine.probs);
  const auto pass = fuse_scales(fine, map_of(ScaleId::coarse, 2, 1, 1, {0.0, 0.0}, {0}));
  EXPECT_EQ(pass.probs, fine.probs);
}

TEST(FuseScales, FootprintLookup) {
  // A 4x4 fine grid over a 2x2 coarse grid: fine (r, c) lies in coarse (r/2, c/2).
  std::vector<double> fp(32), cp(8);
  for (int j = 0; j < 16; ++j) fp[static_cast<std::size_t>(2 * j)] = 0.0, fp[static_cast<std::size_t>(2 * j + 1)] = 1.0;
  for (int j = 0; j < 4; ++j) cp[static_cast<std::size_t>(2 * j)] = j / 4.0, cp[static_cast<std::size_t>(2 * j + 1)] = 1.0 - j / 4.0;
  const auto f = fuse_scales(map_of(ScaleId::fine, 1, 4, 4, fp, std::vector<std::uint8_t>(16, 1)),
                             map_of(ScaleId::coarse, 2, 2, 2, cp, std::vector<std::uint8_t>(4, 1)));
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const int k = (r / 2) * 2 + c / 2;
      EXPECT_NEAR(f.probs[static_cast<std::size_t>(2 * (r * 4 + c))], 0.5 * (k / 4.0), 1e-15);
    }
}

TEST(InitMasks, SelectsExactlyValidPatches) {
  const auto ds = tiny_dataset(1);
  const auto masks = init_masks(ds);
  ASSERT_EQ(masks.size(), ds.bags.size());
  for (std::size_t i = 0; i < masks.size(); ++i) {
    EXPECT_EQ(masks[i].count(), ds.bags[i].fine.valid_count());
    for (std::size_t j = 0; j < masks[i].grid.size(); ++j)
      EXPECT_EQ(masks[i].grid[j] != 0, ds.bags[i].fine.patches[j].valid);
  }
}

TEST(InitMasks, InvalidPatchesStayOff) {
  auto ds = tiny_dataset(2, 2);
  auto& grid = ds.bags[0].fine;
  for (std::size_t j = 0; j < 10; ++j) grid.patches[j].valid = false;
  const auto masks = init_masks(ds);
  for (std::size_t j = 0; j < 10; ++j) EXPECT_EQ(masks[0].grid[j], 0);
}

TEST(CoarseMask, FootprintOr) {
  const auto ds = tiny_dataset(3, 2);
  const auto& bag = ds.bags[0];
  HiddenMask fine{bag.id, bag.fine.rows(), bag.fine.cols(), std::vector<std::uint8_t>(bag.fine.patches.size(), 0)};
  fine.grid[static_cast<std::size_t>(1 * fine.cols + 2)] = 1;  // fine (1, 2) -> coarse (0, 1)
  const auto c = coarse_mask(fine, bag);
  EXPECT_EQ(c.count(), 1u);
  EXPECT_EQ(c.grid[1], 1);
}

TEST(ProbMaps, ZeroModelIsUniform) {
  const auto ds = tiny_dataset(4, 2);
  const auto setup = tiny_setup();
  const auto m = classifier::zero_model(setup.arch, setup.features, 3);
  const auto map = compute_prob_map(m, ds.bags[0].fine);
  EXPECT_EQ(map.geometry, ds.bags[0].fine.geometry);
  for (std::size_t j = 0; j < map.valid.size(); ++j) {
    if (!map.valid[j]) continue;
    for (double p : map.at(j)) EXPECT_DOUBLE_EQ(p, 1.0 / 3.0);
  }
}

TEST(ProbMaps, MatchDirectPredictions) {
  const auto ds = tiny_dataset(5, 2);
  const auto setup = tiny_setup();
  const auto m = classifier::init_model(setup.arch, setup.features,
                                        classifier::NormStats::identity(setup.features.dimension()), 3, 9);
  const auto& grid = ds.bags[1].fine;
  const auto map = compute_prob_map(m, grid);
  for (std::size_t j = 0; j < grid.patches.size(); ++j) {
    if (!grid.patches[j].valid) continue;
    const auto direct = classifier::predict_proba_features(m, classifier::model_input(m, grid.patches[j].pixels));
    for (int k = 0; k < 3; ++k) EXPECT_EQ(map.at(j)[static_cast<std::size_t>(k)], direct[static_cast<std::size_t>(k)]);
  }
}

TEST(MStep, AllTrueMasksEqualPlainTraining) {
  const auto ds = tiny_dataset(6);
  const auto setup = tiny_setup();
  EmConfig cfg;
  cfg.max_iters = 1;
  const auto masks = init_masks(ds);
  const auto direct = m_step(masks, ds, ScaleId::fine, nullptr, setup, cfg, 1);
  const auto em_run = run_em(ds, cfg, setup);
  EXPECT_EQ(em_run.fine.final.theta, direct.final.theta);
  EXPECT_EQ(em_run.history.size(), 1u);
}

TEST(MStep, LossDropsDuringTraining) {
  const auto ds = tiny_dataset(7);
  auto setup = tiny_setup();
  EmConfig cfg;
  cfg.epochs_per_m = 6;
  const auto m = m_step(init_masks(ds), ds, ScaleId::fine, nullptr, setup, cfg, 0);
  EXPECT_LT(m.last_epoch_loss, m.first_epoch_loss);
  const auto warm = m_step(init_masks(ds), ds, ScaleId::fine, &m, setup, cfg, 1);
  EXPECT_LE(warm.last_epoch_loss, m.first_epoch_loss);
}

TEST(MStep, DeterministicForSameMasks) {
  const auto ds = tiny_dataset(8);
  const auto setup = tiny_setup();
  const EmConfig cfg;
  const auto masks = init_masks(ds);
  const auto a = m_step(masks, ds, ScaleId::coarse, nullptr, setup, cfg, 2);
  const auto b = m_step(masks, ds, ScaleId::coarse, nullptr, setup, cfg, 2);
  EXPECT_EQ(a.final, b.final);
  EXPECT_EQ(a.mid, b.mid);
}

TEST(RunEm, HistoryAndRetention) {
  const auto ds = tiny_dataset(9);
  EmConfig cfg;
  cfg.max_iters = 3;
  cfg.change_tol = 0.0;
  const auto r = run_em(ds, cfg, tiny_setup());
  EXPECT_EQ(r.history.size(), 3u);
  EXPECT_EQ(r.mask_history.size(), 3u);
  for (std::size_t i = 0; i < r.masks.size(); ++i) {
    const auto valid = ds.bags[i].fine.valid_count();
    EXPECT_GE(r.masks[i].count(), static_cast<std::size_t>(std::floor((1.0 - cfg.p1) * valid)));
  }
  EXPECT_EQ(r.fine.mid.tag, classifier::CheckpointTag::mid);
  EXPECT_EQ(r.fine.final.tag, classifier::CheckpointTag::final);
}

TEST(RunEm, RejectsBadConfig) {
  EmConfig cfg;
  cfg.p1 = 1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg = {};
  cfg.sigma = -1.0;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Heatmap, PgmHeaders) {
  const auto dir = std::filesystem::temp_directory_path() / "emmil_pgm_test";
  std::filesystem::create_directories(dir);
  write_value_pgm(dir / "v.pgm", grid_of(2, 3, {0.0, 0.5, 1.0, 0.25, 0.75, 0.1}));
  write_mask_pgm(dir / "m.pgm", HiddenMask{"x", 2, 3, {1, 0, 1, 0, 0, 1}});
  std::ifstream v(dir / "v.pgm"), m(dir / "m.pgm");
  std::string magic;
  int w = 0, h = 0, maxv = 0, first = -1, second = -1;
  v >> magic >> w >> h >> maxv >> first >> second;
  EXPECT_EQ(magic, "P2");
  EXPECT_EQ(w, 3);
  EXPECT_EQ(h, 2);
  EXPECT_EQ(maxv, 255);
  EXPECT_EQ(first, 0);
  EXPECT_EQ(second, 128);
  m >> magic >> w >> h >> maxv >> first;
  EXPECT_EQ(first, 255);
  std::filesystem::remove_all(dir);
}

}  // namespace
