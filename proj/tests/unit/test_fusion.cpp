#include <gtest/gtest.h>

#include <cmath>

#include "emmil/common.hpp"
#include "emmil/fusion.hpp"

namespace {

using namespace emmil;
using namespace emmil::fusion;
using em::ProbMap;
using patchio::ScaleId;

ProbMap map_of(ScaleId scale, int num_classes, std::vector<std::vector<double>> cells) {
  ProbMap m;
  m.image_id = "img";
  m.scale = scale;
  m.num_classes = num_classes;
  m.geometry = {scale == ScaleId::fine ? 1 : 2, 32, 32, 1, static_cast<int>(cells.size())};
  for (const auto& c : cells) m.probs.insert(m.probs.end(), c.begin(), c.end());
  m.valid.assign(cells.size(), 1);
  return m;
}

ModelMaps same_maps(const ProbMap& fine, const ProbMap& coarse) { return {fine, fine, coarse, coarse}; }

TEST(Histogram, NormalizedBlocks) {
  const auto fine = map_of(ScaleId::fine, 2, {{0.6, 0.4}, {0.2, 0.8}});
  const auto h = image_histogram(same_maps(fine, fine), std::span<const std::uint8_t>{},
                                 std::span<const std::uint8_t>{}, true);
  ASSERT_EQ(h.values.size(), 8u);
  for (int b = 0; b < 4; ++b) {
    EXPECT_NEAR(h.values[static_cast<std::size_t>(2 * b)], 0.4, 1e-15);
    EXPECT_NEAR(h.values[static_cast<std::size_t>(2 * b + 1)], 0.6, 1e-15);
  }
}

TEST(Histogram, UniformPredictionsGiveUniformBlocks) {
  const auto m = map_of(ScaleId::fine, 3, {{1. / 3, 1. / 3, 1. / 3}, {1. / 3, 1. / 3, 1. / 3}});
  const auto h = image_histogram(same_maps(m, m), std::span<const std::uint8_t>{}, std::span<const std::uint8_t>{}, true);
  EXPECT_EQ(h.values.size(), 12u);
  for (double v : h.values) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Histogram, SubsetAndSumMode) {
  const auto fine = map_of(ScaleId::fine, 2, {{0.6, 0.4}, {0.2, 0.8}, {1.0, 0.0}});
  const auto coarse = map_of(ScaleId::coarse, 2, {{0.5, 0.5}});
  const std::vector<std::uint8_t> fi{1, 0, 1}, ci{1};
  const auto h = image_histogram(same_maps(fine, coarse), fi, ci, false);
  EXPECT_NEAR(h.values[0], 1.6, 1e-15);
  EXPECT_NEAR(h.values[1], 0.4, 1e-15);
  EXPECT_NEAR(h.values[4], 0.5, 1e-15);
  const std::vector<std::uint8_t> none{0, 0, 0};
  EXPECT_THROW(image_histogram(same_maps(fine, coarse), none, ci, true), std::invalid_argument);
}

TEST(FitFusion, OneHotHistogramsAreSeparable) {
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (int i = 0; i < 30; ++i) {
    const int k = i % 3;
    std::vector<double> h(12, 0.0);
    for (int b = 0; b < 4; ++b) h[static_cast<std::size_t>(3 * b + k)] = 1.0;
    x.push_back(h);
    y.push_back(k);
  }
  const auto m = fit_fusion(x, y, 3, 1e-3, 1);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(predict_fusion(m, x[i]).label, y[i]);
  EXPECT_LT(m.final_grad_norm, 1e-6);
}

TEST(FitFusion, HeavyRegularizationGivesUniform) {
  Rng rng(3);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (int i = 0; i < 20; ++i) {
    std::vector<double> h(8);
    for (auto& v : h) v = rng.uniform();
    x.push_back(h);
    y.push_back(i % 2);
  }
  const auto m = fit_fusion(x, y, 2, 1e8, 1);
  for (double w : m.weights) EXPECT_LT(std::abs(w), 1e-6);
  const auto p = predict_fusion(m, x[0]);
  EXPECT_NEAR(p.probs[0], 0.5, 1e-6);
}

TEST(FitFusion, RequiresEveryClass) {
  const std::vector<std::vector<double>> x{{0.1, 0.9}, {0.2, 0.8}};
  const std::vector<int> y{0, 0};
  EXPECT_THROW(fit_fusion(x, y, 2, 1e-3, 1), std::exception);
}

FusionModel toy_model() {
  FusionModel m;
  m.num_classes = 2;
  m.input_dim = 8;
  m.mean.assign(8, 0.0);
  m.stddev.assign(8, 1.0);
  m.weights.assign(18, 0.0);
  return m;
}

TEST(PredictFusion, ZeroWeightsTieToFirstClass) {
  const auto p = predict_fusion(toy_model(), std::vector<double>(8, 0.3));
  EXPECT_EQ(p.label, 0);
  EXPECT_DOUBLE_EQ(p.probs[0], 0.5);
  EXPECT_DOUBLE_EQ(p.probs[0] + p.probs[1], 1.0);
}

TEST(PredictFusion, HandSoftmax) {
  auto m = toy_model();
  m.mean[0] = 0.5;
  m.stddev[0] = 0.25;
  m.weights[0] = 2.0;   // class 0, input 0
  m.weights[8] = -1.0;  // class 0 bias
  m.weights[9 + 1] = 3.0;
  const std::vector<double> x{1.0, 0.2, 0, 0, 0, 0, 0, 0};
  // s0 = 2 * (1 - 0.5) / 0.25 - 1 = 3; s1 = 3 * 0.2 = 0.6.
  const double p0 = 1.0 / (1.0 + std::exp(0.6 - 3.0));
  const auto p = predict_fusion(m, x);
  EXPECT_NEAR(p.probs[0], p0, 1e-12);
  EXPECT_EQ(p.label, 0);
}

TEST(FusionModelJson, RoundTrip) {
  auto m = toy_model();
  m.weights[3] = 0.1 + 0.2;
  m.l2 = 1e-3;
  const auto back = fusion_model_from_json(to_json(m));
  EXPECT_EQ(back.weights, m.weights);
  EXPECT_EQ(back.mean, m.mean);
  EXPECT_EQ(back.stddev, m.stddev);
  EXPECT_EQ(back.num_classes, 2);
}

const std::vector<std::vector<double>> kThree{{0.9, 0.1}, {0.2, 0.8}, {0.2, 0.8}};

TEST(Vote, MeanThenArgmax) {
  const auto m = map_of(ScaleId::fine, 2, kThree);
  const auto mean = mean_probabilities(m);
  EXPECT_NEAR(mean[0], 1.3 / 3.0, 1e-15);
  EXPECT_NEAR(mean[1], 1.7 / 3.0, 1e-15);
  EXPECT_EQ(vote_predict(m), 1);
  EXPECT_EQ(vote_predict(map_of(ScaleId::fine, 2, {{0.3, 0.7}})), 1);
  EXPECT_EQ(vote_predict(map_of(ScaleId::fine, 2, {{0.5, 0.5}, {0.5, 0.5}})), 0);
}

TEST(MaxPool, DiffersFromVoting) {
  const auto m = map_of(ScaleId::fine, 2, kThree);
  EXPECT_EQ(max_predict(m), 0);
  EXPECT_NE(max_predict(m), vote_predict(m));
  EXPECT_EQ(max_predict(map_of(ScaleId::fine, 3, {{0, 0, 1}})), 2);
  EXPECT_EQ(max_predict(map_of(ScaleId::fine, 2, {{0.5, 0.5}, {0.5, 0.5}})), 0);
  const auto mx = max_probabilities(m);
  EXPECT_DOUBLE_EQ(mx[0], 0.9);
  EXPECT_DOUBLE_EQ(mx[1], 0.8);
}

TEST(PNorm, HandValues) {
  const std::vector<std::vector<double>> one{{-2.0, 3.0}};
  EXPECT_DOUBLE_EQ(pnorm_pool(one, 3.0)[0], 2.0);
  const std::vector<std::vector<double>> two{{1.0}, {2.0}};
  EXPECT_NEAR(pnorm_pool(two, 3.0)[0], std::cbrt(4.5), 1e-12);
  EXPECT_NEAR(pnorm_pool(two, 3.0)[0], 1.6510, 1e-4);
  const std::vector<std::vector<double>> signs{{-1.0}, {3.0}};
  EXPECT_DOUBLE_EQ(pnorm_pool(signs, 1.0)[0], 2.0);
}

TEST(FiveCrop, OffsetsFor256And128) {
  const auto o = five_crop_offsets(256, 256, 128);
  const std::array<CropOffset, 5> want{{{0, 0}, {0, 128}, {128, 0}, {128, 128}, {64, 64}}};
  EXPECT_EQ(o, want);
  EXPECT_THROW(five_crop_offsets(100, 100, 128), std::invalid_argument);
}

TEST(FiveCrop, UniformImageEqualsSingleCrop) {
  classifier::FeatureConfig fc;
  fc.input_size = 16;
  fc.block = 4;
  const auto model = classifier::init_model({classifier::ArchKind::mlp, 6}, fc,
                                            classifier::NormStats::identity(fc.dimension()), 3, 5);
  RgbImage img(48, 48);
  for (int y = 0; y < 48; ++y)
    for (int x = 0; x < 48; ++x) img.at(x, y, 0) = 90, img.at(x, y, 1) = 40, img.at(x, y, 2) = 160;
  const auto five = five_crop_predict(model, img, 16);
  const auto one = classifier::predict_proba(model, img.crop(0, 0, 16, 16));
  double sum = 0.0;
  for (int k = 0; k < 3; ++k) {
    EXPECT_NEAR(five[static_cast<std::size_t>(k)], one[static_cast<std::size_t>(k)], 1e-12);
    sum += five[static_cast<std::size_t>(k)];
  }
  EXPECT_NEAR(sum, 1.0, 1e-12);
}

}  // namespace
