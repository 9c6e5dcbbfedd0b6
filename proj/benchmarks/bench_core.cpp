#include <benchmark/benchmark.h>

#include "emmil/classifier.hpp"
#include "emmil/common.hpp"
#include "emmil/em.hpp"

namespace {

using namespace emmil;

em::ValueGrid random_grid(int side) {
  Rng rng(1);
  em::ValueGrid g;
  g.rows = g.cols = side;
  g.values.resize(g.size());
  g.valid.resize(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.valid[i] = rng.uniform() < 0.8;
    g.values[i] = rng.uniform();
  }
  return g;
}

RgbImage random_patch(int side, std::uint64_t seed) {
  Rng rng(seed);
  RgbImage img(side, side);
  for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

void BM_GaussianSmooth(benchmark::State& state) {
  const auto g = random_grid(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(em::gaussian_smooth(g, 1.0));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.size()));
}
BENCHMARK(BM_GaussianSmooth)->Arg(16)->Arg(64)->Arg(256);

void BM_ExtractFeatures(benchmark::State& state) {
  classifier::FeatureConfig fc;
  const auto img = random_patch(fc.input_size, 2);
  for (auto _ : state) benchmark::DoNotOptimize(classifier::extract_features(img, fc));
}
BENCHMARK(BM_ExtractFeatures);

void BM_GradientStep(benchmark::State& state) {
  classifier::FeatureConfig fc;
  const auto m = classifier::init_model({classifier::ArchKind::mlp, 32}, fc,
                                        classifier::NormStats::identity(fc.dimension()), 3, 3);
  Rng rng(4);
  std::vector<classifier::Sample> batch(32);
  for (auto& s : batch) {
    s.x.resize(static_cast<std::size_t>(fc.dimension()));
    for (auto& v : s.x) v = rng.normal();
    s.label = static_cast<int>(rng.below(3));
  }
  for (auto _ : state) benchmark::DoNotOptimize(classifier::gradient(m, batch, 1e-4));
}
BENCHMARK(BM_GradientStep);

}  // namespace
BENCHMARK_MAIN();
