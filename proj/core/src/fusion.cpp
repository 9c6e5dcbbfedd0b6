#include "emmil/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "emmil/common.hpp"
#include "emmil/patchio.hpp"
#include "json.hpp"

namespace emmil::fusion {

ModelMaps model_maps(const em::EmResult& models, const BagEntry& bag) {
  return {em::compute_prob_map(models.fine.mid, bag.fine), em::compute_prob_map(models.fine.final, bag.fine),
          em::compute_prob_map(models.coarse.mid, bag.coarse), em::compute_prob_map(models.coarse.final, bag.coarse)};
}

FusionHistogram image_histogram(const ModelMaps& maps, std::span<const std::uint8_t> fine_include,
                                std::span<const std::uint8_t> coarse_include, bool normalize) {
  const int C = maps[0].num_classes;
  FusionHistogram h;
  h.image_id = maps[0].image_id;
  h.num_classes = C;
  h.normalized = normalize;
  h.values.assign(static_cast<std::size_t>(4 * C), 0.0);
  for (std::size_t b = 0; b < 4; ++b) {
    const auto& map = maps[b];
    if (map.num_classes != C) throw std::invalid_argument("class count differs between models");
    const auto include = map.scale == patchio::ScaleId::fine ? fine_include : coarse_include;
    if (!include.empty() && include.size() != map.valid.size()) {
      throw std::invalid_argument("subset flags do not match the grid");
    }
    std::size_t used = 0;
    double* block = h.values.data() + b * static_cast<std::size_t>(C);
    for (std::size_t j = 0; j < map.valid.size(); ++j) {
      if (!map.valid[j] || (!include.empty() && !include[j])) continue;
      const auto v = map.at(j);
      for (int k = 0; k < C; ++k) block[k] += v[static_cast<std::size_t>(k)];
      ++used;
    }
    if (used == 0) throw std::invalid_argument("empty patch subset for image " + map.image_id);
    if (normalize)
      for (int k = 0; k < C; ++k) block[k] /= static_cast<double>(used);
  }
  return h;
}

FusionHistogram image_histogram(const ModelMaps& maps, const BagEntry& bag, PatchSubset subset, bool normalize) {
  if (subset == PatchSubset::all)
    return image_histogram(maps, std::span<const std::uint8_t>{}, std::span<const std::uint8_t>{}, normalize);
  return image_histogram(maps, bag.fine_holdout, bag.coarse_holdout, normalize);
}

// ---------------------------------------------------------------------------

namespace {

struct Design {
  std::size_t n, d, c;
  std::vector<double> z;  // n rows of (d + 1), bias column last
};

Design standardize(const FusionModel& model, std::span<const std::vector<double>> inputs) {
  Design ds{inputs.size(), static_cast<std::size_t>(model.input_dim), static_cast<std::size_t>(model.num_classes), {}};
  ds.z.resize(ds.n * (ds.d + 1));
  for (std::size_t i = 0; i < ds.n; ++i) {
    if (inputs[i].size() != ds.d) throw std::invalid_argument("fusion input dimension mismatch");
    double* row = &ds.z[i * (ds.d + 1)];
    for (std::size_t j = 0; j < ds.d; ++j) row[j] = (inputs[i][j] - model.mean[j]) / model.stddev[j];
    row[ds.d] = 1.0;
  }
  return ds;
}

// Mean cross-entropy + (l2/2)|W|^2 and its gradient.
double objective(const Design& ds, std::span<const int> labels, const std::vector<double>& w, double l2,
                 std::vector<double>* grad) {
  const std::size_t cols = ds.d + 1;
  if (grad) grad->assign(w.size(), 0.0);
  std::vector<double> s(ds.c);
  double total = 0.0;
  for (std::size_t i = 0; i < ds.n; ++i) {
    const double* x = &ds.z[i * cols];
    for (std::size_t k = 0; k < ds.c; ++k) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += w[k * cols + j] * x[j];
      s[k] = acc;
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double v : s) z += std::exp(v - mx);
    const auto y = static_cast<std::size_t>(labels[i]);
    total += std::log(z) + mx - s[y];
    if (grad) {
      for (std::size_t k = 0; k < ds.c; ++k) {
        const double coef = (std::exp(s[k] - mx) / z - (k == y ? 1.0 : 0.0)) / static_cast<double>(ds.n);
        for (std::size_t j = 0; j < cols; ++j) (*grad)[k * cols + j] += coef * x[j];
      }
    }
  }
  double sq = 0.0;
  for (std::size_t q = 0; q < w.size(); ++q) {
    sq += w[q] * w[q];
    if (grad) (*grad)[q] += l2 * w[q];
  }
  return total / static_cast<double>(ds.n) + 0.5 * l2 * sq;
}

// Largest eigenvalue of (1/n) Z^T Z by power iteration.
double gram_max_eigenvalue(const Design& ds) {
  const std::size_t cols = ds.d + 1;
  std::vector<double> v(cols, 1.0 / std::sqrt(static_cast<double>(cols)));
  std::vector<double> zv(ds.n), next(cols);
  double lambda = 0.0;
  for (int it = 0; it < 100; ++it) {
    for (std::size_t i = 0; i < ds.n; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += ds.z[i * cols + j] * v[j];
      zv[i] = acc;
    }
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t i = 0; i < ds.n; ++i)
      for (std::size_t j = 0; j < cols; ++j) next[j] += ds.z[i * cols + j] * zv[i];
    double norm = 0.0;
    for (double& x : next) {
      x /= static_cast<double>(ds.n);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) return 0.0;
    lambda = norm;
    for (std::size_t j = 0; j < cols; ++j) v[j] = next[j] / norm;
  }
  return lambda;
}

double inf_norm(const std::vector<double>& g) {
  double m = 0.0;
  for (double v : g) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace

FusionModel fit_fusion(std::span<const std::vector<double>> inputs, std::span<const int> labels, int num_classes,
                       double l2, std::uint64_t seed) {
  if (inputs.empty() || inputs.size() != labels.size()) throw std::invalid_argument("need one label per input");
  if (num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  if (!(l2 >= 0.0)) throw std::invalid_argument("l2 must be non-negative");
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  const auto present = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c > 0; });
  if (present < 2) throw std::invalid_argument("degenerate fusion input: a single class");
  if (present < num_classes) throw std::invalid_argument("every class needs at least one fusion example");

  FusionModel model;
  model.num_classes = num_classes;
  model.input_dim = static_cast<int>(inputs[0].size());
  model.l2 = l2;
  const auto d = static_cast<std::size_t>(model.input_dim);
  const auto n = static_cast<double>(inputs.size());
  model.mean.assign(d, 0.0);
  model.stddev.assign(d, 0.0);
  for (const auto& x : inputs) {
    if (x.size() != d) throw std::invalid_argument("fusion input dimension mismatch");
    for (std::size_t j = 0; j < d; ++j) model.mean[j] += x[j];
  }
  for (double& m : model.mean) m /= n;
  for (const auto& x : inputs)
    for (std::size_t j = 0; j < d; ++j) model.stddev[j] += (x[j] - model.mean[j]) * (x[j] - model.mean[j]);
  for (double& s : model.stddev) {
    s = std::sqrt(s / n);
    if (s < 1e-9) s = 1.0;
  }

  const Design ds = standardize(model, inputs);
  const std::size_t size = static_cast<std::size_t>(num_classes) * (d + 1);
  std::vector<double> w(size);
  Rng rng(seed);
  for (double& v : w) v = rng.uniform(-0.01, 0.01);

  // Cross-entropy curvature is bounded by half the Gram matrix's top eigenvalue.
  const double lipschitz = 0.5 * gram_max_eigenvalue(ds) * 1.05 + l2;
  const double step = 1.0 / lipschitz;

  std::vector<double> y = w, prev = w, grad, grad_w;
  double t = 1.0;
  double obj = objective(ds, labels, w, l2, &grad_w);
  int it = 0;
  while (it < 10000 && inf_norm(grad_w) >= 1e-6) {
    objective(ds, labels, y, l2, &grad);
    prev = w;
    for (std::size_t q = 0; q < size; ++q) w[q] = y[q] - step * grad[q];
    // Restart momentum when the step opposes the gradient direction.
    double dir = 0.0;
    for (std::size_t q = 0; q < size; ++q) dir += grad[q] * (w[q] - prev[q]);
    double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    if (dir > 0.0) {
      t = 1.0;
      t_next = 1.0;
    }
    const double beta = (t - 1.0) / t_next;
    for (std::size_t q = 0; q < size; ++q) y[q] = w[q] + beta * (w[q] - prev[q]);
    t = t_next;
    obj = objective(ds, labels, w, l2, &grad_w);
    ++it;
  }
  model.weights = std::move(w);
  model.iterations = it;
  model.final_loss = obj;
  model.final_grad_norm = inf_norm(grad_w);
  return model;
}

double fusion_loss(const FusionModel& model, std::span<const std::vector<double>> inputs, std::span<const int> labels) {
  return objective(standardize(model, inputs), labels, model.weights, model.l2, nullptr);
}

Prediction predict_fusion(const FusionModel& model, std::span<const double> input) {
  const auto d = static_cast<std::size_t>(model.input_dim);
  if (input.size() != d) throw std::invalid_argument("fusion input dimension mismatch");
  Prediction p;
  p.probs.assign(static_cast<std::size_t>(model.num_classes), 0.0);
  for (std::size_t k = 0; k < p.probs.size(); ++k) {
    const double* w = &model.weights[k * (d + 1)];
    double s = w[d];
    for (std::size_t j = 0; j < d; ++j) s += w[j] * (input[j] - model.mean[j]) / model.stddev[j];
    p.probs[k] = s;
  }
  const double mx = *std::max_element(p.probs.begin(), p.probs.end());
  double z = 0.0;
  for (double& v : p.probs) {
    v = std::exp(v - mx);
    z += v;
  }
  for (double& v : p.probs) v /= z;
  p.label = static_cast<int>(std::max_element(p.probs.begin(), p.probs.end()) - p.probs.begin());
  return p;
}

// ---------------------------------------------------------------------------

std::vector<double> mean_probabilities(const em::ProbMap& map) {
  std::vector<double> mean(static_cast<std::size_t>(map.num_classes), 0.0);
  std::size_t n = 0;
  for (std::size_t j = 0; j < map.valid.size(); ++j) {
    if (!map.valid[j]) continue;
    const auto v = map.at(j);
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += v[k];
    ++n;
  }
  if (n == 0) throw std::invalid_argument("empty probability map for " + map.image_id);
  for (double& v : mean) v /= static_cast<double>(n);
  return mean;
}

int vote_predict(const em::ProbMap& map) {
  const auto mean = mean_probabilities(map);
  return static_cast<int>(std::max_element(mean.begin(), mean.end()) - mean.begin());
}

std::vector<double> max_probabilities(const em::ProbMap& map) {
  std::vector<double> best(static_cast<std::size_t>(map.num_classes), 0.0);
  bool any = false;
  for (std::size_t j = 0; j < map.valid.size(); ++j) {
    if (!map.valid[j]) continue;
    any = true;
    const auto v = map.at(j);
    for (std::size_t k = 0; k < best.size(); ++k) best[k] = std::max(best[k], v[k]);
  }
  if (!any) throw std::invalid_argument("empty probability map for " + map.image_id);
  return best;
}

int max_predict(const em::ProbMap& map) {
  // Row-major cell order then class order; strict comparison keeps the first.
  double best = -1.0;
  int label = -1;
  for (std::size_t j = 0; j < map.valid.size(); ++j) {
    if (!map.valid[j]) continue;
    const auto v = map.at(j);
    for (std::size_t k = 0; k < v.size(); ++k) {
      if (v[k] > best) {
        best = v[k];
        label = static_cast<int>(k);
      }
    }
  }
  if (label < 0) throw std::invalid_argument("empty probability map for " + map.image_id);
  return label;
}

std::vector<double> pnorm_pool(std::span<const std::vector<double>> features, double p) {
  if (features.empty()) throw std::invalid_argument("p-norm pooling of an empty set");
  if (!(p >= 1.0)) throw std::invalid_argument("p must be >= 1");
  const std::size_t d = features[0].size();
  std::vector<double> acc(d, 0.0);
  for (const auto& f : features) {
    if (f.size() != d) throw std::invalid_argument("feature dimension mismatch");
    for (std::size_t j = 0; j < d; ++j) acc[j] += std::pow(std::abs(f[j]), p);
  }
  for (double& v : acc) v = std::pow(v / static_cast<double>(features.size()), 1.0 / p);
  return acc;
}

std::vector<double> pooled_hidden_features(const classifier::Model& model, const patchio::PatchGrid& grid,
                                           std::span<const std::uint8_t> include, double p) {
  std::vector<std::size_t> cells;
  for (std::size_t j = 0; j < grid.patches.size(); ++j) {
    if (grid.patches[j].valid && (include.empty() || include[j])) cells.push_back(j);
  }
  std::vector<std::vector<double>> feats(cells.size());
  parallel_for(cells.size(), [&](std::size_t i) {
    feats[i] = classifier::hidden_features(model, grid.patches[cells[i]].pixels);
  });
  return pnorm_pool(feats, p);
}

std::array<CropOffset, 5> five_crop_offsets(int width, int height, int crop_size) {
  if (crop_size < 1 || crop_size > width || crop_size > height) throw std::invalid_argument("crop too large");
  const int right = width - crop_size;
  const int bottom = height - crop_size;
  return {CropOffset{0, 0}, CropOffset{0, right}, CropOffset{bottom, 0}, CropOffset{bottom, right},
          CropOffset{bottom / 2, right / 2}};
}

std::vector<double> five_crop_predict(const classifier::Model& model, const RgbImage& image, int crop_size) {
  const auto offsets = five_crop_offsets(image.width, image.height, crop_size);
  std::vector<double> mean(static_cast<std::size_t>(model.num_classes), 0.0);
  for (const auto& o : offsets) {
    const auto p = classifier::predict_proba(model, image.crop(o.col, o.row, crop_size, crop_size));
    for (std::size_t k = 0; k < mean.size(); ++k) mean[k] += p[k];
  }
  for (double& v : mean) v /= 5.0;
  return mean;
}

classifier::Model fit_image_model(std::span<const RgbImage> images, std::span<const int> labels, int num_classes,
                                  int crop_size, const classifier::TrainConfig& train,
                                  const classifier::Architecture& arch, int crops_per_epoch) {
  if (images.size() != labels.size() || images.empty()) throw std::invalid_argument("need one label per image");
  if (crop_size % 8 != 0) throw std::invalid_argument("image crop size must be a multiple of 8");
  if (crops_per_epoch < 1) throw std::invalid_argument("crops_per_epoch must be >= 1");
  std::vector<classifier::LabeledPatch> items;
  for (int r = 0; r < crops_per_epoch; ++r)
    for (std::size_t i = 0; i < images.size(); ++i) items.push_back({&images[i], labels[i]});
  classifier::FeatureConfig feat{classifier::FeatureKind::block_stats, crop_size / 8, crop_size};
  classifier::Augmenter augmenter = [crop_size](const RgbImage& px, std::uint64_t seed) {
    const RgbImage crop = patchio::random_subcrop(px, crop_size, seed);
    return patchio::dihedral(crop, static_cast<int>(mix64(seed ^ 0x5A5A) % 8));
  };
  auto fitted = classifier::fit(items, train, feat, arch, num_classes, nullptr, augmenter);
  return std::move(fitted.snapshots.back());
}

// ---------------------------------------------------------------------------

std::string to_json(const FusionModel& model) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["kind"] = "multinomial_logistic_regression";
  j["C"] = model.num_classes;
  j["input_dim"] = model.input_dim;
  j["l2"] = model.l2;
  j["mean"] = model.mean;
  j["std"] = model.stddev;
  j["weights"] = model.weights;
  j["iterations"] = model.iterations;
  j["final_loss"] = model.final_loss;
  j["final_grad_norm"] = model.final_grad_norm;
  return j.dump();
}

FusionModel fusion_model_from_json(const std::string& text) {
  FusionModel m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw DataError("unsupported fusion model version");
    m.num_classes = j.at("C").get<int>();
    m.input_dim = j.at("input_dim").get<int>();
    m.l2 = j.at("l2").get<double>();
    m.mean = j.at("mean").get<std::vector<double>>();
    m.stddev = j.at("std").get<std::vector<double>>();
    m.weights = j.at("weights").get<std::vector<double>>();
    m.iterations = j.value("iterations", 0);
    m.final_loss = j.value("final_loss", 0.0);
    m.final_grad_norm = j.value("final_grad_norm", 0.0);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed fusion model JSON: " + std::string(e.what()));
  }
  const auto d = static_cast<std::size_t>(m.input_dim);
  if (m.mean.size() != d || m.stddev.size() != d ||
      m.weights.size() != static_cast<std::size_t>(m.num_classes) * (d + 1)) {
    throw DataError("fusion model sizes are inconsistent");
  }
  return m;
}

void write_histograms_csv(const std::filesystem::path& path, std::span<const FusionHistogram> histograms,
                          std::span<const int> labels) {
  if (histograms.size() != labels.size()) throw std::invalid_argument("one label per histogram required");
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  const std::size_t width = histograms.empty() ? 0 : histograms[0].values.size();
  out << "image_id,label";
  for (std::size_t j = 0; j < width; ++j) out << ",h" << j;
  out << '\n';
  char buf[40];
  for (std::size_t i = 0; i < histograms.size(); ++i) {
    out << histograms[i].image_id << ',' << labels[i];
    for (double v : histograms[i].values) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace emmil::fusion
