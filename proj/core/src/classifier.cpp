#include "emmil/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "emmil/common.hpp"
#include "emmil/patchio.hpp"
#include "json.hpp"

namespace emmil::classifier {

void FeatureConfig::validate() const {
  if (input_size < 1) throw std::invalid_argument("feature input size must be positive");
  if (kind == FeatureKind::block_stats) {
    if (block < 1 || input_size % block != 0) {
      throw std::invalid_argument("block_stats block must divide the input size");
    }
  }
}

int FeatureConfig::dimension() const {
  if (kind == FeatureKind::raw_pixels) return input_size * input_size * 3;
  const int cells = input_size / block;
  return cells * cells * 6;
}

std::vector<double> extract_features(const RgbImage& pixels, const FeatureConfig& config) {
  if (pixels.width != config.input_size || pixels.height != config.input_size) {
    throw std::invalid_argument("patch dimensions do not match the feature configuration");
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(config.dimension()));
  if (config.kind == FeatureKind::raw_pixels) {
    for (std::uint8_t v : pixels.data) out.push_back(v / 255.0);
    return out;
  }
  const int cells = config.input_size / config.block;
  const double n = static_cast<double>(config.block) * config.block;
  for (int cy = 0; cy < cells; ++cy) {
    for (int cx = 0; cx < cells; ++cx) {
      // Two passes so a constant cell has exactly zero spread.
      double mean[3] = {0, 0, 0};
      double sq[3] = {0, 0, 0};
      for (int y = cy * config.block; y < (cy + 1) * config.block; ++y)
        for (int x = cx * config.block; x < (cx + 1) * config.block; ++x)
          for (int c = 0; c < 3; ++c) mean[c] += pixels.at(x, y, c) / 255.0;
      for (double& m : mean) m /= n;
      for (int y = cy * config.block; y < (cy + 1) * config.block; ++y)
        for (int x = cx * config.block; x < (cx + 1) * config.block; ++x)
          for (int c = 0; c < 3; ++c) {
            const double d = pixels.at(x, y, c) / 255.0 - mean[c];
            sq[c] += d * d;
          }
      double stds[3];
      for (int c = 0; c < 3; ++c) {
        out.push_back(mean[c]);
        stds[c] = std::sqrt(sq[c] / n);
      }
      out.insert(out.end(), stds, stds + 3);
    }
  }
  return out;
}

NormStats NormStats::identity(int dimension) {
  return {std::vector<double>(static_cast<std::size_t>(dimension), 0.0),
          std::vector<double>(static_cast<std::size_t>(dimension), 1.0)};
}

void NormStats::apply(std::span<double> x) const {
  if (x.size() != mean.size()) throw std::invalid_argument("feature dimension mismatch");
  for (std::size_t d = 0; d < x.size(); ++d) x[d] = (x[d] - mean[d]) / stddev[d];
}

std::string to_string(CheckpointTag tag) { return tag == CheckpointTag::mid ? "mid" : "final"; }

std::size_t parameter_count(const Architecture& arch, int input_dim, int num_classes) {
  const auto d = static_cast<std::size_t>(input_dim);
  const auto c = static_cast<std::size_t>(num_classes);
  if (arch.kind == ArchKind::softmax) return c * d + c;
  const auto h = static_cast<std::size_t>(arch.hidden_units);
  return h * d + h + c * h + c;
}

Model zero_model(const Architecture& arch, const FeatureConfig& features, int num_classes) {
  features.validate();
  if (num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  if (arch.kind == ArchKind::mlp && arch.hidden_units < 1) throw std::invalid_argument("mlp needs hidden units");
  Model m;
  m.arch = arch;
  m.features = features;
  m.norm = NormStats::identity(features.dimension());
  m.num_classes = num_classes;
  m.theta.assign(parameter_count(arch, features.dimension(), num_classes), 0.0);
  return m;
}

Model init_model(const Architecture& arch, const FeatureConfig& features, const NormStats& norm, int num_classes,
                 std::uint64_t seed) {
  Model m = zero_model(arch, features, num_classes);
  m.norm = norm;
  Rng rng(seed);
  const int d = features.dimension();
  auto fill = [&](std::size_t offset, int fan_out, int fan_in) {
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < static_cast<std::size_t>(fan_out) * fan_in; ++i) {
      m.theta[offset + i] = rng.uniform(-limit, limit);
    }
  };
  if (arch.kind == ArchKind::softmax) {
    fill(0, num_classes, d);
  } else {
    const int h = arch.hidden_units;
    fill(0, h, d);
    fill(static_cast<std::size_t>(h) * d + h, num_classes, h);
  }
  return m;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (l2 < 0.0) throw std::invalid_argument("l2 must be non-negative");
  if (!(final_lr_scale > 0.0 && final_lr_scale <= 1.0)) throw std::invalid_argument("final_lr_scale must be in (0, 1]");
  if (snapshot_points.empty()) throw std::invalid_argument("need at least one snapshot point");
  for (std::size_t i = 0; i < snapshot_points.size(); ++i) {
    const double p = snapshot_points[i];
    if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("snapshot points must be in (0, 1]");
    if (i > 0 && p <= snapshot_points[i - 1]) throw std::invalid_argument("snapshot points must increase");
  }
  if (snapshot_points.back() != 1.0) throw std::invalid_argument("last snapshot point must be 1.0");
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

struct Layout {
  std::size_t d, h, c;
  // softmax: W at 0, b at c*d. mlp: W1 at 0, b1 at h*d, W2 at h*d+h, b2 after.
  std::size_t w2() const { return h * d + h; }
  std::size_t b2() const { return h * d + h + c * h; }
};

Layout layout_of(const Model& m) {
  return {static_cast<std::size_t>(m.input_dim()),
          static_cast<std::size_t>(m.arch.kind == ArchKind::mlp ? m.arch.hidden_units : 0),
          static_cast<std::size_t>(m.num_classes)};
}

struct Activations {
  std::vector<double> hidden;  // post-ReLU (mlp)
  std::vector<double> probs;
};

void softmax_inplace(std::vector<double>& s) {
  const double mx = *std::max_element(s.begin(), s.end());
  double total = 0.0;
  for (double& v : s) {
    v = std::exp(v - mx);
    total += v;
  }
  for (double& v : s) v /= total;
}

Activations forward(const Model& m, std::span<const double> x) {
  const Layout L = layout_of(m);
  if (x.size() != L.d) throw std::invalid_argument("input dimension mismatch");
  const double* th = m.theta.data();
  Activations a;
  a.probs.assign(L.c, 0.0);
  if (m.arch.kind == ArchKind::softmax) {
    for (std::size_t k = 0; k < L.c; ++k) {
      double s = th[L.c * L.d + k];
      const double* w = th + k * L.d;
      for (std::size_t j = 0; j < L.d; ++j) s += w[j] * x[j];
      a.probs[k] = s;
    }
  } else {
    a.hidden.assign(L.h, 0.0);
    for (std::size_t u = 0; u < L.h; ++u) {
      double z = th[L.h * L.d + u];
      const double* w = th + u * L.d;
      for (std::size_t j = 0; j < L.d; ++j) z += w[j] * x[j];
      a.hidden[u] = z > 0.0 ? z : 0.0;
    }
    for (std::size_t k = 0; k < L.c; ++k) {
      double s = th[L.b2() + k];
      const double* w = th + L.w2() + k * L.h;
      for (std::size_t u = 0; u < L.h; ++u) s += w[u] * a.hidden[u];
      a.probs[k] = s;
    }
  }
  softmax_inplace(a.probs);
  return a;
}

// Adds scale * d(cross-entropy)/d(theta) for one sample into g; returns the
// sample's cross-entropy. Every parameter receives exactly one addition.
double add_sample_gradient(const Model& m, const Sample& s, double scale, double* g) {
  const Layout L = layout_of(m);
  if (s.label < 0 || static_cast<std::size_t>(s.label) >= L.c) throw std::invalid_argument("label out of range");
  const Activations a = forward(m, s.x);
  const double ce = -std::log(std::max(a.probs[static_cast<std::size_t>(s.label)], 1e-300));
  std::vector<double> ds(a.probs);
  ds[static_cast<std::size_t>(s.label)] -= 1.0;
  for (double& v : ds) v *= scale;

  if (m.arch.kind == ArchKind::softmax) {
    for (std::size_t k = 0; k < L.c; ++k) {
      double* gw = g + k * L.d;
      for (std::size_t j = 0; j < L.d; ++j) gw[j] += ds[k] * s.x[j];
      g[L.c * L.d + k] += ds[k];
    }
    return ce;
  }

  const double* th = m.theta.data();
  std::vector<double> dz(L.h, 0.0);
  for (std::size_t k = 0; k < L.c; ++k) {
    double* gw = g + L.w2() + k * L.h;
    const double* w = th + L.w2() + k * L.h;
    for (std::size_t u = 0; u < L.h; ++u) {
      gw[u] += ds[k] * a.hidden[u];
      dz[u] += w[u] * ds[k];
    }
    g[L.b2() + k] += ds[k];
  }
  for (std::size_t u = 0; u < L.h; ++u) {
    const double du = a.hidden[u] > 0.0 ? dz[u] : 0.0;
    double* gw = g + u * L.d;
    for (std::size_t j = 0; j < L.d; ++j) gw[j] += du * s.x[j];
    g[L.h * L.d + u] += du;
  }
  return ce;
}

double l2_term(const Model& m, double l2) {
  if (l2 == 0.0) return 0.0;
  double sq = 0.0;
  for (double v : m.theta) sq += v * v;
  return 0.5 * l2 * sq;
}

// Objective and gradient over the samples in the given order. Per-sample
// gradients are reduced in list order, so the result does not depend on the
// worker count.
double objective(const Model& m, std::span<const Sample* const> batch, double l2, std::vector<double>* grad) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const double scale_n = 1.0 / static_cast<double>(batch.size());
  const std::size_t p = m.theta.size();
  std::vector<double> ce(batch.size(), 0.0);

  if (grad) grad->assign(p, 0.0);
  if (!grad) {
    parallel_for(batch.size(), [&](std::size_t i) {
      const auto& s = *batch[i];
      const auto a = forward(m, s.x);
      ce[i] = -std::log(std::max(a.probs[static_cast<std::size_t>(s.label)], 1e-300));
    });
  } else if (thread_count() <= 1 || batch.size() == 1) {
    for (std::size_t i = 0; i < batch.size(); ++i) {
      ce[i] = add_sample_gradient(m, *batch[i], batch[i]->weight * scale_n, grad->data());
    }
  } else {
    std::vector<std::vector<double>> parts(batch.size());
    parallel_for(batch.size(), [&](std::size_t i) {
      parts[i].assign(p, 0.0);
      ce[i] = add_sample_gradient(m, *batch[i], batch[i]->weight * scale_n, parts[i].data());
    });
    for (const auto& part : parts)
      for (std::size_t q = 0; q < p; ++q) (*grad)[q] += part[q];
  }

  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) total += batch[i]->weight * ce[i];
  total *= scale_n;
  if (grad && l2 != 0.0)
    for (std::size_t q = 0; q < p; ++q) (*grad)[q] += l2 * m.theta[q];
  return total + l2_term(m, l2);
}

std::vector<const Sample*> pointers(std::span<const Sample> batch) {
  std::vector<const Sample*> ptrs(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) ptrs[i] = &batch[i];
  return ptrs;
}

RgbImage input_view(const RgbImage& pixels, int input_size) {
  if (pixels.width == input_size && pixels.height == input_size) return pixels;
  if (pixels.width < input_size || pixels.height < input_size) {
    throw std::invalid_argument("patch smaller than model input");
  }
  return patchio::center_crop(pixels, input_size);
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<double> model_input(const Model& model, const RgbImage& pixels) {
  auto x = extract_features(input_view(pixels, model.features.input_size), model.features);
  model.norm.apply(x);
  return x;
}

std::vector<double> predict_proba_features(const Model& model, std::span<const double> x) {
  return forward(model, x).probs;
}

std::vector<double> predict_proba(const Model& model, const RgbImage& pixels) {
  if (pixels.width != model.features.input_size || pixels.height != model.features.input_size) {
    throw std::invalid_argument("patch dimensions do not match the model input");
  }
  return predict_proba_features(model, model_input(model, pixels));
}

double loss(const Model& model, std::span<const Sample> batch, double l2) {
  const auto ptrs = pointers(batch);
  return objective(model, ptrs, l2, nullptr);
}

std::vector<double> gradient(const Model& model, std::span<const Sample> batch, double l2) {
  const auto ptrs = pointers(batch);
  std::vector<double> g;
  objective(model, ptrs, l2, &g);
  return g;
}

double grad_check(const Model& model, std::span<const Sample> batch, double l2, double epsilon, std::uint64_t seed,
                  int coordinates) {
  if (!(epsilon >= 1e-7 && epsilon <= 1e-3)) throw std::invalid_argument("epsilon must be in [1e-7, 1e-3]");
  const auto analytic = gradient(model, batch, l2);
  std::vector<std::size_t> idx(model.theta.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(idx.begin(), idx.end());
  idx.resize(std::min(idx.size(), static_cast<std::size_t>(std::max(coordinates, 0))));

  Model probe = model;
  double worst = 0.0;
  for (std::size_t q : idx) {
    const double orig = probe.theta[q];
    probe.theta[q] = orig + epsilon;
    const double up = loss(probe, batch, l2);
    probe.theta[q] = orig - epsilon;
    const double down = loss(probe, batch, l2);
    probe.theta[q] = orig;
    const double numeric = (up - down) / (2.0 * epsilon);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[q])) {
      throw TrainingError("non-finite value in gradient check at parameter " + std::to_string(q));
    }
    const double err = std::abs(analytic[q] - numeric) /
                       std::max({std::abs(analytic[q]), std::abs(numeric), 1e-8});
    worst = std::max(worst, err);
  }
  return worst;
}

std::vector<double> hidden_features_from_input(const Model& model, std::span<const double> x) {
  if (model.arch.kind != ArchKind::mlp) throw std::invalid_argument("hidden features need an mlp model");
  return forward(model, x).hidden;
}

std::vector<double> hidden_features(const Model& model, const RgbImage& pixels) {
  return hidden_features_from_input(model, model_input(model, pixels));
}

// ---------------------------------------------------------------------------

FitResult fit(std::span<const LabeledPatch> patches, const TrainConfig& config, const FeatureConfig& features,
              const Architecture& arch, int num_classes, const Model* warm_start, const Augmenter& augment) {
  config.validate();
  if (patches.empty()) throw TrainingError("no training patches");

  Model model;
  if (warm_start) {
    model = *warm_start;
    model.tag = CheckpointTag::final;
  } else {
    features.validate();
    if (num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  }
  const FeatureConfig& feat = warm_start ? warm_start->features : features;
  const int classes = warm_start ? warm_start->num_classes : num_classes;

  std::vector<std::size_t> per_class(static_cast<std::size_t>(classes), 0);
  for (const auto& p : patches) {
    if (p.label < 0 || p.label >= classes) throw std::invalid_argument("label out of range");
    ++per_class[static_cast<std::size_t>(p.label)];
  }
  for (int k = 0; k < classes; ++k) {
    if (per_class[static_cast<std::size_t>(k)] == 0) {
      throw TrainingError("class " + std::to_string(k) + " has no training patches");
    }
  }

  const std::size_t n = patches.size();
  std::vector<Sample> samples(n);

  if (!warm_start) {
    // Normalization statistics from the un-augmented views.
    const auto dim = static_cast<std::size_t>(feat.dimension());
    parallel_for(n, [&](std::size_t i) {
      samples[i].x = extract_features(input_view(*patches[i].pixels, feat.input_size), feat);
    });
    NormStats norm{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
    for (const auto& s : samples)
      for (std::size_t d = 0; d < dim; ++d) norm.mean[d] += s.x[d];
    for (double& v : norm.mean) v /= static_cast<double>(n);
    for (const auto& s : samples)
      for (std::size_t d = 0; d < dim; ++d) norm.stddev[d] += (s.x[d] - norm.mean[d]) * (s.x[d] - norm.mean[d]);
    for (double& v : norm.stddev) v = std::max(std::sqrt(v / static_cast<double>(n)), 1e-6);
    model = init_model(arch, feat, norm, classes, derive_seed(config.seed, {1}));
  }

  const std::size_t steps_per_epoch = (n + static_cast<std::size_t>(config.batch_size) - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);
  std::vector<std::size_t> snapshot_steps;
  for (double p : config.snapshot_points) {
    snapshot_steps.push_back(std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(p * static_cast<double>(total_steps))), 1, total_steps));
  }

  FitResult result;
  std::vector<double> velocity(model.theta.size(), 0.0);
  std::vector<double> grad;
  std::vector<std::size_t> order(n);
  std::vector<const Sample*> batch;
  std::size_t step = 0;
  std::size_t next_snapshot = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (augment || epoch == 0) {
      parallel_for(n, [&](std::size_t i) {
        const RgbImage& src = *patches[i].pixels;
        const RgbImage view =
            augment ? input_view(augment(src, derive_seed(config.seed, {3, static_cast<std::uint64_t>(epoch), i})),
                                 feat.input_size)
                    : input_view(src, feat.input_size);
        samples[i].x = extract_features(view, feat);
        model.norm.apply(samples[i].x);
        samples[i].label = patches[i].label;
        samples[i].weight =
            config.balance_classes
                ? static_cast<double>(n) / (static_cast<double>(classes) *
                                            static_cast<double>(per_class[static_cast<std::size_t>(patches[i].label)]))
                : 1.0;
      });
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffler(derive_seed(config.seed, {2, static_cast<std::uint64_t>(epoch)}));
    shuffler.shuffle(order.begin(), order.end());

    double epoch_total = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b) {
      const std::size_t begin = b * static_cast<std::size_t>(config.batch_size);
      const std::size_t end = std::min(n, begin + static_cast<std::size_t>(config.batch_size));
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(&samples[order[i]]);
      const double obj = objective(model, batch, config.l2, &grad);
      if (!std::isfinite(obj)) {
        throw TrainingError("non-finite loss at iteration " + std::to_string(step));
      }
      epoch_total += obj;
      const double lr = config.learning_rate *
                        (1.0 - (1.0 - config.final_lr_scale) * static_cast<double>(step) / static_cast<double>(total_steps));
      for (std::size_t q = 0; q < model.theta.size(); ++q) {
        velocity[q] = config.momentum * velocity[q] - lr * grad[q];
        model.theta[q] += velocity[q];
      }
      ++step;
      while (next_snapshot < snapshot_steps.size() && snapshot_steps[next_snapshot] == step) {
        Model snap = model;
        snap.tag = next_snapshot + 1 == snapshot_steps.size() ? CheckpointTag::final : CheckpointTag::mid;
        result.snapshots.push_back(std::move(snap));
        ++next_snapshot;
      }
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(steps_per_epoch));
  }
  return result;
}

// ---------------------------------------------------------------------------

std::string to_json(const Model& model) {
  nlohmann::ordered_json j;
  j["version"] = 1;
  j["arch"] = {{"kind", model.arch.kind == ArchKind::mlp ? "mlp" : "softmax"},
               {"hidden_units", model.arch.kind == ArchKind::mlp ? model.arch.hidden_units : 0}};
  j["C"] = model.num_classes;
  j["checkpoint"] = to_string(model.tag);
  j["feature_config"] = {{"kind", model.features.kind == FeatureKind::raw_pixels ? "raw_pixels" : "block_stats"},
                         {"block", model.features.block},
                         {"input_size", model.features.input_size}};
  j["norm_stats"] = {{"mean", model.norm.mean}, {"std", model.norm.stddev}};
  j["theta"] = model.theta;
  return j.dump();
}

Model model_from_json(const std::string& text) {
  Model m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("version").get<int>() != 1) throw DataError("unsupported model version");
    const auto kind = j.at("arch").at("kind").get<std::string>();
    if (kind == "mlp") {
      m.arch = {ArchKind::mlp, j.at("arch").at("hidden_units").get<int>()};
    } else if (kind == "softmax") {
      m.arch = {ArchKind::softmax, 0};
    } else {
      throw DataError("unknown architecture " + kind);
    }
    m.num_classes = j.at("C").get<int>();
    m.tag = j.value("checkpoint", std::string("final")) == "mid" ? CheckpointTag::mid : CheckpointTag::final;
    const auto& fc = j.at("feature_config");
    const auto fkind = fc.at("kind").get<std::string>();
    if (fkind != "raw_pixels" && fkind != "block_stats") throw DataError("unknown feature kind " + fkind);
    m.features.kind = fkind == "raw_pixels" ? FeatureKind::raw_pixels : FeatureKind::block_stats;
    m.features.block = fc.at("block").get<int>();
    m.features.input_size = fc.at("input_size").get<int>();
    m.norm.mean = j.at("norm_stats").at("mean").get<std::vector<double>>();
    m.norm.stddev = j.at("norm_stats").at("std").get<std::vector<double>>();
    m.theta = j.at("theta").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed model JSON: " + std::string(e.what()));
  }
  try {
    m.features.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("model feature config: ") + e.what());
  }
  const auto dim = static_cast<std::size_t>(m.features.dimension());
  if (m.norm.mean.size() != dim || m.norm.stddev.size() != dim ||
      m.theta.size() != parameter_count(m.arch, m.features.dimension(), m.num_classes)) {
    throw DataError("model parameter sizes do not match its architecture");
  }
  return m;
}

}  // namespace emmil::classifier
