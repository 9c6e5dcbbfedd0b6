// Acceptance suite: one PASS/FAIL line per criterion.
//
//   emmil_acceptance [--threads N] [--work-dir DIR] [--only 1,4,7]
//
// Exits 0 only when every selected criterion passes.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "emmil/common.hpp"
#include "emmil/eval.hpp"
#include "emmil/patchio.hpp"
#include "emmil/pipeline.hpp"
#include "oracles.hpp"

namespace {

using namespace emmil;
using namespace emmil::pipeline;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

constexpr std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string join(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + fmt("%.3f", v[i]);
  return out;
}

// --- 1: retention ----------------------------------------------------------

Outcome retention() {
  Rng rng(101);
  long long violations = 0, images = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const double p1 = rng.uniform(0.01, 0.99), p2 = rng.uniform(0.01, 0.99);
    const int n = 1 + static_cast<int>(rng.below(6));
    const int classes = 1 + static_cast<int>(rng.below(3));
    std::vector<em::ValueGrid> grids;
    std::vector<int> labels;
    for (int i = 0; i < n; ++i) {
      em::ValueGrid g;
      g.image_id = "i" + std::to_string(i);
      g.rows = 1 + static_cast<int>(rng.below(10));
      g.cols = 1 + static_cast<int>(rng.below(10));
      g.values.resize(g.size());
      g.valid.resize(g.size());
      for (std::size_t j = 0; j < g.size(); ++j) {
        g.valid[j] = rng.uniform() < 0.85;
        // Coarse values make ties common.
        g.values[j] = g.valid[j] ? static_cast<double>(rng.below(20)) / 20.0 : 0.0;
      }
      g.valid[rng.below(g.size())] = 1;
      grids.push_back(std::move(g));
      labels.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(classes))));
    }
    const auto masks = em::select_discriminative(grids, labels, classes, p1, p2);
    for (std::size_t i = 0; i < grids.size(); ++i) {
      std::size_t valid = 0;
      for (auto v : grids[i].valid) valid += v;
      ++images;
      if (masks[i].count() < static_cast<std::size_t>(std::floor((1.0 - p1) * static_cast<double>(valid)))) ++violations;
    }
  }
  return {violations == 0, std::to_string(images) + " images, " + std::to_string(violations) + " below floor((1-P1)*valid)"};
}

// --- 2: smoothing oracle -----------------------------------------------------

Outcome smoothing() {
  Rng rng(202);
  double worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    em::ValueGrid g;
    g.rows = 1 + static_cast<int>(rng.below(20));
    g.cols = 1 + static_cast<int>(rng.below(20));
    g.values.resize(g.size());
    g.valid.resize(g.size());
    for (std::size_t j = 0; j < g.size(); ++j) {
      g.valid[j] = rng.uniform() < 0.75;
      g.values[j] = g.valid[j] ? rng.uniform() : 0.0;
    }
    const double sigma = rng.uniform(0.2, 3.0);
    const auto fast = em::gaussian_smooth(g, sigma);
    const auto slow = oracle::smooth(g, sigma);
    for (std::size_t j = 0; j < g.size(); ++j) worst = std::max(worst, std::abs(fast.values[j] - slow.values[j]));
  }
  return {worst <= 1e-12, "max abs diff " + fmt("%.2e", worst) + " over 100 grids"};
}

// --- 3: gradient checks --------------------------------------------------------

Outcome gradients() {
  classifier::FeatureConfig fc;
  fc.input_size = 16;
  fc.block = 4;
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(derive_seed(303, {seed}));
    std::vector<classifier::Sample> batch(16);
    for (auto& s : batch) {
      s.x.resize(static_cast<std::size_t>(fc.dimension()));
      for (auto& v : s.x) v = rng.normal();
      s.label = static_cast<int>(rng.below(3));
    }
    for (auto kind : {classifier::ArchKind::softmax, classifier::ArchKind::mlp}) {
      const auto m = classifier::init_model({kind, 12}, fc, classifier::NormStats::identity(fc.dimension()), 3, seed);
      worst = std::max(worst, classifier::grad_check(m, batch, 1e-3, 1e-5, seed));
    }
  }
  return {worst < 1e-4, "max relative error " + fmt("%.2e", worst) + " (softmax + mlp, 20 seeds)"};
}

// --- shared experiment plumbing --------------------------------------------------

PipelineConfig base_config(std::uint64_t seed) {
  auto cfg = parse_config("{\"seed\": " + std::to_string(seed) + "}");
  return cfg;
}

double f_score_of(const std::vector<int>& truth, const Scored& s, int k, int classes) {
  return eval::f_score(eval::confusion_matrix(truth, s.labels, classes), k);
}

double accuracy_of(const std::vector<int>& truth, const Scored& s, int classes) {
  return eval::accuracy(eval::confusion_matrix(truth, s.labels, classes));
}

// --- 4: mixed class ------------------------------------------------------------

Outcome mixed_class() {
  std::vector<double> lr, vote, mx, secs;
  for (auto seed : kSeeds) {
    const auto t0 = Clock::now();
    auto cfg = base_config(seed);
    cfg.synth.preset = CorpusPreset::mixed;
    cfg.synth.images_per_class = 60;
    cfg.em.max_iters = 4;
    cfg.validate();
    const auto corpus = synth::generate_dataset(corpus_spec(cfg), corpus_seed(cfg));
    const auto prep = prepare(corpus, cfg);
    const auto models = train_models(prep.train, cfg, cfg.em);
    const auto truth = truth_labels(prep.test);
    const int m = 2;  // the mixed class
    lr.push_back(f_score_of(truth, predict_lr(models, prep.test, cfg.fusion.normalize), m, 3));
    vote.push_back(f_score_of(truth, predict_vote(models.em, prep.test), m, 3));
    mx.push_back(f_score_of(truth, predict_max(models.em, prep.test), m, 3));
    secs.push_back(seconds_since(t0));
  }
  const double slowest = *std::max_element(secs.begin(), secs.end());
  const bool pass = mean(lr) >= 0.85 && mean(vote) <= 0.35 && mean(mx) <= 0.35 && slowest < 120.0;
  return {pass, "F(M) 5-seed mean: LR " + fmt("%.3f", mean(lr)) + " [" + join(lr) + "], vote " + fmt("%.3f", mean(vote)) +
                    " [" + join(vote) + "], max " + fmt("%.3f", mean(mx)) + " [" + join(mx) + "]; slowest seed " +
                    fmt("%.0fs", slowest)};
}

// --- 5 and 6: mask recovery and the smoothing ablation -----------------------------

struct RecoveryRun {
  double f1_first = 0.0;
  double f1_final = 0.0;
  double f1_raw = 0.0;
  double acc = 0.0;
  double acc_raw = 0.0;
};

std::vector<RecoveryRun> recovery_runs(double& elapsed) {
  static std::vector<RecoveryRun> cache;
  static double cached_elapsed = 0.0;
  if (!cache.empty()) {
    elapsed = cached_elapsed;
    return cache;
  }
  const auto t0 = Clock::now();
  for (auto seed : kSeeds) {
    auto cfg = base_config(seed);
    cfg.synth.preset = CorpusPreset::standard;
    cfg.synth.disc_fraction = 0.3;
    cfg.synth.min_disc_strength = 0.0;
    cfg.em.p1 = 0.7;
    cfg.em.p2 = 0.7;
    cfg.em.sigma = 0.5;
    cfg.em.max_iters = 4;
    cfg.validate();
    const auto corpus = synth::generate_dataset(corpus_spec(cfg), corpus_seed(cfg));
    const auto prep = prepare(corpus, cfg);
    const auto truth = truth_labels(prep.test);
    auto raw_cfg = cfg.em;
    raw_cfg.smoothing_enabled = false;
    const auto on = train_models(prep.train, cfg, cfg.em);
    const auto off = train_models(prep.train, cfg, raw_cfg);
    RecoveryRun r;
    r.f1_first = eval::mask_f1(on.em.mask_history.front(), corpus.masks);
    r.f1_final = eval::mask_f1(on.em.masks, corpus.masks);
    r.f1_raw = eval::mask_f1(off.em.masks, corpus.masks);
    r.acc = accuracy_of(truth, predict_lr(on, prep.test, cfg.fusion.normalize), 3);
    r.acc_raw = accuracy_of(truth, predict_lr(off, prep.test, cfg.fusion.normalize), 3);
    cache.push_back(r);
  }
  cached_elapsed = seconds_since(t0);
  elapsed = cached_elapsed;
  return cache;
}

Outcome recovery() {
  double elapsed = 0.0;
  const auto runs = recovery_runs(elapsed);
  std::vector<double> first, final;
  for (const auto& r : runs) first.push_back(r.f1_first), final.push_back(r.f1_final);
  const bool pass = mean(final) >= 0.70 && mean(final) >= mean(first) - 0.02 && elapsed < 300.0;
  return {pass, "mask F1 5-seed mean: final " + fmt("%.3f", mean(final)) + " [" + join(final) + "], iteration 1 " +
                    fmt("%.3f", mean(first)) + "; shared runs " + fmt("%.0fs", elapsed)};
}

Outcome smoothing_ablation() {
  double elapsed = 0.0;
  const auto runs = recovery_runs(elapsed);
  std::vector<double> f1, f1_raw, acc, acc_raw;
  for (const auto& r : runs) {
    f1.push_back(r.f1_final);
    f1_raw.push_back(r.f1_raw);
    acc.push_back(r.acc);
    acc_raw.push_back(r.acc_raw);
  }
  const bool pass = mean(f1) >= mean(f1_raw) && mean(acc) >= mean(acc_raw) && elapsed < 600.0;
  return {pass, "smoothing on/off: mask F1 " + fmt("%.3f", mean(f1)) + " / " + fmt("%.3f", mean(f1_raw)) +
                    ", test accuracy " + fmt("%.3f", mean(acc)) + " / " + fmt("%.3f", mean(acc_raw))};
}

// --- 7: patch-based vs whole-image -----------------------------------------------

Outcome patch_vs_image() {
  const auto t0 = Clock::now();
  std::vector<double> lr, image;
  for (auto seed : kSeeds) {
    auto cfg = base_config(seed);
    cfg.synth.preset = CorpusPreset::dispersed;
    cfg.synth.image_size = 512;
    cfg.synth.images_per_class = 40;
    cfg.image_baseline.crop_size = 128;
    // Constant learning rate and unweighted classes for both methods.
    cfg.setup.train.final_lr_scale = 1.0;
    cfg.setup.train.balance_classes = false;
    cfg.validate();
    const auto corpus = synth::generate_dataset(corpus_spec(cfg), corpus_seed(cfg));
    const auto prep = prepare(corpus, cfg);
    const auto truth = truth_labels(prep.test);
    const auto models = train_models(prep.train, cfg, cfg.em);
    lr.push_back(accuracy_of(truth, predict_lr(models, prep.test, cfg.fusion.normalize), 3));
    image.push_back(accuracy_of(truth, five_crop_baseline(corpus, prep.split, cfg), 3));
  }
  const double elapsed = seconds_since(t0);
  const bool pass = mean(lr) >= mean(image) + 0.03 && elapsed < 600.0;
  return {pass, "accuracy 5-seed mean: EM-CNN-LR " + fmt("%.3f", mean(lr)) + " [" + join(lr) + "], five-crop " +
                    fmt("%.3f", mean(image)) + " [" + join(image) + "] (constant lr, unbalanced); " +
                    fmt("%.0fs", elapsed)};
}

// --- 8: metric oracles -------------------------------------------------------------

Outcome metrics() {
  Rng rng(808);
  double ap_worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const auto n = 1 + rng.below(40);
    std::vector<double> s(n);
    std::vector<std::uint8_t> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform() < 0.3 ? static_cast<double>(rng.below(4)) / 4.0 : rng.uniform();
      p[i] = rng.uniform() < 0.35;
    }
    p[rng.below(n)] = 1;
    ap_worst = std::max(ap_worst, std::abs(eval::average_precision(s, p) - oracle::average_precision(s, p)));
  }
  double kappa_worst = 0.0;
  for (int t = 0; t < 100; ++t) {
    eval::ConfusionMatrix cm(2);
    for (auto& c : cm.counts) c = static_cast<long long>(rng.below(50));
    cm.at(0, 0) += 1;
    cm.at(1, 1) += 1;
    const double want = oracle::kappa_2x2(static_cast<double>(cm.at(0, 0)), static_cast<double>(cm.at(0, 1)),
                                          static_cast<double>(cm.at(1, 0)), static_cast<double>(cm.at(1, 1)));
    kappa_worst = std::max(kappa_worst, std::abs(eval::cohens_kappa(cm) - want));
  }
  bool accuracy_exact = true;
  for (int t = 0; t < 100; ++t) {
    const int classes = 2 + static_cast<int>(rng.below(4));
    eval::ConfusionMatrix cm(classes);
    for (auto& c : cm.counts) c = static_cast<long long>(rng.below(30));
    cm.at(0, 0) += 1;
    long long trace = 0, total = 0;
    for (int i = 0; i < classes; ++i)
      for (int j = 0; j < classes; ++j) (i == j ? trace : total) += cm.at(i, j);
    total += trace;
    accuracy_exact &= eval::accuracy(cm) == static_cast<double>(trace) / static_cast<double>(total);
  }
  const bool pass = ap_worst <= 1e-12 && kappa_worst <= 1e-12 && accuracy_exact;
  return {pass, "AP max diff " + fmt("%.1e", ap_worst) + ", kappa max diff " + fmt("%.1e", kappa_worst) +
                    ", accuracy exact " + (accuracy_exact ? "yes" : "no")};
}

// --- 9: stain augmentation --------------------------------------------------------

patchio::Od cramer_concentrations(const patchio::StainBasis& b, const patchio::Od& od) {
  using M = std::array<patchio::Od, 3>;
  auto det = [](const M& a) {
    return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
           a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  };
  M mt{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) mt[i][j] = b.rows[j][i];
  const double d = det(mt);
  patchio::Od c{};
  for (int k = 0; k < 3; ++k) {
    M a = mt;
    for (int i = 0; i < 3; ++i) a[i][k] = od[i];
    c[k] = det(a) / d;
  }
  return c;
}

Outcome stain() {
  const auto basis = patchio::StainBasis::hematoxylin_eosin();
  Rng rng(909);
  int worst = 0;
  for (int t = 0; t < 1000; ++t) {
    RgbImage img(16, 16);
    for (auto& v : img.data) v = static_cast<std::uint8_t>(rng.below(256));
    const auto out = patchio::stain_perturb(img, basis, 1.0, 1.0);
    for (std::size_t i = 0; i < img.data.size(); ++i) worst = std::max(worst, std::abs(int(out.data[i]) - int(img.data[i])));
  }
  const auto px = patchio::od_to_rgb(basis.rows[0]);
  RgbImage pure(1, 1);
  for (int ch = 0; ch < 3; ++ch) pure.at(0, 0, ch) = px[static_cast<std::size_t>(ch)];
  const auto doubled = patchio::stain_perturb(pure, basis, 2.0, 1.0);
  auto h_of = [&](const RgbImage& im) {
    return cramer_concentrations(basis, patchio::rgb_to_od({im.at(0, 0, 0), im.at(0, 0, 1), im.at(0, 0, 2)}))[0];
  };
  const double ratio = h_of(doubled) / h_of(pure);
  const bool pass = worst <= 2 && std::abs(ratio - 2.0) <= 0.02;
  return {pass, "identity round trip max error " + std::to_string(worst) + "/255, H ratio " + fmt("%.4f", ratio)};
}

// --- 10: determinism across thread counts --------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  const int saved = thread_count();
  auto cfg = base_config(10);
  cfg.synth.images_per_class = 12;
  cfg.em.max_iters = 3;
  cfg.dataset_dir = work / "determinism" / "data";
  cfg.output_dir = work / "determinism" / "out";
  fs::remove_all(work / "determinism");
  cmd_synth(cfg);
  std::vector<std::string> files{"matrix.txt", "matrix.json", "manifest_matrix.json"};
  std::vector<std::string> first;
  set_thread_count(1);
  cmd_matrix(cfg);
  for (const auto& f : files) first.push_back(slurp(cfg.output_dir / f));
  set_thread_count(8);
  cmd_matrix(cfg);
  set_thread_count(saved);
  int differing = 0;
  for (std::size_t i = 0; i < files.size(); ++i) differing += slurp(cfg.output_dir / files[i]) != first[i];
  const double elapsed = seconds_since(t0);
  const bool pass = differing == 0 && !first[1].empty() && elapsed < 1200.0;
  return {pass, std::to_string(files.size() - static_cast<std::size_t>(differing)) + "/" + std::to_string(files.size()) +
                    " report files byte-identical (threads 1 vs 8); " + fmt("%.0fs", elapsed)};
}

}  // namespace

int main(int argc, char** argv) {
  int threads = 4;
  fs::path work = fs::temp_directory_path() / "emmil_acceptance";
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--threads" && i + 1 < argc) threads = std::atoi(argv[++i]);
    else if (a == "--work-dir" && i + 1 < argc) work = argv[++i];
    else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string tok; std::getline(ss, tok, ',');) only.insert(std::stoi(tok));
    } else {
      std::fprintf(stderr, "usage: emmil_acceptance [--threads N] [--work-dir DIR] [--only 1,2,...]\n");
      return 2;
    }
  }
  set_thread_count(threads);
  fs::create_directories(work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"retention invariant", retention},
      {"smoothing oracle", smoothing},
      {"gradient checks", gradients},
      {"mixed-class fusion superiority", mixed_class},
      {"discriminative patch recovery", recovery},
      {"smoothing ablation ordering", smoothing_ablation},
      {"patch-based beats whole-image", patch_vs_image},
      {"metric oracles", metrics},
      {"stain augmentation", stain},
      {"end-to-end determinism", [&] { return determinism(work); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.contains(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("Criterion %d (%s): %s - %s [%.1fs]\n", id, criteria[i].first, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
