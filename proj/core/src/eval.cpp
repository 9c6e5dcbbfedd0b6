#include "emmil/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "emmil/common.hpp"
#include "json.hpp"

namespace emmil::eval {

SplitPlan split_by_group(std::span<const std::string> group_ids, double train_frac, std::uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac <= 1.0)) throw std::invalid_argument("train_frac must be in (0, 1]");
  std::vector<std::string> groups;
  for (const auto& g : group_ids)
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
  if (groups.size() < 2) throw std::invalid_argument("group split needs at least 2 groups");

  Rng rng(seed);
  rng.shuffle(groups.begin(), groups.end());

  const auto total = static_cast<double>(group_ids.size());
  std::vector<std::string> train_groups;
  std::size_t train_images = 0;
  for (std::size_t g = 0; g + 1 < groups.size(); ++g) {
    if (static_cast<double>(train_images) / total >= train_frac) break;
    train_groups.push_back(groups[g]);
    train_images += static_cast<std::size_t>(std::count(group_ids.begin(), group_ids.end(), groups[g]));
  }

  SplitPlan plan;
  plan.seed = seed;
  for (std::size_t i = 0; i < group_ids.size(); ++i) {
    const bool in_train = std::find(train_groups.begin(), train_groups.end(), group_ids[i]) != train_groups.end();
    (in_train ? plan.train : plan.test).push_back(i);
  }
  return plan;
}

long long ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), 0LL); }

long long ConfusionMatrix::trace() const {
  long long t = 0;
  for (int k = 0; k < num_classes; ++k) t += at(k, k);
  return t;
}

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predictions, int num_classes) {
  if (truth.size() != predictions.size()) throw std::invalid_argument("truth and predictions differ in length");
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || predictions[i] < 0 || predictions[i] >= num_classes) {
      throw std::invalid_argument("label out of range");
    }
    ++cm.at(truth[i], predictions[i]);
  }
  return cm;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  return total ? static_cast<double>(cm.trace()) / static_cast<double>(total) : 0.0;
}

double precision(const ConfusionMatrix& cm, int k) {
  long long col = 0;
  for (int t = 0; t < cm.num_classes; ++t) col += cm.at(t, k);
  return col ? static_cast<double>(cm.at(k, k)) / static_cast<double>(col) : 0.0;
}

double recall(const ConfusionMatrix& cm, int k) {
  long long row = 0;
  for (int p = 0; p < cm.num_classes; ++p) row += cm.at(k, p);
  return row ? static_cast<double>(cm.at(k, k)) / static_cast<double>(row) : 0.0;
}

double f_score(const ConfusionMatrix& cm, int k) {
  const double p = precision(cm, k);
  const double r = recall(cm, k);
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positives) {
  if (scores.size() != positives.size()) throw std::invalid_argument("scores and labels differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double sum = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (!positives[order[rank]]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
  }
  if (hits == 0) throw std::invalid_argument("average precision needs at least one positive");
  return sum / static_cast<double>(hits);
}

MapResult mean_average_precision(std::span<const std::vector<double>> scores, std::span<const int> truth,
                                 int num_classes) {
  if (scores.size() != truth.size()) throw std::invalid_argument("scores and truth differ in length");
  MapResult res;
  double sum = 0.0;
  int used = 0;
  std::vector<double> col(scores.size());
  std::vector<std::uint8_t> pos(scores.size());
  for (int k = 0; k < num_classes; ++k) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      col[i] = scores[i].at(static_cast<std::size_t>(k));
      pos[i] = truth[i] == k ? 1 : 0;
    }
    if (std::find(pos.begin(), pos.end(), std::uint8_t{1}) == pos.end()) {
      res.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      res.warnings.push_back("class " + std::to_string(k) + " has no positives; excluded from mAP");
      continue;
    }
    const double ap = average_precision(col, pos);
    res.per_class.push_back(ap);
    sum += ap;
    ++used;
  }
  res.map = used ? sum / used : 0.0;
  return res;
}

ConfusionMatrix collapse_binary(const ConfusionMatrix& cm, int target) {
  if (target < 0 || target >= cm.num_classes) throw std::invalid_argument("target class out of range");
  ConfusionMatrix out(2);
  for (int t = 0; t < cm.num_classes; ++t)
    for (int p = 0; p < cm.num_classes; ++p) out.at(t == target ? 0 : 1, p == target ? 0 : 1) += cm.at(t, p);
  return out;
}

double cohens_kappa(const ConfusionMatrix& cm) {
  const auto total = static_cast<double>(cm.total());
  if (total <= 0.0) throw std::invalid_argument("kappa of an empty confusion matrix");
  const double po = static_cast<double>(cm.trace()) / total;
  double pe = 0.0;
  for (int k = 0; k < cm.num_classes; ++k) {
    double row = 0.0, col = 0.0;
    for (int j = 0; j < cm.num_classes; ++j) {
      row += static_cast<double>(cm.at(k, j));
      col += static_cast<double>(cm.at(j, k));
    }
    pe += (row / total) * (col / total);
  }
  if (pe == 1.0) return po == 1.0 ? 1.0 : 0.0;
  return (po - pe) / (1.0 - pe);
}

double mask_f1(std::span<const em::HiddenMask> predicted, std::span<const synth::OracleMask> oracle) {
  long long tp = 0, fp = 0, fn = 0;
  for (const auto& m : predicted) {
    const auto& truth = synth::oracle_hidden_labels(oracle, m.image_id);
    if (truth.grid.size() != m.grid.size()) throw std::invalid_argument("mask and oracle sizes differ");
    for (std::size_t j = 0; j < m.grid.size(); ++j) {
      if (m.grid[j] && truth.grid[j]) ++tp;
      else if (m.grid[j]) ++fp;
      else if (truth.grid[j]) ++fn;
    }
  }
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom > 0.0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
}

Report make_report(std::string method, std::span<const int> truth, std::span<const int> predictions,
                   std::span<const std::vector<double>> scores, int num_classes) {
  Report r;
  r.method = std::move(method);
  r.confusion = confusion_matrix(truth, predictions, num_classes);
  r.accuracy = accuracy(r.confusion);
  const auto m = mean_average_precision(scores, truth, num_classes);
  r.map = m.map;
  r.warnings = m.warnings;
  for (int k = 0; k < num_classes; ++k) {
    r.f_scores.push_back(f_score(r.confusion, k));
    r.kappa_one_vs_rest.push_back(r.confusion.total() ? cohens_kappa(collapse_binary(r.confusion, k)) : 0.0);
  }
  return r;
}

namespace {

nlohmann::ordered_json report_json(const Report& r) {
  nlohmann::ordered_json j;
  j["method"] = r.method;
  j["accuracy"] = r.accuracy;
  j["mAP"] = r.map;
  j["f_scores"] = r.f_scores;
  j["kappa_one_vs_rest"] = r.kappa_one_vs_rest;
  nlohmann::ordered_json cm = nlohmann::ordered_json::array();
  for (int t = 0; t < r.confusion.num_classes; ++t) {
    nlohmann::ordered_json row = nlohmann::ordered_json::array();
    for (int p = 0; p < r.confusion.num_classes; ++p) row.push_back(r.confusion.at(t, p));
    cm.push_back(std::move(row));
  }
  j["confusion_matrix"] = std::move(cm);
  j["warnings"] = r.warnings;
  j["seed"] = r.seed;
  if (!r.config_json.empty()) j["config"] = nlohmann::ordered_json::parse(r.config_json);
  return j;
}

std::string fixed(double v, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string report_to_json(const Report& report) { return report_json(report).dump(2) + "\n"; }

std::string report_to_text(const Report& report) {
  std::ostringstream os;
  os << "Method:   " << report.method << '\n';
  os << "Accuracy: " << fixed(report.accuracy) << '\n';
  os << "mAP:      " << fixed(report.map) << '\n';
  os << "\nclass  F-score  kappa(1-vs-rest)\n";
  for (std::size_t k = 0; k < report.f_scores.size(); ++k) {
    char line[64];
    std::snprintf(line, sizeof line, "%5zu  %7.3f  %7.3f\n", k, report.f_scores[k], report.kappa_one_vs_rest[k]);
    os << line;
  }
  os << "\nconfusion (rows = ground truth, cols = prediction)\n";
  for (int t = 0; t < report.confusion.num_classes; ++t) {
    for (int p = 0; p < report.confusion.num_classes; ++p) {
      char cell[24];
      std::snprintf(cell, sizeof cell, "%6lld", report.confusion.at(t, p));
      os << cell;
    }
    os << '\n';
  }
  for (const auto& w : report.warnings) os << "warning: " << w << '\n';
  return os.str();
}

std::string confusion_to_csv(const ConfusionMatrix& cm) {
  std::ostringstream os;
  os << "truth\\pred";
  for (int p = 0; p < cm.num_classes; ++p) os << ',' << p;
  os << '\n';
  for (int t = 0; t < cm.num_classes; ++t) {
    os << t;
    for (int p = 0; p < cm.num_classes; ++p) os << ',' << cm.at(t, p);
    os << '\n';
  }
  return os.str();
}

std::string method_table(std::span<const Report> reports) {
  std::size_t width = std::string("Method").size();
  for (const auto& r : reports) width = std::max(width, r.method.size());
  std::ostringstream os;
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size(), ' '); };
  os << pad("Method") << "    Acc    mAP\n";
  os << std::string(width, '-') << "  -----  -----\n";
  for (const auto& r : reports) os << pad(r.method) << "  " << fixed(r.accuracy) << "  " << fixed(r.map) << '\n';
  return os.str();
}

}  // namespace emmil::eval
