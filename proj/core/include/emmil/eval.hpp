#ifndef EMMIL_EVAL_HPP
#define EMMIL_EVAL_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "emmil/em.hpp"
#include "emmil/synth.hpp"

namespace emmil::eval {

/// Patient-grouped train/test split. Index lists refer to the input order.
struct SplitPlan {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::uint64_t seed = 0;
};

/// Groups (in first-appearance order) are shuffled with the seed and assigned
/// to train until the train image fraction reaches train_frac; at least one
/// group always stays in test.
SplitPlan split_by_group(std::span<const std::string> group_ids, double train_frac, std::uint64_t seed);

/// Rows are ground truth, columns predictions.
struct ConfusionMatrix {
  int num_classes = 0;
  std::vector<long long> counts;

  explicit ConfusionMatrix(int c = 0) : num_classes(c), counts(static_cast<std::size_t>(c) * c, 0) {}
  long long& at(int truth, int pred) { return counts[static_cast<std::size_t>(truth) * num_classes + pred]; }
  long long at(int truth, int pred) const { return counts[static_cast<std::size_t>(truth) * num_classes + pred]; }
  long long total() const;
  long long trace() const;
};

ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> predictions, int num_classes);
double accuracy(const ConfusionMatrix& cm);
double precision(const ConfusionMatrix& cm, int k);
double recall(const ConfusionMatrix& cm, int k);
/// 2PR/(P+R), 0 when P+R = 0.
double f_score(const ConfusionMatrix& cm, int k);

/// Mean over positives of the precision at each positive's rank, ranking by
/// descending score with ties kept in input order. Throws when there are no
/// positives.
double average_precision(std::span<const double> scores, std::span<const std::uint8_t> positives);

struct MapResult {
  double map = 0.0;
  std::vector<double> per_class;  // NaN for excluded classes
  std::vector<std::string> warnings;
};

/// Macro one-vs-rest AP; classes without positives are excluded with a warning.
MapResult mean_average_precision(std::span<const std::vector<double>> scores, std::span<const int> truth,
                                 int num_classes);

/// Target-vs-rest 2x2 matrix; index 0 is the target class.
ConfusionMatrix collapse_binary(const ConfusionMatrix& cm, int target);

/// (p_o - p_e) / (1 - p_e); when p_e = 1 the value is 1 if p_o = 1 else 0.
double cohens_kappa(const ConfusionMatrix& cm);

/// Micro-averaged F1 of predicted hidden masks against the planted layout.
double mask_f1(std::span<const em::HiddenMask> predicted, std::span<const synth::OracleMask> oracle);

struct Report {
  std::string method;
  double accuracy = 0.0;
  double map = 0.0;
  std::vector<double> f_scores;
  std::vector<double> kappa_one_vs_rest;
  ConfusionMatrix confusion;
  std::vector<std::string> warnings;
  std::string config_json;  // resolved configuration echo
  std::uint64_t seed = 0;
};

Report make_report(std::string method, std::span<const int> truth, std::span<const int> predictions,
                   std::span<const std::vector<double>> scores, int num_classes);

std::string report_to_json(const Report& report);
std::string report_to_text(const Report& report);
std::string confusion_to_csv(const ConfusionMatrix& cm);

/// Aligned "Method  Acc  mAP" table, one row per report.
std::string method_table(std::span<const Report> reports);

}  // namespace emmil::eval

#endif  // EMMIL_EVAL_HPP
