#include <gtest/gtest.h>

#include <cmath>

#include "emmil/common.hpp"
#include "emmil/eval.hpp"
#include "oracles.hpp"

namespace {

using namespace emmil;
using namespace emmil::eval;

ConfusionMatrix cm2(long long a, long long b, long long c, long long d) {
  ConfusionMatrix cm(2);
  cm.at(0, 0) = a;
  cm.at(0, 1) = b;
  cm.at(1, 0) = c;
  cm.at(1, 1) = d;
  return cm;
}

TEST(Split, GroupsStayTogether) {
  std::vector<std::string> groups;
  for (int i = 0; i < 40; ++i) groups.push_back("g" + std::to_string(i / 4));
  const auto plan = split_by_group(groups, 0.7, 3);
  std::set<std::string> train, test;
  for (auto i : plan.train) train.insert(groups[i]);
  for (auto i : plan.test) test.insert(groups[i]);
  for (const auto& g : train) EXPECT_FALSE(test.contains(g));
  EXPECT_EQ(plan.train.size() + plan.test.size(), groups.size());
  const auto again = split_by_group(groups, 0.7, 3);
  EXPECT_EQ(again.train, plan.train);
  EXPECT_EQ(again.test, plan.test);
}

TEST(Split, FullFractionLeavesOneTestGroup) {
  std::vector<std::string> groups{"a", "a", "b", "c", "c", "d"};
  const auto plan = split_by_group(groups, 1.0, 8);
  std::set<std::string> test;
  for (auto i : plan.test) test.insert(groups[i]);
  EXPECT_EQ(test.size(), 1u);
  const std::vector<std::string> single{"a", "a"};
  EXPECT_THROW(split_by_group(single, 0.5, 1), std::invalid_argument);
}

TEST(Confusion, PerfectPredictions) {
  const std::vector<int> t{0, 1, 2, 2, 1};
  const auto cm = confusion_matrix(t, t, 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      if (i != j) EXPECT_EQ(cm.at(i, j), 0);
  EXPECT_EQ(accuracy(cm), 1.0);
}

TEST(Confusion, HandAccuracyAndFScore) {
  const auto cm = cm2(20, 5, 10, 15);
  EXPECT_DOUBLE_EQ(accuracy(cm), 0.7);
  EXPECT_DOUBLE_EQ(precision(cm, 0), 20.0 / 30.0);
  EXPECT_DOUBLE_EQ(recall(cm, 0), 0.8);
  EXPECT_NEAR(f_score(cm, 0), 2 * (2.0 / 3.0) * 0.8 / (2.0 / 3.0 + 0.8), 1e-15);
  ConfusionMatrix empty_class(3);
  empty_class.at(0, 0) = 4;
  empty_class.at(1, 1) = 2;
  EXPECT_EQ(f_score(empty_class, 2), 0.0);
}

TEST(AveragePrecision, HandValues) {
  const std::vector<double> s{0.9, 0.8, 0.3, 0.1};
  EXPECT_DOUBLE_EQ(average_precision(s, std::vector<std::uint8_t>{1, 1, 0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(average_precision(s, std::vector<std::uint8_t>{0, 1, 0, 0}), 0.5);
  EXPECT_THROW(average_precision(s, std::vector<std::uint8_t>{0, 0, 0, 0}), std::invalid_argument);
}

TEST(AveragePrecision, MatchesBruteForce) {
  Rng rng(12);
  for (int t = 0; t < 200; ++t) {
    const auto n = 1 + rng.below(30);
    std::vector<double> s(n);
    std::vector<std::uint8_t> p(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.below(8)) / 8.0;  // coarse values force ties
      p[i] = rng.uniform() < 0.4;
    }
    p[rng.below(n)] = 1;
    EXPECT_NEAR(average_precision(s, p), oracle::average_precision(s, p), 1e-12);
  }
}

TEST(Map, ExcludesClassesWithoutPositives) {
  const std::vector<std::vector<double>> scores{{0.9, 0.1, 0.0}, {0.2, 0.8, 0.0}};
  const std::vector<int> truth{0, 1};
  const auto r = mean_average_precision(scores, truth, 3);
  EXPECT_DOUBLE_EQ(r.map, 1.0);
  EXPECT_TRUE(std::isnan(r.per_class[2]));
  EXPECT_EQ(r.warnings.size(), 1u);
}

TEST(Kappa, HandValues) {
  EXPECT_DOUBLE_EQ(cohens_kappa(cm2(10, 0, 0, 10)), 1.0);
  EXPECT_DOUBLE_EQ(cohens_kappa(cm2(25, 25, 25, 25)), 0.0);
  EXPECT_NEAR(cohens_kappa(cm2(20, 5, 10, 15)), 0.4, 1e-15);
  EXPECT_DOUBLE_EQ(cohens_kappa(cm2(7, 0, 0, 0)), 1.0);
}

TEST(Kappa, MatchesTwoByTwoFormula) {
  Rng rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto a = static_cast<long long>(1 + rng.below(40)), b = static_cast<long long>(rng.below(40));
    const auto c = static_cast<long long>(rng.below(40)), d = static_cast<long long>(1 + rng.below(40));
    EXPECT_NEAR(cohens_kappa(cm2(a, b, c, d)), oracle::kappa_2x2(a, b, c, d), 1e-12);
  }
}

TEST(Kappa, CollapseToBinary) {
  ConfusionMatrix cm(3);
  cm.at(0, 0) = 5;
  cm.at(0, 2) = 1;
  cm.at(1, 1) = 4;
  cm.at(2, 0) = 2;
  cm.at(2, 2) = 3;
  const auto b = collapse_binary(cm, 2);
  EXPECT_EQ(b.at(0, 0), 3);
  EXPECT_EQ(b.at(0, 1), 2);
  EXPECT_EQ(b.at(1, 0), 1);
  EXPECT_EQ(b.at(1, 1), 9);
}

TEST(MaskF1, MicroAveraged) {
  const std::vector<em::HiddenMask> pred{{"a", 1, 4, {1, 1, 0, 0}}, {"b", 1, 2, {1, 0}}};
  const std::vector<synth::OracleMask> truth{{"a", 1, 4, {1, 0, 1, 0}}, {"b", 1, 2, {1, 1}}};
  // tp 2, fp 1, fn 2.
  EXPECT_DOUBLE_EQ(mask_f1(pred, truth), 4.0 / 7.0);
}

TEST(Report, TextJsonAndTable) {
  const std::vector<int> t{0, 0, 1, 1}, p{0, 1, 1, 1};
  const std::vector<std::vector<double>> s{{0.9, 0.1}, {0.4, 0.6}, {0.2, 0.8}, {0.1, 0.9}};
  auto r = make_report("EM-CNN-LR", t, p, s, 2);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.75);
  EXPECT_NE(report_to_json(r).find("\"accuracy\": 0.75"), std::string::npos);
  EXPECT_NE(report_to_text(r).find("Accuracy: 0.750"), std::string::npos);
  EXPECT_EQ(confusion_to_csv(r.confusion), "truth\\pred,0,1\n0,1,1\n1,0,2\n");
  const std::vector<Report> rows{r};
  const auto table = method_table(rows);
  EXPECT_NE(table.find("Method"), std::string::npos);
  EXPECT_NE(table.find("Acc"), std::string::npos);
  EXPECT_NE(table.find("mAP"), std::string::npos);
  EXPECT_NE(table.find("EM-CNN-LR  0.750  1.000"), std::string::npos);
}

}  // namespace
