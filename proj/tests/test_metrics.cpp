#include "gradcheck.hpp"
#include "mfas/metrics.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace mfas::eval {
namespace {

Matrix one_hot(const std::vector<int>& pred, int classes) {
  Matrix p = Matrix::Zero(static_cast<Eigen::Index>(pred.size()), classes);
  for (std::size_t r = 0; r < pred.size(); ++r) p(static_cast<Eigen::Index>(r), pred[r]) = 1.0;
  return p;
}

TEST(Metrics, PerfectPredictions) {
  const std::vector<int> y{0, 1, 2, 1};
  const auto r = confusion_and_metrics(one_hot(y, 3), y, 3);
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.macro_precision, 1.0);
  EXPECT_EQ(r.macro_recall, 1.0);
  EXPECT_EQ(r.macro_f1, 1.0);
}

TEST(Metrics, HandComputedTwoClassCase) {
  const std::vector<int> y{0, 1};
  const auto r = confusion_and_metrics(one_hot({0, 0}, 2), y, 2);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[0].precision, 0.5);
  EXPECT_DOUBLE_EQ(r.per_class[0].recall, 1.0);
  EXPECT_DOUBLE_EQ(r.per_class[1].precision, 0.0);
  EXPECT_DOUBLE_EQ(r.per_class[1].recall, 0.0);
  EXPECT_NEAR(r.macro_f1, 1.0 / 3.0, 1e-12);
}

TEST(Metrics, MacroF1InvariantUnderRelabeling) {
  Rng rng(1);
  std::vector<int> y(200), pred(200);
  for (auto& v : y) v = static_cast<int>(rng() % 5);
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = rng() % 3 == 0 ? static_cast<int>(rng() % 5) : y[i];
  const std::vector<int> perm{3, 0, 4, 1, 2};
  std::vector<int> y2(y.size()), pred2(pred.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y2[i] = perm[static_cast<std::size_t>(y[i])];
    pred2[i] = perm[static_cast<std::size_t>(pred[i])];
  }
  EXPECT_NEAR(confusion_and_metrics(one_hot(pred, 5), y, 5).macro_f1,
              confusion_and_metrics(one_hot(pred2, 5), y2, 5).macro_f1, 1e-12);
}

TEST(Metrics, AccuracyEqualsMicroRecall) {
  Rng rng(2);
  const Matrix probs = testing::random_matrix(300, 6, rng);
  std::vector<int> y(300);
  for (auto& v : y) v = static_cast<int>(rng() % 6);
  const auto r = confusion_and_metrics(probs, y, 6);
  std::size_t tp = 0, fn = 0;
  for (const auto& c : r.per_class) {
    tp += c.tp;
    fn += c.fn;
  }
  EXPECT_NEAR(r.accuracy, static_cast<double>(tp) / static_cast<double>(tp + fn), 1e-15);
}

TEST(Metrics, ArgmaxTiesPickLowestIndex) {
  Matrix p(2, 3);
  p << 0.2, 0.4, 0.4, 0.5, 0.5, 0.0;
  EXPECT_EQ(argmax_rows(p), (std::vector<int>{1, 0}));
}

TEST(TopK, MonotoneAndBoundaryCases) {
  Rng rng(3);
  const Matrix probs = testing::random_matrix(500, 12, rng);
  std::vector<int> y(500);
  for (auto& v : y) v = static_cast<int>(rng() % 12);
  double prev = 0.0;
  for (int k = 1; k <= 12; ++k) {
    const double acc = top_k_accuracy(probs, y, k);
    EXPECT_GE(acc, prev);
    prev = acc;
  }
  EXPECT_EQ(top_k_accuracy(probs, y, 12), 1.0);
  EXPECT_EQ(top_k_accuracy(probs, y, 1), confusion_and_metrics(probs, y, 12).accuracy);
}

TEST(TopK, UniformPredictionsApproachKOverClasses) {
  Rng rng(4);
  const int n = 20000, classes = 50;
  Matrix probs(n, classes);
  for (Eigen::Index i = 0; i < probs.size(); ++i) probs.data()[i] = uniform01(rng);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng() % classes);
  EXPECT_NEAR(top_k_accuracy(probs, y, 5), 5.0 / classes, 0.01);
}

TEST(TopK, TiesRankLowerIndexFirst) {
  Matrix p(1, 3);
  p << 0.3, 0.3, 0.4;
  EXPECT_EQ(top_k_accuracy(p, std::vector<int>{0}, 2), 1.0);
  EXPECT_EQ(top_k_accuracy(p, std::vector<int>{1}, 2), 0.0);
}

TEST(LateFusion, AverageOfPresentModels) {
  RowVector a(2), b(2);
  a << 0.6, 0.4;
  b << 0.2, 0.8;
  const RowVector avg = late_fusion_row({a, b}, 0b11);
  EXPECT_NEAR(avg(0), 0.4, 1e-15);
  EXPECT_NEAR(avg(1), 0.6, 1e-15);
  EXPECT_EQ(late_fusion_row({a, b}, 0b10), b);
}

TEST(LateFusion, AbsentModelIsIgnored) {
  Rng rng(5);
  std::vector<Matrix> models;
  for (int m = 0; m < 4; ++m) models.push_back(testing::random_matrix(10, 3, rng).cwiseAbs());
  const std::vector<std::uint8_t> presence(10, 0b1011);
  const Matrix base = late_fusion_predict(models, presence);
  models[2].setConstant(1e6);
  EXPECT_EQ(late_fusion_predict(models, presence), base);
  const Matrix expected = (models[0] + models[1] + models[3]) / 3.0;
  EXPECT_LT((base - expected).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(McNemar, TableEightStatistics) {
  const auto a = mcnemar_test(281, 1159);
  EXPECT_NEAR(a.statistic, 534.12, 0.01);
  EXPECT_LT(a.p_value, 0.001);
  const auto b = mcnemar_test(354, 888);
  EXPECT_NEAR(b.statistic, 228.74, 0.01);
  EXPECT_LT(b.p_value, 0.001);
}

TEST(McNemar, HandEvaluatedAndSymmetric) {
  EXPECT_NEAR(mcnemar_test(5, 5).statistic, 0.1, 1e-15);
  EXPECT_EQ(mcnemar_test(7, 19).statistic, mcnemar_test(19, 7).statistic);
  EXPECT_EQ(mcnemar_test(0, 0).p_value, 1.0);
  // chi2 = 3.841 is the 5% critical value with one degree of freedom.
  EXPECT_NEAR(mcnemar_test(ContingencyTable{0, 10, 25, 0}).p_value,
              std::erfc(std::sqrt((14.0 * 14.0 / 35.0) / 2.0)), 1e-15);
}

TEST(McNemar, ContingencyCounts) {
  const std::vector<int> y{0, 1, 2, 0, 1};
  const std::vector<int> a{0, 1, 0, 1, 1};
  const std::vector<int> b{0, 0, 2, 1, 0};
  const auto t = contingency(a, b, y);
  EXPECT_EQ(t.n11, 1u);
  EXPECT_EQ(t.n10, 2u);
  EXPECT_EQ(t.n01, 1u);
  EXPECT_EQ(t.n00, 1u);
}

data::RecordSet subset_records() {
  data::RecordSet set;
  set.labels = {0, 1, 0, 1, 1};
  set.presence = {0b11, 0b01, 0b10, 0b11, 0b01};
  set.inputs = {Matrix::Zero(5, 1), Matrix::Zero(5, 1)};
  for (Eigen::Index r = 0; r < 5; ++r) {
    if (set.presence[static_cast<std::size_t>(r)] & 1) set.inputs[0](r, 0) = 1.0 + static_cast<double>(r);
    if (set.presence[static_cast<std::size_t>(r)] & 2) set.inputs[1](r, 0) = -1.0 - static_cast<double>(r);
  }
  return set;
}

TEST(Subsets, CountsAndOrder) {
  const auto subsets = all_subsets(4);
  ASSERT_EQ(subsets.size(), 15u);
  EXPECT_EQ(subsets.front(), std::vector<std::size_t>{0});
  EXPECT_EQ(subsets[4], (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(subsets.back(), (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Subsets, InstanceCountsShrinkAsSubsetGrows) {
  const auto set = subset_records();
  EXPECT_EQ(records_with(set, {0}).size(), 4u);
  EXPECT_EQ(records_with(set, {1}).size(), 3u);
  EXPECT_EQ(records_with(set, {0, 1}).size(), 2u);
}

TEST(Subsets, RestrictionZeroFillsOtherModalities) {
  const auto set = subset_records();
  const auto restricted = restrict_to_subset(set, {0});
  for (std::size_t r = 0; r < set.size(); ++r) {
    EXPECT_FALSE(restricted.has(r, 1));
    EXPECT_EQ(restricted.inputs[1](static_cast<Eigen::Index>(r), 0), 0.0);
    EXPECT_EQ(restricted.inputs[0](static_cast<Eigen::Index>(r), 0), set.inputs[0](static_cast<Eigen::Index>(r), 0));
  }
}

TEST(Subsets, FullSubsetOnCompleteRecordsEqualsFullEvaluation) {
  data::RecordSet set;
  set.labels = {0, 1, 1};
  set.presence = {0b11, 0b11, 0b11};
  set.inputs = {Matrix(3, 1), Matrix(3, 1)};
  set.inputs[0] << 1, -1, 2;
  set.inputs[1] << 0.5, -2, -1;
  RecordPredictor sign = [](const data::RecordSet& r) {
    Matrix p(static_cast<Eigen::Index>(r.size()), 2);
    for (Eigen::Index i = 0; i < p.rows(); ++i) {
      const double s = r.inputs[0](i, 0) + r.inputs[1](i, 0);
      p(i, 0) = s > 0 ? 0.9 : 0.1;
      p(i, 1) = 1.0 - p(i, 0);
    }
    return p;
  };
  const auto sub = subset_evaluate(sign, set, {0, 1}, 2);
  const auto full = confusion_and_metrics(sign(set), set.labels, 2);
  EXPECT_EQ(sub.instances, 3u);
  EXPECT_EQ(sub.metrics.macro_f1, full.macro_f1);
  EXPECT_EQ(sub.metrics.accuracy, full.accuracy);
}

TEST(Subsets, EmptySubsetGivesEmptyResult) {
  data::RecordSet set;
  set.labels = {0};
  set.presence = {0b01};
  set.inputs = {Matrix::Ones(1, 1), Matrix::Zero(1, 1)};
  RecordPredictor any = [](const data::RecordSet& r) { return Matrix::Constant(static_cast<Eigen::Index>(r.size()), 2, 0.5); };
  const auto res = subset_evaluate(any, set, {1}, 2);
  EXPECT_EQ(res.instances, 0u);
  EXPECT_TRUE(res.predictions.empty());
}

TEST(Report, SignificanceMarkersAndCsv) {
  EXPECT_EQ(significance_marker(0.0005), "**");
  EXPECT_EQ(significance_marker(0.01), "*");
  EXPECT_EQ(significance_marker(0.2), "");
  const std::vector<int> y{0, 1};
  const auto r = confusion_and_metrics(one_hot({0, 0}, 2), y, 2);
  const auto path = std::filesystem::temp_directory_path() / "mfas_per_class.csv";
  write_per_class_csv(path, r, {10, 20});
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  EXPECT_NE(header.find("f1"), std::string::npos);
  EXPECT_EQ(row.rfind("0,10,", 0), 0u);
  std::filesystem::remove(path);
}

TEST(Report, JsonHasMacroFields) {
  const std::vector<int> y{0, 1};
  const auto j = confusion_and_metrics(one_hot(y, 2), y, 2).to_json();
  EXPECT_EQ(j.at("macro_f1"), 1.0);
  EXPECT_TRUE(j.contains("accuracy"));
}

}  // namespace
}  // namespace mfas::eval
