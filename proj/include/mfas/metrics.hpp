#pragma once

#include "mfas/records.hpp"
#include "mfas/tensor.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace mfas::eval {

struct ClassMetrics {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support() const { return tp + fn; }
};

struct MetricsReport {
  std::size_t instances = 0;
  double accuracy = 0.0;
  double top5 = 0.0;
  double top10 = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<ClassMetrics> per_class;

  nlohmann::json to_json() const;
};

/// Index of the largest entry per row; the lowest index wins ties.
std::vector<int> argmax_rows(const Matrix& probs);

/// One-vs-rest confusion per class from argmax predictions; zero
/// denominators give 0. Macro averages run over all classes.
MetricsReport confusion_and_metrics(const Matrix& probs, std::span<const int> labels, int num_classes);

/// Fraction of rows whose label ranks within the k largest entries (ties
/// ordered by lower index first). k is clamped to the class count.
double top_k_accuracy(const Matrix& probs, std::span<const int> labels, int k);

/// Mean of the probability rows of models whose modality is present.
/// unimodal[m] holds model m's rows for every record.
Matrix late_fusion_predict(const std::vector<Matrix>& unimodal, std::span<const std::uint8_t> presence);
RowVector late_fusion_row(const std::vector<RowVector>& rows, std::uint8_t presence);

/// n01: only B right, n10: only A right.
struct ContingencyTable {
  std::size_t n00 = 0;
  std::size_t n01 = 0;
  std::size_t n10 = 0;
  std::size_t n11 = 0;
  std::size_t total() const { return n00 + n01 + n10 + n11; }
};

ContingencyTable contingency(std::span<const int> pred_a, std::span<const int> pred_b, std::span<const int> labels);

struct McNemarResult {
  double statistic = 0.0;
  double p_value = 1.0;
};

/// Continuity-corrected statistic (|n01 - n10| - 1)^2 / (n01 + n10) with
/// p = erfc(sqrt(chi2 / 2)).
McNemarResult mcnemar_test(const ContingencyTable& table);
McNemarResult mcnemar_test(long long n01, long long n10);

/// Predicts class probabilities for a record set.
using RecordPredictor = std::function<Matrix(const data::RecordSet&)>;

struct SubsetResult {
  std::vector<std::size_t> modalities;
  std::size_t instances = 0;
  MetricsReport metrics;
  std::vector<int> predictions;
  std::vector<int> labels;
};

/// Records holding every modality of `subset`.
std::vector<std::size_t> records_with(const data::RecordSet& records, const std::vector<std::size_t>& subset);
/// The same records with every modality outside `subset` zero-filled and marked absent.
data::RecordSet restrict_to_subset(const data::RecordSet& records, const std::vector<std::size_t>& subset);

/// Keeps records containing the whole subset, restricts them to it and
/// evaluates. Zero qualifying records give an empty result.
SubsetResult subset_evaluate(const RecordPredictor& predictor, const data::RecordSet& records,
                             const std::vector<std::size_t>& subset, int num_classes);

/// Every non-empty modality subset, ordered by size then lexicographically.
std::vector<std::vector<std::size_t>> all_subsets(std::size_t modalities);

void write_per_class_csv(const std::filesystem::path& path, const MetricsReport& report,
                         const std::vector<int>& original_labels);

std::string significance_marker(double p_value);

}  // namespace mfas::eval
