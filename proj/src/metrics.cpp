#include "mfas/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mfas::eval {

nlohmann::json MetricsReport::to_json() const {
  return {{"instances", instances},         {"accuracy", accuracy},   {"top5", top5},
          {"top10", top10},                 {"macro_precision", macro_precision},
          {"macro_recall", macro_recall},   {"macro_f1", macro_f1}};
}

std::vector<int> argmax_rows(const Matrix& probs) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < probs.cols(); ++c) {
      if (probs(r, c) > probs(r, best)) best = c;
    }
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

MetricsReport confusion_and_metrics(const Matrix& probs, std::span<const int> labels, int num_classes) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) throw std::invalid_argument("metrics: row count mismatch");
  MetricsReport report;
  report.instances = labels.size();
  report.per_class.resize(static_cast<std::size_t>(num_classes));
  if (labels.empty()) return report;
  const auto pred = argmax_rows(probs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    const int p = pred[i];
    if (y < 0 || y >= num_classes) throw std::invalid_argument("metrics: label out of range");
    if (p == y) {
      ++correct;
      ++report.per_class[static_cast<std::size_t>(y)].tp;
    } else {
      ++report.per_class[static_cast<std::size_t>(y)].fn;
      if (p < num_classes) ++report.per_class[static_cast<std::size_t>(p)].fp;
    }
  }
  for (auto& c : report.per_class) {
    c.tn = labels.size() - c.tp - c.fp - c.fn;
    c.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
    c.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
    c.f1 = c.precision + c.recall > 0.0 ? 2.0 * c.precision * c.recall / (c.precision + c.recall) : 0.0;
    report.macro_precision += c.precision;
    report.macro_recall += c.recall;
    report.macro_f1 += c.f1;
  }
  const double n = static_cast<double>(num_classes);
  report.macro_precision /= n;
  report.macro_recall /= n;
  report.macro_f1 /= n;
  report.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  report.top5 = top_k_accuracy(probs, labels, 5);
  report.top10 = top_k_accuracy(probs, labels, 10);
  return report;
}

double top_k_accuracy(const Matrix& probs, std::span<const int> labels, int k) {
  if (k < 1) throw std::invalid_argument("top_k: k must be >= 1");
  if (labels.empty()) return 0.0;
  const auto kk = std::min<Eigen::Index>(k, probs.cols());
  std::size_t hits = 0;
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    // Rank of y: classes strictly larger, or equal with a lower index, come first.
    Eigen::Index ahead = 0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      if (probs(r, c) > probs(r, y) || (probs(r, c) == probs(r, y) && c < y)) ++ahead;
    }
    if (ahead < kk) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

RowVector late_fusion_row(const std::vector<RowVector>& rows, std::uint8_t presence) {
  RowVector sum;
  int used = 0;
  for (std::size_t m = 0; m < rows.size(); ++m) {
    if (!((presence >> m) & 1U)) continue;
    sum = used == 0 ? rows[m] : RowVector(sum + rows[m]);
    ++used;
  }
  if (used == 0) throw std::invalid_argument("late fusion: record has no present modality");
  return sum / static_cast<double>(used);
}

Matrix late_fusion_predict(const std::vector<Matrix>& unimodal, std::span<const std::uint8_t> presence) {
  if (unimodal.empty()) throw std::invalid_argument("late fusion: no models");
  Matrix out(static_cast<Eigen::Index>(presence.size()), unimodal.front().cols());
  std::vector<RowVector> rows(unimodal.size());
  for (std::size_t r = 0; r < presence.size(); ++r) {
    for (std::size_t m = 0; m < unimodal.size(); ++m) rows[m] = unimodal[m].row(static_cast<Eigen::Index>(r));
    out.row(static_cast<Eigen::Index>(r)) = late_fusion_row(rows, presence[r]);
  }
  return out;
}

ContingencyTable contingency(std::span<const int> pred_a, std::span<const int> pred_b, std::span<const int> labels) {
  if (pred_a.size() != labels.size() || pred_b.size() != labels.size()) {
    throw std::invalid_argument("contingency: length mismatch");
  }
  ContingencyTable t;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool a = pred_a[i] == labels[i];
    const bool b = pred_b[i] == labels[i];
    if (a && b) {
      ++t.n11;
    } else if (a) {
      ++t.n10;
    } else if (b) {
      ++t.n01;
    } else {
      ++t.n00;
    }
  }
  return t;
}

McNemarResult mcnemar_test(long long n01, long long n10) {
  if (n01 < 0 || n10 < 0) throw std::invalid_argument("mcnemar: negative counts");
  McNemarResult r;
  if (n01 + n10 == 0) return r;
  const double d = std::abs(static_cast<double>(n01 - n10)) - 1.0;
  r.statistic = d * d / static_cast<double>(n01 + n10);
  r.p_value = std::erfc(std::sqrt(r.statistic / 2.0));
  return r;
}

McNemarResult mcnemar_test(const ContingencyTable& table) {
  return mcnemar_test(static_cast<long long>(table.n01), static_cast<long long>(table.n10));
}

std::vector<std::size_t> records_with(const data::RecordSet& records, const std::vector<std::size_t>& subset) {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (std::all_of(subset.begin(), subset.end(), [&](std::size_t m) { return records.has(r, m); })) rows.push_back(r);
  }
  return rows;
}

data::RecordSet restrict_to_subset(const data::RecordSet& records, const std::vector<std::size_t>& subset) {
  data::RecordSet out = records;
  std::uint8_t keep = 0;
  for (auto m : subset) keep = static_cast<std::uint8_t>(keep | (1U << m));
  for (std::size_t m = 0; m < out.modality_count(); ++m) {
    if ((keep >> m) & 1U) continue;
    out.inputs[m].setZero();
  }
  for (auto& p : out.presence) p = static_cast<std::uint8_t>(p & keep);
  return out;
}

SubsetResult subset_evaluate(const RecordPredictor& predictor, const data::RecordSet& records,
                             const std::vector<std::size_t>& subset, int num_classes) {
  if (subset.empty()) throw std::invalid_argument("subset_evaluate: empty subset");
  SubsetResult result;
  result.modalities = subset;
  const auto rows = records_with(records, subset);
  result.instances = rows.size();
  result.metrics.per_class.resize(static_cast<std::size_t>(num_classes));
  if (rows.empty()) return result;
  const auto restricted = restrict_to_subset(records.select(rows), subset);
  const Matrix probs = predictor(restricted);
  result.metrics = confusion_and_metrics(probs, restricted.labels, num_classes);
  result.predictions = argmax_rows(probs);
  result.labels = restricted.labels;
  return result;
}

std::vector<std::vector<std::size_t>> all_subsets(std::size_t modalities) {
  std::vector<std::vector<std::size_t>> out;
  for (unsigned mask = 1; mask < (1U << modalities); ++mask) {
    std::vector<std::size_t> s;
    for (std::size_t m = 0; m < modalities; ++m) {
      if ((mask >> m) & 1U) s.push_back(m);
    }
    out.push_back(std::move(s));
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    return a.size() != b.size() ? a.size() < b.size() : a < b;
  });
  return out;
}

void write_per_class_csv(const std::filesystem::path& path, const MetricsReport& report,
                         const std::vector<int>& original_labels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "class,original_label,support,tp,fp,fn,tn,precision,recall,f1\n";
  out.precision(10);
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    const auto& m = report.per_class[c];
    out << c << ',' << (c < original_labels.size() ? original_labels[c] : static_cast<int>(c)) << ',' << m.support()
        << ',' << m.tp << ',' << m.fp << ',' << m.fn << ',' << m.tn << ',' << m.precision << ',' << m.recall << ','
        << m.f1 << '\n';
  }
}

std::string significance_marker(double p_value) {
  if (p_value < 0.001) return "**";
  if (p_value < 0.05) return "*";
  return "";
}

}  // namespace mfas::eval
