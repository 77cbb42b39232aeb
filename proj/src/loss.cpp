#include "mfas/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mfas {

double ClassWeights::at(int label) const {
  auto it = weights.find(label);
  return it == weights.end() ? 1.0 : it->second;
}

std::vector<double> ClassWeights::dense(int num_classes) const {
  std::vector<double> out(static_cast<std::size_t>(num_classes), 1.0);
  for (const auto& [label, w] : weights) {
    if (label >= 0 && label < num_classes) out[static_cast<std::size_t>(label)] = w;
  }
  return out;
}

ClassWeights compute_class_weights(const std::map<int, std::size_t>& counts) {
  if (counts.empty()) throw std::invalid_argument("no classes");
  ClassWeights out;
  out.counts = counts;
  out.class_count = counts.size();
  for (const auto& [label, n] : counts) {
    if (n == 0) throw std::invalid_argument("class counts must be at least 1");
    out.total_instances += n;
  }
  const double n_total = static_cast<double>(out.total_instances);
  const double n_classes = static_cast<double>(out.class_count);
  for (const auto& [label, n] : counts) out.weights[label] = n_total / (n_classes * static_cast<double>(n));
  return out;
}

ClassWeights compute_class_weights(std::span<const int> labels) {
  std::map<int, std::size_t> counts;
  for (int y : labels) ++counts[y];
  return compute_class_weights(counts);
}

LossResult weighted_ce(const Matrix& probs, std::span<const int> labels, std::span<const double> dense_weights) {
  if (static_cast<std::size_t>(probs.rows()) != labels.size()) {
    throw std::invalid_argument("weighted_ce: batch size and label count differ");
  }
  if (probs.rows() == 0) throw std::invalid_argument("weighted_ce: empty batch");
  LossResult out;
  out.grad = Matrix::Zero(probs.rows(), probs.cols());
  const double inv_batch = 1.0 / static_cast<double>(probs.rows());
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= probs.cols()) throw std::invalid_argument("weighted_ce: label out of range");
    const double w = static_cast<std::size_t>(y) < dense_weights.size() ? dense_weights[static_cast<std::size_t>(y)] : 1.0;
    const double p = probs(r, y);
    const double clamped = std::max(p, kProbabilityFloor);
    out.value += w * -std::log(clamped) * inv_batch;
    if (p > kProbabilityFloor) out.grad(r, y) = -w * inv_batch / p;
  }
  return out;
}

double weighted_ce_loss(const Matrix& probs, std::span<const int> labels, const ClassWeights& weights) {
  const auto dense = weights.dense(static_cast<int>(probs.cols()));
  return weighted_ce(probs, labels, dense).value;
}

}  // namespace mfas
