#pragma once

#include "mfas/tensor.hpp"

#include <cstddef>
#include <map>
#include <span>
#include <vector>

namespace mfas {

/// Inverse-frequency class weights w_c = N / (|C| * N_c).
struct ClassWeights {
  std::map<int, double> weights;
  std::map<int, std::size_t> counts;
  std::size_t total_instances = 0;
  std::size_t class_count = 0;

  double at(int label) const;
  /// Dense lookup table over [0, num_classes); classes without a weight get 1.
  std::vector<double> dense(int num_classes) const;
};

ClassWeights compute_class_weights(const std::map<int, std::size_t>& counts);
/// Counts labels and forwards to the map overload.
ClassWeights compute_class_weights(std::span<const int> labels);

struct LossResult {
  double value = 0.0;
  Matrix grad;  // d loss / d probs
};

inline constexpr double kProbabilityFloor = 1e-12;

/// Mean over the batch of w_y * -log(max(p_y, 1e-12)) and its gradient
/// with respect to the probability rows.
LossResult weighted_ce(const Matrix& probs, std::span<const int> labels, std::span<const double> dense_weights);

double weighted_ce_loss(const Matrix& probs, std::span<const int> labels, const ClassWeights& weights);

}  // namespace mfas
