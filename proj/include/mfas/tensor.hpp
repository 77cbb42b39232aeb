#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace mfas {

// Batch-major dense matrix used by every layer: one row per sample.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

/// N-dimensional array of 64-bit floats in row-major order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor from_matrix(const Matrix& m);
  /// Rank-2 tensors map to (rows, cols); rank-1 tensors become a single row.
  Matrix to_matrix() const;

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool all_finite() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Averages a batch of channels-last feature maps over every axis except the
/// batch and channel axes: (B, d1, ..., dk, C) -> (B, C). Input of rank 2
/// (one feature vector per sample) is returned unchanged.
Tensor global_average_pool(const Tensor& features);

/// FNV-1a over the raw bytes of a sequence of doubles.
std::uint64_t content_hash(std::span<const double> values, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace mfas
