#include "mfas/tensor.hpp"

#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace mfas {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)), data_(product(shape_), 0.0) {
  for (auto d : shape_) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
  }
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw std::invalid_argument("tensor dimensions must be positive");
  }
  if (product(shape_) != data_.size()) throw std::invalid_argument("tensor shape does not match data length");
}

Tensor Tensor::from_matrix(const Matrix& m) {
  std::vector<double> data(m.data(), m.data() + m.size());
  return Tensor({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())}, std::move(data));
}

Matrix Tensor::to_matrix() const {
  if (rank() == 1) {
    return Eigen::Map<const Matrix>(data_.data(), 1, static_cast<Eigen::Index>(shape_[0]));
  }
  if (rank() != 2) throw std::invalid_argument("to_matrix requires a rank-1 or rank-2 tensor");
  return Eigen::Map<const Matrix>(data_.data(), static_cast<Eigen::Index>(shape_[0]),
                                  static_cast<Eigen::Index>(shape_[1]));
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor global_average_pool(const Tensor& features) {
  if (features.empty()) throw std::invalid_argument("global_average_pool: empty tensor");
  if (features.rank() < 2) throw std::invalid_argument("global_average_pool: expected a batch axis");
  if (features.rank() == 2) return features;

  const auto& shape = features.shape();
  const std::size_t batch = shape.front();
  const std::size_t channels = shape.back();
  const std::size_t positions = features.size() / (batch * channels);

  Tensor out({batch, channels});
  for (std::size_t b = 0; b < batch; ++b) {
    const double* sample = features.data().data() + b * positions * channels;
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t c = 0; c < channels; ++c) out[b * channels + c] += sample[p * channels + c];
    }
    for (std::size_t c = 0; c < channels; ++c) out[b * channels + c] /= static_cast<double>(positions);
  }
  return out;
}

std::uint64_t content_hash(std::span<const double> values, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char byte : bytes) {
      h ^= byte;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace mfas
