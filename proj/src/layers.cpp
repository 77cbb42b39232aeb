#include "mfas/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace mfas {

Dense::Dense(int in_units, int out_units, Rng& rng) {
  if (in_units <= 0 || out_units <= 0) throw std::invalid_argument("dense: unit counts must be positive");
  const double limit = std::sqrt(6.0 / static_cast<double>(in_units + out_units));
  weight_.name = "kernel";
  weight_.value.resize(in_units, out_units);
  for (Eigen::Index i = 0; i < weight_.value.size(); ++i) {
    weight_.value.data()[i] = (2.0 * uniform01(rng) - 1.0) * limit;
  }
  weight_.zero_grad();
  bias_.name = "bias";
  bias_.value = Matrix::Zero(1, out_units);
  bias_.zero_grad();
}

Matrix Dense::forward(const Matrix& x, Mode) {
  if (x.cols() != weight_.value.rows()) throw std::invalid_argument("dense: input width mismatch");
  input_ = x;
  Matrix y = x * weight_.value;
  y.rowwise() += bias_.value.row(0);
  return y;
}

Matrix Dense::infer(const Matrix& x) const {
  if (x.cols() != weight_.value.rows()) throw std::invalid_argument("dense: input width mismatch");
  Matrix y = x * weight_.value;
  y.rowwise() += bias_.value.row(0);
  return y;
}

Matrix Dense::backward(const Matrix& grad_out) {
  weight_.grad.noalias() += input_.transpose() * grad_out;
  bias_.grad += grad_out.colwise().sum();
  if (input_grad_cols_ < 0 || input_grad_cols_ >= weight_.value.rows()) return grad_out * weight_.value.transpose();
  Matrix dx = Matrix::Zero(grad_out.rows(), weight_.value.rows());
  if (input_grad_cols_ > 0) {
    dx.rightCols(input_grad_cols_).noalias() = grad_out * weight_.value.bottomRows(input_grad_cols_).transpose();
  }
  return dx;
}

const char* to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::relu: return "relu";
    case ActivationKind::sigmoid: return "sigmoid";
    case ActivationKind::softmax: return "softmax";
  }
  return "?";
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix Activation::infer(const Matrix& x) const {
  switch (kind_) {
    case ActivationKind::relu: return x.cwiseMax(0.0);
    case ActivationKind::sigmoid: return (1.0 / (1.0 + (-x.array()).exp())).matrix();
    case ActivationKind::softmax: return softmax_rows(x);
  }
  return x;
}

Matrix Activation::forward(const Matrix& x, Mode) {
  input_ = x;
  output_ = infer(x);
  return output_;
}

Matrix Activation::backward(const Matrix& grad_out) {
  switch (kind_) {
    case ActivationKind::relu:
      return (input_.array() > 0.0).select(grad_out, 0.0);
    case ActivationKind::sigmoid:
      return (grad_out.array() * output_.array() * (1.0 - output_.array())).matrix();
    case ActivationKind::softmax: {
      // dx = y * (g - <g, y>) row by row.
      Eigen::VectorXd dots = (grad_out.array() * output_.array()).rowwise().sum();
      Matrix dx = grad_out;
      dx.colwise() -= dots;
      return (dx.array() * output_.array()).matrix();
    }
  }
  return grad_out;
}

BatchNorm::BatchNorm(int features, double momentum, double epsilon) : momentum_(momentum), epsilon_(epsilon) {
  if (features <= 0) throw std::invalid_argument("batch_norm: feature count must be positive");
  gamma_ = {"gamma", Matrix::Ones(1, features), Matrix::Zero(1, features), true};
  beta_ = {"beta", Matrix::Zero(1, features), Matrix::Zero(1, features), true};
  running_mean_ = {"moving_mean", Matrix::Zero(1, features), Matrix::Zero(1, features), false};
  running_var_ = {"moving_variance", Matrix::Ones(1, features), Matrix::Zero(1, features), false};
}

Matrix BatchNorm::forward(const Matrix& x, Mode mode) {
  if (x.cols() != gamma_.value.cols()) throw std::invalid_argument("batch_norm: input width mismatch");
  RowVector mean;
  RowVector var;
  used_batch_stats_ = mode == Mode::train;
  if (used_batch_stats_) {
    mean = x.colwise().mean();
    Matrix centered = x.rowwise() - mean;
    var = centered.array().square().colwise().mean().matrix();
    running_mean_.value.row(0) = momentum_ * running_mean_.value.row(0) + (1.0 - momentum_) * mean;
    running_var_.value.row(0) = momentum_ * running_var_.value.row(0) + (1.0 - momentum_) * var;
  } else {
    mean = running_mean_.value.row(0);
    var = running_var_.value.row(0);
  }
  inv_std_ = (var.array() + epsilon_).rsqrt().matrix();
  normalized_ = (x.rowwise() - mean).array().rowwise() * inv_std_.array();
  Matrix y = normalized_.array().rowwise() * gamma_.value.row(0).array();
  y.rowwise() += beta_.value.row(0);
  return y;
}

Matrix BatchNorm::infer(const Matrix& x) const {
  if (x.cols() != gamma_.value.cols()) throw std::invalid_argument("batch_norm: input width mismatch");
  const RowVector inv_std = (running_var_.value.row(0).array() + epsilon_).rsqrt().matrix();
  Matrix y = ((x.rowwise() - running_mean_.value.row(0)).array().rowwise() * (inv_std.array() * gamma_.value.row(0).array())).matrix();
  y.rowwise() += beta_.value.row(0);
  return y;
}

Matrix BatchNorm::backward(const Matrix& grad_out) {
  gamma_.grad.row(0) += (grad_out.array() * normalized_.array()).colwise().sum().matrix();
  beta_.grad.row(0) += grad_out.colwise().sum();
  Matrix dxhat = grad_out.array().rowwise() * gamma_.value.row(0).array();
  if (!used_batch_stats_) return dxhat.array().rowwise() * inv_std_.array();

  const double n = static_cast<double>(grad_out.rows());
  RowVector sum_dxhat = dxhat.colwise().sum();
  RowVector sum_dxhat_xhat = (dxhat.array() * normalized_.array()).colwise().sum().matrix();
  Matrix dx = (n * dxhat.array()).matrix();
  dx.rowwise() -= sum_dxhat;
  dx -= (normalized_.array().rowwise() * sum_dxhat_xhat.array()).matrix();
  return (dx.array().rowwise() * (inv_std_.array() / n)).matrix();
}

Dropout::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
}

Matrix Dropout::forward(const Matrix& x, Mode mode) {
  if (mode == Mode::infer || rate_ == 0.0) {
    mask_.resize(0, 0);
    return x;
  }
  if (!frozen_ || mask_.rows() != x.rows() || mask_.cols() != x.cols()) {
    mask_.resize(x.rows(), x.cols());
    const double keep_scale = 1.0 / (1.0 - rate_);
    for (Eigen::Index i = 0; i < mask_.size(); ++i) {
      mask_.data()[i] = uniform01(rng_) < rate_ ? 0.0 : keep_scale;
    }
  }
  return (x.array() * mask_.array()).matrix();
}

Matrix Dropout::infer(const Matrix& x) const { return x; }

Matrix Dropout::backward(const Matrix& grad_out) {
  if (mask_.size() == 0) return grad_out;
  return (grad_out.array() * mask_.array()).matrix();
}

Matrix GlobalAveragePool::infer(const Matrix& x) const {
  if (channels_ <= 0 || x.cols() % channels_ != 0) throw std::invalid_argument("global_average_pool: bad width");
  const auto positions = x.cols() / channels_;
  Matrix y = Matrix::Zero(x.rows(), channels_);
  for (Eigen::Index p = 0; p < positions; ++p) y += x.middleCols(p * channels_, channels_);
  return y / static_cast<double>(positions);
}

Matrix GlobalAveragePool::forward(const Matrix& x, Mode) {
  Matrix y = infer(x);
  positions_ = static_cast<int>(x.cols() / channels_);
  return y;
}

Matrix GlobalAveragePool::backward(const Matrix& grad_out) {
  Matrix dx(grad_out.rows(), static_cast<Eigen::Index>(positions_) * channels_);
  for (int p = 0; p < positions_; ++p) {
    dx.middleCols(static_cast<Eigen::Index>(p) * channels_, channels_) = grad_out / static_cast<double>(positions_);
  }
  return dx;
}

Sequential::Sequential(const Sequential& other) {
  layers_.reserve(other.layers_.size());
  for (const auto& layer : other.layers_) layers_.push_back(layer->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    *this = std::move(copy);
  }
  return *this;
}

Matrix Sequential::forward(const Matrix& x, Mode mode) {
  Matrix h = x;
  for (auto& layer : layers_) h = layer->forward(h, mode);
  return h;
}

std::vector<Matrix> Sequential::forward_all(const Matrix& x, Mode mode) {
  std::vector<Matrix> outputs;
  outputs.reserve(layers_.size());
  const Matrix* h = &x;
  for (auto& layer : layers_) {
    outputs.push_back(layer->forward(*h, mode));
    h = &outputs.back();
  }
  return outputs;
}

Matrix Sequential::infer(const Matrix& x) const {
  Matrix h = x;
  for (const auto& layer : layers_) h = layer->infer(h);
  return h;
}

std::vector<Matrix> Sequential::infer_all(const Matrix& x) const {
  std::vector<Matrix> outputs;
  outputs.reserve(layers_.size());
  const Matrix* h = &x;
  for (const auto& layer : layers_) {
    outputs.push_back(layer->infer(*h));
    h = &outputs.back();
  }
  return outputs;
}

Matrix Sequential::backward(const Matrix& grad_out) {
  Matrix g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& layer : layers_) {
    for (Parameter* p : layer->parameters()) out.push_back(p);
  }
  return out;
}

std::vector<const Parameter*> Sequential::parameters() const {
  std::vector<const Parameter*> out;
  for (const auto& layer : layers_) {
    for (Parameter* p : layer->parameters()) out.push_back(p);
  }
  return out;
}

void Sequential::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::uint64_t parameter_checksum(const std::vector<const Parameter*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : params) {
    h = content_hash(std::span<const double>(p->value.data(), static_cast<std::size_t>(p->value.size())), h);
  }
  return h;
}

}  // namespace mfas
