#pragma once

#include "mfas/random.hpp"
#include "mfas/tensor.hpp"

#include <memory>
#include <string>
#include <vector>

namespace mfas {

enum class Mode { train, infer };

/// A named trainable (or buffered) array together with its gradient.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Layer interface. forward() caches whatever backward() needs; backward()
/// accumulates parameter gradients and returns the gradient w.r.t. the input.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Matrix forward(const Matrix& x, Mode mode) = 0;
  virtual Matrix backward(const Matrix& grad_out) = 0;
  /// Inference-mode forward that touches no cached state.
  virtual Matrix infer(const Matrix& x) const = 0;

  /// Trainable parameters and non-trainable buffers (e.g. running statistics).
  virtual std::vector<Parameter*> parameters() { return {}; }
  virtual std::string kind() const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
};

class Dense final : public Layer {
 public:
  /// Glorot-uniform weights of shape (in_units, out_units), zero bias.
  Dense(int in_units, int out_units, Rng& rng);

  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& grad_out) override;
  Matrix infer(const Matrix& x) const override;
  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::string kind() const override { return "dense"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

  int in_units() const { return static_cast<int>(weight_.value.rows()); }
  int out_units() const { return static_cast<int>(weight_.value.cols()); }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }
  /// Restrict the returned input gradient to the last `cols` input columns;
  /// the rest are left zero. Negative means all columns.
  void set_input_grad_cols(int cols) { input_grad_cols_ = cols; }

 private:
  Parameter weight_;
  Parameter bias_;
  Matrix input_;
  int input_grad_cols_ = -1;
};

enum class ActivationKind { relu, sigmoid, softmax };

const char* to_string(ActivationKind kind);

class Activation final : public Layer {
 public:
  explicit Activation(ActivationKind kind) : kind_(kind) {}

  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& grad_out) override;
  Matrix infer(const Matrix& x) const override;
  std::string kind() const override { return to_string(kind_); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Activation>(*this); }

  ActivationKind activation() const { return kind_; }

 private:
  ActivationKind kind_;
  Matrix input_;
  Matrix output_;
};

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& logits);

/// Per-feature batch normalization. Training mode normalizes with batch
/// statistics and updates running averages; inference uses the running values.
class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(int features, double momentum = 0.99, double epsilon = 1e-5);

  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& grad_out) override;
  Matrix infer(const Matrix& x) const override;
  std::vector<Parameter*> parameters() override { return {&gamma_, &beta_, &running_mean_, &running_var_}; }
  std::string kind() const override { return "batch_norm"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }

  /// Normalized activations from the last training-mode forward, before scale/shift.
  const Matrix& normalized() const { return normalized_; }

 private:
  double momentum_;
  double epsilon_;
  Parameter gamma_;
  Parameter beta_;
  Parameter running_mean_;
  Parameter running_var_;
  Matrix normalized_;
  RowVector inv_std_;
  bool used_batch_stats_ = false;
};

/// Inverted dropout: kept units are scaled by 1/(1-rate) during training.
class Dropout final : public Layer {
 public:
  Dropout(double rate, std::uint64_t seed);

  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& grad_out) override;
  Matrix infer(const Matrix& x) const override;
  std::string kind() const override { return "dropout"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }

  double rate() const { return rate_; }
  /// Reuse the last sampled mask on subsequent training forwards (gradient checks).
  void freeze_mask(bool frozen) { frozen_ = frozen; }

 private:
  double rate_;
  Rng rng_;
  Matrix mask_;
  bool frozen_ = false;
};

/// Layer form of global average pooling on flattened channels-last samples:
/// each input row holds positions*channels values, each output row `channels`.
class GlobalAveragePool final : public Layer {
 public:
  explicit GlobalAveragePool(int channels) : channels_(channels) {}

  Matrix forward(const Matrix& x, Mode mode) override;
  Matrix backward(const Matrix& grad_out) override;
  Matrix infer(const Matrix& x) const override;
  std::string kind() const override { return "global_average_pool"; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAveragePool>(*this); }

 private:
  int channels_;
  int positions_ = 0;
};

/// Linear stack of layers. Copying deep-clones every layer.
class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <class L, class... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Matrix forward(const Matrix& x, Mode mode);
  /// Output of every layer in order; element i is the output of layer i.
  std::vector<Matrix> forward_all(const Matrix& x, Mode mode);
  Matrix infer(const Matrix& x) const;
  std::vector<Matrix> infer_all(const Matrix& x) const;
  Matrix backward(const Matrix& grad_out);

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  void zero_grad();

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }
  const Layer& layer(std::size_t i) const { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Hash over the values of every parameter, in order.
std::uint64_t parameter_checksum(const std::vector<const Parameter*>& params);

}  // namespace mfas
