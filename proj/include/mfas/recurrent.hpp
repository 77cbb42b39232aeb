#pragma once

#include "mfas/layers.hpp"

#include <vector>

namespace mfas {

/// Integer token sequences, one row per sample; token 0 is padding.
using TokenMatrix = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Lookup table with zero masking: token 0 maps to a masked position.
class Embedding {
 public:
  Embedding(int vocab_size, int width, Rng& rng);

  /// Embeddings of column `step` of `tokens`, shape (batch, width).
  Matrix forward(const TokenMatrix& tokens, int step) const;
  /// Scatters the gradient of one step back into the table.
  void backward(const TokenMatrix& tokens, int step, const Matrix& grad_out);
  /// 1.0 where the token is real, 0.0 where it is padding; shape (batch, steps).
  static Matrix mask(const TokenMatrix& tokens);

  std::vector<Parameter*> parameters() { return {&table_}; }
  const Parameter& table() const { return table_; }
  int vocab_size() const { return static_cast<int>(table_.value.rows()); }
  int width() const { return static_cast<int>(table_.value.cols()); }

 private:
  Parameter table_;
};

/// Single LSTM layer (gate order input, forget, cell, output) returning the
/// last hidden state. Masked steps carry the previous state through unchanged.
class Lstm {
 public:
  Lstm(int input_width, int units, Rng& rng);

  Matrix forward(const std::vector<Matrix>& inputs, const Matrix& mask);
  /// Gradient of the final hidden state in, per-step input gradients out.
  std::vector<Matrix> backward(const Matrix& grad_h);

  /// Final hidden state when the input projection x*W + b is precomputed.
  Matrix forward_projected(const std::vector<Matrix>& projected, const Matrix& mask) const;

  std::vector<Parameter*> parameters() { return {&kernel_, &recurrent_, &bias_}; }
  const Parameter& kernel() const { return kernel_; }
  const Parameter& recurrent_kernel() const { return recurrent_; }
  const Parameter& bias() const { return bias_; }
  int units() const { return units_; }

 private:
  struct StepCache {
    Matrix x, h_prev, c_prev, i, f, g, o, c, tanh_c;
    Eigen::VectorXd m;
    /// Leading active rows when the mask column is prefix-shaped, else -1.
    Eigen::Index active = -1;
  };

  int units_;
  Parameter kernel_;
  Parameter recurrent_;
  Parameter bias_;
  std::vector<StepCache> cache_;
};

}  // namespace mfas
