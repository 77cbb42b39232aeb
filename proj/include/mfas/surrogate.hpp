#pragma once

#include "mfas/checkpoint.hpp"
#include "mfas/fusion_config.hpp"
#include "mfas/layers.hpp"
#include "mfas/recurrent.hpp"

#include <cstdint>
#include <vector>

namespace mfas::search {

struct SurrogateOptions {
  int embedding_width = 100;
  int units = 100;
  double learning_rate = 1e-3;
  int epochs = 50;
  int batch_size = 64;
};

/// Embedding (zero-masked) -> LSTM -> Dense(1) + sigmoid regressor over
/// padded config token sequences.
class Surrogate {
 public:
  Surrogate(SearchSpace space, SurrogateOptions options, std::uint64_t seed);

  struct FitReport {
    double mse_before = 0.0;
    double mse_after = 0.0;
  };

  /// Warm-started training on the full dataset; a fresh Adam state per call.
  FitReport fit(const std::vector<FusionConfig>& configs, const std::vector<double>& scores, std::uint64_t seed);

  /// Row-at-a-time inference, so batch and single predictions agree bitwise.
  std::vector<double> predict(const std::vector<FusionConfig>& configs) const;
  double predict(const FusionConfig& config) const;
  double predict_tokens(const std::vector<int>& tokens) const;

  double mse(const std::vector<FusionConfig>& configs, const std::vector<double>& scores) const;

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);
  std::uint64_t checksum() const;

  const SearchSpace& space() const { return space_; }

 private:
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  Matrix forward_train(const TokenMatrix& tokens);
  void backward_train(const TokenMatrix& tokens, const Matrix& grad_out);
  /// Token table projected through the LSTM input kernel plus bias.
  Matrix projection_table() const;

  SearchSpace space_;
  SurrogateOptions options_;
  Embedding embedding_;
  Lstm lstm_;
  Dense head_;
  Activation sigmoid_{ActivationKind::sigmoid};
};

}  // namespace mfas::search
