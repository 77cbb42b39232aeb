#pragma once

#include "mfas/fusion.hpp"
#include "mfas/search.hpp"

#include <vector>

namespace mfas::search {

struct EvalOptions {
  int epochs = 2;
  int batch_size = 256;
  int neurons = 64;
  double learning_rate = 1e-3;
  std::size_t shuffle_buffer = 12;
};

/// Trains candidate fusion networks for a few epochs on cached encoder
/// features and scores them by validation macro-F1. Safe to call from
/// several threads as long as each call gets its own weight store.
class FusionEvaluator {
 public:
  FusionEvaluator(const std::vector<const encoders::Encoder*>& encoders, const data::RecordSet& train,
                  const data::RecordSet& val, int num_classes, EvalOptions options,
                  encoders::FeatureCache* cache = nullptr);

  double operator()(const FusionConfig& config, SharedWeightStore& weights, std::uint64_t seed) const;

  const std::vector<std::vector<fusion::FusibleLayerInfo>>& registries() const { return registries_; }
  const EvalOptions& options() const { return options_; }

 private:
  std::vector<std::vector<fusion::FusibleLayerInfo>> registries_;
  int num_classes_;
  EvalOptions options_;
  std::vector<fusion::Batch> batches_;
  fusion::FeatureBank val_;
  std::vector<int> val_labels_;
  std::vector<double> class_weights_;
};

/// Evaluates one config with `evaluator` and records the score in `results`.
double evaluate_config(const FusionConfig& config, const FusionEvaluator& evaluator, SharedWeightStore& weights,
                       ResultStore& results, std::uint64_t seed, int level = 1, int iteration = 1);

}  // namespace mfas::search
