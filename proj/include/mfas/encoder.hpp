#pragma once

#include "mfas/layers.hpp"
#include "mfas/optim.hpp"
#include "mfas/records.hpp"

#include <json.hpp>

#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <shared_mutex>
#include <string>
#include <tuple>
#include <vector>

namespace mfas::encoders {

struct EncoderHyperparams {
  std::vector<int> hidden{64, 64, 64};
  int penultimate = 32;
  LrSchedule schedule{1e-3, 0.95, 200};
  int batch_size = 256;
  int max_epochs = 1000;
  int patience = 10;
  double classifier_dropout = 0.0;

  nlohmann::json to_json() const;
  static EncoderHyperparams from_json(const nlohmann::json& j);
};

struct FusibleLayerInfo {
  std::string name;
  int index = 0;  // 1-based
  int width = 0;
  /// Per-sample shape of the layer output; rank 1 for dense layers.
  std::vector<std::size_t> sample_shape;
};

inline constexpr int kFusibleLayerCount = 6;

/// Unimodal MLP classifier exposing six fusible intermediate layers:
/// hidden1 activation, hidden2, hidden3, penultimate dense, logits, softmax.
class Encoder {
 public:
  Encoder(std::string modality, int input_dim, int num_classes, const EncoderHyperparams& hp, std::uint64_t seed);

  const std::string& modality() const { return modality_; }
  int input_dim() const { return input_dim_; }
  int num_classes() const { return num_classes_; }
  const EncoderHyperparams& hyperparams() const { return hp_; }
  const std::vector<FusibleLayerInfo>& fusible_layers() const { return fusible_; }
  int fusible_width(int index) const;

  /// Softmax class probabilities (inference mode).
  Matrix predict(const Matrix& x) const;
  /// Outputs of all fusible layers, element k holding layer k+1.
  std::vector<Matrix> fusible_outputs(const Matrix& x) const;
  /// Output of one fusible layer (1-based index).
  Matrix extract(int layer_index, const Matrix& x) const;

  /// Hash of every parameter value; changes whenever the encoder is retrained.
  std::uint64_t content_hash() const;

  Sequential& network() { return net_; }
  const Sequential& network() const { return net_; }

  /// nn checkpoint at `path` plus a JSON sidecar `path` + ".json" listing fusible layers.
  void save(const std::filesystem::path& path) const;
  static Encoder load(const std::filesystem::path& path);

 private:
  std::string modality_;
  int input_dim_;
  int num_classes_;
  EncoderHyperparams hp_;
  Sequential net_;
  std::vector<std::size_t> taps_;  // layer position producing each fusible output
  std::vector<FusibleLayerInfo> fusible_;
};

/// Tracks the best validation loss; update() returns true once `patience`
/// epochs pass without improvement.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  bool update(int epoch, double loss);
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  bool improved_last() const { return improved_last_; }

 private:
  int patience_;
  int best_epoch_ = 0;
  double best_loss_ = std::numeric_limits<double>::infinity();
  int since_best_ = 0;
  bool improved_last_ = false;
};

struct TrainingReport {
  int epochs_run = 0;
  int best_epoch = 0;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
};

struct TrainedEncoder {
  Encoder encoder;
  TrainingReport report;
};

/// Weighted cross-entropy training with early stopping on validation loss;
/// the best-validation weights are restored before returning.
TrainedEncoder train_encoder(const std::string& modality, const data::UnimodalSet& train, const data::UnimodalSet& val,
                             int num_classes, const EncoderHyperparams& hp, std::uint64_t seed);

/// Fixed-epoch training without any validation data.
TrainedEncoder retrain_encoder(const std::string& modality, const data::UnimodalSet& train, int num_classes,
                               int epochs, const EncoderHyperparams& hp, std::uint64_t seed);

/// Mean weighted cross-entropy of an encoder on a set.
double evaluate_loss(const Encoder& encoder, const data::UnimodalSet& set, const std::vector<double>& weights);

struct FusibleFeature {
  std::string modality;
  int layer_index = 0;
  Matrix values;
};

/// Feature cache keyed by (encoder content hash, layer index, batch id).
/// Concurrent readers, exclusive insertion.
class FeatureCache {
 public:
  using Key = std::tuple<std::uint64_t, int, std::uint64_t>;

  std::shared_ptr<const Matrix> find(const Key& key) const;
  std::shared_ptr<const Matrix> insert(const Key& key, Matrix values);
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<Key, std::shared_ptr<const Matrix>> entries_;
};

/// Deterministic inference-mode features of one fusible layer. When a cache
/// is given, results are looked up and stored under (hash, layer, batch_id).
FusibleFeature extract_features(const Encoder& encoder, int layer_index, const Matrix& batch,
                                FeatureCache* cache = nullptr, std::uint64_t batch_id = 0);

}  // namespace mfas::encoders
