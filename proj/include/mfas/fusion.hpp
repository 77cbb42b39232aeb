#pragma once

#include "mfas/encoder.hpp"
#include "mfas/fusion_config.hpp"
#include "mfas/layers.hpp"
#include "mfas/optim.hpp"
#include "mfas/records.hpp"

#include <json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mfas::fusion {

using encoders::FusibleLayerInfo;
using search::FusionConfig;

/// Frozen-encoder features for a set of records: one matrix per
/// (modality, fusible layer), rows aligned with the records.
struct FeatureBank {
  std::size_t modalities = 0;
  int layers = encoders::kFusibleLayerCount;
  std::vector<Matrix> slots;

  FeatureBank() = default;
  FeatureBank(std::size_t modality_count, int layer_count)
      : modalities(modality_count), layers(layer_count), slots(modality_count * static_cast<std::size_t>(layer_count)) {}

  Matrix& at(std::size_t modality, int layer) { return slots[modality * static_cast<std::size_t>(layers) + static_cast<std::size_t>(layer - 1)]; }
  const Matrix& at(std::size_t modality, int layer) const {
    return slots[modality * static_cast<std::size_t>(layers) + static_cast<std::size_t>(layer - 1)];
  }
  std::size_t rows() const;
  FeatureBank select(const std::vector<std::size_t>& rows) const;
  FeatureBank slice(std::size_t start, std::size_t count) const;
};

/// Features of every fusible layer. Absent modalities are zero rows in the
/// records, so their features are the encoder's response to a zero input.
/// With a cache, matrices are stored under (encoder hash, layer, cache_id).
FeatureBank compute_feature_bank(const std::vector<const encoders::Encoder*>& encoders, const data::RecordSet& records,
                                 encoders::FeatureCache* cache = nullptr, std::uint64_t cache_id = 0);

/// One-row bank holding each encoder's features for an all-zero input.
FeatureBank zero_input_features(const std::vector<const encoders::Encoder*>& encoders);

struct NetworkOptions {
  std::vector<int> neurons;  // one per fusion layer
  bool batch_norm = false;
  std::vector<double> dropouts;  // one per fusion layer; empty means none
  double classifier_dropout = 0.0;
};

/// Eq. h_l = act_l(W_l [x_1; ...; x_m; h_{l-1}]) followed by a softmax
/// classifier. Batch norm, when enabled, sits between the dense transform
/// and the activation. Only fusion and classifier weights are trainable.
class FusionNetwork {
 public:
  FusionNetwork(FusionConfig config, std::vector<std::vector<FusibleLayerInfo>> registries, int num_classes,
                NetworkOptions options, std::uint64_t seed);

  Matrix forward(const FeatureBank& bank, Mode mode);
  Matrix backward(const Matrix& grad_out);
  Matrix infer(const FeatureBank& bank) const;

  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  void zero_grad();
  std::size_t trainable_parameter_count() const;

  const FusionConfig& config() const { return config_; }
  int num_classes() const { return num_classes_; }
  std::size_t depth() const { return stacks_.size(); }
  /// Concatenated input width of fusion layer l (1-based).
  int input_width(std::size_t l) const { return input_widths_[l - 1]; }
  const NetworkOptions& options() const { return options_; }
  /// Dense transform of fusion layer l (1-based); index 0 of its stack.
  Dense& dense(std::size_t l) { return static_cast<Dense&>(stacks_[l - 1].layer(0)); }
  Dense& classifier_dense();

  struct SharedSlot {
    std::string key;
    std::vector<Parameter*> params;
  };
  /// Weight-sharing slots: one per fusion layer, keyed by position, input
  /// width signature, activation and unit count, plus one for the classifier.
  std::vector<SharedSlot> shared_slots();

  /// Outputs of every fusion layer from the last forward (h_1..h_L).
  const std::vector<Matrix>& hidden() const { return hidden_; }

 private:
  Matrix gather(const FeatureBank& bank, std::size_t l, const Matrix* previous) const;

  FusionConfig config_;
  std::vector<std::vector<FusibleLayerInfo>> registries_;
  int num_classes_;
  NetworkOptions options_;
  std::vector<int> input_widths_;
  std::vector<Sequential> stacks_;
  Sequential classifier_;
  std::vector<Matrix> hidden_;
};

/// Builds the network after checking every selected layer against the registries.
FusionNetwork build_fusion_network(const FusionConfig& config,
                                   const std::vector<std::vector<FusibleLayerInfo>>& registries, int num_classes,
                                   const NetworkOptions& options, std::uint64_t seed);

/// Closed-form trainable parameter count for a config of length L:
/// sum_l (in_l + 1) u_l + 2 u_l (with batch norm) + (u_L + 1) C.
std::size_t expected_parameter_count(const FusionConfig& config,
                                     const std::vector<std::vector<FusibleLayerInfo>>& registries, int num_classes,
                                     const NetworkOptions& options);

/// Per (record, modality) drop decisions: each present modality is dropped
/// independently with its rate. Returned as a records x modalities 0/1 matrix.
Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> sample_modality_drops(
    const std::vector<std::uint8_t>& presence, std::size_t modalities, const std::vector<double>& rates, Rng& rng);

/// Zeroes dropped modality inputs of a record batch and clears their presence bits.
/// Absent modalities are already zero and stay that way; nothing is rescaled.
data::RecordSet apply_multimodal_dropout(const data::RecordSet& batch, const std::vector<double>& rates, Rng& rng);

/// Feature-level equivalent of input dropout for frozen encoders: dropped
/// (record, modality) rows are replaced with the zero-input features.
void apply_drops_to_bank(FeatureBank& bank,
                         const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& drops,
                         const FeatureBank& zero_bank);

/// A cached training batch.
struct Batch {
  FeatureBank features;
  std::vector<int> labels;
  std::vector<std::uint8_t> presence;
};

/// Fixed contiguous batches over the given order of rows.
std::vector<Batch> make_batches(const FeatureBank& bank, const data::RecordSet& records, std::size_t batch_size);

/// Batch order for one epoch: a streaming shuffle with a buffer of `buffer` slots.
std::vector<std::size_t> buffered_shuffle_order(std::size_t count, std::size_t buffer, Rng& rng);

struct TrainOptions {
  int epochs = 2;
  LrSchedule schedule{1e-3, 1.0, 1};
  /// Early-stopping patience on validation loss; 0 disables it.
  int patience = 0;
  double md_rate = 0.0;
  std::size_t shuffle_buffer = 12;
  std::uint64_t seed = 0;
};

struct TrainReport {
  int epochs_run = 0;
  int best_epoch = 0;
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  /// Hash of the first batch's features in epoch 1 before multimodal dropout.
  std::uint64_t first_batch_checksum = 0;
};

/// Weighted cross-entropy training. With validation data and patience > 0
/// the best-validation weights are restored at the end.
TrainReport train_network(FusionNetwork& network, const std::vector<Batch>& batches, const std::vector<double>& weights,
                          const TrainOptions& options, const FeatureBank* zero_bank = nullptr,
                          const FeatureBank* val = nullptr, const std::vector<int>* val_labels = nullptr);

/// Class probabilities for records; absent modalities are zero-filled upstream.
Matrix predict(const FusionNetwork& network, const FeatureBank& bank);

struct FinalPlan {
  std::vector<int> neurons{512, 512, 512, 512};
  std::vector<double> dropouts{0.0, 0.0, 0.0, 0.4};
  double classifier_dropout = 0.4;
  bool batch_norm = true;
  LrSchedule schedule{5e-4, 0.9, 200};
  int epochs = 100;
  int patience = 10;
  int batch_size = 256;
  double md_rate = 0.125;

  /// Options for a config of the given length, taking the last `length` list entries.
  NetworkOptions network_options(std::size_t length) const;
  nlohmann::json to_json() const;
  static FinalPlan from_json(const nlohmann::json& j);
};

/// nn checkpoint of the fusion weights plus a JSON manifest with the config tokens and plan.
void save_network(const std::filesystem::path& path, const FusionNetwork& network, const search::SearchSpace& space,
                  const nlohmann::json& extra);
FusionNetwork load_network(const std::filesystem::path& path, const std::vector<std::vector<FusibleLayerInfo>>& registries,
                           const search::SearchSpace& space);

}  // namespace mfas::fusion
