#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <compare>
#include <span>
#include <string>
#include <vector>

namespace mfas::search {

/// One fusion layer: a fusible-layer index per modality (1-based) and an
/// activation index (1 = ReLU, 2 = sigmoid).
struct FusionLayerSpec {
  std::vector<int> layers;
  int activation = 1;

  auto operator<=>(const FusionLayerSpec&) const = default;
};

struct FusionConfig {
  std::vector<FusionLayerSpec> layers;

  std::size_t size() const { return layers.size(); }
  auto operator<=>(const FusionConfig&) const = default;
};

/// Layer counts per modality, activation count and maximum depth.
struct SearchSpace {
  std::vector<int> layer_counts{6, 6, 6, 6};
  int activations = 2;
  int max_layers = 4;

  std::size_t modality_count() const { return layer_counts.size(); }
  /// Number of distinct layer specs, i.e. prod(n_i) * k.
  long long specs_per_layer() const;
  /// Token vocabulary including the padding token 0.
  int vocab_size() const { return static_cast<int>(specs_per_layer()) + 1; }
  void validate() const;
};

using BigInt = boost::multiprecision::cpp_int;

/// (prod n_i * k)^L as an exact integer.
BigInt config_space_size(std::span<const int> layer_counts, int activations, int max_layers);

/// Every layer spec in mixed-radix order (first modality most significant, activation least).
std::vector<FusionLayerSpec> enumerate_layer_specs(const SearchSpace& space);
/// One single-layer config per layer spec, same order.
std::vector<FusionConfig> enumerate_first_layer_configs(const SearchSpace& space);

/// Token id >= 1 of a layer spec; ids follow enumeration order.
int spec_token(const FusionLayerSpec& spec, const SearchSpace& space);
FusionLayerSpec decode_token(int token, const SearchSpace& space);

/// Tokens of each layer followed by zeros up to length L.
std::vector<int> encode_config_tokens(const FusionConfig& config, const SearchSpace& space);
FusionConfig decode_config_tokens(std::span<const int> tokens, const SearchSpace& space);

bool is_valid(const FusionConfig& config, const SearchSpace& space);

/// Appends `spec` when the config is shorter than `level`, otherwise replaces
/// layer `level`. Earlier layers are never touched; later ones are kept.
FusionConfig progress_config(const FusionConfig& config, const FusionLayerSpec& spec, int level);
/// Every config of `sampled` combined with every spec, deduplicated, in first-seen order.
std::vector<FusionConfig> progress_configs(const std::vector<FusionConfig>& sampled,
                                           const std::vector<FusionLayerSpec>& specs, int level);

/// Compact text form, e.g. "3.1.6.2:relu|1.1.2.4:sigmoid".
std::string to_string(const FusionConfig& config);
/// Tokens joined by spaces, used in CSV exports.
std::string token_string(const FusionConfig& config, const SearchSpace& space);

}  // namespace mfas::search
