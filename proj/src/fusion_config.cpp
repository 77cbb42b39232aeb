#include "mfas/fusion_config.hpp"

#include <set>
#include <stdexcept>

namespace mfas::search {

long long SearchSpace::specs_per_layer() const {
  long long total = activations;
  for (int n : layer_counts) total *= n;
  return total;
}

void SearchSpace::validate() const {
  if (layer_counts.empty()) throw std::invalid_argument("search space: no modalities");
  for (int n : layer_counts) {
    if (n < 1) throw std::invalid_argument("search space: layer counts must be >= 1");
  }
  if (activations < 1 || activations > 2) throw std::invalid_argument("search space: activations must be 1 or 2");
  if (max_layers < 1) throw std::invalid_argument("search space: max_layers must be >= 1");
  if (specs_per_layer() >= (1LL << 30)) throw std::invalid_argument("search space: too many layer specs");
}

BigInt config_space_size(std::span<const int> layer_counts, int activations, int max_layers) {
  BigInt per_layer = activations;
  for (int n : layer_counts) per_layer *= n;
  return boost::multiprecision::pow(per_layer, static_cast<unsigned>(max_layers));
}

int spec_token(const FusionLayerSpec& spec, const SearchSpace& space) {
  if (spec.layers.size() != space.modality_count()) throw std::invalid_argument("layer spec: wrong modality count");
  long long id = 0;
  for (std::size_t m = 0; m < spec.layers.size(); ++m) {
    const int n = space.layer_counts[m];
    if (spec.layers[m] < 1 || spec.layers[m] > n) throw std::out_of_range("layer spec: layer index out of range");
    id = id * n + (spec.layers[m] - 1);
  }
  if (spec.activation < 1 || spec.activation > space.activations) {
    throw std::out_of_range("layer spec: activation index out of range");
  }
  id = id * space.activations + (spec.activation - 1);
  return static_cast<int>(id + 1);
}

FusionLayerSpec decode_token(int token, const SearchSpace& space) {
  if (token < 1 || token >= space.vocab_size()) throw std::out_of_range("token out of range");
  long long id = token - 1;
  FusionLayerSpec spec;
  spec.activation = static_cast<int>(id % space.activations) + 1;
  id /= space.activations;
  spec.layers.resize(space.modality_count());
  for (std::size_t m = space.modality_count(); m-- > 0;) {
    const int n = space.layer_counts[m];
    spec.layers[m] = static_cast<int>(id % n) + 1;
    id /= n;
  }
  return spec;
}

std::vector<FusionLayerSpec> enumerate_layer_specs(const SearchSpace& space) {
  space.validate();
  std::vector<FusionLayerSpec> out;
  out.reserve(static_cast<std::size_t>(space.specs_per_layer()));
  for (int t = 1; t < space.vocab_size(); ++t) out.push_back(decode_token(t, space));
  return out;
}

std::vector<FusionConfig> enumerate_first_layer_configs(const SearchSpace& space) {
  std::vector<FusionConfig> out;
  for (auto& spec : enumerate_layer_specs(space)) out.push_back(FusionConfig{{std::move(spec)}});
  return out;
}

std::vector<int> encode_config_tokens(const FusionConfig& config, const SearchSpace& space) {
  if (config.size() > static_cast<std::size_t>(space.max_layers)) throw std::invalid_argument("config longer than L");
  std::vector<int> tokens(static_cast<std::size_t>(space.max_layers), 0);
  for (std::size_t l = 0; l < config.size(); ++l) tokens[l] = spec_token(config.layers[l], space);
  return tokens;
}

FusionConfig decode_config_tokens(std::span<const int> tokens, const SearchSpace& space) {
  FusionConfig config;
  for (int t : tokens) {
    if (t == 0) break;
    config.layers.push_back(decode_token(t, space));
  }
  return config;
}

bool is_valid(const FusionConfig& config, const SearchSpace& space) {
  if (config.layers.empty() || config.size() > static_cast<std::size_t>(space.max_layers)) return false;
  for (const auto& spec : config.layers) {
    if (spec.layers.size() != space.modality_count()) return false;
    for (std::size_t m = 0; m < spec.layers.size(); ++m) {
      if (spec.layers[m] < 1 || spec.layers[m] > space.layer_counts[m]) return false;
    }
    if (spec.activation < 1 || spec.activation > space.activations) return false;
  }
  return true;
}

FusionConfig progress_config(const FusionConfig& config, const FusionLayerSpec& spec, int level) {
  if (level < 1) throw std::invalid_argument("progression level must be >= 1");
  const auto pos = static_cast<std::size_t>(level - 1);
  if (config.size() < pos) throw std::invalid_argument("config too short for progression level");
  FusionConfig out = config;
  if (out.size() == pos) {
    out.layers.push_back(spec);
  } else {
    out.layers[pos] = spec;
  }
  return out;
}

std::vector<FusionConfig> progress_configs(const std::vector<FusionConfig>& sampled,
                                           const std::vector<FusionLayerSpec>& specs, int level) {
  std::vector<FusionConfig> out;
  std::set<FusionConfig> seen;
  for (const auto& config : sampled) {
    for (const auto& spec : specs) {
      FusionConfig next = progress_config(config, spec, level);
      if (seen.insert(next).second) out.push_back(std::move(next));
    }
  }
  return out;
}

std::string to_string(const FusionConfig& config) {
  std::string s;
  for (std::size_t l = 0; l < config.size(); ++l) {
    if (l > 0) s += '|';
    const auto& spec = config.layers[l];
    for (std::size_t m = 0; m < spec.layers.size(); ++m) {
      if (m > 0) s += '.';
      s += std::to_string(spec.layers[m]);
    }
    s += spec.activation == 1 ? ":relu" : ":sigmoid";
  }
  return s;
}

std::string token_string(const FusionConfig& config, const SearchSpace& space) {
  std::string s;
  for (int t : encode_config_tokens(config, space)) {
    if (!s.empty()) s += ' ';
    s += std::to_string(t);
  }
  return s;
}

}  // namespace mfas::search
