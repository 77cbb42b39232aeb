#pragma once

#include "mfas/random.hpp"

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mfas::data {

struct Image {
  std::uint64_t id = 0;
  std::vector<double> features;
};

/// One specimen: a label and, per modality, zero or more images.
struct Observation {
  std::uint64_t id = 0;
  int label = 0;
  std::vector<std::vector<Image>> modalities;

  bool empty() const;
  std::size_t image_count(std::size_t modality) const { return modalities[modality].size(); }
};

struct Dataset {
  std::vector<std::string> modality_names;
  std::vector<int> feature_dims;
  int num_classes = 0;
  std::vector<Observation> observations;

  std::size_t modality_count() const { return modality_names.size(); }
};

/// Parameters of the synthetic long-tailed multimodal corpus.
struct SyntheticSpec {
  int num_classes = 12;
  std::vector<std::string> modalities{"flower", "leaf", "fruit", "stem"};
  /// availability[c][m]; empty means default_availability().
  std::vector<std::vector<bool>> availability;
  double zipf_exponent = 1.0;
  int total_observations = 2000;
  int feature_dim = 16;
  /// Classes sharing a prototype group within one modality differ only by
  /// `class_offset`. With `shared_groups` every modality confuses the same
  /// classes; otherwise groups are re-drawn independently per modality.
  int group_size = 2;
  bool shared_groups = false;
  double group_scale = 3.0;
  double class_offset = 0.9;
  double image_noise = 1.0;
  double observation_noise = 0.4;
  /// Probability that an available modality has any images in an observation.
  std::vector<double> presence{0.85, 0.65, 0.45, 0.4};
  /// Mean number of extra images beyond the first (geometric).
  double extra_images_mean = 0.6;
  std::uint64_t seed = 7;

  void validate() const;
};

/// Default availability masks: several classes miss one or two modalities.
std::vector<std::vector<bool>> default_availability(int num_classes, int num_modalities);

Dataset generate_synthetic(const SyntheticSpec& spec);

/// Class sizes following n_c proportional to (c+1)^-s, summing to `total`.
std::vector<int> zipf_class_sizes(int num_classes, double exponent, int total);

struct FilterReport {
  /// Classes that still have at least one image of each modality.
  std::vector<int> classes_per_modality;
  int classes_kept = 0;
  int classes_dropped = 0;
  std::size_t images_dropped = 0;
  std::size_t observations_dropped = 0;
};

struct FilterResult {
  Dataset dataset;
  FilterReport report;
};

/// Drops modalities with fewer than 3 images within a class, then empty
/// observations, then classes with fewer than 3 observations.
FilterResult filter_dataset(const Dataset& input);

/// Observations grouped by label, labels in ascending order.
std::map<int, std::vector<const Observation*>> group_by_class(const Dataset& dataset);

}  // namespace mfas::data
