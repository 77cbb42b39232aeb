#include "mfas/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace mfas::data {

bool Observation::empty() const {
  return std::all_of(modalities.begin(), modalities.end(), [](const auto& imgs) { return imgs.empty(); });
}

void SyntheticSpec::validate() const {
  if (num_classes < 1) throw std::invalid_argument("synthetic: num_classes must be positive");
  if (modalities.empty()) throw std::invalid_argument("synthetic: at least one modality required");
  if (feature_dim < 1) throw std::invalid_argument("synthetic: feature_dim must be positive");
  if (total_observations < num_classes) throw std::invalid_argument("synthetic: too few observations");
  if (group_size < 1) throw std::invalid_argument("synthetic: group_size must be positive");
  if (presence.size() != modalities.size()) throw std::invalid_argument("synthetic: presence size mismatch");
  if (!availability.empty()) {
    if (availability.size() != static_cast<std::size_t>(num_classes)) {
      throw std::invalid_argument("synthetic: availability must list every class");
    }
    for (const auto& row : availability) {
      if (row.size() != modalities.size()) throw std::invalid_argument("synthetic: availability row size mismatch");
      if (std::none_of(row.begin(), row.end(), [](bool b) { return b; })) {
        throw std::invalid_argument("synthetic: every class needs an available modality");
      }
    }
  }
}

std::vector<std::vector<bool>> default_availability(int num_classes, int num_modalities) {
  std::vector<std::vector<bool>> mask(static_cast<std::size_t>(num_classes),
                                      std::vector<bool>(static_cast<std::size_t>(num_modalities), true));
  if (num_modalities < 2) return mask;
  // Every third class loses a rotating modality other than the first; every
  // fourth additionally loses the last one.
  for (int c = 0; c < num_classes; ++c) {
    if (c % 3 == 1) mask[c][1 + static_cast<std::size_t>(c / 3) % static_cast<std::size_t>(num_modalities - 1)] = false;
    if (c % 4 == 3) mask[c][static_cast<std::size_t>(num_modalities - 1)] = false;
  }
  return mask;
}

std::vector<int> zipf_class_sizes(int num_classes, double exponent, int total) {
  std::vector<double> raw(static_cast<std::size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) raw[c] = std::pow(static_cast<double>(c + 1), -exponent);
  const double sum = std::accumulate(raw.begin(), raw.end(), 0.0);
  std::vector<int> sizes(raw.size());
  int assigned = 0;
  for (std::size_t c = 0; c < raw.size(); ++c) {
    sizes[c] = std::max(1, static_cast<int>(std::floor(raw[c] / sum * total)));
    assigned += sizes[c];
  }
  // Hand the rounding remainder to the head classes.
  for (std::size_t c = 0; assigned < total; c = (c + 1) % sizes.size(), ++assigned) ++sizes[c];
  return sizes;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const auto n_mod = spec.modalities.size();
  const auto dim = static_cast<std::size_t>(spec.feature_dim);
  const auto availability =
      spec.availability.empty() ? default_availability(spec.num_classes, static_cast<int>(n_mod)) : spec.availability;

  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto random_vector = [&](double scale) {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng) * scale;
    return v;
  };

  // prototypes[m][c]: the group center for modality m plus a small class-specific offset.
  std::vector<std::vector<std::vector<double>>> prototypes(n_mod);
  std::vector<int> order(static_cast<std::size_t>(spec.num_classes));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t m = 0; m < n_mod; ++m) {
    if (m > 0 && !spec.shared_groups) std::shuffle(order.begin(), order.end(), rng);
    const int n_groups = (spec.num_classes + spec.group_size - 1) / spec.group_size;
    std::vector<std::vector<double>> centers;
    for (int g = 0; g < n_groups; ++g) centers.push_back(random_vector(spec.group_scale));
    prototypes[m].resize(static_cast<std::size_t>(spec.num_classes));
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const auto& center = centers[pos / static_cast<std::size_t>(spec.group_size)];
      auto offset = random_vector(1.0);
      double norm = 0.0;
      for (double x : offset) norm += x * x;
      norm = std::sqrt(norm);
      std::vector<double> proto(dim);
      for (std::size_t k = 0; k < dim; ++k) proto[k] = center[k] + spec.class_offset * offset[k] / norm;
      prototypes[m][static_cast<std::size_t>(order[pos])] = std::move(proto);
    }
  }

  Dataset ds;
  ds.modality_names = spec.modalities;
  ds.feature_dims.assign(n_mod, spec.feature_dim);
  ds.num_classes = spec.num_classes;

  const auto sizes = zipf_class_sizes(spec.num_classes, spec.zipf_exponent, spec.total_observations);
  std::uint64_t next_obs = 0;
  std::uint64_t next_img = 0;
  const double p_extra = 1.0 / (1.0 + spec.extra_images_mean);
  std::geometric_distribution<int> extra(p_extra);

  for (int c = 0; c < spec.num_classes; ++c) {
    std::vector<std::size_t> available;
    for (std::size_t m = 0; m < n_mod; ++m) {
      if (availability[c][m]) available.push_back(m);
    }
    for (int i = 0; i < sizes[static_cast<std::size_t>(c)]; ++i) {
      Observation obs;
      obs.id = next_obs++;
      obs.label = c;
      obs.modalities.resize(n_mod);
      std::vector<int> counts(n_mod, 0);
      for (std::size_t m : available) {
        if (uniform01(rng) < spec.presence[m]) counts[m] = 1 + extra(rng);
      }
      if (std::all_of(counts.begin(), counts.end(), [](int n) { return n == 0; })) {
        counts[available[static_cast<std::size_t>(rng() % available.size())]] = 1;
      }
      for (std::size_t m = 0; m < n_mod; ++m) {
        if (counts[m] == 0) continue;
        const auto shift = random_vector(spec.observation_noise);
        for (int k = 0; k < counts[m]; ++k) {
          Image img;
          img.id = next_img++;
          img.features.resize(dim);
          for (std::size_t d = 0; d < dim; ++d) {
            img.features[d] = prototypes[m][static_cast<std::size_t>(c)][d] + shift[d] + normal(rng) * spec.image_noise;
          }
          obs.modalities[m].push_back(std::move(img));
        }
      }
      ds.observations.push_back(std::move(obs));
    }
  }
  return ds;
}

std::map<int, std::vector<const Observation*>> group_by_class(const Dataset& dataset) {
  std::map<int, std::vector<const Observation*>> out;
  for (const auto& obs : dataset.observations) out[obs.label].push_back(&obs);
  return out;
}

FilterResult filter_dataset(const Dataset& input) {
  constexpr std::size_t kMinImages = 3;
  constexpr std::size_t kMinObservations = 3;
  const auto n_mod = input.modality_count();

  FilterResult result;
  result.dataset.modality_names = input.modality_names;
  result.dataset.feature_dims = input.feature_dims;
  result.dataset.num_classes = input.num_classes;
  result.report.classes_per_modality.assign(n_mod, 0);

  for (const auto& [label, members] : group_by_class(input)) {
    std::vector<std::size_t> totals(n_mod, 0);
    for (const auto* obs : members) {
      for (std::size_t m = 0; m < n_mod; ++m) totals[m] += obs->image_count(m);
    }
    std::vector<Observation> kept;
    for (const auto* obs : members) {
      Observation copy = *obs;
      for (std::size_t m = 0; m < n_mod; ++m) {
        if (totals[m] < kMinImages) {
          result.report.images_dropped += copy.modalities[m].size();
          copy.modalities[m].clear();
        }
      }
      if (copy.empty()) {
        ++result.report.observations_dropped;
        continue;
      }
      kept.push_back(std::move(copy));
    }
    if (kept.size() < kMinObservations) {
      ++result.report.classes_dropped;
      result.report.observations_dropped += kept.size();
      for (const auto& obs : kept) {
        for (const auto& imgs : obs.modalities) result.report.images_dropped += imgs.size();
      }
      continue;
    }
    ++result.report.classes_kept;
    for (std::size_t m = 0; m < n_mod; ++m) {
      if (totals[m] >= kMinImages) ++result.report.classes_per_modality[m];
    }
    for (auto& obs : kept) result.dataset.observations.push_back(std::move(obs));
  }
  if (result.dataset.observations.empty()) throw std::runtime_error("empty dataset");
  return result;
}

}  // namespace mfas::data
