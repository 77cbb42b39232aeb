#pragma once

#include "mfas/data.hpp"
#include "mfas/splits.hpp"
#include "mfas/tensor.hpp"

#include <json.hpp>

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mfas::data {

/// One multimodal training instance: at most one image per modality.
struct MultimodalRecord {
  int label = 0;
  std::vector<std::optional<std::uint64_t>> image_ids;

  bool has(std::size_t modality) const { return image_ids[modality].has_value(); }
};

/// N = max_m n_m records for one class within one split. Each present
/// modality's images are permuted and repeated cyclically to length N;
/// modalities with no images are left out of every record. Record order is shuffled.
std::vector<MultimodalRecord> combine_multimodal(int label, const std::vector<std::vector<std::uint64_t>>& images,
                                                 Rng& rng);

/// Materialized records: absent modalities are all-zero rows with a cleared presence bit.
struct RecordSet {
  std::vector<int> labels;
  /// presence[r] bit m set when modality m is present in record r.
  std::vector<std::uint8_t> presence;
  /// inputs[m] has one row per record.
  std::vector<Matrix> inputs;

  std::size_t size() const { return labels.size(); }
  std::size_t modality_count() const { return inputs.size(); }
  bool has(std::size_t record, std::size_t modality) const { return (presence[record] >> modality) & 1U; }

  /// Records whose rows are listed in `rows`, in that order.
  RecordSet select(const std::vector<std::size_t>& rows) const;
  static RecordSet concat(const RecordSet& a, const RecordSet& b);
};

/// Binary record file: u64 record count, u32 modality count, u32 dimension
/// per modality, then per record a u32 label, a u8 presence bitmask and the
/// present modality vectors as doubles, all little-endian.
void write_records(const std::filesystem::path& path, const RecordSet& records);
RecordSet read_records(const std::filesystem::path& path);

/// Single-modality image set (features + label) for encoder training.
struct UnimodalSet {
  Matrix features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  static UnimodalSet concat(const UnimodalSet& a, const UnimodalSet& b);
};

struct SplitSummary {
  std::array<std::size_t, kSplitCount> observations{};
  /// images[m][s]
  std::vector<std::array<std::size_t, kSplitCount>> images;
  std::array<std::size_t, kSplitCount> records{};
  std::size_t image_transfers = 0;
};

/// Output of the preprocessing pipeline, labels remapped to [0, num_classes).
struct PreparedData {
  std::vector<std::string> modality_names;
  std::vector<int> feature_dims;
  int num_classes = 0;
  /// original_labels[dense label] = label before remapping.
  std::vector<int> original_labels;
  std::array<RecordSet, kSplitCount> records;
  /// unimodal[s][m]
  std::array<std::vector<UnimodalSet>, kSplitCount> unimodal;
  SplitSummary summary;
  FilterReport filter_report;
  /// Image ids per split, for leakage checks.
  std::array<std::vector<std::uint64_t>, kSplitCount> image_ids;

  std::size_t modality_count() const { return modality_names.size(); }
};

struct PrepareOptions {
  std::array<double, kSplitCount> fractions{0.6, 0.2, 0.2};
  SplitSolverOptions solver;
  std::uint64_t seed = 0;
};

/// Filter, split per class, repair, build unimodal sets and combine records.
PreparedData prepare_dataset(const Dataset& raw, const PrepareOptions& options);

/// Writes manifest.json plus per-split record and unimodal files under `dir`.
void save_prepared(const std::filesystem::path& dir, const PreparedData& data, const nlohmann::json& extra);
PreparedData load_prepared(const std::filesystem::path& dir);

}  // namespace mfas::data
