#include "mfas/records.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

namespace mfas::data {

std::vector<MultimodalRecord> combine_multimodal(int label, const std::vector<std::vector<std::uint64_t>>& images,
                                                 Rng& rng) {
  std::size_t n = 0;
  for (const auto& imgs : images) n = std::max(n, imgs.size());
  std::vector<MultimodalRecord> records(n);
  for (auto& r : records) {
    r.label = label;
    r.image_ids.assign(images.size(), std::nullopt);
  }
  for (std::size_t m = 0; m < images.size(); ++m) {
    if (images[m].empty()) continue;
    std::vector<std::uint64_t> permuted = images[m];
    std::shuffle(permuted.begin(), permuted.end(), rng);
    for (std::size_t i = 0; i < n; ++i) records[i].image_ids[m] = permuted[i % permuted.size()];
  }
  std::shuffle(records.begin(), records.end(), rng);
  return records;
}

RecordSet RecordSet::select(const std::vector<std::size_t>& rows) const {
  RecordSet out;
  out.inputs.resize(inputs.size());
  for (std::size_t m = 0; m < inputs.size(); ++m) out.inputs[m].resize(static_cast<Eigen::Index>(rows.size()), inputs[m].cols());
  for (std::size_t k = 0; k < rows.size(); ++k) {
    out.labels.push_back(labels[rows[k]]);
    out.presence.push_back(presence[rows[k]]);
    for (std::size_t m = 0; m < inputs.size(); ++m) {
      out.inputs[m].row(static_cast<Eigen::Index>(k)) = inputs[m].row(static_cast<Eigen::Index>(rows[k]));
    }
  }
  return out;
}

RecordSet RecordSet::concat(const RecordSet& a, const RecordSet& b) {
  if (a.inputs.size() != b.inputs.size()) throw std::invalid_argument("record sets have different modalities");
  RecordSet out;
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.presence = a.presence;
  out.presence.insert(out.presence.end(), b.presence.begin(), b.presence.end());
  for (std::size_t m = 0; m < a.inputs.size(); ++m) {
    Matrix stacked(a.inputs[m].rows() + b.inputs[m].rows(), a.inputs[m].cols());
    stacked << a.inputs[m], b.inputs[m];
    out.inputs.push_back(std::move(stacked));
  }
  return out;
}

UnimodalSet UnimodalSet::concat(const UnimodalSet& a, const UnimodalSet& b) {
  UnimodalSet out;
  out.features.resize(a.features.rows() + b.features.rows(), std::max(a.features.cols(), b.features.cols()));
  if (a.features.rows() > 0) out.features.topRows(a.features.rows()) = a.features;
  if (b.features.rows() > 0) out.features.bottomRows(b.features.rows()) = b.features;
  out.labels = a.labels;
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  return out;
}

namespace {

template <class T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <class T>
T get_le(std::istream& in) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("record file truncated");
    bits |= static_cast<U>(static_cast<U>(c) << (8 * i));
  }
  return std::bit_cast<T>(bits);
}

}  // namespace

void write_records(const std::filesystem::path& path, const RecordSet& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string());
  put_le<std::uint64_t>(out, records.size());
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.modality_count()));
  for (const auto& m : records.inputs) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  for (std::size_t r = 0; r < records.size(); ++r) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.labels[r]));
    put_le<std::uint8_t>(out, records.presence[r]);
    for (std::size_t m = 0; m < records.modality_count(); ++m) {
      if (!records.has(r, m)) continue;
      const auto& row = records.inputs[m];
      for (Eigen::Index k = 0; k < row.cols(); ++k) put_le<double>(out, row(static_cast<Eigen::Index>(r), k));
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

RecordSet read_records(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto count = get_le<std::uint64_t>(in);
  const auto n_mod = get_le<std::uint32_t>(in);
  if (n_mod > 8) throw std::runtime_error("record file: at most 8 modalities fit the presence mask");
  std::vector<std::uint32_t> dims(n_mod);
  for (auto& d : dims) d = get_le<std::uint32_t>(in);
  RecordSet out;
  for (auto d : dims) out.inputs.push_back(Matrix::Zero(static_cast<Eigen::Index>(count), d));
  out.labels.resize(count);
  out.presence.resize(count);
  for (std::size_t r = 0; r < count; ++r) {
    out.labels[r] = static_cast<int>(get_le<std::uint32_t>(in));
    out.presence[r] = get_le<std::uint8_t>(in);
    for (std::size_t m = 0; m < n_mod; ++m) {
      if (!out.has(r, m)) continue;
      for (std::uint32_t k = 0; k < dims[m]; ++k) out.inputs[m](static_cast<Eigen::Index>(r), k) = get_le<double>(in);
    }
  }
  return out;
}

namespace {

RecordSet unimodal_as_records(const UnimodalSet& set) {
  RecordSet r;
  r.labels = set.labels;
  r.presence.assign(set.size(), 1U);
  r.inputs.push_back(set.features);
  return r;
}

UnimodalSet records_as_unimodal(const RecordSet& r) {
  return {r.inputs.at(0), r.labels};
}

template <class T>
void shuffle_rows(std::vector<T>& items, Rng& rng) {
  std::shuffle(items.begin(), items.end(), rng);
}

}  // namespace

PreparedData prepare_dataset(const Dataset& raw, const PrepareOptions& options) {
  const FilterResult filtered = filter_dataset(raw);
  const Dataset& ds = filtered.dataset;
  const std::size_t n_mod = ds.modality_count();

  PreparedData out;
  out.modality_names = ds.modality_names;
  out.feature_dims = ds.feature_dims;
  out.filter_report = filtered.report;
  out.summary.images.assign(n_mod, {});

  const auto by_class = group_by_class(ds);
  std::map<int, int> dense;
  for (const auto& [label, members] : by_class) {
    dense[label] = static_cast<int>(out.original_labels.size());
    out.original_labels.push_back(label);
  }
  out.num_classes = static_cast<int>(out.original_labels.size());

  std::unordered_map<std::uint64_t, const Image*> image_by_id;
  // Per split: (label, features) per modality, and the combined records.
  std::array<std::vector<std::vector<std::pair<int, const Image*>>>, kSplitCount> uni;
  std::array<std::vector<MultimodalRecord>, kSplitCount> combined;
  for (auto& u : uni) u.resize(n_mod);

  for (const auto& [label, members] : by_class) {
    const int y = dense.at(label);
    SplitProblem problem;
    problem.fractions = options.fractions;
    problem.counts.assign(n_mod, std::vector<double>(members.size(), 0.0));
    for (std::size_t i = 0; i < members.size(); ++i) {
      for (std::size_t m = 0; m < n_mod; ++m) problem.counts[m][i] = static_cast<double>(members[i]->image_count(m));
    }
    SplitSolverOptions solver = options.solver;
    solver.seed = mix_seed(options.seed, static_cast<std::uint64_t>(label));
    const SplitSolution solution = solve_splits(problem, solver);
    const RepairResult repaired = repair_splits(solution.assignment, problem);
    out.summary.image_transfers += repaired.transfers.size();

    // Transferred images are taken from the end of the observation's image list.
    std::vector<std::vector<std::vector<int>>> moved(members.size(), std::vector<std::vector<int>>(n_mod));
    for (const auto& t : repaired.transfers) moved[t.observation][t.modality].push_back(t.to_split);

    std::array<std::vector<std::vector<std::uint64_t>>, kSplitCount> class_images;
    for (auto& c : class_images) c.resize(n_mod);
    for (std::size_t i = 0; i < members.size(); ++i) {
      const int home = repaired.assignment.split_of[i];
      ++out.summary.observations[static_cast<std::size_t>(home)];
      for (std::size_t m = 0; m < n_mod; ++m) {
        const auto& imgs = members[i]->modalities[m];
        const std::size_t keep = imgs.size() - moved[i][m].size();
        for (std::size_t k = 0; k < imgs.size(); ++k) {
          const int split = k < keep ? home : moved[i][m][k - keep];
          image_by_id[imgs[k].id] = &imgs[k];
          class_images[static_cast<std::size_t>(split)][m].push_back(imgs[k].id);
          uni[static_cast<std::size_t>(split)][m].push_back({y, &imgs[k]});
          ++out.summary.images[m][static_cast<std::size_t>(split)];
          out.image_ids[static_cast<std::size_t>(split)].push_back(imgs[k].id);
        }
      }
    }
    for (std::size_t s = 0; s < kSplitCount; ++s) {
      Rng rng(mix_seed(options.seed, 1000003ULL * static_cast<std::uint64_t>(label) + s + 1));
      auto records = combine_multimodal(y, class_images[s], rng);
      combined[s].insert(combined[s].end(), records.begin(), records.end());
    }
  }

  for (std::size_t s = 0; s < kSplitCount; ++s) {
    Rng rng(mix_seed(options.seed, 77 + s));
    shuffle_rows(combined[s], rng);
    RecordSet rs;
    rs.labels.reserve(combined[s].size());
    for (std::size_t m = 0; m < n_mod; ++m) rs.inputs.push_back(Matrix::Zero(static_cast<Eigen::Index>(combined[s].size()), ds.feature_dims[m]));
    for (std::size_t r = 0; r < combined[s].size(); ++r) {
      const auto& rec = combined[s][r];
      rs.labels.push_back(rec.label);
      std::uint8_t mask = 0;
      for (std::size_t m = 0; m < n_mod; ++m) {
        if (!rec.has(m)) continue;
        mask = static_cast<std::uint8_t>(mask | (1U << m));
        const auto& f = image_by_id.at(*rec.image_ids[m])->features;
        for (std::size_t k = 0; k < f.size(); ++k) rs.inputs[m](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = f[k];
      }
      rs.presence.push_back(mask);
    }
    out.summary.records[s] = rs.size();
    out.records[s] = std::move(rs);

    out.unimodal[s].resize(n_mod);
    for (std::size_t m = 0; m < n_mod; ++m) {
      auto& items = uni[s][m];
      shuffle_rows(items, rng);
      UnimodalSet set;
      set.features.resize(static_cast<Eigen::Index>(items.size()), ds.feature_dims[m]);
      for (std::size_t k = 0; k < items.size(); ++k) {
        set.labels.push_back(items[k].first);
        const auto& f = items[k].second->features;
        for (std::size_t d = 0; d < f.size(); ++d) set.features(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d)) = f[d];
      }
      out.unimodal[s][m] = std::move(set);
    }
  }
  return out;
}

void save_prepared(const std::filesystem::path& dir, const PreparedData& data, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = extra;
  manifest["format"] = "mfas-dataset";
  manifest["version"] = 1;
  manifest["modalities"] = data.modality_names;
  manifest["feature_dims"] = data.feature_dims;
  manifest["num_classes"] = data.num_classes;
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t c = 0; c < data.original_labels.size(); ++c) {
    classes.push_back({{"label", c}, {"original_label", data.original_labels[c]}});
  }
  manifest["classes"] = classes;
  manifest["filter"] = {{"classes_kept", data.filter_report.classes_kept},
                        {"classes_dropped", data.filter_report.classes_dropped},
                        {"classes_per_modality", data.filter_report.classes_per_modality},
                        {"images_dropped", data.filter_report.images_dropped},
                        {"observations_dropped", data.filter_report.observations_dropped}};
  manifest["image_transfers"] = data.summary.image_transfers;
  manifest["observation_level_separation_broken"] = data.summary.image_transfers > 0;

  nlohmann::json splits = nlohmann::json::object();
  for (std::size_t s = 0; s < kSplitCount; ++s) {
    const std::string name = split_name(static_cast<int>(s));
    const std::string record_file = name + ".records";
    write_records(dir / record_file, data.records[s]);
    nlohmann::json entry;
    entry["records_file"] = record_file;
    entry["records"] = data.records[s].size();
    entry["observations"] = data.summary.observations[s];
    nlohmann::json uni = nlohmann::json::object();
    nlohmann::json images = nlohmann::json::object();
    for (std::size_t m = 0; m < data.modality_count(); ++m) {
      const std::string file = name + "." + data.modality_names[m] + ".records";
      write_records(dir / file, unimodal_as_records(data.unimodal[s][m]));
      uni[data.modality_names[m]] = file;
      images[data.modality_names[m]] = data.summary.images[m][s];
    }
    entry["unimodal_files"] = uni;
    entry["images"] = images;
    entry["image_ids"] = data.image_ids[s];
    splits[name] = entry;
  }
  manifest["splits"] = splits;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

PreparedData load_prepared(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing dataset manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  PreparedData out;
  out.modality_names = manifest.at("modalities").get<std::vector<std::string>>();
  out.feature_dims = manifest.at("feature_dims").get<std::vector<int>>();
  out.num_classes = manifest.at("num_classes").get<int>();
  for (const auto& c : manifest.at("classes")) out.original_labels.push_back(c.at("original_label").get<int>());
  const auto& f = manifest.at("filter");
  out.filter_report.classes_kept = f.at("classes_kept").get<int>();
  out.filter_report.classes_dropped = f.at("classes_dropped").get<int>();
  out.filter_report.classes_per_modality = f.at("classes_per_modality").get<std::vector<int>>();
  out.filter_report.images_dropped = f.at("images_dropped").get<std::size_t>();
  out.filter_report.observations_dropped = f.at("observations_dropped").get<std::size_t>();
  out.summary.image_transfers = manifest.at("image_transfers").get<std::size_t>();
  out.summary.images.assign(out.modality_count(), {});
  for (std::size_t s = 0; s < kSplitCount; ++s) {
    const auto& entry = manifest.at("splits").at(split_name(static_cast<int>(s)));
    out.records[s] = read_records(dir / entry.at("records_file").get<std::string>());
    out.summary.records[s] = out.records[s].size();
    out.summary.observations[s] = entry.at("observations").get<std::size_t>();
    out.image_ids[s] = entry.at("image_ids").get<std::vector<std::uint64_t>>();
    for (std::size_t m = 0; m < out.modality_count(); ++m) {
      const auto& name = out.modality_names[m];
      out.unimodal[s].push_back(records_as_unimodal(read_records(dir / entry.at("unimodal_files").at(name).get<std::string>())));
      out.summary.images[m][s] = entry.at("images").at(name).get<std::size_t>();
    }
  }
  return out;
}

}  // namespace mfas::data
