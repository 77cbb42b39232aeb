#include "mfas/data.hpp"
#include "mfas/records.hpp"
#include "mfas/splits.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

namespace mfas::data {
namespace {

Observation make_observation(std::uint64_t id, int label, const std::vector<int>& counts, std::uint64_t& next_image) {
  Observation obs;
  obs.id = id;
  obs.label = label;
  obs.modalities.resize(counts.size());
  for (std::size_t m = 0; m < counts.size(); ++m) {
    for (int k = 0; k < counts[m]; ++k) obs.modalities[m].push_back({next_image++, {0.0}});
  }
  return obs;
}

Dataset two_modality_dataset(const std::map<int, std::vector<std::vector<int>>>& classes) {
  Dataset ds;
  ds.modality_names = {"flower", "leaf"};
  ds.feature_dims = {1, 1};
  ds.num_classes = static_cast<int>(classes.size());
  std::uint64_t obs_id = 0;
  std::uint64_t img_id = 0;
  for (const auto& [label, observations] : classes) {
    for (const auto& counts : observations) ds.observations.push_back(make_observation(obs_id++, label, counts, img_id));
  }
  return ds;
}

std::size_t images_of(const Dataset& ds, int label, std::size_t modality) {
  std::size_t n = 0;
  for (const auto& obs : ds.observations) {
    if (obs.label == label) n += obs.image_count(modality);
  }
  return n;
}

TEST(Synthetic, SameSeedSameDataset) {
  SyntheticSpec spec;
  spec.total_observations = 300;
  const Dataset a = generate_synthetic(spec);
  const Dataset b = generate_synthetic(spec);
  ASSERT_EQ(a.observations.size(), b.observations.size());
  for (std::size_t i = 0; i < a.observations.size(); ++i) {
    const auto& x = a.observations[i];
    const auto& y = b.observations[i];
    ASSERT_EQ(x.label, y.label);
    for (std::size_t m = 0; m < x.modalities.size(); ++m) {
      ASSERT_EQ(x.modalities[m].size(), y.modalities[m].size());
      for (std::size_t k = 0; k < x.modalities[m].size(); ++k) EXPECT_EQ(x.modalities[m][k].features, y.modalities[m][k].features);
    }
  }
}

TEST(Synthetic, MaskedModalityNeverAppears) {
  SyntheticSpec spec;
  const auto mask = default_availability(spec.num_classes, 4);
  const Dataset ds = generate_synthetic(spec);
  for (const auto& obs : ds.observations) {
    for (std::size_t m = 0; m < 4; ++m) {
      if (!mask[static_cast<std::size_t>(obs.label)][m]) EXPECT_EQ(obs.image_count(m), 0u);
    }
  }
}

TEST(Synthetic, DefaultMaskLeavesClassesWithoutSomeModality) {
  const auto mask = default_availability(12, 4);
  int partial = 0;
  for (const auto& row : mask) {
    EXPECT_TRUE(row[0]);
    if (std::find(row.begin(), row.end(), false) != row.end()) ++partial;
  }
  EXPECT_GE(partial, 2);
}

TEST(Synthetic, ZipfHeadAtLeastThreeTimesTail) {
  const auto sizes = zipf_class_sizes(12, 1.0, 2000);
  EXPECT_EQ(std::accumulate(sizes.begin(), sizes.end(), 0), 2000);
  EXPECT_GE(sizes.front(), 3 * sizes.back());
  EXPECT_TRUE(std::is_sorted(sizes.rbegin(), sizes.rend()));
}

TEST(Filter, ModalityWithTwoImagesIsDropped) {
  const Dataset ds = two_modality_dataset({{0, {{1, 1}, {1, 1}, {1, 0}}}});
  const auto out = filter_dataset(ds);
  EXPECT_EQ(images_of(out.dataset, 0, 1), 0u);
  EXPECT_EQ(images_of(out.dataset, 0, 0), 3u);
  EXPECT_EQ(out.report.images_dropped, 2u);
}

TEST(Filter, ClassWithTwoObservationsIsRemoved) {
  const Dataset ds = two_modality_dataset({{0, {{3, 3}, {3, 3}}}, {1, {{1, 1}, {1, 1}, {1, 1}}}});
  const auto out = filter_dataset(ds);
  EXPECT_EQ(out.report.classes_dropped, 1);
  for (const auto& obs : out.dataset.observations) EXPECT_EQ(obs.label, 1);
}

TEST(Filter, CleanDatasetIsUnchanged) {
  const Dataset ds = two_modality_dataset({{0, {{1, 1}, {1, 1}, {1, 1}}}, {1, {{2, 0}, {1, 2}, {0, 1}}}});
  const auto out = filter_dataset(ds);
  ASSERT_EQ(out.dataset.observations.size(), ds.observations.size());
  EXPECT_EQ(out.report.images_dropped, 0u);
  EXPECT_EQ(out.report.classes_dropped, 0);
}

TEST(Filter, EmptiedObservationsAreDropped) {
  // The leaf-only observation loses its only modality.
  const Dataset ds = two_modality_dataset({{0, {{1, 0}, {1, 0}, {1, 0}, {0, 1}}}});
  const auto out = filter_dataset(ds);
  EXPECT_EQ(out.dataset.observations.size(), 3u);
  EXPECT_EQ(out.report.observations_dropped, 1u);
}

TEST(Splits, ThreeObservationExample) {
  SplitProblem p;
  p.counts = {{1, 1, 1}};
  const auto best = solve_splits_exhaustive(p);
  EXPECT_NEAR(best.objective, 1.12, 1e-12);
  const auto sizes = best.assignment.sizes();
  EXPECT_EQ(sizes[kTrain], 2u);
  EXPECT_EQ(sizes[kValidation] + sizes[kTest], 1u);
  EXPECT_NEAR(solve_splits(p).objective, 1.12, 1e-12);
}

TEST(Splits, ExactProportionsZeroObservationTerm) {
  SplitProblem p;
  p.counts = {std::vector<double>(5, 2.0)};
  SplitAssignment a;
  a.split_of = {0, 0, 0, 1, 2};
  EXPECT_NEAR(split_objective(p, a), 0.0, 1e-12);
}

TEST(Splits, IndicatorsPartitionObservations) {
  SplitAssignment a;
  a.split_of = {0, 2, 1, 0, 2};
  for (std::size_t i = 0; i < a.split_of.size(); ++i) {
    int sum = 0;
    for (int s = 0; s < 3; ++s) sum += a.indicator(s)[i];
    EXPECT_EQ(sum, 1);
  }
}

SplitProblem random_problem(Rng& rng, std::size_t n, std::size_t modalities) {
  SplitProblem p;
  p.counts.assign(modalities, std::vector<double>(n, 0.0));
  for (auto& row : p.counts) {
    for (auto& c : row) c = static_cast<double>(rng() % 4);
  }
  return p;
}

TEST(Splits, SolverNoWorseThanRoundRobin) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng() % 40;
    const SplitProblem p = random_problem(rng, n, 1 + rng() % 4);
    SplitAssignment rr;
    for (std::size_t i = 0; i < n; ++i) rr.split_of.push_back(static_cast<int>(i % 5 < 3 ? 0 : i % 5 - 2));
    SplitSolverOptions opt;
    opt.seed = static_cast<std::uint64_t>(trial);
    EXPECT_LE(solve_splits(p, opt).objective, split_objective(p, rr) + 1e-9);
  }
}

TEST(Splits, LocalSearchCloseToExhaustive) {
  Rng rng(6);
  SplitSolverOptions opt;
  opt.exhaustive_max_observations = 0;  // force local search
  int exact = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const SplitProblem p = random_problem(rng, 3 + rng() % 7, 1 + rng() % 4);
    const double best = solve_splits_exhaustive(p).objective;
    const double got = solve_splits(p, opt).objective;
    EXPECT_LE(got, best * 1.05 + 1e-9);
    if (std::abs(got - best) < 1e-9) ++exact;
  }
  EXPECT_GE(exact, 18);
}

TEST(Splits, RepairMovesOneImageIntoEmptyTest) {
  SplitProblem p;
  p.counts = {{1, 1, 1, 1, 1}, {2, 2, 0, 0, 0}};  // leaves only in observations 0 and 1
  SplitAssignment a;
  a.split_of = {0, 0, 0, 1, 2};
  const auto repaired = repair_splits(a, p);
  // Leaves: train 4, val 0, test 0 -> one image moves to val, one to test.
  const auto counts = modality_split_counts(p, repaired, 1);
  EXPECT_EQ(counts[kTrain], 2.0);
  EXPECT_EQ(counts[kValidation], 1.0);
  EXPECT_EQ(counts[kTest], 1.0);
  for (const auto& t : repaired.transfers) {
    EXPECT_EQ(t.modality, 1u);
    EXPECT_EQ(t.from_split, kTrain);
  }
}

TEST(Splits, RepairIsIdentityWhenNothingIsEmpty) {
  SplitProblem p;
  p.counts = {{1, 1, 1}};
  SplitAssignment a;
  a.split_of = {0, 1, 2};
  const auto repaired = repair_splits(a, p);
  EXPECT_TRUE(repaired.transfers.empty());
  EXPECT_EQ(repaired.assignment.split_of, a.split_of);
}

TEST(Splits, RepairLeavesEveryAvailableModalityInEverySplit) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const SplitProblem p = random_problem(rng, 3 + rng() % 10, 4);
    const auto repaired = repair_splits(solve_splits(p).assignment, p);
    for (std::size_t o = 0; o < p.counts.size(); ++o) {
      const double total = std::accumulate(p.counts[o].begin(), p.counts[o].end(), 0.0);
      if (total < 3.0) continue;
      for (double c : modality_split_counts(p, repaired, o)) EXPECT_GE(c, 1.0);
    }
  }
}

std::vector<std::vector<std::uint64_t>> id_lists(const std::vector<int>& counts) {
  std::vector<std::vector<std::uint64_t>> out;
  std::uint64_t next = 0;
  for (int n : counts) {
    out.emplace_back();
    for (int k = 0; k < n; ++k) out.back().push_back(next++);
  }
  return out;
}

TEST(Combine, TracedExample) {
  Rng rng(1);
  const auto records = combine_multimodal(4, id_lists({3, 2, 0, 1}), rng);
  ASSERT_EQ(records.size(), 3u);
  std::multiset<std::uint64_t> flowers;
  for (const auto& r : records) {
    EXPECT_EQ(r.label, 4);
    EXPECT_TRUE(r.has(0));
    EXPECT_TRUE(r.has(1));
    EXPECT_FALSE(r.has(2));
    EXPECT_TRUE(r.has(3));
    flowers.insert(*r.image_ids[0]);
  }
  EXPECT_EQ(flowers, (std::multiset<std::uint64_t>{0, 1, 2}));
}

TEST(Combine, SingleImageEach) {
  Rng rng(2);
  const auto records = combine_multimodal(0, id_lists({1, 1, 1, 1}), rng);
  ASSERT_EQ(records.size(), 1u);
  for (std::size_t m = 0; m < 4; ++m) EXPECT_TRUE(records[0].has(m));
}

TEST(Combine, SingleModalityClass) {
  Rng rng(3);
  const auto records = combine_multimodal(0, id_lists({0, 0, 0, 2}), rng);
  ASSERT_EQ(records.size(), 2u);
  for (const auto& r : records) {
    EXPECT_FALSE(r.has(0) || r.has(1) || r.has(2));
    EXPECT_TRUE(r.has(3));
  }
}

TEST(Records, FileRoundTrip) {
  RecordSet set;
  set.labels = {0, 2};
  set.presence = {0b01, 0b11};
  set.inputs = {Matrix(2, 2), Matrix::Zero(2, 3)};
  set.inputs[0] << 1, 2, 3, 4;
  set.inputs[1].row(1) << 5, 6, 7;
  const auto path = std::filesystem::temp_directory_path() / "mfas_records_roundtrip.bin";
  write_records(path, set);
  const RecordSet back = read_records(path);
  EXPECT_EQ(back.labels, set.labels);
  EXPECT_EQ(back.presence, set.presence);
  for (std::size_t m = 0; m < 2; ++m) EXPECT_EQ(back.inputs[m], set.inputs[m]);
  std::filesystem::remove(path);
}

TEST(Prepare, SplitsAreDisjointAndLabelsDense) {
  SyntheticSpec spec;
  spec.total_observations = 600;
  const Dataset raw = generate_synthetic(spec);
  const PreparedData data = prepare_dataset(raw, {});
  std::set<std::uint64_t> seen;
  for (const auto& ids : data.image_ids) {
    for (auto id : ids) EXPECT_TRUE(seen.insert(id).second) << "image " << id << " in two splits";
  }
  for (const auto& set : data.records) {
    EXPECT_GT(set.size(), 0u);
    for (int y : set.labels) {
      EXPECT_GE(y, 0);
      EXPECT_LT(y, data.num_classes);
    }
    for (std::size_t r = 0; r < set.size(); ++r) {
      for (std::size_t m = 0; m < set.modality_count(); ++m) {
        if (!set.has(r, m)) EXPECT_EQ(set.inputs[m].row(static_cast<Eigen::Index>(r)).cwiseAbs().sum(), 0.0);
      }
    }
  }
}

TEST(Prepare, SameSeedSameRecords) {
  SyntheticSpec spec;
  spec.total_observations = 400;
  const Dataset raw = generate_synthetic(spec);
  const PreparedData a = prepare_dataset(raw, {});
  const PreparedData b = prepare_dataset(raw, {});
  for (std::size_t s = 0; s < kSplitCount; ++s) {
    EXPECT_EQ(a.records[s].labels, b.records[s].labels);
    EXPECT_EQ(a.records[s].presence, b.records[s].presence);
  }
}

TEST(Prepare, SaveLoadRoundTrip) {
  SyntheticSpec spec;
  spec.total_observations = 300;
  const PreparedData data = prepare_dataset(generate_synthetic(spec), {});
  const auto dir = std::filesystem::temp_directory_path() / "mfas_prepared_roundtrip";
  std::filesystem::remove_all(dir);
  save_prepared(dir, data, nlohmann::json::object());
  const PreparedData back = load_prepared(dir);
  EXPECT_EQ(back.num_classes, data.num_classes);
  EXPECT_EQ(back.modality_names, data.modality_names);
  for (std::size_t s = 0; s < kSplitCount; ++s) {
    EXPECT_EQ(back.records[s].labels, data.records[s].labels);
    for (std::size_t m = 0; m < data.modality_count(); ++m) {
      EXPECT_EQ(back.records[s].inputs[m], data.records[s].inputs[m]);
      EXPECT_EQ(back.unimodal[s][m].labels, data.unimodal[s][m].labels);
    }
  }
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace mfas::data
