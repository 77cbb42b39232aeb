#pragma once

#include <array>
#include <cstdint>
#include <vector>

namespace mfas::data {

inline constexpr std::size_t kSplitCount = 3;
enum Split : int { kTrain = 0, kValidation = 1, kTest = 2 };
const char* split_name(int split);

/// Balanced observation split of one class: N observations, per-modality
/// image counts per observation, target fractions per split.
struct SplitProblem {
  /// counts[o][i]: images of modality o in observation i.
  std::vector<std::vector<double>> counts;
  std::array<double, kSplitCount> fractions{0.6, 0.2, 0.2};

  std::size_t observation_count() const;
};

/// split_of[i] is the split holding observation i; equivalent to the
/// indicator vectors x_s with sum_s x_s = 1.
struct SplitAssignment {
  std::vector<int> split_of;

  std::vector<int> indicator(int split) const;
  std::array<std::size_t, kSplitCount> sizes() const;
};

/// sum_s (|x_s| - l_s N)^2 + sum_o sum_s (c_o . x_s - l_s |c_o|)^2
double split_objective(const SplitProblem& problem, const SplitAssignment& assignment);

struct SplitSolverOptions {
  int restarts = 8;
  /// Perturb-and-descend rounds after each restart's local optimum.
  int perturbations = 24;
  /// Problems with at most this many observations are solved exhaustively.
  std::size_t exhaustive_max_observations = 12;
  std::uint64_t seed = 0;
};

struct SplitSolution {
  SplitAssignment assignment;
  double objective = 0.0;
};

/// Multi-restart iterated local search (first-improvement single moves and
/// pairwise swaps, then random kicks); exhaustive enumeration for small problems.
SplitSolution solve_splits(const SplitProblem& problem, const SplitSolverOptions& options = {});

/// Plain 3^N enumeration; ties keep the lexicographically first assignment.
SplitSolution solve_splits_exhaustive(const SplitProblem& problem);

struct ImageTransfer {
  std::size_t modality = 0;
  std::size_t observation = 0;
  int from_split = 0;
  int to_split = 0;
};

struct RepairResult {
  SplitAssignment assignment;
  std::vector<ImageTransfer> transfers;
};

/// For every modality with at least 3 images in the class, any split left
/// without images of that modality receives one image from the split that
/// holds the most. Modalities are visited in order, then splits.
RepairResult repair_splits(const SplitAssignment& assignment, const SplitProblem& problem);

/// Images of modality o per split after applying transfers.
std::array<double, kSplitCount> modality_split_counts(const SplitProblem& problem, const RepairResult& repaired,
                                                      std::size_t modality);

}  // namespace mfas::data
