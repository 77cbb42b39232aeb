#include "mfas/splits.hpp"

#include "mfas/random.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace mfas::data {

const char* split_name(int split) {
  switch (split) {
    case kTrain: return "train";
    case kValidation: return "validation";
    case kTest: return "test";
  }
  return "?";
}

std::size_t SplitProblem::observation_count() const { return counts.empty() ? 0 : counts.front().size(); }

std::vector<int> SplitAssignment::indicator(int split) const {
  std::vector<int> x(split_of.size());
  for (std::size_t i = 0; i < split_of.size(); ++i) x[i] = split_of[i] == split ? 1 : 0;
  return x;
}

std::array<std::size_t, kSplitCount> SplitAssignment::sizes() const {
  std::array<std::size_t, kSplitCount> n{};
  for (int s : split_of) ++n[static_cast<std::size_t>(s)];
  return n;
}

double split_objective(const SplitProblem& problem, const SplitAssignment& assignment) {
  const std::size_t n = problem.observation_count();
  double value = 0.0;
  const auto sizes = assignment.sizes();
  for (std::size_t s = 0; s < kSplitCount; ++s) {
    const double d = static_cast<double>(sizes[s]) - problem.fractions[s] * static_cast<double>(n);
    value += d * d;
  }
  for (const auto& c : problem.counts) {
    const double total = std::accumulate(c.begin(), c.end(), 0.0);
    std::array<double, kSplitCount> sums{};
    for (std::size_t i = 0; i < n; ++i) sums[static_cast<std::size_t>(assignment.split_of[i])] += c[i];
    for (std::size_t s = 0; s < kSplitCount; ++s) {
      const double d = sums[s] - problem.fractions[s] * total;
      value += d * d;
    }
  }
  return value;
}

namespace {

void check_problem(const SplitProblem& problem) {
  const std::size_t n = problem.observation_count();
  if (n < kSplitCount) throw std::invalid_argument("too few observations");
  for (const auto& c : problem.counts) {
    if (c.size() != n) throw std::invalid_argument("split problem: ragged count vectors");
  }
}

// Incrementally maintained objective terms for local search.
class SearchState {
 public:
  SearchState(const SplitProblem& problem, std::vector<int> split_of) : p_(problem), split_of_(std::move(split_of)) {
    const std::size_t n = p_.observation_count();
    targets_n_.fill(0.0);
    for (std::size_t s = 0; s < kSplitCount; ++s) targets_n_[s] = p_.fractions[s] * static_cast<double>(n);
    sizes_.fill(0.0);
    for (int s : split_of_) sizes_[static_cast<std::size_t>(s)] += 1.0;
    sums_.assign(p_.counts.size(), {});
    targets_.assign(p_.counts.size(), {});
    for (std::size_t o = 0; o < p_.counts.size(); ++o) {
      const double total = std::accumulate(p_.counts[o].begin(), p_.counts[o].end(), 0.0);
      for (std::size_t s = 0; s < kSplitCount; ++s) targets_[o][s] = p_.fractions[s] * total;
      for (std::size_t i = 0; i < n; ++i) sums_[o][static_cast<std::size_t>(split_of_[i])] += p_.counts[o][i];
    }
  }

  // Change in objective from moving observation i to split b.
  double move_delta(std::size_t i, int b) const {
    const auto a = static_cast<std::size_t>(split_of_[i]);
    const auto bb = static_cast<std::size_t>(b);
    double delta = pair_delta(sizes_[a], targets_n_[a], -1.0) + pair_delta(sizes_[bb], targets_n_[bb], 1.0);
    for (std::size_t o = 0; o < p_.counts.size(); ++o) {
      const double c = p_.counts[o][i];
      if (c == 0.0) continue;
      delta += pair_delta(sums_[o][a], targets_[o][a], -c) + pair_delta(sums_[o][bb], targets_[o][bb], c);
    }
    return delta;
  }

  // Change in objective from exchanging the splits of observations i and j.
  double swap_delta(std::size_t i, std::size_t j) const {
    const auto a = static_cast<std::size_t>(split_of_[i]);
    const auto b = static_cast<std::size_t>(split_of_[j]);
    double delta = 0.0;
    for (std::size_t o = 0; o < p_.counts.size(); ++o) {
      const double shift = p_.counts[o][j] - p_.counts[o][i];  // net inflow into split a
      if (shift == 0.0) continue;
      delta += pair_delta(sums_[o][a], targets_[o][a], shift) + pair_delta(sums_[o][b], targets_[o][b], -shift);
    }
    return delta;
  }

  void apply_move(std::size_t i, int b) {
    const auto a = static_cast<std::size_t>(split_of_[i]);
    const auto bb = static_cast<std::size_t>(b);
    sizes_[a] -= 1.0;
    sizes_[bb] += 1.0;
    for (std::size_t o = 0; o < p_.counts.size(); ++o) {
      sums_[o][a] -= p_.counts[o][i];
      sums_[o][bb] += p_.counts[o][i];
    }
    split_of_[i] = b;
  }

  void apply_swap(std::size_t i, std::size_t j) {
    const int a = split_of_[i];
    const int b = split_of_[j];
    apply_move(i, b);
    apply_move(j, a);
  }

  const std::vector<int>& split_of() const { return split_of_; }

 private:
  static double pair_delta(double current, double target, double change) {
    const double before = current - target;
    const double after = before + change;
    return after * after - before * before;
  }

  const SplitProblem& p_;
  std::vector<int> split_of_;
  std::array<double, kSplitCount> sizes_{};
  std::array<double, kSplitCount> targets_n_{};
  std::vector<std::array<double, kSplitCount>> sums_;
  std::vector<std::array<double, kSplitCount>> targets_;
};

constexpr double kImprovementTolerance = 1e-12;

std::vector<int> local_search(const SplitProblem& problem, std::vector<int> start, Rng& rng) {
  SearchState state(problem, std::move(start));
  const std::size_t n = problem.observation_count();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  bool improved = true;
  while (improved) {
    improved = false;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      for (int b = 0; b < static_cast<int>(kSplitCount); ++b) {
        if (b == state.split_of()[i]) continue;
        if (state.move_delta(i, b) < -kImprovementTolerance) {
          state.apply_move(i, b);
          improved = true;
        }
      }
    }
    if (improved) continue;
    for (std::size_t x = 0; x < n && !improved; ++x) {
      for (std::size_t y = x + 1; y < n; ++y) {
        const std::size_t i = order[x];
        const std::size_t j = order[y];
        if (state.split_of()[i] == state.split_of()[j]) continue;
        if (state.swap_delta(i, j) < -kImprovementTolerance) {
          state.apply_swap(i, j);
          improved = true;
          break;
        }
      }
    }
  }
  return state.split_of();
}

// Observations sorted by total image count, dealt to the split furthest below its target share.
std::vector<int> greedy_start(const SplitProblem& problem) {
  const std::size_t n = problem.observation_count();
  std::vector<double> weight(n, 0.0);
  for (const auto& c : problem.counts) {
    for (std::size_t i = 0; i < n; ++i) weight[i] += c[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return weight[a] > weight[b]; });
  std::vector<int> split_of(n, 0);
  std::array<double, kSplitCount> filled{};
  for (std::size_t k = 0; k < n; ++k) {
    int best = 0;
    double best_gap = -std::numeric_limits<double>::infinity();
    for (int s = 0; s < static_cast<int>(kSplitCount); ++s) {
      const double gap = problem.fractions[static_cast<std::size_t>(s)] * static_cast<double>(k + 1) - filled[static_cast<std::size_t>(s)];
      if (gap > best_gap) {
        best_gap = gap;
        best = s;
      }
    }
    split_of[order[k]] = best;
    filled[static_cast<std::size_t>(best)] += 1.0;
  }
  return split_of;
}

}  // namespace

SplitSolution solve_splits_exhaustive(const SplitProblem& problem) {
  check_problem(problem);
  const std::size_t n = problem.observation_count();
  SplitAssignment current{std::vector<int>(n, 0)};
  SplitSolution best{current, split_objective(problem, current)};
  while (true) {
    std::size_t k = 0;
    while (k < n && current.split_of[k] == static_cast<int>(kSplitCount) - 1) current.split_of[k++] = 0;
    if (k == n) break;
    ++current.split_of[k];
    const double value = split_objective(problem, current);
    if (value < best.objective - kImprovementTolerance) best = {current, value};
  }
  return best;
}

SplitSolution solve_splits(const SplitProblem& problem, const SplitSolverOptions& options) {
  check_problem(problem);
  const std::size_t n = problem.observation_count();
  if (n <= options.exhaustive_max_observations) return solve_splits_exhaustive(problem);

  Rng rng(options.seed);
  SplitSolution best;
  best.objective = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, options.restarts); ++r) {
    std::vector<int> start;
    if (r == 0) {
      start = greedy_start(problem);
    } else {
      start.resize(n);
      for (auto& s : start) s = static_cast<int>(rng() % kSplitCount);
    }
    SplitAssignment candidate{local_search(problem, std::move(start), rng)};
    double value = split_objective(problem, candidate);
    // Kicks: reassign a few random observations and descend again, keeping ties to drift across plateaus.
    for (int k = 0; k < options.perturbations && n > 1; ++k) {
      std::vector<int> kicked = candidate.split_of;
      const std::size_t moves = 2 + rng() % 2;
      for (std::size_t m = 0; m < moves; ++m) kicked[rng() % n] = static_cast<int>(rng() % kSplitCount);
      SplitAssignment next{local_search(problem, std::move(kicked), rng)};
      const double next_value = split_objective(problem, next);
      if (next_value <= value + kImprovementTolerance) {
        candidate = std::move(next);
        value = next_value;
      }
    }
    if (value < best.objective - kImprovementTolerance) best = {std::move(candidate), value};
  }
  return best;
}

std::array<double, kSplitCount> modality_split_counts(const SplitProblem& problem, const RepairResult& repaired,
                                                      std::size_t modality) {
  std::array<double, kSplitCount> per_split{};
  const auto& c = problem.counts[modality];
  for (std::size_t i = 0; i < c.size(); ++i) per_split[static_cast<std::size_t>(repaired.assignment.split_of[i])] += c[i];
  for (const auto& t : repaired.transfers) {
    if (t.modality != modality) continue;
    per_split[static_cast<std::size_t>(t.from_split)] -= 1.0;
    per_split[static_cast<std::size_t>(t.to_split)] += 1.0;
  }
  return per_split;
}

RepairResult repair_splits(const SplitAssignment& assignment, const SplitProblem& problem) {
  RepairResult result{assignment, {}};
  const std::size_t n = problem.observation_count();
  for (std::size_t o = 0; o < problem.counts.size(); ++o) {
    const auto& c = problem.counts[o];
    const double total = std::accumulate(c.begin(), c.end(), 0.0);
    if (total < 3.0) continue;
    // Images of this modality still owned by each observation after earlier transfers.
    std::vector<double> remaining = c;
    for (int s = 0; s < static_cast<int>(kSplitCount); ++s) {
      const auto per_split = modality_split_counts(problem, result, o);
      if (per_split[static_cast<std::size_t>(s)] > 0.0) continue;
      const auto donor = static_cast<int>(std::max_element(per_split.begin(), per_split.end()) - per_split.begin());
      std::size_t source = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (result.assignment.split_of[i] != donor || remaining[i] <= 0.0) continue;
        if (source == n || remaining[i] > remaining[source]) source = i;
      }
      if (source == n) continue;
      remaining[source] -= 1.0;
      result.transfers.push_back({o, source, donor, s});
    }
  }
  return result;
}

}  // namespace mfas::data
