#pragma once

#include "mfas/checkpoint.hpp"
#include "mfas/fusion_config.hpp"
#include "mfas/random.hpp"
#include "mfas/surrogate.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace mfas::search {

struct ResultEntry {
  FusionConfig config;
  double score = 0.0;
  int level = 0;
  int iteration = 0;
  double wall_time = 0.0;
};

/// Best score per config plus the append-only evaluation history.
class ResultStore {
 public:
  /// Records one evaluation; returns true when it raised (or created) the stored best.
  bool record(const FusionConfig& config, double score, int level, int iteration, double wall_time);

  bool contains(const FusionConfig& config) const { return best_.count(config) > 0; }
  std::optional<double> score(const FusionConfig& config) const;
  std::size_t size() const { return best_.size(); }
  const std::map<FusionConfig, double>& best() const { return best_; }
  const std::vector<ResultEntry>& history() const { return history_; }

  /// Highest scores first; ties resolved by config order.
  std::vector<std::pair<FusionConfig, double>> top(std::size_t k) const;

  /// Columns: tokens, score, level, iteration, wall_time (one row per evaluation).
  void write_csv(const std::filesystem::path& path, const SearchSpace& space) const;

  nlohmann::json to_json(const SearchSpace& space) const;
  static ResultStore from_json(const nlohmann::json& j, const SearchSpace& space);

 private:
  std::map<FusionConfig, double> best_;
  std::vector<ResultEntry> history_;
};

/// Fusion weights keyed by (position, input width signature, activation).
/// Each entry remembers the score of the evaluation that last wrote it.
class SharedWeightStore {
 public:
  struct Entry {
    std::vector<Matrix> values;
    double score = 0.0;
    std::uint64_t round = 0;
  };

  /// Copies stored values into `params` when the key exists and every shape
  /// matches; otherwise leaves them untouched and returns false.
  bool fetch(const std::string& key, const std::vector<Parameter*>& params) const;
  void put(const std::string& key, const std::vector<const Parameter*>& params, double score);

  bool contains(const std::string& key) const { return entries_.count(key) > 0; }
  std::size_t size() const { return entries_.size(); }
  const std::map<std::string, Entry>& entries() const { return entries_; }
  std::uint64_t checksum(const std::string& key) const;

  /// Starts a new merge round; later puts are tagged with it.
  void begin_round() { ++round_; }
  std::uint64_t round() const { return round_; }
  /// Keeps, per key, the entry written this round with the highest score across `workers`.
  void merge(const std::vector<SharedWeightStore>& workers);

  void save(Checkpoint& ckpt) const;
  static SharedWeightStore load(const Checkpoint& ckpt);

 private:
  std::map<std::string, Entry> entries_;
  std::uint64_t round_ = 0;
};

struct TemperatureSchedule {
  double t_max = 10.0;
  double t_min = 0.2;
  double decay = 4.0;
};

/// (t_max - t_min) * exp(-(s/d)^2) + t_min
double temperature_at(const TemperatureSchedule& schedule, double s);

/// Draws `count` distinct indices. Each draw picks i with probability
/// proportional to p_i^(1/t) among the remaining candidates, where
/// p_i = a_i / sum(a). Falls back to uniform draws when the remaining weight is zero.
std::vector<std::size_t> sample_configs(std::span<const double> scores, double temperature, std::size_t count,
                                        Rng& rng);

/// Scores one config. Must be safe to call concurrently with distinct stores.
using EvaluateFn = std::function<double(const FusionConfig&, SharedWeightStore&, std::uint64_t seed)>;

struct SearchOptions {
  SearchSpace space;
  int iterations = 5;
  int levels = 4;
  int samples = 50;
  TemperatureSchedule temperature;
  SurrogateOptions surrogate;
  std::uint64_t seed = 1;
  int workers = 1;
  std::size_t top_k = 10;
  /// Directory for the resumable state; empty disables checkpointing.
  std::filesystem::path checkpoint_dir;
  /// Stop after this many completed levels (0 = run to the end). Used to simulate interruptions.
  int stop_after_levels = 0;
  /// Called after each completed level with a line-oriented progress message.
  std::function<void(const std::string&)> log;
};

struct SearchResult {
  ResultStore store;
  std::vector<std::pair<FusionConfig, double>> top;
  SharedWeightStore weights;
  std::size_t evaluations = 0;
  int temperature_step = 0;
  bool completed = false;
  std::uint64_t surrogate_checksum = 0;
};

/// Upper bound on full evaluations for a run.
std::size_t evaluation_budget(const SearchOptions& options);

/// Progressive surrogate-guided search. Iteration 1 level 1 evaluates every
/// single-layer config; each later level extends or replaces layer l of the
/// sampled set, temperature-samples unseen candidates by surrogate score,
/// evaluates them and refits the surrogate on the whole store. Resumes from
/// `checkpoint_dir` when it holds a state.
SearchResult run_search(const SearchOptions& options, const EvaluateFn& evaluate);

}  // namespace mfas::search
