#pragma once

#include "mfas/data.hpp"
#include "mfas/encoder.hpp"
#include "mfas/fusion.hpp"
#include "mfas/evaluator.hpp"
#include "mfas/search.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>

namespace mfas::pipeline {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An upstream stage has not been run (or is stale for the current config).
struct MissingPrerequisite : std::runtime_error {
  MissingPrerequisite(std::string stage, const std::string& message)
      : std::runtime_error(message), prerequisite(std::move(stage)) {}
  std::string prerequisite;
};

inline constexpr int kSchemaVersion = 1;

struct DataConfig {
  /// Prepared dataset directory to use instead of generating one.
  std::optional<std::filesystem::path> manifest;
  data::SyntheticSpec synthetic;
  std::array<double, data::kSplitCount> fractions{0.6, 0.2, 0.2};
  int solver_restarts = 8;
  int exhaustive_max_observations = 12;
};

struct EncoderConfig {
  encoders::EncoderHyperparams defaults;
  std::map<std::string, encoders::EncoderHyperparams> overrides;

  const encoders::EncoderHyperparams& for_modality(const std::string& name) const;
};

struct SearchConfig {
  int activations = 2;
  int max_layers = 4;
  int iterations = 5;
  int levels = 4;
  int samples = 50;
  search::TemperatureSchedule temperature;
  search::EvalOptions eval;
  search::SurrogateOptions surrogate;
  int top_k = 10;
};

struct SelectionConfig {
  int epochs = 100;
  int patience = 10;
  LrSchedule schedule{1e-3, 0.95, 200};
  int batch_size = 256;
};

struct FinalConfig {
  SelectionConfig selection;
  fusion::FinalPlan plan;
};

struct RunConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 7;
  int workers = 1;
  std::filesystem::path output_dir = "runs/default";
  DataConfig data;
  EncoderConfig encoders;
  SearchConfig search;
  FinalConfig final;

  nlohmann::json to_json() const;
  /// Strict parse: unknown keys and out-of-range values raise ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  void validate() const;
};

RunConfig load_config(const std::filesystem::path& path);

enum class Stage { gen_data, train_encoders, search, train_final, evaluate, report };

const char* stage_name(Stage stage);
std::optional<Stage> parse_stage(const std::string& name);
std::vector<Stage> all_stages();

/// Hash of the config sections a stage depends on, including every upstream stage's.
std::string stage_hash(const RunConfig& config, Stage stage);

using Logger = std::function<void(const std::string&)>;

struct StageOutcome {
  bool skipped = false;
  std::string message;
};

/// Runs one stage under config.output_dir. A stage whose recorded hash
/// matches is skipped. Throws MissingPrerequisite when an upstream stage is
/// absent or stale.
StageOutcome run_stage(Stage stage, const RunConfig& config, const Logger& log = {});

/// Every stage in order.
void run_all(const RunConfig& config, const Logger& log = {});

/// Path of the deterministic summary written by the report stage.
std::filesystem::path summary_path(const RunConfig& config);

}  // namespace mfas::pipeline
