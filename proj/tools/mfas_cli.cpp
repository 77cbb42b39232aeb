// Command-line driver for the fusion search pipeline.

#include "mfas/optim.hpp"
#include "mfas/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitPrerequisite = 3;
constexpr int kExitDivergence = 4;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::optional<std::string> out;
};

const auto process_start = std::chrono::steady_clock::now();

void log_line(const std::string& line) {
  const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - process_start).count();
  char stamp[32];
  std::snprintf(stamp, sizeof stamp, "t=%.3f ", t);
  std::cerr << stamp << line << '\n';
}

int run(const std::vector<mfas::pipeline::Stage>& stages, const Flags& flags) {
  using namespace mfas::pipeline;
  try {
    RunConfig config = load_config(flags.config);
    if (flags.seed) config.seed = *flags.seed;
    if (flags.workers) config.workers = *flags.workers;
    if (flags.out) config.output_dir = *flags.out;
    config.validate();
    for (Stage s : stages) {
      const auto outcome = run_stage(s, config, log_line);
      if (outcome.skipped) std::cout << "notice: " << stage_name(s) << " is up to date, nothing to do\n";
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const MissingPrerequisite& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitPrerequisite;
  } catch (const mfas::DivergenceError& e) {
    std::cerr << "numerical divergence: " << e.what() << '\n';
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace

int main(int argc, char** argv) {
  using mfas::pipeline::Stage;
  CLI::App app{"Multimodal fusion architecture search pipeline"};
  app.require_subcommand(1);
  Flags flags;

  struct Command {
    const char* name;
    const char* help;
    std::vector<Stage> stages;
  };
  const std::vector<Command> commands = {
      {"gen-data", "generate, filter, split and combine the synthetic dataset", {Stage::gen_data}},
      {"train-encoders", "train one classifier per modality", {Stage::train_encoders}},
      {"search", "run the fusion architecture search", {Stage::search}},
      {"train-final", "select among the top configs and train both final variants", {Stage::train_final}},
      {"evaluate", "score final models, late fusion and modality subsets on the test split", {Stage::evaluate}},
      {"report", "write the summary JSON and report tables", {Stage::report}},
      {"all", "run every stage in order", mfas::pipeline::all_stages()},
  };
  std::vector<CLI::App*> subs;
  for (const auto& cmd : commands) {
    auto* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", flags.config, "run configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", flags.seed, "override the configured seed");
    sub->add_option("--workers", flags.workers, "override the search worker count")->check(CLI::PositiveNumber);
    sub->add_option("--out", flags.out, "override the output directory");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }
  for (std::size_t i = 0; i < commands.size(); ++i) {
    if (subs[i]->parsed()) return run(commands[i].stages, flags);
  }
  return kExitFailure;
}
