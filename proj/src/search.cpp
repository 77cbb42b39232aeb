#include "mfas/search.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace mfas::search {

bool ResultStore::record(const FusionConfig& config, double score, int level, int iteration, double wall_time) {
  history_.push_back({config, score, level, iteration, wall_time});
  auto [it, inserted] = best_.try_emplace(config, score);
  if (inserted) return true;
  if (score > it->second) {
    it->second = score;
    return true;
  }
  return false;
}

std::optional<double> ResultStore::score(const FusionConfig& config) const {
  auto it = best_.find(config);
  if (it == best_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::pair<FusionConfig, double>> ResultStore::top(std::size_t k) const {
  std::vector<std::pair<FusionConfig, double>> all(best_.begin(), best_.end());
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (all.size() > k) all.resize(k);
  return all;
}

void ResultStore::write_csv(const std::filesystem::path& path, const SearchSpace& space) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "tokens,score,level,iteration,wall_time\n";
  out.precision(17);
  for (const auto& e : history_) {
    out << token_string(e.config, space) << ',' << e.score << ',' << e.level << ',' << e.iteration << ','
        << e.wall_time << '\n';
  }
}

nlohmann::json ResultStore::to_json(const SearchSpace& space) const {
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : history_) {
    history.push_back({{"tokens", encode_config_tokens(e.config, space)},
                       {"score", e.score},
                       {"level", e.level},
                       {"iteration", e.iteration},
                       {"wall_time", e.wall_time}});
  }
  return {{"history", history}};
}

ResultStore ResultStore::from_json(const nlohmann::json& j, const SearchSpace& space) {
  ResultStore store;
  for (const auto& e : j.at("history")) {
    store.record(decode_config_tokens(e.at("tokens").get<std::vector<int>>(), space), e.at("score").get<double>(),
                 e.at("level").get<int>(), e.at("iteration").get<int>(), e.at("wall_time").get<double>());
  }
  return store;
}

bool SharedWeightStore::fetch(const std::string& key, const std::vector<Parameter*>& params) const {
  auto it = entries_.find(key);
  if (it == entries_.end() || it->second.values.size() != params.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& v = it->second.values[i];
    if (v.rows() != params[i]->value.rows() || v.cols() != params[i]->value.cols()) return false;
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = it->second.values[i];
  return true;
}

void SharedWeightStore::put(const std::string& key, const std::vector<const Parameter*>& params, double score) {
  Entry e;
  for (const auto* p : params) e.values.push_back(p->value);
  e.score = score;
  e.round = round_;
  entries_[key] = std::move(e);
}

std::uint64_t SharedWeightStore::checksum(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return 0;
  std::uint64_t h = 0;
  for (const auto& v : it->second.values) h = content_hash({v.data(), static_cast<std::size_t>(v.size())}, h);
  return h;
}

void SharedWeightStore::merge(const std::vector<SharedWeightStore>& workers) {
  std::map<std::string, const Entry*> winners;
  for (const auto& w : workers) {
    for (const auto& [key, entry] : w.entries_) {
      if (entry.round != round_) continue;
      auto [it, inserted] = winners.try_emplace(key, &entry);
      if (!inserted && entry.score > it->second->score) it->second = &entry;
    }
  }
  for (const auto& [key, entry] : winners) entries_[key] = *entry;
}

void SharedWeightStore::save(Checkpoint& ckpt) const {
  nlohmann::json index = nlohmann::json::array();
  std::size_t n = 0;
  for (const auto& [key, entry] : entries_) {
    index.push_back({{"key", key}, {"count", entry.values.size()}, {"score", entry.score}, {"round", entry.round}});
    for (std::size_t i = 0; i < entry.values.size(); ++i) {
      ckpt.add("w" + std::to_string(n) + "/" + std::to_string(i), entry.values[i]);
    }
    ++n;
  }
  ckpt.meta()["weights"] = index;
  ckpt.meta()["round"] = round_;
}

SharedWeightStore SharedWeightStore::load(const Checkpoint& ckpt) {
  SharedWeightStore store;
  store.round_ = ckpt.meta().at("round").get<std::uint64_t>();
  std::size_t n = 0;
  for (const auto& item : ckpt.meta().at("weights")) {
    Entry e;
    e.score = item.at("score").get<double>();
    e.round = item.at("round").get<std::uint64_t>();
    const auto count = item.at("count").get<std::size_t>();
    for (std::size_t i = 0; i < count; ++i) e.values.push_back(ckpt.matrix("w" + std::to_string(n) + "/" + std::to_string(i)));
    store.entries_[item.at("key").get<std::string>()] = std::move(e);
    ++n;
  }
  return store;
}

double temperature_at(const TemperatureSchedule& schedule, double s) {
  const double r = s / schedule.decay;
  return (schedule.t_max - schedule.t_min) * std::exp(-r * r) + schedule.t_min;
}

std::vector<std::size_t> sample_configs(std::span<const double> scores, double temperature, std::size_t count,
                                        Rng& rng) {
  const std::size_t n = scores.size();
  if (count > n) throw std::invalid_argument("sample_configs: count exceeds candidates");
  if (temperature <= 0.0) throw std::invalid_argument("sample_configs: temperature must be positive");
  double total = 0.0;
  for (double a : scores) {
    if (!(a >= 0.0)) throw std::invalid_argument("sample_configs: negative score");
    total += a;
  }
  // p_i^(1/t) in log space, shifted by the max so the largest weight is 1.
  std::vector<double> weight(n, 0.0);
  if (total > 0.0) {
    const double log_total = std::log(total);
    double max_log = -std::numeric_limits<double>::infinity();
    std::vector<double> logp(n, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < n; ++i) {
      if (scores[i] > 0.0) {
        logp[i] = (std::log(scores[i]) - log_total) / temperature;
        max_log = std::max(max_log, logp[i]);
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (scores[i] > 0.0) weight[i] = std::exp(logp[i] - max_log);
    }
  }
  std::vector<bool> taken(n, false);
  std::vector<std::size_t> out;
  out.reserve(count);
  while (out.size() < count) {
    double remaining = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!taken[i]) remaining += weight[i];
    }
    std::size_t pick = n;
    if (remaining > 0.0) {
      double u = uniform01(rng) * remaining;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i] || weight[i] == 0.0) continue;
        pick = i;
        u -= weight[i];
        if (u < 0.0) break;
      }
    } else {
      std::size_t left = n - out.size();
      auto r = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(left));
      if (r >= left) r = left - 1;
      for (std::size_t i = 0; i < n; ++i) {
        if (taken[i]) continue;
        if (r == 0) {
          pick = i;
          break;
        }
        --r;
      }
    }
    taken[pick] = true;
    out.push_back(pick);
  }
  return out;
}

std::size_t evaluation_budget(const SearchOptions& options) {
  const auto first = static_cast<std::size_t>(options.space.specs_per_layer());
  const auto samples = static_cast<std::size_t>(options.samples);
  const auto levels = static_cast<std::size_t>(options.levels);
  const auto iterations = static_cast<std::size_t>(options.iterations);
  return first + samples * (levels - 1) * iterations + samples * levels;
}

namespace {

struct State {
  int next_step = 0;
  int temperature_step = 0;
  int fits = 0;
  std::size_t evaluations = 0;
  std::vector<FusionConfig> sampled;
  ResultStore store;
  SharedWeightStore weights;
};

constexpr int kStateVersion = 1;

void save_state(const std::filesystem::path& dir, const SearchOptions& options, const State& state,
                const Surrogate& surrogate) {
  namespace fs = std::filesystem;
  const fs::path next = dir / "next";
  const fs::path current = dir / "state";
  const fs::path previous = dir / "previous";
  fs::remove_all(next);
  fs::create_directories(next);

  nlohmann::json manifest;
  manifest["version"] = kStateVersion;
  manifest["seed"] = options.seed;
  manifest["next_step"] = state.next_step;
  manifest["iteration"] = state.next_step / options.levels + 1;
  manifest["level"] = state.next_step % options.levels + 1;
  manifest["temperature_step"] = state.temperature_step;
  manifest["surrogate_fits"] = state.fits;
  manifest["evaluations"] = state.evaluations;
  nlohmann::json sampled = nlohmann::json::array();
  for (const auto& c : state.sampled) sampled.push_back(encode_config_tokens(c, options.space));
  manifest["sampled"] = sampled;
  manifest["results"] = state.store.to_json(options.space);
  std::ofstream(next / "manifest.json") << manifest.dump() << '\n';

  Checkpoint surrogate_ckpt;
  surrogate_ckpt.meta()["kind"] = "surrogate";
  surrogate.save(surrogate_ckpt, "surrogate/");
  surrogate_ckpt.save(next / "surrogate.ckpt");

  Checkpoint weights_ckpt;
  weights_ckpt.meta()["kind"] = "shared_weights";
  state.weights.save(weights_ckpt);
  weights_ckpt.save(next / "weights.ckpt");

  fs::remove_all(previous);
  if (fs::exists(current)) fs::rename(current, previous);
  fs::rename(next, current);
  fs::remove_all(previous);
}

bool load_state(const std::filesystem::path& dir, const SearchOptions& options, State& state, Surrogate& surrogate) {
  const auto current = dir / "state";
  if (!std::filesystem::exists(current / "manifest.json")) return false;
  std::ifstream in(current / "manifest.json");
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.at("version").get<int>() != kStateVersion) throw std::runtime_error("search state: unsupported version");
  if (manifest.at("seed").get<std::uint64_t>() != options.seed) {
    throw std::runtime_error("search state: seed differs from the requested run");
  }
  state.next_step = manifest.at("next_step").get<int>();
  state.temperature_step = manifest.at("temperature_step").get<int>();
  state.fits = manifest.at("surrogate_fits").get<int>();
  state.evaluations = manifest.at("evaluations").get<std::size_t>();
  state.sampled.clear();
  for (const auto& t : manifest.at("sampled")) {
    state.sampled.push_back(decode_config_tokens(t.get<std::vector<int>>(), options.space));
  }
  state.store = ResultStore::from_json(manifest.at("results"), options.space);
  surrogate.load(Checkpoint::load(current / "surrogate.ckpt"), "surrogate/");
  state.weights = SharedWeightStore::load(Checkpoint::load(current / "weights.ckpt"));
  return true;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

/// Evaluates configs in order; returns their scores. With several workers
/// each gets a snapshot of the weights and the snapshots are merged afterwards.
std::vector<double> evaluate_all(const std::vector<FusionConfig>& configs, const SearchOptions& options, State& state,
                                 const EvaluateFn& evaluate) {
  const std::uint64_t eval_stream = mix_seed(options.seed, 3);
  std::vector<double> scores(configs.size());
  const std::size_t base = state.evaluations;
  const auto workers = static_cast<std::size_t>(std::max(1, options.workers));
  if (workers == 1 || configs.size() < 2) {
    for (std::size_t i = 0; i < configs.size(); ++i) {
      scores[i] = evaluate(configs[i], state.weights, mix_seed(eval_stream, base + i));
    }
  } else {
    state.weights.begin_round();
    std::vector<SharedWeightStore> snapshots(std::min(workers, configs.size()), state.weights);
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(snapshots.size());
    for (std::size_t w = 0; w < snapshots.size(); ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < configs.size(); i += snapshots.size()) {
            scores[i] = evaluate(configs[i], snapshots[w], mix_seed(eval_stream, base + i));
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    state.weights.merge(snapshots);
  }
  state.evaluations += configs.size();
  return scores;
}

void refit(Surrogate& surrogate, const SearchOptions& options, State& state) {
  std::vector<FusionConfig> configs;
  std::vector<double> scores;
  for (const auto& [c, s] : state.store.best()) {
    configs.push_back(c);
    scores.push_back(s);
  }
  surrogate.fit(configs, scores, mix_seed(mix_seed(options.seed, 4), static_cast<std::uint64_t>(state.fits)));
  ++state.fits;
}

}  // namespace

SearchResult run_search(const SearchOptions& options, const EvaluateFn& evaluate) {
  options.space.validate();
  if (options.iterations < 1 || options.levels < 1 || options.samples < 1) {
    throw std::invalid_argument("search: iterations, levels and samples must be >= 1");
  }
  if (options.levels > options.space.max_layers) throw std::invalid_argument("search: levels exceed max layers");

  Surrogate surrogate(options.space, options.surrogate, mix_seed(options.seed, 11));
  State state;
  if (!options.checkpoint_dir.empty()) load_state(options.checkpoint_dir, options, state, surrogate);

  const auto specs = enumerate_layer_specs(options.space);
  const int total_steps = options.iterations * options.levels;
  const auto start = std::chrono::steady_clock::now();
  int completed_here = 0;

  while (state.next_step < total_steps) {
    const int iteration = state.next_step / options.levels + 1;
    const int level = state.next_step % options.levels + 1;
    std::vector<FusionConfig> batch;
    double temperature = 0.0;
    if (state.next_step == 0) {
      batch = enumerate_first_layer_configs(options.space);
    } else {
      std::vector<FusionConfig> candidates;
      for (auto& c : progress_configs(state.sampled, specs, level)) {
        if (!state.store.contains(c)) candidates.push_back(std::move(c));
      }
      if (!candidates.empty()) {
        const auto predicted = surrogate.predict(candidates);
        temperature = temperature_at(options.temperature, state.temperature_step);
        Rng rng(mix_seed(mix_seed(options.seed, 5), static_cast<std::uint64_t>(state.temperature_step)));
        const std::size_t count = std::min(candidates.size(), static_cast<std::size_t>(options.samples));
        for (std::size_t i : sample_configs(predicted, temperature, count, rng)) batch.push_back(candidates[i]);
        ++state.temperature_step;
      }
    }

    const auto scores = evaluate_all(batch, options, state, evaluate);
    const double wall = seconds_since(start);
    for (std::size_t i = 0; i < batch.size(); ++i) state.store.record(batch[i], scores[i], level, iteration, wall);
    if (!batch.empty()) refit(surrogate, options, state);

    if (state.next_step == 0) {
      state.sampled.clear();
      for (auto& [c, s] : state.store.top(static_cast<std::size_t>(options.samples))) state.sampled.push_back(c);
    } else if (!batch.empty()) {
      state.sampled = batch;
    }
    ++state.next_step;

    if (options.log) {
      const auto best = state.store.top(1);
      std::ostringstream line;
      line << "stage=search iteration=" << iteration << " level=" << level << " evaluated=" << batch.size()
           << " total_evaluations=" << state.evaluations << " temperature=" << temperature
           << " best_score=" << (best.empty() ? 0.0 : best[0].second) << " wall=" << wall;
      options.log(line.str());
    }
    if (!options.checkpoint_dir.empty()) save_state(options.checkpoint_dir, options, state, surrogate);
    ++completed_here;
    if (options.stop_after_levels > 0 && completed_here >= options.stop_after_levels) break;
  }

  SearchResult result;
  result.completed = state.next_step >= total_steps;
  result.top = state.store.top(options.top_k);
  result.evaluations = state.evaluations;
  result.temperature_step = state.temperature_step;
  result.surrogate_checksum = surrogate.checksum();
  result.store = std::move(state.store);
  result.weights = std::move(state.weights);
  return result;
}

}  // namespace mfas::search
