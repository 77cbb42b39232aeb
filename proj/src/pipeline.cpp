#include "mfas/pipeline.hpp"

#include "mfas/evaluator.hpp"
#include "mfas/metrics.hpp"
#include "mfas/records.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace mfas::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Reads keys from one config object and rejects any it did not ask for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(label() + " must be an object");
  }

  template <class T>
  void read(const char* key, T& out) {
    known_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key " + label(key) + " has the wrong type");
    }
  }

  const json* child(const char* key) {
    known_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!known_.count(item.key())) throw ConfigError("unknown config key " + label(item.key()));
    }
  }

  std::string label(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

json hp_json(const encoders::EncoderHyperparams& hp) { return hp.to_json(); }

void read_hp(Section& s, encoders::EncoderHyperparams& hp) {
  s.read("hidden", hp.hidden);
  s.read("penultimate", hp.penultimate);
  s.read("initial_lr", hp.schedule.initial_lr);
  s.read("decay_rate", hp.schedule.decay_rate);
  s.read("decay_steps", hp.schedule.decay_steps);
  s.read("batch_size", hp.batch_size);
  s.read("max_epochs", hp.max_epochs);
  s.read("patience", hp.patience);
  s.read("classifier_dropout", hp.classifier_dropout);
}

void check(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

void validate_hp(const encoders::EncoderHyperparams& hp, const std::string& where) {
  check(hp.hidden.size() == 3, where + ".hidden must list three widths");
  for (int h : hp.hidden) check(h > 0, where + ".hidden widths must be positive");
  check(hp.penultimate > 0, where + ".penultimate must be positive");
  check(hp.schedule.initial_lr > 0.0, where + ".initial_lr must be positive");
  check(hp.schedule.decay_rate > 0.0 && hp.schedule.decay_rate <= 1.0, where + ".decay_rate must be in (0, 1]");
  check(hp.schedule.decay_steps > 0, where + ".decay_steps must be positive");
  check(hp.batch_size > 0, where + ".batch_size must be positive");
  check(hp.max_epochs > 0, where + ".max_epochs must be positive");
  check(hp.patience > 0, where + ".patience must be positive");
  check(hp.classifier_dropout >= 0.0 && hp.classifier_dropout < 1.0, where + ".classifier_dropout must be in [0, 1)");
}

std::string hex(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

std::uint64_t hash_text(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

const encoders::EncoderHyperparams& EncoderConfig::for_modality(const std::string& name) const {
  auto it = overrides.find(name);
  return it == overrides.end() ? defaults : it->second;
}

json RunConfig::to_json() const {
  const auto& syn = data.synthetic;
  json d = {{"num_classes", syn.num_classes},
            {"modalities", syn.modalities},
            {"zipf_exponent", syn.zipf_exponent},
            {"total_observations", syn.total_observations},
            {"feature_dim", syn.feature_dim},
            {"group_size", syn.group_size},
            {"shared_groups", syn.shared_groups},
            {"group_scale", syn.group_scale},
            {"class_offset", syn.class_offset},
            {"image_noise", syn.image_noise},
            {"observation_noise", syn.observation_noise},
            {"presence", syn.presence},
            {"extra_images_mean", syn.extra_images_mean},
            {"fractions", data.fractions},
            {"solver_restarts", data.solver_restarts},
            {"exhaustive_max_observations", data.exhaustive_max_observations}};
  d["availability"] = syn.availability;
  d["manifest"] = data.manifest ? json(data.manifest->string()) : json(nullptr);

  json enc = hp_json(encoders.defaults);
  json overrides = json::object();
  for (const auto& [name, hp] : encoders.overrides) overrides[name] = hp_json(hp);
  enc["overrides"] = overrides;

  json s = {{"activations", search.activations},
            {"max_layers", search.max_layers},
            {"iterations", search.iterations},
            {"levels", search.levels},
            {"samples", search.samples},
            {"t_max", search.temperature.t_max},
            {"t_min", search.temperature.t_min},
            {"decay", search.temperature.decay},
            {"eval_epochs", search.eval.epochs},
            {"eval_batch_size", search.eval.batch_size},
            {"neurons", search.eval.neurons},
            {"learning_rate", search.eval.learning_rate},
            {"shuffle_buffer", search.eval.shuffle_buffer},
            {"top_k", search.top_k},
            {"surrogate",
             {{"embedding_width", search.surrogate.embedding_width},
              {"units", search.surrogate.units},
              {"learning_rate", search.surrogate.learning_rate},
              {"epochs", search.surrogate.epochs},
              {"batch_size", search.surrogate.batch_size}}}};

  json f = final.plan.to_json();
  f["selection"] = {{"epochs", final.selection.epochs},
                    {"patience", final.selection.patience},
                    {"initial_lr", final.selection.schedule.initial_lr},
                    {"decay_rate", final.selection.schedule.decay_rate},
                    {"decay_steps", final.selection.schedule.decay_steps},
                    {"batch_size", final.selection.batch_size}};

  return {{"schema_version", schema_version},
          {"seed", seed},
          {"workers", workers},
          {"output_dir", output_dir.string()},
          {"data", d},
          {"encoders", enc},
          {"search", s},
          {"final", f}};
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.read("schema_version", c.schema_version);
  if (c.schema_version != kSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(c.schema_version) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  root.read("seed", c.seed);
  root.read("workers", c.workers);
  std::string out = c.output_dir.string();
  root.read("output_dir", out);
  c.output_dir = out;

  if (const json* dj = root.child("data")) {
    Section d(*dj, "data");
    auto& syn = c.data.synthetic;
    if (const json* m = d.child("manifest"); m != nullptr && !m->is_null()) {
      if (!m->is_string()) throw ConfigError("config key data.manifest must be a string or null");
      c.data.manifest = fs::path(m->get<std::string>());
    }
    d.read("num_classes", syn.num_classes);
    d.read("modalities", syn.modalities);
    d.read("availability", syn.availability);
    d.read("zipf_exponent", syn.zipf_exponent);
    d.read("total_observations", syn.total_observations);
    d.read("feature_dim", syn.feature_dim);
    d.read("group_size", syn.group_size);
    d.read("shared_groups", syn.shared_groups);
    d.read("group_scale", syn.group_scale);
    d.read("class_offset", syn.class_offset);
    d.read("image_noise", syn.image_noise);
    d.read("observation_noise", syn.observation_noise);
    d.read("presence", syn.presence);
    d.read("extra_images_mean", syn.extra_images_mean);
    d.read("fractions", c.data.fractions);
    d.read("solver_restarts", c.data.solver_restarts);
    d.read("exhaustive_max_observations", c.data.exhaustive_max_observations);
    d.finish();
  }
  if (const json* ej = root.child("encoders")) {
    Section e(*ej, "encoders");
    read_hp(e, c.encoders.defaults);
    if (const json* oj = e.child("overrides")) {
      if (!oj->is_object()) throw ConfigError("encoders.overrides must be an object");
      for (const auto& item : oj->items()) {
        encoders::EncoderHyperparams hp = c.encoders.defaults;
        Section o(item.value(), "encoders.overrides." + item.key());
        read_hp(o, hp);
        o.finish();
        c.encoders.overrides[item.key()] = hp;
      }
    }
    e.finish();
  }
  if (const json* sj = root.child("search")) {
    Section s(*sj, "search");
    s.read("activations", c.search.activations);
    s.read("max_layers", c.search.max_layers);
    s.read("iterations", c.search.iterations);
    s.read("levels", c.search.levels);
    s.read("samples", c.search.samples);
    s.read("t_max", c.search.temperature.t_max);
    s.read("t_min", c.search.temperature.t_min);
    s.read("decay", c.search.temperature.decay);
    s.read("eval_epochs", c.search.eval.epochs);
    s.read("eval_batch_size", c.search.eval.batch_size);
    s.read("neurons", c.search.eval.neurons);
    s.read("learning_rate", c.search.eval.learning_rate);
    s.read("shuffle_buffer", c.search.eval.shuffle_buffer);
    s.read("top_k", c.search.top_k);
    if (const json* uj = s.child("surrogate")) {
      Section u(*uj, "search.surrogate");
      u.read("embedding_width", c.search.surrogate.embedding_width);
      u.read("units", c.search.surrogate.units);
      u.read("learning_rate", c.search.surrogate.learning_rate);
      u.read("epochs", c.search.surrogate.epochs);
      u.read("batch_size", c.search.surrogate.batch_size);
      u.finish();
    }
    s.finish();
  }
  if (const json* fj = root.child("final")) {
    Section f(*fj, "final");
    auto& p = c.final.plan;
    f.read("neurons", p.neurons);
    f.read("dropouts", p.dropouts);
    f.read("classifier_dropout", p.classifier_dropout);
    f.read("batch_norm", p.batch_norm);
    f.read("initial_lr", p.schedule.initial_lr);
    f.read("decay_rate", p.schedule.decay_rate);
    f.read("decay_steps", p.schedule.decay_steps);
    f.read("epochs", p.epochs);
    f.read("patience", p.patience);
    f.read("batch_size", p.batch_size);
    f.read("md_rate", p.md_rate);
    if (const json* sj = f.child("selection")) {
      Section s(*sj, "final.selection");
      auto& sel = c.final.selection;
      s.read("epochs", sel.epochs);
      s.read("patience", sel.patience);
      s.read("initial_lr", sel.schedule.initial_lr);
      s.read("decay_rate", sel.schedule.decay_rate);
      s.read("decay_steps", sel.schedule.decay_steps);
      s.read("batch_size", sel.batch_size);
      s.finish();
    }
    f.finish();
  }
  root.finish();
  c.validate();
  return c;
}

void RunConfig::validate() const {
  check(workers >= 1, "workers must be >= 1");
  check(!output_dir.empty(), "output_dir must not be empty");
  if (data.manifest) {
    check(fs::exists(*data.manifest / "manifest.json"), "data.manifest: no manifest.json in " + data.manifest->string());
  } else {
    try {
      data.synthetic.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("data: ") + e.what());
    }
  }
  const double fsum = data.fractions[0] + data.fractions[1] + data.fractions[2];
  check(std::abs(fsum - 1.0) < 1e-9, "data.fractions must sum to 1");
  for (double f : data.fractions) check(f >= 0.0, "data.fractions must be non-negative");
  check(data.solver_restarts >= 1, "data.solver_restarts must be >= 1");
  check(data.exhaustive_max_observations >= 0 && data.exhaustive_max_observations <= 14,
        "data.exhaustive_max_observations must be in [0, 14]");
  validate_hp(encoders.defaults, "encoders");
  for (const auto& [name, hp] : encoders.overrides) {
    check(std::find(data.synthetic.modalities.begin(), data.synthetic.modalities.end(), name) !=
              data.synthetic.modalities.end() || data.manifest.has_value(),
          "encoders.overrides." + name + " names an unknown modality");
    validate_hp(hp, "encoders.overrides." + name);
  }
  check(search.activations == 1 || search.activations == 2, "search.activations must be 1 or 2");
  check(search.max_layers >= 1, "search.max_layers must be >= 1");
  check(search.levels >= 1 && search.levels <= search.max_layers, "search.levels must be in [1, max_layers]");
  check(search.iterations >= 1, "search.iterations must be >= 1");
  check(search.samples >= 1, "search.samples must be >= 1");
  check(search.temperature.t_min > 0.0 && search.temperature.t_max > search.temperature.t_min,
        "search temperatures need t_max > t_min > 0");
  check(search.temperature.decay > 0.0, "search.decay must be positive");
  check(search.eval.epochs >= 1 && search.eval.batch_size >= 1 && search.eval.neurons >= 1,
        "search eval epochs, batch size and neurons must be positive");
  check(search.eval.learning_rate > 0.0, "search.learning_rate must be positive");
  check(search.eval.shuffle_buffer >= 1, "search.shuffle_buffer must be >= 1");
  check(search.top_k >= 1, "search.top_k must be >= 1");
  const auto& u = search.surrogate;
  check(u.embedding_width >= 1 && u.units >= 1 && u.epochs >= 0 && u.batch_size >= 1 && u.learning_rate > 0.0,
        "search.surrogate values must be positive");
  const auto& p = final.plan;
  check(p.neurons.size() >= static_cast<std::size_t>(search.max_layers), "final.neurons needs one entry per fusion layer");
  check(p.dropouts.size() == p.neurons.size(), "final.dropouts must match final.neurons in length");
  for (int n : p.neurons) check(n >= 1, "final.neurons must be positive");
  for (double r : p.dropouts) check(r >= 0.0 && r < 1.0, "final.dropouts must be in [0, 1)");
  check(p.classifier_dropout >= 0.0 && p.classifier_dropout < 1.0, "final.classifier_dropout must be in [0, 1)");
  check(p.schedule.initial_lr > 0.0 && p.schedule.decay_rate > 0.0 && p.schedule.decay_rate <= 1.0 &&
            p.schedule.decay_steps > 0,
        "final learning-rate schedule is invalid");
  check(p.epochs >= 1 && p.patience >= 1 && p.batch_size >= 1, "final epochs, patience and batch_size must be positive");
  check(p.md_rate >= 0.0 && p.md_rate < 1.0, "final.md_rate must be in [0, 1)");
  const auto& s = final.selection;
  check(s.epochs >= 1 && s.patience >= 1 && s.batch_size >= 1, "final.selection values must be positive");
  check(s.schedule.initial_lr > 0.0 && s.schedule.decay_rate > 0.0 && s.schedule.decay_rate <= 1.0 &&
            s.schedule.decay_steps > 0,
        "final.selection learning-rate schedule is invalid");
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::gen_data: return "gen-data";
    case Stage::train_encoders: return "train-encoders";
    case Stage::search: return "search";
    case Stage::train_final: return "train-final";
    case Stage::evaluate: return "evaluate";
    case Stage::report: return "report";
  }
  return "?";
}

std::optional<Stage> parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (name == stage_name(s)) return s;
  }
  return std::nullopt;
}

std::vector<Stage> all_stages() {
  return {Stage::gen_data, Stage::train_encoders, Stage::search, Stage::train_final, Stage::evaluate, Stage::report};
}

std::string stage_hash(const RunConfig& config, Stage stage) {
  const json j = config.to_json();
  json material;
  material["schema_version"] = j["schema_version"];
  material["seed"] = j["seed"];
  material["data"] = j["data"];
  if (stage >= Stage::train_encoders) material["encoders"] = j["encoders"];
  if (stage >= Stage::search) {
    material["search"] = j["search"];
    material["workers"] = j["workers"];
  }
  if (stage >= Stage::train_final) material["final"] = j["final"];
  material["stage"] = static_cast<int>(stage);
  return hex(hash_text(material.dump()));
}

namespace {

fs::path stage_dir(const RunConfig& c, Stage s) { return c.output_dir / stage_name(s); }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

void write_json(const fs::path& path, const json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::optional<std::string> recorded_hash(const RunConfig& c, Stage s) {
  const auto path = stage_dir(c, s) / "stage.json";
  if (!fs::exists(path)) return std::nullopt;
  return read_json(path).at("config_hash").get<std::string>();
}

void require(const RunConfig& c, Stage upstream) {
  const auto rec = recorded_hash(c, upstream);
  const std::string name = stage_name(upstream);
  if (!rec) throw MissingPrerequisite(name, "missing prerequisite: run `" + name + "` first");
  if (*rec != stage_hash(c, upstream)) {
    throw MissingPrerequisite(name, "prerequisite `" + name + "` is stale for this config: rerun `" + name + "`");
  }
}

struct Context {
  const RunConfig& config;
  Logger log;
  std::string hash;

  void line(const std::string& text) const {
    if (log) log(text);
  }
};

data::PreparedData load_data(const RunConfig& c) { return data::load_prepared(stage_dir(c, Stage::gen_data) / "dataset"); }

std::vector<encoders::Encoder> load_encoders(const RunConfig& c, const data::PreparedData& d, bool full) {
  std::vector<encoders::Encoder> out;
  for (const auto& name : d.modality_names) {
    out.push_back(encoders::Encoder::load(stage_dir(c, Stage::train_encoders) / (name + (full ? ".full.ckpt" : ".ckpt"))));
  }
  return out;
}

std::vector<const encoders::Encoder*> pointers(const std::vector<encoders::Encoder>& v) {
  std::vector<const encoders::Encoder*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

std::uint64_t encoders_checksum(const std::vector<encoders::Encoder>& v) {
  std::uint64_t h = 0;
  for (const auto& e : v) h = h * 1099511628211ULL ^ e.content_hash();
  return h;
}

search::SearchSpace space_of(const RunConfig& c, std::size_t modalities) {
  search::SearchSpace space;
  space.layer_counts.assign(modalities, encoders::kFusibleLayerCount);
  space.activations = c.search.activations;
  space.max_layers = c.search.max_layers;
  return space;
}

json metrics_json(const eval::MetricsReport& r) { return r.to_json(); }

// ---- stages ---------------------------------------------------------------

void run_gen_data(const Context& ctx) {
  const auto& c = ctx.config;
  const fs::path dir = stage_dir(c, Stage::gen_data);
  data::PreparedData prepared;
  if (c.data.manifest) {
    prepared = data::load_prepared(*c.data.manifest);
  } else {
    data::SyntheticSpec spec = c.data.synthetic;
    spec.seed = c.seed;
    const auto raw = data::generate_synthetic(spec);
    data::PrepareOptions opt;
    opt.fractions = c.data.fractions;
    opt.solver.restarts = c.data.solver_restarts;
    opt.solver.exhaustive_max_observations = static_cast<std::size_t>(c.data.exhaustive_max_observations);
    opt.solver.seed = mix_seed(c.seed, 2);
    opt.seed = mix_seed(c.seed, 3);
    prepared = data::prepare_dataset(raw, opt);
  }
  data::save_prepared(dir / "dataset", prepared, {{"seed", c.seed}, {"config_hash", ctx.hash}});

  json summary;
  summary["classes"] = prepared.num_classes;
  summary["modalities"] = prepared.modality_names;
  summary["classes_per_modality"] = prepared.filter_report.classes_per_modality;
  summary["image_transfers"] = prepared.summary.image_transfers;
  for (std::size_t s = 0; s < data::kSplitCount; ++s) {
    const std::string name = data::split_name(static_cast<int>(s));
    summary["records"][name] = prepared.records[s].size();
    summary["observations"][name] = prepared.summary.observations[s];
  }
  write_json(dir / "data_summary.json", summary);
  std::ostringstream msg;
  msg << "stage=gen-data classes=" << prepared.num_classes << " records_train=" << prepared.records[0].size()
      << " records_val=" << prepared.records[1].size() << " records_test=" << prepared.records[2].size()
      << " image_transfers=" << prepared.summary.image_transfers;
  ctx.line(msg.str());
}

void run_train_encoders(const Context& ctx) {
  const auto& c = ctx.config;
  const fs::path dir = stage_dir(c, Stage::train_encoders);
  const auto d = load_data(c);
  json report = json::array();
  for (std::size_t m = 0; m < d.modality_count(); ++m) {
    const std::string& name = d.modality_names[m];
    const auto& hp = c.encoders.for_modality(name);
    const auto& train = d.unimodal[data::kTrain][m];
    const auto& val = d.unimodal[data::kValidation][m];
    const auto& test = d.unimodal[data::kTest][m];
    auto tuned = encoders::train_encoder(name, train, val, d.num_classes, hp, mix_seed(c.seed, 100 + m));
    tuned.encoder.save(dir / (name + ".ckpt"));
    const int best = std::max(1, tuned.report.best_epoch);
    const int retrain_epochs = best + std::max(1, best / 10);
    auto full = encoders::retrain_encoder(name, data::UnimodalSet::concat(train, val), d.num_classes, retrain_epochs, hp,
                                          mix_seed(c.seed, 200 + m));
    full.encoder.save(dir / (name + ".full.ckpt"));
    const auto val_metrics = eval::confusion_and_metrics(tuned.encoder.predict(val.features), val.labels, d.num_classes);
    const auto test_metrics = eval::confusion_and_metrics(full.encoder.predict(test.features), test.labels, d.num_classes);
    report.push_back({{"modality", name},
                      {"epochs_run", tuned.report.epochs_run},
                      {"best_epoch", tuned.report.best_epoch},
                      {"retrain_epochs", retrain_epochs},
                      {"val_macro_f1", val_metrics.macro_f1},
                      {"val_accuracy", val_metrics.accuracy},
                      {"test_macro_f1", test_metrics.macro_f1},
                      {"test_accuracy", test_metrics.accuracy},
                      {"content_hash", hex(tuned.encoder.content_hash())},
                      {"full_content_hash", hex(full.encoder.content_hash())}});
    std::ostringstream msg;
    msg << "stage=train-encoders modality=" << name << " epochs=" << tuned.report.epochs_run
        << " best_epoch=" << tuned.report.best_epoch << " val_macro_f1=" << val_metrics.macro_f1
        << " retrain_epochs=" << retrain_epochs;
    ctx.line(msg.str());
  }
  json ordering = json::array();
  std::vector<std::size_t> idx(report.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return report[a]["val_macro_f1"].get<double>() > report[b]["val_macro_f1"].get<double>();
  });
  for (auto i : idx) ordering.push_back(report[i]["modality"]);
  write_json(dir / "encoders.json", {{"encoders", report}, {"val_macro_f1_order", ordering}});
}

void run_search_stage(const Context& ctx) {
  const auto& c = ctx.config;
  const fs::path dir = stage_dir(c, Stage::search);
  const auto d = load_data(c);
  const auto encs = load_encoders(c, d, false);
  const std::uint64_t before = encoders_checksum(encs);

  // A state left by a different config must not be resumed.
  const fs::path state_dir = dir / "state";
  const fs::path state_hash = dir / "state_hash";
  if (fs::exists(state_dir)) {
    std::string recorded;
    if (std::ifstream in(state_hash); in) in >> recorded;
    if (recorded != ctx.hash) fs::remove_all(state_dir);
  }
  fs::create_directories(dir);
  std::ofstream(state_hash) << ctx.hash << '\n';

  encoders::FeatureCache cache;
  const search::FusionEvaluator evaluator(pointers(encs), d.records[data::kTrain], d.records[data::kValidation],
                                          d.num_classes, c.search.eval, &cache);
  search::SearchOptions so;
  so.space = space_of(c, d.modality_count());
  so.iterations = c.search.iterations;
  so.levels = c.search.levels;
  so.samples = c.search.samples;
  so.temperature = c.search.temperature;
  so.surrogate = c.search.surrogate;
  so.seed = mix_seed(c.seed, 30);
  so.workers = c.workers;
  so.top_k = static_cast<std::size_t>(c.search.top_k);
  so.checkpoint_dir = state_dir;
  so.log = ctx.log;
  const auto result = search::run_search(
      so, [&evaluator](const search::FusionConfig& cfg, search::SharedWeightStore& w, std::uint64_t seed) {
        return evaluator(cfg, w, seed);
      });
  if (encoders_checksum(encs) != before) throw std::logic_error("search modified encoder parameters");

  result.store.write_csv(dir / "results.csv", so.space);
  json top = json::array();
  for (const auto& [cfg, score] : result.top) {
    top.push_back({{"tokens", search::encode_config_tokens(cfg, so.space)}, {"config", search::to_string(cfg)}, {"score", score}});
  }
  write_json(dir / "top.json", {{"top", top},
                                {"evaluations", result.evaluations},
                                {"evaluation_budget", search::evaluation_budget(so)},
                                {"distinct_configs", result.store.size()},
                                {"temperature_steps", result.temperature_step},
                                {"shared_weight_entries", result.weights.size()},
                                {"surrogate_checksum", hex(result.surrogate_checksum)},
                                {"encoder_checksum", hex(before)}});
}

struct Banks {
  fusion::FeatureBank train;
  fusion::FeatureBank val;
};

void run_train_final(const Context& ctx) {
  const auto& c = ctx.config;
  const fs::path dir = stage_dir(c, Stage::train_final);
  const auto d = load_data(c);
  const auto space = space_of(c, d.modality_count());
  const auto top_json = read_json(stage_dir(c, Stage::search) / "top.json").at("top");
  const int C = d.num_classes;

  const auto encs = load_encoders(c, d, false);
  const auto ptrs = pointers(encs);
  std::vector<std::vector<fusion::FusibleLayerInfo>> registries;
  for (const auto& e : encs) registries.push_back(e.fusible_layers());
  const std::uint64_t before = encoders_checksum(encs);

  const auto& train_records = d.records[data::kTrain];
  const auto& val_records = d.records[data::kValidation];
  const auto train_bank = fusion::compute_feature_bank(ptrs, train_records);
  const auto val_bank = fusion::compute_feature_bank(ptrs, val_records);
  const auto weights = compute_class_weights(train_records.labels).dense(C);

  // Short-list: every top config with batch norm, early stopping on validation loss.
  const auto sel_batches = fusion::make_batches(train_bank, train_records, static_cast<std::size_t>(c.final.selection.batch_size));
  json selection = json::array();
  std::size_t best_index = 0;
  double best_f1 = -1.0;
  for (std::size_t i = 0; i < top_json.size(); ++i) {
    const auto cfg = search::decode_config_tokens(top_json[i].at("tokens").get<std::vector<int>>(), space);
    fusion::NetworkOptions no;
    no.neurons.assign(cfg.size(), c.search.eval.neurons);
    no.batch_norm = true;
    fusion::FusionNetwork net(cfg, registries, C, no, mix_seed(c.seed, 300 + i));
    fusion::TrainOptions to;
    to.epochs = c.final.selection.epochs;
    to.patience = c.final.selection.patience;
    to.schedule = c.final.selection.schedule;
    to.shuffle_buffer = c.search.eval.shuffle_buffer;
    to.seed = mix_seed(c.seed, 350 + i);
    const auto rep = fusion::train_network(net, sel_batches, weights, to, nullptr, &val_bank, &val_records.labels);
    const double f1 = eval::confusion_and_metrics(net.infer(val_bank), val_records.labels, C).macro_f1;
    selection.push_back({{"config", search::to_string(cfg)},
                         {"tokens", top_json[i].at("tokens")},
                         {"search_score", top_json[i].at("score")},
                         {"val_macro_f1", f1},
                         {"epochs_run", rep.epochs_run},
                         {"best_epoch", rep.best_epoch}});
    std::ostringstream msg;
    msg << "stage=train-final phase=selection rank=" << i + 1 << " config=" << search::to_string(cfg)
        << " search_score=" << top_json[i].at("score").get<double>() << " val_macro_f1=" << f1
        << " epochs=" << rep.epochs_run;
    ctx.line(msg.str());
    if (f1 > best_f1) {
      best_f1 = f1;
      best_index = i;
    }
  }
  const auto best_cfg = search::decode_config_tokens(top_json[best_index].at("tokens").get<std::vector<int>>(), space);
  const auto& plan = c.final.plan;
  const auto plan_options = plan.network_options(best_cfg.size());

  // Tuning variant of the final plan: training split only, early stopping on validation.
  const auto plan_batches = fusion::make_batches(train_bank, train_records, static_cast<std::size_t>(plan.batch_size));
  fusion::FusionNetwork tuned(best_cfg, registries, C, plan_options, mix_seed(c.seed, 400));
  fusion::TrainOptions tune_opts;
  tune_opts.epochs = plan.epochs;
  tune_opts.patience = plan.patience;
  tune_opts.schedule = plan.schedule;
  tune_opts.shuffle_buffer = c.search.eval.shuffle_buffer;
  tune_opts.seed = mix_seed(c.seed, 401);
  const auto tune_rep = fusion::train_network(tuned, plan_batches, weights, tune_opts, nullptr, &val_bank, &val_records.labels);
  const double tuned_f1 = eval::confusion_and_metrics(tuned.infer(val_bank), val_records.labels, C).macro_f1;
  if (encoders_checksum(encs) != before) throw std::logic_error("final training modified encoder parameters");
  {
    std::ostringstream msg;
    msg << "stage=train-final phase=tuning config=" << search::to_string(best_cfg) << " val_macro_f1=" << tuned_f1
        << " epochs=" << tune_rep.epochs_run << " best_epoch=" << tune_rep.best_epoch;
    ctx.line(msg.str());
  }

  // Retrain on train+validation with the retrained encoders, with and without MD.
  const auto full = load_encoders(c, d, true);
  const auto full_ptrs = pointers(full);
  const auto merged = data::RecordSet::concat(train_records, val_records);
  std::vector<std::size_t> perm(merged.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng perm_rng(mix_seed(c.seed, 402));
  std::shuffle(perm.begin(), perm.end(), perm_rng);
  const auto merged_shuffled = merged.select(perm);
  const auto merged_bank = fusion::compute_feature_bank(full_ptrs, merged_shuffled);
  const auto zero_bank = fusion::zero_input_features(full_ptrs);
  const auto merged_batches = fusion::make_batches(merged_bank, merged_shuffled, static_cast<std::size_t>(plan.batch_size));
  const auto merged_weights = compute_class_weights(merged_shuffled.labels).dense(C);
  std::vector<std::vector<fusion::FusibleLayerInfo>> full_registries;
  for (const auto& e : full) full_registries.push_back(e.fusible_layers());

  json variants = json::object();
  for (const bool md : {false, true}) {
    fusion::FusionNetwork net(best_cfg, full_registries, C, plan_options, mix_seed(c.seed, 410));
    fusion::TrainOptions to;
    to.epochs = plan.epochs;
    to.patience = 0;
    to.schedule = plan.schedule;
    to.md_rate = md ? plan.md_rate : 0.0;
    to.shuffle_buffer = c.search.eval.shuffle_buffer;
    to.seed = mix_seed(c.seed, 411);
    const auto rep = fusion::train_network(net, merged_batches, merged_weights, to, &zero_bank);
    const std::string name = md ? "md" : "no_md";
    fusion::save_network(dir / ("model_" + name + ".ckpt"), net, space,
                         {{"seed", c.seed}, {"config_hash", ctx.hash}, {"md_rate", to.md_rate}, {"plan", plan.to_json()}});
    variants[name] = {{"md_rate", to.md_rate},
                      {"epochs", rep.epochs_run},
                      {"final_train_loss", rep.train_loss.back()},
                      {"first_batch_checksum", hex(rep.first_batch_checksum)},
                      {"trainable_parameters", net.trainable_parameter_count()}};
    std::ostringstream msg;
    msg << "stage=train-final phase=retrain variant=" << name << " epochs=" << rep.epochs_run
        << " final_train_loss=" << rep.train_loss.back();
    ctx.line(msg.str());
  }

  write_json(dir / "final.json", {{"selection", selection},
                                  {"selected", search::to_string(best_cfg)},
                                  {"selected_tokens", search::encode_config_tokens(best_cfg, space)},
                                  {"selected_search_score", top_json[best_index].at("score")},
                                  {"selected_selection_val_macro_f1", best_f1},
                                  {"tuning_val_macro_f1", tuned_f1},
                                  {"tuning_epochs", tune_rep.epochs_run},
                                  {"tuning_best_epoch", tune_rep.best_epoch},
                                  {"plan", plan.to_json()},
                                  {"variants", variants}});
}

json subset_names(const std::vector<std::size_t>& subset, const std::vector<std::string>& names) {
  json out = json::array();
  for (auto m : subset) out.push_back(names[m]);
  return out;
}

json mcnemar_json(const eval::ContingencyTable& t) {
  const auto r = eval::mcnemar_test(t);
  return {{"n00", t.n00}, {"n01", t.n01}, {"n10", t.n10}, {"n11", t.n11}, {"chi2", r.statistic}, {"p_value", r.p_value}};
}

void run_evaluate(const Context& ctx) {
  const auto& c = ctx.config;
  const fs::path dir = stage_dir(c, Stage::evaluate);
  const auto d = load_data(c);
  const auto space = space_of(c, d.modality_count());
  const int C = d.num_classes;
  const auto full = load_encoders(c, d, true);
  const auto ptrs = pointers(full);
  std::vector<std::vector<fusion::FusibleLayerInfo>> registries;
  for (const auto& e : full) registries.push_back(e.fusible_layers());
  const fs::path final_dir = stage_dir(c, Stage::train_final);
  const auto no_md = fusion::load_network(final_dir / "model_no_md.ckpt", registries, space);
  const auto md = fusion::load_network(final_dir / "model_md.ckpt", registries, space);
  const auto& test = d.records[data::kTest];

  auto fused_predictor = [&](const fusion::FusionNetwork& net) {
    return [&](const data::RecordSet& r) { return fusion::predict(net, fusion::compute_feature_bank(ptrs, r)); };
  };
  auto unimodal_probs = [&](const data::RecordSet& r) {
    std::vector<Matrix> probs;
    for (std::size_t m = 0; m < full.size(); ++m) probs.push_back(full[m].predict(r.inputs[m]));
    return probs;
  };
  const eval::RecordPredictor baseline = [&](const data::RecordSet& r) {
    return eval::late_fusion_predict(unimodal_probs(r), r.presence);
  };
  const eval::RecordPredictor p_no_md = fused_predictor(no_md);
  const eval::RecordPredictor p_md = fused_predictor(md);

  const Matrix probs_no_md = p_no_md(test);
  const Matrix probs_md = p_md(test);
  const Matrix probs_base = baseline(test);
  const auto uni = unimodal_probs(test);

  const auto m_no_md = eval::confusion_and_metrics(probs_no_md, test.labels, C);
  const auto m_md = eval::confusion_and_metrics(probs_md, test.labels, C);
  const auto m_base = eval::confusion_and_metrics(probs_base, test.labels, C);
  eval::write_per_class_csv(dir / "per_class_final.csv", m_no_md, d.original_labels);
  eval::write_per_class_csv(dir / "per_class_final_md.csv", m_md, d.original_labels);
  eval::write_per_class_csv(dir / "per_class_baseline.csv", m_base, d.original_labels);

  json unimodal = json::array();
  for (std::size_t m = 0; m < full.size(); ++m) {
    const auto all_rows = eval::confusion_and_metrics(uni[m], test.labels, C);
    const auto own = eval::subset_evaluate(
        [&](const data::RecordSet& r) { return full[m].predict(r.inputs[m]); }, test, {m}, C);
    unimodal.push_back({{"modality", d.modality_names[m]},
                        {"combined_records", metrics_json(all_rows)},
                        {"records_with_modality", metrics_json(own.metrics)}});
  }

  const auto pred_no_md = eval::argmax_rows(probs_no_md);
  const auto pred_md = eval::argmax_rows(probs_md);
  const auto pred_base = eval::argmax_rows(probs_base);

  json subsets = json::array();
  for (const auto& subset : eval::all_subsets(d.modality_count())) {
    const auto r_no_md = eval::subset_evaluate(p_no_md, test, subset, C);
    const auto r_md = eval::subset_evaluate(p_md, test, subset, C);
    const auto r_base = eval::subset_evaluate(baseline, test, subset, C);
    json entry = {{"modalities", subset_names(subset, d.modality_names)},
                  {"predictions", r_base.instances},
                  {"final_macro_f1", r_no_md.metrics.macro_f1},
                  {"final_md_macro_f1", r_md.metrics.macro_f1},
                  {"baseline_macro_f1", r_base.metrics.macro_f1}};
    if (r_base.instances > 0) {
      entry["final_vs_baseline"] = mcnemar_json(eval::contingency(r_no_md.predictions, r_base.predictions, r_base.labels));
      entry["final_md_vs_baseline"] = mcnemar_json(eval::contingency(r_md.predictions, r_base.predictions, r_base.labels));
    }
    subsets.push_back(entry);
  }

  const json out = {{"seed", c.seed},
                    {"config_hash", ctx.hash},
                    {"test_records", test.size()},
                    {"final", metrics_json(m_no_md)},
                    {"final_md", metrics_json(m_md)},
                    {"baseline", metrics_json(m_base)},
                    {"unimodal", unimodal},
                    {"mcnemar",
                     {{"final_vs_baseline", mcnemar_json(eval::contingency(pred_no_md, pred_base, test.labels))},
                      {"final_md_vs_baseline", mcnemar_json(eval::contingency(pred_md, pred_base, test.labels))},
                      {"final_vs_final_md", mcnemar_json(eval::contingency(pred_no_md, pred_md, test.labels))}}},
                    {"subsets", subsets}};
  write_json(dir / "evaluation.json", out);
  std::ostringstream msg;
  msg << "stage=evaluate final_macro_f1=" << m_no_md.macro_f1 << " final_md_macro_f1=" << m_md.macro_f1
      << " baseline_macro_f1=" << m_base.macro_f1;
  ctx.line(msg.str());
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

std::string marker(const json& entry, const char* key) {
  if (!entry.contains(key)) return "";
  return eval::significance_marker(entry.at(key).at("p_value").get<double>());
}

void run_report(const Context& ctx) {
  const auto& c = ctx.config;
  const fs::path dir = stage_dir(c, Stage::report);
  const auto evaluation = read_json(stage_dir(c, Stage::evaluate) / "evaluation.json");
  const auto final_json = read_json(stage_dir(c, Stage::train_final) / "final.json");
  auto search_json = read_json(stage_dir(c, Stage::search) / "top.json");
  const auto encoders_json = read_json(stage_dir(c, Stage::train_encoders) / "encoders.json");
  const auto data_json = read_json(stage_dir(c, Stage::gen_data) / "data_summary.json");

  json stage_hashes = json::object();
  for (Stage s : all_stages()) stage_hashes[stage_name(s)] = stage_hash(c, s);
  const json summary = {{"seed", c.seed},
                        {"config_hash", ctx.hash},
                        {"stage_hashes", stage_hashes},
                        {"data", data_json},
                        {"encoders", encoders_json},
                        {"search", search_json},
                        {"final_training", final_json},
                        {"evaluation", evaluation}};
  write_json(dir / "summary.json", summary);

  // Subset table: modalities, predictions, F1 per model, markers against the baseline.
  std::ofstream csv(dir / "subset_report.csv");
  csv << "modalities,predictions,final_macro_f1,final_sig,final_md_macro_f1,final_md_sig,baseline_macro_f1\n";
  std::ostringstream table;
  table << std::left << std::setw(28) << "Modalities" << std::setw(16) << "# Predictions" << std::setw(18)
        << "Final Model" << std::setw(22) << "Final Model with MD" << "Baseline\n";
  for (const auto& e : evaluation.at("subsets")) {
    std::string mods;
    for (const auto& m : e.at("modalities")) mods += (mods.empty() ? "" : ", ") + m.get<std::string>();
    const std::string f = fmt(e.at("final_macro_f1").get<double>()) + marker(e, "final_vs_baseline");
    const std::string fm = fmt(e.at("final_md_macro_f1").get<double>()) + marker(e, "final_md_vs_baseline");
    const std::string b = fmt(e.at("baseline_macro_f1").get<double>());
    table << std::setw(28) << mods << std::setw(16) << e.at("predictions").get<std::size_t>() << std::setw(18) << f
          << std::setw(22) << fm << b << '\n';
    csv << '"' << mods << "\"," << e.at("predictions").get<std::size_t>() << ','
        << fmt(e.at("final_macro_f1").get<double>()) << ',' << marker(e, "final_vs_baseline") << ','
        << fmt(e.at("final_md_macro_f1").get<double>()) << ',' << marker(e, "final_md_vs_baseline") << ',' << b << '\n';
  }
  table << "* p < 0.05, ** p < 0.001 (McNemar against the baseline)\n";
  std::ofstream(dir / "subset_report.txt") << table.str();

  std::ostringstream overall;
  overall << std::left << std::setw(22) << "Model" << std::setw(10) << "Acc" << std::setw(10) << "Top-5"
          << std::setw(10) << "Top-10" << std::setw(11) << "Precision" << std::setw(10) << "Recall" << "F1\n";
  auto row = [&](const std::string& name, const json& m) {
    overall << std::setw(22) << name << std::setw(10) << fmt(m.at("accuracy").get<double>()) << std::setw(10)
            << fmt(m.at("top5").get<double>()) << std::setw(10) << fmt(m.at("top10").get<double>()) << std::setw(11)
            << fmt(m.at("macro_precision").get<double>()) << std::setw(10) << fmt(m.at("macro_recall").get<double>())
            << fmt(m.at("macro_f1").get<double>()) << '\n';
  };
  row("final", evaluation.at("final"));
  row("final (MD)", evaluation.at("final_md"));
  row("late fusion", evaluation.at("baseline"));
  for (const auto& u : evaluation.at("unimodal")) row(u.at("modality").get<std::string>(), u.at("combined_records"));
  std::ofstream(dir / "metrics_table.txt") << overall.str();
  ctx.line("stage=report summary=" + (dir / "summary.json").string());
}

}  // namespace

fs::path summary_path(const RunConfig& config) { return stage_dir(config, Stage::report) / "summary.json"; }

StageOutcome run_stage(Stage stage, const RunConfig& config, const Logger& log) {
  config.validate();
  const std::string hash = stage_hash(config, stage);
  const std::string name = stage_name(stage);
  if (const auto rec = recorded_hash(config, stage); rec && *rec == hash) {
    const std::string msg = "stage=" + name + " status=skipped reason=unchanged config_hash=" + hash;
    if (log) log(msg);
    return {true, msg};
  }
  if (stage != Stage::gen_data) require(config, static_cast<Stage>(static_cast<int>(stage) - 1));

  const fs::path dir = stage_dir(config, stage);
  fs::create_directories(dir);
  fs::remove(dir / "stage.json");
  const auto start = std::chrono::steady_clock::now();
  const Context ctx{config, log, hash};
  switch (stage) {
    case Stage::gen_data: run_gen_data(ctx); break;
    case Stage::train_encoders: run_train_encoders(ctx); break;
    case Stage::search: run_search_stage(ctx); break;
    case Stage::train_final: run_train_final(ctx); break;
    case Stage::evaluate: run_evaluate(ctx); break;
    case Stage::report: run_report(ctx); break;
  }
  write_json(dir / "stage.json", {{"stage", name}, {"config_hash", hash}, {"seed", config.seed}, {"schema_version", kSchemaVersion}});
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const std::string msg = "stage=" + name + " status=done config_hash=" + hash + " wall=" + fmt(wall);
  if (log) log(msg);
  return {false, msg};
}

void run_all(const RunConfig& config, const Logger& log) {
  for (Stage s : all_stages()) run_stage(s, config, log);
}

}  // namespace mfas::pipeline
