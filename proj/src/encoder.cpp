#include "mfas/encoder.hpp"

#include "mfas/checkpoint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <stdexcept>

namespace mfas::encoders {

nlohmann::json EncoderHyperparams::to_json() const {
  return {{"hidden", hidden},
          {"penultimate", penultimate},
          {"initial_lr", schedule.initial_lr},
          {"decay_rate", schedule.decay_rate},
          {"decay_steps", schedule.decay_steps},
          {"batch_size", batch_size},
          {"max_epochs", max_epochs},
          {"patience", patience},
          {"classifier_dropout", classifier_dropout}};
}

EncoderHyperparams EncoderHyperparams::from_json(const nlohmann::json& j) {
  EncoderHyperparams hp;
  hp.hidden = j.at("hidden").get<std::vector<int>>();
  hp.penultimate = j.at("penultimate").get<int>();
  hp.schedule.initial_lr = j.at("initial_lr").get<double>();
  hp.schedule.decay_rate = j.at("decay_rate").get<double>();
  hp.schedule.decay_steps = j.at("decay_steps").get<std::size_t>();
  hp.batch_size = j.at("batch_size").get<int>();
  hp.max_epochs = j.at("max_epochs").get<int>();
  hp.patience = j.at("patience").get<int>();
  hp.classifier_dropout = j.at("classifier_dropout").get<double>();
  return hp;
}

Encoder::Encoder(std::string modality, int input_dim, int num_classes, const EncoderHyperparams& hp, std::uint64_t seed)
    : modality_(std::move(modality)), input_dim_(input_dim), num_classes_(num_classes), hp_(hp) {
  if (hp.hidden.size() != 3) throw std::invalid_argument("encoder: exactly three hidden layers expected");
  if (input_dim <= 0 || num_classes <= 0) throw std::invalid_argument("encoder: bad dimensions");
  Rng rng(seed);
  int width = input_dim;
  const char* names[] = {"hidden1_activation", "hidden2", "hidden3"};
  for (std::size_t k = 0; k < 3; ++k) {
    net_.add<Dense>(width, hp.hidden[k], rng);
    net_.add<Activation>(ActivationKind::relu);
    width = hp.hidden[k];
    taps_.push_back(net_.size() - 1);
    fusible_.push_back({modality_ + "/" + names[k], static_cast<int>(k + 1), width, {static_cast<std::size_t>(width)}});
  }
  net_.add<Dense>(width, hp.penultimate, rng);
  net_.add<Activation>(ActivationKind::relu);
  taps_.push_back(net_.size() - 1);
  fusible_.push_back({modality_ + "/penultimate", 4, hp.penultimate, {static_cast<std::size_t>(hp.penultimate)}});
  if (hp.classifier_dropout > 0.0) net_.add<Dropout>(hp.classifier_dropout, mix_seed(seed, 1));
  net_.add<Dense>(hp.penultimate, num_classes, rng);
  taps_.push_back(net_.size() - 1);
  fusible_.push_back({modality_ + "/logits", 5, num_classes, {static_cast<std::size_t>(num_classes)}});
  net_.add<Activation>(ActivationKind::softmax);
  taps_.push_back(net_.size() - 1);
  fusible_.push_back({modality_ + "/output", 6, num_classes, {static_cast<std::size_t>(num_classes)}});
}

int Encoder::fusible_width(int index) const {
  if (index < 1 || index > kFusibleLayerCount) throw std::out_of_range("fusible layer index out of range");
  return fusible_[static_cast<std::size_t>(index - 1)].width;
}

Matrix Encoder::predict(const Matrix& x) const { return net_.infer(x); }

std::vector<Matrix> Encoder::fusible_outputs(const Matrix& x) const {
  auto all = net_.infer_all(x);
  std::vector<Matrix> out;
  out.reserve(taps_.size());
  for (auto t : taps_) out.push_back(all[t]);
  return out;
}

Matrix Encoder::extract(int layer_index, const Matrix& x) const {
  if (layer_index < 1 || layer_index > kFusibleLayerCount) throw std::out_of_range("fusible layer index out of range");
  Matrix h = x;
  const auto last = taps_[static_cast<std::size_t>(layer_index - 1)];
  for (std::size_t i = 0; i <= last; ++i) h = net_.layer(i).infer(h);
  return h;
}

std::uint64_t Encoder::content_hash() const { return parameter_checksum(net_.parameters()); }

void Encoder::save(const std::filesystem::path& path) const {
  Checkpoint ckpt;
  ckpt.meta() = {{"kind", "encoder"},
                 {"modality", modality_},
                 {"input_dim", input_dim_},
                 {"num_classes", num_classes_},
                 {"hyperparams", hp_.to_json()}};
  ckpt.add_parameters("layer/", net_.parameters());
  ckpt.save(path);

  nlohmann::json sidecar;
  sidecar["modality"] = modality_;
  sidecar["content_hash"] = content_hash();
  sidecar["fusible_layers"] = nlohmann::json::array();
  for (const auto& f : fusible_) {
    sidecar["fusible_layers"].push_back(
        {{"name", f.name}, {"index", f.index}, {"width", f.width}, {"sample_shape", f.sample_shape}});
  }
  std::ofstream(path.string() + ".json") << sidecar.dump(2) << '\n';
}

Encoder Encoder::load(const std::filesystem::path& path) {
  const Checkpoint ckpt = Checkpoint::load(path);
  const auto& meta = ckpt.meta();
  Encoder enc(meta.at("modality").get<std::string>(), meta.at("input_dim").get<int>(), meta.at("num_classes").get<int>(),
              EncoderHyperparams::from_json(meta.at("hyperparams")), 0);
  ckpt.load_parameters("layer/", enc.net_.parameters());
  return enc;
}

bool EarlyStopping::update(int epoch, double loss) {
  improved_last_ = loss < best_loss_;
  if (improved_last_) {
    best_loss_ = loss;
    best_epoch_ = epoch;
    since_best_ = 0;
  } else {
    ++since_best_;
  }
  return since_best_ >= patience_;
}

namespace {

void check_set(const data::UnimodalSet& set, int num_classes, const char* what) {
  if (set.size() == 0) throw std::invalid_argument(std::string("encoder: empty ") + what + " split");
  for (int y : set.labels) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("encoder: label out of range");
  }
}

std::vector<Matrix> snapshot(const Sequential& net) {
  std::vector<Matrix> out;
  for (const Parameter* p : net.parameters()) out.push_back(p->value);
  return out;
}

void restore(Sequential& net, const std::vector<Matrix>& values) {
  auto params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

double run_epoch(Sequential& net, Adam& opt, const data::UnimodalSet& train, const std::vector<double>& weights,
                 const EncoderHyperparams& hp, Rng& rng) {
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t batch = static_cast<std::size_t>(std::max(1, hp.batch_size));
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    Matrix x(static_cast<Eigen::Index>(end - start), train.features.cols());
    std::vector<int> y(end - start);
    for (std::size_t k = start; k < end; ++k) {
      x.row(static_cast<Eigen::Index>(k - start)) = train.features.row(static_cast<Eigen::Index>(order[k]));
      y[k - start] = train.labels[order[k]];
    }
    total += train_step(net, x, y, weights, opt, hp.schedule);
    ++batches;
  }
  return total / static_cast<double>(batches);
}

}  // namespace

double evaluate_loss(const Encoder& encoder, const data::UnimodalSet& set, const std::vector<double>& weights) {
  return weighted_ce(encoder.predict(set.features), set.labels, weights).value;
}

TrainedEncoder train_encoder(const std::string& modality, const data::UnimodalSet& train, const data::UnimodalSet& val,
                             int num_classes, const EncoderHyperparams& hp, std::uint64_t seed) {
  check_set(train, num_classes, "training");
  check_set(val, num_classes, "validation");
  TrainedEncoder out{Encoder(modality, static_cast<int>(train.features.cols()), num_classes, hp, seed), {}};
  auto& net = out.encoder.network();
  const auto weights = compute_class_weights(train.labels).dense(num_classes);
  Adam opt(net.parameters());
  Rng rng(mix_seed(seed, 2));
  EarlyStopping stopper(hp.patience);
  auto best = snapshot(net);
  for (int epoch = 1; epoch <= hp.max_epochs; ++epoch) {
    out.report.train_loss.push_back(run_epoch(net, opt, train, weights, hp, rng));
    const double vloss = evaluate_loss(out.encoder, val, weights);
    if (!std::isfinite(vloss)) throw DivergenceError("divergence");
    out.report.val_loss.push_back(vloss);
    out.report.epochs_run = epoch;
    const bool stop = stopper.update(epoch, vloss);
    if (stopper.improved_last()) best = snapshot(net);
    if (stop) break;
  }
  restore(net, best);
  out.report.best_epoch = stopper.best_epoch();
  return out;
}

TrainedEncoder retrain_encoder(const std::string& modality, const data::UnimodalSet& train, int num_classes, int epochs,
                               const EncoderHyperparams& hp, std::uint64_t seed) {
  check_set(train, num_classes, "training");
  TrainedEncoder out{Encoder(modality, static_cast<int>(train.features.cols()), num_classes, hp, seed), {}};
  auto& net = out.encoder.network();
  const auto weights = compute_class_weights(train.labels).dense(num_classes);
  Adam opt(net.parameters());
  Rng rng(mix_seed(seed, 2));
  for (int epoch = 1; epoch <= epochs; ++epoch) {
    out.report.train_loss.push_back(run_epoch(net, opt, train, weights, hp, rng));
    out.report.epochs_run = epoch;
  }
  out.report.best_epoch = epochs;
  return out;
}

std::shared_ptr<const Matrix> FeatureCache::find(const Key& key) const {
  std::shared_lock lock(mutex_);
  auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : it->second;
}

std::shared_ptr<const Matrix> FeatureCache::insert(const Key& key, Matrix values) {
  std::unique_lock lock(mutex_);
  auto [it, inserted] = entries_.try_emplace(key, std::make_shared<const Matrix>(std::move(values)));
  return it->second;
}

std::size_t FeatureCache::size() const {
  std::shared_lock lock(mutex_);
  return entries_.size();
}

FusibleFeature extract_features(const Encoder& encoder, int layer_index, const Matrix& batch, FeatureCache* cache,
                                std::uint64_t batch_id) {
  if (layer_index < 1 || layer_index > kFusibleLayerCount) throw std::out_of_range("fusible layer index out of range");
  FusibleFeature out{encoder.modality(), layer_index, {}};
  if (cache == nullptr) {
    out.values = encoder.extract(layer_index, batch);
    return out;
  }
  const FeatureCache::Key key{encoder.content_hash(), layer_index, batch_id};
  auto hit = cache->find(key);
  if (!hit) hit = cache->insert(key, encoder.extract(layer_index, batch));
  out.values = *hit;
  return out;
}

}  // namespace mfas::encoders
