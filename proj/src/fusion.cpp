#include "mfas/fusion.hpp"

#include "mfas/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace mfas::fusion {

std::size_t FeatureBank::rows() const {
  for (const auto& m : slots) {
    if (m.size() > 0) return static_cast<std::size_t>(m.rows());
  }
  return 0;
}

FeatureBank FeatureBank::select(const std::vector<std::size_t>& rows) const {
  FeatureBank out(modalities, layers);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    const Matrix& src = slots[k];
    if (src.size() == 0) continue;
    Matrix dst(static_cast<Eigen::Index>(rows.size()), src.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) dst.row(static_cast<Eigen::Index>(r)) = src.row(static_cast<Eigen::Index>(rows[r]));
    out.slots[k] = std::move(dst);
  }
  return out;
}

FeatureBank FeatureBank::slice(std::size_t start, std::size_t count) const {
  FeatureBank out(modalities, layers);
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (slots[k].size() == 0) continue;
    out.slots[k] = slots[k].middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(count));
  }
  return out;
}

FeatureBank compute_feature_bank(const std::vector<const encoders::Encoder*>& encoders, const data::RecordSet& records,
                                 encoders::FeatureCache* cache, std::uint64_t cache_id) {
  if (encoders.size() != records.modality_count()) throw std::invalid_argument("feature bank: modality count mismatch");
  FeatureBank bank(encoders.size(), encoders::kFusibleLayerCount);
  for (std::size_t m = 0; m < encoders.size(); ++m) {
    if (cache != nullptr) {
      for (int l = 1; l <= encoders::kFusibleLayerCount; ++l) {
        bank.at(m, l) = encoders::extract_features(*encoders[m], l, records.inputs[m], cache, cache_id).values;
      }
    } else {
      auto outputs = encoders[m]->fusible_outputs(records.inputs[m]);
      for (int l = 1; l <= encoders::kFusibleLayerCount; ++l) bank.at(m, l) = std::move(outputs[static_cast<std::size_t>(l - 1)]);
    }
  }
  return bank;
}

FeatureBank zero_input_features(const std::vector<const encoders::Encoder*>& encoders) {
  FeatureBank bank(encoders.size(), encoders::kFusibleLayerCount);
  for (std::size_t m = 0; m < encoders.size(); ++m) {
    auto outputs = encoders[m]->fusible_outputs(Matrix::Zero(1, encoders[m]->input_dim()));
    for (int l = 1; l <= encoders::kFusibleLayerCount; ++l) bank.at(m, l) = std::move(outputs[static_cast<std::size_t>(l - 1)]);
  }
  return bank;
}

namespace {

int fused_width(const FusibleLayerInfo& info) {
  return info.sample_shape.size() > 1 ? static_cast<int>(info.sample_shape.back()) : info.width;
}

std::size_t flat_width(const FusibleLayerInfo& info) {
  std::size_t w = 1;
  for (auto d : info.sample_shape) w *= d;
  return info.sample_shape.empty() ? static_cast<std::size_t>(info.width) : w;
}

ActivationKind activation_of(int index) { return index == 1 ? ActivationKind::relu : ActivationKind::sigmoid; }

void check_config(const FusionConfig& config, const std::vector<std::vector<FusibleLayerInfo>>& registries,
                  const NetworkOptions& options) {
  if (config.layers.empty()) throw std::invalid_argument("fusion network: empty config");
  if (options.neurons.size() != config.size()) throw std::invalid_argument("fusion network: neurons list length differs from config length");
  if (!options.dropouts.empty() && options.dropouts.size() != config.size()) {
    throw std::invalid_argument("fusion network: dropouts list length differs from config length");
  }
  for (std::size_t l = 0; l < config.size(); ++l) {
    const auto& spec = config.layers[l];
    if (spec.layers.size() != registries.size()) throw std::invalid_argument("fusion network: modality count mismatch");
    for (std::size_t m = 0; m < registries.size(); ++m) {
      const int idx = spec.layers[m];
      if (idx < 1 || idx > static_cast<int>(registries[m].size())) {
        throw std::out_of_range("fusion layer " + std::to_string(l + 1) + ": modality " + std::to_string(m) +
                                " has no fusible layer " + std::to_string(idx));
      }
    }
    if (spec.activation < 1 || spec.activation > 2) throw std::out_of_range("fusion network: bad activation index");
  }
}

}  // namespace

FusionNetwork::FusionNetwork(FusionConfig config, std::vector<std::vector<FusibleLayerInfo>> registries, int num_classes,
                             NetworkOptions options, std::uint64_t seed)
    : config_(std::move(config)), registries_(std::move(registries)), num_classes_(num_classes), options_(std::move(options)) {
  check_config(config_, registries_, options_);
  Rng rng(seed);
  int previous = 0;
  for (std::size_t l = 0; l < config_.size(); ++l) {
    int in = previous;
    for (std::size_t m = 0; m < registries_.size(); ++m) {
      in += fused_width(registries_[m][static_cast<std::size_t>(config_.layers[l].layers[m] - 1)]);
    }
    input_widths_.push_back(in);
    const int units = options_.neurons[l];
    Sequential stack;
    // Frozen features need no gradient; only the previous hidden state does.
    stack.add<Dense>(in, units, rng).set_input_grad_cols(previous);
    if (options_.batch_norm) stack.add<BatchNorm>(units);
    stack.add<Activation>(activation_of(config_.layers[l].activation));
    const double rate = options_.dropouts.empty() ? 0.0 : options_.dropouts[l];
    if (rate > 0.0) stack.add<Dropout>(rate, mix_seed(seed, 100 + l));
    stacks_.push_back(std::move(stack));
    previous = units;
  }
  if (options_.classifier_dropout > 0.0) classifier_.add<Dropout>(options_.classifier_dropout, mix_seed(seed, 99));
  classifier_.add<Dense>(previous, num_classes_, rng);
  classifier_.add<Activation>(ActivationKind::softmax);
}

Matrix FusionNetwork::gather(const FeatureBank& bank, std::size_t l, const Matrix* previous) const {
  const auto& spec = config_.layers[l];
  const std::size_t n = bank.rows();
  Matrix x(static_cast<Eigen::Index>(n), input_widths_[l]);
  Eigen::Index col = 0;
  for (std::size_t m = 0; m < registries_.size(); ++m) {
    const auto& info = registries_[m][static_cast<std::size_t>(spec.layers[m] - 1)];
    const Matrix& f = bank.at(m, spec.layers[m]);
    if (static_cast<std::size_t>(f.cols()) != flat_width(info) || static_cast<std::size_t>(f.rows()) != n) {
      throw std::invalid_argument("fusion layer " + std::to_string(l + 1) + ": modality " + std::to_string(m) +
                                  " layer " + std::to_string(spec.layers[m]) + " (" + info.name + ") has width " +
                                  std::to_string(f.cols()) + ", expected " + std::to_string(flat_width(info)));
    }
    const int w = fused_width(info);
    if (info.sample_shape.size() > 1) {
      x.middleCols(col, w) = GlobalAveragePool(w).infer(f);
    } else {
      x.middleCols(col, w) = f;
    }
    col += w;
  }
  if (previous != nullptr) x.middleCols(col, previous->cols()) = *previous;
  return x;
}

Matrix FusionNetwork::forward(const FeatureBank& bank, Mode mode) {
  hidden_.clear();
  for (std::size_t l = 0; l < stacks_.size(); ++l) {
    const Matrix x = gather(bank, l, l == 0 ? nullptr : &hidden_.back());
    hidden_.push_back(stacks_[l].forward(x, mode));
  }
  return classifier_.forward(hidden_.back(), mode);
}

Matrix FusionNetwork::backward(const Matrix& grad_out) {
  Matrix g = classifier_.backward(grad_out);
  for (std::size_t l = stacks_.size(); l-- > 0;) {
    const Matrix gx = stacks_[l].backward(g);
    if (l == 0) return gx;  // zero: feature inputs are frozen
    const Eigen::Index prev = hidden_[l - 1].cols();
    g = gx.rightCols(prev);
  }
  return g;
}

Matrix FusionNetwork::infer(const FeatureBank& bank) const {
  Matrix h;
  for (std::size_t l = 0; l < stacks_.size(); ++l) {
    const Matrix x = gather(bank, l, l == 0 ? nullptr : &h);
    h = stacks_[l].infer(x);
  }
  return classifier_.infer(h);
}

std::vector<Parameter*> FusionNetwork::parameters() {
  std::vector<Parameter*> out;
  for (auto& s : stacks_) {
    for (auto* p : s.parameters()) out.push_back(p);
  }
  for (auto* p : classifier_.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> FusionNetwork::parameters() const {
  auto params = const_cast<FusionNetwork*>(this)->parameters();
  return {params.begin(), params.end()};
}

void FusionNetwork::zero_grad() {
  for (auto& s : stacks_) s.zero_grad();
  classifier_.zero_grad();
}

std::size_t FusionNetwork::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) {
    if (p->trainable) n += static_cast<std::size_t>(p->value.size());
  }
  return n;
}

Dense& FusionNetwork::classifier_dense() {
  return static_cast<Dense&>(classifier_.layer(options_.classifier_dropout > 0.0 ? 1 : 0));
}

std::vector<FusionNetwork::SharedSlot> FusionNetwork::shared_slots() {
  std::vector<SharedSlot> out;
  int previous = 0;
  for (std::size_t l = 0; l < stacks_.size(); ++l) {
    std::string key = "fusion/" + std::to_string(l + 1) + "/";
    for (std::size_t m = 0; m < registries_.size(); ++m) {
      key += std::to_string(fused_width(registries_[m][static_cast<std::size_t>(config_.layers[l].layers[m] - 1)])) + ",";
    }
    key += std::to_string(previous) + "/" + to_string(activation_of(config_.layers[l].activation)) + "/" +
           std::to_string(options_.neurons[l]);
    if (options_.batch_norm) key += "/bn";
    out.push_back({key, stacks_[l].parameters()});
    previous = options_.neurons[l];
  }
  out.push_back({"classifier/" + std::to_string(stacks_.size()) + "/" + std::to_string(previous) + "/" +
                     std::to_string(num_classes_),
                 classifier_.parameters()});
  return out;
}

FusionNetwork build_fusion_network(const FusionConfig& config,
                                   const std::vector<std::vector<FusibleLayerInfo>>& registries, int num_classes,
                                   const NetworkOptions& options, std::uint64_t seed) {
  return FusionNetwork(config, registries, num_classes, options, seed);
}

std::size_t expected_parameter_count(const FusionConfig& config,
                                     const std::vector<std::vector<FusibleLayerInfo>>& registries, int num_classes,
                                     const NetworkOptions& options) {
  std::size_t total = 0;
  std::size_t previous = 0;
  for (std::size_t l = 0; l < config.size(); ++l) {
    std::size_t in = previous;
    for (std::size_t m = 0; m < registries.size(); ++m) {
      in += static_cast<std::size_t>(fused_width(registries[m][static_cast<std::size_t>(config.layers[l].layers[m] - 1)]));
    }
    const auto u = static_cast<std::size_t>(options.neurons[l]);
    total += (in + 1) * u;
    if (options.batch_norm) total += 2 * u;
    previous = u;
  }
  return total + (previous + 1) * static_cast<std::size_t>(num_classes);
}

Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> sample_modality_drops(
    const std::vector<std::uint8_t>& presence, std::size_t modalities, const std::vector<double>& rates, Rng& rng) {
  if (rates.size() != modalities) throw std::invalid_argument("multimodal dropout: one rate per modality expected");
  Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic> drops =
      Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(static_cast<Eigen::Index>(presence.size()),
                                                                          static_cast<Eigen::Index>(modalities));
  for (std::size_t r = 0; r < presence.size(); ++r) {
    for (std::size_t m = 0; m < modalities; ++m) {
      if (!((presence[r] >> m) & 1U)) continue;
      // One draw per present modality whatever the rate, so streams stay aligned.
      const double u = uniform01(rng);
      if (u < rates[m]) drops(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(m)) = 1;
    }
  }
  return drops;
}

data::RecordSet apply_multimodal_dropout(const data::RecordSet& batch, const std::vector<double>& rates, Rng& rng) {
  const auto drops = sample_modality_drops(batch.presence, batch.modality_count(), rates, rng);
  data::RecordSet out = batch;
  for (std::size_t r = 0; r < out.size(); ++r) {
    for (std::size_t m = 0; m < out.modality_count(); ++m) {
      if (drops(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(m)) == 0) continue;
      out.inputs[m].row(static_cast<Eigen::Index>(r)).setZero();
      out.presence[r] = static_cast<std::uint8_t>(out.presence[r] & ~(1U << m));
    }
  }
  return out;
}

void apply_drops_to_bank(FeatureBank& bank, const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>& drops,
                         const FeatureBank& zero_bank) {
  for (Eigen::Index r = 0; r < drops.rows(); ++r) {
    for (std::size_t m = 0; m < bank.modalities; ++m) {
      if (drops(r, static_cast<Eigen::Index>(m)) == 0) continue;
      for (int l = 1; l <= bank.layers; ++l) {
        Matrix& slot = bank.at(m, l);
        if (slot.size() > 0) slot.row(r) = zero_bank.at(m, l).row(0);
      }
    }
  }
}

std::vector<Batch> make_batches(const FeatureBank& bank, const data::RecordSet& records, std::size_t batch_size) {
  if (bank.rows() != records.size()) throw std::invalid_argument("make_batches: row count mismatch");
  if (records.size() == 0) throw std::invalid_argument("make_batches: no records");
  batch_size = std::max<std::size_t>(1, std::min(batch_size, records.size()));
  std::vector<Batch> out;
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, records.size() - start);
    Batch b;
    b.features = bank.slice(start, count);
    b.labels.assign(records.labels.begin() + static_cast<std::ptrdiff_t>(start),
                    records.labels.begin() + static_cast<std::ptrdiff_t>(start + count));
    b.presence.assign(records.presence.begin() + static_cast<std::ptrdiff_t>(start),
                      records.presence.begin() + static_cast<std::ptrdiff_t>(start + count));
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<std::size_t> buffered_shuffle_order(std::size_t count, std::size_t buffer, Rng& rng) {
  buffer = std::max<std::size_t>(1, buffer);
  std::vector<std::size_t> pool;
  std::vector<std::size_t> out;
  out.reserve(count);
  std::size_t next = 0;
  while (next < count && pool.size() < buffer) pool.push_back(next++);
  while (!pool.empty()) {
    auto k = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(pool.size()));
    if (k >= pool.size()) k = pool.size() - 1;
    out.push_back(pool[k]);
    if (next < count) {
      pool[k] = next++;
    } else {
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
    }
  }
  return out;
}

namespace {

std::uint64_t bank_checksum(const FeatureBank& bank) {
  std::uint64_t h = 0;
  for (const auto& m : bank.slots) h = content_hash({m.data(), static_cast<std::size_t>(m.size())}, h);
  return h;
}

double validation_loss(const FusionNetwork& net, const FeatureBank& val, const std::vector<int>& labels,
                       const std::vector<double>& weights) {
  return weighted_ce(net.infer(val), labels, weights).value;
}

}  // namespace

TrainReport train_network(FusionNetwork& network, const std::vector<Batch>& batches, const std::vector<double>& weights,
                          const TrainOptions& options, const FeatureBank* zero_bank, const FeatureBank* val,
                          const std::vector<int>* val_labels) {
  if (batches.empty()) throw std::invalid_argument("train_network: no batches");
  if (options.md_rate > 0.0 && zero_bank == nullptr) throw std::invalid_argument("train_network: MD needs zero-input features");
  const bool early_stopping = options.patience > 0 && val != nullptr && val_labels != nullptr;
  Adam opt(network.parameters());
  Rng order_rng(mix_seed(options.seed, 21));
  Rng md_rng(mix_seed(options.seed, 22));
  const std::size_t modalities = batches.front().features.modalities;
  const std::vector<double> rates(modalities, options.md_rate);

  TrainReport report;
  encoders::EarlyStopping stopper(std::max(1, options.patience));
  std::vector<Matrix> best;
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    double total = 0.0;
    const auto order = buffered_shuffle_order(batches.size(), options.shuffle_buffer, order_rng);
    for (std::size_t k = 0; k < order.size(); ++k) {
      const Batch& b = batches[order[k]];
      if (epoch == 1 && k == 0) report.first_batch_checksum = bank_checksum(b.features);
      double loss = 0.0;
      if (options.md_rate > 0.0) {
        FeatureBank dropped = b.features;
        apply_drops_to_bank(dropped, sample_modality_drops(b.presence, modalities, rates, md_rng), *zero_bank);
        loss = train_step(network, dropped, b.labels, weights, opt, options.schedule);
      } else {
        loss = train_step(network, b.features, b.labels, weights, opt, options.schedule);
      }
      total += loss;
    }
    report.train_loss.push_back(total / static_cast<double>(order.size()));
    report.epochs_run = epoch;
    if (early_stopping) {
      const double vloss = validation_loss(network, *val, *val_labels, weights);
      if (!std::isfinite(vloss)) throw DivergenceError("divergence");
      report.val_loss.push_back(vloss);
      const bool stop = stopper.update(epoch, vloss);
      if (stopper.improved_last()) {
        best.clear();
        for (const auto* p : std::as_const(network).parameters()) best.push_back(p->value);
      }
      if (stop) break;
    }
  }
  if (early_stopping && !best.empty()) {
    auto params = network.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
    report.best_epoch = stopper.best_epoch();
  } else {
    report.best_epoch = report.epochs_run;
  }
  return report;
}

Matrix predict(const FusionNetwork& network, const FeatureBank& bank) { return network.infer(bank); }

NetworkOptions FinalPlan::network_options(std::size_t length) const {
  if (neurons.size() < length || dropouts.size() < length) {
    throw std::invalid_argument("final plan: lists shorter than the config");
  }
  NetworkOptions o;
  o.neurons.assign(neurons.end() - static_cast<std::ptrdiff_t>(length), neurons.end());
  o.dropouts.assign(dropouts.end() - static_cast<std::ptrdiff_t>(length), dropouts.end());
  o.batch_norm = batch_norm;
  o.classifier_dropout = classifier_dropout;
  return o;
}

nlohmann::json FinalPlan::to_json() const {
  return {{"neurons", neurons},
          {"dropouts", dropouts},
          {"classifier_dropout", classifier_dropout},
          {"batch_norm", batch_norm},
          {"initial_lr", schedule.initial_lr},
          {"decay_rate", schedule.decay_rate},
          {"decay_steps", schedule.decay_steps},
          {"epochs", epochs},
          {"patience", patience},
          {"batch_size", batch_size},
          {"md_rate", md_rate}};
}

FinalPlan FinalPlan::from_json(const nlohmann::json& j) {
  FinalPlan p;
  p.neurons = j.at("neurons").get<std::vector<int>>();
  p.dropouts = j.at("dropouts").get<std::vector<double>>();
  p.classifier_dropout = j.at("classifier_dropout").get<double>();
  p.batch_norm = j.at("batch_norm").get<bool>();
  p.schedule.initial_lr = j.at("initial_lr").get<double>();
  p.schedule.decay_rate = j.at("decay_rate").get<double>();
  p.schedule.decay_steps = j.at("decay_steps").get<std::size_t>();
  p.epochs = j.at("epochs").get<int>();
  p.patience = j.at("patience").get<int>();
  p.batch_size = j.at("batch_size").get<int>();
  p.md_rate = j.at("md_rate").get<double>();
  return p;
}

void save_network(const std::filesystem::path& path, const FusionNetwork& network, const search::SearchSpace& space,
                  const nlohmann::json& extra) {
  Checkpoint ckpt;
  const auto& o = network.options();
  nlohmann::json meta = {{"kind", "fusion_network"},
                         {"config_tokens", search::encode_config_tokens(network.config(), space)},
                         {"config", search::to_string(network.config())},
                         {"num_classes", network.num_classes()},
                         {"neurons", o.neurons},
                         {"dropouts", o.dropouts},
                         {"batch_norm", o.batch_norm},
                         {"classifier_dropout", o.classifier_dropout},
                         {"extra", extra}};
  ckpt.meta() = meta;
  ckpt.add_parameters("fusion/", network.parameters());
  ckpt.save(path);
  std::ofstream(path.string() + ".json") << meta.dump(2) << '\n';
}

FusionNetwork load_network(const std::filesystem::path& path, const std::vector<std::vector<FusibleLayerInfo>>& registries,
                           const search::SearchSpace& space) {
  const Checkpoint ckpt = Checkpoint::load(path);
  const auto& meta = ckpt.meta();
  NetworkOptions o;
  o.neurons = meta.at("neurons").get<std::vector<int>>();
  o.dropouts = meta.at("dropouts").get<std::vector<double>>();
  o.batch_norm = meta.at("batch_norm").get<bool>();
  o.classifier_dropout = meta.at("classifier_dropout").get<double>();
  FusionNetwork net(search::decode_config_tokens(meta.at("config_tokens").get<std::vector<int>>(), space), registries,
                    meta.at("num_classes").get<int>(), o, 0);
  ckpt.load_parameters("fusion/", net.parameters());
  return net;
}

}  // namespace mfas::fusion
