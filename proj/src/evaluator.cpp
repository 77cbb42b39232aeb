#include "mfas/evaluator.hpp"

#include "mfas/loss.hpp"
#include "mfas/metrics.hpp"

namespace mfas::search {

FusionEvaluator::FusionEvaluator(const std::vector<const encoders::Encoder*>& encoders, const data::RecordSet& train,
                                 const data::RecordSet& val, int num_classes, EvalOptions options,
                                 encoders::FeatureCache* cache)
    : num_classes_(num_classes), options_(options) {
  for (const auto* e : encoders) registries_.push_back(e->fusible_layers());
  const auto train_bank = fusion::compute_feature_bank(encoders, train, cache, 0);
  const auto batch = static_cast<std::size_t>(std::max(1, options_.batch_size));
  batches_ = fusion::make_batches(train_bank, train, batch);
  val_ = fusion::compute_feature_bank(encoders, val, cache, 1);
  val_labels_ = val.labels;
  class_weights_ = compute_class_weights(train.labels).dense(num_classes);
}

double FusionEvaluator::operator()(const FusionConfig& config, SharedWeightStore& weights, std::uint64_t seed) const {
  fusion::NetworkOptions net_options;
  net_options.neurons.assign(config.size(), options_.neurons);
  fusion::FusionNetwork net(config, registries_, num_classes_, net_options, seed);
  auto slots = net.shared_slots();
  for (auto& slot : slots) weights.fetch(slot.key, slot.params);

  fusion::TrainOptions train;
  train.epochs = options_.epochs;
  train.schedule = {options_.learning_rate, 1.0, 1};
  train.shuffle_buffer = options_.shuffle_buffer;
  train.seed = seed;
  fusion::train_network(net, batches_, class_weights_, train);

  const double score = eval::confusion_and_metrics(net.infer(val_), val_labels_, num_classes_).macro_f1;
  for (auto& slot : slots) weights.put(slot.key, {slot.params.begin(), slot.params.end()}, score);
  return score;
}

double evaluate_config(const FusionConfig& config, const FusionEvaluator& evaluator, SharedWeightStore& weights,
                       ResultStore& results, std::uint64_t seed, int level, int iteration) {
  const double score = evaluator(config, weights, seed);
  results.record(config, score, level, iteration, 0.0);
  return score;
}

}  // namespace mfas::search
