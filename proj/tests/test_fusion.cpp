#include "gradcheck.hpp"
#include "mfas/encoder.hpp"
#include "mfas/evaluator.hpp"
#include "mfas/fusion.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

namespace mfas::fusion {
namespace {

using search::FusionLayerSpec;

struct Fixture {
  std::vector<encoders::Encoder> encoders;
  data::RecordSet records;
  int classes = 3;

  std::vector<const encoders::Encoder*> ptrs() const {
    std::vector<const encoders::Encoder*> out;
    for (const auto& e : encoders) out.push_back(&e);
    return out;
  }
  std::vector<std::vector<FusibleLayerInfo>> registries() const {
    std::vector<std::vector<FusibleLayerInfo>> out;
    for (const auto& e : encoders) out.push_back(e.fusible_layers());
    return out;
  }
};

/// Two modalities with class-dependent means; modality 1 missing in some records.
Fixture make_fixture(std::size_t n = 60) {
  Fixture f;
  encoders::EncoderHyperparams hp;
  hp.hidden = {6, 5, 4};
  hp.penultimate = 3;
  f.encoders.emplace_back("flower", 4, f.classes, hp, 1);
  f.encoders.emplace_back("leaf", 2, f.classes, hp, 2);
  Rng rng(3);
  std::normal_distribution<double> normal(0.0, 0.5);
  f.records.inputs = {Matrix::Zero(static_cast<Eigen::Index>(n), 4), Matrix::Zero(static_cast<Eigen::Index>(n), 2)};
  for (std::size_t r = 0; r < n; ++r) {
    const int y = static_cast<int>(r % 3);
    f.records.labels.push_back(y);
    const bool has_leaf = r % 4 != 0;
    f.records.presence.push_back(has_leaf ? 0b11 : 0b01);
    for (Eigen::Index k = 0; k < 4; ++k) f.records.inputs[0](static_cast<Eigen::Index>(r), k) = y + normal(rng);
    if (has_leaf) {
      for (Eigen::Index k = 0; k < 2; ++k) f.records.inputs[1](static_cast<Eigen::Index>(r), k) = -y + normal(rng);
    }
  }
  return f;
}

FusionConfig config_of(std::vector<std::pair<std::vector<int>, int>> layers) {
  FusionConfig c;
  for (auto& [l, a] : layers) c.layers.push_back(FusionLayerSpec{l, a});
  return c;
}

TEST(FusionNetwork, SingleLayerWiring) {
  const auto f = make_fixture();
  NetworkOptions opt{{7}, false, {}, 0.0};
  FusionNetwork net(config_of({{{2, 4}, 1}}), f.registries(), 3, opt, 1);
  EXPECT_EQ(net.input_width(1), 5 + 3);
  EXPECT_EQ(net.classifier_dense().in_units(), 7);
  EXPECT_EQ(net.classifier_dense().out_units(), 3);
}

TEST(FusionNetwork, ParameterCountMatchesClosedForm) {
  const auto f = make_fixture();
  for (bool bn : {false, true}) {
    NetworkOptions opt{{7, 5, 4}, bn, {0.0, 0.0, 0.3}, 0.2};
    const auto cfg = config_of({{{1, 1}, 1}, {{3, 6}, 2}, {{6, 2}, 1}});
    FusionNetwork net(cfg, f.registries(), 3, opt, 1);
    // in_1 = 6 + 6, in_2 = 4 + 3 + 7, in_3 = 3 + 5 + 5.
    std::size_t expected = (12 + 1) * 7 + (14 + 1) * 5 + (13 + 1) * 4 + (4 + 1) * 3;
    if (bn) expected += 2 * (7 + 5 + 4);
    EXPECT_EQ(net.trainable_parameter_count(), expected);
    EXPECT_EQ(expected_parameter_count(cfg, f.registries(), 3, opt), expected);
  }
}

TEST(FusionNetwork, ActivationChangesOutput) {
  const auto f = make_fixture();
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  NetworkOptions opt{{6}, false, {}, 0.0};
  FusionNetwork relu(config_of({{{2, 3}, 1}}), f.registries(), 3, opt, 5);
  FusionNetwork sigm(config_of({{{2, 3}, 2}}), f.registries(), 3, opt, 5);
  EXPECT_GT((relu.infer(bank) - sigm.infer(bank)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FusionNetwork, RejectsUnknownLayerAndMismatchedWidths) {
  const auto f = make_fixture();
  NetworkOptions opt{{6}, false, {}, 0.0};
  EXPECT_THROW(FusionNetwork(config_of({{{7, 1}, 1}}), f.registries(), 3, opt, 1), std::exception);
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  auto registries = f.registries();
  registries[1][0].width += 1;  // registry disagrees with the features
  registries[1][0].sample_shape = {static_cast<std::size_t>(registries[1][0].width)};
  FusionNetwork net(config_of({{{1, 1}, 1}}), registries, 3, opt, 1);
  try {
    net.forward(bank, Mode::train);
    FAIL() << "expected a width mismatch";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("leaf"), std::string::npos);
  }
}

TEST(FusionNetwork, GradientMatchesFiniteDifferences) {
  const auto f = make_fixture(8);
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  NetworkOptions opt{{4, 3}, true, {}, 0.0};
  FusionNetwork net(config_of({{{2, 4}, 2}, {{5, 1}, 1}}), f.registries(), 3, opt, 3);
  Rng rng(4);
  testing::jitter_biases(net, rng);
  const std::vector<double> w{1.0, 2.0, 0.5};
  auto loss = [&] { return weighted_ce(net.forward(bank, Mode::train), f.records.labels, w).value; };
  net.zero_grad();
  const auto res = weighted_ce(net.forward(bank, Mode::train), f.records.labels, w);
  net.backward(res.grad);
  for (auto* p : net.parameters()) {
    if (!p->trainable) continue;
    const Matrix analytic = p->grad;
    const Matrix numeric = testing::numeric_gradient(p->value, loss);
    EXPECT_LT(testing::relative_error(analytic, numeric), 1e-5) << p->name;
  }
}

TEST(FusionNetwork, BatchEqualsSinglePredictions) {
  const auto f = make_fixture(10);
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  NetworkOptions opt{{5}, true, {0.3}, 0.4};
  FusionNetwork net(config_of({{{4, 6}, 1}}), f.registries(), 3, opt, 3);
  const Matrix all = predict(net, bank);
  for (std::size_t r = 0; r < bank.rows(); ++r) {
    const Matrix one = predict(net, bank.select({r}));
    EXPECT_LT((one.row(0) - all.row(static_cast<Eigen::Index>(r))).cwiseAbs().maxCoeff(), 1e-12);
  }
  EXPECT_EQ(predict(net, bank), all);
}

TEST(FusionNetwork, ZeroInputGivesDistribution) {
  const auto f = make_fixture();
  const auto zero = zero_input_features(f.ptrs());
  NetworkOptions opt{{5}, false, {}, 0.0};
  FusionNetwork net(config_of({{{3, 3}, 1}}), f.registries(), 3, opt, 3);
  const Matrix p = predict(net, zero);
  EXPECT_TRUE(p.allFinite());
  EXPECT_NEAR(p.sum(), 1.0, 1e-12);
}

TEST(FeatureBank, AbsentModalityEqualsZeroInputFeatures) {
  const auto f = make_fixture();
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  const auto zero = zero_input_features(f.ptrs());
  for (int layer = 1; layer <= encoders::kFusibleLayerCount; ++layer) {
    EXPECT_LT((bank.at(1, layer).row(0) - zero.at(1, layer).row(0)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MultimodalDropout, RateZeroIsIdentity) {
  const auto f = make_fixture();
  Rng rng(1);
  const auto out = apply_multimodal_dropout(f.records, {0.0, 0.0}, rng);
  EXPECT_EQ(out.presence, f.records.presence);
  EXPECT_EQ(out.inputs[0], f.records.inputs[0]);
  EXPECT_EQ(out.inputs[1], f.records.inputs[1]);
}

TEST(MultimodalDropout, NearOneDropsEverything) {
  const auto f = make_fixture();
  Rng rng(2);
  const auto out = apply_multimodal_dropout(f.records, {1.0 - 1e-12, 1.0 - 1e-12}, rng);
  for (auto p : out.presence) EXPECT_EQ(p, 0);
  EXPECT_EQ(out.inputs[0].cwiseAbs().sum(), 0.0);
}

TEST(MultimodalDropout, EmpiricalRate) {
  const std::vector<std::uint8_t> presence(100000, 0b1111);
  Rng rng(3);
  const auto drops = sample_modality_drops(presence, 4, std::vector<double>(4, 0.125), rng);
  for (Eigen::Index m = 0; m < 4; ++m) {
    const double freq = drops.col(m).cast<double>().mean();
    EXPECT_GE(freq, 0.12);
    EXPECT_LE(freq, 0.13);
  }
}

TEST(MultimodalDropout, AbsentModalitiesAreNeverDrawn) {
  const std::vector<std::uint8_t> presence(1000, 0b01);
  Rng rng(4);
  const auto drops = sample_modality_drops(presence, 2, {0.5, 0.5}, rng);
  EXPECT_EQ(drops.col(1).cast<int>().sum(), 0);
}

TEST(MultimodalDropout, BankDropsMatchInputDrops) {
  const auto f = make_fixture();
  Rng a(5);
  Rng b(5);
  const auto dropped_records = apply_multimodal_dropout(f.records, {0.4, 0.4}, a);
  const auto drops = sample_modality_drops(f.records.presence, 2, {0.4, 0.4}, b);
  auto bank = compute_feature_bank(f.ptrs(), f.records);
  apply_drops_to_bank(bank, drops, zero_input_features(f.ptrs()));
  const auto expected = compute_feature_bank(f.ptrs(), dropped_records);
  for (std::size_t k = 0; k < bank.slots.size(); ++k) {
    EXPECT_LT((bank.slots[k] - expected.slots[k]).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Batches, ContiguousAndShuffledOrderIsPermutation) {
  const auto f = make_fixture(70);
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  const auto batches = make_batches(bank, f.records, 32);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[2].labels.size(), 6u);
  EXPECT_EQ(batches[1].labels[0], f.records.labels[32]);
  Rng rng(1);
  auto order = buffered_shuffle_order(20, 12, rng);
  std::sort(order.begin(), order.end());
  for (std::size_t i = 0; i < order.size(); ++i) EXPECT_EQ(order[i], i);
}

TEST(Training, LossDecreasesAndIsDeterministic) {
  const auto f = make_fixture(90);
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  const auto batches = make_batches(bank, f.records, 16);
  const std::vector<double> w(3, 1.0);
  auto run = [&] {
    FusionNetwork net(config_of({{{2, 4}, 1}}), f.registries(), 3, NetworkOptions{{8}, false, {}, 0.0}, 7);
    TrainOptions opt;
    opt.epochs = 30;
    opt.schedule = {1e-2, 1.0, 1};
    opt.seed = 3;
    const auto report = train_network(net, batches, w, opt);
    return std::make_pair(report, parameter_checksum(std::as_const(net).parameters()));
  };
  const auto [a, ha] = run();
  const auto [b, hb] = run();
  EXPECT_LT(a.train_loss.back(), a.train_loss.front());
  EXPECT_EQ(ha, hb);
}

TEST(Training, MdOnlyChangesTheDropoutStage) {
  const auto f = make_fixture(64);
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  const auto zero = zero_input_features(f.ptrs());
  const auto batches = make_batches(bank, f.records, 16);
  const std::vector<double> w(3, 1.0);
  auto run = [&](double md) {
    FusionNetwork net(config_of({{{2, 4}, 1}}), f.registries(), 3, NetworkOptions{{8}, false, {}, 0.0}, 7);
    TrainOptions opt;
    opt.epochs = 2;
    opt.md_rate = md;
    opt.seed = 3;
    const auto report = train_network(net, batches, w, opt, &zero);
    return std::make_pair(report.first_batch_checksum, parameter_checksum(std::as_const(net).parameters()));
  };
  const auto plain = run(0.0);
  const auto md = run(0.5);
  EXPECT_EQ(plain.first, md.first);
  EXPECT_NE(plain.second, md.second);
}

TEST(Training, EarlyStoppingRestoresBestValidation) {
  const auto f = make_fixture(60);
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  const auto batches = make_batches(bank, f.records, 16);
  const std::vector<double> w(3, 1.0);
  FusionNetwork net(config_of({{{6, 6}, 1}}), f.registries(), 3, NetworkOptions{{16}, false, {}, 0.0}, 1);
  TrainOptions opt;
  opt.epochs = 60;
  opt.patience = 3;
  opt.schedule = {5e-2, 1.0, 1};
  const auto report = train_network(net, batches, w, opt, nullptr, &bank, &f.records.labels);
  ASSERT_GE(report.best_epoch, 1);
  const double restored = weighted_ce(predict(net, bank), f.records.labels, w).value;
  EXPECT_NEAR(restored, report.val_loss[static_cast<std::size_t>(report.best_epoch - 1)], 1e-9);
}

TEST(FinalPlan, RightAlignedLists) {
  FinalPlan plan;
  const auto one = plan.network_options(1);
  EXPECT_EQ(one.neurons, std::vector<int>{512});
  EXPECT_EQ(one.dropouts, std::vector<double>{0.4});
  const auto three = plan.network_options(3);
  EXPECT_EQ(three.dropouts, (std::vector<double>{0.0, 0.0, 0.4}));
  EXPECT_TRUE(three.batch_norm);
  EXPECT_EQ(three.classifier_dropout, 0.4);
  const auto back = FinalPlan::from_json(plan.to_json());
  EXPECT_EQ(back.neurons, plan.neurons);
  EXPECT_EQ(back.md_rate, plan.md_rate);
  EXPECT_EQ(back.schedule.decay_rate, plan.schedule.decay_rate);
}

TEST(FusionNetwork, SaveLoadRoundTrip) {
  const auto f = make_fixture();
  const auto bank = compute_feature_bank(f.ptrs(), f.records);
  search::SearchSpace space{{6, 6}, 2, 4};
  FusionNetwork net(config_of({{{2, 4}, 1}, {{6, 1}, 2}}), f.registries(), 3, NetworkOptions{{5, 4}, true, {0.0, 0.4}, 0.4}, 1);
  const auto path = std::filesystem::temp_directory_path() / "mfas_fusion_roundtrip.ckpt";
  save_network(path, net, space, nlohmann::json::object());
  const auto back = load_network(path, f.registries(), space);
  EXPECT_EQ(back.config(), net.config());
  EXPECT_EQ(predict(back, bank), predict(net, bank));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}

TEST(Evaluator, ScoresInUnitIntervalAndSharesWeights) {
  const auto f = make_fixture(80);
  search::EvalOptions opt;
  opt.neurons = 8;
  opt.batch_size = 16;
  search::FusionEvaluator eval(f.ptrs(), f.records, f.records, 3, opt);
  search::SharedWeightStore store;
  search::ResultStore results;
  const auto cfg = config_of({{{2, 4}, 1}});
  const double s1 = search::evaluate_config(cfg, eval, store, results, 1);
  EXPECT_GE(s1, 0.0);
  EXPECT_LE(s1, 1.0);
  EXPECT_EQ(store.size(), 2u);  // one fusion layer plus the classifier
  const auto before = store.checksum(store.entries().begin()->first);
  search::evaluate_config(cfg, eval, store, results, 2);
  EXPECT_NE(store.checksum(store.entries().begin()->first), before);
  EXPECT_EQ(results.history().size(), 2u);
  EXPECT_EQ(*results.score(cfg), std::max(results.history()[0].score, results.history()[1].score));
}

TEST(Evaluator, DeterministicForSameSeedAndStore) {
  const auto f = make_fixture(80);
  search::EvalOptions opt;
  opt.neurons = 8;
  opt.batch_size = 16;
  search::FusionEvaluator eval(f.ptrs(), f.records, f.records, 3, opt);
  const auto cfg = config_of({{{3, 2}, 2}, {{1, 5}, 1}});
  search::SharedWeightStore a;
  search::SharedWeightStore b;
  EXPECT_EQ(eval(cfg, a, 4), eval(cfg, b, 4));
}

}  // namespace
}  // namespace mfas::fusion
