#include "mfas/surrogate.hpp"

#include "mfas/optim.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace mfas::search {

namespace {

Rng make_rng(std::uint64_t seed) { return Rng(seed); }

TokenMatrix tokens_of(const std::vector<FusionConfig>& configs, const std::vector<std::size_t>& rows,
                      const SearchSpace& space) {
  TokenMatrix t(static_cast<Eigen::Index>(rows.size()), space.max_layers);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto tok = encode_config_tokens(configs[rows[r]], space);
    for (int s = 0; s < space.max_layers; ++s) t(static_cast<Eigen::Index>(r), s) = tok[static_cast<std::size_t>(s)];
  }
  return t;
}

}  // namespace

Surrogate::Surrogate(SearchSpace space, SurrogateOptions options, std::uint64_t seed)
    : space_(std::move(space)),
      options_(options),
      embedding_([&] {
        space_.validate();
        Rng rng = make_rng(mix_seed(seed, 0));
        return Embedding(space_.vocab_size(), options.embedding_width, rng);
      }()),
      lstm_([&] {
        Rng rng = make_rng(mix_seed(seed, 1));
        return Lstm(options.embedding_width, options.units, rng);
      }()),
      head_([&] {
        Rng rng = make_rng(mix_seed(seed, 2));
        return Dense(options.units, 1, rng);
      }()) {}

std::vector<Parameter*> Surrogate::parameters() {
  std::vector<Parameter*> out = embedding_.parameters();
  for (auto* p : lstm_.parameters()) out.push_back(p);
  for (auto* p : head_.parameters()) out.push_back(p);
  return out;
}

std::vector<const Parameter*> Surrogate::parameters() const {
  auto params = const_cast<Surrogate*>(this)->parameters();
  return {params.begin(), params.end()};
}

Matrix Surrogate::forward_train(const TokenMatrix& tokens) {
  std::vector<Matrix> steps;
  for (int s = 0; s < tokens.cols(); ++s) steps.push_back(embedding_.forward(tokens, s));
  const Matrix h = lstm_.forward(steps, Embedding::mask(tokens));
  return sigmoid_.forward(head_.forward(h, Mode::train), Mode::train);
}

void Surrogate::backward_train(const TokenMatrix& tokens, const Matrix& grad_out) {
  const Matrix dh = head_.backward(sigmoid_.backward(grad_out));
  const auto dx = lstm_.backward(dh);
  for (int s = 0; s < tokens.cols(); ++s) embedding_.backward(tokens, s, dx[static_cast<std::size_t>(s)]);
}

Surrogate::FitReport Surrogate::fit(const std::vector<FusionConfig>& configs, const std::vector<double>& scores,
                                    std::uint64_t seed) {
  if (configs.empty() || configs.size() != scores.size()) throw std::invalid_argument("surrogate: bad dataset");
  FitReport report;
  report.mse_before = mse(configs, scores);
  Adam opt(parameters());
  Rng rng(seed);
  std::vector<std::size_t> order(configs.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = static_cast<std::size_t>(std::max(1, options_.batch_size));
  for (int epoch = 0; epoch < options_.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(start),
                                    order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), start + batch)));
      // Longest first so padded steps touch only the leading rows.
      std::stable_sort(rows.begin(), rows.end(),
                       [&](std::size_t a, std::size_t b) { return configs[a].size() > configs[b].size(); });
      const TokenMatrix tokens = tokens_of(configs, rows, space_);
      for (auto* p : parameters()) p->zero_grad();
      const Matrix pred = forward_train(tokens);
      Matrix grad(pred.rows(), 1);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        grad(static_cast<Eigen::Index>(r), 0) =
            2.0 * (pred(static_cast<Eigen::Index>(r), 0) - scores[rows[r]]) / static_cast<double>(rows.size());
      }
      backward_train(tokens, grad);
      opt.step(options_.learning_rate);
    }
  }
  report.mse_after = mse(configs, scores);
  return report;
}

Matrix Surrogate::projection_table() const {
  Matrix table = embedding_.table().value * lstm_.kernel().value;
  table.rowwise() += lstm_.bias().value.row(0);
  return table;
}

double Surrogate::predict_tokens(const std::vector<int>& tokens) const {
  return predict(decode_config_tokens(tokens, space_));
}

std::vector<double> Surrogate::predict(const std::vector<FusionConfig>& configs) const {
  const Matrix table = projection_table();
  const Matrix& w = head_.weight().value;
  const double b = head_.bias().value(0, 0);
  const int steps = space_.max_layers;
  std::vector<double> out(configs.size());
  std::vector<Matrix> projected(static_cast<std::size_t>(steps), Matrix::Zero(1, table.cols()));
  Matrix mask(1, steps);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const auto tok = encode_config_tokens(configs[i], space_);
    for (int s = 0; s < steps; ++s) {
      const int id = tok[static_cast<std::size_t>(s)];
      projected[static_cast<std::size_t>(s)] = table.row(id);
      mask(0, s) = id != 0 ? 1.0 : 0.0;
    }
    const Matrix h = lstm_.forward_projected(projected, mask);
    double z = b;
    for (Eigen::Index k = 0; k < h.cols(); ++k) z += h(0, k) * w(k, 0);
    out[i] = 1.0 / (1.0 + std::exp(-z));
  }
  return out;
}

double Surrogate::predict(const FusionConfig& config) const { return predict(std::vector<FusionConfig>{config})[0]; }

double Surrogate::mse(const std::vector<FusionConfig>& configs, const std::vector<double>& scores) const {
  const auto pred = predict(configs);
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += (pred[i] - scores[i]) * (pred[i] - scores[i]);
  return pred.empty() ? 0.0 : total / static_cast<double>(pred.size());
}

void Surrogate::save(Checkpoint& ckpt, const std::string& prefix) const { ckpt.add_parameters(prefix, parameters()); }

void Surrogate::load(const Checkpoint& ckpt, const std::string& prefix) { ckpt.load_parameters(prefix, parameters()); }

std::uint64_t Surrogate::checksum() const { return parameter_checksum(parameters()); }

}  // namespace mfas::search
