#pragma once

#include "mfas/layers.hpp"
#include "mfas/loss.hpp"
#include "mfas/recurrent.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace mfas::testing {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

/// ||a - n|| / max(||a|| + ||n||, 1e-4) over flattened arrays. Central
/// differences carry ~1e-9 of round-off; the floor keeps identically zero
/// gradients (a bias feeding batch norm) from comparing that noise.
inline double relative_error(const Matrix& analytic, const Matrix& numeric) {
  const double denom = std::max(analytic.norm() + numeric.norm(), 1e-4);
  return (analytic - numeric).norm() / denom;
}

/// Central differences of a scalar function with respect to every entry of `x`.
inline Matrix numeric_gradient(Matrix& x, const std::function<double()>& f, double eps = 1e-6) {
  Matrix g(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + eps;
    const double up = f();
    x.data()[i] = saved - eps;
    const double down = f();
    x.data()[i] = saved;
    g.data()[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

/// Worst relative error over the input and every trainable parameter of a
/// layer, using the projection loss sum(forward(x) .* r).
inline double layer_gradient_error(Layer& layer, Matrix x, Rng& rng) {
  const Matrix probe = layer.forward(x, Mode::train);
  const Matrix r = random_matrix(probe.rows(), probe.cols(), rng);
  auto loss = [&] { return (layer.forward(x, Mode::train).array() * r.array()).sum(); };

  for (auto* p : layer.parameters()) p->zero_grad();
  layer.forward(x, Mode::train);
  const Matrix dx = layer.backward(r);
  std::vector<Matrix> analytic;
  for (auto* p : layer.parameters()) analytic.push_back(p->grad);

  double worst = relative_error(dx, numeric_gradient(x, loss));
  const auto params = layer.parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->trainable) continue;
    worst = std::max(worst, relative_error(analytic[k], numeric_gradient(params[k]->value, loss)));
  }
  return worst;
}

/// Worst relative error of the weighted cross-entropy gradient w.r.t. probabilities.
inline double loss_gradient_error(Rng& rng, int batch, int classes) {
  Matrix probs = random_matrix(batch, classes, rng).array().exp().matrix();
  for (Eigen::Index r = 0; r < probs.rows(); ++r) probs.row(r) /= probs.row(r).sum();
  std::vector<int> labels(static_cast<std::size_t>(batch));
  std::vector<double> weights(static_cast<std::size_t>(classes));
  for (auto& y : labels) y = static_cast<int>(rng() % static_cast<std::uint64_t>(classes));
  for (auto& w : weights) w = 0.5 + uniform01(rng);
  const LossResult res = weighted_ce(probs, labels, weights);
  auto f = [&] { return weighted_ce(probs, labels, weights).value; };
  return relative_error(res.grad, numeric_gradient(probs, f));
}

/// Worst relative error of embedding table and LSTM parameter gradients
/// through the projection loss of the final hidden state. Rows have random
/// lengths; padding follows each row's tokens. With `sorted` rows are
/// ordered longest first, which exercises the leading-rows path.
inline double lstm_gradient_error(Rng& rng, int batch, int steps, int vocab, int width, int units,
                                  bool sorted = false) {
  Embedding embedding(vocab, width, rng);
  Lstm lstm(width, units, rng);
  TokenMatrix tokens = TokenMatrix::Zero(batch, steps);
  std::vector<int> lengths(static_cast<std::size_t>(batch));
  for (auto& len : lengths) len = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(steps));
  if (sorted) std::sort(lengths.begin(), lengths.end(), std::greater<>());
  for (int r = 0; r < batch; ++r) {
    const int len = lengths[static_cast<std::size_t>(r)];
    for (int s = 0; s < len; ++s) tokens(r, s) = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(vocab - 1));
  }
  const Matrix mask = Embedding::mask(tokens);
  auto run = [&] {
    std::vector<Matrix> xs;
    for (int s = 0; s < steps; ++s) xs.push_back(embedding.forward(tokens, s));
    return lstm.forward(xs, mask);
  };
  const Matrix h = run();
  const Matrix r = random_matrix(h.rows(), h.cols(), rng);
  auto loss = [&] { return (run().array() * r.array()).sum(); };

  for (auto* p : embedding.parameters()) p->zero_grad();
  for (auto* p : lstm.parameters()) p->zero_grad();
  run();
  const auto dx = lstm.backward(r);
  for (int s = 0; s < steps; ++s) embedding.backward(tokens, s, dx[static_cast<std::size_t>(s)]);

  double worst = 0.0;
  for (auto* p : lstm.parameters()) {
    const Matrix a = p->grad;
    worst = std::max(worst, relative_error(a, numeric_gradient(p->value, loss)));
  }
  for (auto* p : embedding.parameters()) {
    const Matrix a = p->grad;
    Matrix n = numeric_gradient(p->value, loss);
    n.row(0).setZero();  // the padding row never receives gradient
    worst = std::max(worst, relative_error(a, n));
  }
  return worst;
}

/// Moves every bias off zero so no ReLU input sits exactly on its kink, where
/// central differences see half the slope.
template <class Net>
void jitter_biases(Net& net, Rng& rng, double scale = 0.1) {
  for (auto* p : net.parameters()) {
    if (p->name == "bias") p->value = random_matrix(p->value.rows(), p->value.cols(), rng, scale);
  }
}

}  // namespace mfas::testing
