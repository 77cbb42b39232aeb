#include "mfas/recurrent.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace mfas {

namespace {

Matrix sigmoid(const Matrix& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

Matrix orthogonal(int rows, int cols, Rng& rng) {
  // Orthonormal rows via QR of a Gaussian matrix.
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(cols, rows);
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = normal(rng);
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ() * Matrix::Identity(cols, rows);
  return q.transpose();
}

}  // namespace

Embedding::Embedding(int vocab_size, int width, Rng& rng) {
  if (vocab_size <= 1 || width <= 0) throw std::invalid_argument("embedding: bad dimensions");
  table_.name = "embeddings";
  table_.value.resize(vocab_size, width);
  for (Eigen::Index i = 0; i < table_.value.size(); ++i) table_.value.data()[i] = (uniform01(rng) - 0.5) * 0.1;
  table_.zero_grad();
}

Matrix Embedding::forward(const TokenMatrix& tokens, int step) const {
  Matrix out(tokens.rows(), table_.value.cols());
  for (Eigen::Index r = 0; r < tokens.rows(); ++r) {
    const int id = tokens(r, step);
    if (id < 0 || id >= table_.value.rows()) throw std::out_of_range("embedding: token id out of range");
    out.row(r) = table_.value.row(id);
  }
  return out;
}

void Embedding::backward(const TokenMatrix& tokens, int step, const Matrix& grad_out) {
  for (Eigen::Index r = 0; r < tokens.rows(); ++r) {
    const int id = tokens(r, step);
    if (id != 0) table_.grad.row(id) += grad_out.row(r);
  }
}

Matrix Embedding::mask(const TokenMatrix& tokens) { return (tokens.array() != 0).cast<double>().matrix(); }

Lstm::Lstm(int input_width, int units, Rng& rng) : units_(units) {
  if (input_width <= 0 || units <= 0) throw std::invalid_argument("lstm: bad dimensions");
  const double limit = std::sqrt(6.0 / static_cast<double>(input_width + 4 * units));
  kernel_.name = "kernel";
  kernel_.value.resize(input_width, 4 * units);
  for (Eigen::Index i = 0; i < kernel_.value.size(); ++i) kernel_.value.data()[i] = (2.0 * uniform01(rng) - 1.0) * limit;
  kernel_.zero_grad();
  recurrent_.name = "recurrent_kernel";
  recurrent_.value = orthogonal(units, 4 * units, rng);
  recurrent_.zero_grad();
  bias_.name = "bias";
  bias_.value = Matrix::Zero(1, 4 * units);
  bias_.value.middleCols(units, units).setOnes();  // forget-gate bias
  bias_.zero_grad();
}

namespace {

/// Number of leading ones when a mask column is all ones followed by all
/// zeros; -1 otherwise.
Eigen::Index prefix_rows(const Eigen::VectorXd& m) {
  Eigen::Index k = 0;
  while (k < m.size() && m(k) == 1.0) ++k;
  for (Eigen::Index r = k; r < m.size(); ++r) {
    if (m(r) != 0.0) return -1;
  }
  return k;
}

}  // namespace

Matrix Lstm::forward(const std::vector<Matrix>& inputs, const Matrix& mask) {
  if (inputs.empty()) throw std::invalid_argument("lstm: empty sequence");
  const Eigen::Index batch = inputs.front().rows();
  const int u = units_;
  cache_.clear();
  cache_.reserve(inputs.size());
  Matrix h = Matrix::Zero(batch, u);
  Matrix c = Matrix::Zero(batch, u);
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    StepCache s;
    s.m = mask.col(static_cast<Eigen::Index>(t));
    s.active = prefix_rows(s.m);
    // Right-padded batches sorted by length only need the leading rows.
    const Eigen::Index k = s.active < 0 ? batch : s.active;
    s.x = inputs[t].topRows(k);
    s.h_prev = h.topRows(k);
    s.c_prev = c.topRows(k);
    Matrix z = s.x * kernel_.value + s.h_prev * recurrent_.value;
    z.rowwise() += bias_.value.row(0);
    s.i = sigmoid(z.middleCols(0, u));
    s.f = sigmoid(z.middleCols(u, u));
    s.g = z.middleCols(2 * u, u).array().tanh().matrix();
    s.o = sigmoid(z.middleCols(3 * u, u));
    s.c = (s.f.array() * s.c_prev.array() + s.i.array() * s.g.array()).matrix();
    s.tanh_c = s.c.array().tanh().matrix();
    Matrix h_new = (s.o.array() * s.tanh_c.array()).matrix();
    if (s.active >= 0) {
      h.topRows(k) = h_new;
      c.topRows(k) = s.c;
    } else {
      // Carry state through masked steps.
      const Eigen::ArrayXd m = s.m.array();
      const Eigen::ArrayXd keep = 1.0 - m;
      h = (h_new.array().colwise() * m + h.array().colwise() * keep).matrix();
      c = (s.c.array().colwise() * m + c.array().colwise() * keep).matrix();
    }
    cache_.push_back(std::move(s));
  }
  return h;
}

std::vector<Matrix> Lstm::backward(const Matrix& grad_h) {
  const int u = units_;
  const Eigen::Index batch = grad_h.rows();
  std::vector<Matrix> dx(cache_.size());
  Matrix dh = grad_h;
  Matrix dc = Matrix::Zero(batch, u);
  for (std::size_t k = cache_.size(); k-- > 0;) {
    const StepCache& s = cache_[k];
    const Eigen::Index rows = s.active < 0 ? batch : s.active;
    Matrix dh_new;
    Matrix dc_new;
    if (s.active >= 0) {
      dh_new = dh.topRows(rows);
      dc_new = dc.topRows(rows);
    } else {
      // Split the incoming gradient into the fresh-state and carried-state paths.
      dh_new = (dh.array().colwise() * s.m.array()).matrix();
      dc_new = (dc.array().colwise() * s.m.array()).matrix();
    }

    Matrix d_o = (dh_new.array() * s.tanh_c.array()).matrix();
    Matrix dcell = dc_new + (dh_new.array() * s.o.array() * (1.0 - s.tanh_c.array().square())).matrix();
    Matrix d_i = (dcell.array() * s.g.array()).matrix();
    Matrix d_g = (dcell.array() * s.i.array()).matrix();
    Matrix d_f = (dcell.array() * s.c_prev.array()).matrix();
    Matrix dc_prev = (dcell.array() * s.f.array()).matrix();

    Matrix dz(rows, 4 * u);
    dz.middleCols(0, u) = (d_i.array() * s.i.array() * (1.0 - s.i.array())).matrix();
    dz.middleCols(u, u) = (d_f.array() * s.f.array() * (1.0 - s.f.array())).matrix();
    dz.middleCols(2 * u, u) = (d_g.array() * (1.0 - s.g.array().square())).matrix();
    dz.middleCols(3 * u, u) = (d_o.array() * s.o.array() * (1.0 - s.o.array())).matrix();

    kernel_.grad.noalias() += s.x.transpose() * dz;
    recurrent_.grad.noalias() += s.h_prev.transpose() * dz;
    bias_.grad += dz.colwise().sum();
    Matrix dxk = Matrix::Zero(batch, kernel_.value.rows());
    dxk.topRows(rows) = dz * kernel_.value.transpose();
    dx[k] = std::move(dxk);
    if (s.active >= 0) {
      dh.topRows(rows) = dz * recurrent_.value.transpose();
      dc.topRows(rows) = dc_prev;
    } else {
      const Eigen::ArrayXd keep = 1.0 - s.m.array();
      dh = dz * recurrent_.value.transpose() + (dh.array().colwise() * keep).matrix();
      dc = dc_prev + (dc.array().colwise() * keep).matrix();
    }
  }
  return dx;
}

Matrix Lstm::forward_projected(const std::vector<Matrix>& projected, const Matrix& mask) const {
  const Eigen::Index batch = projected.front().rows();
  const int u = units_;
  Matrix h = Matrix::Zero(batch, u);
  Matrix c = Matrix::Zero(batch, u);
  for (std::size_t t = 0; t < projected.size(); ++t) {
    // A fully masked step leaves the state exactly as it was.
    if ((mask.col(static_cast<Eigen::Index>(t)).array() == 0.0).all()) continue;
    Matrix z = projected[t];
    z.noalias() += h * recurrent_.value;
    Matrix i = sigmoid(z.middleCols(0, u));
    Matrix f = sigmoid(z.middleCols(u, u));
    Matrix g = z.middleCols(2 * u, u).array().tanh().matrix();
    Matrix o = sigmoid(z.middleCols(3 * u, u));
    Matrix c_new = (f.array() * c.array() + i.array() * g.array()).matrix();
    Matrix h_new = (o.array() * c_new.array().tanh()).matrix();
    const Eigen::ArrayXd m = mask.col(static_cast<Eigen::Index>(t)).array();
    const Eigen::ArrayXd keep = 1.0 - m;
    h = (h_new.array().colwise() * m + h.array().colwise() * keep).matrix();
    c = (c_new.array().colwise() * m + c.array().colwise() * keep).matrix();
  }
  return h;
}

}  // namespace mfas
