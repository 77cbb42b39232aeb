#pragma once

#include "mfas/layers.hpp"
#include "mfas/loss.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

namespace mfas {

/// Raised when a training loss stops being finite.
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Exponential decay with a continuous exponent: lr0 * rate^(step / steps).
struct LrSchedule {
  double initial_lr = 1e-3;
  double decay_rate = 1.0;
  std::size_t decay_steps = 1;
};

double lr_at_step(const LrSchedule& schedule, std::size_t step);

class Adam {
 public:
  explicit Adam(std::vector<Parameter*> params, double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-7);

  /// Applies one update with the given learning rate using the accumulated gradients.
  void step(double lr);
  std::size_t steps() const { return steps_; }

 private:
  std::vector<Parameter*> params_;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
  double beta1_;
  double beta2_;
  double epsilon_;
  std::size_t steps_ = 0;
};

/// One forward/backward/Adam update on a batch. The model must expose
/// forward(input, Mode), backward(grad), zero_grad(). Returns the loss
/// computed before the update.
template <class Model, class Input>
double train_step(Model& model, const Input& batch, std::span<const int> labels, std::span<const double> weights,
                  Adam& optimizer, const LrSchedule& schedule) {
  model.zero_grad();
  const Matrix probs = model.forward(batch, Mode::train);
  LossResult loss = weighted_ce(probs, labels, weights);
  if (!std::isfinite(loss.value)) throw DivergenceError("divergence");
  model.backward(loss.grad);
  optimizer.step(lr_at_step(schedule, optimizer.steps()));
  return loss.value;
}

}  // namespace mfas
