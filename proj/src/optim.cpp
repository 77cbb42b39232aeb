#include "mfas/optim.hpp"

#include <cmath>

namespace mfas {

double lr_at_step(const LrSchedule& schedule, std::size_t step) {
  return schedule.initial_lr *
         std::pow(schedule.decay_rate, static_cast<double>(step) / static_cast<double>(schedule.decay_steps));
}

Adam::Adam(std::vector<Parameter*> params, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    params_.push_back(p);
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(double lr) {
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(beta1_, t);
  const double correction2 = 1.0 - std::pow(beta2_, t);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    if (lr == 0.0) continue;
    p.value.array() -= lr * (m_[i].array() / correction1) / ((v_[i].array() / correction2).sqrt() + epsilon_);
  }
}

}  // namespace mfas
