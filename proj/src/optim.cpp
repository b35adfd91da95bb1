#include "inrseg/optim.hpp"

#include <cmath>

namespace inrseg {

AdamState::AdamState(std::vector<TensorPtr> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (cfg_.lr <= 0) raise_invalid_config("adam lr must be > 0");
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const TensorPtr& p : params_) {
    if (!p) raise_invariant("null parameter handed to optimizer");
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void AdamState::step() {
  ++step_;
  const Scalar bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<Scalar>(step_));
  const Scalar bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<Scalar>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = *params_[i];
    Array& m = m_[i].data();
    Array& v = v_[i].data();
    if (p.has_grad()) {
      const Array& g = p.grad();
      m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g;
      v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g.square();
    } else {
      m *= cfg_.beta1;
      v *= cfg_.beta2;
    }
    p.data() -= cfg_.lr * (m / bc1) / ((v / bc2).sqrt() + cfg_.eps);
    if (!p.all_finite()) raise_numeric("non-finite parameter after adam step");
  }
}

EmaState::EmaState(std::vector<TensorPtr> params, Scalar decay)
    : params_(std::move(params)), decay_(decay) {
  if (decay_ < 0.0 || decay_ >= 1.0) raise_invalid_config("ema decay must be in [0,1)");
  shadow_.reserve(params_.size());
  for (const TensorPtr& p : params_) {
    if (!p) raise_invariant("null parameter handed to ema");
    shadow_.emplace_back(p->shape(), Array(p->data()));
  }
}

void EmaState::update() {
  for (std::size_t i = 0; i < params_.size(); ++i)
    shadow_[i].data() = decay_ * shadow_[i].data() + (1.0 - decay_) * params_[i]->data();
}

void EmaState::swap() {
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->data().swap(shadow_[i].data());
}

}  // namespace inrseg
