#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "inrseg/tensor.hpp"

namespace inrseg {

struct AdamConfig {
  Scalar lr = 1e-3;
  Scalar beta1 = 0.9;
  Scalar beta2 = 0.999;
  Scalar eps = 1e-8;
};

// Adam with bias correction over an explicit parameter list. Frozen groups are
// simply never handed to an optimizer, which keeps them bitwise untouched.
class AdamState {
 public:
  AdamState(std::vector<TensorPtr> params, AdamConfig cfg);

  // Standard update from each parameter's grad buffer (missing grad = zero).
  void step();

  std::int64_t step_count() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  std::size_t size() const { return params_.size(); }

  // Moment buffers exposed for exact-resume checkpoints.
  Tensor& first_moment(std::size_t i) { return m_[i]; }
  Tensor& second_moment(std::size_t i) { return v_[i]; }
  void set_step_count(std::int64_t s) { step_ = s; }

 private:
  std::vector<TensorPtr> params_;
  std::vector<Tensor> m_, v_;
  AdamConfig cfg_;
  std::int64_t step_ = 0;
};

// Exponential moving average shadow of a parameter set. swap() exchanges the
// shadow and live buffers reversibly; swapping twice restores the originals
// bitwise.
class EmaState {
 public:
  EmaState(std::vector<TensorPtr> params, Scalar decay);

  void update();  // shadow <- decay*shadow + (1-decay)*params
  void swap();

  Scalar decay() const { return decay_; }
  std::size_t size() const { return params_.size(); }
  Tensor& shadow(std::size_t i) { return shadow_[i]; }

 private:
  std::vector<TensorPtr> params_;
  std::vector<Tensor> shadow_;
  Scalar decay_;
};

}  // namespace inrseg
