#pragma once

#include <string>

#include "inrseg/tape.hpp"

namespace inrseg {

// Scalar loss with its component breakdown; total is the sum of the enabled
// components, each >= 0.
struct LossValue {
  Scalar total = 0.0;
  Scalar mse = 0.0;
  Scalar bce = 0.0;
  Scalar dice = 0.0;
};

struct DiceReport {
  Scalar dice = 0.0;
  long long tp = 0;
  long long fp = 0;
  long long fn = 0;
  std::string resolution;
};

// Mean over all pixels and channels of squared error; shapes must match.
Var mse_loss(Tape& tp, Var pred, const Tensor& target);

// pred {H,W,2} with rows summing to 1 (channel 0 background, 1 lesion),
// labels {H,W} strictly binary. Mean of -log p[label] with probabilities
// clamped to [1e-7, 1-1e-7].
Var bce_loss(Tape& tp, Var pred, const Tensor& labels);

// Soft Dice loss on the lesion-probability map: 1 - (2*sum(p*g)+eps) /
// (sum(p)+sum(g)+eps), eps=1e-6; squared_denom switches the denominator to
// sum(p^2)+sum(g^2)+eps.
Var dice_loss(Tape& tp, Var pred, const Tensor& labels, bool squared_denom = false);

// Same quantity without a tape; dice_loss value + dice_coefficient == 1.
Scalar dice_coefficient(const Tensor& pred, const Tensor& labels, bool squared_denom = false);

// Hard-mask overlap 2TP/(2TP+FP+FN); both masks empty -> 1.0.
DiceReport dice_metric(const Tensor& pred_mask, const Tensor& truth);

// 10*log10(1/mse) in dB; identical images -> +infinity sentinel.
Scalar psnr(const Tensor& pred, const Tensor& target);

}  // namespace inrseg
