#include "inrseg/objectives.hpp"

#include <cmath>
#include <limits>

#include "inrseg/errors.hpp"
#include "inrseg/ops.hpp"

namespace inrseg {

namespace {

constexpr Scalar kProbFloor = 1e-7;
constexpr Scalar kDiceEps = 1e-6;

void check_binary(const Tensor& labels, const char* what) {
  const Array& d = labels.data();
  if (!((d == 0.0) || (d == 1.0)).all()) {
    raise_domain(std::string(what) + " must be strictly binary (0 or 1)");
  }
}

struct DiceTerms {
  Scalar num;  // 2*sum(p*g) + eps
  Scalar den;  // sum(p)+sum(g)+eps, or squared variant
};

DiceTerms dice_terms(const Array& p, const Array& g, bool squared) {
  DiceTerms t;
  t.num = 2.0 * (p * g).sum() + kDiceEps;
  t.den = (squared ? (p.square().sum() + g.square().sum()) : (p.sum() + g.sum())) + kDiceEps;
  return t;
}

}  // namespace

Var mse_loss(Tape& tp, Var pred, const Tensor& target) {
  const Tensor& tp_pred = tp.value(pred);
  if (!same_shape(tp_pred.shape(), target.shape())) {
    raise_invalid_shape("mse_loss shape mismatch: " + shape_str(tp_pred.shape()) + " vs " +
                        shape_str(target.shape()));
  }
  const Scalar inv_n = 1.0 / static_cast<Scalar>(target.data().size());
  Var neg_t = tp.constant(Tensor(target.shape(), -target.data()));
  Var diff = add(tp, pred, neg_t);
  return scalar_mul(tp, inv_n, sum(tp, mul(tp, diff, diff)));
}

Var bce_loss(Tape& tp, Var pred, const Tensor& labels) {
  const Tensor& tpred = tp.value(pred);
  const Shape& ps = tpred.shape();
  if (ps.size() != 3 || ps[2] != 2) {
    raise_invalid_shape("bce_loss expects {H,W,2} predictions, got " + shape_str(ps));
  }
  if (labels.shape() != Shape{ps[0], ps[1]}) {
    raise_invalid_shape("bce_loss label shape mismatch: " + shape_str(labels.shape()));
  }
  check_binary(labels, "bce labels");

  const Index n = ps[0] * ps[1];
  Tensor lesion({ps[0], ps[1], Index(1)}, labels.data());
  Tensor background({ps[0], ps[1], Index(1)}, 1.0 - labels.data());

  Var p0 = slice(tp, pred, 2, 0, 1);
  Var p1 = slice(tp, pred, 2, 1, 1);
  Var picked = add(tp, mul(tp, p0, tp.constant(std::move(background))),
                   mul(tp, p1, tp.constant(std::move(lesion))));
  Var log_p = log_clamp(tp, picked, kProbFloor, 1.0 - kProbFloor);
  return scalar_mul(tp, -1.0 / static_cast<Scalar>(n), sum(tp, log_p));
}

Var dice_loss(Tape& tp, Var pred, const Tensor& labels, bool squared_denom) {
  const Tensor& tpred = tp.value(pred);
  if (!same_shape(tpred.shape(), labels.shape())) {
    raise_invalid_shape("dice_loss shape mismatch: " + shape_str(tpred.shape()) + " vs " +
                        shape_str(labels.shape()));
  }
  check_binary(labels, "dice labels");
  const Array& p = tpred.data();
  if ((p < 0.0).any() || (p > 1.0).any()) {
    raise_domain("dice_loss predictions must lie in [0,1]");
  }

  const DiceTerms t = dice_terms(p, labels.data(), squared_denom);
  Tensor out({Index(1)});
  out.data()[0] = 1.0 - t.num / t.den;

  const bool needs = tp.needs_grad(pred);
  Var out_var{static_cast<int>(tp.size())};
  Tensor g_copy = labels;
  return tp.push(std::move(out), needs,
                 [pred, out_var, t, squared_denom, g_copy = std::move(g_copy)](Tape& tape) {
                   const Scalar go = tape.grad(out_var)[0];
                   const Array& pv = tape.value(pred).data();
                   const Array& gv = g_copy.data();
                   // d/dp_i [1 - num/den]; den depends on p linearly or
                   // quadratically depending on the variant.
                   Array dnum = 2.0 * gv;
                   Array dden = squared_denom ? Array(2.0 * pv)
                                              : Array(Array::Constant(pv.size(), 1.0));
                   Array dp = -(dnum * t.den - t.num * dden) / (t.den * t.den);
                   tape.accumulate(pred, go * dp);
                 });
}

Scalar dice_coefficient(const Tensor& pred, const Tensor& labels, bool squared_denom) {
  if (!same_shape(pred.shape(), labels.shape())) {
    raise_invalid_shape("dice_coefficient shape mismatch");
  }
  check_binary(labels, "dice labels");
  const DiceTerms t = dice_terms(pred.data(), labels.data(), squared_denom);
  return t.num / t.den;
}

DiceReport dice_metric(const Tensor& pred_mask, const Tensor& truth) {
  if (!same_shape(pred_mask.shape(), truth.shape())) {
    raise_invalid_shape("dice_metric shape mismatch: " + shape_str(pred_mask.shape()) + " vs " +
                        shape_str(truth.shape()));
  }
  check_binary(pred_mask, "predicted mask");
  check_binary(truth, "truth mask");

  DiceReport r;
  const Array& p = pred_mask.data();
  const Array& t = truth.data();
  r.tp = static_cast<long long>(((p == 1.0) && (t == 1.0)).count());
  r.fp = static_cast<long long>(((p == 1.0) && (t == 0.0)).count());
  r.fn = static_cast<long long>(((p == 0.0) && (t == 1.0)).count());
  const long long den = 2 * r.tp + r.fp + r.fn;
  r.dice = den == 0 ? 1.0 : 2.0 * static_cast<Scalar>(r.tp) / static_cast<Scalar>(den);
  return r;
}

Scalar psnr(const Tensor& pred, const Tensor& target) {
  if (!same_shape(pred.shape(), target.shape())) raise_invalid_shape("psnr shape mismatch");
  const Scalar mse = (pred.data() - target.data()).square().mean();
  if (mse == 0.0) return std::numeric_limits<Scalar>::infinity();
  return -10.0 * std::log10(mse);
}

}  // namespace inrseg
