#include <doctest.h>

#include <cmath>
#include <vector>

#include "inrseg/ops.hpp"
#include "inrseg/optim.hpp"
#include "inrseg/tape.hpp"

using namespace inrseg;

TEST_CASE("a tensor consumed twice accumulates both gradient contributions") {
  TensorPtr x = make_tensor(Tensor::from({3}, {1.0, -2.0, 0.5}));
  Tape tp;
  const Var xv = tp.leaf(x, true);
  tp.backward(sum(tp, mul(tp, xv, xv)));  // d/dx sum(x*x) = 2x
  for (Index i = 0; i < 3; ++i) CHECK(x->grad()[i] == doctest::Approx(2.0 * x->data()[i]));
}

TEST_CASE("gradients are linear in the loss") {
  auto grad_of = [](Scalar a, Scalar b) {
    TensorPtr x = make_tensor(Tensor::from({2}, {0.3, -0.7}));
    Tape tp;
    const Var xv = tp.leaf(x, true);
    const Var f = sum(tp, mul(tp, xv, xv));
    const Var g = sum(tp, xv);
    tp.backward(add(tp, scalar_mul(tp, a, f), scalar_mul(tp, b, g)));
    return Array(x->grad());
  };
  const Array ga = grad_of(1.0, 0.0);
  const Array gb = grad_of(0.0, 1.0);
  const Array gc = grad_of(2.0, -3.0);
  for (Index i = 0; i < 2; ++i)
    CHECK(gc[i] == doctest::Approx(2.0 * ga[i] - 3.0 * gb[i]).epsilon(1e-12));
}

TEST_CASE("backward rejects non-scalar losses and non-finite values") {
  Tape tp;
  const Var v = tp.leaf(make_tensor(Tensor::from({2}, {1.0, 2.0})), true);
  CHECK_THROWS_AS(tp.backward(v), Error);

  Tensor bad({2});
  bad.data()[0] = std::nan("");
  Tape tp2;
  CHECK_THROWS_AS(tp2.leaf(make_tensor(bad), false), Error);
}

TEST_CASE("leaves without requires_grad stay gradient-free") {
  TensorPtr x = make_tensor(Tensor::from({2}, {1.0, 2.0}));
  Tape tp;
  const Var xv = tp.leaf(x, false);
  tp.backward(sum(tp, xv));
  CHECK_FALSE(x->has_grad());
}

TEST_CASE("adam leaves parameters without gradients bitwise unchanged") {
  TensorPtr p = make_tensor(Tensor::from({3}, {0.125, -7.5, 1e-30}));
  const Array before = p->data();
  AdamState adam({p}, AdamConfig{});

  adam.step();  // no grad buffer at all
  CHECK((p->data() == before).all());

  p->ensure_grad();  // explicit zero gradient
  adam.step();
  CHECK((p->data() == before).all());
  CHECK(adam.step_count() == 2);
}

TEST_CASE("adam first step with unit gradient moves by lr/(1+eps)") {
  AdamConfig cfg;
  cfg.lr = 1e-3;
  TensorPtr p = make_tensor(Tensor::from({2}, {0.5, -0.25}));
  const Array before = p->data();
  AdamState adam({p}, cfg);
  p->ensure_grad();
  p->grad().setConstant(1.0);
  adam.step();
  // Bias correction makes m_hat=1, v_hat=1 exactly on step 1.
  const Scalar delta = cfg.lr / (1.0 + cfg.eps);
  for (Index i = 0; i < 2; ++i)
    CHECK(p->data()[i] == doctest::Approx(before[i] - delta).epsilon(1e-15));
}

TEST_CASE("adam under a constant gradient takes identical steps forever") {
  AdamConfig cfg;
  cfg.lr = 2e-3;
  TensorPtr p = make_tensor(Tensor::from({1}, {1.0}));
  AdamState adam({p}, cfg);
  // With g constant, bias correction gives m_hat=g and v_hat=g^2 at every t,
  // so each step is exactly lr*g/(|g|+eps).
  const Scalar per_step = cfg.lr * 3.0 / (3.0 + cfg.eps);
  for (int t = 1; t <= 25; ++t) {
    p->ensure_grad();
    p->grad().setConstant(3.0);
    adam.step();
    p->zero_grad();
    CHECK(p->data()[0] == doctest::Approx(1.0 - t * per_step).epsilon(1e-12));
  }
  CHECK(adam.step_count() == 25);
}

TEST_CASE("adam converges on a separable quadratic") {
  TensorPtr p = make_tensor(Tensor::from({2}, {2.0, -3.0}));
  AdamConfig cfg;
  cfg.lr = 0.05;
  AdamState adam({p}, cfg);
  for (int t = 0; t < 400; ++t) {
    Tape tp;
    const Var pv = tp.leaf(p, true);
    tp.backward(sum(tp, mul(tp, pv, pv)));
    adam.step();
    p->zero_grad();
  }
  CHECK(std::abs(p->data()[0]) < 1e-2);
  CHECK(std::abs(p->data()[1]) < 1e-2);
}

TEST_CASE("adam moment buffers follow the textbook recursion") {
  AdamConfig cfg;
  TensorPtr p = make_tensor(Tensor::from({1}, {0.0}));
  AdamState adam({p}, cfg);
  p->ensure_grad();
  p->grad()[0] = 2.0;
  adam.step();
  CHECK(adam.first_moment(0).data()[0] == doctest::Approx((1 - cfg.beta1) * 2.0).epsilon(1e-15));
  CHECK(adam.second_moment(0).data()[0] == doctest::Approx((1 - cfg.beta2) * 4.0).epsilon(1e-15));
  p->grad()[0] = -1.0;
  adam.step();
  CHECK(adam.first_moment(0).data()[0] ==
        doctest::Approx(cfg.beta1 * (1 - cfg.beta1) * 2.0 + (1 - cfg.beta1) * -1.0).epsilon(1e-15));
}

TEST_CASE("ema shadow blends toward the parameters") {
  TensorPtr p = make_tensor(Tensor::from({2}, {1.0, -2.0}));

  // decay 0: shadow equals the live parameters after one update.
  EmaState tight({p}, 0.0);
  p->data()[0] = 5.0;
  tight.update();
  CHECK(tight.shadow(0).data()[0] == 5.0);
  CHECK(tight.shadow(0).data()[1] == -2.0);

  // Hand-checked blend at decay 0.75 (shadow initialized from params).
  p->data()[0] = 1.0;
  EmaState ema({p}, 0.75);
  p->data()[0] = 2.0;
  ema.update();
  CHECK(ema.shadow(0).data()[0] == doctest::Approx(0.75 * 1.0 + 0.25 * 2.0).epsilon(1e-15));

  // Constant parameters: shadow converges to them geometrically.
  for (int t = 0; t < 200; ++t) ema.update();
  CHECK(ema.shadow(0).data()[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("ema swap is a bitwise involution") {
  TensorPtr p = make_tensor(Tensor::from({3}, {0.1, 0.2, 0.3}));
  EmaState ema({p}, 0.5);
  p->data() *= 3.0;
  ema.update();
  const Array live = p->data();
  const Array shadow = ema.shadow(0).data();
  ema.swap();
  CHECK((p->data() == shadow).all());
  CHECK((ema.shadow(0).data() == live).all());
  ema.swap();
  CHECK((p->data() == live).all());
  CHECK((ema.shadow(0).data() == shadow).all());
}
