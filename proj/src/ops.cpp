#include "inrseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace inrseg {

namespace {

Shape drop_last(const Shape& s) { return Shape(s.begin(), s.end() - 1); }

// Row/column split of a shape around `axis`: outer = product of dims before,
// inner = product of dims after. Row-major block copies then move
// outer * (dim*inner) contiguous chunks.
struct AxisSplit {
  Index outer = 1, axis_dim = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, Index axis) {
  AxisSplit sp;
  for (Index i = 0; i < static_cast<Index>(s.size()); ++i) {
    if (i < axis)
      sp.outer *= s[static_cast<std::size_t>(i)];
    else if (i == axis)
      sp.axis_dim = s[static_cast<std::size_t>(i)];
    else
      sp.inner *= s[static_cast<std::size_t>(i)];
  }
  return sp;
}

}  // namespace

namespace {

// Ops need their own output id inside the backward closure; the id of the
// node about to be pushed is tape.size().
template <typename Backward>
Var push_op(Tape& tp, Tensor value, bool needs, Backward&& make_backward) {
  Var out{static_cast<int>(tp.size())};
  Var pushed = tp.push(std::move(value), needs, make_backward(out));
  return pushed;
}

}  // namespace

Var matmul(Tape& tp, Var a, Var b) {
  const Tensor& ta = tp.value(a);
  const Tensor& tb = tp.value(b);
  if (ta.ndim() < 1 || tb.ndim() != 2)
    raise_invalid_shape("matmul expects lhs rank>=1 and rhs rank 2");
  const Index k = ta.last_dim();
  if (tb.dim(0) != k)
    raise_invalid_shape("matmul inner dims differ: " + shape_str(ta.shape()) + " vs " +
                        shape_str(tb.shape()));
  const Index rows = ta.size() / k;
  const Index n = tb.dim(1);

  Shape out_shape = drop_last(ta.shape());
  out_shape.push_back(n);
  Tensor out(std::move(out_shape));
  out.mat(rows, n).noalias() = ta.mat(rows, k) * tb.mat(k, n);

  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return push_op(tp, std::move(out), needs, [&](Var o) {
    return [a, b, o, rows, k, n](Tape& t) {
      const Array& g = t.grad(o);
      CMapMat gm(g.data(), rows, n);
      if (t.needs_grad(a)) {
        Array ga(rows * k);
        MapMat(ga.data(), rows, k).noalias() = gm * t.value(b).mat(k, n).transpose();
        t.accumulate(a, ga);
      }
      if (t.needs_grad(b)) {
        Array gb(k * n);
        MapMat(gb.data(), k, n).noalias() = t.value(a).mat(rows, k).transpose() * gm;
        t.accumulate(b, gb);
      }
    };
  });
}

Var add(Tape& tp, Var a, Var b) {
  const Tensor& ta = tp.value(a);
  const Tensor& tb = tp.value(b);
  if (!same_shape(ta.shape(), tb.shape()))
    raise_invalid_shape("add shape mismatch: " + shape_str(ta.shape()) + " vs " +
                        shape_str(tb.shape()));
  Tensor out(ta.shape(), ta.data() + tb.data());
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return push_op(tp, std::move(out), needs, [&](Var o) {
    return [a, b, o](Tape& t) {
      const Array& g = t.grad(o);
      t.accumulate(a, g);
      t.accumulate(b, g);
    };
  });
}

Var mul(Tape& tp, Var a, Var b) {
  const Tensor& ta = tp.value(a);
  const Tensor& tb = tp.value(b);
  if (!same_shape(ta.shape(), tb.shape()))
    raise_invalid_shape("mul shape mismatch: " + shape_str(ta.shape()) + " vs " +
                        shape_str(tb.shape()));
  Tensor out(ta.shape(), ta.data() * tb.data());
  bool needs = tp.needs_grad(a) || tp.needs_grad(b);
  return push_op(tp, std::move(out), needs, [&](Var o) {
    return [a, b, o](Tape& t) {
      const Array& g = t.grad(o);
      if (t.needs_grad(a)) t.accumulate(a, (g * t.value(b).data()).eval());
      if (t.needs_grad(b)) t.accumulate(b, (g * t.value(a).data()).eval());
    };
  });
}

Var add_bias(Tape& tp, Var x, Var bias) {
  const Tensor& tx = tp.value(x);
  const Tensor& tb = tp.value(bias);
  if (tb.ndim() != 1 || tb.dim(0) != tx.last_dim())
    raise_invalid_shape("bias shape " + shape_str(tb.shape()) + " does not match channels of " +
                        shape_str(tx.shape()));
  const Index c = tx.last_dim();
  const Index rows = tx.size() / c;
  Tensor out(tx.shape());
  out.mat(rows, c) = tx.mat(rows, c).rowwise() + tb.mat(1, c).row(0);
  bool needs = tp.needs_grad(x) || tp.needs_grad(bias);
  return push_op(tp, std::move(out), needs, [&](Var o) {
    return [x, bias, o, rows, c](Tape& t) {
      const Array& g = t.grad(o);
      t.accumulate(x, g);
      if (t.needs_grad(bias)) {
        CMapMat gm(g.data(), rows, c);
        Array gb = gm.colwise().sum().transpose().array();
        t.accumulate(bias, gb);
      }
    };
  });
}

Var scalar_mul(Tape& tp, Scalar a, Var x) {
  const Tensor& tx = tp.value(x);
  Tensor out(tx.shape(), a * tx.data());
  return push_op(tp, std::move(out), tp.needs_grad(x), [&](Var o) {
    return [a, x, o](Tape& t) { t.accumulate(x, (a * t.grad(o)).eval()); };
  });
}

Var concat(Tape& tp, const std::vector<Var>& parts, Index axis) {
  if (parts.empty()) raise_invalid_shape("concat of zero tensors");
  const Shape& first = tp.value(parts[0]).shape();
  const Index rank = static_cast<Index>(first.size());
  if (axis < 0 || axis >= rank) raise_invalid_shape("concat axis out of range");
  Shape out_shape = first;
  Index total_axis = 0;
  for (Var p : parts) {
    const Shape& s = tp.value(p).shape();
    if (static_cast<Index>(s.size()) != rank) raise_invalid_shape("concat rank mismatch");
    for (Index i = 0; i < rank; ++i)
      if (i != axis && s[static_cast<std::size_t>(i)] != first[static_cast<std::size_t>(i)])
        raise_invalid_shape("concat non-axis dims differ: " + shape_str(first) + " vs " +
                            shape_str(s));
    total_axis += s[static_cast<std::size_t>(axis)];
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;

  Tensor out(out_shape);
  AxisSplit sp = split_axis(out_shape, axis);
  std::vector<Index> part_dims;
  Index off = 0;
  for (Var p : parts) {
    const Tensor& tpart = tp.value(p);
    const Index d = tpart.dim(axis);
    part_dims.push_back(d);
    for (Index r = 0; r < sp.outer; ++r) {
      const Scalar* src = tpart.data().data() + r * d * sp.inner;
      Scalar* dst = out.data().data() + (r * total_axis + off) * sp.inner;
      std::copy(src, src + d * sp.inner, dst);
    }
    off += d;
  }

  bool needs = false;
  for (Var p : parts) needs = needs || tp.needs_grad(p);
  return push_op(tp, std::move(out), needs, [&](Var o) {
    return [parts, part_dims, sp, total_axis, o](Tape& t) {
      const Array& g = t.grad(o);
      Index off2 = 0;
      for (std::size_t i = 0; i < parts.size(); ++i) {
        const Index d = part_dims[i];
        if (t.needs_grad(parts[i])) {
          Array gp(d * sp.inner * sp.outer);
          for (Index r = 0; r < sp.outer; ++r) {
            const Scalar* src = g.data() + (r * total_axis + off2) * sp.inner;
            std::copy(src, src + d * sp.inner, gp.data() + r * d * sp.inner);
          }
          t.accumulate(parts[i], gp);
        }
        off2 += d;
      }
    };
  });
}

Var slice(Tape& tp, Var x, Index axis, Index start, Index len) {
  const Tensor& tx = tp.value(x);
  const Index rank = tx.ndim();
  if (axis < 0 || axis >= rank) raise_invalid_shape("slice axis out of range");
  const Index d = tx.dim(axis);
  if (start < 0 || len <= 0 || start + len > d)
    raise_invalid_shape("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") outside axis of size " + std::to_string(d));
  Shape out_shape = tx.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  AxisSplit sp = split_axis(tx.shape(), axis);

  Tensor out(out_shape);
  for (Index r = 0; r < sp.outer; ++r) {
    const Scalar* src = tx.data().data() + (r * d + start) * sp.inner;
    std::copy(src, src + len * sp.inner, out.data().data() + r * len * sp.inner);
  }
  return push_op(tp, std::move(out), tp.needs_grad(x), [&](Var o) {
    return [x, o, sp, d, start, len](Tape& t) {
      const Array& g = t.grad(o);
      Array gx = Array::Zero(t.value(x).size());
      for (Index r = 0; r < sp.outer; ++r) {
        const Scalar* src = g.data() + r * len * sp.inner;
        Scalar* dst = gx.data() + (r * d + start) * sp.inner;
        for (Index i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
      }
      t.accumulate(x, gx);
    };
  });
}

namespace {

// Gathers dilated k x k patches around every pixel into a {H*W, k*k*C} matrix
// (zero padding keeps H,W). Column order (kr,kc,ci) matches the row order of
// the kernel tensor {k,k,C,Cout} flattened to {k*k*C, Cout}.
MatRM im2col(const Tensor& input, int k, int dilation) {
  const Index h = input.dim(0), w = input.dim(1), c = input.dim(2);
  const int half = k / 2;
  MatRM col = MatRM::Zero(h * w, static_cast<Index>(k) * k * c);
  const Scalar* src = input.data().data();
  for (Index r = 0; r < h; ++r) {
    for (Index cc = 0; cc < w; ++cc) {
      Scalar* dst = col.data() + (r * w + cc) * col.cols();
      for (int kr = 0; kr < k; ++kr) {
        const Index sr = r + static_cast<Index>(kr - half) * dilation;
        for (int kc = 0; kc < k; ++kc) {
          const Index sc = cc + static_cast<Index>(kc - half) * dilation;
          if (sr >= 0 && sr < h && sc >= 0 && sc < w) {
            const Scalar* px = src + (sr * w + sc) * c;
            std::copy(px, px + c, dst);
          }
          dst += c;
        }
      }
    }
  }
  return col;
}

void col2im_add(const MatRM& dcol, Index h, Index w, Index c, int k, int dilation, Array& dx) {
  const int half = k / 2;
  for (Index r = 0; r < h; ++r) {
    for (Index cc = 0; cc < w; ++cc) {
      const Scalar* src = dcol.data() + (r * w + cc) * dcol.cols();
      for (int kr = 0; kr < k; ++kr) {
        const Index sr = r + static_cast<Index>(kr - half) * dilation;
        for (int kc = 0; kc < k; ++kc) {
          const Index sc = cc + static_cast<Index>(kc - half) * dilation;
          if (sr >= 0 && sr < h && sc >= 0 && sc < w) {
            Scalar* px = dx.data() + (sr * w + sc) * c;
            for (Index ci = 0; ci < c; ++ci) px[ci] += src[ci];
          }
          src += c;
        }
      }
    }
  }
}

}  // namespace

Var conv2d(Tape& tp, Var input, Var kernel, Var bias, int dilation) {
  const Tensor& tin = tp.value(input);
  const Tensor& tk = tp.value(kernel);
  const Tensor& tb = tp.value(bias);
  if (tin.ndim() != 3 || tk.ndim() != 4)
    raise_invalid_shape("conv2d expects input {H,W,C} and kernel {k,k,C,Cout}");
  const Index h = tin.dim(0), w = tin.dim(1), c = tin.dim(2);
  const Index k = tk.dim(0);
  const Index cout = tk.dim(3);
  if (tk.dim(1) != k || tk.dim(2) != c)
    raise_invalid_shape("conv2d kernel " + shape_str(tk.shape()) + " does not match input " +
                        shape_str(tin.shape()));
  if (k % 2 == 0) raise_invalid_config("conv2d kernel size must be odd, got " + std::to_string(k));
  if (dilation < 1) raise_invalid_config("conv2d dilation must be >= 1");
  if (tb.ndim() != 1 || tb.dim(0) != cout) raise_invalid_shape("conv2d bias must be {Cout}");

  const int ki = static_cast<int>(k);
  auto col = std::make_shared<MatRM>(im2col(tin, ki, dilation));
  Tensor out({h, w, cout});
  out.mat(h * w, cout).noalias() = (*col) * tk.mat(k * k * c, cout);
  out.mat(h * w, cout).rowwise() += tb.mat(1, cout).row(0);

  bool needs = tp.needs_grad(input) || tp.needs_grad(kernel) || tp.needs_grad(bias);
  if (!needs) col.reset();  // inference path keeps no patch cache
  return push_op(tp, std::move(out), needs, [&](Var o) {
    return [input, kernel, bias, o, col, h, w, c, ki, cout, dilation](Tape& t) {
      const Array& g = t.grad(o);
      CMapMat gm(g.data(), h * w, cout);
      if (t.needs_grad(bias)) {
        Array gb = gm.colwise().sum().transpose().array();
        t.accumulate(bias, gb);
      }
      const Index kk_c = static_cast<Index>(ki) * ki * c;
      if (t.needs_grad(kernel)) {
        Array gk(kk_c * cout);
        MapMat(gk.data(), kk_c, cout).noalias() = col->transpose() * gm;
        t.accumulate(kernel, gk);
      }
      if (t.needs_grad(input)) {
        MatRM dcol(h * w, kk_c);
        dcol.noalias() = gm * t.value(kernel).mat(kk_c, cout).transpose();
        Array dx = Array::Zero(h * w * c);
        col2im_add(dcol, h, w, c, ki, dilation, dx);
        t.accumulate(input, dx);
      }
    };
  });
}

Var relu(Tape& tp, Var x) {
  const Tensor& tx = tp.value(x);
  Tensor out(tx.shape(), tx.data().max(0.0));
  return push_op(tp, std::move(out), tp.needs_grad(x), [&](Var o) {
    return [x, o](Tape& t) {
      const Array& g = t.grad(o);
      Array gx = (t.value(x).data() > 0.0).select(g, Array::Zero(g.size()));
      t.accumulate(x, gx);
    };
  });
}

Var log_clamp(Tape& tp, Var x, Scalar lo, Scalar hi) {
  if (!(lo > 0.0) || !(hi > lo)) raise_invalid_config("log_clamp needs 0 < lo < hi");
  const Tensor& tx = tp.value(x);
  Array clamped = tx.data().min(hi).max(lo);
  Tensor out(tx.shape(), clamped.log());
  return push_op(tp, std::move(out), tp.needs_grad(x), [&](Var o) {
    return [x, o, lo, hi](Tape& t) {
      const Array& g = t.grad(o);
      const Array& v = t.value(x).data();
      Array gx = (v >= lo && v <= hi).select(g / v, Array::Zero(g.size()));
      t.accumulate(x, gx);
    };
  });
}

Var sigmoid(Tape& tp, Var x) {
  const Tensor& tx = tp.value(x);
  Array clamped = tx.data().min(40.0).max(-40.0);
  Tensor out(tx.shape(), Array(1.0 / (1.0 + (-clamped).exp())));
  return push_op(tp, std::move(out), tp.needs_grad(x), [&](Var o) {
    return [x, o](Tape& t) {
      const Array& y = t.value(o).data();
      Array gx = t.grad(o) * y * (1.0 - y);
      t.accumulate(x, gx);
    };
  });
}

Var softmax(Tape& tp, Var x) {
  const Tensor& tx = tp.value(x);
  const Index c = tx.last_dim();
  const Index rows = tx.size() / c;
  Tensor out(tx.shape());
  auto xm = tx.mat(rows, c);
  auto ym = out.mat(rows, c);
  for (Index r = 0; r < rows; ++r) {
    Array e = (xm.row(r).array() - xm.row(r).maxCoeff()).exp();
    ym.row(r) = (e / e.sum()).matrix();
  }
  return push_op(tp, std::move(out), tp.needs_grad(x), [&](Var o) {
    return [x, o, rows, c](Tape& t) {
      const Array& g = t.grad(o);
      const Array& y = t.value(o).data();
      Array gx(y.size());
      CMapMat gm(g.data(), rows, c), ym2(y.data(), rows, c);
      MapMat gxm(gx.data(), rows, c);
      for (Index r = 0; r < rows; ++r) {
        const Scalar dot = gm.row(r).dot(ym2.row(r));
        gxm.row(r) = (ym2.row(r).array() * (gm.row(r).array() - dot)).matrix();
      }
      t.accumulate(x, gx);
    };
  });
}

Var sum(Tape& tp, Var x) {
  const Tensor& tx = tp.value(x);
  Tensor out = Tensor::scalar(tx.data().sum());
  return push_op(tp, std::move(out), tp.needs_grad(x), [&](Var o) {
    return [x, o](Tape& t) {
      Array gx = Array::Constant(t.value(x).size(), t.grad(o)[0]);
      t.accumulate(x, gx);
    };
  });
}

}  // namespace inrseg
