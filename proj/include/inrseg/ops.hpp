#pragma once

#include "inrseg/tape.hpp"

namespace inrseg {

// Differentiable op set. Exactly what the model needs; no general
// broadcasting. Every op validates shapes, computes the forward value and
// records its backward rule on the tape.

// a: rank>=1 with last dim K (leading dims flattened to rows), b: {K,N}.
Var matmul(Tape& tp, Var a, Var b);

// Elementwise, identical shapes.
Var add(Tape& tp, Var a, Var b);
Var mul(Tape& tp, Var a, Var b);

// x: {...,C} plus per-channel bias {C}.
Var add_bias(Tape& tp, Var x, Var bias);

// a*x (+ optionally b*y via add). Scalars are plain doubles, not tensors.
Var scalar_mul(Tape& tp, Scalar a, Var x);

// Concatenate along `axis`; all other dims must agree.
Var concat(Tape& tp, const std::vector<Var>& parts, Index axis);

// Contiguous slice [start, start+len) along `axis`.
Var slice(Tape& tp, Var x, Index axis, Index start, Index len);

// input {H,W,C}, kernel {k,k,C,Cout}, bias {Cout}; odd k, zero 'same'
// padding so H,W are preserved; dilation >= 1.
Var conv2d(Tape& tp, Var input, Var kernel, Var bias, int dilation);

Var relu(Tape& tp, Var x);
// log(x) with x clamped to [lo,hi] first; zero gradient outside the clamp
// range (the clamped function is constant there).
Var log_clamp(Tape& tp, Var x, Scalar lo, Scalar hi);
// Logits are clamped to [-40,40] before exp; exact gradient in the
// unclamped region, zero outside.
Var sigmoid(Tape& tp, Var x);
// Softmax over the last axis with max-subtraction.
Var softmax(Tape& tp, Var x);

// Sum of all entries -> scalar {1}.
Var sum(Tape& tp, Var x);

}  // namespace inrseg
