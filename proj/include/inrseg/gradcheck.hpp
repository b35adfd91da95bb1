#pragma once

#include <functional>
#include <string>
#include <vector>

#include "inrseg/tensor.hpp"

namespace inrseg {

// One named parameter group; frozen groups must come back with exactly-zero
// gradient from compute_grads.
struct GradCheckGroup {
  std::string name;
  std::vector<TensorPtr> params;
  bool frozen = false;
};

struct GradCheckConfig {
  Scalar step = 1e-5;
  Scalar tolerance = 1e-4;
  int probes_per_group = 3;       // directional probes (Rademacher)
  int entry_probes_per_group = 3; // single-entry probes
  int kink_retries = 6;           // resamples when two step sizes disagree
  Scalar denom_floor = 1e-6;      // rel. error denominator floor
  std::uint64_t seed = 0;
};

struct GroupReport {
  std::string name;
  bool frozen = false;
  Scalar max_rel_err = 0.0;  // 0 for frozen groups that pass the zero check
  int probes = 0;
  int kinks_skipped = 0;
  bool passed = false;
};

struct GradCheckReport {
  std::vector<GroupReport> groups;
  Scalar max_rel_err = 0.0;
  bool passed = false;
};

// loss: pure forward evaluation at current parameter values.
// compute_grads: fresh backward pass writing into each param's grad buffer
// (called after the harness clears them).
struct GradCheckProblem {
  std::function<Scalar()> loss;
  std::function<void()> compute_grads;
  std::vector<GradCheckGroup> groups;
};

// Central finite differences against the tape gradient. Verifies loss
// determinism by repeated evaluation (mismatch → oracle-invalid error) and
// that frozen groups report exactly-zero gradients. Probes that straddle a
// ReLU kink (detected by disagreement between step h and h/2) are resampled.
GradCheckReport finite_diff_check(const GradCheckProblem& problem, const GradCheckConfig& cfg);

std::string format_report(const GradCheckReport& report);

}  // namespace inrseg
