#pragma once

#include <string>
#include <utility>
#include <vector>

#include "inrseg/rng.hpp"
#include "inrseg/tape.hpp"

namespace inrseg {

// Widths and depths of the shared decoder and heads. The decoder fuses a
// 3x3-conv context branch with a per-pixel 1x1 branch; each head is an entry
// 1x1 projection, a stack of dilated residual blocks, and a 1x1 output layer.
struct ModelDims {
  int d_z = 24;
  int conv_width = 32;
  int conv_layers = 3;
  int point_width = 32;
  int point_layers = 3;
  int fused_width = 64;
  int head_width = 32;
  std::vector<int> head_dilations = {1, 2, 4};

  void validate() const;
};

struct Conv2dParams {
  TensorPtr kernel;  // {k,k,Cin,Cout}
  TensorPtr bias;    // {Cout}
  int dilation = 1;
};

struct LinearParams {
  TensorPtr weight;  // {Cin,Cout}
  TensorPtr bias;    // {Cout}
};

struct DecoderParams {
  std::vector<Conv2dParams> conv;
  std::vector<LinearParams> point;
  LinearParams fuse;
};

struct HeadParams {
  LinearParams entry;
  std::vector<Conv2dParams> blocks;  // residual: y = relu(x + conv(x))
  LinearParams out;
};

using NamedParams = std::vector<std::pair<std::string, TensorPtr>>;

struct ModelParams {
  ModelDims dims;
  DecoderParams decoder;
  HeadParams rec;
  HeadParams seg;

  // Kaiming-uniform fan-in weights, zero biases.
  static ModelParams init(const ModelDims& dims, Rng& rng);

  // Group-prefixed names: decoder/..., rec_head/..., seg_head/...
  NamedParams named_params() const;
  std::vector<TensorPtr> group(const std::string& name) const;
};

struct FreezePlan {
  bool decoder = true;
  bool rec_head = true;
  bool seg_head = true;
};

struct ConvVars {
  Var kernel;
  Var bias;
  int dilation = 1;
};

struct LinearVars {
  Var weight;
  Var bias;
};

struct HeadVars {
  LinearVars entry;
  std::vector<ConvVars> blocks;
  LinearVars out;
};

struct ModelVars {
  std::vector<ConvVars> conv;
  std::vector<LinearVars> point;
  LinearVars fuse;
  HeadVars rec;
  HeadVars seg;
};

// Bind all model tensors as tape leaves; frozen groups become constants and
// get exactly-zero gradients.
ModelVars bind_model(Tape& tp, const ModelParams& params, const FreezePlan& plan);

// encoded {H,W,d_z} -> fused features {H,W,d_h}.
Var decode(Tape& tp, const ModelVars& model, Var encoded);
// features {H,W,d_h} -> {H,W,3} in (0,1).
Var rec_head(Tape& tp, const ModelVars& model, Var features);
// features {H,W,d_h} -> {H,W,2}, rows summing to 1; channel 0 = background,
// channel 1 = lesion.
Var seg_head(Tape& tp, const ModelVars& model, Var features);

}  // namespace inrseg
