#include "inrseg/model.hpp"

#include <cmath>

#include "inrseg/errors.hpp"
#include "inrseg/ops.hpp"

namespace inrseg {

namespace {

TensorPtr kaiming_uniform(const Shape& shape, Index fan_in, Rng& rng) {
  const Scalar bound = std::sqrt(6.0 / static_cast<Scalar>(fan_in));
  return make_tensor(Tensor::uniform(shape, rng, -bound, bound));
}

LinearParams init_linear(Index in, Index out, Rng& rng) {
  LinearParams p;
  p.weight = kaiming_uniform({in, out}, in, rng);
  p.bias = make_tensor(Tensor({out}));
  return p;
}

Conv2dParams init_conv(Index k, Index in, Index out, int dilation, Rng& rng) {
  Conv2dParams p;
  p.kernel = kaiming_uniform({k, k, in, out}, k * k * in, rng);
  p.bias = make_tensor(Tensor({out}));
  p.dilation = dilation;
  return p;
}

void name_linear(NamedParams& out, const std::string& prefix, const LinearParams& p) {
  out.emplace_back(prefix + "/weight", p.weight);
  out.emplace_back(prefix + "/bias", p.bias);
}

void name_conv(NamedParams& out, const std::string& prefix, const Conv2dParams& p) {
  out.emplace_back(prefix + "/kernel", p.kernel);
  out.emplace_back(prefix + "/bias", p.bias);
}

void name_head(NamedParams& out, const std::string& prefix, const HeadParams& h) {
  name_linear(out, prefix + "/entry", h.entry);
  for (std::size_t i = 0; i < h.blocks.size(); ++i) {
    name_conv(out, prefix + "/block" + std::to_string(i), h.blocks[i]);
  }
  name_linear(out, prefix + "/out", h.out);
}

LinearVars bind_linear(Tape& tp, const LinearParams& p, bool trainable) {
  return LinearVars{tp.leaf(p.weight, trainable), tp.leaf(p.bias, trainable)};
}

ConvVars bind_conv(Tape& tp, const Conv2dParams& p, bool trainable) {
  return ConvVars{tp.leaf(p.kernel, trainable), tp.leaf(p.bias, trainable), p.dilation};
}

HeadVars bind_head(Tape& tp, const HeadParams& h, bool trainable) {
  HeadVars v;
  v.entry = bind_linear(tp, h.entry, trainable);
  v.blocks.reserve(h.blocks.size());
  for (const Conv2dParams& b : h.blocks) v.blocks.push_back(bind_conv(tp, b, trainable));
  v.out = bind_linear(tp, h.out, trainable);
  return v;
}

Var linear(Tape& tp, const LinearVars& l, Var x) {
  return add_bias(tp, matmul(tp, x, l.weight), l.bias);
}

Var head_forward(Tape& tp, const HeadVars& head, Var features) {
  Var x = relu(tp, linear(tp, head.entry, features));
  for (const ConvVars& b : head.blocks) {
    Var y = conv2d(tp, x, b.kernel, b.bias, b.dilation);
    x = relu(tp, add(tp, x, y));
  }
  return linear(tp, head.out, x);
}

}  // namespace

void ModelDims::validate() const {
  if (d_z < 1) raise_invalid_config("model needs d_z >= 1");
  if (conv_width < 1 || point_width < 1 || fused_width < 1 || head_width < 1) {
    raise_invalid_config("model widths must be >= 1");
  }
  if (conv_layers < 1 || point_layers < 1) raise_invalid_config("model depths must be >= 1");
  if (head_dilations.empty()) raise_invalid_config("heads need at least one residual block");
  for (std::size_t i = 0; i < head_dilations.size(); ++i) {
    if (head_dilations[i] < 1) raise_invalid_config("dilations must be >= 1");
    if (i > 0 && head_dilations[i] <= head_dilations[i - 1]) {
      raise_invalid_config("head dilations must be strictly increasing");
    }
  }
}

ModelParams ModelParams::init(const ModelDims& dims, Rng& rng) {
  dims.validate();
  ModelParams p;
  p.dims = dims;

  Index in = dims.d_z;
  for (int i = 0; i < dims.conv_layers; ++i) {
    p.decoder.conv.push_back(init_conv(3, in, dims.conv_width, 1, rng));
    in = dims.conv_width;
  }
  in = dims.d_z;
  for (int i = 0; i < dims.point_layers; ++i) {
    p.decoder.point.push_back(init_linear(in, dims.point_width, rng));
    in = dims.point_width;
  }
  p.decoder.fuse = init_linear(dims.conv_width + dims.point_width, dims.fused_width, rng);

  auto make_head = [&](Index out_ch) {
    HeadParams h;
    h.entry = init_linear(dims.fused_width, dims.head_width, rng);
    for (int d : dims.head_dilations) {
      h.blocks.push_back(init_conv(3, dims.head_width, dims.head_width, d, rng));
    }
    h.out = init_linear(dims.head_width, out_ch, rng);
    return h;
  };
  p.rec = make_head(3);
  p.seg = make_head(2);
  return p;
}

NamedParams ModelParams::named_params() const {
  NamedParams out;
  for (std::size_t i = 0; i < decoder.conv.size(); ++i) {
    name_conv(out, "decoder/conv" + std::to_string(i), decoder.conv[i]);
  }
  for (std::size_t i = 0; i < decoder.point.size(); ++i) {
    name_linear(out, "decoder/point" + std::to_string(i), decoder.point[i]);
  }
  name_linear(out, "decoder/fuse", decoder.fuse);
  name_head(out, "rec_head", rec);
  name_head(out, "seg_head", seg);
  return out;
}

std::vector<TensorPtr> ModelParams::group(const std::string& name) const {
  std::vector<TensorPtr> out;
  const std::string prefix = name + "/";
  for (const auto& [n, t] : named_params()) {
    if (n.rfind(prefix, 0) == 0) out.push_back(t);
  }
  if (out.empty()) raise_usage("unknown parameter group '" + name + "'");
  return out;
}

ModelVars bind_model(Tape& tp, const ModelParams& params, const FreezePlan& plan) {
  params.dims.validate();
  ModelVars v;
  v.conv.reserve(params.decoder.conv.size());
  for (const Conv2dParams& c : params.decoder.conv) {
    v.conv.push_back(bind_conv(tp, c, plan.decoder));
  }
  v.point.reserve(params.decoder.point.size());
  for (const LinearParams& l : params.decoder.point) {
    v.point.push_back(bind_linear(tp, l, plan.decoder));
  }
  v.fuse = bind_linear(tp, params.decoder.fuse, plan.decoder);
  v.rec = bind_head(tp, params.rec, plan.rec_head);
  v.seg = bind_head(tp, params.seg, plan.seg_head);
  return v;
}

Var decode(Tape& tp, const ModelVars& model, Var encoded) {
  const Shape& sh = tp.value(encoded).shape();
  if (sh.size() != 3) raise_invalid_shape("decode expects {H,W,d_z}, got " + shape_str(sh));
  const Shape& k0 = tp.value(model.conv.front().kernel).shape();
  if (sh[2] != k0[2]) {
    raise_invalid_config("encoded width " + std::to_string(sh[2]) +
                         " does not match decoder input width " + std::to_string(k0[2]));
  }

  Var c = encoded;
  for (const ConvVars& cv : model.conv) {
    c = relu(tp, conv2d(tp, c, cv.kernel, cv.bias, cv.dilation));
  }
  Var p = encoded;
  for (const LinearVars& lv : model.point) {
    p = relu(tp, linear(tp, lv, p));
  }
  Var fused = concat(tp, {c, p}, 2);
  return relu(tp, linear(tp, model.fuse, fused));
}

Var rec_head(Tape& tp, const ModelVars& model, Var features) {
  return sigmoid(tp, head_forward(tp, model.rec, features));
}

Var seg_head(Tape& tp, const ModelVars& model, Var features) {
  return softmax(tp, head_forward(tp, model.seg, features));
}

}  // namespace inrseg
