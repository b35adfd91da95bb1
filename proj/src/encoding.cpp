#include "inrseg/encoding.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

#include "inrseg/errors.hpp"

namespace inrseg {

namespace {

bool is_pow2(Index v) { return v > 0 && (v & (v - 1)) == 0; }

void check_coords(const Tensor& coords) {
  if (coords.shape().size() != 2 || coords.shape()[1] != 2) {
    raise_invalid_shape("coords must be {N,2}, got " + shape_str(coords.shape()));
  }
  const Array& d = coords.data();
  if (!(d >= 0.0).all() || !(d <= 1.0).all()) {
    raise_domain("coordinates must lie in [0,1]^2");
  }
}

struct CellQuery {
  Index row[4];
  Scalar w[4];
};

// Cell lookup for one point at one level; clamps scaled coordinate so that
// queries exactly at 1.0 land in the last cell.
CellQuery locate(const HashGridConfig& cfg, int level, Scalar x0, Scalar x1) {
  const Index res = level_resolution(cfg, level);
  const Scalar s0 = x0 * static_cast<Scalar>(res);
  const Scalar s1 = x1 * static_cast<Scalar>(res);
  Index c0 = static_cast<Index>(std::floor(s0));
  Index c1 = static_cast<Index>(std::floor(s1));
  if (c0 > res - 1) c0 = res - 1;
  if (c1 > res - 1) c1 = res - 1;
  const Scalar f0 = s0 - static_cast<Scalar>(c0);
  const Scalar f1 = s1 - static_cast<Scalar>(c1);

  const bool direct = level_is_direct(cfg, level);
  const Index side = res + 1;
  CellQuery q;
  int k = 0;
  for (Index dv1 = 0; dv1 <= 1; ++dv1) {
    for (Index dv0 = 0; dv0 <= 1; ++dv0) {
      const Index v0 = c0 + dv0;
      const Index v1 = c1 + dv1;
      q.row[k] = direct ? v0 * side + v1 : spatial_hash(v0, v1, cfg.table_size);
      const Scalar w0 = dv0 ? f0 : Scalar(1) - f0;
      const Scalar w1 = dv1 ? f1 : Scalar(1) - f1;
      q.w[k] = w0 * w1;
      ++k;
    }
  }
  return q;
}

}  // namespace

void HashGridConfig::validate() const {
  if (levels < 1) raise_invalid_config("hash grid needs levels >= 1");
  if (base_resolution < 1) raise_invalid_config("hash grid needs base_resolution >= 1");
  if (!(level_scale > 1.0)) raise_invalid_config("hash grid needs level_scale > 1");
  if (!is_pow2(table_size)) raise_invalid_config("hash grid table_size must be a power of two");
  if (features < 1) raise_invalid_config("hash grid needs features >= 1");
  if (dims != 2) raise_invalid_config("hash grid supports only 2-D inputs");
}

Index level_resolution(const HashGridConfig& cfg, int level) {
  if (level < 0 || level >= cfg.levels) raise_domain("level index out of range");
  const double r = static_cast<double>(cfg.base_resolution) *
                   std::pow(static_cast<double>(cfg.level_scale), level);
  return static_cast<Index>(std::floor(r));
}

bool level_is_direct(const HashGridConfig& cfg, int level) {
  const Index side = level_resolution(cfg, level) + 1;
  return side * side <= cfg.table_size;
}

Index level_table_rows(const HashGridConfig& cfg, int level) {
  if (level_is_direct(cfg, level)) {
    const Index side = level_resolution(cfg, level) + 1;
    return side * side;
  }
  return cfg.table_size;
}

Index encoded_width(const HashGridConfig& cfg) {
  return static_cast<Index>(cfg.levels) * static_cast<Index>(cfg.features);
}

Index spatial_hash(Index v0, Index v1, Index table_size) {
  if (!is_pow2(table_size)) raise_invalid_config("spatial_hash needs a power-of-two capacity");
  const std::uint64_t h = static_cast<std::uint64_t>(v0) * 1ull ^
                          static_cast<std::uint64_t>(v1) * 2654435761ull;
  return static_cast<Index>(h & static_cast<std::uint64_t>(table_size - 1));
}

HashGridEncoder::HashGridEncoder(HashGridConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  tables_.reserve(static_cast<std::size_t>(cfg_.levels));
  for (int l = 0; l < cfg_.levels; ++l) {
    const Shape sh{level_table_rows(cfg_, l), static_cast<Index>(cfg_.features)};
    tables_.push_back(make_tensor(Tensor::uniform(sh, rng, -1e-4, 1e-4)));
  }
}

MaskedEncoder mask_levels(const HashGridEncoder& enc, const std::function<bool(int)>& keep) {
  LevelMask mask;
  mask.keep.resize(static_cast<std::size_t>(enc.levels()));
  for (int l = 0; l < enc.levels(); ++l) mask.keep[static_cast<std::size_t>(l)] = keep(l);
  return MaskedEncoder{&enc, std::move(mask)};
}

Var hash_encode(Tape& tp, const HashGridConfig& cfg, const std::vector<Var>& tables,
                const Tensor& coords, const Shape& out_shape, const LevelMask* mask) {
  cfg.validate();
  check_coords(coords);
  if (static_cast<int>(tables.size()) != cfg.levels) {
    raise_invalid_shape("expected one table per level");
  }
  const Index n = coords.shape()[0];
  const Index width = encoded_width(cfg);
  if (out_shape.empty() || out_shape.back() != width || numel(out_shape) != n * width) {
    raise_invalid_shape("encode output shape mismatch: " + shape_str(out_shape));
  }
  if (mask && static_cast<int>(mask->keep.size()) != cfg.levels) {
    raise_invalid_shape("level mask size mismatch");
  }

  const Index f = cfg.features;
  bool needs = false;
  for (int l = 0; l < cfg.levels; ++l) {
    const bool kept = !mask || mask->keep[static_cast<std::size_t>(l)];
    if (kept && tp.needs_grad(tables[static_cast<std::size_t>(l)])) needs = true;
  }

  // Cell rows and bilinear weights, kept for the backward scatter.
  auto queries = std::make_shared<std::vector<CellQuery>>();
  queries->resize(static_cast<std::size_t>(n) * static_cast<std::size_t>(cfg.levels));

  Tensor out(out_shape);
  MapMat om(out.data().data(), n, width);
  CMapMat cm(coords.data().data(), n, 2);
  for (int l = 0; l < cfg.levels; ++l) {
    const bool kept = !mask || mask->keep[static_cast<std::size_t>(l)];
    if (!kept) continue;
    const Tensor& table = tp.value(tables[static_cast<std::size_t>(l)]);
    if (table.shape() != Shape{level_table_rows(cfg, l), f}) {
      raise_invalid_shape("table shape mismatch at level " + std::to_string(l));
    }
    CMapMat tm(table.data().data(), table.shape()[0], f);
    for (Index i = 0; i < n; ++i) {
      CellQuery& q = (*queries)[static_cast<std::size_t>(i * cfg.levels + l)];
      q = locate(cfg, l, cm(i, 0), cm(i, 1));
      auto dst = om.block(i, static_cast<Index>(l) * f, 1, f);
      dst.setZero();
      for (int k = 0; k < 4; ++k) dst += q.w[k] * tm.row(q.row[k]);
    }
  }

  Var out_var{static_cast<int>(tp.size())};
  LevelMask mask_copy = mask ? *mask : LevelMask::all(cfg.levels);
  return tp.push(std::move(out), needs,
                 [cfg, tables, queries, out_var, n, f,
                  mask_copy = std::move(mask_copy)](Tape& t) {
                   const Array& g = t.grad(out_var);
                   CMapMat gm(g.data(), n, static_cast<Index>(cfg.levels) * f);
                   for (int l = 0; l < cfg.levels; ++l) {
                     const Var tv = tables[static_cast<std::size_t>(l)];
                     if (!t.needs_grad(tv) || !mask_copy.keep[static_cast<std::size_t>(l)]) {
                       continue;
                     }
                     const Tensor& table = t.value(tv);
                     Array dt = Array::Zero(table.data().size());
                     MapMat dm(dt.data(), table.shape()[0], f);
                     for (Index i = 0; i < n; ++i) {
                       const CellQuery& q =
                           (*queries)[static_cast<std::size_t>(i * cfg.levels + l)];
                       const auto gi = gm.block(i, static_cast<Index>(l) * f, 1, f);
                       for (int k = 0; k < 4; ++k) dm.row(q.row[k]) += q.w[k] * gi;
                     }
                     t.accumulate(tv, dt);
                   }
                 });
}

Tensor nerf_encode(const Tensor& coords, int n_freqs) {
  check_coords(coords);
  if (n_freqs < 1) raise_invalid_config("nerf encoding needs n_freqs >= 1");
  const Index n = coords.shape()[0];
  const Index width = 4 * static_cast<Index>(n_freqs);
  Tensor out({n, width});
  MapMat om(out.data().data(), n, width);
  CMapMat cm(coords.data().data(), n, 2);
  constexpr Scalar pi = 3.14159265358979323846;
  for (Index i = 0; i < n; ++i) {
    for (Index axis = 0; axis < 2; ++axis) {
      Scalar freq = pi;
      for (int k = 0; k < n_freqs; ++k) {
        const Scalar arg = freq * cm(i, axis);
        const Index col = axis * 2 * n_freqs + 2 * k;
        om(i, col) = std::sin(arg);
        om(i, col + 1) = std::cos(arg);
        freq *= 2.0;
      }
    }
  }
  return out;
}

Tensor identity_encode(const Tensor& coords) {
  check_coords(coords);
  return coords;
}

EncoderKind encoder_kind_from_string(const std::string& s) {
  if (s == "none") return EncoderKind::none;
  if (s == "nerf-pe") return EncoderKind::nerf_pe;
  if (s == "hash") return EncoderKind::hash;
  raise_invalid_config("unknown encoder kind '" + s + "' (expected none|nerf-pe|hash)");
}

std::string to_string(EncoderKind k) {
  switch (k) {
    case EncoderKind::none: return "none";
    case EncoderKind::nerf_pe: return "nerf-pe";
    case EncoderKind::hash: return "hash";
  }
  raise_invalid_config("bad encoder kind");
}

int EncoderConfig::feature_width() const {
  switch (kind) {
    case EncoderKind::none: return 2;
    case EncoderKind::nerf_pe: return 4 * nerf_freqs;
    case EncoderKind::hash: return static_cast<int>(encoded_width(grid));
  }
  raise_invalid_config("bad encoder kind");
}

SlideEncoder::SlideEncoder(EncoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  if (cfg_.kind == EncoderKind::hash) {
    Rng rng(seed);
    grid_.emplace(cfg_.grid, rng);
  } else if (cfg_.kind == EncoderKind::nerf_pe && cfg_.nerf_freqs < 1) {
    raise_invalid_config("nerf encoding needs n_freqs >= 1");
  }
}

const HashGridEncoder& SlideEncoder::grid() const {
  if (!grid_) raise_usage("encoder kind '" + to_string(cfg_.kind) + "' has no hash grid");
  return *grid_;
}

std::vector<TensorPtr> SlideEncoder::params() const {
  if (!grid_) return {};
  return grid_->tables();
}

std::vector<Var> SlideEncoder::bind(Tape& tp, bool trainable) const {
  std::vector<Var> leaves;
  if (!grid_) return leaves;
  leaves.reserve(grid_->tables().size());
  for (const TensorPtr& t : grid_->tables()) leaves.push_back(tp.leaf(t, trainable));
  return leaves;
}

Var SlideEncoder::encode(Tape& tp, const std::vector<Var>& leaves, const Tensor& coords,
                         const Shape& out_shape, const LevelMask* mask) const {
  if (cfg_.kind == EncoderKind::hash) {
    return hash_encode(tp, cfg_.grid, leaves, coords, out_shape, mask);
  }
  if (mask) raise_usage("level masks apply only to hash encoders");
  Tensor feats = cfg_.kind == EncoderKind::nerf_pe ? nerf_encode(coords, cfg_.nerf_freqs)
                                                   : identity_encode(coords);
  if (numel(out_shape) != feats.data().size() ||
      out_shape.back() != static_cast<Index>(feature_width())) {
    raise_invalid_shape("encode output shape mismatch: " + shape_str(out_shape));
  }
  return tp.constant(Tensor(out_shape, feats.data()));
}

std::string dump_encoding_csv(const SlideEncoder& enc, const Tensor& coords) {
  check_coords(coords);
  const Index n = coords.shape()[0];
  const Index width = enc.feature_width();

  Tape tp;
  std::vector<Var> leaves = enc.bind(tp, false);
  Var feats = enc.encode(tp, leaves, coords, {n, width});
  CMapMat fm(tp.value(feats).data().data(), n, width);
  CMapMat cm(coords.data().data(), n, 2);

  std::string out = "x,y";
  for (Index c = 0; c < width; ++c) {
    char buf[32];
    if (enc.config().kind == EncoderKind::hash) {
      const Index f = enc.config().grid.features;
      std::snprintf(buf, sizeof(buf), ",l%lld_f%lld", static_cast<long long>(c / f),
                    static_cast<long long>(c % f));
    } else {
      std::snprintf(buf, sizeof(buf), ",f%lld", static_cast<long long>(c));
    }
    out += buf;
  }
  out += '\n';
  char num[64];
  for (Index i = 0; i < n; ++i) {
    std::snprintf(num, sizeof(num), "%.17g,%.17g", cm(i, 0), cm(i, 1));
    out += num;
    for (Index c = 0; c < width; ++c) {
      std::snprintf(num, sizeof(num), ",%.17g", fm(i, c));
      out += num;
    }
    out += '\n';
  }
  return out;
}

}  // namespace inrseg
