#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "inrseg/tape.hpp"

namespace inrseg {

// Multi-resolution hash grid over [0,1]^2. Level l has resolution
// R_l = floor(R0 * s^l) cells per unit; a level whose (R_l+1)^2 vertices fit
// the table capacity indexes them directly (collision-free), finer levels
// hash with collisions.
struct HashGridConfig {
  int levels = 12;
  int base_resolution = 8;
  Scalar level_scale = 1.5;
  Index table_size = Index(1) << 14;
  int features = 2;
  int dims = 2;

  void validate() const;
};

Index level_resolution(const HashGridConfig& cfg, int level);
bool level_is_direct(const HashGridConfig& cfg, int level);
// Rows actually allocated for the level: (R_l+1)^2 when direct, else T.
Index level_table_rows(const HashGridConfig& cfg, int level);
Index encoded_width(const HashGridConfig& cfg);  // L*F

// (v0*pi1 XOR v1*pi2) mod T, pi1=1, pi2=2654435761; T must be a power of two.
Index spatial_hash(Index v0, Index v1, Index table_size);

// Per-level keep flags; dropped levels contribute exactly zero features and
// receive zero gradient. Output width is unchanged.
struct LevelMask {
  std::vector<bool> keep;
  static LevelMask all(int levels) { return LevelMask{std::vector<bool>(levels, true)}; }
};

// Per-slide learnable tables.
class HashGridEncoder {
 public:
  HashGridEncoder(HashGridConfig cfg, Rng& rng);

  const HashGridConfig& config() const { return cfg_; }
  int levels() const { return cfg_.levels; }
  const TensorPtr& table(int level) const { return tables_[static_cast<std::size_t>(level)]; }
  const std::vector<TensorPtr>& tables() const { return tables_; }

 private:
  HashGridConfig cfg_;
  std::vector<TensorPtr> tables_;
};

// A masked view of an encoder; encode() on the view zeroes dropped levels.
struct MaskedEncoder {
  const HashGridEncoder* encoder;
  LevelMask mask;
};
MaskedEncoder mask_levels(const HashGridEncoder& enc, const std::function<bool(int)>& keep);

// Tape op. `tables` are the per-level leaves bound by the caller (trainable or
// not), coords is {N,2} in [0,1]^2, out_shape is {N,L*F} or {H,W,L*F} with
// H*W == N. Backward scatter-adds bilinear-weighted gradients into table rows.
Var hash_encode(Tape& tp, const HashGridConfig& cfg, const std::vector<Var>& tables,
                const Tensor& coords, const Shape& out_shape, const LevelMask* mask = nullptr);

// Fixed sinusoidal encoding: per axis and frequency k, sin(2^k pi x) and
// cos(2^k pi x); width 4*n_freqs.
Tensor nerf_encode(const Tensor& coords, int n_freqs);

// Raw normalized coordinates, width 2.
Tensor identity_encode(const Tensor& coords);

// The three encoder kinds behind one per-slide handle.
enum class EncoderKind { none, nerf_pe, hash };
EncoderKind encoder_kind_from_string(const std::string& s);
std::string to_string(EncoderKind k);

struct EncoderConfig {
  EncoderKind kind = EncoderKind::hash;
  HashGridConfig grid;
  int nerf_freqs = 10;

  int feature_width() const;
};

class SlideEncoder {
 public:
  SlideEncoder(EncoderConfig cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }
  int feature_width() const { return cfg_.feature_width(); }
  bool has_params() const { return cfg_.kind == EncoderKind::hash; }
  const HashGridEncoder& grid() const;
  std::vector<TensorPtr> params() const;

  // Bind this encoder's tables as tape leaves (empty for stateless kinds).
  std::vector<Var> bind(Tape& tp, bool trainable) const;
  Var encode(Tape& tp, const std::vector<Var>& leaves, const Tensor& coords,
             const Shape& out_shape, const LevelMask* mask = nullptr) const;

 private:
  EncoderConfig cfg_;
  std::optional<HashGridEncoder> grid_;
};

// Debug dump: one CSV row per coordinate with per-level feature columns.
std::string dump_encoding_csv(const SlideEncoder& enc, const Tensor& coords);

}  // namespace inrseg
