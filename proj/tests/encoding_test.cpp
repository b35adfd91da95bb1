#include <doctest.h>

#include <cmath>
#include <set>
#include <vector>

#include "inrseg/encoding.hpp"
#include "inrseg/ops.hpp"

using namespace inrseg;

namespace {

HashGridConfig small_grid(int levels, int base_res, Index table_size, int features = 2) {
  HashGridConfig cfg;
  cfg.levels = levels;
  cfg.base_resolution = base_res;
  cfg.table_size = table_size;
  cfg.features = features;
  return cfg;
}

Tensor coords_of(std::initializer_list<std::pair<Scalar, Scalar>> pts) {
  Tensor c({static_cast<Index>(pts.size()), 2});
  Index i = 0;
  for (auto [x, y] : pts) {
    c.data()[2 * i] = x;
    c.data()[2 * i + 1] = y;
    ++i;
  }
  return c;
}

std::vector<Var> bind_tables(Tape& tp, const HashGridEncoder& enc, bool trainable) {
  std::vector<Var> vars;
  for (const TensorPtr& t : enc.tables()) vars.push_back(tp.leaf(t, trainable));
  return vars;
}

Tensor encode_value(const HashGridEncoder& enc, const Tensor& coords,
                    const LevelMask* mask = nullptr) {
  Tape tp;
  const std::vector<Var> tables = bind_tables(tp, enc, false);
  const Index n = coords.shape()[0];
  const Var out =
      hash_encode(tp, enc.config(), tables, coords, {n, encoded_width(enc.config())}, mask);
  return tp.value(out);
}

}  // namespace

TEST_CASE("level resolution schedule and direct/hashed boundary") {
  HashGridConfig desk;  // defaults: L=12, R0=8, s=1.5, T=2^14, F=2
  const std::vector<Index> expect = {8, 12, 18, 27, 40, 60, 91, 136, 205, 307, 461, 691};
  for (int l = 0; l < desk.levels; ++l) {
    CHECK(level_resolution(desk, l) == expect[static_cast<std::size_t>(l)]);
    if (l > 0) CHECK(level_resolution(desk, l) >= level_resolution(desk, l - 1));
    const Index side = expect[static_cast<std::size_t>(l)] + 1;
    const bool direct = side * side <= desk.table_size;
    CHECK(level_is_direct(desk, l) == direct);
    CHECK(level_table_rows(desk, l) == (direct ? side * side : desk.table_size));
  }
  // (91+1)^2 = 8464 fits 2^14; (136+1)^2 = 18769 does not.
  CHECK(level_is_direct(desk, 6));
  CHECK_FALSE(level_is_direct(desk, 7));
  CHECK(encoded_width(desk) == 24);

  CHECK_THROWS_AS(level_resolution(desk, 12), Error);
  CHECK_THROWS_AS(level_resolution(desk, -1), Error);
}

TEST_CASE("encoded width for the full-scale grid is 42") {
  const HashGridConfig full = small_grid(21, 16, Index(1) << 21);
  CHECK(encoded_width(full) == 42);

  EncoderConfig ec;
  ec.kind = EncoderKind::hash;
  ec.grid = full;
  CHECK(ec.feature_width() == 42);
}

TEST_CASE("spatial hash: examples, range, and measured collisions") {
  CHECK(spatial_hash(0, 0, Index(1) << 14) == 0);
  CHECK(spatial_hash(123, 456, 1024) == spatial_hash(123, 456, 1024));

  // Exhaustive vertex enumeration for R=256 against a 2^14 table: the map
  // stays in range and collides (66049 vertices into 16384 rows).
  const Index T = Index(1) << 14;
  std::set<Index> seen;
  for (Index v0 = 0; v0 <= 256; ++v0) {
    for (Index v1 = 0; v1 <= 256; ++v1) {
      const Index h = spatial_hash(v0, v1, T);
      CHECK(h >= 0);
      CHECK(h < T);
      seen.insert(h);
    }
  }
  CHECK(static_cast<Index>(seen.size()) < 257 * 257);

  CHECK_THROWS_AS(spatial_hash(1, 2, 100), Error);  // not a power of two
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(small_grid(0, 8, 16).validate(), Error);
  CHECK_THROWS_AS(small_grid(2, 0, 16).validate(), Error);
  CHECK_THROWS_AS(small_grid(2, 8, 100).validate(), Error);
  CHECK_THROWS_AS(small_grid(2, 8, 16, 0).validate(), Error);
  HashGridConfig flat = small_grid(2, 8, 16);
  flat.level_scale = 1.0;
  CHECK_THROWS_AS(flat.validate(), Error);
}

TEST_CASE("bilinear partition of unity within 1e-12") {
  Rng rng(11);
  HashGridEncoder enc(HashGridConfig{}, rng);
  for (int l = 0; l < enc.levels(); ++l) enc.table(l)->data().setConstant(1.0);

  Rng crng(12);
  Tensor coords({64, 2});
  for (Index i = 0; i < coords.size(); ++i) coords.data()[i] = crng.uniform();
  const Tensor out = encode_value(enc, coords);
  for (Index i = 0; i < out.size(); ++i) CHECK(std::abs(out.data()[i] - 1.0) <= 1e-12);
}

TEST_CASE("vertex exactness and cell-center averaging") {
  Rng rng(5);
  HashGridEncoder enc(small_grid(1, 8, Index(1) << 14), rng);  // direct, 81 rows
  const Tensor& table = *enc.table(0);

  // A query exactly on a grid vertex reproduces that vertex's table row.
  const Tensor at_vertex = encode_value(enc, coords_of({{3.0 / 8.0, 5.0 / 8.0}}));
  bool matched = false;
  for (Index r = 0; r < table.shape()[0]; ++r) {
    if (at_vertex.data()[0] == table.data()[2 * r] &&
        at_vertex.data()[1] == table.data()[2 * r + 1]) {
      matched = true;
      break;
    }
  }
  CHECK(matched);

  // A cell-center query averages the four corner encodings (weights 0.25).
  const Tensor corners = encode_value(
      enc, coords_of({{3.0 / 8, 5.0 / 8}, {4.0 / 8, 5.0 / 8}, {3.0 / 8, 6.0 / 8}, {4.0 / 8, 6.0 / 8}}));
  const Tensor center = encode_value(enc, coords_of({{3.5 / 8.0, 5.5 / 8.0}}));
  for (Index f = 0; f < 2; ++f) {
    Scalar mean = 0.0;
    for (Index k = 0; k < 4; ++k) mean += corners.data()[2 * k + f];
    mean /= 4.0;
    CHECK(center.data()[f] == doctest::Approx(mean).epsilon(1e-12));
  }
}

TEST_CASE("direct level vertex map is injective") {
  Rng rng(6);
  HashGridEncoder enc(small_grid(1, 8, Index(1) << 14), rng);
  REQUIRE(level_is_direct(enc.config(), 0));
  std::set<std::pair<Scalar, Scalar>> features;
  for (Index i = 0; i <= 8; ++i) {
    for (Index j = 0; j <= 8; ++j) {
      const Tensor f = encode_value(
          enc, coords_of({{static_cast<Scalar>(i) / 8.0, static_cast<Scalar>(j) / 8.0}}));
      features.insert({f.data()[0], f.data()[1]});
    }
  }
  CHECK(features.size() == 81);
}

TEST_CASE("queries at 1.0 clamp into the last cell; outside raises") {
  Rng rng(7);
  HashGridEncoder enc(HashGridConfig{}, rng);
  CHECK_NOTHROW(encode_value(enc, coords_of({{1.0, 1.0}, {0.0, 1.0}, {1.0, 0.0}})));
  CHECK_THROWS_AS(encode_value(enc, coords_of({{1.0 + 1e-9, 0.5}})), Error);
  CHECK_THROWS_AS(encode_value(enc, coords_of({{0.5, -1e-9}})), Error);
}

TEST_CASE("encoding is continuous across cell boundaries") {
  Rng rng(8);
  HashGridEncoder enc(HashGridConfig{}, rng);
  for (int l = 0; l < enc.levels(); ++l) {
    Rng tr(100 + static_cast<std::uint64_t>(l));
    Tensor& t = *enc.table(l);
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = tr.uniform(-0.5, 0.5);
  }
  const Scalar delta = 1e-9;
  // Interior points plus points straddling level-0..2 vertex lines.
  const std::vector<Scalar> xs = {0.3141, 0.125 - delta / 2, 0.250 - delta / 2, 0.5 - delta / 2,
                                  0.77};
  for (Scalar x : xs) {
    const Tensor a = encode_value(enc, coords_of({{x, 0.4321}}));
    const Tensor b = encode_value(enc, coords_of({{x + delta, 0.4321}}));
    Scalar diff = 0.0;
    for (Index i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
    CHECK(diff < 1e-5);
  }
}

TEST_CASE("level masks zero dropped features and their gradients") {
  Rng rng(9);
  HashGridEncoder enc(small_grid(3, 4, Index(1) << 10), rng);
  for (int l = 0; l < 3; ++l) {
    Rng tr(200 + static_cast<std::uint64_t>(l));
    Tensor& t = *enc.table(l);
    for (Index i = 0; i < t.size(); ++i) t.data()[i] = tr.uniform(-0.5, 0.5);
  }
  Rng crng(10);
  Tensor coords({6, 2});
  for (Index i = 0; i < coords.size(); ++i) coords.data()[i] = crng.uniform();

  const Tensor full = encode_value(enc, coords);

  const MaskedEncoder none = mask_levels(enc, [](int) { return false; });
  const Tensor zero = encode_value(enc, coords, &none.mask);
  CHECK(zero.shape() == full.shape());
  for (Index i = 0; i < zero.size(); ++i) CHECK(zero.data()[i] == 0.0);

  const MaskedEncoder all = mask_levels(enc, [](int) { return true; });
  const Tensor same = encode_value(enc, coords, &all.mask);
  for (Index i = 0; i < same.size(); ++i) CHECK(same.data()[i] == full.data()[i]);

  // Low and high halves have disjoint support and sum to the full encoding.
  const MaskedEncoder low = mask_levels(enc, [](int l) { return l < 1; });
  const MaskedEncoder high = mask_levels(enc, [](int l) { return l >= 1; });
  const Tensor lo = encode_value(enc, coords, &low.mask);
  const Tensor hi = encode_value(enc, coords, &high.mask);
  for (Index i = 0; i < full.size(); ++i)
    CHECK(lo.data()[i] + hi.data()[i] == doctest::Approx(full.data()[i]).epsilon(1e-15));

  // Gradients: dropped level receives exactly zero, kept levels do not.
  Tape tp;
  const std::vector<Var> tables = bind_tables(tp, enc, true);
  LevelMask mask{{true, false, true}};
  const Var out = hash_encode(tp, enc.config(), tables, coords, {6, 6}, &mask);
  tp.backward(sum(tp, out));
  CHECK(tp.grad(tables[0]).abs().maxCoeff() > 0.0);
  // The dropped level is skipped entirely: no gradient buffer is touched.
  CHECK_FALSE(tp.has_grad(tables[1]));
  CHECK(tp.grad(tables[2]).abs().maxCoeff() > 0.0);
  // Masked-out feature columns of the forward value are exactly zero.
  const Tensor& masked = tp.value(out);
  for (Index i = 0; i < 6; ++i)
    for (Index f = 2; f < 4; ++f) CHECK(masked.data()[i * 6 + f] == 0.0);
}

TEST_CASE("table gradients match finite differences, including collisions") {
  // T=2 forces two vertices of every queried cell onto the same row.
  for (Index table_size : {Index(2), Index(16)}) {
    Rng rng(20 + static_cast<std::uint64_t>(table_size));
    HashGridEncoder enc(small_grid(1, 64, table_size), rng);
    REQUIRE_FALSE(level_is_direct(enc.config(), 0));
    Tensor& table = *enc.table(0);
    Rng tr(21);
    for (Index i = 0; i < table.size(); ++i) table.data()[i] = tr.uniform(-0.5, 0.5);

    Rng crng(22);
    Tensor coords({5, 2});
    for (Index i = 0; i < coords.size(); ++i) coords.data()[i] = crng.uniform();

    // Weighted sum so gradient entries differ per output column.
    Tensor weights({5, 2});
    for (Index i = 0; i < weights.size(); ++i) weights.data()[i] = crng.uniform(-1.0, 1.0);

    auto loss_value = [&]() {
      Tape tp;
      const Var tv = tp.leaf(enc.table(0), true);
      const Var out = hash_encode(tp, enc.config(), {tv}, coords, {5, 2});
      const Var w = tp.constant(weights);
      const Var l = sum(tp, mul(tp, out, w));
      return tp.value(l).value();
    };

    Tape tp;
    const Var tv = tp.leaf(enc.table(0), true);
    const Var out = hash_encode(tp, enc.config(), {tv}, coords, {5, 2});
    const Var w = tp.constant(weights);
    tp.backward(sum(tp, mul(tp, out, w)));
    const Array grad = tp.grad(tv);

    const Scalar h = 1e-6;
    for (Index i = 0; i < table.size(); ++i) {
      const Scalar keep = table.data()[i];
      table.data()[i] = keep + h;
      const Scalar up = loss_value();
      table.data()[i] = keep - h;
      const Scalar dn = loss_value();
      table.data()[i] = keep;
      const Scalar fd = (up - dn) / (2 * h);
      CHECK(grad[i] == doctest::Approx(fd).epsilon(1e-6));
    }
    enc.table(0)->drop_grad();
  }
}

TEST_CASE("nerf encoding values and width") {
  const Tensor at0 = nerf_encode(coords_of({{0.0, 0.0}}), 10);
  CHECK(at0.shape() == Shape({1, 40}));
  for (Index k = 0; k < 40; k += 2) {
    CHECK(at0.data()[k] == 0.0);                             // sin terms
    CHECK(at0.data()[k + 1] == doctest::Approx(1.0).epsilon(1e-15));  // cos terms
  }

  // x=(0.5, 0), k=0 on axis 0: sin(pi/2)=1, cos(pi/2)=0.
  const Tensor half = nerf_encode(coords_of({{0.5, 0.0}}), 2);
  CHECK(half.shape() == Shape({1, 8}));
  CHECK(half.data()[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(half.data()[1]) < 1e-15);
  // k=1 on axis 0: sin(pi)=0, cos(pi)=-1.
  CHECK(std::abs(half.data()[2]) < 1e-12);
  CHECK(half.data()[3] == doctest::Approx(-1.0).epsilon(1e-15));

  CHECK_THROWS_AS(nerf_encode(coords_of({{1.5, 0.0}}), 4), Error);
  CHECK_THROWS_AS(nerf_encode(coords_of({{0.5, 0.5}}), 0), Error);
}

TEST_CASE("identity encoding passes coordinates through") {
  const Tensor out = identity_encode(coords_of({{0.25, 0.75}}));
  CHECK(out.shape() == Shape({1, 2}));
  CHECK(out.data()[0] == 0.25);
  CHECK(out.data()[1] == 0.75);
}

TEST_CASE("slide encoder fronts all three kinds") {
  EncoderConfig none;
  none.kind = EncoderKind::none;
  CHECK(none.feature_width() == 2);
  EncoderConfig pe;
  pe.kind = EncoderKind::nerf_pe;
  pe.nerf_freqs = 10;
  CHECK(pe.feature_width() == 40);

  SlideEncoder se(none, 1);
  CHECK_FALSE(se.has_params());
  CHECK(se.params().empty());

  SlideEncoder hash_enc(EncoderConfig{}, 2);
  CHECK(hash_enc.has_params());
  CHECK(hash_enc.params().size() == 12);

  // Identical seeds give identical tables; different seeds differ.
  SlideEncoder again(EncoderConfig{}, 2);
  SlideEncoder other(EncoderConfig{}, 3);
  CHECK((hash_enc.grid().table(0)->data() == again.grid().table(0)->data()).all());
  CHECK_FALSE((hash_enc.grid().table(0)->data() == other.grid().table(0)->data()).all());

  CHECK(encoder_kind_from_string("nerf-pe") == EncoderKind::nerf_pe);
  CHECK(to_string(EncoderKind::hash) == "hash");
  CHECK_THROWS_AS(encoder_kind_from_string("fourier"), Error);
}

TEST_CASE("encoding dump emits one row per coordinate") {
  SlideEncoder se(EncoderConfig{}, 4);
  const std::string csv = dump_encoding_csv(se, coords_of({{0.1, 0.2}, {0.9, 0.4}}));
  int lines = 0;
  for (char c : csv)
    if (c == '\n') ++lines;
  CHECK(lines == 3);  // header + 2 rows
  CHECK(csv.find("x,y") == 0);
}
