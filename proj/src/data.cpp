#include "inrseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "inrseg/errors.hpp"
#include "inrseg/png_io.hpp"

namespace inrseg {

namespace {

namespace fs = std::filesystem;

Scalar fade(Scalar t) { return t * t * t * (t * (t * 6.0 - 15.0) + 10.0); }

// Smooth value noise: random lattice, quintic-faded bilinear interpolation,
// centered on 0 with range roughly [-0.5, 0.5].
Array value_noise(Index h, Index w, Index grid, Rng& rng) {
  MatRM lattice(grid + 1, grid + 1);
  for (Index r = 0; r <= grid; ++r) {
    for (Index c = 0; c <= grid; ++c) lattice(r, c) = rng.uniform() - 0.5;
  }
  Array out(h * w);
  for (Index r = 0; r < h; ++r) {
    const Scalar v = (static_cast<Scalar>(r) + 0.5) / static_cast<Scalar>(h) *
                     static_cast<Scalar>(grid);
    Index i = std::min(static_cast<Index>(v), grid - 1);
    const Scalar sv = fade(v - static_cast<Scalar>(i));
    for (Index c = 0; c < w; ++c) {
      const Scalar u = (static_cast<Scalar>(c) + 0.5) / static_cast<Scalar>(w) *
                       static_cast<Scalar>(grid);
      Index j = std::min(static_cast<Index>(u), grid - 1);
      const Scalar su = fade(u - static_cast<Scalar>(j));
      const Scalar top = lattice(i, j) + su * (lattice(i, j + 1) - lattice(i, j));
      const Scalar bot = lattice(i + 1, j) + su * (lattice(i + 1, j + 1) - lattice(i + 1, j));
      out[r * w + c] = top + sv * (bot - top);
    }
  }
  return out;
}

Array octave_noise(Index h, Index w, Index base_grid, int octaves, Rng& rng) {
  Array out = Array::Zero(h * w);
  Scalar amp = 1.0;
  Index grid = base_grid;
  for (int o = 0; o < octaves; ++o) {
    out += amp * value_noise(h, w, grid, rng);
    amp *= 0.55;
    grid *= 2;
  }
  return out;
}

void check_image(const Tensor& image) {
  if (image.shape().size() != 3 || image.shape()[2] != 3) {
    raise_invalid_shape("image must be {H,W,3}, got " + shape_str(image.shape()));
  }
  if ((image.data() < 0.0).any() || (image.data() > 1.0).any()) {
    raise_domain("image intensities must lie in [0,1]");
  }
}

void check_mask(const Tensor& mask, Index h, Index w) {
  if (mask.shape() != Shape{h, w}) {
    raise_invalid_shape("mask must be {H,W} matching the image, got " + shape_str(mask.shape()));
  }
  if (!((mask.data() == 0.0) || (mask.data() == 1.0)).all()) {
    raise_domain("mask must be strictly binary");
  }
}

LevelData downsample(const LevelData& src) {
  const Index h = src.image.shape()[0];
  const Index w = src.image.shape()[1];
  const Index oh = (h + 1) / 2;
  const Index ow = (w + 1) / 2;
  LevelData out;
  out.image = Tensor({oh, ow, 3});
  out.mask = Tensor({oh, ow});
  for (Index r = 0; r < oh; ++r) {
    const Index r1 = std::min(2 * r + 1, h - 1);
    for (Index c = 0; c < ow; ++c) {
      const Index c1 = std::min(2 * c + 1, w - 1);
      int total = 0;
      int lesion = 0;
      Scalar acc[3] = {0.0, 0.0, 0.0};
      for (Index rr = 2 * r; rr <= r1; ++rr) {
        for (Index cc = 2 * c; cc <= c1; ++cc) {
          for (Index ch = 0; ch < 3; ++ch) acc[ch] += src.image.data()[(rr * w + cc) * 3 + ch];
          lesion += src.mask.data()[rr * w + cc] == 1.0 ? 1 : 0;
          ++total;
        }
      }
      for (Index ch = 0; ch < 3; ++ch) {
        out.image.data()[(r * ow + c) * 3 + ch] = acc[ch] / static_cast<Scalar>(total);
      }
      // Majority vote, ties toward lesion.
      out.mask.data()[r * ow + c] = 2 * lesion >= total ? 1.0 : 0.0;
    }
  }
  return out;
}

struct Palette {
  Scalar base[3];
  Scalar swing[3];
  Scalar tint[3];
};

Tensor paint(Index n, const Array& field, const Array& tint, const Array& dots,
             Scalar dot_depth, const Palette& pal) {
  Tensor img({n, n, 3});
  for (Index i = 0; i < n * n; ++i) {
    for (Index ch = 0; ch < 3; ++ch) {
      Scalar v = pal.base[ch] + pal.swing[ch] * field[i] + pal.tint[ch] * tint[i] -
                 dot_depth * dots[i];
      img.data()[i * 3 + ch] = std::min(Scalar(1), std::max(Scalar(0), v));
    }
  }
  return img;
}

}  // namespace

std::string level_tag(int level) {
  if (level < 0) raise_domain("negative pyramid level");
  if (level == 0) return "base";
  return "base/" + std::to_string(Index(1) << level);
}

int level_from_tag(const std::string& tag) {
  if (tag == "base") return 0;
  if (tag.rfind("base/", 0) == 0) {
    const std::string rest = tag.substr(5);
    Index div = 0;
    try {
      div = static_cast<Index>(std::stoll(rest));
    } catch (const std::exception&) {
      raise_usage("bad level tag '" + tag + "'");
    }
    if (div >= 2 && (div & (div - 1)) == 0) {
      int k = 0;
      while ((Index(1) << k) < div) ++k;
      return k;
    }
  }
  raise_usage("bad level tag '" + tag + "' (expected base, base/2, base/4, ...)");
}

void SyntheticSpec::validate() const {
  if (canvas < 128) raise_invalid_config("synthetic canvas must be at least 128");
  if (levels < 1) raise_invalid_config("synthetic pyramid needs at least one level");
  if (blob_count_min < 0 || blob_count_max < blob_count_min) {
    raise_invalid_config("bad blob count range");
  }
  if (!(blob_scale_min > 0.0) || blob_scale_max < blob_scale_min) {
    raise_invalid_config("bad blob scale range");
  }
  if (!(fraction_min > 0.0) || fraction_max < fraction_min || fraction_max >= 1.0) {
    raise_invalid_config("bad lesion fraction range");
  }
}

SlidePyramid generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Index n = spec.canvas;

  Rng bg_rng(Rng::derive(spec.seed, "background"));
  const Array bg_field = octave_noise(n, n, 6, spec.background_octaves, bg_rng);
  const Array bg_tint = value_noise(n, n, 9, bg_rng);
  const Array no_dots = Array::Zero(n * n);
  // Light pink tissue marbling.
  Palette bg_pal{{0.93, 0.85, 0.90},
                 {2.2 * spec.noise_amplitude, 3.0 * spec.noise_amplitude,
                  2.6 * spec.noise_amplitude},
                 {0.03, 0.05, 0.04}};
  Tensor background = paint(n, bg_field, bg_tint, no_dots, 0.0, bg_pal);

  Rng tex_rng(Rng::derive(spec.seed, "lesion-texture"));
  const Array fine = octave_noise(n, n, 24, 3, tex_rng);
  const Array tex_tint = value_noise(n, n, 40, tex_rng);
  Array dot_field = value_noise(n, n, 72, tex_rng);
  Array dots = (dot_field > 0.21).cast<Scalar>();  // sparse nuclei-like speckle
  // Dark purple, busier texture than the background.
  Palette lesion_pal{{0.46, 0.30, 0.56}, {0.22, 0.16, 0.20}, {0.08, 0.06, 0.08}};
  Tensor lesion_tex = paint(n, fine, tex_tint, dots, 0.16, lesion_pal);

  Tensor mask({n, n});
  for (int attempt = 0;; ++attempt) {
    if (attempt >= 8) raise_generation("could not satisfy lesion fraction bounds");
    Rng blob_rng(Rng::derive(spec.seed, "blobs-" + std::to_string(attempt)));
    const int count =
        spec.blob_count_min +
        static_cast<int>(blob_rng.below(
            static_cast<std::size_t>(spec.blob_count_max - spec.blob_count_min + 1)));
    if (count == 0) {
      mask.data().setZero();
      break;
    }

    Array field = 0.25 * octave_noise(n, n, 5, 2, blob_rng);
    for (int b = 0; b < count; ++b) {
      const Scalar cx = blob_rng.uniform(0.15, 0.85);
      const Scalar cy = blob_rng.uniform(0.15, 0.85);
      const Scalar sigma = blob_rng.uniform(spec.blob_scale_min, spec.blob_scale_max);
      const Scalar inv = 1.0 / (2.0 * sigma * sigma);
      for (Index r = 0; r < n; ++r) {
        const Scalar y = (static_cast<Scalar>(r) + 0.5) / static_cast<Scalar>(n);
        for (Index c = 0; c < n; ++c) {
          const Scalar x = (static_cast<Scalar>(c) + 0.5) / static_cast<Scalar>(n);
          const Scalar d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          field[r * n + c] += std::exp(-d2 * inv);
        }
      }
    }

    const Scalar target = blob_rng.uniform(spec.fraction_min, spec.fraction_max);
    const Index want = static_cast<Index>(std::llround(target * static_cast<Scalar>(n * n)));
    std::vector<Scalar> sorted(field.data(), field.data() + field.size());
    std::nth_element(sorted.begin(), sorted.begin() + (want - 1), sorted.end(),
                     std::greater<Scalar>());
    const Scalar threshold = sorted[static_cast<std::size_t>(want - 1)];
    mask = Tensor({n, n}, (field >= threshold).cast<Scalar>());

    const Scalar fraction = mask.data().mean();
    if (fraction >= spec.fraction_min && fraction <= spec.fraction_max) break;
  }

  Tensor image({n, n, 3});
  for (Index i = 0; i < n * n; ++i) {
    const Scalar m = mask.data()[i];
    for (Index ch = 0; ch < 3; ++ch) {
      image.data()[i * 3 + ch] =
          (1.0 - m) * background.data()[i * 3 + ch] + m * lesion_tex.data()[i * 3 + ch];
    }
  }

  return build_pyramid("s" + std::to_string(spec.seed), std::move(image), std::move(mask),
                       spec.levels);
}

SlidePyramid build_pyramid(std::string id, Tensor image, Tensor mask, int n_levels) {
  check_image(image);
  const Index h = image.shape()[0];
  const Index w = image.shape()[1];
  check_mask(mask, h, w);
  if (n_levels < 1) raise_invalid_config("pyramid needs at least one level");
  const Index min_side = Index(1) << (n_levels - 1);
  if (h < min_side || w < min_side) {
    raise_invalid_shape("image too small for " + std::to_string(n_levels) + " pyramid levels");
  }

  SlidePyramid p;
  p.id = std::move(id);
  const Scalar longer = static_cast<Scalar>(std::max(h, w));
  p.norm_w = static_cast<Scalar>(w) / longer;
  p.norm_h = static_cast<Scalar>(h) / longer;
  p.levels.push_back(LevelData{std::move(image), std::move(mask)});
  for (int k = 1; k < n_levels; ++k) p.levels.push_back(downsample(p.levels.back()));
  return p;
}

std::pair<Scalar, Scalar> normalize_pixel(Index base_h, Index base_w, int level, Index row,
                                          Index col) {
  const Scalar scale = static_cast<Scalar>(Index(1) << level);
  const Scalar longer = static_cast<Scalar>(std::max(base_h, base_w));
  // Ceil-padded edge pixels of coarse levels can stick out past the base
  // extent; clamp them onto the shared domain.
  const Scalar x = std::min((static_cast<Scalar>(col) + 0.5) * scale / longer,
                            static_cast<Scalar>(base_w) / longer);
  const Scalar y = std::min((static_cast<Scalar>(row) + 0.5) * scale / longer,
                            static_cast<Scalar>(base_h) / longer);
  return {x, y};
}

std::pair<Scalar, Scalar> normalize_coords(const SlidePyramid& p, int level, Index row,
                                           Index col) {
  if (level < 0 || level >= p.level_count()) raise_domain("pyramid level out of range");
  const Shape& sh = p.levels[static_cast<std::size_t>(level)].image.shape();
  if (row < 0 || col < 0 || row >= sh[0] || col >= sh[1]) {
    raise_domain("pixel outside level bounds");
  }
  return normalize_pixel(p.base_h(), p.base_w(), level, row, col);
}

std::pair<Index, Index> denormalize_coords(const SlidePyramid& p, int level, Scalar x, Scalar y) {
  if (level < 0 || level >= p.level_count()) raise_domain("pyramid level out of range");
  if (x < 0.0 || y < 0.0 || x > p.norm_w || y > p.norm_h) {
    raise_domain("normalized coordinate outside the slide domain");
  }
  const Shape& sh = p.levels[static_cast<std::size_t>(level)].image.shape();
  const Scalar scale = static_cast<Scalar>(Index(1) << level);
  const Scalar longer = static_cast<Scalar>(std::max(p.base_h(), p.base_w()));
  Index col = static_cast<Index>(std::floor(x * longer / scale));
  Index row = static_cast<Index>(std::floor(y * longer / scale));
  col = std::min(std::max(col, Index(0)), sh[1] - 1);
  row = std::min(std::max(row, Index(0)), sh[0] - 1);
  return {row, col};
}

Tensor window_coords(const SlidePyramid& p, int level, Index row0, Index col0, Index h,
                     Index w) {
  Tensor coords({h * w, 2});
  for (Index r = 0; r < h; ++r) {
    for (Index c = 0; c < w; ++c) {
      const auto [x, y] = normalize_coords(p, level, row0 + r, col0 + c);
      coords.data()[(r * w + c) * 2] = x;
      coords.data()[(r * w + c) * 2 + 1] = y;
    }
  }
  return coords;
}

std::vector<Tile> tile_level(Index h, Index w, Index window) {
  if (window < 8) raise_invalid_config("window size must be at least 8");
  auto tile_axis = [&](Index extent) {
    std::vector<std::pair<Index, Index>> tiles;  // (start, size)
    const Index win = std::min(window, extent);
    Index start = 0;
    while (start < extent) {
      Index size = std::min(win, extent - start);
      // A trailing runt under 8 px merges into this tile instead of becoming
      // its own window.
      if (extent - start - size > 0 && extent - start - size < 8) size = extent - start;
      tiles.emplace_back(start, size);
      start += size;
    }
    return tiles;
  };

  std::vector<Tile> out;
  for (const auto& [r0, th] : tile_axis(h)) {
    for (const auto& [c0, tw] : tile_axis(w)) out.push_back(Tile{r0, c0, th, tw});
  }
  return out;
}

std::vector<WindowBatch> sample_windows(const SlidePyramid& p, int level,
                                        const WindowSampler& sampler) {
  if (level < 0 || level >= p.level_count()) raise_domain("pyramid level out of range");
  const LevelData& data = p.levels[static_cast<std::size_t>(level)];
  const Index h = data.image.shape()[0];
  const Index w = data.image.shape()[1];

  std::vector<WindowBatch> out;
  for (const Tile& t : tile_level(h, w, sampler.window)) {
    WindowBatch batch;
    batch.row0 = t.row0;
    batch.col0 = t.col0;
    batch.h = t.h;
    batch.w = t.w;
    batch.level = level;
    batch.image = Tensor({t.h, t.w, 3});
    batch.mask = Tensor({t.h, t.w});
    for (Index r = 0; r < t.h; ++r) {
      for (Index c = 0; c < t.w; ++c) {
        const Index src = (t.row0 + r) * w + (t.col0 + c);
        for (Index ch = 0; ch < 3; ++ch) {
          batch.image.data()[(r * t.w + c) * 3 + ch] = data.image.data()[src * 3 + ch];
        }
        batch.mask.data()[r * t.w + c] = data.mask.data()[src];
      }
    }
    if (sampler.skip_background && (batch.mask.data() == 0.0).all()) {
      CMapMat px(batch.image.data().data(), t.h * t.w, 3);
      const Scalar white =
          (px.rowwise().mean().array() > sampler.white_luminance).cast<Scalar>().mean();
      if (white > sampler.white_fraction) continue;
    }
    batch.coords = window_coords(p, level, t.row0, t.col0, t.h, t.w);
    out.push_back(std::move(batch));
  }

  if (sampler.order == Traversal::random) {
    Rng rng(Rng::derive(sampler.seed, "window-order"));
    rng.shuffle(out);
  }
  return out;
}

void save_dataset(const std::string& dir, const std::vector<SlidePyramid>& slides,
                  const std::vector<std::string>& splits,
                  const std::vector<std::uint64_t>& seeds) {
  if (slides.size() != splits.size() || slides.size() != seeds.size()) {
    raise_usage("save_dataset needs one split tag and seed per slide");
  }
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["slides"] = nlohmann::json::array();
  for (std::size_t i = 0; i < slides.size(); ++i) {
    const SlidePyramid& p = slides[i];
    const std::string sub = "slides/" + p.id;
    fs::create_directories(fs::path(dir) / sub);
    nlohmann::json entry;
    entry["id"] = p.id;
    entry["split"] = splits[i];
    entry["seed"] = seeds[i];
    entry["levels"] = nlohmann::json::array();
    for (int k = 0; k < p.level_count(); ++k) {
      const std::string img = sub + "/level" + std::to_string(k) + "_image.png";
      const std::string msk = sub + "/level" + std::to_string(k) + "_mask.png";
      save_png_rgb((fs::path(dir) / img).string(), p.levels[static_cast<std::size_t>(k)].image);
      save_png_mask((fs::path(dir) / msk).string(), p.levels[static_cast<std::size_t>(k)].mask);
      nlohmann::json lv;
      lv["tag"] = level_tag(k);
      lv["image"] = img;
      lv["mask"] = msk;
      entry["levels"].push_back(std::move(lv));
    }
    manifest["slides"].push_back(std::move(entry));
  }
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) raise_io("cannot write dataset manifest in '" + dir + "'");
  out << manifest.dump(2) << '\n';
}

DatasetManifest write_synthetic_dataset(const std::string& dir, const SyntheticSpec& base_spec,
                                        const std::vector<std::uint64_t>& train_seeds,
                                        const std::vector<std::uint64_t>& test_seeds) {
  for (std::uint64_t s : train_seeds) {
    for (std::uint64_t t : test_seeds) {
      if (s == t) raise_usage("train and test seed ranges overlap at " + std::to_string(s));
    }
  }
  std::vector<SlidePyramid> slides;
  std::vector<std::string> splits;
  std::vector<std::uint64_t> seeds;
  auto emit = [&](const std::vector<std::uint64_t>& list, const char* split) {
    for (std::uint64_t seed : list) {
      SyntheticSpec spec = base_spec;
      spec.seed = seed;
      slides.push_back(generate_synthetic(spec));
      splits.emplace_back(split);
      seeds.push_back(seed);
    }
  };
  emit(train_seeds, "train");
  emit(test_seeds, "test");
  save_dataset(dir, slides, splits, seeds);
  return load_manifest((fs::path(dir) / "manifest.json").string());
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise_io("cannot open manifest '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    raise_io("bad manifest '" + path + "': " + e.what());
  }
  DatasetManifest m;
  m.root = fs::path(path).parent_path().string();
  for (const auto& entry : j.at("slides")) {
    SlideRef ref;
    ref.id = entry.at("id").get<std::string>();
    ref.split = entry.at("split").get<std::string>();
    ref.seed = entry.value("seed", std::uint64_t(0));
    for (const auto& lv : entry.at("levels")) {
      ref.level_paths.emplace_back(lv.at("image").get<std::string>(),
                                   lv.at("mask").get<std::string>());
    }
    if (ref.level_paths.empty()) raise_io("slide '" + ref.id + "' lists no levels");
    m.slides.push_back(std::move(ref));
  }
  return m;
}

SlidePyramid load_slide(const DatasetManifest& m, const SlideRef& ref) {
  SlidePyramid p;
  p.id = ref.id;
  for (const auto& [img_rel, msk_rel] : ref.level_paths) {
    LevelData lv;
    lv.image = load_png_rgb((fs::path(m.root) / img_rel).string());
    lv.mask = load_png_mask((fs::path(m.root) / msk_rel).string());
    if (lv.mask.shape() != Shape{lv.image.shape()[0], lv.image.shape()[1]}) {
      raise_io("image/mask size mismatch for slide '" + ref.id + "'");
    }
    p.levels.push_back(std::move(lv));
  }
  const Index h = p.base_h();
  const Index w = p.base_w();
  for (int k = 1; k < p.level_count(); ++k) {
    const Shape& sh = p.levels[static_cast<std::size_t>(k)].image.shape();
    const Index want_h = (h + (Index(1) << k) - 1) >> k;
    const Index want_w = (w + (Index(1) << k) - 1) >> k;
    if (sh[0] != want_h || sh[1] != want_w) {
      raise_io("slide '" + ref.id + "' level " + std::to_string(k) + " has wrong dimensions");
    }
  }
  const Scalar longer = static_cast<Scalar>(std::max(h, w));
  p.norm_w = static_cast<Scalar>(w) / longer;
  p.norm_h = static_cast<Scalar>(h) / longer;
  return p;
}

const SlideRef& find_slide(const DatasetManifest& m, const std::string& id) {
  for (const SlideRef& ref : m.slides) {
    if (ref.id == id) return ref;
  }
  raise_usage("slide '" + id + "' not found in the dataset manifest");
}

}  // namespace inrseg
