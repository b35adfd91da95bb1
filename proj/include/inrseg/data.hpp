#pragma once

#include <string>
#include <utility>
#include <vector>

#include "inrseg/rng.hpp"
#include "inrseg/tensor.hpp"

namespace inrseg {

// Pyramid level tags used everywhere (CLI, CSVs, manifests).
std::string level_tag(int level);        // 0 -> "base", 1 -> "base/2", 2 -> "base/4"
int level_from_tag(const std::string&);  // inverse

struct LevelData {
  Tensor image;  // {H,W,3} in [0,1]
  Tensor mask;   // {H,W} binary
};

// Image/mask pairs at Base, Base/2, ... with the shared normalized coordinate
// domain [0,w_n]x[0,h_n] (longer base side spans [0,1], aspect preserved).
struct SlidePyramid {
  std::string id;
  std::vector<LevelData> levels;
  Scalar norm_w = 1.0;
  Scalar norm_h = 1.0;

  Index base_h() const { return levels.front().image.shape()[0]; }
  Index base_w() const { return levels.front().image.shape()[1]; }
  int level_count() const { return static_cast<int>(levels.size()); }
};

// Deterministic pseudo-slide: multi-octave value-noise tissue background and
// thresholded blob-field lesions with a distinct palette/texture. The lesion
// area fraction is drawn from [fraction_min, fraction_max] and met exactly by
// quantile thresholding.
struct SyntheticSpec {
  std::uint64_t seed = 1;
  Index canvas = 512;  // square Base level
  int levels = 3;
  int blob_count_min = 2;
  int blob_count_max = 5;
  Scalar blob_scale_min = 0.08;  // radius as a fraction of the canvas
  Scalar blob_scale_max = 0.2;
  Scalar fraction_min = 0.05;
  Scalar fraction_max = 0.4;
  int background_octaves = 4;
  Scalar noise_amplitude = 0.05;

  void validate() const;
};

SlidePyramid generate_synthetic(const SyntheticSpec& spec);

// Repeated 2x2 area averaging; masks by block majority with ties -> lesion.
SlidePyramid build_pyramid(std::string id, Tensor image, Tensor mask, int n_levels);

// Pixel-center normalization from base dimensions alone; clamps onto the
// aspect-preserving domain. The pyramid form below adds bounds checks.
std::pair<Scalar, Scalar> normalize_pixel(Index base_h, Index base_w, int level, Index row,
                                          Index col);

// Pixel-center normalization at a pyramid level and its inverse. Results lie
// in [0,w_n]x[0,h_n]; out-of-bounds pixels are a domain error.
std::pair<Scalar, Scalar> normalize_coords(const SlidePyramid& p, int level, Index row,
                                           Index col);
std::pair<Index, Index> denormalize_coords(const SlidePyramid& p, int level, Scalar x, Scalar y);

// {H*W,2} pixel-center coordinates of a window in row-major order, columns
// (x,y).
Tensor window_coords(const SlidePyramid& p, int level, Index row0, Index col0, Index h, Index w);

enum class Traversal { sequential, random };

struct WindowSampler {
  Index window = 64;
  Traversal order = Traversal::sequential;
  std::uint64_t seed = 0;
  // Skip windows that are nearly white-equivalent and mask-free (off by
  // default so every pixel is visited).
  bool skip_background = false;
  Scalar white_luminance = 0.92;
  Scalar white_fraction = 0.99;
};

struct WindowBatch {
  Index row0 = 0;
  Index col0 = 0;
  Index h = 0;
  Index w = 0;
  int level = 0;
  Tensor coords;  // {h*w,2}
  Tensor image;   // {h,w,3}
  Tensor mask;    // {h,w}
};

struct Tile {
  Index row0 = 0;
  Index col0 = 0;
  Index h = 0;
  Index w = 0;
};

// Disjoint cover of an h x w level by window-sized tiles; trailing runts
// under 8 px merge into the neighboring tile.
std::vector<Tile> tile_level(Index h, Index w, Index window);

// Disjoint tiles covering the level (remainders under 8 px merge into the
// previous tile; windows larger than the level shrink to it), in sequential
// or seeded-random order. Every mask-positive pixel appears in some window.
std::vector<WindowBatch> sample_windows(const SlidePyramid& p, int level,
                                        const WindowSampler& sampler);

// Dataset on disk: PNGs per level plus a JSON manifest.
struct SlideRef {
  std::string id;
  std::string split;  // train | test
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> level_paths;  // (image, mask)
};

struct DatasetManifest {
  std::string root;
  std::vector<SlideRef> slides;
};

void save_dataset(const std::string& dir, const std::vector<SlidePyramid>& slides,
                  const std::vector<std::string>& splits,
                  const std::vector<std::uint64_t>& seeds);

// Generates one pseudo-slide per seed (base_spec with the seed swapped in)
// and saves the lot under dir with the given split tags.
DatasetManifest write_synthetic_dataset(const std::string& dir, const SyntheticSpec& base_spec,
                                        const std::vector<std::uint64_t>& train_seeds,
                                        const std::vector<std::uint64_t>& test_seeds);
DatasetManifest load_manifest(const std::string& path);
SlidePyramid load_slide(const DatasetManifest& m, const SlideRef& ref);
const SlideRef& find_slide(const DatasetManifest& m, const std::string& id);

}  // namespace inrseg
