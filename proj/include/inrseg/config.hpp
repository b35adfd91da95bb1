#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "inrseg/encoding.hpp"
#include "inrseg/model.hpp"
#include "inrseg/optim.hpp"

namespace inrseg {

// Fully resolved run configuration. A run directory is reproducible from this
// plus the seed; the resolved JSON is written before any work starts.
struct RunConfig {
  std::string preset = "desk-scale";  // desk-scale | paper-scale
  std::uint64_t seed = 1;
  std::string run_dir = "runs/default";
  std::string manifest = "data/manifest.json";

  // data
  Index canvas = 512;
  int pyramid_levels = 3;
  int train_slides = 4;
  int test_slides = 8;
  Index window = 64;
  std::string window_order = "sequential";  // sequential | random
  bool skip_background = false;

  // encoder
  std::string encoder_kind = "hash";  // none | nerf-pe | hash
  int nerf_freqs = 10;
  HashGridConfig grid;

  // model (d_z is derived from the encoder)
  int conv_width = 32;
  int conv_layers = 3;
  int point_width = 32;
  int point_layers = 3;
  int fused_width = 64;
  int head_width = 32;
  std::vector<int> head_dilations = {1, 2, 4};

  // training
  int total_epochs = 48;
  int stage1_epochs = 32;
  Scalar lr = 1e-3;
  Scalar adam_beta1 = 0.9;
  Scalar adam_beta2 = 0.999;
  Scalar adam_eps = 1e-8;
  // Early exit for stage 1 once slide-mean MSE drops below this (0 disables).
  Scalar stage1_target_mse = 0.0;

  // inference-time optimization
  int ito_max_epochs = 20;
  Scalar ito_mse_threshold = 0.002;
  int ito_warmup_epochs = 5;
  Scalar ito_divergence_ratio = 1.30;
  Scalar ema_decay = 0.99;

  // experiments
  int decouple_split = -1;  // -1: direct/hashed boundary
  Index spectrum_patch = 64;
  bool dice_squared_denom = false;

  void validate() const;
  EncoderConfig encoder_config() const;
  ModelDims model_dims() const;
  AdamConfig adam_config() const;
};

RunConfig make_preset(const std::string& name);

// Dotted-key overrides ("train.lr=0.01", "encoder.kind=none") applied on top
// of a preset or config file; values parse as JSON literals, falling back to
// strings.
RunConfig resolve_config(const std::string& preset_or_path,
                         const std::vector<std::string>& overrides);

nlohmann::json to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);
void save_config(const std::string& path, const RunConfig& cfg);

// FNV-1a over the canonical serialized form; stored in checkpoints so resumes
// can reject mismatched configs.
std::string config_hash(const RunConfig& cfg);

// Keys whose values differ between two configs (dotted paths); the ablation
// fairness assertion requires the diff to touch only encoder.* keys.
std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b);

// Run directories resolve under $INRSEG_RUN_ROOT when set and the path is
// relative.
std::string resolve_run_dir(const std::string& run_dir);

}  // namespace inrseg
