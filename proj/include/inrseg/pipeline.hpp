#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "inrseg/config.hpp"
#include "inrseg/data.hpp"
#include "inrseg/encoding.hpp"
#include "inrseg/model.hpp"
#include "inrseg/objectives.hpp"
#include "inrseg/optim.hpp"

namespace inrseg {

// ---- early stopping -------------------------------------------------------

struct ItoConfig {
  int max_epochs = 20;
  Scalar mse_threshold = 0.002;
  int warmup_epochs = 5;
  Scalar divergence_ratio = 1.30;
  Scalar ema_decay = 0.99;
  int level = 0;  // pyramid level the optimization runs at

  void validate() const;
};

ItoConfig ito_config_from(const RunConfig& cfg, int level);

struct StopDecision {
  bool stop = false;
  std::string reason = "none";  // threshold | divergence | max-epochs | none
  int epoch = 0;                // 1-based index of the epoch judged
  Scalar current_mse = 0.0;
  Scalar min_mse = 0.0;
};

// Dual-criterion rule over the epoch-mean MSE history: threshold every epoch,
// divergence only after the warmup, max-epochs as the fallback; threshold
// takes precedence within an epoch.
StopDecision check_stop(const std::vector<Scalar>& history, const ItoConfig& cfg);

// ---- training -------------------------------------------------------------

struct TrainSlide {
  SlidePyramid pyramid;
  std::shared_ptr<SlideEncoder> encoder;
};

// A row of the training log: per-slide and mean losses per epoch. eval_mse
// holds the forward-only post-epoch reconstruction MSE when stage 1 runs with
// a target threshold (-1 otherwise).
struct EpochRecord {
  int stage = 0;
  int epoch = 0;  // 1-based within the stage
  std::vector<std::pair<std::string, Scalar>> slide_losses;
  Scalar mean_loss = 0.0;
  Scalar eval_mse = -1.0;
};

struct TrainState {
  RunConfig cfg;
  ModelParams model;
  std::vector<TrainSlide> slides;
  int stage = 1;         // stage currently in progress (or about to start)
  int epochs_done = 0;   // completed epochs within the current stage
  std::vector<Scalar> stage1_history;  // epoch-mean reconstruction MSE
  std::vector<Scalar> stage2_history;  // epoch-mean BCE+Dice
  std::unique_ptr<AdamState> adam;     // optimizer of the current stage
  std::string diagnostics_dir;         // where NaN aborts dump the window
  // Invoked after every completed epoch (checkpointing hook).
  std::function<void(const TrainState&, const EpochRecord&)> on_epoch;
};

// Fresh state: model init + one encoder per training slide, all seeded from
// cfg.seed.
TrainState init_train_state(const RunConfig& cfg, const DatasetManifest& manifest);

// Stage 1: slide encoders + decoder + rec_head on reconstruction MSE over
// Base-level windows, round-robin across slides per window batch; seg_head
// frozen (verified bitwise per epoch). Stops early once the slide-mean MSE
// falls below cfg.stage1_target_mse (0 disables). NaN loss aborts with a
// diagnostic dump.
std::vector<EpochRecord> train_stage1(TrainState& st);

// Stage 2: only seg_head trains, on BCE + Dice against the Base-level masks;
// everything else is frozen (verified bitwise per epoch).
std::vector<EpochRecord> train_stage2(TrainState& st);

// ---- checkpointing --------------------------------------------------------

void save_train_checkpoint(const std::string& path, const TrainState& st);
TrainState load_train_checkpoint(const std::string& path, const RunConfig& cfg,
                                 const DatasetManifest& manifest);

// ---- inference-time optimization ------------------------------------------

// Image-only view of a slide: the ITO path cannot read masks by construction.
struct SlideImages {
  std::string id;
  std::vector<Tensor> images;  // per level, {H,W,3}
};
SlideImages images_only(const SlidePyramid& p);

struct ItoResult {
  std::shared_ptr<SlideEncoder> encoder;  // EMA weights swapped in
  std::vector<Scalar> trajectory;         // epoch-mean MSE
  StopDecision decision;
};

// Reconstruction-only adaptation of a fresh encoder for one slide at one
// level; all model groups frozen and verified unchanged. encoder_seed fixes
// the init (training uses the same scheme).
ItoResult run_ito(const SlideImages& slide, const ModelParams& model, const RunConfig& cfg,
                  const ItoConfig& ito, std::uint64_t encoder_seed);

// ---- dense inference ------------------------------------------------------

struct DenseOutputs {
  Tensor reconstruction;  // {H,W,3}
  Tensor lesion_prob;     // {H,W}
  Tensor mask;            // {H,W} argmax
};

// Tiles the level, forwards every window, stitches. level_mask selects hash
// levels for the decoupling study.
DenseOutputs infer_dense(const SlideImages& slide, int level, const ModelParams& model,
                         const SlideEncoder& encoder, Index window,
                         const LevelMask* level_mask = nullptr);

// ---- run directory --------------------------------------------------------

struct RunPaths {
  std::string root;
  std::string config_json;
  std::string checkpoint_dir;
  std::string train_state_ckpt;
  std::string train_log_csv;
  std::string metrics_csv;
  std::string outputs_dir;
};

// Resolves under $INRSEG_RUN_ROOT and creates the directories.
RunPaths prepare_run_dir(const RunConfig& cfg);
RunPaths run_paths(const RunConfig& cfg);  // no creation

std::string slide_output_dir(const RunPaths& paths, const std::string& slide_id, int level);

void write_epoch_log(const std::string& path, const std::vector<EpochRecord>& records);
void append_metric_row(std::string& csv, const std::string& slide, int level,
                       const DiceReport& dice, Scalar psnr_db);
std::string metrics_csv_header();

// Full `train` command body: data load, both stages, checkpoints, logs.
void run_train_command(const RunConfig& cfg, bool resume);

}  // namespace inrseg
