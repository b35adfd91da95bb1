#pragma once

#include <string>
#include <vector>

#include "inrseg/config.hpp"
#include "inrseg/data.hpp"
#include "inrseg/fft.hpp"
#include "inrseg/gradcheck.hpp"
#include "inrseg/pipeline.hpp"

namespace inrseg {

// "+26.11%" / "-30.37%" style relative change vs a base value. A non-positive
// base has no meaningful relative change and renders as "n/a".
std::string format_percent_change(Scalar base, Scalar value);

// ---- cross-resolution evaluation --------------------------------------------

// base-resolution-opt adapts once at Base and reuses that encoder at every
// level; resolution-specific-opt adapts independently per level. Both share
// the per-slide encoder seed at Base, so their Base rows coincide.
struct EvalProtocol {
  std::string mode = "resolution-specific-opt";  // | base-resolution-opt
  std::vector<int> levels = {0, 1, 2};

  void validate() const;
};

struct EvalRow {
  std::string mode;
  std::string slide;  // slide id, or "mean" for the per-level aggregate
  int level = 0;
  DiceReport dice;
  Scalar psnr = 0.0;
};

struct EvalOutcome {
  std::vector<EvalRow> rows;
  std::string table_csv;    // mode,slide,level,dice,pct_change
  std::string metrics_csv;  // slide,level,dice,psnr,tp,fp,fn (per-slide rows)
};

// Ground-truth masks are read only by dice_metric here; the adaptation path
// receives an image-only view of each slide.
EvalOutcome eval_cross_resolution(const RunConfig& cfg, const ModelParams& model,
                                  const std::vector<SlidePyramid>& slides,
                                  const EvalProtocol& protocol);

Scalar eval_mean_dice(const EvalOutcome& outcome, int level);

// ---- encoding ablation -------------------------------------------------------

// One config per encoder kind, identical elsewhere (asserted via config_diff).
std::vector<RunConfig> make_ablation_arms(const RunConfig& base,
                                          const std::vector<std::string>& kinds);

struct AblationRow {
  std::string arm;
  std::string slide;
  int level = 0;
  Scalar dice = 0.0;
};

struct AblationOutcome {
  std::vector<AblationRow> rows;  // per arm/slide/level
  std::string table_csv;          // arm,level,dice (slide means)
};

// Trains every arm end-to-end (both stages) on the manifest's train split and
// evaluates resolution-specific Dice on the test split.
AblationOutcome run_ablation(const RunConfig& base, const std::vector<std::string>& kinds,
                             const DatasetManifest& manifest);

Scalar ablation_mean_dice(const AblationOutcome& outcome, const std::string& arm);

// ---- hash-level decoupling ----------------------------------------------------

struct DecoupleVariant {
  std::string name;  // low | high | full
  DenseOutputs outputs;
  Scalar psnr_db = 0.0;
  SpectrumReport spectrum;  // centered patch of the reconstruction
};

struct DecoupleResult {
  int split = 0;  // levels < split are "low", >= split are "high"
  std::vector<DecoupleVariant> variants;
};

// First hashed level, clamped into the valid split range [1, L-1].
int default_level_split(const HashGridConfig& grid);

// Re-infers the slide with low-only / high-only / full level masks and attaches
// a spectrum of each reconstruction's central power-of-two patch.
DecoupleResult decouple_hash_levels(const SlideImages& slide, int level,
                                    const ModelParams& model, const SlideEncoder& encoder,
                                    int split, Index window, Index patch);

// ---- report --------------------------------------------------------------------

struct ReportResult {
  std::string report_md;             // path of the written report
  std::vector<std::string> figures;  // composed panel images
  std::vector<std::string> missing;  // inputs the run dir did not contain
};

// Renders whatever the run dir holds (tables, panels, spectra) into report.md
// plus a manifest; missing inputs are listed and marked absent, never fatal.
// Regeneration over an unchanged run dir is byte-identical.
ReportResult emit_report(const std::string& run_dir);

// ---- gradient validation -----------------------------------------------------------

// Finite-difference check of the full path (encoder tables, decoder, both
// heads) under the combined MSE + BCE + Dice loss on one small window. scope
// restricts the probed groups ("all", "encoder", "decoder", "rec_head",
// "seg_head").
GradCheckReport model_gradcheck(const RunConfig& cfg, std::uint64_t seed,
                                const std::string& scope);

// ---- command bodies --------------------------------------------------------------

// Loads the trained model of cfg's run dir and writes table1.csv + metrics.csv.
EvalOutcome run_eval_command(const RunConfig& cfg, const std::string& mode);

// Trains the arms in-process and writes table2.csv.
AblationOutcome run_ablate_command(const RunConfig& cfg, const std::vector<std::string>& kinds);

// Adapts one slide at one level and writes stop_reason.txt, trajectory.csv and
// dense outputs under the run dir. mode as in EvalProtocol.
StopDecision run_ito_command(const RunConfig& cfg, const std::string& slide_id, int level,
                             const std::string& mode);

// Dense inference from the checkpointed ITO encoder of `ito` (re-run here) at
// the requested level; writes reconstruction/probability/mask PNGs.
void run_infer_command(const RunConfig& cfg, const std::string& slide_id, int level);

// Decoupling study for one slide; writes per-variant images, spectra and a
// summary under the run dir.
DecoupleResult run_decouple_command(const RunConfig& cfg, const std::string& slide_id,
                                    int level, int split);

}  // namespace inrseg
