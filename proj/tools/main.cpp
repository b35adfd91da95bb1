#include <cstdio>
#include <string>
#include <tuple>
#include <vector>

#include <CLI11.hpp>

#include "inrseg/config.hpp"
#include "inrseg/data.hpp"
#include "inrseg/errors.hpp"
#include "inrseg/experiments.hpp"
#include "inrseg/gradcheck.hpp"
#include "inrseg/pipeline.hpp"

namespace {

using namespace inrseg;

std::pair<double, double> parse_fraction_range(const std::string& range) {
  const std::size_t colon = range.find(':');
  if (colon == std::string::npos)
    raise_usage("fraction range must look like LO:HI, got '" + range + "'");
  double lo = 0.0, hi = 0.0;
  try {
    lo = std::stod(range.substr(0, colon));
    hi = std::stod(range.substr(colon + 1));
  } catch (const std::exception&) {
    raise_usage("fraction range must be numeric, got '" + range + "'");
  }
  return {lo, hi};
}

std::vector<std::uint64_t> parse_seed_range(const std::string& range) {
  const std::size_t colon = range.find(':');
  if (colon == std::string::npos) raise_usage("seed range must look like LO:HI, got '" + range + "'");
  std::uint64_t lo = 0, hi = 0;
  try {
    lo = std::stoull(range.substr(0, colon));
    hi = std::stoull(range.substr(colon + 1));
  } catch (const std::exception&) {
    raise_usage("seed range must be numeric, got '" + range + "'");
  }
  if (hi < lo) raise_usage("seed range is empty: " + range);
  std::vector<std::uint64_t> seeds;
  for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  return seeds;
}

struct ConfigOpts {
  std::string config = "desk-scale";
  std::vector<std::string> overrides;

  RunConfig resolve() const { return resolve_config(config, overrides); }
};

void add_config_opts(CLI::App* cmd, ConfigOpts& opts) {
  cmd->add_option("--config", opts.config, "Preset name (desk-scale | paper-scale) or config JSON path");
  cmd->add_option("--set", opts.overrides, "Dotted-key override, e.g. train.lr=0.001 (repeatable)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Patch-free neural slide representation: training, adaptation and experiments"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic pseudo-slide dataset");
  std::string gen_out = "data";
  std::string gen_train_range = "1:4";
  std::string gen_test_range;
  Index gen_canvas = 512;
  int gen_levels = 3;
  gen->add_option("--out", gen_out, "Dataset directory");
  gen->add_option("--seed-range", gen_train_range, "Training seeds LO:HI");
  gen->add_option("--test-seed-range", gen_test_range, "Held-out test seeds LO:HI");
  gen->add_option("--canvas", gen_canvas, "Base level side in pixels");
  gen->add_option("--levels", gen_levels, "Pyramid levels");
  std::string gen_fraction;
  gen->add_option("--fraction", gen_fraction, "Lesion area fraction bounds LO:HI");

  // train
  auto* train = app.add_subcommand("train", "Two-stage training on the train split");
  ConfigOpts train_cfg;
  bool train_resume = false;
  add_config_opts(train, train_cfg);
  train->add_flag("--resume", train_resume, "Continue from the run dir's train_state checkpoint");

  // ito
  auto* ito = app.add_subcommand("ito", "Per-slide inference-time optimization");
  ConfigOpts ito_cfg;
  std::string ito_slide, ito_level = "base", ito_mode = "resolution-specific-opt";
  add_config_opts(ito, ito_cfg);
  ito->add_option("--slide", ito_slide, "Slide id")->required();
  ito->add_option("--level", ito_level, "Level tag: base | base/2 | base/4");
  ito->add_option("--mode", ito_mode, "base-resolution-opt | resolution-specific-opt");

  // infer
  auto* infer = app.add_subcommand("infer", "Dense inference from an adapted encoder");
  ConfigOpts infer_cfg;
  std::string infer_slide, infer_level = "base";
  add_config_opts(infer, infer_cfg);
  infer->add_option("--slide", infer_slide, "Slide id")->required();
  infer->add_option("--level", infer_level, "Level tag");

  // eval
  auto* eval = app.add_subcommand("eval", "Cross-resolution evaluation on the test split");
  ConfigOpts eval_cfg;
  std::string eval_protocol = "resolution-specific-opt";
  add_config_opts(eval, eval_cfg);
  eval->add_option("--protocol", eval_protocol, "base-resolution-opt | resolution-specific-opt");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Encoding ablation (trains every arm)");
  ConfigOpts ablate_cfg;
  std::vector<std::string> ablate_arms = {"none", "nerf-pe", "hash"};
  add_config_opts(ablate, ablate_cfg);
  ablate->add_option("--arms", ablate_arms, "Encoder kinds to compare");

  // decouple
  auto* decouple = app.add_subcommand("decouple", "Hash-level decoupling study with spectra");
  ConfigOpts dec_cfg;
  std::string dec_slide, dec_level = "base";
  int dec_split = -1;
  add_config_opts(decouple, dec_cfg);
  decouple->add_option("--slide", dec_slide, "Slide id")->required();
  decouple->add_option("--level", dec_level, "Level tag");
  decouple->add_option("--split", dec_split, "Levels below are 'low' (default: direct/hashed boundary)");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient validation");
  ConfigOpts gc_cfg;
  std::string gc_scope = "all";
  std::uint64_t gc_seed = 1;
  add_config_opts(gradcheck, gc_cfg);
  gradcheck->add_option("--scope", gc_scope, "all | encoder | decoder | rec_head | seg_head");
  gradcheck->add_option("--seed", gc_seed, "Probe seed");

  // report
  auto* report = app.add_subcommand("report", "Render report.md and figures from a run dir");
  std::string report_run;
  report->add_option("--run", report_run, "Run directory")->required();

  // dump-encoding
  auto* dump = app.add_subcommand("dump-encoding", "CSV of encoder features on a coordinate grid");
  ConfigOpts dump_cfg;
  int dump_n = 8;
  std::uint64_t dump_seed = 1;
  add_config_opts(dump, dump_cfg);
  dump->add_option("--grid", dump_n, "Grid side (n*n coordinates over [0,1]^2)");
  dump->add_option("--seed", dump_seed, "Encoder init seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      SyntheticSpec spec;
      spec.canvas = gen_canvas;
      spec.levels = gen_levels;
      if (!gen_fraction.empty())
        std::tie(spec.fraction_min, spec.fraction_max) = parse_fraction_range(gen_fraction);
      const std::vector<std::uint64_t> train_seeds = parse_seed_range(gen_train_range);
      const std::vector<std::uint64_t> test_seeds =
          gen_test_range.empty() ? std::vector<std::uint64_t>{} : parse_seed_range(gen_test_range);
      const DatasetManifest m = write_synthetic_dataset(gen_out, spec, train_seeds, test_seeds);
      std::printf("wrote %zu slides under %s\n", m.slides.size(), gen_out.c_str());
    } else if (*train) {
      run_train_command(train_cfg.resolve(), train_resume);
      std::printf("training complete\n");
    } else if (*ito) {
      const StopDecision d =
          run_ito_command(ito_cfg.resolve(), ito_slide, level_from_tag(ito_level), ito_mode);
      std::printf("stopped: %s after epoch %d (mse %.6g, min %.6g)\n", d.reason.c_str(), d.epoch,
                  d.current_mse, d.min_mse);
    } else if (*infer) {
      run_infer_command(infer_cfg.resolve(), infer_slide, level_from_tag(infer_level));
      std::printf("wrote dense outputs for %s at %s\n", infer_slide.c_str(), infer_level.c_str());
    } else if (*eval) {
      const EvalOutcome out = run_eval_command(eval_cfg.resolve(), eval_protocol);
      std::fputs(out.table_csv.c_str(), stdout);
    } else if (*ablate) {
      const AblationOutcome out = run_ablate_command(ablate_cfg.resolve(), ablate_arms);
      std::fputs(out.table_csv.c_str(), stdout);
    } else if (*decouple) {
      const DecoupleResult res = run_decouple_command(dec_cfg.resolve(), dec_slide,
                                                      level_from_tag(dec_level), dec_split);
      for (const DecoupleVariant& v : res.variants) {
        std::printf("%s: psnr %.4f dB, high-band energy %.6g\n", v.name.c_str(), v.psnr_db,
                    high_band_energy(v.spectrum));
      }
    } else if (*gradcheck) {
      const GradCheckReport rep = model_gradcheck(gc_cfg.resolve(), gc_seed, gc_scope);
      std::fputs(format_report(rep).c_str(), stdout);
      return rep.passed ? 0 : 1;
    } else if (*report) {
      const ReportResult res = emit_report(report_run);
      std::printf("wrote %s (+%zu figures, %zu inputs missing)\n", res.report_md.c_str(),
                  res.figures.size(), res.missing.size());
    } else if (*dump) {
      const RunConfig cfg = dump_cfg.resolve();
      if (dump_n < 1) raise_usage("grid side must be positive");
      SlideEncoder enc(cfg.encoder_config(), dump_seed);
      Tensor coords({Index(dump_n) * dump_n, 2});
      for (Index r = 0; r < dump_n; ++r) {
        for (Index c = 0; c < dump_n; ++c) {
          coords.data()[(r * dump_n + c) * 2] = dump_n == 1 ? 0.0 : Scalar(c) / (dump_n - 1);
          coords.data()[(r * dump_n + c) * 2 + 1] = dump_n == 1 ? 0.0 : Scalar(r) / (dump_n - 1);
        }
      }
      std::fputs(dump_encoding_csv(enc, coords).c_str(), stdout);
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: internal: %s\n", e.what());
    return 2;
  }
  return 0;
}
