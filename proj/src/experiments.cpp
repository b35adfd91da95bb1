#include "inrseg/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "inrseg/checkpoint.hpp"
#include "inrseg/errors.hpp"
#include "inrseg/ops.hpp"
#include "inrseg/png_io.hpp"

namespace inrseg {

namespace {

namespace fs = std::filesystem;

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise_io("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise_io("cannot write '" + path.string() + "'");
  out << text;
}

std::string fmt_dice(Scalar v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

void validate_mode(const std::string& mode) {
  if (mode != "base-resolution-opt" && mode != "resolution-specific-opt") {
    raise_invalid_config("unknown evaluation mode '" + mode +
                         "' (want base-resolution-opt or resolution-specific-opt)");
  }
}

std::uint64_t ito_seed(const RunConfig& cfg, const std::string& slide_id, int level) {
  return Rng::derive(cfg.seed, "ito/" + slide_id + "/" + level_tag(level));
}

std::vector<SlidePyramid> load_split(const DatasetManifest& manifest, const std::string& split,
                                     int limit) {
  std::vector<SlidePyramid> out;
  for (const SlideRef& ref : manifest.slides) {
    if (ref.split != split) continue;
    if (static_cast<int>(out.size()) >= limit) break;
    out.push_back(load_slide(manifest, ref));
  }
  return out;
}

ModelParams load_trained_model(const RunConfig& cfg, const DatasetManifest& manifest) {
  const std::string path =
      (fs::path(run_paths(cfg).checkpoint_dir) / "stage2.ckpt").string();
  if (!fs::exists(path)) {
    raise_usage("no trained model at '" + path + "'; run train first");
  }
  return load_train_checkpoint(path, cfg, manifest).model;
}

// ---- report helpers ---------------------------------------------------------

std::string csv_to_markdown(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::string md;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::string row = "|";
    std::size_t cells = 1;
    for (char c : line) {
      if (c == ',') {
        row += " |";
        ++cells;
      } else {
        row += c;
      }
    }
    row += " |\n";
    md += row;
    if (first) {
      md += "|";
      for (std::size_t i = 0; i < cells; ++i) md += "---|";
      md += "\n";
      first = false;
    }
  }
  return md;
}

Tensor gray_to_rgb(const Tensor& gray) {
  const Index h = gray.shape()[0];
  const Index w = gray.shape()[1];
  Tensor rgb({h, w, 3});
  for (Index i = 0; i < h * w; ++i) {
    for (Index c = 0; c < 3; ++c) rgb.data()[i * 3 + c] = gray.data()[i];
  }
  return rgb;
}

// Horizontal concatenation with a thin white gutter; all parts share a height.
Tensor hstack(const std::vector<Tensor>& parts, Index gap = 4) {
  if (parts.empty()) raise_usage("hstack needs at least one image");
  const Index h = parts.front().shape()[0];
  Index total_w = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != 3 || p.shape()[0] != h) raise_invalid_shape("hstack parts disagree in height");
    total_w += p.shape()[1];
  }
  total_w += gap * static_cast<Index>(parts.size() - 1);
  Tensor out({h, total_w, 3});
  out.data().setConstant(1.0);
  Index col = 0;
  for (const Tensor& p : parts) {
    const Index w = p.shape()[1];
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        for (Index ch = 0; ch < 3; ++ch) {
          out.data()[(r * total_w + col + c) * 3 + ch] = p.data()[(r * w + c) * 3 + ch];
        }
      }
    }
    col += w + gap;
  }
  return out;
}

std::vector<fs::path> sorted_dirs(const fs::path& root) {
  std::vector<fs::path> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::directory_iterator(root)) {
    if (e.is_directory()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

// ---- formatting ---------------------------------------------------------------

std::string format_percent_change(Scalar base, Scalar value) {
  if (!(base > 0.0)) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.2f%%", (value - base) / base * 100.0);
  return buf;
}

// ---- cross-resolution evaluation ------------------------------------------------

void EvalProtocol::validate() const {
  validate_mode(mode);
  if (levels.empty() || levels.front() != 0) {
    raise_invalid_config("evaluation levels must start at Base (level 0)");
  }
  for (std::size_t i = 1; i < levels.size(); ++i) {
    if (levels[i] <= levels[i - 1]) raise_invalid_config("evaluation levels must ascend");
  }
}

EvalOutcome eval_cross_resolution(const RunConfig& cfg, const ModelParams& model,
                                  const std::vector<SlidePyramid>& slides,
                                  const EvalProtocol& protocol) {
  protocol.validate();
  if (slides.empty()) raise_usage("cross-resolution evaluation needs test slides");

  EvalOutcome out;
  for (const SlidePyramid& p : slides) {
    for (int level : protocol.levels) {
      if (level >= p.level_count()) {
        raise_domain("slide '" + p.id + "' has no level " + level_tag(level));
      }
    }
    // The adaptation path sees images only; masks surface below, solely in
    // dice_metric.
    const SlideImages images = images_only(p);
    std::shared_ptr<SlideEncoder> base_encoder;
    for (int level : protocol.levels) {
      std::shared_ptr<SlideEncoder> enc;
      if (protocol.mode == "base-resolution-opt" && base_encoder) {
        enc = base_encoder;
      } else {
        const int ito_level = protocol.mode == "base-resolution-opt" ? 0 : level;
        ItoResult r = run_ito(images, model, cfg, ito_config_from(cfg, ito_level),
                              ito_seed(cfg, p.id, ito_level));
        enc = r.encoder;
        if (protocol.mode == "base-resolution-opt") base_encoder = enc;
      }
      const DenseOutputs dense = infer_dense(images, level, model, *enc, cfg.window);

      EvalRow row;
      row.mode = protocol.mode;
      row.slide = p.id;
      row.level = level;
      row.dice = dice_metric(dense.mask, p.levels[static_cast<std::size_t>(level)].mask);
      row.dice.resolution = level_tag(level);
      row.psnr = psnr(dense.reconstruction, p.levels[static_cast<std::size_t>(level)].image);
      out.rows.push_back(row);
    }
  }

  for (int level : protocol.levels) {
    EvalRow mean;
    mean.mode = protocol.mode;
    mean.slide = "mean";
    mean.level = level;
    mean.dice.resolution = level_tag(level);
    int n = 0;
    for (const EvalRow& r : out.rows) {
      if (r.level != level || r.slide == "mean") continue;
      mean.dice.dice += r.dice.dice;
      mean.psnr += r.psnr;
      ++n;
    }
    mean.dice.dice /= static_cast<Scalar>(n);
    mean.psnr /= static_cast<Scalar>(n);
    out.rows.push_back(mean);
  }

  std::map<std::string, Scalar> base_dice;
  for (const EvalRow& r : out.rows) {
    if (r.level == 0) base_dice[r.slide] = r.dice.dice;
  }
  out.table_csv = "mode,slide,level,dice,pct_change\n";
  out.metrics_csv = metrics_csv_header();
  for (const EvalRow& r : out.rows) {
    const std::string pct =
        r.level == 0 ? std::string("") : format_percent_change(base_dice.at(r.slide), r.dice.dice);
    out.table_csv += r.mode + "," + r.slide + "," + level_tag(r.level) + "," +
                     fmt_dice(r.dice.dice) + "," + pct + "\n";
    if (r.slide != "mean") {
      append_metric_row(out.metrics_csv, r.slide, r.level, r.dice, r.psnr);
    }
  }
  return out;
}

Scalar eval_mean_dice(const EvalOutcome& outcome, int level) {
  for (const EvalRow& r : outcome.rows) {
    if (r.slide == "mean" && r.level == level) return r.dice.dice;
  }
  raise_usage("no aggregate row for level " + level_tag(level));
}

// ---- encoding ablation -----------------------------------------------------------

std::vector<RunConfig> make_ablation_arms(const RunConfig& base,
                                          const std::vector<std::string>& kinds) {
  if (kinds.empty()) raise_usage("ablation needs at least one arm");
  std::vector<RunConfig> arms;
  for (const std::string& kind : kinds) {
    RunConfig c = base;
    c.encoder_kind = kind;
    c.validate();
    for (const std::string& key : config_diff(base, c)) {
      if (key.rfind("encoder.", 0) != 0) {
        raise_invariant("ablation arm '" + kind + "' differs in non-encoder key '" + key + "'");
      }
    }
    arms.push_back(std::move(c));
  }
  return arms;
}

AblationOutcome run_ablation(const RunConfig& base, const std::vector<std::string>& kinds,
                             const DatasetManifest& manifest) {
  const std::vector<RunConfig> arms = make_ablation_arms(base, kinds);
  const std::vector<SlidePyramid> tests = load_split(manifest, "test", base.test_slides);
  if (tests.empty()) raise_usage("ablation needs test slides in the manifest");

  AblationOutcome out;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const RunConfig& arm = arms[a];
    TrainState st = init_train_state(arm, manifest);
    train_stage1(st);
    train_stage2(st);
    for (const SlidePyramid& p : tests) {
      const SlideImages images = images_only(p);
      for (int level = 0; level < std::min(arm.pyramid_levels, p.level_count()); ++level) {
        ItoResult r = run_ito(images, st.model, arm, ito_config_from(arm, level),
                              ito_seed(arm, p.id, level));
        const DenseOutputs dense = infer_dense(images, level, st.model, *r.encoder, arm.window);
        const DiceReport d =
            dice_metric(dense.mask, p.levels[static_cast<std::size_t>(level)].mask);
        out.rows.push_back({kinds[a], p.id, level, d.dice});
      }
    }
  }

  out.table_csv = "arm,level,dice\n";
  for (const std::string& kind : kinds) {
    for (int level = 0; level < base.pyramid_levels; ++level) {
      Scalar sum = 0.0;
      int n = 0;
      for (const AblationRow& r : out.rows) {
        if (r.arm == kind && r.level == level) {
          sum += r.dice;
          ++n;
        }
      }
      if (n == 0) continue;
      out.table_csv +=
          kind + "," + level_tag(level) + "," + fmt_dice(sum / static_cast<Scalar>(n)) + "\n";
    }
  }
  return out;
}

Scalar ablation_mean_dice(const AblationOutcome& outcome, const std::string& arm) {
  Scalar sum = 0.0;
  int n = 0;
  for (const AblationRow& r : outcome.rows) {
    if (r.arm == arm) {
      sum += r.dice;
      ++n;
    }
  }
  if (n == 0) raise_usage("no ablation rows for arm '" + arm + "'");
  return sum / static_cast<Scalar>(n);
}

// ---- hash-level decoupling ----------------------------------------------------------

int default_level_split(const HashGridConfig& grid) {
  grid.validate();
  int first_hashed = grid.levels;  // all-direct fallback
  for (int l = 0; l < grid.levels; ++l) {
    if (!level_is_direct(grid, l)) {
      first_hashed = l;
      break;
    }
  }
  return std::clamp(first_hashed, 1, grid.levels - 1);
}

DecoupleResult decouple_hash_levels(const SlideImages& slide, int level,
                                    const ModelParams& model, const SlideEncoder& encoder,
                                    int split, Index window, Index patch) {
  if (!encoder.has_params()) raise_usage("level decoupling requires a hash-grid encoder");
  const int L = encoder.grid().levels();
  if (split < 1 || split > L - 1) {
    raise_domain("decoupling split " + std::to_string(split) + " outside [1, " +
                 std::to_string(L - 1) + "]");
  }

  DecoupleResult result;
  result.split = split;
  const struct {
    const char* name;
    bool low, high;
  } variants[] = {{"low", true, false}, {"high", false, true}, {"full", true, true}};

  for (const auto& v : variants) {
    LevelMask mask = LevelMask::all(L);
    for (int l = 0; l < L; ++l) mask.keep[static_cast<std::size_t>(l)] = l < split ? v.low : v.high;

    DecoupleVariant out;
    out.name = v.name;
    out.outputs = infer_dense(slide, level, model, encoder, window, &mask);
    const Tensor& target = slide.images[static_cast<std::size_t>(level)];
    out.psnr_db = psnr(out.outputs.reconstruction, target);

    // Spectrum of the central power-of-two patch of the reconstruction.
    const Tensor gray = to_grayscale(out.outputs.reconstruction);
    const Index h = gray.shape()[0];
    const Index w = gray.shape()[1];
    Index p = 1;
    while (p * 2 <= std::min({h, w, patch})) p *= 2;
    const Index row0 = (h - p) / 2;
    const Index col0 = (w - p) / 2;
    Tensor crop({p, p});
    for (Index r = 0; r < p; ++r) {
      for (Index c = 0; c < p; ++c) {
        crop.data()[r * p + c] = gray.data()[(row0 + r) * w + (col0 + c)];
      }
    }
    out.spectrum = fft2_magnitude(crop);
    out.spectrum.patch_row = row0;
    out.spectrum.patch_col = col0;
    result.variants.push_back(std::move(out));
  }
  return result;
}

// ---- report --------------------------------------------------------------------------

ReportResult emit_report(const std::string& run_dir) {
  const fs::path root = run_dir;
  if (!fs::exists(root)) raise_usage("run directory '" + run_dir + "' does not exist");
  const fs::path fig_dir = root / "figures";
  fs::create_directories(fig_dir);

  ReportResult result;
  std::string md = "# Run report\n\n";

  auto absent = [&](const std::string& what) {
    result.missing.push_back(what);
    md += "_" + what + ": absent_\n\n";
  };

  if (fs::exists(root / "config.json")) {
    md += "Config: `config.json` (hash `" + config_hash(load_config((root / "config.json").string())) +
          "`)\n\n";
  } else {
    absent("config.json");
  }

  md += "## Training log\n\n";
  if (fs::exists(root / "train_log.csv")) {
    // Mean rows only; the per-slide detail stays in the CSV.
    std::istringstream in(read_text(root / "train_log.csv"));
    std::string line, mean_csv = "stage,epoch,slide,loss,eval_mse\n";
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.find(",mean,") != std::string::npos) mean_csv += line + "\n";
    }
    md += csv_to_markdown(mean_csv) + "\n";
  } else {
    absent("train_log.csv");
  }

  md += "## Cross-resolution evaluation\n\n";
  if (fs::exists(root / "table1.csv")) {
    md += csv_to_markdown(read_text(root / "table1.csv")) + "\n";
  } else {
    absent("table1.csv");
  }

  md += "## Encoding ablation\n\n";
  if (fs::exists(root / "table2.csv")) {
    md += csv_to_markdown(read_text(root / "table2.csv")) + "\n";
  } else {
    absent("table2.csv");
  }

  md += "## Metrics\n\n";
  if (fs::exists(root / "metrics.csv")) {
    md += csv_to_markdown(read_text(root / "metrics.csv")) + "\n";
  } else {
    absent("metrics.csv");
  }

  // Reconstruction / probability / mask panels per inferred slide level.
  md += "## Panels\n\n";
  bool any_panel = false;
  for (const fs::path& slide_dir : sorted_dirs(root / "outputs")) {
    for (const fs::path& level_dir : sorted_dirs(slide_dir)) {
      if (!fs::exists(level_dir / "reconstruction.png")) continue;
      std::vector<Tensor> parts{load_png_rgb((level_dir / "reconstruction.png").string())};
      for (const char* extra : {"lesion_prob.png", "mask.png"}) {
        if (fs::exists(level_dir / extra)) parts.push_back(load_png_rgb((level_dir / extra).string()));
      }
      const std::string name =
          slide_dir.filename().string() + "_" + level_dir.filename().string() + "_panel.png";
      save_png_rgb((fig_dir / name).string(), hstack(parts));
      result.figures.push_back((fig_dir / name).string());
      md += "![" + name + "](figures/" + name + ")\n\n";
      any_panel = true;

      const fs::path dec = level_dir / "decouple";
      bool dec_complete = fs::exists(dec / "summary.json");
      for (const char* variant : {"low", "high", "full"}) {
        dec_complete = dec_complete && fs::exists(dec / variant / "reconstruction.png") &&
                       fs::exists(dec / variant / "spectrum.png");
      }
      if (dec_complete) {
        std::vector<Tensor> recs, specs;
        for (const char* variant : {"low", "high", "full"}) {
          recs.push_back(load_png_rgb((dec / variant / "reconstruction.png").string()));
          specs.push_back(load_png_rgb((dec / variant / "spectrum.png").string()));
        }
        const std::string stem =
            slide_dir.filename().string() + "_" + level_dir.filename().string();
        save_png_rgb((fig_dir / (stem + "_decouple.png")).string(), hstack(recs));
        save_png_rgb((fig_dir / (stem + "_spectra.png")).string(), hstack(specs));
        result.figures.push_back((fig_dir / (stem + "_decouple.png")).string());
        result.figures.push_back((fig_dir / (stem + "_spectra.png")).string());
        md += "![" + stem + "_decouple](figures/" + stem + "_decouple.png)\n\n";
        md += "![" + stem + "_spectra](figures/" + stem + "_spectra.png)\n\n";

        nlohmann::json summary = nlohmann::json::parse(read_text(dec / "summary.json"));
        std::string csv = "variant,psnr_db,high_band_energy\n";
        for (const auto& v : summary.at("variants")) {
          char buf[96];
          std::snprintf(buf, sizeof(buf), "%s,%.4f,%.6g\n",
                        v.at("name").get<std::string>().c_str(), v.at("psnr_db").get<double>(),
                        v.at("high_band_energy").get<double>());
          csv += buf;
        }
        md += "Split at level " + std::to_string(summary.at("split").get<int>()) + ":\n\n" +
              csv_to_markdown(csv) + "\n";
      }
    }
  }
  if (!any_panel) absent("outputs (no inferred slides)");

  result.report_md = (root / "report.md").string();
  write_text(result.report_md, md);

  nlohmann::json manifest;
  manifest["report"] = "report.md";
  manifest["figures"] = nlohmann::json::array();
  for (const std::string& f : result.figures) {
    manifest["figures"].push_back(fs::relative(f, root).string());
  }
  manifest["missing"] = result.missing;
  write_text(root / "report_manifest.json", manifest.dump(2) + "\n");
  return result;
}

// ---- gradient validation --------------------------------------------------------------

GradCheckReport model_gradcheck(const RunConfig& cfg, std::uint64_t seed,
                                const std::string& scope) {
  cfg.validate();
  const Index side = 16;
  Rng rng(Rng::derive(seed, "gradcheck-data"));

  Tensor coords({side * side, 2});
  for (Index i = 0; i < coords.size(); ++i) coords.data()[i] = rng.uniform();
  Tensor image = Tensor::uniform({side, side, 3}, rng, 0.0, 1.0);
  Tensor labels({side, side});
  for (Index i = 0; i < labels.size(); ++i) labels.data()[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
  labels.data()[0] = 0.0;  // keep both classes present
  labels.data()[1] = 1.0;
  const Tensor labels3({side, side, 1}, labels.data());

  auto encoder =
      std::make_shared<SlideEncoder>(cfg.encoder_config(), Rng::derive(seed, "gradcheck-enc"));
  Rng model_rng(Rng::derive(seed, "gradcheck-model"));
  auto model = std::make_shared<ModelParams>(ModelParams::init(cfg.model_dims(), model_rng));
  const Index d_z = encoder->feature_width();
  const bool squared = cfg.dice_squared_denom;

  // Check at a generic point, not the training init: there the encoder
  // features are ~1e-4 and biases exactly zero, which parks every ReLU
  // preactivation within the finite-difference step of its kink.
  Rng point_rng(Rng::derive(seed, "gradcheck-point"));
  for (const TensorPtr& t : encoder->params()) {
    for (Index i = 0; i < t->size(); ++i) t->data()[i] = point_rng.uniform(-0.5, 0.5);
  }
  for (const auto& [name, t] : model->named_params()) {
    if (name.size() >= 4 && name.compare(name.size() - 4, 4, "bias") == 0) {
      for (Index i = 0; i < t->size(); ++i) t->data()[i] = point_rng.uniform(-0.2, 0.2);
    }
  }

  auto forward = [encoder, model, coords, image, labels, labels3, d_z, squared,
                  side](bool backward) {
    Tape tp;
    std::vector<Var> leaves = encoder->bind(tp, true);
    ModelVars mv = bind_model(tp, *model, FreezePlan{true, true, true});
    Var z = encoder->encode(tp, leaves, coords, {side, side, d_z});
    Var f = decode(tp, mv, z);
    Var rec = rec_head(tp, mv, f);
    Var seg = seg_head(tp, mv, f);
    Var loss = add(tp, mse_loss(tp, rec, image),
                   add(tp, bce_loss(tp, seg, labels),
                       dice_loss(tp, slice(tp, seg, 2, 1, 1), labels3, squared)));
    const Scalar v = tp.value(loss).value();
    if (backward) tp.backward(loss);
    return v;
  };

  GradCheckProblem problem;
  problem.loss = [forward] { return forward(false); };
  problem.compute_grads = [forward] { forward(true); };

  std::vector<GradCheckGroup> all;
  if (encoder->has_params()) all.push_back({"encoder", encoder->params(), false});
  all.push_back({"decoder", model->group("decoder"), false});
  all.push_back({"rec_head", model->group("rec_head"), false});
  all.push_back({"seg_head", model->group("seg_head"), false});
  for (GradCheckGroup& g : all) {
    if (scope == "all" || scope == g.name) problem.groups.push_back(std::move(g));
  }
  if (problem.groups.empty()) {
    raise_usage("gradcheck scope '" + scope +
                "' matches no group (want all, encoder, decoder, rec_head or seg_head)");
  }

  GradCheckConfig gc;
  gc.seed = Rng::derive(seed, "gradcheck-probes");
  return finite_diff_check(problem, gc);
}

// ---- command bodies ----------------------------------------------------------------------

EvalOutcome run_eval_command(const RunConfig& cfg, const std::string& mode) {
  const RunPaths paths = run_paths(cfg);
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  const ModelParams model = load_trained_model(cfg, manifest);
  const std::vector<SlidePyramid> tests = load_split(manifest, "test", cfg.test_slides);
  if (tests.empty()) raise_usage("evaluation needs test slides in the manifest");

  EvalProtocol protocol;
  protocol.mode = mode;
  protocol.levels.clear();
  for (int l = 0; l < cfg.pyramid_levels; ++l) protocol.levels.push_back(l);

  EvalOutcome out = eval_cross_resolution(cfg, model, tests, protocol);
  write_text(fs::path(paths.root) / "table1.csv", out.table_csv);
  write_text(paths.metrics_csv, out.metrics_csv);
  return out;
}

AblationOutcome run_ablate_command(const RunConfig& cfg, const std::vector<std::string>& kinds) {
  const RunPaths paths = prepare_run_dir(cfg);
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  AblationOutcome out = run_ablation(cfg, kinds, manifest);
  write_text(fs::path(paths.root) / "table2.csv", out.table_csv);
  return out;
}

namespace {

fs::path encoder_ckpt_path(const RunPaths& paths, const std::string& slide_id, int level) {
  return fs::path(slide_output_dir(paths, slide_id, level)) / "encoder.ckpt";
}

}  // namespace

StopDecision run_ito_command(const RunConfig& cfg, const std::string& slide_id, int level,
                             const std::string& mode) {
  validate_mode(mode);
  const RunPaths paths = run_paths(cfg);
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  const ModelParams model = load_trained_model(cfg, manifest);
  const SlidePyramid p = load_slide(manifest, find_slide(manifest, slide_id));
  if (level < 0 || level >= p.level_count()) {
    raise_domain("slide '" + slide_id + "' has no level " + std::to_string(level));
  }

  const SlideImages images = images_only(p);
  const int ito_level = mode == "base-resolution-opt" ? 0 : level;
  const ItoResult r = run_ito(images, model, cfg, ito_config_from(cfg, ito_level),
                              ito_seed(cfg, slide_id, ito_level));

  const fs::path dir = slide_output_dir(paths, slide_id, level);
  write_text(dir / "stop_reason.txt", r.decision.reason + "\n");
  std::string traj = "epoch,mse\n";
  for (std::size_t e = 0; e < r.trajectory.size(); ++e) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", e + 1, r.trajectory[e]);
    traj += buf;
  }
  write_text(dir / "trajectory.csv", traj);

  Checkpoint ckpt;
  ckpt.meta["config_hash"] = config_hash(cfg);
  ckpt.meta["kind"] = to_string(cfg.encoder_config().kind);
  ckpt.meta["stop_reason"] = r.decision.reason;
  ckpt.meta["ito_level"] = std::to_string(ito_level);
  const std::vector<TensorPtr> tables = r.encoder->params();
  for (std::size_t l = 0; l < tables.size(); ++l) {
    ckpt.tensors.emplace("table" + std::to_string(l), *tables[l]);
  }
  save_checkpoint(encoder_ckpt_path(paths, slide_id, level).string(), ckpt);
  return r.decision;
}

void run_infer_command(const RunConfig& cfg, const std::string& slide_id, int level) {
  const RunPaths paths = run_paths(cfg);
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  const ModelParams model = load_trained_model(cfg, manifest);
  const SlidePyramid p = load_slide(manifest, find_slide(manifest, slide_id));
  const SlideImages images = images_only(p);

  const fs::path enc_path = encoder_ckpt_path(paths, slide_id, level);
  if (!fs::exists(enc_path)) {
    raise_usage("no adapted encoder at '" + enc_path.string() + "'; run ito first");
  }
  Checkpoint ckpt = load_checkpoint(enc_path.string());
  if (ckpt.meta.at("config_hash") != config_hash(cfg)) {
    raise_invalid_config("encoder checkpoint was written with a different config");
  }
  SlideEncoder encoder(cfg.encoder_config(), 0);
  const std::vector<TensorPtr> tables = encoder.params();
  for (std::size_t l = 0; l < tables.size(); ++l) {
    const Tensor& saved = ckpt.tensors.at("table" + std::to_string(l));
    if (saved.shape() != tables[l]->shape()) raise_io("encoder checkpoint shape mismatch");
    tables[l]->data() = saved.data();
  }

  const DenseOutputs out = infer_dense(images, level, model, encoder, cfg.window);
  const fs::path dir = slide_output_dir(paths, slide_id, level);
  save_png_rgb((dir / "reconstruction.png").string(), out.reconstruction);
  save_png_gray((dir / "lesion_prob.png").string(), out.lesion_prob);
  save_png_mask((dir / "mask.png").string(), out.mask);
}

DecoupleResult run_decouple_command(const RunConfig& cfg, const std::string& slide_id,
                                    int level, int split) {
  const RunPaths paths = run_paths(cfg);
  const DatasetManifest manifest = load_manifest(cfg.manifest);
  const ModelParams model = load_trained_model(cfg, manifest);
  const SlidePyramid p = load_slide(manifest, find_slide(manifest, slide_id));
  const SlideImages images = images_only(p);

  const ItoResult r = run_ito(images, model, cfg, ito_config_from(cfg, level),
                              ito_seed(cfg, slide_id, level));
  if (split < 0) split = default_level_split(cfg.grid);
  const DecoupleResult result = decouple_hash_levels(images, level, model, *r.encoder, split,
                                                     cfg.window, cfg.spectrum_patch);

  const fs::path base = fs::path(slide_output_dir(paths, slide_id, level)) / "decouple";
  nlohmann::json summary;
  summary["split"] = result.split;
  summary["variants"] = nlohmann::json::array();
  for (const DecoupleVariant& v : result.variants) {
    const fs::path dir = base / v.name;
    fs::create_directories(dir);
    save_png_rgb((dir / "reconstruction.png").string(), v.outputs.reconstruction);
    save_png_mask((dir / "mask.png").string(), v.outputs.mask);

    // Zoomed central crop, as in the figure layout.
    const Index h = v.outputs.reconstruction.shape()[0];
    const Index w = v.outputs.reconstruction.shape()[1];
    const Index zh = std::max<Index>(1, h / 2);
    const Index zw = std::max<Index>(1, w / 2);
    Tensor zoom({zh, zw, 3});
    for (Index rr = 0; rr < zh; ++rr) {
      for (Index cc = 0; cc < zw; ++cc) {
        for (Index ch = 0; ch < 3; ++ch) {
          zoom.data()[(rr * zw + cc) * 3 + ch] =
              v.outputs.reconstruction.data()[((h / 4 + rr) * w + (w / 4 + cc)) * 3 + ch];
        }
      }
    }
    save_png_rgb((dir / "zoom.png").string(), zoom);

    // Log-magnitude spectrum, normalized to its own peak for display.
    Tensor spec = v.spectrum.log_magnitude;
    const Scalar peak = spec.data().maxCoeff();
    if (peak > 0.0) spec.data() /= peak;
    save_png_gray((dir / "spectrum.png").string(), spec);

    std::string radial = "band,energy\n";
    for (std::size_t b = 0; b < v.spectrum.band_energy.size(); ++b) {
      char buf[48];
      std::snprintf(buf, sizeof(buf), "%zu,%.12g\n", b, v.spectrum.band_energy[b]);
      radial += buf;
    }
    write_text(dir / "radial.csv", radial);

    nlohmann::json vj;
    vj["name"] = v.name;
    vj["psnr_db"] = v.psnr_db;
    vj["high_band_energy"] = high_band_energy(v.spectrum);
    vj["parseval_rel_err"] = v.spectrum.parseval_rel_err;
    summary["variants"].push_back(std::move(vj));
  }
  write_text(base / "summary.json", summary.dump(2) + "\n");
  return result;
}

}  // namespace inrseg
