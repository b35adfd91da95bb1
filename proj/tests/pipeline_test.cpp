#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>

#include "inrseg/checkpoint.hpp"
#include "inrseg/pipeline.hpp"

using namespace inrseg;

namespace {

namespace fs = std::filesystem;

ItoConfig stop_cfg() {
  ItoConfig cfg;
  cfg.max_epochs = 20;
  cfg.mse_threshold = 0.002;
  cfg.warmup_epochs = 5;
  cfg.divergence_ratio = 1.30;
  return cfg;
}

// Shared tiny dataset + config for the training tests. Building the dataset
// once keeps the suite fast; tests only read from it.
struct TinyRun {
  std::string data_dir;
  std::string run_root;
  DatasetManifest manifest;
  RunConfig cfg;

  TinyRun() {
    data_dir = (fs::temp_directory_path() / "inrseg_pipe_data").string();
    run_root = (fs::temp_directory_path() / "inrseg_pipe_runs").string();
    if (!fs::exists(data_dir + "/manifest.json")) {
      SyntheticSpec spec;
      spec.canvas = 128;
      spec.levels = 2;
      manifest = write_synthetic_dataset(data_dir, spec, {1, 2}, {101});
    } else {
      manifest = load_manifest(data_dir + "/manifest.json");
    }
    fs::remove_all(run_root);

    cfg = make_preset("desk-scale");
    cfg.manifest = data_dir + "/manifest.json";
    cfg.canvas = 128;
    cfg.pyramid_levels = 2;
    cfg.train_slides = 2;
    cfg.test_slides = 1;
    cfg.window = 64;
    cfg.total_epochs = 3;
    cfg.stage1_epochs = 2;
    cfg.ito_max_epochs = 3;
    cfg.ito_warmup_epochs = 1;
    cfg.run_dir = run_root + "/run";
    cfg.validate();
  }
};

TinyRun& tiny_run() {
  static TinyRun tr;
  return tr;
}

Array group_bytes(const ModelParams& model, const std::string& name) {
  std::vector<Array> parts;
  Index total = 0;
  for (const TensorPtr& p : model.group(name)) {
    parts.push_back(p->data());
    total += p->data().size();
  }
  Array flat(total);
  Index at = 0;
  for (const Array& a : parts) {
    flat.segment(at, a.size()) = a;
    at += a.size();
  }
  return flat;
}

}  // namespace

TEST_CASE("stop rule: threshold fires the moment mse dips below it") {
  const StopDecision d = check_stop({0.01, 0.005, 0.0015}, stop_cfg());
  CHECK(d.stop);
  CHECK(d.reason == "threshold");
  CHECK(d.epoch == 3);
  CHECK(d.current_mse == 0.0015);
}

TEST_CASE("stop rule: divergence needs the warmup to pass first") {
  const StopDecision d = check_stop({0.01, 0.008, 0.006, 0.005, 0.004, 0.006}, stop_cfg());
  CHECK(d.stop);
  CHECK(d.reason == "divergence");  // 0.006 > 1.30 * 0.004 at epoch 6 > warmup
  CHECK(d.epoch == 6);
  CHECK(d.min_mse == 0.004);

  // The same spike inside the warmup window does not stop.
  const StopDecision quiet = check_stop({0.01, 0.02}, stop_cfg());
  CHECK_FALSE(quiet.stop);
  CHECK(quiet.reason == "none");
}

TEST_CASE("stop rule: max epochs is the fallback") {
  std::vector<Scalar> flat(20, 0.01);
  const StopDecision d = check_stop(flat, stop_cfg());
  CHECK(d.stop);
  CHECK(d.reason == "max-epochs");
  CHECK(d.epoch == 20);

  std::vector<Scalar> shorter(19, 0.01);
  CHECK_FALSE(check_stop(shorter, stop_cfg()).stop);
}

TEST_CASE("stop rule: threshold outranks divergence in the same epoch") {
  ItoConfig cfg = stop_cfg();
  cfg.warmup_epochs = 1;
  // Epoch 3 both diverges (0.0019 > 1.3*0.001) and crosses the threshold.
  const StopDecision d = check_stop({0.01, 0.001, 0.0019}, cfg);
  CHECK(d.stop);
  CHECK(d.reason == "threshold");
}

TEST_CASE("stop rule input validation") {
  CHECK_THROWS_AS(check_stop({}, stop_cfg()), Error);
  ItoConfig bad = stop_cfg();
  bad.warmup_epochs = bad.max_epochs;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = stop_cfg();
  bad.divergence_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = stop_cfg();
  bad.mse_threshold = 0.0;
  CHECK_THROWS_AS(bad.validate(), Error);

  ItoConfig from = ito_config_from(make_preset("desk-scale"), 2);
  CHECK(from.level == 2);
  CHECK(from.max_epochs == 20);
  CHECK(from.ema_decay == 0.99);
}

TEST_CASE("stage 1 trains encoders, decoder and rec head; seg head frozen") {
  TinyRun& tr = tiny_run();
  TrainState st = init_train_state(tr.cfg, tr.manifest);
  REQUIRE(st.slides.size() == 2);
  CHECK(st.slides[0].encoder->has_params());

  const Array seg_before = group_bytes(st.model, "seg_head");
  const Array dec_before = group_bytes(st.model, "decoder");
  const Array rec_before = group_bytes(st.model, "rec_head");
  const Array enc_before = st.slides[0].encoder->grid().table(0)->data();

  const std::vector<EpochRecord> log = train_stage1(st);
  REQUIRE(log.size() == 2);
  CHECK(log[0].stage == 1);
  CHECK(log[0].epoch == 1);
  CHECK(log[1].epoch == 2);
  CHECK(log[0].slide_losses.size() == 2);
  CHECK(log[1].mean_loss < log[0].mean_loss);  // reconstruction improves

  // Frozen vs trained groups.
  CHECK((group_bytes(st.model, "seg_head") == seg_before).all());
  CHECK_FALSE((group_bytes(st.model, "decoder") == dec_before).all());
  CHECK_FALSE((group_bytes(st.model, "rec_head") == rec_before).all());
  CHECK_FALSE((st.slides[0].encoder->grid().table(0)->data() == enc_before).all());
  CHECK(st.stage == 2);
  CHECK(st.epochs_done == 0);
}

TEST_CASE("stage 2 trains only the seg head") {
  TinyRun& tr = tiny_run();
  TrainState st = init_train_state(tr.cfg, tr.manifest);
  train_stage1(st);

  const Array seg_before = group_bytes(st.model, "seg_head");
  const Array dec_before = group_bytes(st.model, "decoder");
  const Array rec_before = group_bytes(st.model, "rec_head");
  const Array enc_before = st.slides[1].encoder->grid().table(3)->data();

  const std::vector<EpochRecord> log = train_stage2(st);
  REQUIRE(log.size() == 1);  // total 3 - stage1 2
  CHECK(log[0].stage == 2);
  CHECK(log[0].mean_loss > 0.0);

  CHECK_FALSE((group_bytes(st.model, "seg_head") == seg_before).all());
  CHECK((group_bytes(st.model, "decoder") == dec_before).all());
  CHECK((group_bytes(st.model, "rec_head") == rec_before).all());
  CHECK((st.slides[1].encoder->grid().table(3)->data() == enc_before).all());
}

TEST_CASE("training is deterministic in the seed") {
  TinyRun& tr = tiny_run();
  TrainState a = init_train_state(tr.cfg, tr.manifest);
  TrainState b = init_train_state(tr.cfg, tr.manifest);
  train_stage1(a);
  train_stage1(b);
  CHECK((group_bytes(a.model, "decoder") == group_bytes(b.model, "decoder")).all());
  CHECK((a.slides[0].encoder->grid().table(5)->data() ==
         b.slides[0].encoder->grid().table(5)->data())
            .all());

  RunConfig other = tr.cfg;
  other.seed = 7;
  TrainState c = init_train_state(other, tr.manifest);
  CHECK_FALSE((group_bytes(a.model, "decoder") == group_bytes(c.model, "decoder")).all());
}

TEST_CASE("stage 1 target mse stops early and records eval mse") {
  TinyRun& tr = tiny_run();
  RunConfig cfg = tr.cfg;
  cfg.stage1_target_mse = 1.0;  // any epoch satisfies it
  TrainState st = init_train_state(cfg, tr.manifest);
  const std::vector<EpochRecord> log = train_stage1(st);
  REQUIRE(log.size() == 1);
  CHECK(log[0].eval_mse >= 0.0);
  CHECK(log[0].eval_mse < 1.0);
  CHECK(st.stage == 2);
}

TEST_CASE("train checkpoints resume bitwise") {
  TinyRun& tr = tiny_run();
  const std::string ckpt = tr.run_root + "/resume_test.ckpt";
  fs::create_directories(tr.run_root);

  // Uninterrupted: stage 1 (2 epochs) + stage 2 (1 epoch).
  TrainState full = init_train_state(tr.cfg, tr.manifest);
  train_stage1(full);
  train_stage2(full);

  // Interrupted after stage 1, checkpointed, reloaded, then stage 2.
  TrainState half = init_train_state(tr.cfg, tr.manifest);
  train_stage1(half);
  save_train_checkpoint(ckpt, half);
  TrainState resumed = load_train_checkpoint(ckpt, tr.cfg, tr.manifest);
  CHECK(resumed.stage == 2);
  CHECK(resumed.epochs_done == 0);
  CHECK(resumed.stage1_history.size() == half.stage1_history.size());
  train_stage2(resumed);

  for (const char* grp : {"decoder", "rec_head", "seg_head"}) {
    CHECK((group_bytes(resumed.model, grp) == group_bytes(full.model, grp)).all());
  }
  for (int l = 0; l < 12; ++l) {
    CHECK((resumed.slides[0].encoder->grid().table(l)->data() ==
           full.slides[0].encoder->grid().table(l)->data())
              .all());
  }

  // Mismatched config is rejected.
  RunConfig other = tr.cfg;
  other.lr = 123e-5;
  CHECK_THROWS_AS(load_train_checkpoint(ckpt, other, tr.manifest), Error);
}

TEST_CASE("ito adapts a fresh encoder and never touches the model") {
  TinyRun& tr = tiny_run();
  TrainState st = init_train_state(tr.cfg, tr.manifest);
  train_stage1(st);
  train_stage2(st);

  const SlidePyramid test_slide = load_slide(tr.manifest, find_slide(tr.manifest, "s101"));
  const SlideImages imgs = images_only(test_slide);
  CHECK(imgs.images.size() == 2);

  const Array dec_before = group_bytes(st.model, "decoder");
  const Array seg_before = group_bytes(st.model, "seg_head");

  const ItoConfig ito = ito_config_from(tr.cfg, 0);
  const ItoResult res = run_ito(imgs, st.model, tr.cfg, ito, 555);
  CHECK(res.encoder->has_params());
  REQUIRE_FALSE(res.trajectory.empty());
  CHECK(res.decision.stop);
  CHECK(res.trajectory.back() <= res.trajectory.front());

  CHECK((group_bytes(st.model, "decoder") == dec_before).all());
  CHECK((group_bytes(st.model, "seg_head") == seg_before).all());

  // Same seed, same result (bitwise trajectory and tables).
  const ItoResult res2 = run_ito(imgs, st.model, tr.cfg, ito, 555);
  REQUIRE(res2.trajectory.size() == res.trajectory.size());
  for (std::size_t i = 0; i < res.trajectory.size(); ++i)
    CHECK(res2.trajectory[i] == res.trajectory[i]);
  for (int l = 0; l < 12; ++l) {
    CHECK((res2.encoder->grid().table(l)->data() == res.encoder->grid().table(l)->data()).all());
  }

  // Different seed diverges.
  const ItoResult res3 = run_ito(imgs, st.model, tr.cfg, ito, 556);
  CHECK_FALSE(
      (res3.encoder->grid().table(0)->data() == res.encoder->grid().table(0)->data()).all());
}

TEST_CASE("ito with a stateless encoder is a single evaluation epoch") {
  TinyRun& tr = tiny_run();
  RunConfig cfg = tr.cfg;
  cfg.encoder_kind = "none";
  TrainState st = init_train_state(cfg, tr.manifest);
  train_stage1(st);

  const SlidePyramid test_slide = load_slide(tr.manifest, find_slide(tr.manifest, "s101"));
  const ItoResult res = run_ito(images_only(test_slide), st.model, cfg, ito_config_from(cfg, 1), 1);
  CHECK_FALSE(res.encoder->has_params());
  CHECK(res.trajectory.size() == 1);
  CHECK(res.decision.stop);
  CHECK(res.decision.reason == "max-epochs");
}

TEST_CASE("dense inference emits full-size outputs at every level") {
  TinyRun& tr = tiny_run();
  TrainState st = init_train_state(tr.cfg, tr.manifest);
  train_stage1(st);

  const SlidePyramid slide = load_slide(tr.manifest, find_slide(tr.manifest, "s1"));
  const SlideImages imgs = images_only(slide);
  for (int level = 0; level < 2; ++level) {
    const Index side = 128 >> level;
    const DenseOutputs out =
        infer_dense(imgs, level, st.model, *st.slides[0].encoder, tr.cfg.window);
    CHECK(out.reconstruction.shape() == Shape({side, side, 3}));
    CHECK(out.lesion_prob.shape() == Shape({side, side}));
    CHECK(out.mask.shape() == Shape({side, side}));
    CHECK((out.reconstruction.data() >= 0.0).all());
    CHECK((out.reconstruction.data() <= 1.0).all());
    CHECK((out.lesion_prob.data() >= 0.0).all());
    CHECK((out.lesion_prob.data() <= 1.0).all());
    CHECK(((out.mask.data() == 0.0) || (out.mask.data() == 1.0)).all());
  }

  // Masking all hash levels collapses the features to zero. The window
  // interior (beyond the convolutional receptive field, radius 10) then
  // reconstructs a single constant color; borders differ via zero padding.
  const LevelMask none{std::vector<bool>(12, false)};
  const DenseOutputs flat =
      infer_dense(imgs, 1, st.model, *st.slides[0].encoder, tr.cfg.window, &none);
  const Scalar mid = flat.reconstruction.data()[(32 * 64 + 32) * 3];
  for (Index r = 12; r < 52; ++r)
    for (Index c = 12; c < 52; ++c) CHECK(flat.reconstruction.data()[(r * 64 + c) * 3] == mid);
  const DenseOutputs unmasked =
      infer_dense(imgs, 1, st.model, *st.slides[0].encoder, tr.cfg.window);
  CHECK_FALSE((unmasked.reconstruction.data() == flat.reconstruction.data()).all());

  CHECK_THROWS_AS(infer_dense(imgs, 2, st.model, *st.slides[0].encoder, tr.cfg.window), Error);
}

TEST_CASE("window mse drops after one manual adam step") {
  TinyRun& tr = tiny_run();
  const SlidePyramid slide = load_slide(tr.manifest, find_slide(tr.manifest, "s1"));
  RunConfig cfg = tr.cfg;

  TrainState st = init_train_state(cfg, tr.manifest);
  SlideEncoder& enc = *st.slides[0].encoder;
  const WindowSampler sampler{cfg.window, Traversal::sequential, 0, false};
  const WindowBatch win = sample_windows(slide, 0, sampler).front();

  Tape tp;
  const std::vector<Var> leaves = enc.bind(tp, true);
  const Var feats = enc.encode(tp, leaves, win.coords, {win.h, win.w, Index(enc.feature_width())});
  const ModelVars mv = bind_model(tp, st.model, FreezePlan{true, true, false});
  const Var loss = mse_loss(tp, rec_head(tp, mv, decode(tp, mv, feats)), win.image);
  const Scalar before = tp.value(loss).value();
  tp.backward(loss);

  std::vector<TensorPtr> params = enc.params();
  for (const TensorPtr& p : st.model.group("decoder")) params.push_back(p);
  for (const TensorPtr& p : st.model.group("rec_head")) params.push_back(p);
  AdamConfig ac = cfg.adam_config();
  ac.lr = 1e-2;
  AdamState adam(params, ac);
  adam.step();
  for (const TensorPtr& p : params) p->zero_grad();

  Tape tp2;
  const std::vector<Var> leaves2 = enc.bind(tp2, false);
  const Var feats2 =
      enc.encode(tp2, leaves2, win.coords, {win.h, win.w, Index(enc.feature_width())});
  const ModelVars mv2 = bind_model(tp2, st.model, FreezePlan{false, false, false});
  const Var loss2 = mse_loss(tp2, rec_head(tp2, mv2, decode(tp2, mv2, feats2)), win.image);
  CHECK(tp2.value(loss2).value() < before);
}

TEST_CASE("train command writes the full run directory and refuses reruns") {
  TinyRun& tr = tiny_run();
  RunConfig cfg = tr.cfg;
  cfg.run_dir = tr.run_root + "/cmd_run";
  cfg.total_epochs = 2;
  cfg.stage1_epochs = 1;
  fs::remove_all(cfg.run_dir);

  CHECK_THROWS_AS(run_train_command(cfg, true), Error);  // nothing to resume

  run_train_command(cfg, false);
  const RunPaths paths = run_paths(cfg);
  CHECK(fs::exists(paths.config_json));
  CHECK(fs::exists(paths.train_state_ckpt));
  CHECK(fs::exists(paths.train_log_csv));

  std::ifstream log(paths.train_log_csv);
  std::string line;
  std::getline(log, line);
  CHECK(line == "stage,epoch,slide,loss,eval_mse");
  int rows = 0;
  bool mean_row = false;
  while (std::getline(log, line)) {
    ++rows;
    if (line.find(",mean,") != std::string::npos) mean_row = true;
  }
  CHECK(rows == 2 * 3);  // 2 epochs x (2 slides + mean)
  CHECK(mean_row);

  CHECK_THROWS_AS(run_train_command(cfg, false), Error);  // completed, no overwrite
}

TEST_CASE("metric rows format dice and psnr consistently") {
  CHECK(metrics_csv_header() == "slide,level,dice,psnr,tp,fp,fn\n");
  std::string csv = metrics_csv_header();
  DiceReport rep;
  rep.dice = 0.875;
  rep.tp = 700;
  rep.fp = 50;
  rep.fn = 150;
  append_metric_row(csv, "s7", 1, rep, 23.4567890123);
  CHECK(csv.find("s7,base/2,0.875000,23.4567890123,700,50,150\n") != std::string::npos);
  append_metric_row(csv, "s8", 0, rep, std::numeric_limits<Scalar>::infinity());
  CHECK(csv.find("s8,base,0.875000,inf,700,50,150\n") != std::string::npos);
}

TEST_CASE("images_only strips masks") {
  SlidePyramid p = build_pyramid("x", Tensor({16, 16, 3}), Tensor({16, 16}), 2);
  const SlideImages imgs = images_only(p);
  CHECK(imgs.id == "x");
  REQUIRE(imgs.images.size() == 2);
  CHECK(imgs.images[1].shape() == Shape({8, 8, 3}));
}
