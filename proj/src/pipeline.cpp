#include "inrseg/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "inrseg/checkpoint.hpp"
#include "inrseg/errors.hpp"
#include "inrseg/ops.hpp"
#include "inrseg/png_io.hpp"

namespace inrseg {

namespace {

namespace fs = std::filesystem;

std::uint64_t hash_tensor_bytes(const Tensor& t, std::uint64_t h) {
  const std::string_view bytes(reinterpret_cast<const char*>(t.data().data()),
                               static_cast<std::size_t>(t.data().size()) * sizeof(Scalar));
  return fnv1a64(bytes, h);
}

std::uint64_t hash_params(const std::vector<TensorPtr>& params) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const TensorPtr& p : params) h = hash_tensor_bytes(*p, h);
  return h;
}

// Named parameter list of the stage's trainable set, in optimizer order.
NamedParams stage_trainables(const TrainState& st) {
  NamedParams out;
  if (st.stage == 1) {
    for (const TrainSlide& s : st.slides) {
      const std::vector<TensorPtr> tables = s.encoder->params();
      for (std::size_t l = 0; l < tables.size(); ++l) {
        out.emplace_back("slide/" + s.pyramid.id + "/table" + std::to_string(l), tables[l]);
      }
    }
    for (const auto& [name, t] : st.model.named_params()) {
      if (name.rfind("decoder/", 0) == 0 || name.rfind("rec_head/", 0) == 0) {
        out.emplace_back(name, t);
      }
    }
  } else {
    for (const auto& [name, t] : st.model.named_params()) {
      if (name.rfind("seg_head/", 0) == 0) out.emplace_back(name, t);
    }
  }
  return out;
}

std::vector<TensorPtr> frozen_params(const TrainState& st) {
  std::vector<TensorPtr> out;
  if (st.stage == 1) {
    for (const TensorPtr& t : st.model.group("seg_head")) out.push_back(t);
  } else {
    for (const TrainSlide& s : st.slides) {
      for (const TensorPtr& t : s.encoder->params()) out.push_back(t);
    }
    for (const auto& [name, t] : st.model.named_params()) {
      if (name.rfind("seg_head/", 0) != 0) out.push_back(t);
    }
  }
  return out;
}

std::vector<TensorPtr> values_of(const NamedParams& named) {
  std::vector<TensorPtr> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

WindowSampler sampler_for(const RunConfig& cfg, const std::string& purpose,
                          const std::string& slide_id, int epoch) {
  WindowSampler s;
  s.window = cfg.window;
  s.order = cfg.window_order == "random" ? Traversal::random : Traversal::sequential;
  s.seed = Rng::derive(cfg.seed, purpose + "/" + slide_id + "/epoch" + std::to_string(epoch));
  s.skip_background = cfg.skip_background;
  return s;
}

void dump_diagnostics(const TrainState& st, int epoch, const std::string& slide_id,
                      const WindowBatch& batch, Scalar loss) {
  if (st.diagnostics_dir.empty()) return;
  fs::create_directories(st.diagnostics_dir);
  nlohmann::json j;
  j["stage"] = st.stage;
  j["epoch"] = epoch;
  j["slide"] = slide_id;
  j["window"] = {{"row0", batch.row0}, {"col0", batch.col0}, {"h", batch.h}, {"w", batch.w}};
  j["loss"] = std::isnan(loss) ? "nan" : "inf";
  std::ofstream out(fs::path(st.diagnostics_dir) / "nan_abort.json");
  out << j.dump(2) << '\n';
  save_png_rgb((fs::path(st.diagnostics_dir) / "nan_window.png").string(), batch.image);
}

struct WindowForward {
  Var rec;
  Var seg;
};

WindowForward forward_window(Tape& tp, const TrainState& st, const TrainSlide& slide,
                             const std::vector<Var>& enc_leaves, const ModelVars& mv,
                             const WindowBatch& batch, bool want_seg) {
  const Index d_z = st.cfg.model_dims().d_z;
  Var z = slide.encoder->encode(tp, enc_leaves, batch.coords, {batch.h, batch.w, d_z});
  Var f = decode(tp, mv, z);
  WindowForward out;
  out.rec = rec_head(tp, mv, f);
  if (want_seg) out.seg = seg_head(tp, mv, f);
  return out;
}

// Forward-only slide-mean reconstruction MSE at Base, pixel-weighted.
Scalar eval_stage1_mse(const TrainState& st) {
  Scalar mean_of_slides = 0.0;
  for (const TrainSlide& s : st.slides) {
    WindowSampler sampler;
    sampler.window = st.cfg.window;
    Scalar sq = 0.0;
    Scalar n = 0.0;
    for (const WindowBatch& batch : sample_windows(s.pyramid, 0, sampler)) {
      Tape tp;
      std::vector<Var> leaves = s.encoder->bind(tp, false);
      ModelVars mv = bind_model(tp, st.model, FreezePlan{false, false, false});
      WindowForward f = forward_window(tp, st, s, leaves, mv, batch, false);
      const Scalar mse = (tp.value(f.rec).data() - batch.image.data()).square().mean();
      const Scalar numel = static_cast<Scalar>(batch.image.data().size());
      sq += mse * numel;
      n += numel;
    }
    mean_of_slides += sq / n;
  }
  return mean_of_slides / static_cast<Scalar>(st.slides.size());
}

std::string sanitize_level(int level) {
  std::string tag = level_tag(level);
  for (char& c : tag) {
    if (c == '/') c = '_';
  }
  return tag;
}

std::string format_scalar(Scalar v) {
  char buf[40];
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

}  // namespace

// ---- early stopping --------------------------------------------------------

void ItoConfig::validate() const {
  if (max_epochs < 1) raise_invalid_config("ito max_epochs must be at least 1");
  if (warmup_epochs < 0 || warmup_epochs >= max_epochs) {
    raise_invalid_config("ito warmup must lie in [0, max_epochs)");
  }
  if (!(mse_threshold > 0.0)) raise_invalid_config("ito mse threshold must be positive");
  if (!(divergence_ratio > 1.0)) raise_invalid_config("ito divergence ratio must exceed 1");
  if (ema_decay < 0.0 || ema_decay >= 1.0) raise_invalid_config("ema decay must lie in [0,1)");
  if (level < 0) raise_invalid_config("ito level must be non-negative");
}

ItoConfig ito_config_from(const RunConfig& cfg, int level) {
  ItoConfig c;
  c.max_epochs = cfg.ito_max_epochs;
  c.mse_threshold = cfg.ito_mse_threshold;
  c.warmup_epochs = cfg.ito_warmup_epochs;
  c.divergence_ratio = cfg.ito_divergence_ratio;
  c.ema_decay = cfg.ema_decay;
  c.level = level;
  c.validate();
  return c;
}

StopDecision check_stop(const std::vector<Scalar>& history, const ItoConfig& cfg) {
  cfg.validate();
  if (history.empty()) raise_usage("check_stop needs a nonempty history");

  StopDecision d;
  d.epoch = static_cast<int>(history.size());
  d.current_mse = history.back();
  d.min_mse = *std::min_element(history.begin(), history.end());

  if (d.current_mse < cfg.mse_threshold) {
    d.stop = true;
    d.reason = "threshold";
  } else if (d.epoch > cfg.warmup_epochs && d.current_mse > cfg.divergence_ratio * d.min_mse) {
    d.stop = true;
    d.reason = "divergence";
  } else if (d.epoch >= cfg.max_epochs) {
    d.stop = true;
    d.reason = "max-epochs";
  }
  return d;
}

// ---- training ---------------------------------------------------------------

TrainState init_train_state(const RunConfig& cfg, const DatasetManifest& manifest) {
  cfg.validate();
  TrainState st;
  st.cfg = cfg;
  Rng model_rng(Rng::derive(cfg.seed, "model-init"));
  st.model = ModelParams::init(cfg.model_dims(), model_rng);

  for (const SlideRef& ref : manifest.slides) {
    if (ref.split != "train") continue;
    if (static_cast<int>(st.slides.size()) >= cfg.train_slides) break;
    TrainSlide s;
    s.pyramid = load_slide(manifest, ref);
    s.encoder = std::make_shared<SlideEncoder>(cfg.encoder_config(),
                                               Rng::derive(cfg.seed, "encoder/" + ref.id));
    st.slides.push_back(std::move(s));
  }
  if (static_cast<int>(st.slides.size()) < cfg.train_slides) {
    raise_invalid_config("manifest provides fewer train slides than configured");
  }
  return st;
}

namespace {

std::vector<EpochRecord> run_stage(TrainState& st, int stage) {
  if (st.stage != stage) raise_usage("training stages must run in order");
  const RunConfig& cfg = st.cfg;
  const int budget = stage == 1 ? cfg.stage1_epochs : cfg.total_epochs - cfg.stage1_epochs;

  NamedParams trainables = stage_trainables(st);
  if (!st.adam) {
    st.adam = std::make_unique<AdamState>(values_of(trainables), cfg.adam_config());
  }
  const std::vector<TensorPtr> frozen = frozen_params(st);
  const std::uint64_t frozen_hash = hash_params(frozen);

  const FreezePlan plan = stage == 1 ? FreezePlan{true, true, false}
                                     : FreezePlan{false, false, true};
  const bool train_encoders = stage == 1;

  std::vector<EpochRecord> records;
  for (int epoch = st.epochs_done + 1; epoch <= budget; ++epoch) {
    // One fixed window list per slide per epoch, consumed round-robin.
    std::vector<std::vector<WindowBatch>> windows;
    std::size_t max_windows = 0;
    for (const TrainSlide& s : st.slides) {
      windows.push_back(sample_windows(
          s.pyramid, 0,
          sampler_for(cfg, "stage" + std::to_string(stage), s.pyramid.id, epoch)));
      max_windows = std::max(max_windows, windows.back().size());
    }

    std::vector<Scalar> slide_loss(st.slides.size(), 0.0);
    std::vector<Scalar> slide_weight(st.slides.size(), 0.0);

    for (std::size_t wi = 0; wi < max_windows; ++wi) {
      for (std::size_t si = 0; si < st.slides.size(); ++si) {
        if (wi >= windows[si].size()) continue;
        const WindowBatch& batch = windows[si][wi];
        TrainSlide& slide = st.slides[si];

        for (const auto& [name, p] : trainables) p->drop_grad();

        Tape tp;
        std::vector<Var> leaves = slide.encoder->bind(tp, train_encoders);
        ModelVars mv = bind_model(tp, st.model, plan);
        WindowForward f = forward_window(tp, st, slide, leaves, mv, batch, stage == 2);

        Var loss;
        Scalar weight;
        if (stage == 1) {
          loss = mse_loss(tp, f.rec, batch.image);
          weight = static_cast<Scalar>(batch.image.data().size());
        } else {
          Tensor labels3({batch.h, batch.w, Index(1)}, batch.mask.data());
          Var bce = bce_loss(tp, f.seg, batch.mask);
          Var lesion = slice(tp, f.seg, 2, 1, 1);
          Var dice = dice_loss(tp, lesion, labels3, cfg.dice_squared_denom);
          loss = add(tp, bce, dice);
          weight = 1.0;
        }

        const Scalar lv = tp.value(loss).value();
        if (!std::isfinite(lv)) {
          dump_diagnostics(st, epoch, slide.pyramid.id, batch, lv);
          raise_numeric("non-finite loss in stage " + std::to_string(stage) + " epoch " +
                        std::to_string(epoch) + " slide " + slide.pyramid.id);
        }
        tp.backward(loss);
        st.adam->step();

        slide_loss[si] += lv * weight;
        slide_weight[si] += weight;
      }
    }

    EpochRecord rec;
    rec.stage = stage;
    rec.epoch = epoch;
    Scalar mean = 0.0;
    for (std::size_t si = 0; si < st.slides.size(); ++si) {
      const Scalar v = slide_loss[si] / slide_weight[si];
      rec.slide_losses.emplace_back(st.slides[si].pyramid.id, v);
      mean += v;
    }
    rec.mean_loss = mean / static_cast<Scalar>(st.slides.size());

    if (hash_params(frozen) != frozen_hash) {
      raise_invariant("frozen parameter group changed during stage " + std::to_string(stage));
    }

    st.epochs_done = epoch;
    bool done = false;
    if (stage == 1) {
      if (cfg.stage1_target_mse > 0.0) {
        rec.eval_mse = eval_stage1_mse(st);
        done = rec.eval_mse < cfg.stage1_target_mse;
      }
      st.stage1_history.push_back(rec.mean_loss);
    } else {
      st.stage2_history.push_back(rec.mean_loss);
    }

    records.push_back(rec);
    if (st.on_epoch) st.on_epoch(st, rec);
    if (done) break;
  }

  // Stage transition: fresh optimizer over the next trainable set.
  if (stage == 1) {
    st.stage = 2;
    st.epochs_done = 0;
    st.adam.reset();
  }
  return records;
}

}  // namespace

std::vector<EpochRecord> train_stage1(TrainState& st) { return run_stage(st, 1); }

std::vector<EpochRecord> train_stage2(TrainState& st) { return run_stage(st, 2); }

// ---- checkpointing ----------------------------------------------------------

void save_train_checkpoint(const std::string& path, const TrainState& st) {
  Checkpoint ckpt;
  ckpt.meta["config_hash"] = config_hash(st.cfg);
  ckpt.meta["stage"] = std::to_string(st.stage);
  ckpt.meta["epochs_done"] = std::to_string(st.epochs_done);
  ckpt.meta["adam_step"] = std::to_string(st.adam ? st.adam->step_count() : 0);

  for (const auto& [name, t] : st.model.named_params()) {
    ckpt.tensors.emplace("model/" + name, *t);
  }
  for (const TrainSlide& s : st.slides) {
    const std::vector<TensorPtr> tables = s.encoder->params();
    for (std::size_t l = 0; l < tables.size(); ++l) {
      ckpt.tensors.emplace("slide/" + s.pyramid.id + "/table" + std::to_string(l), *tables[l]);
    }
  }

  if (st.adam) {
    NamedParams trainables = stage_trainables(st);
    if (trainables.size() != st.adam->size()) {
      raise_invariant("optimizer parameter census mismatch while checkpointing");
    }
    AdamState& adam = *st.adam;
    for (std::size_t i = 0; i < trainables.size(); ++i) {
      ckpt.tensors.emplace("adam/m/" + trainables[i].first, adam.first_moment(i));
      ckpt.tensors.emplace("adam/v/" + trainables[i].first, adam.second_moment(i));
    }
  }

  auto history_tensor = [](const std::vector<Scalar>& h) {
    Tensor t({static_cast<Index>(h.size())});
    for (std::size_t i = 0; i < h.size(); ++i) t.data()[static_cast<Index>(i)] = h[i];
    return t;
  };
  if (!st.stage1_history.empty()) {
    ckpt.tensors.emplace("history/stage1", history_tensor(st.stage1_history));
  }
  if (!st.stage2_history.empty()) {
    ckpt.tensors.emplace("history/stage2", history_tensor(st.stage2_history));
  }
  save_checkpoint(path, ckpt);
}

TrainState load_train_checkpoint(const std::string& path, const RunConfig& cfg,
                                 const DatasetManifest& manifest) {
  Checkpoint ckpt = load_checkpoint(path);
  const auto hash_it = ckpt.meta.find("config_hash");
  if (hash_it == ckpt.meta.end() || hash_it->second != config_hash(cfg)) {
    raise_invalid_config("checkpoint '" + path + "' was written with a different config");
  }

  TrainState st = init_train_state(cfg, manifest);
  st.stage = std::stoi(ckpt.meta.at("stage"));
  st.epochs_done = std::stoi(ckpt.meta.at("epochs_done"));

  auto restore = [&](const std::string& name, const TensorPtr& dst) {
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) raise_io("checkpoint missing tensor '" + name + "'");
    if (it->second.shape() != dst->shape()) {
      raise_io("checkpoint tensor '" + name + "' has the wrong shape");
    }
    dst->data() = it->second.data();
  };

  for (const auto& [name, t] : st.model.named_params()) restore("model/" + name, t);
  for (const TrainSlide& s : st.slides) {
    const std::vector<TensorPtr> tables = s.encoder->params();
    for (std::size_t l = 0; l < tables.size(); ++l) {
      restore("slide/" + s.pyramid.id + "/table" + std::to_string(l), tables[l]);
    }
  }

  NamedParams trainables = stage_trainables(st);
  st.adam = std::make_unique<AdamState>(values_of(trainables), cfg.adam_config());
  const std::int64_t adam_step = std::stoll(ckpt.meta.at("adam_step"));
  st.adam->set_step_count(adam_step);
  // A checkpoint written at a stage boundary (next stage not yet started)
  // carries no optimizer tensors; the fresh zero moments are already correct.
  if (adam_step > 0) {
    for (std::size_t i = 0; i < trainables.size(); ++i) {
      const auto m = ckpt.tensors.find("adam/m/" + trainables[i].first);
      const auto v = ckpt.tensors.find("adam/v/" + trainables[i].first);
      if (m == ckpt.tensors.end() || v == ckpt.tensors.end()) {
        raise_io("checkpoint missing optimizer state for '" + trainables[i].first + "'");
      }
      st.adam->first_moment(i) = m->second;
      st.adam->second_moment(i) = v->second;
    }
  }

  auto restore_history = [&](const std::string& name, std::vector<Scalar>& h) {
    const auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) return;
    h.assign(it->second.data().data(), it->second.data().data() + it->second.data().size());
  };
  restore_history("history/stage1", st.stage1_history);
  restore_history("history/stage2", st.stage2_history);
  return st;
}

// ---- inference-time optimization --------------------------------------------

SlideImages images_only(const SlidePyramid& p) {
  SlideImages s;
  s.id = p.id;
  for (const LevelData& lv : p.levels) s.images.push_back(lv.image);
  return s;
}

namespace {

struct ImageWindow {
  Tile tile;
  Tensor coords;  // {h*w,2}
  Tensor image;   // {h,w,3}
};

std::vector<ImageWindow> image_windows(const SlideImages& slide, int level, Index window) {
  if (level < 0 || level >= static_cast<int>(slide.images.size())) {
    raise_domain("pyramid level out of range");
  }
  const Tensor& img = slide.images[static_cast<std::size_t>(level)];
  const Index h = img.shape()[0];
  const Index w = img.shape()[1];
  const Index base_h = slide.images[0].shape()[0];
  const Index base_w = slide.images[0].shape()[1];

  std::vector<ImageWindow> out;
  for (const Tile& t : tile_level(h, w, window)) {
    ImageWindow iw;
    iw.tile = t;
    iw.coords = Tensor({t.h * t.w, 2});
    iw.image = Tensor({t.h, t.w, 3});
    for (Index r = 0; r < t.h; ++r) {
      for (Index c = 0; c < t.w; ++c) {
        const auto [x, y] = normalize_pixel(base_h, base_w, level, t.row0 + r, t.col0 + c);
        iw.coords.data()[(r * t.w + c) * 2] = x;
        iw.coords.data()[(r * t.w + c) * 2 + 1] = y;
        for (Index ch = 0; ch < 3; ++ch) {
          iw.image.data()[(r * t.w + c) * 3 + ch] =
              img.data()[((t.row0 + r) * w + (t.col0 + c)) * 3 + ch];
        }
      }
    }
    out.push_back(std::move(iw));
  }
  return out;
}

}  // namespace

ItoResult run_ito(const SlideImages& slide, const ModelParams& model, const RunConfig& cfg,
                  const ItoConfig& ito, std::uint64_t encoder_seed) {
  ito.validate();
  auto encoder = std::make_shared<SlideEncoder>(cfg.encoder_config(), encoder_seed);
  const Index d_z = encoder->feature_width();
  std::vector<ImageWindow> windows = image_windows(slide, ito.level, cfg.window);

  ItoResult result;
  result.encoder = encoder;

  const std::vector<TensorPtr> enc_params = encoder->params();
  std::vector<TensorPtr> global;
  for (const auto& [name, t] : model.named_params()) global.push_back(t);
  const std::uint64_t global_hash = hash_params(global);
  for (const TensorPtr& t : global) t->drop_grad();

  auto epoch_pass = [&](bool optimize, AdamState* adam, EmaState* ema,
                        const std::vector<std::size_t>& order) {
    Scalar sq = 0.0;
    Scalar n = 0.0;
    for (const std::size_t wi : order) {
      const ImageWindow& w = windows[wi];
      for (const TensorPtr& p : enc_params) p->drop_grad();
      Tape tp;
      std::vector<Var> leaves = encoder->bind(tp, optimize);
      ModelVars mv = bind_model(tp, model, FreezePlan{false, false, false});
      Var z = encoder->encode(tp, leaves, w.coords, {w.tile.h, w.tile.w, d_z});
      Var r = rec_head(tp, mv, decode(tp, mv, z));
      Var loss = mse_loss(tp, r, w.image);
      const Scalar lv = tp.value(loss).value();
      if (!std::isfinite(lv)) {
        raise_numeric("non-finite reconstruction loss during inference-time optimization");
      }
      if (optimize) {
        tp.backward(loss);
        for (const TensorPtr& t : global) {
          if (t->has_grad()) raise_invariant("gradient reached a frozen global group");
        }
        adam->step();
        ema->update();
      }
      const Scalar numel = static_cast<Scalar>(w.image.data().size());
      sq += lv * numel;
      n += numel;
    }
    return sq / n;
  };

  auto window_order = [&](int epoch) {
    std::vector<std::size_t> order(windows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    if (cfg.window_order == "random") {
      Rng rng(Rng::derive(encoder_seed, "ito-windows/epoch" + std::to_string(epoch)));
      rng.shuffle(order);
    }
    return order;
  };

  if (enc_params.empty()) {
    // Stateless encoders have nothing to optimize: a single evaluation epoch
    // and the budget is vacuously exhausted.
    const Scalar mse = epoch_pass(false, nullptr, nullptr, window_order(1));
    result.trajectory.push_back(mse);
    result.decision =
        StopDecision{true, "max-epochs", 1, mse, mse};
    return result;
  }

  AdamState adam(enc_params, cfg.adam_config());
  EmaState ema(enc_params, ito.ema_decay);
  for (int epoch = 1;; ++epoch) {
    const Scalar mse = epoch_pass(true, &adam, &ema, window_order(epoch));
    result.trajectory.push_back(mse);
    result.decision = check_stop(result.trajectory, ito);
    if (result.decision.stop) break;
  }

  if (hash_params(global) != global_hash) {
    raise_invariant("global parameters changed during inference-time optimization");
  }
  ema.swap();  // EMA weights become the inference parameters
  return result;
}

// ---- dense inference ----------------------------------------------------------

DenseOutputs infer_dense(const SlideImages& slide, int level, const ModelParams& model,
                         const SlideEncoder& encoder, Index window,
                         const LevelMask* level_mask) {
  const Index d_z = encoder.feature_width();
  if (level < 0 || level >= static_cast<int>(slide.images.size())) {
    raise_domain("pyramid level out of range");
  }
  const Tensor& img = slide.images[static_cast<std::size_t>(level)];
  const Index h = img.shape()[0];
  const Index w = img.shape()[1];

  DenseOutputs out;
  out.reconstruction = Tensor({h, w, 3});
  out.lesion_prob = Tensor({h, w});
  out.mask = Tensor({h, w});

  for (const ImageWindow& win : image_windows(slide, level, window)) {
    Tape tp;
    std::vector<Var> leaves = encoder.bind(tp, false);
    ModelVars mv = bind_model(tp, model, FreezePlan{false, false, false});
    Var z = encoder.encode(tp, leaves, win.coords, {win.tile.h, win.tile.w, d_z}, level_mask);
    Var f = decode(tp, mv, z);
    Var rv = rec_head(tp, mv, f);
    Var sv = seg_head(tp, mv, f);
    const Tensor& rec = tp.value(rv);
    const Tensor& seg = tp.value(sv);

    for (Index r = 0; r < win.tile.h; ++r) {
      for (Index c = 0; c < win.tile.w; ++c) {
        const Index dst = (win.tile.row0 + r) * w + (win.tile.col0 + c);
        const Index src = r * win.tile.w + c;
        for (Index ch = 0; ch < 3; ++ch) {
          out.reconstruction.data()[dst * 3 + ch] = rec.data()[src * 3 + ch];
        }
        const Scalar p0 = seg.data()[src * 2];
        const Scalar p1 = seg.data()[src * 2 + 1];
        out.lesion_prob.data()[dst] = p1;
        out.mask.data()[dst] = p1 > p0 ? 1.0 : 0.0;
      }
    }
  }
  return out;
}

// ---- run directory -------------------------------------------------------------

RunPaths run_paths(const RunConfig& cfg) {
  RunPaths p;
  p.root = resolve_run_dir(cfg.run_dir);
  p.config_json = (fs::path(p.root) / "config.json").string();
  p.checkpoint_dir = (fs::path(p.root) / "checkpoints").string();
  p.train_state_ckpt = (fs::path(p.checkpoint_dir) / "train_state.ckpt").string();
  p.train_log_csv = (fs::path(p.root) / "train_log.csv").string();
  p.metrics_csv = (fs::path(p.root) / "metrics.csv").string();
  p.outputs_dir = (fs::path(p.root) / "outputs").string();
  return p;
}

RunPaths prepare_run_dir(const RunConfig& cfg) {
  RunPaths p = run_paths(cfg);
  fs::create_directories(p.root);
  fs::create_directories(p.checkpoint_dir);
  fs::create_directories(p.outputs_dir);
  save_config(p.config_json, cfg);
  return p;
}

std::string slide_output_dir(const RunPaths& paths, const std::string& slide_id, int level) {
  const fs::path dir = fs::path(paths.outputs_dir) / slide_id / sanitize_level(level);
  fs::create_directories(dir);
  return dir.string();
}

void write_epoch_log(const std::string& path, const std::vector<EpochRecord>& records) {
  std::string csv = "stage,epoch,slide,loss,eval_mse\n";
  for (const EpochRecord& r : records) {
    for (const auto& [id, loss] : r.slide_losses) {
      csv += std::to_string(r.stage) + "," + std::to_string(r.epoch) + "," + id + "," +
             format_scalar(loss) + ",\n";
    }
    csv += std::to_string(r.stage) + "," + std::to_string(r.epoch) + ",mean," +
           format_scalar(r.mean_loss) + "," +
           (r.eval_mse >= 0.0 ? format_scalar(r.eval_mse) : std::string()) + "\n";
  }
  std::ofstream out(path);
  if (!out) raise_io("cannot write training log '" + path + "'");
  out << csv;
}

std::string metrics_csv_header() { return "slide,level,dice,psnr,tp,fp,fn\n"; }

void append_metric_row(std::string& csv, const std::string& slide, int level,
                       const DiceReport& dice, Scalar psnr_db) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%s,%lld,%lld,%lld\n", slide.c_str(),
                level_tag(level).c_str(), dice.dice, format_scalar(psnr_db).c_str(), dice.tp,
                dice.fp, dice.fn);
  csv += buf;
}

void run_train_command(const RunConfig& cfg, bool resume) {
  const fs::path final_ckpt = fs::path(run_paths(cfg).checkpoint_dir) / "stage2.ckpt";
  if (fs::exists(final_ckpt)) {
    raise_usage("run directory already holds a completed training run: " + final_ckpt.string());
  }
  const RunPaths paths = prepare_run_dir(cfg);
  if (resume && !fs::exists(paths.train_state_ckpt)) {
    raise_usage("nothing to resume: '" + paths.train_state_ckpt + "' does not exist");
  }

  const DatasetManifest manifest = load_manifest(cfg.manifest);
  TrainState st = resume ? load_train_checkpoint(paths.train_state_ckpt, cfg, manifest)
                         : init_train_state(cfg, manifest);
  st.diagnostics_dir = (fs::path(paths.root) / "diagnostics").string();

  std::vector<EpochRecord> all_records;
  st.on_epoch = [&](const TrainState& state, const EpochRecord& rec) {
    all_records.push_back(rec);
    save_train_checkpoint(paths.train_state_ckpt, state);
  };

  if (st.stage == 1) {
    train_stage1(st);
    save_train_checkpoint((fs::path(paths.checkpoint_dir) / "stage1.ckpt").string(), st);
  }
  train_stage2(st);
  save_train_checkpoint(final_ckpt.string(), st);
  write_epoch_log(paths.train_log_csv, all_records);
}

}  // namespace inrseg
