#include "inrseg/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "inrseg/errors.hpp"

namespace inrseg {

namespace {

template <typename T>
T take(nlohmann::json& obj, const std::string& where, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    raise_invalid_config("missing config key '" + where + "." + key + "'");
  }
  T v{};
  try {
    v = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    raise_invalid_config("config key '" + where + "." + key + "' has the wrong type");
  }
  obj.erase(it);
  return v;
}

nlohmann::json take_object(nlohmann::json& obj, const char* key) {
  auto it = obj.find(key);
  if (it == obj.end() || !it->is_object()) {
    raise_invalid_config(std::string("missing config section '") + key + "'");
  }
  nlohmann::json section = std::move(*it);
  obj.erase(it);
  return section;
}

void expect_empty(const nlohmann::json& obj, const std::string& where) {
  if (!obj.empty()) {
    raise_invalid_config("unknown config key '" + where + "." + obj.begin().key() + "'");
  }
}

void flatten_dotted(const nlohmann::json& j, const std::string& prefix,
                    std::vector<std::pair<std::string, nlohmann::json>>& out) {
  if (j.is_object() || j.is_array()) {
    if (j.is_object()) {
      for (const auto& [k, v] : j.items()) {
        flatten_dotted(v, prefix.empty() ? k : prefix + "." + k, out);
      }
    } else {
      Index i = 0;
      for (const auto& v : j) {
        flatten_dotted(v, prefix + "." + std::to_string(i), out);
        ++i;
      }
    }
  } else {
    out.emplace_back(prefix, j);
  }
}

}  // namespace

void RunConfig::validate() const {
  if (preset != "desk-scale" && preset != "paper-scale") {
    raise_invalid_config("unknown preset '" + preset + "' (expected desk-scale|paper-scale)");
  }
  if (canvas < 128) raise_invalid_config("canvas must be at least 128");
  if (pyramid_levels < 1) raise_invalid_config("pyramid_levels must be at least 1");
  if (train_slides < 1 || test_slides < 1) raise_invalid_config("need at least one slide per split");
  if (window < 8) raise_invalid_config("window must be at least 8");
  if (window_order != "sequential" && window_order != "random") {
    raise_invalid_config("window_order must be sequential or random");
  }

  const EncoderKind kind = encoder_kind_from_string(encoder_kind);
  if (kind == EncoderKind::hash) grid.validate();
  if (kind == EncoderKind::nerf_pe && nerf_freqs < 1) {
    raise_invalid_config("nerf_freqs must be at least 1");
  }
  model_dims().validate();

  if (stage1_epochs < 1) {
    raise_invalid_config(
        "stage1_epochs must be at least 1: reconstruction training precedes segmentation "
        "training; joint-from-scratch schedules are not supported");
  }
  if (stage1_epochs >= total_epochs) {
    raise_invalid_config("stage1_epochs must be smaller than total_epochs");
  }
  if (!(lr > 0.0)) raise_invalid_config("lr must be positive");
  if (adam_beta1 < 0.0 || adam_beta1 >= 1.0 || adam_beta2 < 0.0 || adam_beta2 >= 1.0) {
    raise_invalid_config("adam betas must lie in [0,1)");
  }
  if (!(adam_eps > 0.0)) raise_invalid_config("adam_eps must be positive");
  if (stage1_target_mse < 0.0) raise_invalid_config("stage1_target_mse must be >= 0");

  if (ito_max_epochs < 1) raise_invalid_config("ito_max_epochs must be at least 1");
  if (ito_warmup_epochs < 0 || ito_warmup_epochs >= ito_max_epochs) {
    raise_invalid_config("ito_warmup_epochs must lie in [0, ito_max_epochs)");
  }
  if (!(ito_mse_threshold > 0.0)) raise_invalid_config("ito_mse_threshold must be positive");
  if (!(ito_divergence_ratio > 1.0)) raise_invalid_config("ito_divergence_ratio must exceed 1");
  if (ema_decay < 0.0 || ema_decay >= 1.0) raise_invalid_config("ema_decay must lie in [0,1)");

  if (kind == EncoderKind::hash && decouple_split != -1 &&
      (decouple_split < 1 || decouple_split > grid.levels - 1)) {
    raise_invalid_config("decouple_split must be -1 or in [1, levels-1]");
  }
  if (spectrum_patch < 8 || (spectrum_patch & (spectrum_patch - 1)) != 0) {
    raise_invalid_config("spectrum_patch must be a power of two >= 8");
  }
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig e;
  e.kind = encoder_kind_from_string(encoder_kind);
  e.grid = grid;
  e.nerf_freqs = nerf_freqs;
  return e;
}

ModelDims RunConfig::model_dims() const {
  ModelDims d;
  d.d_z = encoder_config().feature_width();
  d.conv_width = conv_width;
  d.conv_layers = conv_layers;
  d.point_width = point_width;
  d.point_layers = point_layers;
  d.fused_width = fused_width;
  d.head_width = head_width;
  d.head_dilations = head_dilations;
  return d;
}

AdamConfig RunConfig::adam_config() const {
  AdamConfig a;
  a.lr = lr;
  a.beta1 = adam_beta1;
  a.beta2 = adam_beta2;
  a.eps = adam_eps;
  return a;
}

RunConfig make_preset(const std::string& name) {
  RunConfig cfg;  // struct defaults are the desk-scale preset
  if (name == "desk-scale") {
    cfg.preset = "desk-scale";
  } else if (name == "paper-scale") {
    cfg.preset = "paper-scale";
    cfg.canvas = 4096;
    cfg.train_slides = 39;
    cfg.test_slides = 22;
    cfg.window = 1024;
    cfg.grid.levels = 21;
    cfg.grid.base_resolution = 16;
    cfg.grid.level_scale = 1.5;
    cfg.grid.table_size = Index(1) << 21;
    cfg.grid.features = 2;
    cfg.conv_width = 64;
    cfg.point_width = 64;
    cfg.fused_width = 128;
    cfg.head_width = 64;
    cfg.total_epochs = 200;
    cfg.stage1_epochs = 100;
    cfg.lr = 1e-5;
  } else {
    raise_invalid_config("unknown preset '" + name + "' (expected desk-scale|paper-scale)");
  }
  return cfg;
}

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["preset"] = cfg.preset;
  j["seed"] = cfg.seed;
  j["run_dir"] = cfg.run_dir;

  j["data"]["manifest"] = cfg.manifest;
  j["data"]["canvas"] = cfg.canvas;
  j["data"]["pyramid_levels"] = cfg.pyramid_levels;
  j["data"]["train_slides"] = cfg.train_slides;
  j["data"]["test_slides"] = cfg.test_slides;
  j["data"]["window"] = cfg.window;
  j["data"]["window_order"] = cfg.window_order;
  j["data"]["skip_background"] = cfg.skip_background;

  j["encoder"]["kind"] = cfg.encoder_kind;
  j["encoder"]["nerf_freqs"] = cfg.nerf_freqs;
  j["encoder"]["grid"]["levels"] = cfg.grid.levels;
  j["encoder"]["grid"]["base_resolution"] = cfg.grid.base_resolution;
  j["encoder"]["grid"]["level_scale"] = cfg.grid.level_scale;
  j["encoder"]["grid"]["table_size"] = cfg.grid.table_size;
  j["encoder"]["grid"]["features"] = cfg.grid.features;

  j["model"]["conv_width"] = cfg.conv_width;
  j["model"]["conv_layers"] = cfg.conv_layers;
  j["model"]["point_width"] = cfg.point_width;
  j["model"]["point_layers"] = cfg.point_layers;
  j["model"]["fused_width"] = cfg.fused_width;
  j["model"]["head_width"] = cfg.head_width;
  j["model"]["head_dilations"] = cfg.head_dilations;

  j["train"]["total_epochs"] = cfg.total_epochs;
  j["train"]["stage1_epochs"] = cfg.stage1_epochs;
  j["train"]["lr"] = cfg.lr;
  j["train"]["adam_beta1"] = cfg.adam_beta1;
  j["train"]["adam_beta2"] = cfg.adam_beta2;
  j["train"]["adam_eps"] = cfg.adam_eps;
  j["train"]["stage1_target_mse"] = cfg.stage1_target_mse;

  j["ito"]["max_epochs"] = cfg.ito_max_epochs;
  j["ito"]["mse_threshold"] = cfg.ito_mse_threshold;
  j["ito"]["warmup_epochs"] = cfg.ito_warmup_epochs;
  j["ito"]["divergence_ratio"] = cfg.ito_divergence_ratio;
  j["ito"]["ema_decay"] = cfg.ema_decay;

  j["experiments"]["decouple_split"] = cfg.decouple_split;
  j["experiments"]["spectrum_patch"] = cfg.spectrum_patch;
  j["experiments"]["dice_squared_denom"] = cfg.dice_squared_denom;
  return j;
}

RunConfig config_from_json(const nlohmann::json& input) {
  if (!input.is_object()) raise_invalid_config("config root must be a JSON object");
  nlohmann::json j = input;
  RunConfig cfg;
  cfg.preset = take<std::string>(j, "", "preset");
  cfg.seed = take<std::uint64_t>(j, "", "seed");
  cfg.run_dir = take<std::string>(j, "", "run_dir");

  nlohmann::json data = take_object(j, "data");
  cfg.manifest = take<std::string>(data, "data", "manifest");
  cfg.canvas = take<Index>(data, "data", "canvas");
  cfg.pyramid_levels = take<int>(data, "data", "pyramid_levels");
  cfg.train_slides = take<int>(data, "data", "train_slides");
  cfg.test_slides = take<int>(data, "data", "test_slides");
  cfg.window = take<Index>(data, "data", "window");
  cfg.window_order = take<std::string>(data, "data", "window_order");
  cfg.skip_background = take<bool>(data, "data", "skip_background");
  expect_empty(data, "data");

  nlohmann::json enc = take_object(j, "encoder");
  cfg.encoder_kind = take<std::string>(enc, "encoder", "kind");
  cfg.nerf_freqs = take<int>(enc, "encoder", "nerf_freqs");
  nlohmann::json grid = take_object(enc, "grid");
  cfg.grid.levels = take<int>(grid, "encoder.grid", "levels");
  cfg.grid.base_resolution = take<int>(grid, "encoder.grid", "base_resolution");
  cfg.grid.level_scale = take<Scalar>(grid, "encoder.grid", "level_scale");
  cfg.grid.table_size = take<Index>(grid, "encoder.grid", "table_size");
  cfg.grid.features = take<int>(grid, "encoder.grid", "features");
  expect_empty(grid, "encoder.grid");
  expect_empty(enc, "encoder");

  nlohmann::json model = take_object(j, "model");
  cfg.conv_width = take<int>(model, "model", "conv_width");
  cfg.conv_layers = take<int>(model, "model", "conv_layers");
  cfg.point_width = take<int>(model, "model", "point_width");
  cfg.point_layers = take<int>(model, "model", "point_layers");
  cfg.fused_width = take<int>(model, "model", "fused_width");
  cfg.head_width = take<int>(model, "model", "head_width");
  cfg.head_dilations = take<std::vector<int>>(model, "model", "head_dilations");
  expect_empty(model, "model");

  nlohmann::json train = take_object(j, "train");
  cfg.total_epochs = take<int>(train, "train", "total_epochs");
  cfg.stage1_epochs = take<int>(train, "train", "stage1_epochs");
  cfg.lr = take<Scalar>(train, "train", "lr");
  cfg.adam_beta1 = take<Scalar>(train, "train", "adam_beta1");
  cfg.adam_beta2 = take<Scalar>(train, "train", "adam_beta2");
  cfg.adam_eps = take<Scalar>(train, "train", "adam_eps");
  cfg.stage1_target_mse = take<Scalar>(train, "train", "stage1_target_mse");
  expect_empty(train, "train");

  nlohmann::json ito = take_object(j, "ito");
  cfg.ito_max_epochs = take<int>(ito, "ito", "max_epochs");
  cfg.ito_mse_threshold = take<Scalar>(ito, "ito", "mse_threshold");
  cfg.ito_warmup_epochs = take<int>(ito, "ito", "warmup_epochs");
  cfg.ito_divergence_ratio = take<Scalar>(ito, "ito", "divergence_ratio");
  cfg.ema_decay = take<Scalar>(ito, "ito", "ema_decay");
  expect_empty(ito, "ito");

  nlohmann::json exp = take_object(j, "experiments");
  cfg.decouple_split = take<int>(exp, "experiments", "decouple_split");
  cfg.spectrum_patch = take<Index>(exp, "experiments", "spectrum_patch");
  cfg.dice_squared_denom = take<bool>(exp, "experiments", "dice_squared_denom");
  expect_empty(exp, "experiments");

  expect_empty(j, "");
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) raise_io("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    raise_io("bad config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream out(path);
  if (!out) raise_io("cannot write config '" + path + "'");
  out << to_json(cfg).dump(2) << '\n';
}

RunConfig resolve_config(const std::string& preset_or_path,
                         const std::vector<std::string>& overrides) {
  nlohmann::json j;
  if (preset_or_path == "desk-scale" || preset_or_path == "paper-scale") {
    j = to_json(make_preset(preset_or_path));
  } else if (std::filesystem::exists(preset_or_path)) {
    j = to_json(load_config(preset_or_path));
  } else {
    raise_invalid_config("'" + preset_or_path + "' is neither a preset name nor a config file");
  }

  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos || eq == 0) {
      raise_usage("override '" + ov + "' is not key=value");
    }
    const std::string key = ov.substr(0, eq);
    const std::string raw = ov.substr(eq + 1);
    nlohmann::json value;
    try {
      value = nlohmann::json::parse(raw);
    } catch (const nlohmann::json::exception&) {
      value = raw;  // bare strings like desk-scale
    }
    nlohmann::json* node = &j;
    std::size_t pos = 0;
    while (true) {
      const std::size_t dot = key.find('.', pos);
      const std::string part = key.substr(pos, dot == std::string::npos ? dot : dot - pos);
      if (part.empty()) raise_usage("override key '" + key + "' is malformed");
      if (dot == std::string::npos) {
        (*node)[part] = value;
        break;
      }
      node = &(*node)[part];
      pos = dot + 1;
    }
  }
  return config_from_json(j);
}

std::string config_hash(const RunConfig& cfg) {
  const std::uint64_t h = fnv1a64(to_json(cfg).dump());
  char buf[19];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::pair<std::string, nlohmann::json>> fa;
  std::vector<std::pair<std::string, nlohmann::json>> fb;
  flatten_dotted(to_json(a), "", fa);
  flatten_dotted(to_json(b), "", fb);

  std::vector<std::string> diff;
  std::size_t i = 0;
  std::size_t k = 0;
  while (i < fa.size() || k < fb.size()) {
    if (i < fa.size() && k < fb.size() && fa[i].first == fb[k].first) {
      if (fa[i].second != fb[k].second) diff.push_back(fa[i].first);
      ++i;
      ++k;
    } else if (k >= fb.size() || (i < fa.size() && fa[i].first < fb[k].first)) {
      diff.push_back(fa[i].first);
      ++i;
    } else {
      diff.push_back(fb[k].first);
      ++k;
    }
  }
  return diff;
}

std::string resolve_run_dir(const std::string& run_dir) {
  const char* root = std::getenv("INRSEG_RUN_ROOT");
  if (!root || !*root || std::filesystem::path(run_dir).is_absolute()) return run_dir;
  return (std::filesystem::path(root) / run_dir).string();
}

}  // namespace inrseg
