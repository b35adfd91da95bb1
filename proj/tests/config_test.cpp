#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "inrseg/config.hpp"

using namespace inrseg;

TEST_CASE("presets pin the two documented scales") {
  const RunConfig desk = make_preset("desk-scale");
  CHECK(desk.canvas == 512);
  CHECK(desk.grid.levels == 12);
  CHECK(desk.grid.base_resolution == 8);
  CHECK(desk.grid.level_scale == 1.5);
  CHECK(desk.grid.table_size == (Index(1) << 14));
  CHECK(desk.grid.features == 2);
  CHECK(desk.model_dims().d_z == 24);
  CHECK(desk.window == 64);
  CHECK(desk.pyramid_levels == 3);

  const RunConfig paper = make_preset("paper-scale");
  CHECK(paper.grid.levels == 21);
  CHECK(paper.grid.base_resolution == 16);
  CHECK(paper.grid.table_size == (Index(1) << 21));
  CHECK(paper.model_dims().d_z == 42);
  CHECK(paper.conv_width == 64);
  CHECK(paper.point_width == 64);
  CHECK(paper.fused_width == 128);
  CHECK(paper.head_width == 64);
  CHECK(paper.total_epochs == 200);
  CHECK(paper.stage1_epochs == 100);
  CHECK(paper.lr == 1e-5);

  CHECK_THROWS_AS(make_preset("warehouse-scale"), Error);
}

TEST_CASE("validation rejects inconsistent settings") {
  RunConfig cfg = make_preset("desk-scale");
  CHECK_NOTHROW(cfg.validate());

  cfg.stage1_epochs = cfg.total_epochs;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = make_preset("desk-scale");
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = make_preset("desk-scale");
  cfg.ito_warmup_epochs = cfg.ito_max_epochs;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = make_preset("desk-scale");
  cfg.ito_divergence_ratio = 1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = make_preset("desk-scale");
  cfg.grid.table_size = 1000;
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = make_preset("desk-scale");
  cfg.encoder_kind = "wavelet";
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = make_preset("desk-scale");
  cfg.window_order = "spiral";
  CHECK_THROWS_AS(cfg.validate(), Error);

  cfg = make_preset("desk-scale");
  cfg.head_dilations.clear();
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("json round trip preserves every field") {
  RunConfig cfg = make_preset("desk-scale");
  cfg.seed = 99;
  cfg.lr = 3.5e-4;
  cfg.head_dilations = {1, 3};
  cfg.skip_background = true;
  const RunConfig back = config_from_json(to_json(cfg));
  CHECK(config_diff(cfg, back).empty());
  CHECK(config_hash(cfg) == config_hash(back));
}

TEST_CASE("config files save and load") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "inrseg_cfg_test.json").string();
  RunConfig cfg = make_preset("desk-scale");
  cfg.run_dir = "runs/x";
  cfg.total_epochs = 10;
  cfg.stage1_epochs = 4;
  save_config(path, cfg);
  const RunConfig back = load_config(path);
  CHECK(config_diff(cfg, back).empty());
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_config(path), Error);
}

TEST_CASE("unknown json keys are rejected") {
  nlohmann::json j = to_json(make_preset("desk-scale"));
  j["train"]["learning_rate"] = 0.1;  // typo'd key
  CHECK_THROWS_AS(config_from_json(j), Error);
  nlohmann::json j2 = to_json(make_preset("desk-scale"));
  j2["optimizer"] = "sgd";  // unknown section
  CHECK_THROWS_AS(config_from_json(j2), Error);
}

TEST_CASE("dotted overrides reach nested fields") {
  const RunConfig cfg = resolve_config(
      "desk-scale", {"train.lr=0.01", "encoder.grid.levels=6", "data.window=32",
                     "encoder.kind=nerf-pe", "data.skip_background=true", "seed=42"});
  CHECK(cfg.lr == 0.01);
  CHECK(cfg.grid.levels == 6);
  CHECK(cfg.window == 32);
  CHECK(cfg.encoder_kind == "nerf-pe");
  CHECK(cfg.skip_background);
  CHECK(cfg.seed == 42);

  CHECK_THROWS_AS(resolve_config("desk-scale", {"train.lr"}), Error);          // no '='
  CHECK_THROWS_AS(resolve_config("desk-scale", {"nope.key=1"}), Error);        // unknown
  CHECK_THROWS_AS(resolve_config("desk-scale", {"train.lr=banana"}), Error);   // bad type
  CHECK_THROWS_AS(resolve_config("desk-scale", {"train.lr=-1"}), Error);       // invalid
}

TEST_CASE("config hash is stable and sensitive") {
  const RunConfig a = make_preset("desk-scale");
  const RunConfig b = make_preset("desk-scale");
  CHECK(config_hash(a) == config_hash(b));
  RunConfig c = a;
  c.seed = 2;
  CHECK(config_hash(a) != config_hash(c));
  RunConfig d = a;
  d.grid.level_scale = 1.6;
  CHECK(config_hash(a) != config_hash(d));
}

TEST_CASE("config diff names dotted keys") {
  const RunConfig a = make_preset("desk-scale");
  RunConfig b = a;
  b.encoder_kind = "none";
  b.nerf_freqs = 12;
  const std::vector<std::string> diff = config_diff(a, b);
  REQUIRE(diff.size() == 2);
  CHECK(std::find(diff.begin(), diff.end(), "encoder.kind") != diff.end());
  CHECK(std::find(diff.begin(), diff.end(), "encoder.nerf_freqs") != diff.end());

  RunConfig c = a;
  c.lr = 5e-4;
  const std::vector<std::string> d2 = config_diff(a, c);
  REQUIRE(d2.size() == 1);
  CHECK(d2[0] == "train.lr");
}

TEST_CASE("derived sub-configs mirror the run config") {
  RunConfig cfg = make_preset("desk-scale");
  cfg.encoder_kind = "nerf-pe";
  cfg.nerf_freqs = 6;
  const EncoderConfig ec = cfg.encoder_config();
  CHECK(ec.kind == EncoderKind::nerf_pe);
  CHECK(ec.feature_width() == 24);
  CHECK(cfg.model_dims().d_z == 24);

  cfg.encoder_kind = "none";
  CHECK(cfg.model_dims().d_z == 2);

  const AdamConfig ac = cfg.adam_config();
  CHECK(ac.lr == cfg.lr);
  CHECK(ac.beta1 == cfg.adam_beta1);
  CHECK(ac.eps == cfg.adam_eps);
}

TEST_CASE("run directories resolve under the run root when set") {
  ::unsetenv("INRSEG_RUN_ROOT");
  CHECK(resolve_run_dir("runs/a") == "runs/a");
  ::setenv("INRSEG_RUN_ROOT", "/tmp/inrseg_root", 1);
  CHECK(resolve_run_dir("runs/a") == "/tmp/inrseg_root/runs/a");
  CHECK(resolve_run_dir("/abs/path") == "/abs/path");  // absolute wins
  ::unsetenv("INRSEG_RUN_ROOT");
}
