#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "inrseg/experiments.hpp"

using namespace inrseg;

namespace {
namespace fs = std::filesystem;
}

TEST_CASE("percent change formatting matches the reporting convention") {
  CHECK(format_percent_change(0.4858, 0.2418) == "-50.23%");
  CHECK(format_percent_change(0.4858, 0.2221) == "-54.28%");
  CHECK(format_percent_change(0.1534, 0.1146) == "-25.29%");
  CHECK(format_percent_change(0.1534, 0.0979) == "-36.18%");
  CHECK(format_percent_change(0.2417, 0.1664) == "-31.15%");
  CHECK(format_percent_change(0.2417, 0.1683) == "-30.37%");
  CHECK(format_percent_change(0.2417, 0.2333) == "-3.48%");
  CHECK(format_percent_change(0.2417, 0.3048) == "+26.11%");
  CHECK(format_percent_change(0.5, 0.5) == "+0.00%");
  CHECK(format_percent_change(0.0, 0.3) == "n/a");
  CHECK(format_percent_change(-0.1, 0.3) == "n/a");
}

TEST_CASE("the default decouple split is the first hashed level") {
  HashGridConfig desk;  // 12 levels, direct through level 6
  CHECK(default_level_split(desk) == 7);

  HashGridConfig paper;
  paper.levels = 21;
  paper.base_resolution = 16;
  paper.table_size = Index(1) << 21;
  CHECK(default_level_split(paper) == 12);

  // Every level direct -> clamps to L-1.
  HashGridConfig tiny;
  tiny.levels = 3;
  tiny.base_resolution = 4;
  tiny.table_size = Index(1) << 10;
  CHECK(default_level_split(tiny) == 2);

  // Every level hashed -> clamps to 1.
  HashGridConfig dense;
  dense.levels = 4;
  dense.base_resolution = 64;
  dense.table_size = Index(1) << 4;
  CHECK(default_level_split(dense) == 1);
}

TEST_CASE("ablation arms differ from the base only in encoder keys") {
  const RunConfig base = make_preset("desk-scale");
  const std::vector<RunConfig> arms = make_ablation_arms(base, {"none", "nerf-pe", "hash"});
  REQUIRE(arms.size() == 3);
  CHECK(arms[0].encoder_kind == "none");
  CHECK(arms[1].encoder_kind == "nerf-pe");
  CHECK(arms[2].encoder_kind == "hash");
  for (const RunConfig& arm : arms) {
    for (const std::string& key : config_diff(base, arm)) {
      CHECK(key.rfind("encoder.", 0) == 0);
    }
    CHECK(arm.seed == base.seed);
    CHECK(arm.lr == base.lr);
    CHECK(arm.total_epochs == base.total_epochs);
  }
  CHECK_THROWS_AS(make_ablation_arms(base, {"fourier"}), Error);
  CHECK_THROWS_AS(make_ablation_arms(base, {}), Error);
}

TEST_CASE("eval protocol validation") {
  EvalProtocol p;
  CHECK_NOTHROW(p.validate());
  p.mode = "base-resolution-opt";
  CHECK_NOTHROW(p.validate());
  p.mode = "zoom";
  CHECK_THROWS_AS(p.validate(), Error);
  p.mode = "resolution-specific-opt";
  p.levels = {};
  CHECK_THROWS_AS(p.validate(), Error);
  p.levels = {1, 2};  // must start at base
  CHECK_THROWS_AS(p.validate(), Error);
  p.levels = {0, 2, 1};  // must ascend
  CHECK_THROWS_AS(p.validate(), Error);
}

TEST_CASE("outcome aggregation helpers") {
  EvalOutcome eo;
  auto row = [&](const std::string& slide, int level, Scalar dice) {
    EvalRow r;
    r.mode = "resolution-specific-opt";
    r.slide = slide;
    r.level = level;
    r.dice.dice = dice;
    eo.rows.push_back(r);
  };
  row("s1", 0, 0.9);
  row("s2", 0, 0.7);
  row("mean", 0, 0.8);
  row("s1", 1, 0.6);
  row("s2", 1, 0.4);
  row("mean", 1, 0.5);
  CHECK(eval_mean_dice(eo, 0) == doctest::Approx(0.8));
  CHECK(eval_mean_dice(eo, 1) == doctest::Approx(0.5));
  CHECK_THROWS_AS(eval_mean_dice(eo, 2), Error);

  AblationOutcome ao;
  ao.rows = {{"none", "s1", 0, 0.1}, {"none", "s1", 1, 0.3}, {"hash", "s1", 0, 0.9},
             {"hash", "s1", 1, 0.7}};
  CHECK(ablation_mean_dice(ao, "none") == doctest::Approx(0.2));
  CHECK(ablation_mean_dice(ao, "hash") == doctest::Approx(0.8));
  CHECK_THROWS_AS(ablation_mean_dice(ao, "nerf-pe"), Error);
}

TEST_CASE("model gradcheck passes for every scope on a tiny config") {
  RunConfig cfg = make_preset("desk-scale");
  cfg.grid.levels = 4;
  cfg.grid.base_resolution = 4;
  cfg.grid.table_size = Index(1) << 8;
  cfg.conv_width = 8;
  cfg.conv_layers = 2;
  cfg.point_width = 8;
  cfg.point_layers = 2;
  cfg.fused_width = 12;
  cfg.head_width = 8;
  cfg.head_dilations = {1, 2};

  const GradCheckReport rep = model_gradcheck(cfg, 17, "all");
  CHECK(rep.passed);
  CHECK(rep.max_rel_err < 1e-4);
  CHECK(rep.groups.size() >= 4);

  const GradCheckReport enc = model_gradcheck(cfg, 18, "encoder");
  CHECK(enc.passed);
  bool saw_frozen = false;
  for (const GroupReport& g : enc.groups) saw_frozen |= g.frozen;
  CHECK(saw_frozen);  // non-probed groups ride along frozen

  CHECK_THROWS_AS(model_gradcheck(cfg, 19, "attention"), Error);
}

TEST_CASE("report generation renders what exists and lists what is missing") {
  const std::string dir = (fs::temp_directory_path() / "inrseg_report_test").string();
  fs::remove_all(dir);
  fs::create_directories(dir);

  // Minimal run dir: a config and one table, nothing else.
  save_config(dir + "/config.json", make_preset("desk-scale"));
  {
    std::ofstream t1(dir + "/table1.csv");
    t1 << "mode,slide,level,dice,pct_change\n";
    t1 << "resolution-specific-opt,mean,base,0.9000,+0.00%\n";
  }

  const ReportResult res = emit_report(dir);
  CHECK(fs::exists(res.report_md));
  CHECK_FALSE(res.missing.empty());  // table2, metrics, ... absent

  std::ifstream in(res.report_md);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(text.find("table1") != std::string::npos);
  CHECK(text.find("0.9000") != std::string::npos);

  // Regeneration over an unchanged run dir is byte-identical.
  const ReportResult res2 = emit_report(dir);
  std::ifstream in2(res2.report_md);
  std::string text2((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
  CHECK(text == text2);

  CHECK_THROWS_AS(emit_report(dir + "/nope"), Error);
  fs::remove_all(dir);
}
