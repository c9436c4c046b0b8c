#include <gtest/gtest.h>

#include <fstream>

#include "fixtures.h"
#include "impinj/config.h"

namespace impinj {
namespace {

TEST(Toml, ParsesTablesScalarsAndArrays) {
  const TomlDocument doc = parse_toml(R"(
# comment
top = 3
[run]
seeds = [1, 2, 3]   # trailing
name = "a # not comment"
rate = 1e-3
on = true
mixed = [0.5, 2]
)");
  EXPECT_EQ(doc.at("top").as_int(), 3);
  EXPECT_EQ(doc.at("run.seeds").as_int_array(), (std::vector<long long>{1, 2, 3}));
  EXPECT_EQ(doc.at("run.name").as_string(), "a # not comment");
  EXPECT_DOUBLE_EQ(doc.at("run.rate").as_double(), 1e-3);
  EXPECT_TRUE(doc.at("run.on").as_bool());
  EXPECT_EQ(doc.at("run.mixed").as_double_array(), (std::vector<double>{0.5, 2.0}));
  EXPECT_DOUBLE_EQ(doc.at("top").as_double(), 3.0);
  EXPECT_THROW(doc.at("run.rate").as_int(), ConfigError);
}

TEST(Toml, ErrorsNameTheLine) {
  try {
    parse_toml("a = 1\nb = \n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  EXPECT_THROW(parse_toml("a = 1\na = 2\n"), ConfigError);
  EXPECT_THROW(parse_toml("[unclosed\n"), ConfigError);
  EXPECT_THROW(parse_toml("x = [1, 2\n"), ConfigError);
  EXPECT_THROW(parse_toml("x = \"open\n"), ConfigError);
  EXPECT_THROW(parse_toml("novalue\n"), ConfigError);
}

TEST(RunConfigToml, AppliesKnownKeysAndRejectsUnknown) {
  RunConfig cfg;
  apply_toml(cfg, parse_toml("[cvae]\nbeta = 0.5\n[run]\nk_grid = [5, 20]\n[tuning]\nenabled = false\n"));
  EXPECT_DOUBLE_EQ(cfg.cvae.beta, 0.5);
  EXPECT_EQ(cfg.k_grid, (std::vector<int>{5, 20}));
  EXPECT_FALSE(cfg.tune);
  EXPECT_THROW(apply_toml(cfg, parse_toml("[cvae]\nbogus = 1\n")), ConfigError);
  EXPECT_THROW(apply_toml(cfg, parse_toml("[cvae]\nbeta = \"high\"\n")), ConfigError);
  EXPECT_THROW(apply_toml(cfg, parse_toml("[run]\nseeds = [-1]\n")), ConfigError);
  EXPECT_THROW(apply_toml(cfg, parse_toml("[tuning]\nbeta = [1.0, 0.1]\n")), ConfigError);
}

TEST(RunConfigToml, OverridesUseSameKeys) {
  RunConfig cfg;
  apply_override(cfg, "distill.temperature=3");
  apply_override(cfg, "run.seeds = [4, 5]");
  apply_override(cfg, "data.path=\"x.csv\"");
  EXPECT_DOUBLE_EQ(cfg.distill.temperature, 3.0);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{4, 5}));
  EXPECT_EQ(cfg.dataset, "x.csv");
  EXPECT_THROW(apply_override(cfg, "distill.temperature"), ConfigError);
  EXPECT_THROW(apply_override(cfg, "nope.key=1"), ConfigError);
}

TEST(RunConfigToml, DatasetPathIsRelativeToConfigFile) {
  testing::TempDir dir("config");
  std::filesystem::create_directories(dir.path() / "cfg");
  std::ofstream(dir.path() / "cfg" / "run.toml") << "[data]\npath = \"data/x.csv\"\n";
  const RunConfig cfg = load_run_config(dir.path() / "cfg" / "run.toml");
  EXPECT_EQ(cfg.dataset, dir.path() / "cfg" / "data" / "x.csv");
  EXPECT_THROW(load_run_config(dir.path() / "missing.toml"), ConfigError);
}

TEST(RunConfigToml, ShippedConfigsLoadAndValidate) {
  for (const char* name : {"default.toml", "smoke.toml"}) {
    const RunConfig cfg = load_run_config(std::filesystem::path(IMPINJ_SOURCE_DIR) / "configs" / name);
    EXPECT_NO_THROW(validate(cfg)) << name;
  }
}

TEST(Validate, RejectsInconsistentSettings) {
  auto bad = [](auto mutate) {
    RunConfig cfg;
    mutate(cfg);
    return cfg;
  };
  EXPECT_NO_THROW(validate(RunConfig{}));
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.seeds.clear(); })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.k_grid = {10, 5}; })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.k_grid = {0}; })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.fractions.train = 0.9; })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.distill.temperature = 0; })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.distill.alpha = 1.5; })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.cvae.lambda_s = -1; })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.tuning.trials = 0; })), ConfigError);
  EXPECT_THROW(validate(bad([](RunConfig& c) { c.objective_ks.clear(); })), ConfigError);
}

}  // namespace
}  // namespace impinj
