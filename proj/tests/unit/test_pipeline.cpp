#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include "mrwind/pipeline.hpp"

using namespace mrwind;
namespace fs = std::filesystem;

namespace {

nlohmann::json small_config(const fs::path &out) {
  return {{"synth", {{"n_farms", 10}, {"T", 128}, {"seed", 3}}},
          {"resolutions", {{3, 1}, {2, 2}}},
          {"stdr", {{"epochs", 30}, {"forecast_epochs", 1}, {"memory_depth", 4}}},
          {"mrstk", {{"inducing", 20}, {"batch", 100}, {"iters", 40}}},
          {"var_order", 2},
          {"test", {{"begin", 64}, {"calibration_end", 96}, {"end", 128}}},
          {"output_dir", out.string()}};
}

fs::path scratch(const std::string &name) {
  const fs::path p = fs::temp_directory_path() / ("mrwind_test_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path &p) { return detail::read_file(p); }

int run_cli(const std::string &args) {
  const std::string cmd = std::string(MRWIND_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(PipelineConfig, RejectsEmptyResolutionSet) {
  auto j = small_config("x");
  j["resolutions"] = nlohmann::json::array();
  try {
    pipeline_config_from_json(j);
    FAIL();
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), Errc::config);
  }
}

TEST(PipelineConfig, RejectsUnknownKeysAndBadWindows) {
  auto j = small_config("x");
  j["learning_rate"] = 0.1;
  EXPECT_THROW(pipeline_config_from_json(j), Error);
  j = small_config("x");
  j["test"]["calibration_end"] = 64;
  EXPECT_THROW(pipeline_config_from_json(j), Error);
  j = small_config("x");
  j["resolutions"] = {{3, 1}, {3, 1}};
  EXPECT_THROW(pipeline_config_from_json(j), Error);
  j = small_config("x");
  j["resolutions"] = "default";
  EXPECT_EQ(pipeline_config_from_json(j).resolutions.size(), 11u);
}

TEST(Pipeline, EndToEndReportIsConsistentAndDeterministic) {
  const fs::path out = scratch("e2e");
  const auto cfg = pipeline_config_from_json(small_config(out));
  const auto report = run_pipeline(cfg, null_logger());

  ASSERT_EQ(report.at("resolutions").size(), 2u);
  for (const auto &m : report_methods()) {
    const double mae = report.at("aggregate").at("methods").at(m).at("mae").get<double>();
    EXPECT_TRUE(std::isfinite(mae)) << m;
    EXPECT_GT(mae, 0.0) << m;
  }

  // Reported STDR MAE is the MAE of the forecast file over the evaluation steps.
  const Resolution r{3, 1};
  const int split = cfg.test.calibration_step(1);
  std::vector<double> y, f;
  for (const auto &row : parse_forecast_csv(slurp(out / "forecast_stdr_k3_e1.csv")))
    if (row.t >= split) {
      y.push_back(row.y_true);
      f.push_back(row.f_pred);
    }
  EXPECT_DOUBLE_EQ(report.at("resolutions")[0].at("methods").at("stdr").at("mae").get<double>(),
                   compute_mae(y, f).mae);
  EXPECT_EQ(resolution_tag(r), "k3_e1");

  const auto cov = report.at("aggregate").at("coverage");
  EXPECT_LE(cov.at("sigma1").get<double>(), cov.at("sigma2").get<double>());

  const std::string first = slurp(out / "report.json");
  const std::string corrected = slurp(out / "corrected_k2_e2.csv");
  run_pipeline(cfg, null_logger());
  EXPECT_EQ(slurp(out / "report.json"), first);

  // Dropping downstream artifacts and rerunning the later stages reproduces them.
  fs::remove(out / "report.json");
  fs::remove(out / "corrected_k2_e2.csv");
  for (const char *s : {"fit-mrstk", "correct", "evaluate"})
    run_stage(s, cfg, null_logger());
  EXPECT_EQ(slurp(out / "report.json"), first);
  EXPECT_EQ(slurp(out / "corrected_k2_e2.csv"), corrected);
  fs::remove_all(out);
}

TEST(Pipeline, MissingArtifactIsAStageFailure) {
  const fs::path out = scratch("missing");
  const auto cfg = pipeline_config_from_json(small_config(out));
  try {
    run_stage("fit-stdr", cfg, null_logger());
    FAIL();
  } catch (const Error &e) {
    EXPECT_EQ(e.code(), Errc::stage_failure);
    EXPECT_NE(std::string(e.what()).find("fit-stdr"), std::string::npos);
  }
  fs::remove_all(out);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("cli");
  fs::create_directories(dir);
  const fs::path good = dir / "good.json", bad = dir / "bad.json";
  std::ofstream(good) << small_config(dir / "out").dump();
  auto b = small_config(dir / "out");
  b["resolutions"] = nlohmann::json::array();
  std::ofstream(bad) << b.dump();

  EXPECT_EQ(run_cli("cluster --config " + bad.string()), 2);
  EXPECT_EQ(run_cli("cluster --config " + (dir / "absent.json").string()), 2);
  EXPECT_EQ(run_cli("no-such-stage --config " + good.string()), 2);
  EXPECT_EQ(run_cli("ddg --config " + good.string()), 3); // nothing clustered yet
  EXPECT_EQ(run_cli("simulate --config " + good.string()), 0);
  EXPECT_EQ(run_cli("cluster --config " + good.string()), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "clusters_k3.json"));
  fs::remove_all(dir);
}
