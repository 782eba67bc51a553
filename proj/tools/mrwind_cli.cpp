#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mrwind/pipeline.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Multi-resolution wind speed forecasting pipeline"};
  app.fallthrough();
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool verbose = false;
  app.add_option("--config", config_path, "Pipeline config JSON")->required();
  app.add_option("--out", out_dir, "Output directory (overrides the config)");
  app.add_option("--seed", seed, "Seed applied to every stage");
  app.add_flag("--verbose", verbose, "Log stage progress to stderr");

  for (const auto &stage : mrwind::pipeline_stages())
    app.add_subcommand(stage.name, std::string("Run the ") + stage.name + " stage");
  app.add_subcommand("run", "Run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  const mrwind::Logger log = verbose ? mrwind::Logger([](const std::string &m) {
    std::clog << "[mrwind] " << m << '\n';
  })
                                     : mrwind::null_logger();
  try {
    mrwind::PipelineConfig config = mrwind::load_pipeline_config(config_path);
    if (!out_dir.empty())
      config.output_dir = out_dir;
    if (seed)
      mrwind::apply_seed(config, *seed);
    config.validate();

    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "run") {
      const auto report = mrwind::run_pipeline(config, log);
      const auto &agg = report.at("aggregate").at("methods");
      for (const auto &m : mrwind::report_methods())
        std::cout << m << " MAE " << agg.at(m).at("mae").get<double>() << '\n';
    } else {
      mrwind::run_stage(name, config, log);
    }
  } catch (const mrwind::Error &e) {
    std::cerr << "mrwind: " << e.what() << '\n';
    return e.code() == mrwind::Errc::config ? kExitConfig : kExitStage;
  } catch (const std::exception &e) {
    std::cerr << "mrwind: " << e.what() << '\n';
    return kExitStage;
  }
  return kExitOk;
}
