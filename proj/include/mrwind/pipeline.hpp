#pragma once

// File-driven forecasting pipeline: simulate -> cluster -> ddg -> fit-stdr ->
// forecast -> fit-mrstk -> correct -> evaluate. Every stage reads the previous
// stages' artifacts from the output directory and writes its own.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mrwind/baselines.hpp"
#include "mrwind/data.hpp"
#include "mrwind/ddg.hpp"
#include "mrwind/error.hpp"
#include "mrwind/metrics.hpp"
#include "mrwind/stdr.hpp"
#include "mrwind/svgp.hpp"
#include "mrwind/synth.hpp"

namespace mrwind {

namespace fs = std::filesystem;

/// Raw-time test window: [begin, calibration_end) fits the correction,
/// [calibration_end, end) is scored.
struct TestWindow {
  int begin = 0;
  int calibration_end = 0;
  int end = 0;

  /// Aggregated-step bounds at temporal resolution eta.
  int first_step(int eta) const { return (begin + eta - 1) / eta; }
  int calibration_step(int eta) const { return (calibration_end + eta - 1) / eta; }
  int end_step(int eta) const { return end / eta; }
};

/// Eleven (kappa, eta) pairs used when a config asks for "default".
inline const std::vector<Resolution> &default_resolutions() {
  static const std::vector<Resolution> grid = {{50, 24}, {30, 20}, {30, 8}, {20, 4},
                                               {50, 4},  {20, 24}, {40, 4}, {40, 12},
                                               {30, 4},  {20, 12}, {10, 4}};
  return grid;
}

struct PipelineConfig {
  std::string input; // wind CSV; empty means <output_dir>/wind.csv from `simulate`
  DirectionConvention convention = DirectionConvention::toward;
  std::optional<SynthConfig> synth;
  std::vector<Resolution> resolutions;
  std::uint64_t cluster_seed = 0;
  StdrConfig stdr;
  SvgpConfig mrstk;
  int var_order = 10;
  double radius_km = kDefaultRadiusKm;
  double threshold_rad = kDefaultThresholdRad;
  TestWindow test;
  std::string output_dir = "out";

  fs::path out() const { return fs::path(output_dir); }
  fs::path input_path() const { return input.empty() ? out() / "wind.csv" : fs::path(input); }

  std::vector<int> kappas() const {
    std::set<int> k;
    for (const Resolution &r : resolutions)
      k.insert(r.kappa);
    return {k.begin(), k.end()};
  }

  void validate() const {
    if (resolutions.empty())
      throw Error(Errc::config, "resolution set is empty");
    for (const Resolution &r : resolutions) {
      if (r.kappa < 1 || r.eta < 1)
        throw Error(Errc::config, "resolutions need kappa >= 1 and eta >= 1");
      if (std::count(resolutions.begin(), resolutions.end(), r) > 1)
        throw Error(Errc::config, "duplicate resolution (" + std::to_string(r.kappa) + "," +
                                      std::to_string(r.eta) + ")");
      if (test.first_step(r.eta) >= test.calibration_step(r.eta) ||
          test.calibration_step(r.eta) >= test.end_step(r.eta))
        throw Error(Errc::config, "test window leaves no calibration or evaluation steps at eta " +
                                      std::to_string(r.eta));
    }
    if (test.begin < 0 || !(test.begin < test.calibration_end && test.calibration_end < test.end))
      throw Error(Errc::config, "test window needs 0 <= begin < calibration_end < end");
    if (stdr.memory_depth < 1 || stdr.delta < 0.0 || !(stdr.learning_rate > 0.0) ||
        stdr.epochs < 0 || stdr.forecast_epochs < 0)
      throw Error(Errc::config, "invalid STDR settings");
    if (mrstk.inducing < 1 || mrstk.batch < 1 || mrstk.iters < 0 || mrstk.quad_order < 1 ||
        !(mrstk.lr > 0.0) || !(mrstk.natgrad_step > 0.0) || mrstk.natgrad_step > 1.0)
      throw Error(Errc::config, "invalid MRSTK settings");
    if (var_order < 1)
      throw Error(Errc::config, "VAR order must be >= 1");
    if (!(radius_km > 0.0) || !(threshold_rad >= 0.0))
      throw Error(Errc::config, "radius and threshold must be positive");
    if (output_dir.empty())
      throw Error(Errc::config, "output directory is empty");
    if (input.empty() && !synth)
      throw Error(Errc::config, "config needs an input path or a synth section");
  }
};

inline std::string resolution_tag(const Resolution &r) {
  return "k" + std::to_string(r.kappa) + "_e" + std::to_string(r.eta);
}

// Config JSON ---------------------------------------------------------------------

namespace detail {

inline void require_keys(const nlohmann::json &j, std::initializer_list<const char *> allowed,
                         const std::string &where) {
  if (!j.is_object())
    throw Error(Errc::config, where + " must be a JSON object");
  for (const auto &[key, _] : j.items())
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char *a) { return key == a; }))
      throw Error(Errc::config, "unknown key '" + key + "' in " + where);
}

inline SvgpConfig svgp_config_from_json(const nlohmann::json &j) {
  require_keys(j,
               {"inducing", "batch", "iters", "lr", "natgrad_step", "quad_order", "seed",
                "learn_hyper", "learn_noise", "learn_inducing", "init_noise_var"},
               "mrstk");
  SvgpConfig c;
  c.inducing = j.value("inducing", c.inducing);
  c.batch = j.value("batch", c.batch);
  c.iters = j.value("iters", c.iters);
  c.lr = j.value("lr", c.lr);
  c.natgrad_step = j.value("natgrad_step", c.natgrad_step);
  c.quad_order = j.value("quad_order", c.quad_order);
  c.seed = j.value("seed", c.seed);
  c.learn_hyper = j.value("learn_hyper", c.learn_hyper);
  c.learn_noise = j.value("learn_noise", c.learn_noise);
  c.learn_inducing = j.value("learn_inducing", c.learn_inducing);
  if (j.contains("init_noise_var"))
    c.init_noise_var = j.at("init_noise_var").get<double>();
  return c;
}

inline nlohmann::json svgp_config_to_json(const SvgpConfig &c) {
  nlohmann::json j = {{"inducing", c.inducing},       {"batch", c.batch},
                      {"iters", c.iters},             {"lr", c.lr},
                      {"natgrad_step", c.natgrad_step}, {"quad_order", c.quad_order},
                      {"seed", c.seed},               {"learn_hyper", c.learn_hyper},
                      {"learn_noise", c.learn_noise}, {"learn_inducing", c.learn_inducing}};
  if (c.init_noise_var)
    j["init_noise_var"] = *c.init_noise_var;
  return j;
}

} // namespace detail

inline PipelineConfig pipeline_config_from_json(const nlohmann::json &j) {
  try {
    detail::require_keys(j,
                         {"input", "direction_convention", "synth", "resolutions", "cluster_seed",
                          "stdr", "mrstk", "var_order", "radius_km", "threshold_rad", "test",
                          "output_dir"},
                         "config");
    PipelineConfig c;
    c.input = j.value("input", std::string());
    const std::string conv = j.value("direction_convention", std::string("toward"));
    if (conv != "toward" && conv != "from")
      throw Error(Errc::config, "direction_convention must be 'toward' or 'from'");
    c.convention = conv == "from" ? DirectionConvention::from : DirectionConvention::toward;
    if (j.contains("synth"))
      c.synth = synth_config_from_json(j.at("synth"));
    const auto &res = j.at("resolutions");
    if (res.is_string()) {
      if (res.get<std::string>() != "default")
        throw Error(Errc::config, "resolutions must be a list of [kappa, eta] or \"default\"");
      c.resolutions = default_resolutions();
    } else {
      for (const auto &r : res) {
        if (!r.is_array() || r.size() != 2)
          throw Error(Errc::config, "each resolution is a [kappa, eta] pair");
        c.resolutions.push_back({r.at(0).get<int>(), r.at(1).get<int>()});
      }
    }
    c.cluster_seed = j.value("cluster_seed", c.cluster_seed);
    if (j.contains("stdr"))
      c.stdr = config_from_json(j.at("stdr"));
    if (j.contains("mrstk"))
      c.mrstk = detail::svgp_config_from_json(j.at("mrstk"));
    c.var_order = j.value("var_order", c.var_order);
    c.radius_km = j.value("radius_km", c.radius_km);
    c.threshold_rad = j.value("threshold_rad", c.threshold_rad);
    const auto &t = j.at("test");
    detail::require_keys(t, {"begin", "calibration_end", "end"}, "test");
    c.test = {t.at("begin").get<int>(), t.at("calibration_end").get<int>(), t.at("end").get<int>()};
    c.output_dir = j.value("output_dir", c.output_dir);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::config, std::string("malformed config: ") + e.what());
  }
}

inline PipelineConfig load_pipeline_config(const std::string &path) {
  std::ifstream in(path);
  if (!in)
    throw Error(Errc::config, "cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::config, "config " + path + " is not valid JSON: " + e.what());
  }
  return pipeline_config_from_json(j);
}

/// Replaces every seed in the config with `seed`.
inline void apply_seed(PipelineConfig &c, std::uint64_t seed) {
  c.cluster_seed = seed;
  c.stdr.seed = seed;
  c.mrstk.seed = seed;
  if (c.synth)
    c.synth->seed = seed;
}

/// Path-free echo of the settings that determine the report.
inline nlohmann::json config_echo(const PipelineConfig &c) {
  nlohmann::json res = nlohmann::json::array();
  for (const Resolution &r : c.resolutions)
    res.push_back({r.kappa, r.eta});
  return {{"resolutions", res},
          {"direction_convention",
           c.convention == DirectionConvention::from ? "from" : "toward"},
          {"cluster_seed", c.cluster_seed},
          {"stdr", config_to_json(c.stdr)},
          {"mrstk", detail::svgp_config_to_json(c.mrstk)},
          {"var_order", c.var_order},
          {"radius_km", c.radius_km},
          {"threshold_rad", c.threshold_rad},
          {"test",
           {{"begin", c.test.begin},
            {"calibration_end", c.test.calibration_end},
            {"end", c.test.end}}}};
}

// File helpers ---------------------------------------------------------------------

namespace detail {

inline std::string read_file(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw Error(Errc::io, "cannot read " + p.string() + " (run the earlier stages first)");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path &p, const std::string &content) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out)
    throw Error(Errc::io, "cannot write " + p.string());
  out << content;
  if (!out)
    throw Error(Errc::io, "write failed for " + p.string());
}

inline nlohmann::json read_json(const fs::path &p) {
  try {
    return nlohmann::json::parse(read_file(p));
  } catch (const nlohmann::json::exception &e) {
    throw Error(Errc::parse, p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path &p, const nlohmann::json &j) {
  write_file(p, j.dump(2) + "\n");
}

inline std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

} // namespace detail

using Logger = std::function<void(const std::string &)>;

inline Logger null_logger() {
  return [](const std::string &) {};
}

// Stages -------------------------------------------------------------------------------

inline void stage_simulate(const PipelineConfig &c, const Logger &log) {
  if (!c.synth)
    throw Error(Errc::config, "simulate needs a synth section in the config");
  fs::create_directories(c.out());
  const SynthOutput s = generate_wind_field(*c.synth);
  std::ostringstream os;
  write_wind_csv(os, s.catalog, s.records);
  detail::write_file(c.input_path(), os.str());
  detail::write_json(c.out() / "truth.json", s.truth);
  log("simulate: " + std::to_string(s.catalog.size()) + " farms x " +
      std::to_string(s.true_speed.cols()) + " steps -> " + c.input_path().string());
}

inline void stage_cluster(const PipelineConfig &c, const Logger &log) {
  fs::create_directories(c.out());
  const WindData data = load_wind_csv(c.input_path().string(), c.convention);
  detail::write_json(c.out() / "dataset.json",
                     {{"n_farms", data.catalog.size()},
                      {"num_steps", data.num_steps},
                      {"checksum", detail::hex64(data.checksum)}});
  std::map<int, ClusterAssignment> assignments;
  for (int kappa : c.kappas()) {
    ClusterAssignment a = kmeans_cluster(data.catalog, kappa, c.cluster_seed);
    a.source_checksum = data.checksum;
    detail::write_json(c.out() / ("clusters_k" + std::to_string(kappa) + ".json"), a);
    assignments.emplace(kappa, std::move(a));
  }
  for (const Resolution &r : c.resolutions) {
    const ResolutionView v = aggregate(data, assignments.at(r.kappa), r.eta);
    detail::write_json(c.out() / ("view_" + resolution_tag(r) + ".json"), v);
  }
  log("cluster: " + std::to_string(c.resolutions.size()) + " resolution views");
}

namespace detail {

inline ClusterAssignment load_clusters(const PipelineConfig &c, int kappa) {
  return read_json(c.out() / ("clusters_k" + std::to_string(kappa) + ".json"))
      .get<ClusterAssignment>();
}

inline ResolutionView load_view(const PipelineConfig &c, const Resolution &r) {
  return read_json(c.out() / ("view_" + resolution_tag(r) + ".json")).get<ResolutionView>();
}

inline DynamicGraph load_ddg(const PipelineConfig &c, const Resolution &r) {
  return read_json(c.out() / ("ddg_" + resolution_tag(r) + ".json")).get<DynamicGraph>();
}

inline TravelTimeTensor load_lambda(const PipelineConfig &c, const Resolution &r,
                                    const GraphSupport &support, const ResolutionView &view) {
  TravelTimeTensor lt =
      parse_travel_times_csv(read_file(c.out() / ("lambda_" + resolution_tag(r) + ".csv")), support);
  if (support.size() == 0) {
    lt.first_step = view.first_step;
    lt.steps.resize(0, view.steps());
  }
  return lt;
}

inline std::vector<ForecastRow> load_forecast(const PipelineConfig &c, const std::string &method,
                                              const Resolution &r) {
  return parse_forecast_csv(
      read_file(c.out() / ("forecast_" + method + "_" + resolution_tag(r) + ".csv")));
}

inline void save_forecast(const PipelineConfig &c, const std::string &method, const Resolution &r,
                          const std::vector<ForecastRow> &rows) {
  std::ostringstream os;
  write_forecast_csv(os, rows);
  write_file(c.out() / ("forecast_" + method + "_" + resolution_tag(r) + ".csv"), os.str());
}

} // namespace detail

inline void stage_ddg(const PipelineConfig &c, const Logger &log) {
  for (const Resolution &r : c.resolutions) {
    const ClusterAssignment a = detail::load_clusters(c, r.kappa);
    const ResolutionView v = detail::load_view(c, r);
    const GraphSupport support = build_support(a.centroids, c.radius_km);
    const Eigen::MatrixXd bearings = cardinal_bearings(a.centroids, support);
    const DynamicGraph g = extract_ddg(v, bearings, support, c.threshold_rad);
    const TravelTimeTensor lt =
        estimate_travel_times(v, support, pairwise_distances(a.centroids), r.eta);
    detail::write_json(c.out() / ("ddg_" + resolution_tag(r) + ".json"), g);
    std::ostringstream os;
    write_travel_times_csv(os, lt, support);
    detail::write_file(c.out() / ("lambda_" + resolution_tag(r) + ".csv"), os.str());
    log("ddg " + resolution_tag(r) + ": " + std::to_string(support.size()) + " support edges");
  }
}

inline void stage_fit_stdr(const PipelineConfig &c, const Logger &log) {
  for (const Resolution &r : c.resolutions) {
    const ResolutionView v = detail::load_view(c, r);
    const DynamicGraph g = detail::load_ddg(c, r);
    const TravelTimeTensor lt = detail::load_lambda(c, r, g.support, v);
    const StepRange range{v.first_step + c.stdr.memory_depth, c.test.first_step(r.eta)};
    if (range.size() < 1)
      throw Error(Errc::insufficient_history,
                  "no STDR training steps before the test window at " + resolution_tag(r));
    const StdrFitResult res = fit(v, g, lt, c.stdr, std::nullopt, range);
    detail::write_json(c.out() / ("stdr_" + resolution_tag(r) + ".json"),
                       stdr_params_to_json(res.params, g.support, c.stdr, res.final_loss));
    log("fit-stdr " + resolution_tag(r) + ": loss " + std::to_string(res.initial_loss) + " -> " +
        std::to_string(res.final_loss));
  }
}

inline void stage_forecast(const PipelineConfig &c, const Logger &log) {
  for (const Resolution &r : c.resolutions) {
    const ResolutionView v = detail::load_view(c, r);
    const DynamicGraph g = detail::load_ddg(c, r);
    const TravelTimeTensor lt = detail::load_lambda(c, r, g.support, v);
    const StdrParams init = stdr_params_from_json(
        detail::read_json(c.out() / ("stdr_" + resolution_tag(r) + ".json")), g.support);
    const int b = c.test.first_step(r.eta), e = c.test.end_step(r.eta);
    if (e > v.end_step())
      throw Error(Errc::out_of_range, "test window extends past the data at " + resolution_tag(r));

    detail::save_forecast(c, "stdr", r, rolling_forecast(v, g, lt, c.stdr, b, e, init));
    detail::save_forecast(c, "persistence", r, rolling_persistence(v, b, e));

    const int p_used = max_identifiable_lag(v, c.var_order, b);
    if (p_used < 1)
      throw Error(Errc::singular_design, "too little history for any VAR order at " +
                                             resolution_tag(r) + "; lower kappa");
    const VarParams vp = var_fit(v, p_used, b, RankPolicy::minimum_norm);
    nlohmann::json vj = vp;
    vj["p_requested"] = c.var_order;
    vj["p_used"] = p_used;
    detail::write_json(c.out() / ("var_" + resolution_tag(r) + ".json"), vj);
    detail::save_forecast(c, "var", r, rolling_var(v, p_used, b, e, RankPolicy::minimum_norm));
    log("forecast " + resolution_tag(r) + ": steps [" + std::to_string(b) + ", " +
        std::to_string(e) + "), VAR order " + std::to_string(p_used));
  }
}

namespace detail {

struct ResidualRow {
  Coord coord;
  double y = 0.0;
  double f = 0.0;
  double available = 0.0; // raw time at which y is fully observed
};

/// STDR forecasts of every resolution as (coord, y, f), tagged calibration or evaluation.
inline void collect_rows(const PipelineConfig &c, std::vector<ResidualRow> &calibration,
                         std::vector<ResidualRow> &evaluation) {
  std::map<int, ClusterAssignment> clusters;
  for (int kappa : c.kappas())
    clusters.emplace(kappa, load_clusters(c, kappa));
  for (const Resolution &r : c.resolutions) {
    const auto &cents = clusters.at(r.kappa).centroids;
    const int split = c.test.calibration_step(r.eta);
    for (const ForecastRow &fr : load_forecast(c, "stdr", r)) {
      if (fr.i < 0 || fr.i >= r.kappa)
        throw Error(Errc::parse, "forecast cluster index out of range at " + resolution_tag(r));
      ResidualRow row;
      row.coord = {fr.i, fr.t, r.kappa, r.eta, cents[static_cast<std::size_t>(fr.i)]};
      row.y = fr.y_true;
      row.f = fr.f_pred;
      row.available = static_cast<double>(fr.t + 1) * r.eta;
      (fr.t < split ? calibration : evaluation).push_back(row);
    }
  }
}

inline MultiResDataset make_dataset(const std::vector<ResidualRow> &rows,
                                    const PipelineConfig &c, double K_max, double T_max) {
  MultiResDataset d;
  d.resolutions = c.resolutions;
  d.K_max = K_max;
  d.T_max = T_max;
  const auto n = static_cast<Eigen::Index>(rows.size());
  d.y.resize(n);
  d.f.resize(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const ResidualRow &r = rows[static_cast<std::size_t>(k)];
    d.coords.push_back(r.coord);
    d.y(k) = r.y;
    d.f(k) = r.f;
  }
  return d;
}

} // namespace detail

inline void stage_fit_mrstk(const PipelineConfig &c, const Logger &log) {
  const nlohmann::json meta = detail::read_json(c.out() / "dataset.json");
  const double K_max = meta.at("n_farms").get<double>();
  const double T_max = meta.at("num_steps").get<double>();
  std::vector<detail::ResidualRow> calib, eval;
  detail::collect_rows(c, calib, eval);
  MultiResDataset data = detail::make_dataset(calib, c, K_max, T_max);
  const ClusterBias bias = estimate_cluster_bias(data);
  data.c = bias.gather(data.coords);

  SvgpConfig cfg = c.mrstk;
  cfg.inducing = std::min<int>(cfg.inducing, static_cast<int>(data.size()));
  const SvgpFit fit = fit_svgp(data, cfg);

  nlohmann::json bj = nlohmann::json::array();
  for (const auto &[key, value] : bias.values)
    bj.push_back({{"kappa", key.first}, {"i", key.second}, {"value", value}});
  detail::write_json(c.out() / "mrstk.json",
                     {{"state", fit.state},
                      {"params", fit.params},
                      {"bias", bj},
                      {"n_train", data.size()},
                      {"inducing_used", cfg.inducing},
                      {"elbo_first", fit.elbo_trace.empty() ? 0.0 : fit.elbo_trace.front()},
                      {"elbo_last", fit.elbo_trace.empty() ? 0.0 : fit.elbo_trace.back()}});
  std::ostringstream os;
  os << "iteration,elbo\n";
  char buf[64];
  for (std::size_t k = 0; k < fit.elbo_trace.size(); ++k) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", k, fit.elbo_trace[k]);
    os << buf;
  }
  detail::write_file(c.out() / "mrstk_elbo.csv", os.str());
  log("fit-mrstk: N=" + std::to_string(data.size()) + ", M=" + std::to_string(cfg.inducing) +
      ", noise " + std::to_string(fit.state.noise_var));
}

namespace detail {

inline ClusterBias bias_from_json(const nlohmann::json &j) {
  ClusterBias b;
  for (const auto &e : j)
    b.values[{e.at("kappa").get<int>(), e.at("i").get<int>()}] = e.at("value").get<double>();
  return b;
}

} // namespace detail

/// Rolling correction. The model is trained on residuals from the raw window
/// [begin, calibration_end); for a target starting at raw time s that window
/// is slid forward to end at s: the inducing inputs move by s - calibration_end
/// in time and q(u) is refit exactly to the residuals fully observed inside
/// (s - width, s]. Kernel and noise stay as trained.
inline void stage_correct(const PipelineConfig &c, const Logger &log) {
  const nlohmann::json mj = detail::read_json(c.out() / "mrstk.json");
  const SvgpState trained = mj.at("state").get<SvgpState>();
  const KernelParams params = mj.at("params").get<KernelParams>();
  const ClusterBias bias = detail::bias_from_json(mj.at("bias"));

  std::vector<detail::ResidualRow> calib, eval;
  detail::collect_rows(c, calib, eval);
  std::vector<detail::ResidualRow> obs = calib;
  obs.insert(obs.end(), eval.begin(), eval.end());
  std::stable_sort(obs.begin(), obs.end(), [](const auto &a, const auto &b) {
    return a.available < b.available;
  });
  std::vector<std::size_t> order(eval.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return eval[a].coord.recorded_time() < eval[b].coord.recorded_time();
  });
  const double width = c.test.calibration_end - c.test.begin;

  std::vector<CorrectedPrediction> corrected(eval.size());
  std::size_t lo = 0, hi = 0; // obs[lo, hi) lie inside the current window
  for (std::size_t k = 0; k < order.size();) {
    const double start = eval[order[k]].coord.recorded_time();
    std::size_t k_end = k;
    while (k_end < order.size() && eval[order[k_end]].coord.recorded_time() == start)
      ++k_end;
    while (hi < obs.size() && obs[hi].available <= start)
      ++hi;
    while (lo < hi && obs[lo].available <= start - width)
      ++lo;

    SvgpState moved = trained;
    moved.Z.col(2).array() += start - c.test.calibration_end;
    SequentialPosterior seq(moved, params);
    const auto n = static_cast<Eigen::Index>(hi - lo);
    if (n > 0) {
      KernelInputs X(n, 5);
      Eigen::VectorXd r(n);
      for (Eigen::Index q = 0; q < n; ++q) {
        const auto &o = obs[lo + static_cast<std::size_t>(q)];
        X.row(q) = o.coord.input();
        r(q) = o.y - o.f - bias.at(o.coord.kappa, o.coord.cluster);
      }
      seq.add(X, r);
    }
    const SvgpState current = seq.state();

    const auto nt = static_cast<Eigen::Index>(k_end - k);
    KernelInputs Xs(nt, 5);
    Eigen::VectorXd f(nt), cb(nt);
    for (Eigen::Index q = 0; q < nt; ++q) {
      const auto &row = eval[order[k + static_cast<std::size_t>(q)]];
      Xs.row(q) = row.coord.input();
      f(q) = row.f;
      cb(q) = bias.at(row.coord.kappa, row.coord.cluster);
    }
    const Marginals post = predict_marginals(Xs, current, params);
    const auto preds = correct_predictions(f, cb, post, current.noise_var);
    for (Eigen::Index q = 0; q < nt; ++q)
      corrected[order[k + static_cast<std::size_t>(q)]] = preds[static_cast<std::size_t>(q)];
    k = k_end;
  }

  for (const Resolution &r : c.resolutions) {
    std::vector<CorrectedRow> rows;
    for (std::size_t k = 0; k < eval.size(); ++k) {
      const auto &e = eval[k];
      if (e.coord.kappa != r.kappa || e.coord.eta != r.eta)
        continue;
      const auto &p = corrected[k];
      rows.push_back({r.kappa, r.eta, e.coord.cluster, e.coord.step, e.y, e.f, p.mean,
                      p.intervals.at(0), p.intervals.at(1)});
    }
    std::ostringstream os;
    write_corrected_csv(os, rows);
    detail::write_file(c.out() / ("corrected_" + resolution_tag(r) + ".csv"), os.str());
  }
  log("correct: " + std::to_string(eval.size()) + " corrected predictions from " +
      std::to_string(obs.size()) + " residuals");
}

namespace detail {

inline std::vector<CorrectedRow> parse_corrected_csv(std::string_view text) {
  std::vector<CorrectedRow> rows;
  std::size_t pos = 0, line = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos)
      nl = text.size();
    const std::string_view ln = trim(text.substr(pos, nl - pos));
    pos = nl + 1;
    ++line;
    if (line == 1) {
      if (ln != kCorrectedCsvHeader)
        throw ParseError(line, "expected header '" + std::string(kCorrectedCsvHeader) + "'");
      continue;
    }
    if (ln.empty())
      continue;
    std::vector<std::string_view> f;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = ln.find(',', start);
      f.push_back(ln.substr(start, comma == std::string_view::npos ? ln.size() - start
                                                                   : comma - start));
      if (comma == std::string_view::npos)
        break;
      start = comma + 1;
    }
    if (f.size() != 11)
      throw ParseError(line, "expected 11 fields");
    CorrectedRow r;
    r.kappa = parse_field<int>(f[0], line, "kappa");
    r.eta = parse_field<int>(f[1], line, "eta");
    r.i = parse_field<int>(f[2], line, "i");
    r.t = parse_field<int>(f[3], line, "t");
    r.y_true = parse_field<double>(f[4], line, "y_true");
    r.f_stdr = parse_field<double>(f[5], line, "f_stdr");
    r.f_corrected = parse_field<double>(f[6], line, "f_corrected");
    r.ci1 = {parse_field<double>(f[7], line, "ci1_lo"), parse_field<double>(f[8], line, "ci1_hi")};
    r.ci2 = {parse_field<double>(f[9], line, "ci2_lo"), parse_field<double>(f[10], line, "ci2_hi")};
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json mae_json(const MaeResult &m) {
  return {{"mae", m.mae}, {"mae_pct", m.mae_pct}};
}

} // namespace detail

inline const std::vector<std::string> &report_methods() {
  static const std::vector<std::string> m = {"stdr", "mrstk", "persistence", "var"};
  return m;
}

inline nlohmann::json stage_evaluate(const PipelineConfig &c, const Logger &log) {
  nlohmann::json per_res = nlohmann::json::array();
  std::map<std::string, std::pair<double, double>> sums; // method -> (mae, pct)
  std::vector<double> all_y, lo1, hi1, lo2, hi2;
  std::ostringstream table;
  table << "kappa,eta,method,mae,mae_pct\n";
  char buf[160];

  for (const Resolution &r : c.resolutions) {
    const int split = c.test.calibration_step(r.eta);
    std::map<std::string, MaeResult> res;
    for (const std::string &method : {"stdr", "persistence", "var"}) {
      std::vector<double> y, f;
      for (const ForecastRow &fr : detail::load_forecast(c, method, r))
        if (fr.t >= split) {
          y.push_back(fr.y_true);
          f.push_back(fr.f_pred);
        }
      res[method] = compute_mae(y, f);
    }
    const auto corrected = detail::parse_corrected_csv(
        detail::read_file(c.out() / ("corrected_" + resolution_tag(r) + ".csv")));
    std::vector<double> y, f, l1, h1, l2, h2;
    for (const CorrectedRow &cr : corrected) {
      y.push_back(cr.y_true);
      f.push_back(cr.f_corrected);
      l1.push_back(cr.ci1.lo);
      h1.push_back(cr.ci1.hi);
      l2.push_back(cr.ci2.lo);
      h2.push_back(cr.ci2.hi);
    }
    res["mrstk"] = compute_mae(y, f);
    const double cov1 = compute_coverage(y, l1, h1), cov2 = compute_coverage(y, l2, h2);
    all_y.insert(all_y.end(), y.begin(), y.end());
    lo1.insert(lo1.end(), l1.begin(), l1.end());
    hi1.insert(hi1.end(), h1.begin(), h1.end());
    lo2.insert(lo2.end(), l2.begin(), l2.end());
    hi2.insert(hi2.end(), h2.begin(), h2.end());

    const nlohmann::json vj = detail::read_json(c.out() / ("var_" + resolution_tag(r) + ".json"));
    nlohmann::json methods = nlohmann::json::object();
    for (const std::string &m : report_methods()) {
      methods[m] = detail::mae_json(res[m]);
      sums[m].first += res[m].mae;
      sums[m].second += res[m].mae_pct;
      std::snprintf(buf, sizeof buf, "%d,%d,%s,%.17g,%.17g\n", r.kappa, r.eta, m.c_str(),
                    res[m].mae, res[m].mae_pct);
      table << buf;
    }
    methods["var"]["p_used"] = vj.at("p_used");
    per_res.push_back({{"kappa", r.kappa},
                       {"eta", r.eta},
                       {"n_eval", y.size()},
                       {"methods", methods},
                       {"coverage", {{"sigma1", cov1}, {"sigma2", cov2}}}});
  }

  const double nres = static_cast<double>(c.resolutions.size());
  nlohmann::json agg = nlohmann::json::object();
  for (const std::string &m : report_methods())
    agg[m] = {{"mae", sums[m].first / nres}, {"mae_pct", sums[m].second / nres}};
  const nlohmann::json meta = detail::read_json(c.out() / "dataset.json");
  nlohmann::json report = {
      {"resolutions", per_res},
      {"aggregate",
       {{"methods", agg},
        {"coverage",
         {{"sigma1", compute_coverage(all_y, lo1, hi1)},
          {"sigma2", compute_coverage(all_y, lo2, hi2)}}}}},
      {"source_checksum", meta.at("checksum")},
      {"config", config_echo(c)}};
  detail::write_json(c.out() / "report.json", report);
  detail::write_file(c.out() / "resolution_mae.csv", table.str());
  std::snprintf(buf, sizeof buf, "evaluate: MAE stdr %.4f, mrstk %.4f, persistence %.4f, var %.4f",
                agg["stdr"]["mae"].get<double>(), agg["mrstk"]["mae"].get<double>(),
                agg["persistence"]["mae"].get<double>(), agg["var"]["mae"].get<double>());
  log(buf);
  return report;
}

// Orchestration -------------------------------------------------------------------------

struct Stage {
  const char *name;
  void (*run)(const PipelineConfig &, const Logger &);
};

inline const std::vector<Stage> &pipeline_stages() {
  static const std::vector<Stage> stages = {
      {"simulate", stage_simulate},
      {"cluster", stage_cluster},
      {"ddg", stage_ddg},
      {"fit-stdr", stage_fit_stdr},
      {"forecast", stage_forecast},
      {"fit-mrstk", stage_fit_mrstk},
      {"correct", stage_correct},
      {"evaluate", [](const PipelineConfig &c, const Logger &l) { stage_evaluate(c, l); }},
  };
  return stages;
}

/// Runs one named stage; failures other than config errors are rethrown as
/// stage failures carrying the stage name.
inline void run_stage(const std::string &name, const PipelineConfig &c, const Logger &log) {
  const auto &stages = pipeline_stages();
  const auto it = std::find_if(stages.begin(), stages.end(),
                               [&](const Stage &s) { return name == s.name; });
  if (it == stages.end())
    throw Error(Errc::config, "unknown stage '" + name + "'");
  try {
    fs::create_directories(c.out());
    it->run(c, log);
  } catch (const Error &e) {
    if (e.code() == Errc::config)
      throw;
    throw Error(Errc::stage_failure, std::string(it->name) + ": " + e.what());
  } catch (const std::exception &e) {
    throw Error(Errc::stage_failure, std::string(it->name) + ": " + e.what());
  }
}

/// All stages in order (simulate only when the config has a synth section and
/// no explicit input). Stage runtimes go to timings.json beside the report.
inline nlohmann::json run_pipeline(const PipelineConfig &c, const Logger &log) {
  c.validate();
  nlohmann::json timings = nlohmann::json::object();
  for (const Stage &s : pipeline_stages()) {
    if (std::string(s.name) == "simulate" && !(c.synth && c.input.empty()))
      continue;
    const auto t0 = std::chrono::steady_clock::now();
    run_stage(s.name, c, log);
    timings[s.name] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  detail::write_json(c.out() / "timings.json", timings);
  return detail::read_json(c.out() / "report.json");
}

} // namespace mrwind
