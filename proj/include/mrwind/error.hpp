#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mrwind {

enum class Errc {
  parse,
  gap,
  out_of_range,
  invalid_resolution,
  insufficient_history,
  degenerate_bearing,
  diverged,
  not_positive_definite,
  singular_design,
  config,
  malformed_interval,
  undefined_percentage,
  empty_cluster,
  stage_failure,
  io,
};

inline const char *errc_name(Errc c) {
  switch (c) {
  case Errc::parse: return "parse";
  case Errc::gap: return "gap";
  case Errc::out_of_range: return "out-of-range";
  case Errc::invalid_resolution: return "invalid-resolution";
  case Errc::insufficient_history: return "insufficient-history";
  case Errc::degenerate_bearing: return "degenerate-bearing";
  case Errc::diverged: return "diverged";
  case Errc::not_positive_definite: return "not-positive-definite";
  case Errc::singular_design: return "singular-design";
  case Errc::config: return "config";
  case Errc::malformed_interval: return "malformed-interval";
  case Errc::undefined_percentage: return "undefined-percentage";
  case Errc::empty_cluster: return "empty-cluster";
  case Errc::stage_failure: return "stage-failure";
  case Errc::io: return "io";
  }
  return "unknown";
}

/// Base exception for every failure raised by the library. The code lets
/// callers branch on the failure class without parsing messages.
class Error : public std::runtime_error {
public:
  Error(Errc code, const std::string &what)
      : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

private:
  Errc code_;
};

class ParseError : public Error {
public:
  ParseError(std::size_t line, const std::string &what)
      : Error(Errc::parse, "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

private:
  std::size_t line_;
};

/// Missing (farm, time) cells in an otherwise well-formed input.
class GapError : public Error {
public:
  using Gap = std::pair<int, int>; // (farm_id, time_index)

  explicit GapError(std::vector<Gap> gaps)
      : Error(Errc::gap, describe(gaps)), gaps_(std::move(gaps)) {}
  const std::vector<Gap> &gaps() const noexcept { return gaps_; }

private:
  static std::string describe(const std::vector<Gap> &gaps) {
    std::string msg = "missing observations for " +
                      std::to_string(gaps.size()) + " (farm,time) cell(s):";
    const std::size_t shown = gaps.size() < 20 ? gaps.size() : 20;
    for (std::size_t k = 0; k < shown; ++k)
      msg += " (" + std::to_string(gaps[k].first) + "," +
             std::to_string(gaps[k].second) + ")";
    if (shown < gaps.size())
      msg += " ...";
    return msg;
  }
  std::vector<Gap> gaps_;
};

class DivergedError : public Error {
public:
  DivergedError(int epoch, const std::string &what)
      : Error(Errc::diverged,
              what + " (non-finite objective at epoch " +
                  std::to_string(epoch) + ")"),
        epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

private:
  int epoch_;
};

} // namespace mrwind
