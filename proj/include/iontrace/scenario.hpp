#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iontrace/beamline.hpp"
#include "iontrace/diagnostics.hpp"
#include "iontrace/optimize.hpp"

namespace iontrace::scenario {

struct SchemaIssue {
  std::string path;
  std::string message;
};

/// Scenario text failed schema validation; carries every issue found.
class ScenarioError : public std::runtime_error {
public:
  explicit ScenarioError(std::vector<SchemaIssue> issues);
  const std::vector<SchemaIssue>& issues() const { return issues_; }

private:
  std::vector<SchemaIssue> issues_;
};

struct OptimizeParameter {
  std::string path;
  double lower = 0.0;
  double upper = 0.0;
};

struct Study {
  enum class Kind {
    None,
    Sweep,
    Optimize,
    DeflectionScan,
    Reflection,
    StartOffset,
    Misalignment,
    Transmission
  };
  Kind kind = Kind::None;
  int shots = 200; ///< ensemble size per evaluation

  // sweep / optimize
  std::string metric; ///< r68_at_plane, focal_r68, mean_speed, speed_spread,
                      ///< transmission
  double metric_plane_z = 0.0;
  double focal_window_lo = 0.0;
  double focal_window_hi = 0.0;
  std::string parameter;
  std::vector<double> grid;
  std::vector<OptimizeParameter> parameters;
  int budget = 60;
  int final_shots = 1000;

  // deflection scan / transmission
  std::vector<double> u1_grid;
  std::vector<double> u2_grid;
  geometry::Aperture aperture;
  double quantum_efficiency = 1.0;
  int mc_samples = 100000;
  double spot_scale = 1.0;

  // reflection
  double query_voltage = 0.0;
  double lower_voltage = 0.0;
  double upper_voltage = 0.0;

  // start offset / misalignment
  std::vector<double> offsets;
};

struct Scenario {
  beamline::Beamline beam;
  beamline::PhasePolicy phase_policy = beamline::PhasePolicy::Fixed;
  double fixed_phase = 0.0;
  std::uint64_t seed = 1;
  int shots = 300;
  bool out_spots = true;
  bool out_tof = true;
  bool out_svg = true;
  Study study;
  std::string text; ///< canonical serialized form (drives content_hash)

  std::uint64_t content_hash() const;
};

/// Parse and schema-validate scenario text (JSON). Unknown keys, missing
/// unit suffixes and type mismatches throw ScenarioError with key paths.
Scenario parse_scenario(const std::string& text);

/// Canonical serialization; parse(serialize(s)) == s.
std::string serialize(const Scenario& s);

/// Named presets mirroring the published studies.
std::string preset(const std::string& name);
std::vector<std::string> preset_names();

struct RunOptions {
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed; ///< overrides the scenario seed
  int workers = 1;
  std::string cache_dir;
};

struct RunReport {
  std::string summary; ///< structured key = value text
  std::vector<std::string> files;
  std::uint64_t scenario_hash = 0;
  std::uint64_t seed = 0;
};

/// Solve fields, run the ensemble, run the study, write artifacts.
RunReport run(const Scenario& s, const RunOptions& opts);

/// Solve and cache the field bases only.
RunReport solve_only(const Scenario& s, const RunOptions& opts);

} // namespace iontrace::scenario
