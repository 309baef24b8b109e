#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iontrace/types.hpp"

namespace iontrace::program {

enum class RampShape { Linear };

struct RfTerm {
  double amplitude = 0.0; ///< V
  double frequency = 0.0; ///< rad/s
  double phase = 0.0;     ///< rad, value at t = 0 is amplitude * cos(phase)
};

struct SwitchEvent {
  double trigger_time = 0.0; ///< s, jitter is added on top
  double target_level = 0.0; ///< V
  double rise_time = 0.0;    ///< s
  RampShape shape = RampShape::Linear;
};

struct ElectrodeProgram {
  double dc_level = 0.0;
  std::optional<RfTerm> rf;
  std::vector<SwitchEvent> switches; ///< time-ordered
};

/// Per-electrode time-dependent voltage law with a shared trigger jitter.
class VoltageProgram {
public:
  VoltageProgram() = default;
  explicit VoltageProgram(std::vector<std::string> electrode_names)
      : names_(std::move(electrode_names)),
        programs_(names_.size()) {}

  ElectrodeProgram& at(const std::string& name);
  const ElectrodeProgram& at(const std::string& name) const;
  ElectrodeProgram& at(int electrode) { return programs_[static_cast<std::size_t>(electrode)]; }
  const ElectrodeProgram& at(int electrode) const { return programs_[static_cast<std::size_t>(electrode)]; }

  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }

  double trigger_jitter_sigma = 0.0; ///< s, shifts every switch trigger

  /// Throws ParameterError on out-of-order switches or negative rise times.
  void validate() const;

  double voltage_at(int electrode, double t, double jitter_draw = 0.0) const;
  VecX voltages_at(double t, double jitter_draw = 0.0) const;

  bool has_rf() const;
  double max_rf_frequency() const; ///< rad/s, 0 when no rf term
  /// Latest time at which any ramp is still changing (jitter included).
  double last_switch_end(double jitter_draw = 0.0) const;

private:
  std::vector<std::string> names_;
  std::vector<ElectrodeProgram> programs_;
};

} // namespace iontrace::program
