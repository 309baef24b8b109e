#include "iontrace/program.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace iontrace::program {

ElectrodeProgram& VoltageProgram::at(const std::string& name) {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end())
    throw ParameterError("unknown electrode '" + name + "'");
  return programs_[static_cast<std::size_t>(it - names_.begin())];
}

const ElectrodeProgram& VoltageProgram::at(const std::string& name) const {
  return const_cast<VoltageProgram*>(this)->at(name);
}

void VoltageProgram::validate() const {
  if (trigger_jitter_sigma < 0.0)
    throw ParameterError("trigger jitter sigma must be >= 0");
  for (std::size_t e = 0; e < programs_.size(); ++e) {
    double prev = -std::numeric_limits<double>::infinity();
    for (const auto& sw : programs_[e].switches) {
      if (sw.rise_time < 0.0)
        throw ParameterError("negative rise time on '" + names_[e] + "'");
      if (sw.trigger_time < prev)
        throw ParameterError("switches out of order on '" + names_[e] + "'");
      prev = sw.trigger_time;
    }
    if (programs_[e].rf && programs_[e].rf->frequency <= 0.0)
      throw ParameterError("rf term needs frequency > 0 on '" + names_[e] + "'");
  }
}

double VoltageProgram::voltage_at(int electrode, double t,
                                  double jitter_draw) const {
  const ElectrodeProgram& p = programs_[static_cast<std::size_t>(electrode)];
  double level = p.dc_level;
  for (const auto& sw : p.switches) {
    const double t0 = sw.trigger_time + jitter_draw;
    if (t <= t0) break;
    if (t >= t0 + sw.rise_time || sw.rise_time == 0.0) {
      level = sw.target_level;
    } else {
      level += (sw.target_level - level) * (t - t0) / sw.rise_time;
      break;
    }
  }
  if (p.rf)
    level += p.rf->amplitude * std::cos(p.rf->frequency * t + p.rf->phase);
  return level;
}

VecX VoltageProgram::voltages_at(double t, double jitter_draw) const {
  VecX v(size());
  for (int e = 0; e < size(); ++e) v[e] = voltage_at(e, t, jitter_draw);
  return v;
}

bool VoltageProgram::has_rf() const {
  for (const auto& p : programs_)
    if (p.rf && p.rf->amplitude != 0.0) return true;
  return false;
}

double VoltageProgram::max_rf_frequency() const {
  double f = 0.0;
  for (const auto& p : programs_)
    if (p.rf && p.rf->amplitude != 0.0) f = std::max(f, p.rf->frequency);
  return f;
}

double VoltageProgram::last_switch_end(double jitter_draw) const {
  double t = -std::numeric_limits<double>::infinity();
  for (const auto& p : programs_)
    for (const auto& sw : p.switches)
      t = std::max(t, sw.trigger_time + jitter_draw + sw.rise_time);
  return t;
}

} // namespace iontrace::program
