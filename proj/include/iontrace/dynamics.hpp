#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "iontrace/constants.hpp"
#include "iontrace/types.hpp"

namespace iontrace::dynamics {

struct IonSpecies {
  double mass_amu = 40.0;
  double charge_e = 1.0;
  std::string name = "Ca+";

  double mass_kg() const { return mass_amu * constants::atomic_mass_unit; }
  double charge_c() const { return charge_e * constants::elementary_charge; }

  static IonSpecies calcium() { return {40.0, 1.0, "Ca+"}; }
  static IonSpecies nitrogen() { return {14.0, 1.0, "N+"}; }
};

struct IonState {
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  double time = 0.0;
};

using Ensemble = std::vector<IonState>;

struct ThermalSource {
  double temperature_k = 2e-3;
  Vec3 secular_frequencies = Vec3::Zero(); ///< rad/s per axis
  Vec3 offset = Vec3::Zero();              ///< m
  double rf_phase = 0.0;                   ///< rad at sampling instant
};

/// Per-axis Gaussian secular samples (sigma_v = sqrt(kT/m), sigma_x =
/// sigma_v/omega) plus a first-order micromotion velocity kick
/// q E_rf(r) sin(phase) / (m Omega), with E_rf the rf field amplitude at r.
Ensemble sample_thermal(
    const ThermalSource& src, const IonSpecies& species, int n,
    std::uint64_t seed,
    const std::function<Vec3(const Vec3&)>& rf_field_amplitude = {},
    double rf_frequency = 0.0);

/// Time-dependent field seen by the integrator.
class FieldSource {
public:
  virtual ~FieldSource() = default;
  virtual Vec3 efield(const Vec3& x, double t) const = 0;
  virtual double potential(const Vec3& x, double t) const = 0;
  virtual bool inside_conductor(const Vec3& x) const { return false; }
  /// Shortest active rf period, or 0 when no rf term constrains the step.
  virtual double rf_period(double t) const { return 0.0; }
  /// Position-aware variant: sources may lift the cap where the rf drive is
  /// weak enough for plain error control to resolve it.
  virtual double rf_period(const Vec3& x, double t) const {
    (void)x;
    return rf_period(t);
  }
};

struct IntegratorSettings {
  double rtol = 1e-9;
  double atol_pos = 1e-12; ///< m
  double atol_vel = 1e-8;  ///< m/s
  double initial_step = 1e-10;
  double min_step = 1e-16;
  double max_step = 1e-5;
  double event_time_tol = 1e-12; ///< s, bisection width for event times
  int max_steps = 20'000'000;
};

struct Event {
  enum class Kind { PlaneCrossing, Turnaround, Impact, DomainExit };
  Kind kind;
  int ion = 0;
  double time = 0.0;
  Vec3 position = Vec3::Zero();
  Vec3 velocity = Vec3::Zero();
  double plane_z = 0.0; ///< PlaneCrossing only
};

struct StopSpec {
  std::optional<double> z_stop;      ///< stop once every live ion crossed
  bool stop_on_turnaround = false;   ///< stop the shot on first vz sign change
  std::vector<double> record_planes; ///< crossings recorded, not stopping
  double t_end = 1.0;                ///< s, hard time limit
};

struct TrajectoryRecorder {
  std::function<void(int ion, double t, const Vec3& x, const Vec3& v)> sample;
  double interval = 0.0; ///< 0 records every accepted step
};

struct IntegrationResult {
  Ensemble states; ///< at stop time (or at the stop plane for crossed ions)
  std::vector<Event> events;
  std::vector<bool> alive; ///< false after impact
  long steps = 0;
  bool stopped_on_turnaround = false;
};

/// Adaptive Dormand-Prince 5(4) with dense output; integrates
/// m a = q E(r, t) plus pairwise Coulomb repulsion when ions.size() > 1.
/// Step size is capped at rf_period/100 while an rf term is active.
IntegrationResult integrate(const Ensemble& ions, const IonSpecies& species,
                            const FieldSource& field, const StopSpec& stop,
                            const IntegratorSettings& settings = {},
                            TrajectoryRecorder* recorder = nullptr);

struct SecularResult {
  Vec3 frequencies = Vec3::Zero(); ///< rad/s per axis
  bool stable = true;
};

/// Secular frequencies from a spectral fit of small-amplitude motion about
/// a potential minimum at `center`.
SecularResult secular_frequencies(const FieldSource& field,
                                  const IonSpecies& species, const Vec3& center,
                                  double probe_amplitude = 1e-6,
                                  double duration = 60e-6);

/// Equilibrium axial positions of an n-ion harmonic Coulomb chain, sorted.
std::vector<double> chain_equilibrium(int n, double omega_axial,
                                      const IonSpecies& species);

} // namespace iontrace::dynamics
