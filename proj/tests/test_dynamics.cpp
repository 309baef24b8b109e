#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "iontrace/constants.hpp"
#include "iontrace/dynamics.hpp"
#include "iontrace/fields.hpp"
#include "iontrace/rng.hpp"

using namespace iontrace;
using namespace iontrace::dynamics;

namespace {

struct QuadField : FieldSource {
  fields::QuadrupoleParams qp;
  Vec3 efield(const Vec3& x, double t) const override {
    return fields::ideal_quadrupole_efield(x, t, qp);
  }
  double potential(const Vec3& x, double t) const override {
    return fields::ideal_quadrupole_potential(x, t, qp);
  }
  double rf_period(double) const override {
    return 2.0 * constants::pi / qp.rf_frequency;
  }
};

struct HarmonicField : FieldSource {
  double k = 1.0; // V/m^2: phi = k/2 (x^2 + y^2 + z^2)
  Vec3 efield(const Vec3& x, double) const override { return -k * x; }
  double potential(const Vec3& x, double) const override {
    return 0.5 * k * x.squaredNorm();
  }
};

struct UniformField : FieldSource {
  Vec3 e = Vec3::Zero();
  Vec3 efield(const Vec3&, double) const override { return e; }
  double potential(const Vec3& x, double) const override { return -e.dot(x); }
};

// Independent Floquet oracle: integrate the Mathieu equation
//   u'' + (a - 2 q cos(2 tau)) u = 0
// over one period with classic fixed-step RK4 to get the monodromy matrix;
// the secular frequency follows from beta = acos(tr M / 2) / pi and
// omega_sec = beta * Omega / 2.
double floquet_secular(double a, double q, double omega_rf) {
  auto rhs = [&](double tau, const Eigen::Vector2d& y) {
    return Eigen::Vector2d(y[1], -(a - 2.0 * q * std::cos(2.0 * tau)) * y[0]);
  };
  Eigen::Matrix2d M;
  for (int col = 0; col < 2; ++col) {
    Eigen::Vector2d y = col == 0 ? Eigen::Vector2d(1, 0) : Eigen::Vector2d(0, 1);
    const int n = 40000;
    const double h = constants::pi / n;
    double tau = 0.0;
    for (int i = 0; i < n; ++i) {
      const Eigen::Vector2d k1 = rhs(tau, y);
      const Eigen::Vector2d k2 = rhs(tau + h / 2, y + h / 2 * k1);
      const Eigen::Vector2d k3 = rhs(tau + h / 2, y + h / 2 * k2);
      const Eigen::Vector2d k4 = rhs(tau + h, y + h * k3);
      y += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
      tau += h;
    }
    M.col(col) = y;
  }
  const double beta = std::acos(std::clamp(0.5 * M.trace(), -1.0, 1.0)) /
                      constants::pi;
  return beta * omega_rf / 2.0;
}

} // namespace

TEST_CASE("paper drive secular frequency matches the Floquet oracle within 1%") {
  QuadField f;
  f.qp.rf_amplitude = 200.0;
  f.qp.rf_frequency = 2.0 * constants::pi * 12.155e6;
  f.qp.r0 = 1e-3;
  const IonSpecies ca = IonSpecies::calcium();

  const double q = fields::mathieu_q(f.qp, ca.mass_kg(), ca.charge_c());
  CHECK(q == doctest::Approx(0.165).epsilon(0.01));

  const double oracle = floquet_secular(0.0, q, f.qp.rf_frequency);
  // First-order estimate q Omega / (2 sqrt(2)) ~ 709 kHz; the oracle carries
  // the full Mathieu correction.
  CHECK(oracle / (2 * constants::pi) == doctest::Approx(709e3).epsilon(0.02));

  auto sec = secular_frequencies(f, ca, Vec3::Zero());
  CHECK(sec.stable);
  CHECK(sec.frequencies.x() == doctest::Approx(oracle).epsilon(0.01));
  CHECK(sec.frequencies.y() == doctest::Approx(oracle).epsilon(0.01));
}

TEST_CASE("harmonic oscillator: period and energy drift") {
  HarmonicField f;
  f.k = 5e8; // omega = sqrt(qk/m)
  const IonSpecies ca = IonSpecies::calcium();
  const double omega = std::sqrt(ca.charge_c() * f.k / ca.mass_kg());

  Ensemble ions(1);
  ions[0].position = Vec3(1e-5, 0, 0);
  StopSpec stop;
  stop.t_end = 20.0 * 2.0 * constants::pi / omega;
  auto res = integrate(ions, ca, f, stop);

  // After an integer number of periods the ion is back at the start.
  const double x_expect = 1e-5 * std::cos(omega * stop.t_end);
  CHECK(res.states[0].position.x() == doctest::Approx(x_expect).epsilon(1e-5));

  const double e0 = 0.5 * ca.charge_c() * f.k * 1e-10;
  const double e1 = 0.5 * ca.mass_kg() * res.states[0].velocity.squaredNorm() +
                    ca.charge_c() * f.potential(res.states[0].position, 0.0);
  CHECK(std::abs(e1 - e0) / e0 < 1e-6);
}

TEST_CASE("plane crossing event is localized and interpolated") {
  UniformField f; // field-free
  const IonSpecies ca = IonSpecies::calcium();
  Ensemble ions(1);
  ions[0].velocity = Vec3(0, 0, 1000.0);
  StopSpec stop;
  stop.z_stop = 1e-3;
  stop.t_end = 1.0;
  auto res = integrate(ions, ca, f, stop);
  REQUIRE(!res.events.empty());
  const auto& ev = res.events.front();
  CHECK(ev.kind == Event::Kind::PlaneCrossing);
  CHECK(ev.time == doctest::Approx(1e-6).epsilon(1e-9));
  CHECK(ev.position.z() == doctest::Approx(1e-3).epsilon(1e-9));
  CHECK(res.states[0].position.z() == doctest::Approx(1e-3).epsilon(1e-9));
}

TEST_CASE("turnaround event against a retarding field") {
  UniformField f;
  f.e = Vec3(0, 0, -1e4); // decelerates a +z-moving positive ion
  const IonSpecies ca = IonSpecies::calcium();
  Ensemble ions(1);
  ions[0].velocity = Vec3(0, 0, 5e4);
  StopSpec stop;
  stop.stop_on_turnaround = true;
  stop.t_end = 1.0;
  auto res = integrate(ions, ca, f, stop);
  CHECK(res.stopped_on_turnaround);
  // v_z = v0 - (q E / m) t = 0
  const double t_turn = 5e4 * ca.mass_kg() / (ca.charge_c() * 1e4);
  REQUIRE(!res.events.empty());
  bool found = false;
  for (const auto& ev : res.events)
    if (ev.kind == Event::Kind::Turnaround) {
      found = true;
      CHECK(ev.time == doctest::Approx(t_turn).epsilon(1e-6));
    }
  CHECK(found);
}

TEST_CASE("two-ion Coulomb dynamics conserve momentum and energy") {
  HarmonicField f;
  f.k = 2e8;
  const IonSpecies ca = IonSpecies::calcium();
  const double omega = std::sqrt(ca.charge_c() * f.k / ca.mass_kg());
  auto zs = chain_equilibrium(2, omega, ca);
  Ensemble ions(2);
  ions[0].position = Vec3(0, 0, zs[0] * 1.02); // slight squeeze
  ions[1].position = Vec3(0, 0, zs[1] * 1.02);
  StopSpec stop;
  stop.t_end = 10e-6;
  auto res = integrate(ions, ca, f, stop);

  const Vec3 ptot = res.states[0].velocity + res.states[1].velocity;
  // Breathing-mode motion is symmetric: total momentum stays ~0 relative to
  // the individual momenta.
  const double pscale = res.states[0].velocity.norm() + 1e-30;
  CHECK(ptot.norm() / pscale < 1e-6);

  auto energy = [&](const Ensemble& e) {
    double sum = 0.0;
    for (const auto& s : e)
      sum += 0.5 * ca.mass_kg() * s.velocity.squaredNorm() +
             ca.charge_c() * f.potential(s.position, 0.0);
    sum += constants::coulomb_constant * ca.charge_c() * ca.charge_c() /
           (e[0].position - e[1].position).norm();
    return sum;
  };
  Ensemble start(2);
  start[0].position = Vec3(0, 0, zs[0] * 1.02);
  start[1].position = Vec3(0, 0, zs[1] * 1.02);
  const double e0 = energy(start);
  CHECK(std::abs(energy(res.states) - e0) / std::abs(e0) < 1e-6);
}

TEST_CASE("chain equilibrium matches the two-ion analytic spacing") {
  const IonSpecies ca = IonSpecies::calcium();
  const double omega = 2.0 * constants::pi * 280e3;
  auto zs = chain_equilibrium(2, omega, ca);
  REQUIRE(zs.size() == 2);
  const double d = zs[1] - zs[0];
  const double expected =
      std::cbrt(2.0 * constants::coulomb_constant * ca.charge_c() *
                ca.charge_c() / (ca.mass_kg() * omega * omega));
  CHECK(d == doctest::Approx(expected).epsilon(1e-6));
  CHECK(zs[0] == doctest::Approx(-zs[1]).epsilon(1e-9));
}

TEST_CASE("thermal sampling statistics") {
  ThermalSource src;
  src.temperature_k = 2e-3;
  src.secular_frequencies =
      Vec3(2 * constants::pi * 430e3, 2 * constants::pi * 430e3,
           2 * constants::pi * 280e3);
  const IonSpecies ca = IonSpecies::calcium();
  const int n = 40000;
  auto ens = sample_thermal(src, ca, n, 17);
  REQUIRE(static_cast<int>(ens.size()) == n);

  const double sigma_v = std::sqrt(constants::boltzmann * 2e-3 / ca.mass_kg());
  double sv = 0.0, sx = 0.0, mx = 0.0;
  for (const auto& s : ens) {
    sv += s.velocity.x() * s.velocity.x();
    sx += s.position.x() * s.position.x();
    mx += s.position.x();
  }
  CHECK(std::sqrt(sv / n) == doctest::Approx(sigma_v).epsilon(0.03));
  CHECK(std::sqrt(sx / n) ==
        doctest::Approx(sigma_v / (2 * constants::pi * 430e3)).epsilon(0.03));
  CHECK(std::abs(mx / n) < 3.0 * sigma_v / (2 * constants::pi * 430e3) /
                               std::sqrt(double(n)));

  // Determinism: same seed, same draws.
  auto again = sample_thermal(src, ca, 10, 17);
  for (int i = 0; i < 10; ++i) {
    CHECK(again[i].position == ens[i].position);
    CHECK(again[i].velocity == ens[i].velocity);
  }
}

TEST_CASE("micromotion kick grows with displacement from the rf null") {
  ThermalSource src;
  src.temperature_k = 0.0;
  src.secular_frequencies = Vec3::Constant(2 * constants::pi * 400e3);
  src.rf_phase = constants::pi / 2.0; // sin = 1, maximal kick
  const IonSpecies ca = IonSpecies::calcium();
  fields::QuadrupoleParams qp;
  qp.rf_amplitude = 200.0;
  qp.rf_frequency = 2 * constants::pi * 12.155e6;
  qp.r0 = 1e-3;
  auto rf_amp = [&](const Vec3& x) {
    return fields::ideal_quadrupole_efield(x, 0.0, qp); // t=0: cos = 1
  };

  src.offset = Vec3(50e-6, 0, 0);
  auto kicked = sample_thermal(src, ca, 1, 1, rf_amp, qp.rf_frequency);
  src.offset = Vec3(150e-6, 0, 0);
  auto kicked3 = sample_thermal(src, ca, 1, 1, rf_amp, qp.rf_frequency);
  const double v1 = kicked[0].velocity.norm();
  const double v3 = kicked3[0].velocity.norm();
  CHECK(v1 > 0.0);
  CHECK(v3 == doctest::Approx(3.0 * v1).epsilon(1e-9));

  // Expected magnitude: q E sin(phase) / (m Omega).
  const double e_amp = rf_amp(Vec3(50e-6, 0, 0)).norm();
  CHECK(v1 == doctest::Approx(ca.charge_c() * e_amp /
                              (ca.mass_kg() * qp.rf_frequency))
                  .epsilon(1e-9));
}

TEST_CASE("stable trap keeps an unextracted ion bounded for 100 us") {
  QuadField f;
  f.qp.rf_amplitude = 200.0;
  f.qp.rf_frequency = 2 * constants::pi * 12.155e6;
  f.qp.r0 = 1e-3;
  f.qp.dc_axial_curvature = 2.0e7; // weak axial confinement
  const IonSpecies ca = IonSpecies::calcium();
  Ensemble ions(1);
  ions[0].position = Vec3(10e-6, 5e-6, 20e-6);
  StopSpec stop;
  stop.t_end = 100e-6;
  auto res = integrate(ions, ca, f, stop);
  CHECK(res.states[0].position.norm() < 200e-6);
  CHECK(res.alive[0]);
}
