#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "iontrace/constants.hpp"
#include "iontrace/program.hpp"
#include "iontrace/rng.hpp"
#include "iontrace/types.hpp"

using namespace iontrace;
using namespace iontrace::program;

namespace {

VoltageProgram extraction_like() {
  VoltageProgram p({"seg", "rf"});
  p.at("seg").dc_level = 35.0;
  p.at("seg").switches.push_back({100e-9, 500.0, 5e-9});
  p.at("rf").rf = RfTerm{200.0, 2.0 * constants::pi * 12.155e6, 0.0};
  return p;
}

} // namespace

TEST_CASE("dc level before first switch") {
  auto p = extraction_like();
  CHECK(p.voltage_at(0, 0.0) == 35.0);
  CHECK(p.voltage_at(0, 99e-9) == 35.0);
}

TEST_CASE("linear ramp midpoint and endpoints") {
  auto p = extraction_like();
  CHECK(p.voltage_at(0, 100e-9 + 2.5e-9) == doctest::Approx(0.5 * (35.0 + 500.0)));
  CHECK(p.voltage_at(0, 105e-9) == doctest::Approx(500.0));
  CHECK(p.voltage_at(0, 1.0) == doctest::Approx(500.0));
}

TEST_CASE("rf term evaluates amplitude * cos(w t + phase)") {
  auto p = extraction_like();
  const double w = 2.0 * constants::pi * 12.155e6;
  for (double t : {0.0, 13e-9, 41.2e-9, 205e-9}) {
    CHECK(p.voltage_at(1, t) == doctest::Approx(200.0 * std::cos(w * t)).epsilon(1e-12));
  }
}

TEST_CASE("jitter shifts switch trigger times") {
  auto p = extraction_like();
  const double j = 2e-9;
  // With the trigger delayed by j, the ramp has not started at 101 ns.
  CHECK(p.voltage_at(0, 101e-9, j) == 35.0);
  CHECK(p.voltage_at(0, 100e-9 + j + 2.5e-9, j) == doctest::Approx(267.5));
}

TEST_CASE("trigger-time rf spread implied by 0.34 ns jitter") {
  // An rf voltage sampled at a jittered zero crossing has spread
  // A * w * sigma_t to first order. Draw jitter times and check the
  // realized spread of V(t0 + jitter).
  const double amplitude = 200.0;
  const double w = 2.0 * constants::pi * 12.155e6;
  const double sigma_t = 0.34e-9;
  VoltageProgram p({"rf"});
  p.at("rf").rf = RfTerm{amplitude, w, -constants::pi / 2.0}; // zero crossing at t=0
  p.trigger_jitter_sigma = sigma_t;

  RandomStream rng(7, 0);
  const int n = 20000;
  double s1 = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    const double dt = sigma_t * rng.next_normal();
    const double v = p.voltage_at(0, dt);
    s1 += v;
    s2 += v * v;
  }
  const double mean = s1 / n;
  const double sd = std::sqrt(s2 / n - mean * mean);
  const double expected = amplitude * w * sigma_t;
  CHECK(sd == doctest::Approx(expected).epsilon(0.05));
}

TEST_CASE("validate rejects out-of-order switches and negative rise") {
  VoltageProgram p({"a"});
  p.at("a").switches.push_back({200e-9, 1.0, 5e-9});
  p.at("a").switches.push_back({100e-9, 2.0, 5e-9});
  CHECK_THROWS_AS(p.validate(), ParameterError);

  VoltageProgram q({"a"});
  q.at("a").switches.push_back({100e-9, 1.0, -1e-9});
  CHECK_THROWS_AS(q.validate(), ParameterError);
}

TEST_CASE("voltages_at stacks all electrodes") {
  auto p = extraction_like();
  VecX v = p.voltages_at(0.0);
  REQUIRE(v.size() == 2);
  CHECK(v[0] == 35.0);
  CHECK(v[1] == doctest::Approx(200.0));
}

TEST_CASE("last_switch_end includes jitter") {
  auto p = extraction_like();
  CHECK(p.last_switch_end() == doctest::Approx(105e-9));
  CHECK(p.last_switch_end(3e-9) == doctest::Approx(108e-9));
}

TEST_CASE("max_rf_frequency") {
  auto p = extraction_like();
  CHECK(p.has_rf());
  CHECK(p.max_rf_frequency() == doctest::Approx(2.0 * constants::pi * 12.155e6));
  VoltageProgram q({"a"});
  CHECK(!q.has_rf());
  CHECK(q.max_rf_frequency() == 0.0);
}
