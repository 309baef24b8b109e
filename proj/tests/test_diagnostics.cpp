#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "iontrace/diagnostics.hpp"
#include "iontrace/rng.hpp"

using namespace iontrace;
using namespace iontrace::diagnostics;

namespace {

SpotDiagram gaussian_spot(double sigma, int n, std::uint64_t seed,
                          double cx = 0.0, double cy = 0.0) {
  SpotDiagram spot;
  RandomStream rng(seed, 0);
  for (int i = 0; i < n; ++i) {
    SpotHit h;
    h.x = cx + sigma * rng.next_normal();
    h.y = cy + sigma * rng.next_normal();
    h.t = 11e-6 + 1e-9 * rng.next_normal();
    h.speed = 22100.0;
    h.shot_id = i;
    spot.hits.push_back(h);
  }
  return spot;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

} // namespace

TEST_CASE("r68 of an isotropic 2d gaussian is 1.509 sigma") {
  // The radius containing 68% of a 2D isotropic Gaussian: r = sigma *
  // sqrt(-2 ln(1 - 0.68)) = 1.5096 sigma.
  const double sigma = 16.5e-6;
  auto spot = gaussian_spot(sigma, 60000, 42);
  const double expected = sigma * std::sqrt(-2.0 * std::log(1.0 - 0.68));
  CHECK(r68(spot) == doctest::Approx(expected).epsilon(0.02));
}

TEST_CASE("r68 is computed about the centroid, not the axis") {
  auto centred = gaussian_spot(1e-6, 5000, 3);
  auto shifted = gaussian_spot(1e-6, 5000, 3, 4e-3, -2e-3);
  CHECK(r68(shifted) == doctest::Approx(r68(centred)).epsilon(1e-9));
}

TEST_CASE("r68 scales linearly with the spot") {
  auto spot = gaussian_spot(2e-6, 4000, 9);
  auto doubled = spot_scale(spot, 2.2);
  CHECK(r68(doubled) == doctest::Approx(2.2 * r68(spot)).epsilon(1e-9));
  // Scaling is about the centroid.
  CHECK(doubled.centroid().x() == doctest::Approx(spot.centroid().x()));
  CHECK(doubled.centroid().y() == doctest::Approx(spot.centroid().y()));
}

TEST_CASE("r68 throws below 3 hits") {
  SpotDiagram s;
  s.hits.push_back({0, 0, 0, 0, 0, 0});
  s.hits.push_back({1e-6, 0, 0, 0, 1, 0});
  CHECK_THROWS_AS(r68(s), ParameterError);
}

TEST_CASE("principal extents recover an anisotropic spot") {
  SpotDiagram spot;
  RandomStream rng(5, 0);
  const double sa = 3e-6, sb = 1e-6, c = std::cos(0.4), s = std::sin(0.4);
  for (int i = 0; i < 40000; ++i) {
    const double a = sa * rng.next_normal(), b = sb * rng.next_normal();
    spot.hits.push_back({c * a - s * b, s * a + c * b, 0, 0, i, 0});
  }
  Vec2 e = spot.principal_extents();
  CHECK(std::max(e.x(), e.y()) == doctest::Approx(sa).epsilon(0.03));
  CHECK(std::min(e.x(), e.y()) == doctest::Approx(sb).epsilon(0.03));
}

TEST_CASE("divergence is 2 r68 over distance") {
  auto spot = gaussian_spot(16.5e-6 / 1.5096, 20000, 8);
  const double d = divergence(spot, 0.247);
  CHECK(d == doctest::Approx(2.0 * r68(spot) / 0.247));
  // Paper scale: 16.5 um spot at 247 mm ~ 134 urad full angle.
  CHECK(d == doctest::Approx(134e-6).epsilon(0.05));
}

TEST_CASE("velocity stats") {
  std::vector<double> speeds = {10.0, 12.0, 14.0};
  auto st = velocity_stats(speeds);
  CHECK(st.mean == doctest::Approx(12.0));
  CHECK(st.spread == doctest::Approx(2.0)); // sample (n-1) convention
  CHECK(st.relative == doctest::Approx(2.0 / 12.0));
}

TEST_CASE("tof histogram statistics") {
  std::vector<beamline::ShotRecord> recs;
  RandomStream rng(21, 0);
  for (int i = 0; i < 4000; ++i) {
    beamline::ShotRecord r;
    r.shot_id = i;
    beamline::IonShot ion;
    ion.outcome = beamline::Outcome::Hit;
    ion.target.time = 11.2e-6 + 5e-9 * rng.next_normal();
    ion.target_speed = 22100.0;
    r.ions.push_back(ion);
    recs.push_back(r);
  }
  auto h = tof_histogram(recs, 1e-9);
  CHECK(h.mean == doctest::Approx(11.2e-6).epsilon(1e-4));
  CHECK(h.sigma == doctest::Approx(5e-9).epsilon(0.05));
  long total = 0;
  for (long c : h.counts) total += c;
  CHECK(total == 4000);
}

TEST_CASE("transmission: aperture much larger than spot is flat at the efficiency") {
  auto spot = gaussian_spot(10e-6, 3000, 13);
  geometry::Aperture ap;
  ap.diameter = 10e-3;
  DetectionModel det;
  det.quantum_efficiency = 0.8;
  auto tr = transmission(spot, ap, det, 200000, 99);
  CHECK(tr.probability == doctest::Approx(0.8).epsilon(0.01));
  CHECK(tr.wilson_low < tr.probability);
  CHECK(tr.wilson_high > tr.probability);
}

TEST_CASE("transmission matches the gaussian aperture integral") {
  // P(r < R) = 1 - exp(-R^2 / (2 sigma^2)) for an isotropic Gaussian
  // centred on the aperture.
  const double sigma = 100e-6;
  auto spot = gaussian_spot(sigma, 20000, 17);
  geometry::Aperture ap;
  ap.diameter = 300e-6;
  const double R = 150e-6;
  const double expected = 1.0 - std::exp(-R * R / (2.0 * sigma * sigma));
  auto tr = transmission(spot, ap, DetectionModel{1.0}, 200000, 5);
  CHECK(tr.probability == doctest::Approx(expected).epsilon(0.04));
}

TEST_CASE("wilson interval brackets and narrows with n") {
  auto spot = gaussian_spot(100e-6, 500, 2);
  geometry::Aperture ap;
  ap.diameter = 300e-6;
  auto small = transmission(spot, ap, DetectionModel{1.0}, 1000, 7);
  auto large = transmission(spot, ap, DetectionModel{1.0}, 100000, 7);
  CHECK((small.wilson_high - small.wilson_low) >
        (large.wilson_high - large.wilson_low));
  CHECK(small.wilson_low >= 0.0);
  CHECK(small.wilson_high <= 1.0);
}

TEST_CASE("csv and svg outputs") {
  auto spot = gaussian_spot(5e-6, 50, 31);
  spot.plane_z = 0.247;
  std::vector<beamline::ShotRecord> recs;
  for (const auto& h : spot.hits) {
    beamline::ShotRecord r;
    r.shot_id = h.shot_id;
    beamline::IonShot ion;
    ion.outcome = beamline::Outcome::Hit;
    ion.target.position = Vec3(h.x, h.y, spot.plane_z);
    ion.target.time = h.t;
    ion.target_speed = h.speed;
    r.ions.push_back(ion);
    recs.push_back(r);
  }
  write_spot_csv(spot, recs, "spot_test.csv");
  const std::string csv = slurp("spot_test.csv");
  CHECK(csv.rfind("shot_id,ion_id,x_m,y_m,t_s,v_mps,outcome\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 51);

  auto h = tof_histogram(recs, 10e-9);
  write_tof_csv(h, "tof_test.csv");
  const std::string tof = slurp("tof_test.csv");
  CHECK(tof.rfind("bin_start_s,count\n", 0) == 0);

  write_spot_svg(spot, "spot_test.svg");
  const std::string svg = slurp("spot_test.svg");
  CHECK(svg.find("<svg") != std::string::npos);
  CHECK(svg.find("circle") != std::string::npos);

  std::remove("spot_test.csv");
  std::remove("tof_test.csv");
  std::remove("spot_test.svg");
}

TEST_CASE("spot_from_records keeps only hits at the requested plane") {
  std::vector<beamline::ShotRecord> recs(3);
  for (int i = 0; i < 3; ++i) {
    recs[i].shot_id = i;
    beamline::IonShot ion;
    ion.outcome = i == 1 ? beamline::Outcome::Reflected : beamline::Outcome::Hit;
    ion.target.position = Vec3(1e-6 * i, 0, 0.247);
    recs[i].ions.push_back(ion);
  }
  auto spot = spot_from_records(recs, 0.247);
  CHECK(spot.hits.size() == 2);
}
