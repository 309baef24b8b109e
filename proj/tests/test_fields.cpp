#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "iontrace/bem.hpp"
#include "iontrace/bem_axi.hpp"
#include "iontrace/constants.hpp"
#include "iontrace/fields.hpp"
#include "iontrace/geometry.hpp"
#include "iontrace/rng.hpp"

using namespace iontrace;
using namespace iontrace::fields;
using iontrace::geometry::PanelMesh;

namespace {

const FieldBasis3D& sphere_basis() {
  static FieldBasis3D basis = [] {
    auto g = geometry::make_sphere(1e-3, 3);
    auto mesh = geometry::panelize(g, 1e-3); // fixed panels pass through
    return FieldBasis3D::solve(mesh);
  }();
  return basis;
}

} // namespace

TEST_CASE("unit sphere at 1 V reproduces a/r within 1%") {
  const auto& basis = sphere_basis();
  const double a = 1e-3;
  VecX v = VecX::Ones(1);
  for (double f : {2.0, 5.0, 10.0}) {
    const Vec3 x(0.3 * f * a, -0.5 * f * a,
                 std::sqrt(1.0 - 0.09 - 0.25) * f * a);
    const double phi = basis.potential_at(x, v);
    CHECK(phi == doctest::Approx(a / (f * a) * 1.0).epsilon(0.01));
  }
  // Field magnitude at r = 3a: a / r^2 volts-per-metre.
  const Vec3 x(0, 0, 3 * a);
  CHECK(basis.efield_at(x, v).norm() ==
        doctest::Approx(a / (9.0 * a * a)).epsilon(0.01));
}

TEST_CASE("sphere capacitance is 4 pi eps0 a") {
  const auto& basis = sphere_basis();
  const double a = 1e-3;
  MatX c = basis.capacitance_matrix();
  REQUIRE(c.rows() == 1);
  CHECK(c(0, 0) == doctest::Approx(4.0 * constants::pi *
                                   constants::vacuum_permittivity * a)
                       .epsilon(0.01));
}

TEST_CASE("harmonicity: numerical Laplacian vanishes at random exterior points") {
  const auto& basis = sphere_basis();
  VecX v = VecX::Ones(1);
  RandomStream rng(11, 0);
  const double a = 1e-3, h = 2e-5;
  int tested = 0;
  while (tested < 100) {
    Vec3 x(rng.next_normal(), rng.next_normal(), rng.next_normal());
    x *= (2.0 + 6.0 * rng.next_uniform()) * a / x.norm();
    double lap = -6.0 * basis.potential_at(x, v);
    for (int k = 0; k < 3; ++k) {
      Vec3 dp = x, dm = x;
      dp[k] += h;
      dm[k] -= h;
      lap += basis.potential_at(dp, v) + basis.potential_at(dm, v);
    }
    // Scale by the local potential over h^2; FD cancellation limits this
    // to ~1e-5 relative at h = 20 um.
    const double scale = std::abs(basis.potential_at(x, v)) / (h * h);
    CHECK(std::abs(lap / (h * h)) / scale < 1e-4);
    ++tested;
  }
}

TEST_CASE("linearity: potential is linear in electrode voltages") {
  auto g = geometry::make_plate_pair(5e-3, 2e-3);
  auto mesh = geometry::panelize(g, 0.6e-3);
  auto basis = FieldBasis3D::solve(mesh);
  REQUIRE(basis.electrode_count() == 2);
  RandomStream rng(3, 0);
  for (int i = 0; i < 100; ++i) {
    Vec3 x(1.5e-3 * (rng.next_uniform() - 0.5),
           1.5e-3 * (rng.next_uniform() - 0.5),
           1.6e-3 * (rng.next_uniform() - 0.5));
    VecX va(2), vb(2);
    va << 1.0, 0.0;
    vb << 0.0, 1.0;
    const double alpha = 2.5, beta = -0.7;
    const double lhs = basis.potential_at(x, VecX(alpha * va + beta * vb));
    const double rhs = alpha * basis.potential_at(x, va) +
                       beta * basis.potential_at(x, vb);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("efield matches the finite-difference gradient of the potential") {
  const auto& basis = sphere_basis();
  VecX v = VecX::Ones(1);
  RandomStream rng(7, 0);
  const double a = 1e-3, h = 1e-6;
  for (int i = 0; i < 20; ++i) {
    Vec3 x(rng.next_normal(), rng.next_normal(), rng.next_normal());
    x *= (1.8 + 4.0 * rng.next_uniform()) * a / x.norm();
    const Vec3 e = basis.efield_at(x, v);
    for (int k = 0; k < 3; ++k) {
      Vec3 dp = x, dm = x;
      dp[k] += h;
      dm[k] -= h;
      const double fd =
          -(basis.potential_at(dp, v) - basis.potential_at(dm, v)) / (2 * h);
      CHECK(std::abs(e[k] - fd) < 1e-4 * e.norm());
    }
  }
}

TEST_CASE("boundary residual: surface potential reproduces 1 V within 1e-3") {
  const auto& basis = sphere_basis();
  VecX sigma = basis.combine(VecX::Ones(1));
  // Collocate midway between panel centroids (off the singular points).
  const auto& mesh = basis.mesh();
  int checked = 0;
  for (std::size_t i = 0; i < mesh.panels.size() && checked < 50; i += 7) {
    Vec3 x = mesh.panels[i].centroid();
    x *= 1.0; // centroid lies on the surface for flat panels
    const double phi = basis.potential(x, sigma);
    CHECK(phi == doctest::Approx(1.0).epsilon(2e-3));
    ++checked;
  }
}

TEST_CASE("axisymmetric ring kernel matches the 3D panel solution") {
  // Solve a short charged cylinder both as rings and as 3D panels and
  // compare the on-axis potential.
  geometry::TubeParams tp;
  tp.radius = 2e-3;
  tp.length = 6e-3;
  tp.axial_position = -3e-3;
  auto g = geometry::build_tube(tp);
  auto mesh = geometry::panelize(g, 0.25e-3);
  REQUIRE(mesh.axisymmetric);
  auto basis = FieldBasisAxi::solve(mesh);
  VecX v = VecX::Ones(1);
  // Deep inside a long-ish tube the potential approaches the wall value.
  CHECK(basis.potential_at(0.0, 0.0, v) == doctest::Approx(1.0).epsilon(0.02));
  // Axis derivatives are consistent with finite differences of order 0.
  double d[3];
  VecX sigma = basis.combine(v);
  basis.axis_derivatives(1e-3, sigma, 2, d);
  const double h = 1e-5;
  const double fd1 = (basis.potential_at(0, 1e-3 + h, v) -
                      basis.potential_at(0, 1e-3 - h, v)) /
                     (2 * h);
  CHECK(d[1] == doctest::Approx(fd1).epsilon(1e-4));
}

TEST_CASE("axis profile interpolation matches direct evaluation") {
  geometry::LensParams lp;
  auto g = geometry::build_lens(lp);
  auto mesh = geometry::panelize(g, 120e-6);
  auto basis = FieldBasisAxi::solve(mesh);
  VecX v(3);
  v << 0.0, 65.0, 0.0;
  VecX sigma = basis.combine(v);
  const double z0 = lp.axial_position - 4e-3;
  const double z1 = lp.axial_position + 10e-3;
  auto profile = AxisProfile::build(basis, sigma, z0, z1, 1200);

  RandomStream rng(5, 0);
  for (int i = 0; i < 30; ++i) {
    const double z = z0 + (z1 - z0) * rng.next_uniform();
    const double r = 0.25e-3 * rng.next_uniform();
    const double exact = basis.potential(r, z, sigma);
    CHECK(profile.potential(r, z) == doctest::Approx(exact).epsilon(2e-3));
    const Vec2 ef = profile.efield(r, z);
    const Vec2 eref = basis.efield(r, z, sigma);
    // Compare against the field scale, not component-wise (E_r crosses 0).
    const double scale = eref.norm() + 1e3;
    CHECK(std::abs(ef.x() - eref.x()) / scale < 5e-3);
    CHECK(std::abs(ef.y() - eref.y()) / scale < 5e-3);
  }
}

TEST_CASE("on-axis profile maximum of the einzel lens sits in the centre electrode") {
  geometry::LensParams lp;
  auto g = geometry::build_lens(lp);
  auto mesh = geometry::panelize(g, 150e-6);
  auto basis = FieldBasisAxi::solve(mesh);
  VecX v(3);
  v << 0.0, 65.0, 0.0;
  auto prof = on_axis_profile(basis, v, lp.axial_position - 2e-3,
                              lp.axial_position + 9e-3, 400);
  auto peak = axis_maximum(prof);
  const double zc = lp.axial_position + lp.electrode_thicknesses[0] +
                    lp.gap_12 + 0.5 * lp.electrode_thicknesses[1];
  CHECK(std::abs(peak.z - zc) < 1e-3);
  CHECK(peak.phi > 20.0);
  CHECK(peak.phi < 65.0);
}

TEST_CASE("capacitance matrix is symmetric with negative off-diagonals") {
  auto g = geometry::make_plate_pair(5e-3, 2e-3);
  auto mesh = geometry::panelize(g, 0.6e-3);
  auto basis = FieldBasis3D::solve(mesh);
  MatX c = basis.capacitance_matrix();
  REQUIRE(c.rows() == 2);
  CHECK(c(0, 1) == doctest::Approx(c(1, 0)).epsilon(1e-6));
  CHECK(c(0, 1) < 0.0);
  CHECK(c(0, 0) > 0.0);
  // Parallel-plate estimate with fringe fields: C >= eps0 A / d.
  const double ideal = constants::vacuum_permittivity * 25e-6 / 2e-3;
  CHECK(-c(0, 1) > ideal);
  CHECK(-c(0, 1) < 3.0 * ideal);
}

TEST_CASE("voltage vector binds names to indices") {
  VoltageVector v({"a", "b", "c"});
  v.set("b", 2.5);
  CHECK(v.get("b") == 2.5);
  CHECK(v.values()[1] == 2.5);
  CHECK(v.has("c"));
  CHECK(!v.has("z"));
  CHECK_THROWS_AS(v.set("zz", 1.0), ParameterError);
}

TEST_CASE("ideal quadrupole potential and field") {
  QuadrupoleParams qp;
  qp.rf_amplitude = 200.0;
  qp.rf_frequency = 2 * constants::pi * 12.155e6;
  qp.r0 = 1e-3;
  const Vec3 x(0.2e-3, -0.1e-3, 0.0);
  // phi = V cos(wt) (x^2 - y^2) / (2 r0^2)
  const double expect = 200.0 * (0.04e-6 - 0.01e-6) / (2e-6);
  CHECK(ideal_quadrupole_potential(x, 0.0, qp) == doctest::Approx(expect));
  const Vec3 e = ideal_quadrupole_efield(x, 0.0, qp);
  CHECK(e.x() == doctest::Approx(-200.0 * 0.2e-3 / 1e-6));
  CHECK(e.y() == doctest::Approx(200.0 * 0.1e-3 / 1e-6));
  CHECK(e.z() == doctest::Approx(0.0));
  // Quarter period later the field vanishes.
  const double t_quarter = 0.25 * 2 * constants::pi / qp.rf_frequency;
  CHECK(ideal_quadrupole_efield(x, t_quarter, qp).norm() <
        1e-9 * e.norm());
}

TEST_CASE("inside-conductor evaluation raises DomainError") {
  geometry::LensParams lp;
  auto g = geometry::build_lens(lp);
  auto mesh = geometry::panelize(g, 200e-6);
  REQUIRE(!mesh.solids.empty());
  auto basis = FieldBasisAxi::solve(mesh);
  const double rmid = 0.5 * (lp.aperture_diameter / 2.0 + lp.outer_radius);
  const double zmid = lp.axial_position + 0.5 * lp.electrode_thicknesses[0];
  CHECK_THROWS_AS(basis.potential_at(rmid, zmid, VecX::Ones(3)), DomainError);
}

TEST_CASE("basis cache round-trips bit-exactly") {
  const auto& basis = sphere_basis();
  const std::string path = "cache_test.bin";
  REQUIRE(save_basis_cache(basis, path));
  auto loaded = load_basis_cache(basis.mesh(), basis.settings(), path);
  REQUIRE(loaded.has_value());
  CHECK(loaded->panel_count() == basis.panel_count());
  const VecX& a = basis.charge_density(0);
  const VecX& b = loaded->charge_density(0);
  REQUIRE(a.size() == b.size());
  for (int i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
  // A different mesh rejects the cache.
  auto g2 = geometry::make_sphere(1.1e-3, 3);
  auto mesh2 = geometry::panelize(g2, 1e-3);
  CHECK(!load_basis_cache(mesh2, basis.settings(), path).has_value());
  std::remove(path.c_str());
}
