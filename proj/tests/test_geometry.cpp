#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "iontrace/constants.hpp"
#include "iontrace/geometry.hpp"

using namespace iontrace;
using namespace iontrace::geometry;

TEST_CASE("trap electrode roster") {
  auto g = build_trap(TrapParams{});
  std::set<std::string> names;
  for (const auto& e : g.electrodes) names.insert(e.name);
  // 8 segments on 4 blades, 2 rf rails, 2 ground rails, 4 deflectors.
  for (char blade : {'A', 'B', 'C', 'D'})
    for (int s = 1; s <= 8; ++s)
      CHECK(names.count("seg" + std::to_string(s) + std::string(1, blade)) == 1);
  CHECK(names.count("rfA") == 1);
  CHECK(names.count("rfC") == 1);
  CHECK(names.count("gndB") == 1);
  CHECK(names.count("gndD") == 1);
  for (char blade : {'A', 'B', 'C', 'D'})
    CHECK(names.count("defl" + std::string(1, blade)) == 1);
  CHECK(g.electrodes.size() == 40);
}

TEST_CASE("trap is mirror symmetric about x and y planes") {
  auto g = build_trap(TrapParams{});
  REQUIRE(g.mirror_plane_normals.size() >= 2);
  // The blade layout maps A<->C under x-mirror and B<->D under y-mirror;
  // total patch area per blade pair must match exactly.
  auto area = [&](const std::string& name) {
    return g.electrodes[static_cast<std::size_t>(g.electrode_index(name))]
        .analytic_area();
  };
  CHECK(area("rfA") == doctest::Approx(area("rfC")).epsilon(1e-12));
  CHECK(area("gndB") == doctest::Approx(area("gndD")).epsilon(1e-12));
  for (int s = 1; s <= 8; ++s) {
    const std::string n = "seg" + std::to_string(s);
    CHECK(area(n + "A") == doctest::Approx(area(n + "C")).epsilon(1e-12));
    CHECK(area(n + "B") == doctest::Approx(area(n + "D")).epsilon(1e-12));
  }
}

TEST_CASE("panelized mesh area matches analytic electrode area") {
  auto g = build_trap(TrapParams{});
  auto mesh = panelize(g, 600e-6, 2.0);
  auto audit = audit_mesh(mesh, g);
  REQUIRE(audit.meshed_area.size() == g.electrodes.size());
  for (std::size_t e = 0; e < g.electrodes.size(); ++e) {
    CHECK(audit.meshed_area[e] ==
          doctest::Approx(audit.analytic_area[e]).epsilon(1e-9));
  }
}

TEST_CASE("gap refinement caps panel diameter near segment gaps") {
  auto g = build_trap(TrapParams{});
  auto coarse = panelize(g, 600e-6, 1.0);
  auto fine = panelize(g, 600e-6, 4.0);
  CHECK(fine.panels.size() > coarse.panels.size());
}

TEST_CASE("panel normals and centroids are consistent") {
  auto g = build_trap(TrapParams{});
  auto mesh = panelize(g, 800e-6, 2.0);
  for (const auto& p : mesh.panels) {
    CHECK(std::abs(p.normal().norm() - 1.0) < 1e-12);
    CHECK(p.area() > 0.0);
    CHECK(p.diameter() > 0.0);
    CHECK(p.electrode >= 0);
    CHECK(p.electrode < static_cast<int>(mesh.electrode_names.size()));
  }
}

TEST_CASE("icosphere area converges to 4 pi r^2") {
  const double r = 0.37;
  auto g = make_sphere(r, 4);
  double area = 0.0;
  for (const auto& p : g.electrodes[0].fixed_panels) area += p.area();
  CHECK(area == doctest::Approx(4.0 * constants::pi * r * r).epsilon(0.01));
}

TEST_CASE("lens geometry is axisymmetric with three electrodes") {
  auto g = build_lens(LensParams{});
  CHECK(g.axisymmetric());
  REQUIRE(g.electrodes.size() == 3);
  CHECK(g.electrodes[0].name == "L1");
  CHECK(g.electrodes[1].name == "L2");
  CHECK(g.electrodes[2].name == "L3");
  auto mesh = panelize(g, 100e-6);
  CHECK(mesh.axisymmetric);
  CHECK(mesh.rings.size() > 100);
  // The lens body is a solid: points inside an electrode are flagged.
  LensParams lp;
  const double rmid = 0.5 * (lp.aperture_diameter / 2.0 + lp.outer_radius);
  const double zmid = lp.axial_position + 0.5 * lp.electrode_thicknesses[0];
  CHECK(mesh.inside_conductor(Vec3(rmid, 0.0, zmid)));
  CHECK(!mesh.inside_conductor(Vec3(0.0, 0.0, zmid)));
}

TEST_CASE("tube geometry") {
  auto g = build_tube(TubeParams{});
  CHECK(g.axisymmetric());
  REQUIRE(g.electrodes.size() == 1);
  CHECK(g.electrodes[0].name == "tube");
}

TEST_CASE("mesh grading grows panels away from the focus segment") {
  auto g = build_trap(TrapParams{});
  auto mesh = panelize(g, 300e-6, 2.0);
  // Panels near the trap centre stay at the target size; panels at the far
  // blade ends (z ~ +-32 mm, grade 0.3) may be several times larger.
  double near_max = 0.0, far_max = 0.0;
  for (const auto& p : mesh.panels) {
    const double z = std::abs(p.centroid().z());
    if (z < 2e-3) near_max = std::max(near_max, p.diameter());
    if (z > 25e-3) far_max = std::max(far_max, p.diameter());
  }
  CHECK(near_max < 2.1 * 300e-6); // diagonal of a square panel ~ sqrt(2) target
  CHECK(far_max > 2.0 * near_max);
}

TEST_CASE("mesh content hash is stable and sensitive") {
  auto g = build_trap(TrapParams{});
  auto a = panelize(g, 700e-6, 2.0);
  auto b = panelize(g, 700e-6, 2.0);
  CHECK(mesh_content_hash(a) == mesh_content_hash(b));
  TrapParams tweaked;
  tweaked.blade_separation = 2.1e-3;
  auto c = panelize(build_trap(tweaked), 700e-6, 2.0);
  CHECK(mesh_content_hash(a) != mesh_content_hash(c));
}

TEST_CASE("electrode_index reports unknown names as -1") {
  auto g = build_trap(TrapParams{});
  CHECK(g.electrode_index("rfA") >= 0);
  CHECK(g.electrode_index("nonsense") == -1);
}
