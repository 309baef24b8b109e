#include "iontrace/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "iontrace/constants.hpp"

namespace iontrace::geometry {

using constants::pi;

Vec3 Panel::centroid() const {
  if (nvert == 3) return (v[0] + v[1] + v[2]) / 3.0;
  // Area-weighted centroid of the two triangles of the quad.
  Vec3 c1 = (v[0] + v[1] + v[2]) / 3.0;
  Vec3 c2 = (v[0] + v[2] + v[3]) / 3.0;
  double a1 = 0.5 * (v[1] - v[0]).cross(v[2] - v[0]).norm();
  double a2 = 0.5 * (v[2] - v[0]).cross(v[3] - v[0]).norm();
  return (a1 * c1 + a2 * c2) / (a1 + a2);
}

Vec3 Panel::normal() const {
  return (v[1] - v[0]).cross(v[nvert - 1] - v[0]).normalized();
}

double Panel::area() const {
  double a = 0.5 * (v[1] - v[0]).cross(v[2] - v[0]).norm();
  if (nvert == 4) a += 0.5 * (v[2] - v[0]).cross(v[3] - v[0]).norm();
  return a;
}

double Panel::diameter() const {
  double d = 0.0;
  for (int i = 0; i < nvert; ++i)
    for (int j = i + 1; j < nvert; ++j)
      d = std::max(d, (v[i] - v[j]).norm());
  return d;
}

double Electrode::analytic_area() const {
  double a = 0.0;
  for (const auto& p : patches) a += p.area();
  for (const auto& m : meridians) a += m.area();
  for (const auto& f : fixed_panels) a += f.area();
  return a;
}

int GeometrySet::electrode_index(const std::string& name) const {
  for (std::size_t i = 0; i < electrodes.size(); ++i)
    if (electrodes[i].name == name) return static_cast<int>(i);
  return -1;
}

bool GeometrySet::axisymmetric() const {
  return !electrodes.empty() && electrodes.front().axisymmetric;
}

Eigen::AlignedBox3d GeometrySet::bounding_box() const {
  Eigen::AlignedBox3d box;
  for (const auto& e : electrodes) {
    for (const auto& p : e.patches) {
      box.extend(p.origin);
      box.extend(Vec3(p.origin + p.eu));
      box.extend(Vec3(p.origin + p.ev));
      box.extend(Vec3(p.origin + p.eu + p.ev));
    }
    for (const auto& m : e.meridians) {
      double rmax = std::max(m.a.x(), m.b.x());
      box.extend(Vec3(-rmax, -rmax, std::min(m.a.y(), m.b.y())));
      box.extend(Vec3(rmax, rmax, std::max(m.a.y(), m.b.y())));
    }
    for (const auto& f : e.fixed_panels)
      for (int i = 0; i < f.nvert; ++i) box.extend(f.v[i]);
  }
  return box;
}

namespace {

// Exact sign-permutation transforms for the four blade positions; keeps the
// mesh bit-identical under the declared mirror symmetries.
Vec3 blade_to_global(int blade, const Vec3& local) {
  switch (blade) {
    case 0: return {local.x(), local.y(), local.z()};
    case 1: return {-local.y(), local.x(), local.z()};
    case 2: return {-local.x(), -local.y(), local.z()};
    default: return {local.y(), -local.x(), local.z()};
  }
}

RectPatch transform_patch(int blade, const Vec3& origin, const Vec3& eu,
                          const Vec3& ev) {
  const Vec3 o = blade_to_global(blade, origin);
  const Vec3 a = blade_to_global(blade, Vec3(origin + eu));
  const Vec3 b = blade_to_global(blade, Vec3(origin + ev));
  return RectPatch{o, a - o, b - o};
}

void require(bool cond, const std::string& what) {
  if (!cond) throw ParameterError(what);
}

} // namespace

GeometrySet build_trap(const TrapParams& p) {
  require(p.blade_thickness > 0 && p.blade_length > 0 &&
              p.blade_separation > 0 && p.segment_width > 0,
          "trap dimensions must be positive");
  require(p.segment_count >= 2, "segment_count must be >= 2");
  require(p.segment_gap >= 0 && p.rail_depth > 0 && p.segment_depth > 0,
          "trap electrode depths must be positive");

  const double s = 0.5 * p.blade_separation; // tip distance from axis
  const double t = p.blade_thickness;
  const double L = p.blade_length;
  const double pitch = p.segment_width + p.segment_gap;
  const double seg_span = p.segment_count * pitch - p.segment_gap;
  require(seg_span <= L, "segments do not fit within blade_length");

  const double defl_hi = 0.5 * L - p.deflection_margin;
  const double defl_lo = defl_hi - p.deflection_width;
  if (p.deflection_electrode) {
    require(p.deflection_width > 0, "deflection width must be positive");
    require(defl_lo > 0.5 * seg_span, "deflection electrode overlaps segments");
  }

  // The grounded blades may carry a shallower front rail than the rf pair;
  // rail depth per blade, A/C (even) drive the rf.
  const auto rail_depth = [&p](int blade) {
    const bool rf_side = (blade % 2 == 0);
    return (rf_side || p.gnd_rail_depth <= 0) ? p.rail_depth
                                              : p.gnd_rail_depth;
  };

  GeometrySet g;
  g.mirror_plane_normals = {Vec3::UnitX(), Vec3::UnitY()};

  // Solid blade volumes out to the deepest electrode, for collision tests.
  for (int blade = 0; blade < 4; ++blade) {
    const double x_outer =
        s + rail_depth(blade) + p.rail_segment_gap + p.segment_depth;
    const Vec3 c0 = blade_to_global(blade, Vec3(s, -0.5 * t, -0.5 * L));
    const Vec3 c1 = blade_to_global(blade, Vec3(x_outer, 0.5 * t, 0.5 * L));
    SolidRegion solid;
    solid.box.extend(c0);
    solid.box.extend(c1);
    g.solids.push_back(solid);
  }

  const char* blade_names = "ABCD";
  for (int blade = 0; blade < 4; ++blade) {
    const char bn = blade_names[blade];
    const bool rf_side = (blade % 2 == 0); // A and C carry the rf drive
    const double x_seg0 = s + rail_depth(blade) + p.rail_segment_gap;

    if (p.rf_rail) {
      Electrode rail;
      rail.name = (rf_side ? std::string("rf") : std::string("gnd")) + bn;
      // The blades are metal-plated on their faces only; the rail is a pair
      // of film strips along the front edges, the tip cross-section is bare.
      for (int side = 0; side < 2; ++side) {
        const double y = (side == 0 ? 0.5 * t : -0.5 * t);
        rail.patches.push_back(transform_patch(blade, Vec3(s, y, -0.5 * L),
                                               Vec3(rail_depth(blade), 0, 0),
                                               Vec3(0, 0, L)));
      }
      g.electrodes.push_back(std::move(rail));
    }

    for (int k = 0; k < p.segment_count; ++k) {
      Electrode seg;
      seg.name = "seg" + std::to_string(k + 1) + bn;
      const double zc = (k - 0.5 * (p.segment_count - 1)) * pitch;
      for (int side = 0; side < 2; ++side) {
        const double y = (side == 0 ? 0.5 * t : -0.5 * t);
        seg.patches.push_back(transform_patch(
            blade, Vec3(x_seg0, y, zc - 0.5 * p.segment_width),
            Vec3(p.segment_depth, 0, 0), Vec3(0, 0, p.segment_width)));
      }
      g.electrodes.push_back(std::move(seg));
    }

    if (p.deflection_electrode) {
      Electrode defl;
      defl.name = std::string("defl") + bn;
      for (int side = 0; side < 2; ++side) {
        const double y = (side == 0 ? 0.5 * t : -0.5 * t);
        defl.patches.push_back(
            transform_patch(blade, Vec3(x_seg0, y, defl_lo),
                            Vec3(p.segment_depth, 0, 0),
                            Vec3(0, 0, defl_hi - defl_lo)));
      }
      g.electrodes.push_back(std::move(defl));
    }
  }

  // Coarsen away from the segmented centre; charge on the long rails varies
  // slowly there and ions only sample the near-axis field.
  g.focus_a = Vec3(0, 0, -0.75 * seg_span);
  g.focus_b = Vec3(0, 0, 0.75 * seg_span);
  g.mesh_grade = 0.3;
  return g;
}

namespace {

Electrode ring_electrode(const std::string& name, double r_in, double r_out,
                         double z0, double thickness) {
  Electrode e;
  e.name = name;
  e.axisymmetric = true;
  const double z1 = z0 + thickness;
  e.meridians.push_back({Vec2(r_in, z0), Vec2(r_in, z1)});   // bore
  e.meridians.push_back({Vec2(r_in, z0), Vec2(r_out, z0)});  // front face
  e.meridians.push_back({Vec2(r_in, z1), Vec2(r_out, z1)});  // back face
  e.meridians.push_back({Vec2(r_out, z0), Vec2(r_out, z1)}); // rim
  return e;
}

} // namespace

GeometrySet build_lens(const LensParams& p) {
  require(p.aperture_diameter > 0, "aperture_diameter must be positive");
  require(p.gap_12 > 0 && p.gap_23 > 0, "lens gaps must be positive");
  for (double t : p.electrode_thicknesses)
    require(t > 0, "electrode thickness must be positive");
  require(p.outer_radius > 0.5 * p.aperture_diameter,
          "outer_radius must exceed the aperture radius");

  std::array<double, 3> bores;
  std::array<double, 3> th = p.electrode_thicknesses;
  switch (p.design) {
    case LensDesign::SimpleSymmetric:
      bores = {0.5 * p.aperture_diameter, 0.5 * p.aperture_diameter,
               0.5 * p.aperture_diameter};
      th = {th[0], th[0], th[0]};
      break;
    case LensDesign::SeptierLike:
      // Approximation of the hyperbolic-profile design: three different
      // apertures around the main one.
      bores = {0.7 * p.aperture_diameter, 0.5 * p.aperture_diameter,
               1.0 * p.aperture_diameter};
      break;
    case LensDesign::CustomAsymmetric:
      bores = {0.5 * p.aperture_diameter, 0.5 * p.aperture_diameter,
               0.5 * p.aperture_diameter};
      break;
  }

  const double g12 = p.gap_12;
  const double g23 =
      (p.design == LensDesign::SimpleSymmetric) ? p.gap_12 : p.gap_23;

  GeometrySet g;
  g.rotational_axis_z = true;
  double z = p.axial_position;
  const char* names[3] = {"L1", "L2", "L3"};
  for (int i = 0; i < 3; ++i) {
    g.electrodes.push_back(
        ring_electrode(names[i], bores[i], p.outer_radius, z, th[i]));
    SolidRegion solid;
    solid.axisym = true;
    solid.r_in = bores[i];
    solid.r_out = p.outer_radius;
    solid.z0 = z;
    solid.z1 = z + th[i];
    g.solids.push_back(solid);
    z += th[i] + (i == 0 ? g12 : g23);
  }
  return g;
}

GeometrySet build_tube(const TubeParams& p) {
  require(p.radius > 0 && p.length > 0, "tube dimensions must be positive");
  GeometrySet g;
  g.rotational_axis_z = true;
  Electrode e;
  e.name = "tube";
  e.axisymmetric = true;
  e.meridians.push_back({Vec2(p.radius, p.axial_position),
                         Vec2(p.radius, p.axial_position + p.length)});
  g.electrodes.push_back(std::move(e));
  SolidRegion solid;
  solid.axisym = true;
  solid.r_in = p.radius;
  solid.r_out = 1.05 * p.radius;
  solid.z0 = p.axial_position;
  solid.z1 = p.axial_position + p.length;
  g.solids.push_back(solid);
  return g;
}

GeometrySet make_sphere(double radius, int subdivisions,
                        const std::string& name) {
  require(radius > 0, "sphere radius must be positive");
  // Icosahedron.
  const double phi = 0.5 * (1.0 + std::sqrt(5.0));
  std::vector<Vec3> verts = {
      {-1, phi, 0}, {1, phi, 0}, {-1, -phi, 0}, {1, -phi, 0},
      {0, -1, phi}, {0, 1, phi}, {0, -1, -phi}, {0, 1, -phi},
      {phi, 0, -1}, {phi, 0, 1}, {-phi, 0, -1}, {-phi, 0, 1}};
  for (auto& v : verts) v = radius * v.normalized();
  std::vector<std::array<int, 3>> faces = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};

  for (int it = 0; it < subdivisions; ++it) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto found = midpoint.find(key);
      if (found != midpoint.end()) return found->second;
      Vec3 m = radius * (0.5 * (verts[a] + verts[b])).normalized();
      verts.push_back(m);
      int idx = static_cast<int>(verts.size()) - 1;
      midpoint[key] = idx;
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(faces.size() * 4);
    for (const auto& f : faces) {
      int a = mid(f[0], f[1]), b = mid(f[1], f[2]), c = mid(f[2], f[0]);
      next.push_back({f[0], a, c});
      next.push_back({f[1], b, a});
      next.push_back({f[2], c, b});
      next.push_back({a, b, c});
    }
    faces = std::move(next);
  }

  GeometrySet g;
  Electrode e;
  e.name = name;
  for (const auto& f : faces) {
    Panel p;
    p.nvert = 3;
    p.v = {verts[f[0]], verts[f[1]], verts[f[2]], Vec3::Zero()};
    e.fixed_panels.push_back(p);
  }
  g.electrodes.push_back(std::move(e));
  return g;
}

GeometrySet make_plate_pair(double side, double separation) {
  require(side > 0 && separation > 0, "plate dimensions must be positive");
  GeometrySet g;
  for (int i = 0; i < 2; ++i) {
    Electrode e;
    e.name = (i == 0) ? "plateA" : "plateB";
    const double z = (i == 0 ? 0.5 : -0.5) * separation;
    e.patches.push_back(RectPatch{Vec3(-0.5 * side, -0.5 * side, z),
                                  Vec3(side, 0, 0), Vec3(0, side, 0)});
    g.electrodes.push_back(std::move(e));
  }
  return g;
}

namespace {

double patch_point_distance(const RectPatch& p, const Vec3& x) {
  const double lu = p.eu.norm(), lv = p.ev.norm();
  const Vec3 u = p.eu / lu, v = p.ev / lv;
  const Vec3 w = x - p.origin;
  const double su = std::clamp(w.dot(u), 0.0, lu);
  const double sv = std::clamp(w.dot(v), 0.0, lv);
  return (w - su * u - sv * v).norm();
}

double segment_point_distance(const MeridianSeg& m, const Vec2& x) {
  const Vec2 d = m.b - m.a;
  const double len2 = d.squaredNorm();
  double t = len2 > 0 ? std::clamp((x - m.a).dot(d) / len2, 0.0, 1.0) : 0.0;
  return (m.a + t * d - x).norm();
}

// Distance from a point to the nearest primitive of any other electrode.
double distance_to_other(const GeometrySet& g, int self, const Vec3& x3,
                         const Vec2& x2, bool axisym) {
  double d = std::numeric_limits<double>::infinity();
  for (std::size_t e = 0; e < g.electrodes.size(); ++e) {
    if (static_cast<int>(e) == self) continue;
    if (axisym) {
      for (const auto& m : g.electrodes[e].meridians)
        d = std::min(d, segment_point_distance(m, x2));
    } else {
      for (const auto& p : g.electrodes[e].patches)
        d = std::min(d, patch_point_distance(p, x3));
    }
  }
  return d;
}

struct SizeRule {
  double target;
  double floor; // target / gap_refinement
  Vec3 focus_a = Vec3::Zero();
  Vec3 focus_b = Vec3::Zero();
  double grade = 0.0;

  double focus_distance(const Vec3& p) const {
    const Vec3 d = focus_b - focus_a;
    const double len2 = d.squaredNorm();
    double t = len2 > 0.0 ? std::clamp((p - focus_a).dot(d) / len2, 0.0, 1.0)
                          : 0.0;
    return (p - (focus_a + t * d)).norm();
  }

  double allowed(double d_other, const Vec3& center) const {
    double base = target;
    if (grade > 0.0)
      base = std::max(target, grade * focus_distance(center));
    return std::max(floor, std::min(base, 0.8 * d_other));
  }
};

void emit_patch_cells(const GeometrySet& g, int self, const RectPatch& patch,
                      double u0, double u1, double v0, double v1,
                      const SizeRule& rule, std::vector<Panel>& out) {
  const double lu = patch.eu.norm() * (u1 - u0);
  const double lv = patch.ev.norm() * (v1 - v0);
  const Vec3 center = patch.origin + 0.5 * (u0 + u1) * patch.eu +
                      0.5 * (v0 + v1) * patch.ev;
  const double allowed = rule.allowed(
      distance_to_other(g, self, center, Vec2::Zero(), false), center);
  if (std::max(lu, lv) > allowed * (1.0 + 1e-12)) {
    if (lu >= lv) {
      const double um = 0.5 * (u0 + u1);
      emit_patch_cells(g, self, patch, u0, um, v0, v1, rule, out);
      emit_patch_cells(g, self, patch, um, u1, v0, v1, rule, out);
    } else {
      const double vm = 0.5 * (v0 + v1);
      emit_patch_cells(g, self, patch, u0, u1, v0, vm, rule, out);
      emit_patch_cells(g, self, patch, u0, u1, vm, v1, rule, out);
    }
    return;
  }
  Panel p;
  p.nvert = 4;
  p.electrode = self;
  p.v[0] = patch.origin + u0 * patch.eu + v0 * patch.ev;
  p.v[1] = patch.origin + u1 * patch.eu + v0 * patch.ev;
  p.v[2] = patch.origin + u1 * patch.eu + v1 * patch.ev;
  p.v[3] = patch.origin + u0 * patch.eu + v1 * patch.ev;
  out.push_back(p);
}

void emit_ring_cells(const GeometrySet& g, int self, const MeridianSeg& seg,
                     double t0, double t1, const SizeRule& rule,
                     std::vector<RingPanel>& out) {
  const Vec2 a = seg.a + t0 * (seg.b - seg.a);
  const Vec2 b = seg.a + t1 * (seg.b - seg.a);
  const double len = (b - a).norm();
  const Vec2 mid = 0.5 * (a + b);
  const double allowed =
      rule.allowed(distance_to_other(g, self, Vec3::Zero(), mid, true),
                   Vec3(mid.x(), 0.0, mid.y()));
  if (len > allowed * (1.0 + 1e-12)) {
    const double tm = 0.5 * (t0 + t1);
    emit_ring_cells(g, self, seg, t0, tm, rule, out);
    emit_ring_cells(g, self, seg, tm, t1, rule, out);
    return;
  }
  out.push_back(RingPanel{a, b, self});
}

} // namespace

PanelMesh panelize(const GeometrySet& g, double target, double gap_refinement) {
  require(target > 0, "target_panel_size must be positive");
  require(gap_refinement >= 1, "gap_refinement must be >= 1");

  PanelMesh mesh;
  mesh.axisymmetric = g.axisymmetric();
  const SizeRule rule{target,     target / gap_refinement,
                      g.focus_a,  g.focus_b,
                      g.mesh_grade};

  for (std::size_t e = 0; e < g.electrodes.size(); ++e) {
    const auto& el = g.electrodes[e];
    mesh.electrode_names.push_back(el.name);
    for (const auto& patch : el.patches)
      emit_patch_cells(g, static_cast<int>(e), patch, 0, 1, 0, 1, rule,
                       mesh.panels);
    for (const auto& seg : el.meridians)
      emit_ring_cells(g, static_cast<int>(e), seg, 0, 1, rule, mesh.rings);
    for (Panel p : el.fixed_panels) {
      p.electrode = static_cast<int>(e);
      mesh.panels.push_back(p);
    }
  }
  mesh.solids = g.solids;
  mesh.bounds = g.bounding_box();
  return mesh;
}

MeshAudit audit_mesh(const PanelMesh& mesh, const GeometrySet& g) {
  MeshAudit a;
  a.meshed_area.assign(g.electrodes.size(), 0.0);
  a.analytic_area.assign(g.electrodes.size(), 0.0);
  for (std::size_t e = 0; e < g.electrodes.size(); ++e)
    a.analytic_area[e] = g.electrodes[e].analytic_area();
  for (const auto& p : mesh.panels) {
    a.meshed_area[p.electrode] += p.area();
    a.max_panel_diameter = std::max(a.max_panel_diameter, p.diameter());
  }
  for (const auto& r : mesh.rings) {
    a.meshed_area[r.electrode] += r.area();
    a.max_panel_diameter = std::max(a.max_panel_diameter, r.generator_length());
  }
  return a;
}

void write_panel_csv(const PanelMesh& mesh, const std::string& path) {
  std::ofstream out(path);
  out << "panel_id,electrode,cx_m,cy_m,cz_m,area_m2,nx,ny,nz\n";
  out.precision(17);
  int id = 0;
  for (const auto& p : mesh.panels) {
    const Vec3 c = p.centroid(), n = p.normal();
    out << id++ << ',' << mesh.electrode_names[p.electrode] << ',' << c.x()
        << ',' << c.y() << ',' << c.z() << ',' << p.area() << ',' << n.x()
        << ',' << n.y() << ',' << n.z() << '\n';
  }
  for (const auto& r : mesh.rings) {
    const Vec2 mid = 0.5 * (r.a + r.b);
    out << id++ << ',' << mesh.electrode_names[r.electrode] << ',' << mid.x()
        << ",0," << mid.y() << ',' << r.area() << ",0,0,0\n";
  }
}

namespace {
void hash_bytes(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
}
void hash_double(std::uint64_t& h, double x) { hash_bytes(h, &x, sizeof(x)); }
} // namespace

std::uint64_t mesh_content_hash(const PanelMesh& mesh) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& name : mesh.electrode_names)
    hash_bytes(h, name.data(), name.size());
  for (const auto& p : mesh.panels) {
    hash_bytes(h, &p.electrode, sizeof(p.electrode));
    hash_bytes(h, &p.nvert, sizeof(p.nvert));
    for (int i = 0; i < p.nvert; ++i)
      for (int k = 0; k < 3; ++k) hash_double(h, p.v[i][k]);
  }
  for (const auto& r : mesh.rings) {
    hash_bytes(h, &r.electrode, sizeof(r.electrode));
    for (int k = 0; k < 2; ++k) {
      hash_double(h, r.a[k]);
      hash_double(h, r.b[k]);
    }
  }
  return h;
}

} // namespace iontrace::geometry
