#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "iontrace/types.hpp"

namespace iontrace::geometry {

/// Segmented-blade linear trap. Published dimensions are the defaults;
/// quantities the publication leaves open (blade cross-section, electrode
/// depths, deflection electrode size) are explicit parameters.
struct TrapParams {
  double blade_thickness = 410e-6; ///< plate thickness [m]
  double blade_length = 65e-3;     ///< axial extent [m]
  double blade_separation = 2e-3;  ///< opposing-blade tip distance [m]
  double segment_width = 0.7e-3;   ///< dc segment width along z [m]
  int segment_count = 8;           ///< dc segments per blade
  bool deflection_electrode = true;
  double deflection_width = 6e-3; ///< broader steering segment near exit [m]
  bool rf_rail = true;

  // Unpublished details, exposed with documented defaults.
  double segment_gap = 100e-6;        ///< z gap between dc segments [m]
  double rail_depth = 0.18e-3;       ///< radial depth of rail side strips [m]
  double gnd_rail_depth = 80e-6;       ///< grounded-blade rail depth; 0 = rail_depth [m]
  double rail_segment_gap = 0.025e-3; ///< radial gap rail -> segments [m]
  double segment_depth = 2.5e-3;     ///< radial depth of dc segments [m]
  double deflection_margin = 0.5e-3; ///< deflection inset from blade end [m]
};

enum class LensDesign { SimpleSymmetric, SeptierLike, CustomAsymmetric };

/// Three-electrode einzel lens, rotationally symmetric about z.
struct LensParams {
  LensDesign design = LensDesign::CustomAsymmetric;
  double aperture_diameter = 1e-3;
  double gap_12 = 150e-6;
  double gap_23 = 150e-6;
  std::array<double, 3> electrode_thicknesses = {0.5e-3, 1.6e-3, 0.5e-3};
  double axial_position = 0.240; ///< z of first electrode front face [m]
  double outer_radius = 4e-3;
};

/// Cylindrical post-acceleration tube on the beam axis.
struct TubeParams {
  double radius = 2e-3;
  double length = 20e-3;
  double axial_position = 0.150;
};

struct Aperture {
  double diameter = 1e-3;
  double plane_z = 0.0;
  Vec2 center_offset = Vec2::Zero();
};

/// Planar parallelogram patch: origin + two edge vectors.
struct RectPatch {
  Vec3 origin;
  Vec3 eu;
  Vec3 ev;
  double area() const { return eu.cross(ev).norm(); }
};

/// Meridian generator segment (r, z) of an axisymmetric surface.
struct MeridianSeg {
  Vec2 a;
  Vec2 b;
  double area() const {
    const double pi = 3.141592653589793238462643383279502884;
    return pi * (a.x() + b.x()) * (b - a).norm();
  }
};

/// Planar polygon panel with 3 or 4 vertices and constant charge density.
struct Panel {
  std::array<Vec3, 4> v;
  int nvert = 4;
  int electrode = -1;

  Vec3 centroid() const;
  Vec3 normal() const; ///< unit, right-handed with vertex order
  double area() const;
  double diameter() const; ///< max vertex-to-vertex distance
};

/// Conical ring frustum panel: generator segment revolved about z.
struct RingPanel {
  Vec2 a;
  Vec2 b;
  int electrode = -1;

  double area() const { return MeridianSeg{a, b}.area(); }
  double generator_length() const { return (b - a).norm(); }
};

struct Electrode {
  std::string name;
  std::vector<RectPatch> patches;      ///< 3D primitives
  std::vector<MeridianSeg> meridians;  ///< axisymmetric primitives
  std::vector<Panel> fixed_panels;     ///< pre-meshed bodies (test helpers)
  bool axisymmetric = false;

  double analytic_area() const;
};

/// Solid conductor volume: an axis-aligned box (3D geometries) or an annular
/// body r in [r_in, r_out], z in [z0, z1] (axisymmetric geometries).
struct SolidRegion {
  Eigen::AlignedBox3d box;
  bool axisym = false;
  double r_in = 0, r_out = 0, z0 = 0, z1 = 0;

  bool contains(const Vec3& p) const {
    if (!axisym) return box.contains(p);
    const double r = std::hypot(p.x(), p.y());
    return r >= r_in && r <= r_out && p.z() >= z0 && p.z() <= z1;
  }
};

struct GeometrySet {
  std::vector<Electrode> electrodes;
  std::vector<Vec3> mirror_plane_normals; ///< planes through the origin
  std::vector<SolidRegion> solids;        ///< conductor volumes
  bool rotational_axis_z = false;

  /// Mesh grading: panel size may grow as mesh_grade * distance from the
  /// focus segment [focus_a, focus_b] (0 keeps the mesh uniform). Surfaces
  /// far from the working region carry slowly varying charge and tolerate
  /// coarse panels.
  Vec3 focus_a = Vec3::Zero();
  Vec3 focus_b = Vec3::Zero();
  double mesh_grade = 0.0;

  int electrode_index(const std::string& name) const;
  Eigen::AlignedBox3d bounding_box() const;
  bool axisymmetric() const;
};

struct PanelMesh {
  bool axisymmetric = false;
  std::vector<Panel> panels;
  std::vector<RingPanel> rings;
  std::vector<std::string> electrode_names;
  std::vector<SolidRegion> solids;
  Eigen::AlignedBox3d bounds;

  bool inside_conductor(const Vec3& p) const {
    for (const auto& s : solids)
      if (s.contains(p)) return true;
    return false;
  }

  std::size_t size() const {
    return axisymmetric ? rings.size() : panels.size();
  }
};

/// Per-electrode mesh statistics from a conformity audit.
struct MeshAudit {
  std::vector<double> meshed_area;   ///< per electrode
  std::vector<double> analytic_area; ///< per electrode
  double max_panel_diameter = 0.0;
};

GeometrySet build_trap(const TrapParams& params);
GeometrySet build_lens(const LensParams& params);
GeometrySet build_tube(const TubeParams& params);

/// Icosphere test body (triangle panels), centred at the origin.
GeometrySet make_sphere(double radius, int subdivisions = 3,
                        const std::string& name = "sphere");

/// Parallel-plate pair test body.
GeometrySet make_plate_pair(double side, double separation);

PanelMesh panelize(const GeometrySet& geometry, double target_panel_size,
                   double gap_refinement = 4.0);

MeshAudit audit_mesh(const PanelMesh& mesh, const GeometrySet& geometry);

/// Debug dump: panel id, electrode, centroid, area, normal.
void write_panel_csv(const PanelMesh& mesh, const std::string& path);

/// Stable content hash of the mesh (geometry + electrode names).
std::uint64_t mesh_content_hash(const PanelMesh& mesh);

} // namespace iontrace::geometry
