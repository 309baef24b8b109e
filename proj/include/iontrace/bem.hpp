#pragma once

#include <optional>
#include <string>
#include <vector>

#include "iontrace/geometry.hpp"
#include "iontrace/types.hpp"

namespace iontrace::fields {

struct SolverSettings {
  double near_ratio = 6.0;       ///< exact kernel inside near_ratio * panel radius
  double condition_limit = 1e12; ///< abort above this condition estimate
};

/// Raw single-layer integrals of a unit-density planar polygon panel
/// (no 1/4 pi eps0 factor). Exact closed forms.
double panel_integral_exact(const geometry::Panel& p, const Vec3& x);
Vec3 panel_gradient_exact(const geometry::Panel& p, const Vec3& x);

/// Per-electrode unit-voltage surface charge densities on a 3D panel mesh,
/// with evaluation acceleration data (panel monopole + quadrupole moments).
class FieldBasis3D {
public:
  static FieldBasis3D solve(const geometry::PanelMesh& mesh,
                            const SolverSettings& settings = {});

  int electrode_count() const { return static_cast<int>(names_.size()); }
  int panel_count() const { return n_; }
  const std::vector<std::string>& electrode_names() const { return names_; }
  const geometry::PanelMesh& mesh() const { return mesh_; }
  const SolverSettings& settings() const { return settings_; }
  double condition_estimate() const { return condition_estimate_; }

  /// Charge densities [C/m^2] for electrode e.
  const VecX& charge_density(int e) const { return sigma_[e]; }
  void set_charge_density(int e, VecX sigma) { sigma_[e] = std::move(sigma); }

  /// Superpose electrode charge vectors for one voltage assignment.
  VecX combine(const VecX& electrode_voltages) const;

  /// Potential / field of an explicit panel-charge vector.
  double potential(const Vec3& x, const VecX& sigma) const;
  Vec3 efield(const Vec3& x, const VecX& sigma) const;

  /// Convenience: superposition over per-electrode basis solutions.
  /// Throws DomainError if x lies inside a conductor volume.
  double potential_at(const Vec3& x, const VecX& electrode_voltages) const;
  Vec3 efield_at(const Vec3& x, const VecX& electrode_voltages) const;

  /// Total charge on each electrode under unit-voltage basis solutions;
  /// C(i,j) = charge on electrode i with electrode j at 1 V.
  MatX capacitance_matrix() const;

  /// Content hash of (mesh, settings) for cache keying.
  std::uint64_t content_hash() const;

private:
  FieldBasis3D() = default;
  void build_tables(const geometry::PanelMesh& mesh);

  geometry::PanelMesh mesh_;
  SolverSettings settings_;
  std::vector<std::string> names_;
  std::vector<VecX> sigma_; // per electrode, length n_
  double condition_estimate_ = 0.0;

  // SoA evaluation tables.
  int n_ = 0;
  Eigen::Matrix3Xd centroid_;
  VecX area_;
  VecX radius_; // bounding radius about centroid
  Eigen::Matrix<double, 6, Eigen::Dynamic> quad_; // xx,yy,zz,xy,xz,yz moments

  // Row-major copies (one contiguous array per component) for vectorized
  // point evaluation; derived from the tables above.
  Eigen::ArrayXd cx_, cy_, cz_;
  Eigen::ArrayXd qxx_, qyy_, qzz_, qxy_, qxz_, qyz_, qtr_;
  Eigen::ArrayXd near2_; // (near_ratio * bounding radius)^2

  friend FieldBasis3D basis_from_cache_payload(geometry::PanelMesh mesh,
                                               SolverSettings settings,
                                               std::vector<VecX> sigma);
};

/// Binary basis cache: header (magic, version, content hash), then
/// per-electrode charge vectors as little-endian 64-bit floats.
bool save_basis_cache(const FieldBasis3D& basis, const std::string& path);
std::optional<FieldBasis3D> load_basis_cache(const geometry::PanelMesh& mesh,
                                             const SolverSettings& settings,
                                             const std::string& path);

} // namespace iontrace::fields
