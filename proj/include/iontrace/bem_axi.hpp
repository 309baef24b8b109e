#pragma once

#include <string>
#include <vector>

#include "iontrace/bem.hpp"
#include "iontrace/geometry.hpp"
#include "iontrace/types.hpp"

namespace iontrace::fields {

/// Potential of a unit-line-density circular ring (radius a, height zr),
/// evaluated at (r, z). Includes the full 2*pi*a circumference but not
/// 1/(4 pi eps0).
double ring_potential(double r, double z, double a, double zr);

/// Gradient of ring_potential with respect to (r, z).
Vec2 ring_gradient(double r, double z, double a, double zr);

/// On-axis z-derivatives of ring_potential of order 0..max_order at (0, z).
void ring_axis_derivatives(double z, double a, double zr, int max_order,
                           double* out);

/// Arc integral of the ring kernel over one conical frustum panel with unit
/// surface density; quadrature grades toward the field point when close.
double ring_panel_potential(const geometry::RingPanel& p, double r, double z);
Vec2 ring_panel_gradient(const geometry::RingPanel& p, double r, double z);
void ring_panel_axis_derivatives(const geometry::RingPanel& p, double z,
                                 int max_order, double* out);

/// Per-electrode unit-voltage charge densities on an axisymmetric ring mesh.
class FieldBasisAxi {
public:
  static FieldBasisAxi solve(const geometry::PanelMesh& mesh,
                             const SolverSettings& settings = {});

  int electrode_count() const { return static_cast<int>(names_.size()); }
  int panel_count() const { return static_cast<int>(mesh_.rings.size()); }
  const std::vector<std::string>& electrode_names() const { return names_; }
  const geometry::PanelMesh& mesh() const { return mesh_; }
  double condition_estimate() const { return condition_estimate_; }

  const VecX& charge_density(int e) const { return sigma_[e]; }
  VecX combine(const VecX& electrode_voltages) const;

  /// Exact (quadrature) potential and field of a panel charge vector;
  /// field returned as (E_r, E_z).
  double potential(double r, double z, const VecX& sigma) const;
  Vec2 efield(double r, double z, const VecX& sigma) const;

  double potential_at(double r, double z, const VecX& electrode_voltages) const;
  Vec2 efield_at(double r, double z, const VecX& electrode_voltages) const;

  /// On-axis potential derivatives d^n phi / dz^n, n = 0..max_order.
  void axis_derivatives(double z, const VecX& sigma, int max_order,
                        double* out) const;

  MatX capacitance_matrix() const;
  std::uint64_t content_hash() const;

private:
  FieldBasisAxi() = default;

  geometry::PanelMesh mesh_;
  SolverSettings settings_;
  std::vector<std::string> names_;
  std::vector<VecX> sigma_;
  double condition_estimate_ = 0.0;
};

} // namespace iontrace::fields
