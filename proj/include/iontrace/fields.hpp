#pragma once

#include <array>
#include <string>
#include <vector>

#include "iontrace/bem.hpp"
#include "iontrace/bem_axi.hpp"
#include "iontrace/types.hpp"

namespace iontrace::fields {

/// Electrode-name -> voltage map bound to a fixed electrode ordering.
class VoltageVector {
public:
  VoltageVector() = default;
  explicit VoltageVector(std::vector<std::string> names)
      : names_(std::move(names)), v_(VecX::Zero(static_cast<int>(names_.size()))) {}

  void set(const std::string& name, double voltage) { v_[index(name)] = voltage; }
  double get(const std::string& name) const { return v_[index(name)]; }
  int index(const std::string& name) const;
  bool has(const std::string& name) const;

  const VecX& values() const { return v_; }
  VecX& values() { return v_; }
  const std::vector<std::string>& names() const { return names_; }
  int size() const { return static_cast<int>(names_.size()); }

private:
  std::vector<std::string> names_;
  VecX v_;
};

/// Ideal linear rf quadrupole (radial) plus a static harmonic axial term.
struct QuadrupoleParams {
  double rf_amplitude = 0.0;       ///< V
  double rf_frequency = 0.0;       ///< rad/s
  double r0 = 1e-3;                ///< m
  double dc_axial_curvature = 0.0; ///< V/m^2 (d2 phi / dz2 on axis)
};

double ideal_quadrupole_potential(const Vec3& x, double t,
                                  const QuadrupoleParams& qp);
Vec3 ideal_quadrupole_efield(const Vec3& x, double t,
                             const QuadrupoleParams& qp);

/// Mathieu q parameter for an ion in the ideal quadrupole.
double mathieu_q(const QuadrupoleParams& qp, double mass_kg, double charge_c);

struct AxisSample {
  double z;
  double phi;
};

/// Sampled on-axis potential, plus the maximum over the samples.
std::vector<AxisSample> on_axis_profile(const FieldBasisAxi& basis,
                                        const VecX& electrode_voltages,
                                        double z0, double z1, int n_samples);
AxisSample axis_maximum(const std::vector<AxisSample>& profile);

/// Paraxial field of one axisymmetric charge vector, from on-axis z-derivative
/// stacks (orders 0..6) sampled on a uniform grid and interpolated with cubic
/// Hermite splines (the next-order derivative supplies the slopes):
///   phi(r,z) = P0 - (r^2/4) P2 + (r^4/64) P4
///   E_r      = (r/2) P2 - (r^3/16) P4
///   E_z      = -P1 + (r^2/4) P3 - (r^4/64) P5
class AxisProfile {
public:
  static AxisProfile build(const FieldBasisAxi& basis, const VecX& sigma,
                           double z0, double z1, int n_samples);

  double deriv(int order, double z) const; ///< order 0..6, clamped outside grid
  double potential(double r, double z) const;
  Vec2 efield(double r, double z) const; ///< (E_r, E_z)

  double z_min() const { return z0_; }
  double z_max() const { return z0_ + dz_ * (count_ - 1); }

private:
  double z0_ = 0.0;
  double dz_ = 0.0;
  int count_ = 0;
  std::array<VecX, 7> d_;
};

} // namespace iontrace::fields
