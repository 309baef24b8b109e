#include "iontrace/fields.hpp"

#include <algorithm>
#include <cmath>

namespace iontrace::fields {

int VoltageVector::index(const std::string& name) const {
  const auto it = std::find(names_.begin(), names_.end(), name);
  if (it == names_.end())
    throw ParameterError("unknown electrode '" + name + "'");
  return static_cast<int>(it - names_.begin());
}

bool VoltageVector::has(const std::string& name) const {
  return std::find(names_.begin(), names_.end(), name) != names_.end();
}

double ideal_quadrupole_potential(const Vec3& x, double t,
                                  const QuadrupoleParams& qp) {
  if (qp.rf_frequency <= 0.0 || qp.r0 <= 0.0)
    throw ParameterError("quadrupole requires rf_frequency > 0 and r0 > 0");
  const double rf = qp.rf_amplitude * std::cos(qp.rf_frequency * t) *
                    (x.x() * x.x() - x.y() * x.y()) / (2.0 * qp.r0 * qp.r0);
  const double dc = 0.5 * qp.dc_axial_curvature *
                    (x.z() * x.z() - 0.5 * (x.x() * x.x() + x.y() * x.y()));
  return rf + dc;
}

Vec3 ideal_quadrupole_efield(const Vec3& x, double t,
                             const QuadrupoleParams& qp) {
  if (qp.rf_frequency <= 0.0 || qp.r0 <= 0.0)
    throw ParameterError("quadrupole requires rf_frequency > 0 and r0 > 0");
  const double g = qp.rf_amplitude * std::cos(qp.rf_frequency * t) /
                   (qp.r0 * qp.r0);
  Vec3 e(-g * x.x(), g * x.y(), 0.0);
  e.x() += 0.5 * qp.dc_axial_curvature * x.x();
  e.y() += 0.5 * qp.dc_axial_curvature * x.y();
  e.z() -= qp.dc_axial_curvature * x.z();
  return e;
}

double mathieu_q(const QuadrupoleParams& qp, double mass_kg, double charge_c) {
  return 2.0 * charge_c * qp.rf_amplitude /
         (mass_kg * qp.r0 * qp.r0 * qp.rf_frequency * qp.rf_frequency);
}

std::vector<AxisSample> on_axis_profile(const FieldBasisAxi& basis,
                                        const VecX& electrode_voltages,
                                        double z0, double z1, int n_samples) {
  if (n_samples < 2) throw ParameterError("on_axis_profile needs >= 2 samples");
  const VecX sigma = basis.combine(electrode_voltages);
  std::vector<AxisSample> out(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    const double z = z0 + (z1 - z0) * i / (n_samples - 1);
    out[static_cast<std::size_t>(i)] = {z, basis.potential(0.0, z, sigma)};
  }
  return out;
}

AxisSample axis_maximum(const std::vector<AxisSample>& profile) {
  if (profile.empty()) throw ParameterError("empty axis profile");
  AxisSample best = profile.front();
  for (const auto& s : profile)
    if (s.phi > best.phi) best = s;
  return best;
}

AxisProfile AxisProfile::build(const FieldBasisAxi& basis, const VecX& sigma,
                               double z0, double z1, int n_samples) {
  if (n_samples < 4 || !(z1 > z0))
    throw ParameterError("AxisProfile needs z1 > z0 and >= 4 samples");
  AxisProfile p;
  p.z0_ = z0;
  p.count_ = n_samples;
  p.dz_ = (z1 - z0) / (n_samples - 1);
  double stack[8];
  for (auto& v : p.d_) v.resize(n_samples);
  for (int i = 0; i < n_samples; ++i) {
    basis.axis_derivatives(z0 + p.dz_ * i, sigma, 6, stack);
    for (int n = 0; n <= 6; ++n) p.d_[static_cast<std::size_t>(n)][i] = stack[n];
  }
  return p;
}

double AxisProfile::deriv(int order, double z) const {
  const auto& val = d_[static_cast<std::size_t>(order)];
  double s = (z - z0_) / dz_;
  if (s <= 0.0) return val[0];
  if (s >= count_ - 1) return val[count_ - 1];
  const int i = static_cast<int>(s);
  const double u = s - i;
  if (order == 6) return val[i] * (1.0 - u) + val[i + 1] * u;
  const auto& slp = d_[static_cast<std::size_t>(order + 1)];
  const double h00 = (1 + 2 * u) * (1 - u) * (1 - u);
  const double h10 = u * (1 - u) * (1 - u);
  const double h01 = u * u * (3 - 2 * u);
  const double h11 = u * u * (u - 1);
  return h00 * val[i] + h10 * dz_ * slp[i] + h01 * val[i + 1] +
         h11 * dz_ * slp[i + 1];
}

double AxisProfile::potential(double r, double z) const {
  const double r2 = r * r;
  return deriv(0, z) - 0.25 * r2 * deriv(2, z) +
         r2 * r2 / 64.0 * deriv(4, z);
}

Vec2 AxisProfile::efield(double r, double z) const {
  const double r2 = r * r;
  const double er = 0.5 * r * deriv(2, z) - r2 * r / 16.0 * deriv(4, z);
  const double ez =
      -deriv(1, z) + 0.25 * r2 * deriv(3, z) - r2 * r2 / 64.0 * deriv(5, z);
  return Vec2(er, ez);
}

} // namespace iontrace::fields
