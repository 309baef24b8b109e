#include "iontrace/bem_axi.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>

#include "iontrace/constants.hpp"

namespace iontrace::fields {

using constants::coulomb_constant;
using constants::pi;
using geometry::PanelMesh;
using geometry::RingPanel;

namespace {

// 8-point Gauss-Legendre nodes/weights on [0, 1].
constexpr int kGl = 8;
constexpr double kGlX[kGl] = {0.019855071751231884, 0.10166676129318664,
                              0.2372337950418355,   0.40828267875217505,
                              0.5917173212478249,   0.7627662049581645,
                              0.8983332387068134,   0.9801449282487681};
constexpr double kGlW[kGl] = {0.05061426814518813, 0.11119051722668724,
                              0.15685332293894363, 0.18134189168918097,
                              0.18134189168918097, 0.15685332293894363,
                              0.11119051722668724, 0.05061426814518813};

// Parameter of the closest point on segment [a, b] to (r, z).
double closest_param(const Vec2& a, const Vec2& b, double r, double z) {
  const Vec2 d = b - a;
  const double l2 = d.squaredNorm();
  if (l2 == 0.0) return 0.5;
  const double t = (Vec2(r, z) - a).dot(d) / l2;
  return std::clamp(t, 0.0, 1.0);
}

// Integrate f over [0, 1] with subintervals geometrically graded toward ts,
// where the integrand has a log singularity (or near-singularity).
template <class F>
double graded_integral(const F& f, double ts, int levels) {
  double acc = 0.0;
  auto side = [&](double lo, double hi) {
    // grade from hi (away) toward lo (singular end)
    const double len = hi - lo;
    if (len <= 0.0) return;
    double edge = hi;
    for (int l = 0; l < levels; ++l) {
      const double inner = (l + 1 == levels) ? lo : lo + len * std::pow(0.5, l + 1);
      for (int g = 0; g < kGl; ++g)
        acc += kGlW[g] * (edge - inner) * f(inner + kGlX[g] * (edge - inner));
      edge = inner;
    }
  };
  side(ts, 1.0);
  // mirror for [0, ts]
  const double len = ts;
  if (len <= 0.0) return acc;
  double edge = 0.0;
  for (int l = 0; l < levels; ++l) {
    const double inner = (l + 1 == levels) ? ts : ts - len * std::pow(0.5, l + 1);
    for (int g = 0; g < kGl; ++g)
      acc += kGlW[g] * (inner - edge) * f(edge + kGlX[g] * (inner - edge));
    edge = inner;
  }
  return acc;
}

} // namespace

double ring_potential(double r, double z, double a, double zr) {
  const double dz = z - zr;
  const double beta2 = (r + a) * (r + a) + dz * dz;
  const double beta = std::sqrt(beta2);
  if (beta == 0.0) return 0.0; // degenerate ring of zero radius at the point
  const double m = 4.0 * r * a / beta2;
  return 4.0 * a / beta * std::comp_ellint_1(std::sqrt(m));
}

Vec2 ring_gradient(double r, double z, double a, double zr) {
  const double dz = z - zr;
  const double beta2 = (r + a) * (r + a) + dz * dz;
  const double beta = std::sqrt(beta2);
  const double m = 4.0 * r * a / beta2;
  const double k = std::sqrt(std::min(m, 1.0));
  const double K = std::comp_ellint_1(k);
  const double E = std::comp_ellint_2(k);
  // dK/dm, with the m -> 0 limit pi/8 handled explicitly
  const double dKdm =
      (m > 1e-12) ? (E - (1.0 - m) * K) / (2.0 * m * (1.0 - m)) : pi / 8.0;
  const double dm_dr = 4.0 * a / beta2 - 8.0 * r * a * (r + a) / (beta2 * beta2);
  const double dm_dz = -8.0 * r * a * dz / (beta2 * beta2);
  const double dbeta_dr = (r + a) / beta;
  const double dbeta_dz = dz / beta;
  const double gr = 4.0 * a * (dKdm * dm_dr / beta - K * dbeta_dr / beta2);
  const double gz = 4.0 * a * (dKdm * dm_dz / beta - K * dbeta_dz / beta2);
  return Vec2(gr, gz);
}

void ring_axis_derivatives(double z, double a, double zr, int max_order,
                           double* out) {
  // 2*pi*a / sqrt(a^2 + u^2) expanded via Legendre polynomials:
  // d^n/du^n R^-1 = n! P_n(-u/R) / R^(n+1), R = sqrt(a^2 + u^2).
  const double u = z - zr;
  const double R = std::sqrt(a * a + u * u);
  const double x = -u / R;
  double fact = 1.0;
  double rpow = 1.0 / R;
  for (int n = 0; n <= max_order; ++n) {
    out[n] = 2.0 * pi * a * fact * std::legendre(static_cast<unsigned>(n), x) * rpow;
    fact *= (n + 1);
    rpow /= R;
  }
}

double ring_panel_potential(const RingPanel& p, double r, double z) {
  const double len = p.generator_length();
  auto f = [&](double t) {
    const Vec2 q = p.a + t * (p.b - p.a);
    return ring_potential(r, z, q.x(), q.y()) * len;
  };
  const double ts = closest_param(p.a, p.b, r, z);
  const Vec2 cp = p.a + ts * (p.b - p.a);
  const double dist = (Vec2(r, z) - cp).norm();
  if (dist > 4.0 * len) {
    double acc = 0.0;
    for (int g = 0; g < kGl; ++g) acc += kGlW[g] * f(kGlX[g]);
    return acc;
  }
  return graded_integral(f, ts, 12);
}

Vec2 ring_panel_gradient(const RingPanel& p, double r, double z) {
  const double len = p.generator_length();
  auto f = [&](double t) -> Vec2 {
    const Vec2 q = p.a + t * (p.b - p.a);
    return ring_gradient(r, z, q.x(), q.y()) * len;
  };
  const double ts = closest_param(p.a, p.b, r, z);
  const Vec2 cp = p.a + ts * (p.b - p.a);
  const double dist = (Vec2(r, z) - cp).norm();
  if (dist > 4.0 * len) {
    Vec2 acc = Vec2::Zero();
    for (int g = 0; g < kGl; ++g) acc += kGlW[g] * f(kGlX[g]);
    return acc;
  }
  Vec2 acc = Vec2::Zero();
  const double gr = graded_integral([&](double t) { return f(t).x(); }, ts, 12);
  const double gz = graded_integral([&](double t) { return f(t).y(); }, ts, 12);
  acc << gr, gz;
  return acc;
}

void ring_panel_axis_derivatives(const RingPanel& p, double z, int max_order,
                                 double* out) {
  const double len = p.generator_length();
  double buf[16];
  for (int n = 0; n <= max_order; ++n) out[n] = 0.0;
  // The kernel is smooth on axis (a >= bore radius); split the arc so each
  // subinterval is short compared with its distance to the field point.
  const double ts = closest_param(p.a, p.b, 0.0, z);
  const Vec2 cp = p.a + ts * (p.b - p.a);
  const double dist = (Vec2(0.0, z) - cp).norm();
  const int nsub = std::clamp(static_cast<int>(std::ceil(2.0 * len / std::max(dist, 1e-9))), 1, 64);
  for (int s = 0; s < nsub; ++s) {
    const double lo = static_cast<double>(s) / nsub;
    const double w = 1.0 / nsub;
    for (int g = 0; g < kGl; ++g) {
      const double t = lo + kGlX[g] * w;
      const Vec2 q = p.a + t * (p.b - p.a);
      ring_axis_derivatives(z, q.x(), q.y(), max_order, buf);
      for (int n = 0; n <= max_order; ++n)
        out[n] += kGlW[g] * w * len * buf[n];
    }
  }
}

FieldBasisAxi FieldBasisAxi::solve(const PanelMesh& mesh,
                                   const SolverSettings& settings) {
  if (mesh.rings.empty()) throw ParameterError("empty ring mesh");
  FieldBasisAxi basis;
  basis.mesh_ = mesh;
  basis.settings_ = settings;
  basis.names_ = mesh.electrode_names;

  const int n = static_cast<int>(mesh.rings.size());
  MatX system(n, n);
  for (int i = 0; i < n; ++i) {
    const RingPanel& pi = mesh.rings[i];
    const Vec2 c = 0.5 * (pi.a + pi.b);
    for (int j = 0; j < n; ++j)
      system(i, j) = coulomb_constant *
                     ring_panel_potential(mesh.rings[j], c.x(), c.y());
  }

  Eigen::PartialPivLU<MatX> lu(system);
  basis.condition_estimate_ = 1.0 / std::max(lu.rcond(), 1e-300);
  if (!(basis.condition_estimate_ < settings.condition_limit))
    throw SolverError("axisymmetric BEM system ill-conditioned");

  const int ne = static_cast<int>(mesh.electrode_names.size());
  MatX rhs = MatX::Zero(n, ne);
  for (int j = 0; j < n; ++j) rhs(j, mesh.rings[j].electrode) = 1.0;
  MatX charges = lu.solve(rhs);
  basis.sigma_.resize(ne);
  for (int e = 0; e < ne; ++e) basis.sigma_[e] = charges.col(e);
  return basis;
}

VecX FieldBasisAxi::combine(const VecX& electrode_voltages) const {
  VecX out = VecX::Zero(panel_count());
  for (int e = 0; e < electrode_count(); ++e)
    if (electrode_voltages[e] != 0.0) out += electrode_voltages[e] * sigma_[e];
  return out;
}

double FieldBasisAxi::potential(double r, double z, const VecX& sigma) const {
  double phi = 0.0;
  for (int j = 0; j < panel_count(); ++j)
    if (sigma[j] != 0.0)
      phi += sigma[j] * ring_panel_potential(mesh_.rings[j], r, z);
  return coulomb_constant * phi;
}

Vec2 FieldBasisAxi::efield(double r, double z, const VecX& sigma) const {
  Vec2 g = Vec2::Zero();
  for (int j = 0; j < panel_count(); ++j)
    if (sigma[j] != 0.0)
      g += sigma[j] * ring_panel_gradient(mesh_.rings[j], r, z);
  return -coulomb_constant * g;
}

double FieldBasisAxi::potential_at(double r, double z,
                                   const VecX& electrode_voltages) const {
  if (mesh_.inside_conductor(Vec3(r, 0.0, z)))
    throw DomainError("potential requested inside a conductor");
  return potential(r, z, combine(electrode_voltages));
}

Vec2 FieldBasisAxi::efield_at(double r, double z,
                              const VecX& electrode_voltages) const {
  if (mesh_.inside_conductor(Vec3(r, 0.0, z)))
    throw DomainError("field requested inside a conductor");
  return efield(r, z, combine(electrode_voltages));
}

void FieldBasisAxi::axis_derivatives(double z, const VecX& sigma, int max_order,
                                     double* out) const {
  double buf[16];
  for (int n = 0; n <= max_order; ++n) out[n] = 0.0;
  for (int j = 0; j < panel_count(); ++j) {
    if (sigma[j] == 0.0) continue;
    ring_panel_axis_derivatives(mesh_.rings[j], z, max_order, buf);
    for (int n = 0; n <= max_order; ++n) out[n] += sigma[j] * buf[n];
  }
  for (int n = 0; n <= max_order; ++n) out[n] *= coulomb_constant;
}

MatX FieldBasisAxi::capacitance_matrix() const {
  const int ne = electrode_count();
  MatX c = MatX::Zero(ne, ne);
  for (int j = 0; j < ne; ++j)
    for (int p = 0; p < panel_count(); ++p)
      c(mesh_.rings[p].electrode, j) += sigma_[j][p] * mesh_.rings[p].area();
  return c;
}

std::uint64_t FieldBasisAxi::content_hash() const {
  std::uint64_t h = geometry::mesh_content_hash(mesh_);
  auto mix = [&h](double x) {
    std::uint64_t bits;
    std::memcpy(&bits, &x, sizeof(bits));
    h ^= bits + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
  };
  mix(settings_.near_ratio);
  mix(settings_.condition_limit);
  return h;
}

} // namespace iontrace::fields
