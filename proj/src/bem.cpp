#include "iontrace/bem.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <cstring>
#include <fstream>

#include "iontrace/constants.hpp"

namespace iontrace::fields {

using constants::coulomb_constant;
using geometry::Panel;
using geometry::PanelMesh;

namespace {

// Signed solid angle of the polygon seen from x; positive on the +normal
// side (van Oosterom & Strackee, summed over a triangle fan).
double solid_angle(const Panel& p, const Vec3& x) {
  double omega = 0.0;
  for (int i = 1; i + 1 < p.nvert; ++i) {
    const Vec3 r1 = p.v[0] - x, r2 = p.v[i] - x, r3 = p.v[i + 1] - x;
    const double l1 = r1.norm(), l2 = r2.norm(), l3 = r3.norm();
    const double num = r1.dot(r2.cross(r3));
    const double den =
        l1 * l2 * l3 + r1.dot(r2) * l3 + r1.dot(r3) * l2 + r2.dot(r3) * l1;
    omega += 2.0 * std::atan2(num, den);
  }
  return omega;
}

// Stable log((Rb + sb)/(Ra + sa)) for the edge integral.
double edge_log(double ra, double sa, double rb, double sb) {
  const double eps = 1e-300;
  if (sa + sb >= 0.0)
    return std::log(std::max(rb + sb, eps) / std::max(ra + sa, eps));
  return std::log(std::max(ra - sa, eps) / std::max(rb - sb, eps));
}

} // namespace

double panel_integral_exact(const Panel& p, const Vec3& x) {
  const Vec3 n = p.normal();
  const double h = (x - p.v[0]).dot(n);
  const Vec3 x0 = x - h * n;

  double acc = 0.0;
  for (int i = 0; i < p.nvert; ++i) {
    const Vec3& a = p.v[i];
    const Vec3& b = p.v[(i + 1) % p.nvert];
    const Vec3 e = (b - a).normalized();
    const double sa = (a - x0).dot(e);
    const double sb = (b - x0).dot(e);
    const double t = (a - x0).dot(e.cross(n)); // in-plane edge distance
    const double ra = (x - a).norm();
    const double rb = (x - b).norm();
    acc += t * edge_log(ra, sa, rb, sb);
  }
  return acc + h * solid_angle(p, x);
}

Vec3 panel_gradient_exact(const Panel& p, const Vec3& x) {
  const Vec3 n = p.normal();
  Vec3 grad = solid_angle(p, x) * n;
  for (int i = 0; i < p.nvert; ++i) {
    const Vec3& a = p.v[i];
    const Vec3& b = p.v[(i + 1) % p.nvert];
    const Vec3 e = (b - a).normalized();
    const double sa = (a - x).dot(e);
    const double sb = (b - x).dot(e);
    const double ra = (x - a).norm();
    const double rb = (x - b).norm();
    grad -= edge_log(ra, sa, rb, sb) * e.cross(n);
  }
  return grad;
}

void FieldBasis3D::build_tables(const PanelMesh& mesh) {
  n_ = static_cast<int>(mesh.panels.size());
  centroid_.resize(3, n_);
  area_.resize(n_);
  radius_.resize(n_);
  quad_.resize(6, n_);
  for (int j = 0; j < n_; ++j) {
    const Panel& p = mesh.panels[j];
    const Vec3 c = p.centroid();
    centroid_.col(j) = c;
    area_[j] = p.area();
    double rad = 0.0;
    for (int i = 0; i < p.nvert; ++i) rad = std::max(rad, (p.v[i] - c).norm());
    radius_[j] = rad;

    // Second moment about the centroid, via the triangle fan:
    // int x x^T dA over triangle (a,b,c) = A/12 (sum vk vk^T + s s^T), s = a+b+c.
    Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
    for (int i = 1; i + 1 < p.nvert; ++i) {
      const Vec3 a = p.v[0] - c, b = p.v[i] - c, d = p.v[i + 1] - c;
      const double at = 0.5 * (b - a).cross(d - a).norm();
      const Vec3 s = a + b + d;
      m += (at / 12.0) *
           (a * a.transpose() + b * b.transpose() + d * d.transpose() +
            s * s.transpose());
    }
    quad_(0, j) = m(0, 0);
    quad_(1, j) = m(1, 1);
    quad_(2, j) = m(2, 2);
    quad_(3, j) = m(0, 1);
    quad_(4, j) = m(0, 2);
    quad_(5, j) = m(1, 2);
  }

  cx_ = centroid_.row(0).transpose().array();
  cy_ = centroid_.row(1).transpose().array();
  cz_ = centroid_.row(2).transpose().array();
  qxx_ = quad_.row(0).transpose().array();
  qyy_ = quad_.row(1).transpose().array();
  qzz_ = quad_.row(2).transpose().array();
  qxy_ = quad_.row(3).transpose().array();
  qxz_ = quad_.row(4).transpose().array();
  qyz_ = quad_.row(5).transpose().array();
  qtr_ = qxx_ + qyy_ + qzz_;
  near2_ = (settings_.near_ratio * radius_.array()).square();
}

namespace {
/// Per-thread scratch for vectorized point evaluation.
struct EvalScratch {
  Eigen::ArrayXd dx, dy, dz, r2, inv_r, inv_r3, inv_r5, djd, val, fx, fy, fz;
};
EvalScratch& eval_scratch() {
  thread_local EvalScratch s;
  return s;
}
} // namespace

FieldBasis3D FieldBasis3D::solve(const PanelMesh& mesh,
                                 const SolverSettings& settings) {
  if (mesh.panels.empty()) throw ParameterError("empty panel mesh");
  FieldBasis3D basis;
  basis.mesh_ = mesh;
  basis.settings_ = settings;
  basis.names_ = mesh.electrode_names;
  basis.build_tables(mesh);

  const int n = basis.n_;
  MatX system(n, n);
  for (int i = 0; i < n; ++i) {
    const Vec3 x = basis.centroid_.col(i);
    for (int j = 0; j < n; ++j) {
      const Vec3 d = x - basis.centroid_.col(j);
      const double dist = d.norm();
      if (dist < settings.near_ratio * basis.radius_[j]) {
        system(i, j) = coulomb_constant * panel_integral_exact(mesh.panels[j], x);
      } else {
        // Monopole + quadrupole far expansion.
        const double r2 = dist * dist;
        const double inv_r = 1.0 / dist;
        const double inv_r5 = inv_r * inv_r * inv_r * inv_r * inv_r;
        const double tr =
            basis.quad_(0, j) + basis.quad_(1, j) + basis.quad_(2, j);
        const double djd =
            basis.quad_(0, j) * d.x() * d.x() + basis.quad_(1, j) * d.y() * d.y() +
            basis.quad_(2, j) * d.z() * d.z() +
            2.0 * (basis.quad_(3, j) * d.x() * d.y() +
                   basis.quad_(4, j) * d.x() * d.z() +
                   basis.quad_(5, j) * d.y() * d.z());
        system(i, j) = coulomb_constant *
                       (basis.area_[j] * inv_r +
                        0.5 * (3.0 * djd - tr * r2) * inv_r5);
      }
    }
  }

  Eigen::PartialPivLU<MatX> lu(system);
  basis.condition_estimate_ = 1.0 / std::max(lu.rcond(), 1e-300);
  if (!(basis.condition_estimate_ < settings.condition_limit))
    throw SolverError("BEM system ill-conditioned: condition estimate " +
                      std::to_string(basis.condition_estimate_));

  const int ne = static_cast<int>(mesh.electrode_names.size());
  MatX rhs = MatX::Zero(n, ne);
  for (int j = 0; j < n; ++j) rhs(j, mesh.panels[j].electrode) = 1.0;
  MatX charges = lu.solve(rhs);

  basis.sigma_.resize(ne);
  for (int e = 0; e < ne; ++e) basis.sigma_[e] = charges.col(e);
  return basis;
}

VecX FieldBasis3D::combine(const VecX& electrode_voltages) const {
  VecX out = VecX::Zero(n_);
  for (int e = 0; e < electrode_count(); ++e) {
    const double v = electrode_voltages[e];
    if (v != 0.0) out += v * sigma_[e];
  }
  return out;
}

double FieldBasis3D::potential(const Vec3& x, const VecX& sigma) const {
  // Vectorized far expansion over every panel, then exact-kernel corrections
  // for the (few) panels within their near radius.
  EvalScratch& s = eval_scratch();
  s.dx = x.x() - cx_;
  s.dy = x.y() - cy_;
  s.dz = x.z() - cz_;
  s.r2 = s.dx.square() + s.dy.square() + s.dz.square();
  s.inv_r = s.r2.rsqrt();
  s.inv_r5 = (s.inv_r * s.inv_r).square() * s.inv_r;
  s.djd = qxx_ * s.dx.square() + qyy_ * s.dy.square() + qzz_ * s.dz.square() +
          2.0 * (qxy_ * s.dx * s.dy + qxz_ * s.dx * s.dz + qyz_ * s.dy * s.dz);
  s.val = area_.array() * s.inv_r + 0.5 * (3.0 * s.djd - qtr_ * s.r2) * s.inv_r5;
  double phi = (s.val * sigma.array()).sum();
  for (int j = 0; j < n_; ++j) {
    if (s.r2[j] < near2_[j] && sigma[j] != 0.0)
      phi += sigma[j] * (panel_integral_exact(mesh_.panels[j], x) - s.val[j]);
  }
  return coulomb_constant * phi;
}

Vec3 FieldBasis3D::efield(const Vec3& x, const VecX& sigma) const {
  // -grad of the far expansion, regrouped so every component shares one
  // scalar prefactor: f = d * (A r^-3 + tr r^-5 + 2.5 (3 djd - tr r^2) r^-7)
  //                       - 3 (Q d) r^-5.
  EvalScratch& s = eval_scratch();
  s.dx = x.x() - cx_;
  s.dy = x.y() - cy_;
  s.dz = x.z() - cz_;
  s.r2 = s.dx.square() + s.dy.square() + s.dz.square();
  s.inv_r = s.r2.rsqrt();
  s.inv_r3 = s.inv_r * s.inv_r * s.inv_r;
  s.inv_r5 = s.inv_r3 * s.inv_r * s.inv_r;
  s.djd = qxx_ * s.dx.square() + qyy_ * s.dy.square() + qzz_ * s.dz.square() +
          2.0 * (qxy_ * s.dx * s.dy + qxz_ * s.dx * s.dz + qyz_ * s.dy * s.dz);
  s.val = area_.array() * s.inv_r3 + qtr_ * s.inv_r5 +
          2.5 * (3.0 * s.djd - qtr_ * s.r2) * s.inv_r5 * s.inv_r * s.inv_r;
  s.fx = s.val * s.dx - 3.0 * (qxx_ * s.dx + qxy_ * s.dy + qxz_ * s.dz) * s.inv_r5;
  s.fy = s.val * s.dy - 3.0 * (qxy_ * s.dx + qyy_ * s.dy + qyz_ * s.dz) * s.inv_r5;
  s.fz = s.val * s.dz - 3.0 * (qxz_ * s.dx + qyz_ * s.dy + qzz_ * s.dz) * s.inv_r5;
  Vec3 field((s.fx * sigma.array()).sum(), (s.fy * sigma.array()).sum(),
             (s.fz * sigma.array()).sum());
  for (int j = 0; j < n_; ++j) {
    if (s.r2[j] < near2_[j] && sigma[j] != 0.0) {
      field -= sigma[j] * panel_gradient_exact(mesh_.panels[j], x);
      field -= sigma[j] * Vec3(s.fx[j], s.fy[j], s.fz[j]);
    }
  }
  return coulomb_constant * field;
}

double FieldBasis3D::potential_at(const Vec3& x,
                                  const VecX& electrode_voltages) const {
  if (mesh_.inside_conductor(x))
    throw DomainError("potential requested inside a conductor");
  return potential(x, combine(electrode_voltages));
}

Vec3 FieldBasis3D::efield_at(const Vec3& x,
                             const VecX& electrode_voltages) const {
  if (mesh_.inside_conductor(x))
    throw DomainError("field requested inside a conductor");
  return efield(x, combine(electrode_voltages));
}

MatX FieldBasis3D::capacitance_matrix() const {
  const int ne = electrode_count();
  MatX c = MatX::Zero(ne, ne);
  for (int j = 0; j < ne; ++j)
    for (int p = 0; p < n_; ++p)
      c(mesh_.panels[p].electrode, j) += sigma_[j][p] * area_[p];
  return c;
}

std::uint64_t FieldBasis3D::content_hash() const {
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

namespace {
constexpr char kCacheMagic[4] = {'I', 'T', 'B', 'C'};
constexpr std::uint32_t kCacheVersion = 1;
} // namespace

FieldBasis3D basis_from_cache_payload(PanelMesh mesh, SolverSettings settings,
                                      std::vector<VecX> sigma) {
  FieldBasis3D basis;
  basis.mesh_ = std::move(mesh);
  basis.settings_ = settings;
  basis.names_ = basis.mesh_.electrode_names;
  basis.build_tables(basis.mesh_);
  basis.sigma_ = std::move(sigma);
  return basis;
}

bool save_basis_cache(const FieldBasis3D& basis, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) return false;
  out.write(kCacheMagic, 4);
  auto write_u32 = [&](std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
  };
  auto write_u64 = [&](std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), 8);
  };
  write_u32(kCacheVersion);
  write_u64(basis.content_hash());
  write_u32(static_cast<std::uint32_t>(basis.electrode_count()));
  write_u32(static_cast<std::uint32_t>(basis.panel_count()));
  for (int e = 0; e < basis.electrode_count(); ++e)
    out.write(reinterpret_cast<const char*>(basis.charge_density(e).data()),
              static_cast<std::streamsize>(sizeof(double) * basis.panel_count()));
  return static_cast<bool>(out);
}

std::optional<FieldBasis3D> load_basis_cache(const PanelMesh& mesh,
                                             const SolverSettings& settings,
                                             const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCacheMagic, 4) != 0) return std::nullopt;
  std::uint32_t version = 0, ne = 0, np = 0;
  std::uint64_t hash = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  in.read(reinterpret_cast<char*>(&hash), 8);
  if (!in || version != kCacheVersion) return std::nullopt;

  // Check the key against a basis built from this mesh + settings.
  FieldBasis3D probe = basis_from_cache_payload(mesh, settings, {});
  if (probe.content_hash() != hash) return std::nullopt;

  in.read(reinterpret_cast<char*>(&ne), 4);
  in.read(reinterpret_cast<char*>(&np), 4);
  if (!in || ne != mesh.electrode_names.size() || np != mesh.panels.size())
    return std::nullopt;
  std::vector<VecX> sigma(ne);
  for (auto& v : sigma) {
    v.resize(np);
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(sizeof(double) * np));
    if (!in) return std::nullopt;
  }
  return basis_from_cache_payload(mesh, settings, std::move(sigma));
}

} // namespace iontrace::fields
