#include "iontrace/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>

#include "iontrace/rng.hpp"

namespace iontrace::diagnostics {

using beamline::Outcome;
using beamline::ShotRecord;

Vec2 SpotDiagram::centroid() const {
  Vec2 c = Vec2::Zero();
  for (const auto& h : hits) c += Vec2(h.x, h.y);
  return hits.empty() ? c : Vec2(c / static_cast<double>(hits.size()));
}

Vec2 SpotDiagram::principal_extents() const {
  if (hits.size() < 2) return Vec2::Zero();
  const Vec2 c = centroid();
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (const auto& h : hits) {
    const double dx = h.x - c.x(), dy = h.y - c.y();
    sxx += dx * dx;
    syy += dy * dy;
    sxy += dx * dy;
  }
  const double n = static_cast<double>(hits.size());
  sxx /= n;
  syy /= n;
  sxy /= n;
  const double tr = 0.5 * (sxx + syy);
  const double det = std::sqrt(std::max(0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy, 0.0));
  return Vec2(std::sqrt(std::max(tr + det, 0.0)),
              std::sqrt(std::max(tr - det, 0.0)));
}

double r68_points(const std::vector<Vec2>& points) {
  if (points.size() < 3)
    throw ParameterError("r68 needs at least 3 points");
  Vec2 c = Vec2::Zero();
  for (const auto& p : points) c += p;
  c /= static_cast<double>(points.size());
  std::vector<double> d;
  d.reserve(points.size());
  for (const auto& p : points) d.push_back((p - c).norm());
  const std::size_t k = static_cast<std::size_t>(
      std::ceil(0.68 * static_cast<double>(points.size())));
  std::nth_element(d.begin(), d.begin() + (k - 1), d.end());
  return d[k - 1];
}

double r68(const SpotDiagram& spot) {
  std::vector<Vec2> pts;
  pts.reserve(spot.hits.size());
  for (const auto& h : spot.hits) pts.emplace_back(h.x, h.y);
  return r68_points(pts);
}

double divergence(const SpotDiagram& spot, double source_distance) {
  if (source_distance <= 0.0)
    throw ParameterError("divergence needs a positive source distance");
  return 2.0 * r68(spot) / source_distance;
}

VelocityStats velocity_stats(const std::vector<double>& speeds) {
  VelocityStats vs;
  if (speeds.empty()) return vs;
  for (double v : speeds) vs.mean += v;
  vs.mean /= static_cast<double>(speeds.size());
  double acc = 0.0;
  for (double v : speeds) acc += (v - vs.mean) * (v - vs.mean);
  vs.spread = speeds.size() > 1
                  ? std::sqrt(acc / static_cast<double>(speeds.size() - 1))
                  : 0.0;
  vs.relative = vs.mean != 0.0 ? vs.spread / vs.mean : 0.0;
  return vs;
}

VelocityStats velocity_stats(const std::vector<ShotRecord>& records) {
  std::vector<double> speeds;
  for (const auto& rec : records)
    for (const auto& ion : rec.ions)
      if (ion.outcome == Outcome::Hit) speeds.push_back(ion.target_speed);
  return velocity_stats(speeds);
}

TofHistogram tof_histogram(const std::vector<ShotRecord>& records,
                           double bin_width) {
  if (bin_width <= 0.0) throw ParameterError("bin width must be positive");
  TofHistogram h;
  h.bin_width = bin_width;

  std::vector<double> times;
  std::size_t max_ions = 0;
  for (const auto& rec : records) {
    max_ions = std::max(max_ions, rec.ions.size());
    for (const auto& ion : rec.ions)
      if (ion.outcome == Outcome::Hit) times.push_back(ion.target.time);
  }
  if (times.empty()) return h;

  const double tmin = *std::min_element(times.begin(), times.end());
  const double tmax = *std::max_element(times.begin(), times.end());
  h.t0 = std::floor(tmin / bin_width) * bin_width;
  const long nbins =
      static_cast<long>(std::floor((tmax - h.t0) / bin_width)) + 1;
  h.counts.assign(static_cast<std::size_t>(nbins), 0);
  for (double t : times)
    ++h.counts[static_cast<std::size_t>((t - h.t0) / bin_width)];

  for (double t : times) h.mean += t;
  h.mean /= static_cast<double>(times.size());
  double acc = 0.0;
  for (double t : times) acc += (t - h.mean) * (t - h.mean);
  h.sigma = times.size() > 1
                ? std::sqrt(acc / static_cast<double>(times.size() - 1))
                : 0.0;

  h.ion_mean.assign(max_ions, 0.0);
  h.ion_sigma.assign(max_ions, 0.0);
  for (std::size_t k = 0; k < max_ions; ++k) {
    std::vector<double> tk;
    for (const auto& rec : records)
      if (k < rec.ions.size() && rec.ions[k].outcome == Outcome::Hit)
        tk.push_back(rec.ions[k].target.time);
    if (tk.empty()) continue;
    double m = 0.0;
    for (double t : tk) m += t;
    m /= static_cast<double>(tk.size());
    double a = 0.0;
    for (double t : tk) a += (t - m) * (t - m);
    h.ion_mean[k] = m;
    h.ion_sigma[k] =
        tk.size() > 1 ? std::sqrt(a / static_cast<double>(tk.size() - 1)) : 0.0;
  }
  return h;
}

Transmission transmission(const SpotDiagram& spot,
                          const geometry::Aperture& aperture,
                          const DetectionModel& detection, int n_mc,
                          std::uint64_t seed) {
  if (n_mc < 1) throw ParameterError("transmission needs n_mc >= 1");
  if (detection.quantum_efficiency < 0.0 || detection.quantum_efficiency > 1.0)
    throw ParameterError("quantum efficiency must lie in [0, 1]");
  if (spot.hits.empty()) throw ParameterError("transmission needs hits");

  Transmission out;
  RandomStream rng(RandomStream::derive(seed, "transmission", 0), 0);
  const double r_ap = 0.5 * aperture.diameter;
  for (int i = 0; i < n_mc; ++i) {
    const auto& h = spot.hits[static_cast<std::size_t>(
        rng.next_u64() % spot.hits.size())];
    const double dx = h.x - aperture.center_offset.x();
    const double dy = h.y - aperture.center_offset.y();
    const bool inside = dx * dx + dy * dy <= r_ap * r_ap;
    const bool detected =
        inside && rng.next_uniform() <= detection.quantum_efficiency;
    if (detected) ++out.passed;
  }
  out.total = n_mc;
  const double p = static_cast<double>(out.passed) / n_mc;
  const double z = 1.959963984540054; // 95%
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n_mc;
  const double center = (p + z2 / (2.0 * n_mc)) / denom;
  const double half =
      z * std::sqrt(p * (1.0 - p) / n_mc + z2 / (4.0 * static_cast<double>(n_mc) * n_mc)) / denom;
  out.probability = p;
  out.wilson_low = std::max(0.0, center - half);
  out.wilson_high = std::min(1.0, center + half);
  return out;
}

SpotDiagram spot_scale(const SpotDiagram& spot, double factor) {
  SpotDiagram out = spot;
  const Vec2 c = spot.centroid();
  for (auto& h : out.hits) {
    h.x = c.x() + factor * (h.x - c.x());
    h.y = c.y() + factor * (h.y - c.y());
  }
  return out;
}

SpotDiagram spot_from_records(const std::vector<ShotRecord>& records,
                              double plane_z) {
  SpotDiagram spot;
  spot.plane_z = plane_z;
  for (const auto& rec : records) {
    for (std::size_t k = 0; k < rec.ions.size(); ++k) {
      const auto& ion = rec.ions[k];
      if (ion.outcome != Outcome::Hit) continue;
      spot.hits.push_back({ion.target.position.x(), ion.target.position.y(),
                           ion.target.time, ion.target_speed, rec.shot_id,
                           static_cast<int>(k)});
    }
  }
  return spot;
}

namespace {
const char* outcome_name(Outcome o) {
  switch (o) {
    case Outcome::Hit: return "hit";
    case Outcome::Reflected: return "reflected";
    case Outcome::StruckElectrode: return "struck_electrode";
    case Outcome::Lost: return "lost";
  }
  return "unknown";
}
} // namespace

void write_spot_csv(const SpotDiagram& spot,
                    const std::vector<ShotRecord>& records,
                    const std::string& path) {
  std::ofstream out(path);
  out << "shot_id,ion_id,x_m,y_m,t_s,v_mps,outcome\n";
  out << std::setprecision(17);
  for (const auto& rec : records) {
    for (std::size_t k = 0; k < rec.ions.size(); ++k) {
      const auto& ion = rec.ions[k];
      if (ion.outcome == Outcome::Hit) {
        out << rec.shot_id << ',' << k << ',' << ion.target.position.x() << ','
            << ion.target.position.y() << ',' << ion.target.time << ','
            << ion.target_speed << ',' << outcome_name(ion.outcome) << '\n';
      } else {
        out << rec.shot_id << ',' << k << ",,,,," << outcome_name(ion.outcome)
            << '\n';
      }
    }
  }
  (void)spot;
}

void write_tof_csv(const TofHistogram& hist, const std::string& path) {
  std::ofstream out(path);
  out << "bin_start_s,count\n";
  out << std::setprecision(17);
  for (std::size_t i = 0; i < hist.counts.size(); ++i)
    out << hist.t0 + static_cast<double>(i) * hist.bin_width << ','
        << hist.counts[i] << '\n';
}

void write_spot_svg(const SpotDiagram& spot, const std::string& path) {
  std::ofstream out(path);
  const Vec2 c = spot.centroid();
  double radius = 0.0;
  if (spot.hits.size() >= 3) radius = r68(spot);
  double extent = radius;
  for (const auto& h : spot.hits)
    extent = std::max(extent, (Vec2(h.x, h.y) - c).norm());
  if (extent <= 0.0) extent = 1e-6;
  const double view = 1.2 * extent;
  const double s = 400.0 / view; // px per metre, 800x800 canvas

  out << "<svg xmlns='http://www.w3.org/2000/svg' width='800' height='800' "
         "viewBox='0 0 800 800'>\n"
      << "<rect width='800' height='800' fill='white'/>\n";
  out << "<circle cx='400' cy='400' r='" << radius * s
      << "' fill='none' stroke='grey' stroke-width='1.5'/>\n";
  for (const auto& h : spot.hits)
    out << "<circle cx='" << 400.0 + (h.x - c.x()) * s << "' cy='"
        << 400.0 - (h.y - c.y()) * s << "' r='2' fill='black'/>\n";
  out << "<text x='10' y='20' font-size='14'>r68 = " << radius * 1e6
      << " um, n = " << spot.hits.size() << "</text>\n</svg>\n";
}

} // namespace iontrace::diagnostics
