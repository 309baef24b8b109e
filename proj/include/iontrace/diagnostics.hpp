#pragma once

#include <string>
#include <vector>

#include "iontrace/beamline.hpp"
#include "iontrace/geometry.hpp"
#include "iontrace/types.hpp"

namespace iontrace::diagnostics {

struct SpotHit {
  double x = 0.0, y = 0.0; ///< m
  double t = 0.0;          ///< s
  double speed = 0.0;      ///< m/s
  int shot_id = 0;
  int ion_id = 0;
};

struct SpotDiagram {
  double plane_z = 0.0;
  std::vector<SpotHit> hits;
  Vec2 centroid() const;
  /// Extents (1 sigma) along the principal axes of the hit covariance.
  Vec2 principal_extents() const;
};

/// Smallest radius about the centroid containing ceil(0.68 n) hits.
/// Throws ParameterError with fewer than 3 hits.
double r68(const SpotDiagram& spot);
/// Same convention for a bare point set (used by focal-plane search).
double r68_points(const std::vector<Vec2>& points);

/// Full-angle divergence 2 r68 / distance.
double divergence(const SpotDiagram& spot, double source_distance);

struct VelocityStats {
  double mean = 0.0;
  double spread = 0.0; ///< 1 sigma
  double relative = 0.0; ///< spread / mean
};
VelocityStats velocity_stats(const std::vector<double>& speeds);
VelocityStats velocity_stats(const std::vector<beamline::ShotRecord>& records);

struct TofHistogram {
  double bin_width = 10e-9;
  double t0 = 0.0; ///< start of first bin
  std::vector<long> counts;
  double mean = 0.0;
  double sigma = 0.0;
  /// Sub-histogram statistics per ion index (multi-ion shots).
  std::vector<double> ion_mean;
  std::vector<double> ion_sigma;
};
TofHistogram tof_histogram(const std::vector<beamline::ShotRecord>& records,
                           double bin_width);

struct DetectionModel {
  double quantum_efficiency = 1.0;
};

struct Transmission {
  double probability = 0.0;
  double wilson_low = 0.0;
  double wilson_high = 0.0;
  long passed = 0;
  long total = 0;
};

/// Monte Carlo aperture transmission with Bernoulli detection; Wilson 95%
/// interval on the passed fraction.
Transmission transmission(const SpotDiagram& spot,
                          const geometry::Aperture& aperture,
                          const DetectionModel& detection, int n_mc,
                          std::uint64_t seed);

/// Hits scaled about the centroid by `factor`.
SpotDiagram spot_scale(const SpotDiagram& spot, double factor);

/// Collect target-plane hits out of shot records.
SpotDiagram spot_from_records(const std::vector<beamline::ShotRecord>& records,
                              double plane_z);

void write_spot_csv(const SpotDiagram& spot,
                    const std::vector<beamline::ShotRecord>& records,
                    const std::string& path);
void write_tof_csv(const TofHistogram& hist, const std::string& path);
void write_spot_svg(const SpotDiagram& spot, const std::string& path);

} // namespace iontrace::diagnostics
