#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "iontrace/types.hpp"

namespace iontrace::optimize {

/// Metric value plus its Monte Carlo standard error.
struct MetricValue {
  double metric = 0.0;
  double uncertainty = 0.0;
};

/// Objective over a parameter vector. Implementations are expected to use
/// common random numbers so that equal parameters give equal metrics.
using Objective = std::function<MetricValue(const VecX&)>;

struct SweepPoint {
  double value = 0.0;
  double metric = 0.0;
  double uncertainty = 0.0;
};

/// One ensemble per grid point, same base seed (common random numbers).
std::vector<SweepPoint> sweep(const std::function<MetricValue(double)>& f,
                              const std::vector<double>& grid);

struct Evaluation {
  int eval_index = 0;
  VecX params;
  double metric = 0.0;
  double uncertainty = 0.0;
};

struct MinimizeSpec {
  VecX lower;
  VecX upper;
  int budget = 100;           ///< max objective evaluations, >= dim + 2
  double initial_scale = 0.25; ///< initial simplex edge, fraction of the box
  double param_tol = 1e-9;    ///< simplex extent convergence, fraction of box
};

struct MinimizeResult {
  VecX best;
  double metric = 0.0;
  double uncertainty = 0.0;
  bool budget_exhausted = false;
  std::vector<Evaluation> trace;
};

/// Nelder-Mead over a bounded box. Candidate points outside the box are
/// reflected back inside; exactly equal metrics are ordered lexicographically
/// on the parameter vector for determinism.
MinimizeResult minimize(const Objective& objective, const MinimizeSpec& spec);

/// 2D grid scan (deflection maps): value(i, j) = f(u1[i], u2[j]).
struct ScanMap {
  std::vector<double> u1;
  std::vector<double> u2;
  MatX value; ///< u1.size() x u2.size()
};

ScanMap scan2d(const std::function<double(double, double)>& f,
               const std::vector<double>& u1_grid,
               const std::vector<double>& u2_grid);

/// Trace CSV: eval_index, <param names...>, metric, uncertainty.
void write_trace_csv(const std::vector<Evaluation>& trace,
                     const std::vector<std::string>& param_names,
                     const std::string& path);

} // namespace iontrace::optimize
