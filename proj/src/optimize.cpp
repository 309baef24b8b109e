#include "iontrace/optimize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

namespace iontrace::optimize {

std::vector<SweepPoint> sweep(const std::function<MetricValue(double)>& f,
                              const std::vector<double>& grid) {
  if (grid.empty()) throw ParameterError("sweep grid must be non-empty");
  std::vector<SweepPoint> out;
  out.reserve(grid.size());
  for (double v : grid) {
    const MetricValue m = f(v);
    out.push_back({v, m.metric, m.uncertainty});
  }
  return out;
}

namespace {

/// Fold a coordinate back into [lo, hi] by reflection at the walls.
double reflect_into(double x, double lo, double hi) {
  const double w = hi - lo;
  double u = std::fmod(x - lo, 2.0 * w);
  if (u < 0.0) u += 2.0 * w;
  return lo + (u <= w ? u : 2.0 * w - u);
}

bool lex_less(const VecX& a, const VecX& b) {
  for (int i = 0; i < a.size(); ++i) {
    if (a[i] < b[i]) return true;
    if (a[i] > b[i]) return false;
  }
  return false;
}

struct Vertex {
  VecX x;
  double f = 0.0;
  double u = 0.0;
};

bool better(const Vertex& a, const Vertex& b) {
  if (a.f != b.f) return a.f < b.f;
  return lex_less(a.x, b.x);
}

} // namespace

MinimizeResult minimize(const Objective& objective, const MinimizeSpec& spec) {
  const int dim = static_cast<int>(spec.lower.size());
  if (dim < 1 || spec.upper.size() != dim)
    throw ParameterError("minimize: bounds must be non-empty and same size");
  for (int i = 0; i < dim; ++i) {
    if (!std::isfinite(spec.lower[i]) || !std::isfinite(spec.upper[i]) ||
        !(spec.lower[i] < spec.upper[i]))
      throw ParameterError("minimize: bounds must be finite with lower < upper");
  }
  if (spec.budget < dim + 2)
    throw ParameterError("minimize: budget must be >= dimension + 2");

  MinimizeResult res;
  const VecX box = spec.upper - spec.lower;

  auto eval = [&](VecX x) -> Vertex {
    for (int i = 0; i < dim; ++i)
      x[i] = reflect_into(x[i], spec.lower[i], spec.upper[i]);
    const MetricValue m = objective(x);
    res.trace.push_back(
        {static_cast<int>(res.trace.size()), x, m.metric, m.uncertainty});
    return {std::move(x), m.metric, m.uncertainty};
  };
  auto exhausted = [&] {
    return static_cast<int>(res.trace.size()) >= spec.budget;
  };

  // Initial simplex: box centre plus one scaled step per coordinate.
  std::vector<Vertex> s;
  s.push_back(eval(VecX(0.5 * (spec.lower + spec.upper))));
  for (int i = 0; i < dim; ++i) {
    VecX x = s[0].x;
    x[i] += spec.initial_scale * box[i];
    s.push_back(eval(x));
  }

  const double alpha = 1.0, gamma = 2.0, rho = 0.5, shrink = 0.5;
  while (!exhausted()) {
    std::sort(s.begin(), s.end(), better);
    // Converged when the simplex has collapsed in every coordinate.
    double extent = 0.0;
    for (int i = 0; i < dim; ++i) {
      double lo = s[0].x[i], hi = s[0].x[i];
      for (const auto& v : s) {
        lo = std::min(lo, v.x[i]);
        hi = std::max(hi, v.x[i]);
      }
      extent = std::max(extent, (hi - lo) / box[i]);
    }
    if (extent < spec.param_tol) break;

    VecX centroid = VecX::Zero(dim);
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j) centroid[j] += s[i].x[j];
    centroid /= dim;

    Vertex& worst = s.back();
    Vertex refl = eval(centroid + alpha * (centroid - worst.x));
    if (better(refl, s[0])) {
      if (!exhausted()) {
        Vertex exp = eval(centroid + gamma * (refl.x - centroid));
        worst = better(exp, refl) ? std::move(exp) : std::move(refl);
      } else {
        worst = std::move(refl);
      }
    } else if (better(refl, s[dim - 1])) {
      worst = std::move(refl);
    } else if (!exhausted()) {
      const Vertex& base = better(refl, worst) ? refl : worst;
      Vertex contr = eval(centroid + rho * (base.x - centroid));
      if (better(contr, base)) {
        worst = std::move(contr);
      } else {
        for (int i = 1; i <= dim && !exhausted(); ++i)
          s[i] = eval(s[0].x + shrink * (s[i].x - s[0].x));
      }
    }
  }

  const Evaluation* best = &res.trace[0];
  for (const auto& e : res.trace) {
    if (e.metric < best->metric ||
        (e.metric == best->metric && lex_less(e.params, best->params)))
      best = &e;
  }
  res.best = best->params;
  res.metric = best->metric;
  res.uncertainty = best->uncertainty;
  res.budget_exhausted = exhausted();
  return res;
}

ScanMap scan2d(const std::function<double(double, double)>& f,
               const std::vector<double>& u1_grid,
               const std::vector<double>& u2_grid) {
  if (u1_grid.empty() || u2_grid.empty())
    throw ParameterError("scan2d grids must be non-empty");
  ScanMap map;
  map.u1 = u1_grid;
  map.u2 = u2_grid;
  map.value.resize(static_cast<int>(u1_grid.size()),
                   static_cast<int>(u2_grid.size()));
  for (std::size_t i = 0; i < u1_grid.size(); ++i)
    for (std::size_t j = 0; j < u2_grid.size(); ++j)
      map.value(static_cast<int>(i), static_cast<int>(j)) =
          f(u1_grid[i], u2_grid[j]);
  return map;
}

void write_trace_csv(const std::vector<Evaluation>& trace,
                     const std::vector<std::string>& param_names,
                     const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ParameterError("cannot open trace file: " + path);
  out << "eval_index";
  for (const auto& n : param_names) out << ',' << n;
  out << ",metric,uncertainty\n";
  char buf[32];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << ',' << buf;
  };
  for (const auto& e : trace) {
    out << e.eval_index;
    for (int i = 0; i < e.params.size(); ++i) put(e.params[i]);
    put(e.metric);
    put(e.uncertainty);
    out << '\n';
  }
}

} // namespace iontrace::optimize
