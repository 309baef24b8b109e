#include "iontrace/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "iontrace/rng.hpp"

namespace iontrace::dynamics {

using constants::boltzmann;
using constants::coulomb_constant;
using constants::pi;

Ensemble sample_thermal(const ThermalSource& src, const IonSpecies& species,
                        int n, std::uint64_t seed,
                        const std::function<Vec3(const Vec3&)>& rf_field_amplitude,
                        double rf_frequency) {
  if (n < 1) throw ParameterError("sample_thermal needs n >= 1");
  if (src.temperature_k < 0.0) throw ParameterError("temperature must be >= 0");
  if (src.temperature_k > 0.0 && src.secular_frequencies.minCoeff() <= 0.0)
    throw ParameterError(
        "thermal sampling with T > 0 requires positive secular frequencies "
        "(position spread is otherwise unbounded)");

  const double m = species.mass_kg();
  const double sigma_v =
      src.temperature_k > 0.0 ? std::sqrt(boltzmann * src.temperature_k / m) : 0.0;

  Ensemble out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    RandomStream rng(RandomStream::derive(seed, "thermal", static_cast<std::uint64_t>(i)), 0);
    IonState s;
    for (int axis = 0; axis < 3; ++axis) {
      const double v = sigma_v * rng.next_normal();
      const double x =
          sigma_v > 0.0
              ? sigma_v / src.secular_frequencies[axis] * rng.next_normal()
              : 0.0;
      s.velocity[axis] = v;
      s.position[axis] = src.offset[axis] + x;
    }
    if (rf_field_amplitude && rf_frequency > 0.0) {
      const Vec3 erf = rf_field_amplitude(s.position);
      s.velocity += species.charge_c() * std::sin(src.rf_phase) /
                    (m * rf_frequency) * erf;
    }
    out[static_cast<std::size_t>(i)] = s;
  }
  return out;
}

namespace {

// Dormand-Prince 5(4) tableau.
constexpr double kC[7] = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
constexpr double kA[7][6] = {
    {},
    {1.0 / 5},
    {3.0 / 40, 9.0 / 40},
    {44.0 / 45, -56.0 / 15, 32.0 / 9},
    {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
    {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
    {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
constexpr double kE[7] = {71.0 / 57600,     0.0,           -71.0 / 16695,
                          71.0 / 1920,      -17253.0 / 339200,
                          22.0 / 525,       -1.0 / 40}; // b5 - b4
constexpr double kD[7] = {-12715105075.0 / 11282082432.0,
                          0.0,
                          87487479700.0 / 32700410799.0,
                          -10690763975.0 / 1880347072.0,
                          701980252875.0 / 199316789632.0,
                          -1453857185.0 / 822651844.0,
                          69997945.0 / 29380423.0};

struct DenseSegment {
  double t0 = 0.0, h = 0.0;
  VecX r1, r2, r3, r4, r5;

  VecX eval(double t) const {
    const double th = (t - t0) / h;
    return r1 +
           th * (r2 + (1.0 - th) * (r3 + th * (r4 + (1.0 - th) * r5)));
  }
};

class System {
public:
  System(const FieldSource& field, const IonSpecies& species, int n)
      : field_(field), n_(n),
        qm_(species.charge_c() / species.mass_kg()),
        coul_(coulomb_constant * species.charge_c() * species.charge_c() /
              species.mass_kg()) {}

  // y = (pos0, vel0, pos1, vel1, ...)
  VecX deriv(double t, const VecX& y, const std::vector<bool>& alive) const {
    VecX dy(y.size());
    for (int i = 0; i < n_; ++i) {
      const int o = 6 * i;
      if (!alive[static_cast<std::size_t>(i)]) {
        dy.segment<6>(o).setZero();
        continue;
      }
      const Vec3 p = y.segment<3>(o);
      Vec3 a = qm_ * field_.efield(p, t);
      for (int j = 0; j < n_; ++j) {
        if (j == i || !alive[static_cast<std::size_t>(j)]) continue;
        const Vec3 d = p - Vec3(y.segment<3>(6 * j));
        const double r = d.norm();
        a += coul_ / (r * r * r) * d;
      }
      dy.segment<3>(o) = y.segment<3>(o + 3);
      dy.segment<3>(o + 3) = a;
    }
    return dy;
  }

private:
  const FieldSource& field_;
  int n_;
  double qm_, coul_;
};

double error_norm(const VecX& err, const VecX& y0, const VecX& y1,
                  const IntegratorSettings& s, int n_ions) {
  double acc = 0.0;
  for (int i = 0; i < n_ions; ++i) {
    for (int k = 0; k < 6; ++k) {
      const int idx = 6 * i + k;
      const double atol = k < 3 ? s.atol_pos : s.atol_vel;
      const double sc =
          atol + s.rtol * std::max(std::abs(y0[idx]), std::abs(y1[idx]));
      const double e = err[idx] / sc;
      acc += e * e;
    }
  }
  return std::sqrt(acc / err.size());
}

// Bisection for the earliest root of f(t) changing sign in (t0, t1].
template <class F>
double bisect_time(const F& f, double t0, double t1, double tol) {
  double f0 = f(t0);
  for (int it = 0; it < 200 && t1 - t0 > tol; ++it) {
    const double tm = 0.5 * (t0 + t1);
    const double fm = f(tm);
    if ((f0 <= 0.0) == (fm <= 0.0)) {
      t0 = tm;
      f0 = fm;
    } else {
      t1 = tm;
    }
  }
  return t1;
}

} // namespace

IntegrationResult integrate(const Ensemble& ions, const IonSpecies& species,
                            const FieldSource& field, const StopSpec& stop,
                            const IntegratorSettings& settings,
                            TrajectoryRecorder* recorder) {
  const int n = static_cast<int>(ions.size());
  if (n < 1) throw ParameterError("integrate needs at least one ion");
  for (const auto& s : ions)
    if (!s.position.allFinite() || !s.velocity.allFinite())
      throw ParameterError("non-finite ion state");

  System sys(field, species, n);
  IntegrationResult res;
  res.alive.assign(static_cast<std::size_t>(n), true);
  std::vector<bool> crossed(static_cast<std::size_t>(n), false);
  res.states.resize(static_cast<std::size_t>(n));

  double t = ions.front().time;
  VecX y(6 * n);
  for (int i = 0; i < n; ++i) {
    y.segment<3>(6 * i) = ions[static_cast<std::size_t>(i)].position;
    y.segment<3>(6 * i + 3) = ions[static_cast<std::size_t>(i)].velocity;
  }

  std::vector<double> planes = stop.record_planes;
  if (stop.z_stop) planes.push_back(*stop.z_stop);

  double h = settings.initial_step;
  VecX k[7];
  k[0] = sys.deriv(t, y, res.alive);
  double next_record = t;

  auto finalize = [&](double t_now) {
    for (int i = 0; i < n; ++i) {
      if (crossed[static_cast<std::size_t>(i)]) continue; // already stored
      res.states[static_cast<std::size_t>(i)].position = y.segment<3>(6 * i);
      res.states[static_cast<std::size_t>(i)].velocity = y.segment<3>(6 * i + 3);
      res.states[static_cast<std::size_t>(i)].time = t_now;
    }
  };

  if (recorder && recorder->sample)
    for (int i = 0; i < n; ++i)
      recorder->sample(i, t, y.segment<3>(6 * i), y.segment<3>(6 * i + 3));
  if (recorder) next_record = t + recorder->interval;

  while (t < stop.t_end) {
    if (stop.t_end - t < settings.min_step) break; // rounding residue
    if (++res.steps > settings.max_steps)
      throw StiffnessError("integrator exceeded max step count");

    double hmax = std::min(settings.max_step, stop.t_end - t);
    const double trf = field.rf_period(Vec3(y.segment<3>(0)), t);
    if (trf > 0.0) hmax = std::min(hmax, trf / 100.0);
    h = std::min(h, hmax);
    if (h < settings.min_step)
      throw StiffnessError("step size underflow at t = " + std::to_string(t));

    // One DP5 attempt.
    VecX ytmp;
    for (int s = 1; s < 7; ++s) {
      ytmp = y;
      for (int q = 0; q < s; ++q)
        if (kA[s][q] != 0.0) ytmp += h * kA[s][q] * k[q];
      k[s] = sys.deriv(t + kC[s] * h, ytmp, res.alive);
    }
    const VecX& y1 = ytmp; // stage 7 input is the 5th-order solution
    VecX err = VecX::Zero(6 * n);
    for (int s = 0; s < 7; ++s)
      if (kE[s] != 0.0) err += h * kE[s] * k[s];
    const double enorm = error_norm(err, y, y1, settings, n);

    if (enorm > 1.0) {
      h *= std::clamp(0.9 * std::pow(enorm, -0.2), 0.2, 1.0);
      continue;
    }

    // Accepted: build dense output.
    DenseSegment seg;
    seg.t0 = t;
    seg.h = h;
    seg.r1 = y;
    seg.r2 = y1 - y;
    seg.r3 = h * k[0] - seg.r2;
    seg.r4 = seg.r2 - h * k[6] - seg.r3;
    seg.r5 = VecX::Zero(6 * n);
    for (int s = 0; s < 7; ++s)
      if (kD[s] != 0.0) seg.r5 += kD[s] * k[s];
    seg.r5 *= h;

    const double t1 = t + h;
    bool stop_now = false;

    for (int i = 0; i < n; ++i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      if (!res.alive[ui]) continue;
      const Vec3 p0 = y.segment<3>(6 * i), p1 = y1.segment<3>(6 * i);
      const Vec3 v0 = y.segment<3>(6 * i + 3), v1 = y1.segment<3>(6 * i + 3);

      // Impact on a conductor.
      if (field.inside_conductor(p1)) {
        const double te = bisect_time(
            [&](double tt) {
              return field.inside_conductor(
                         Vec3(seg.eval(tt).segment<3>(6 * i)))
                         ? 1.0
                         : -1.0;
            },
            t, t1, settings.event_time_tol);
        const VecX ye = seg.eval(te);
        Event ev{Event::Kind::Impact, i, te, ye.segment<3>(6 * i),
                 ye.segment<3>(6 * i + 3), 0.0};
        res.events.push_back(ev);
        res.alive[ui] = false;
        res.states[ui] = {ev.position, ev.velocity, te};
        crossed[ui] = true; // state frozen
        continue;
      }

      // Turnaround: vz sign change.
      if ((v0.z() > 0.0) != (v1.z() > 0.0) && v0.z() != 0.0) {
        const double te = bisect_time(
            [&](double tt) { return seg.eval(tt)[6 * i + 5]; }, t, t1,
            settings.event_time_tol);
        const VecX ye = seg.eval(te);
        Event ev{Event::Kind::Turnaround, i, te, ye.segment<3>(6 * i),
                 ye.segment<3>(6 * i + 3), 0.0};
        res.events.push_back(ev);
        if (stop.stop_on_turnaround) {
          res.stopped_on_turnaround = true;
          stop_now = true;
        }
      }

      // Plane crossings.
      for (double pz : planes) {
        if ((p0.z() < pz) == (p1.z() < pz)) continue;
        const double te = bisect_time(
            [&](double tt) { return seg.eval(tt)[6 * i + 2] - pz; }, t, t1,
            settings.event_time_tol);
        const VecX ye = seg.eval(te);
        Event ev{Event::Kind::PlaneCrossing, i, te, ye.segment<3>(6 * i),
                 ye.segment<3>(6 * i + 3), pz};
        res.events.push_back(ev);
        if (stop.z_stop && pz == *stop.z_stop && !crossed[ui]) {
          crossed[ui] = true;
          res.states[ui] = {ev.position, ev.velocity, te};
        }
      }
    }

    if (recorder && recorder->sample) {
      if (recorder->interval <= 0.0) {
        for (int i = 0; i < n; ++i)
          if (res.alive[static_cast<std::size_t>(i)])
            recorder->sample(i, t1, y1.segment<3>(6 * i),
                             y1.segment<3>(6 * i + 3));
      } else {
        while (next_record <= t1) {
          const VecX yr = seg.eval(next_record);
          for (int i = 0; i < n; ++i)
            if (res.alive[static_cast<std::size_t>(i)])
              recorder->sample(i, next_record, yr.segment<3>(6 * i),
                               yr.segment<3>(6 * i + 3));
          next_record += recorder->interval;
        }
      }
    }

    y = y1;
    t = t1;
    k[0] = k[6]; // FSAL

    if (std::all_of(crossed.begin(), crossed.end(), [](bool b) { return b; }))
      stop_now = true;
    if (std::none_of(res.alive.begin(), res.alive.end(),
                     [](bool b) { return b; }))
      stop_now = true;
    if (stop_now) break;

    const double fac =
        enorm > 0.0 ? std::clamp(0.9 * std::pow(enorm, -0.2), 0.2, 5.0) : 5.0;
    h *= fac;
  }

  finalize(t);
  return res;
}

SecularResult secular_frequencies(const FieldSource& field,
                                  const IonSpecies& species, const Vec3& center,
                                  double probe_amplitude, double duration) {
  constexpr int kSamples = 4096;
  const double dt = duration / kSamples;

  Ensemble probe(1);
  probe[0].position = center + Vec3(probe_amplitude, 0.83 * probe_amplitude,
                                    1.21 * probe_amplitude);
  probe[0].velocity = Vec3::Zero();

  std::vector<std::array<double, 3>> trace;
  trace.reserve(kSamples + 2);
  TrajectoryRecorder rec;
  rec.interval = dt;
  rec.sample = [&](int, double, const Vec3& x, const Vec3&) {
    trace.push_back({x.x() - center.x(), x.y() - center.y(),
                     x.z() - center.z()});
  };

  StopSpec stop;
  stop.t_end = duration;
  IntegratorSettings settings;
  settings.atol_pos = 1e-13;
  integrate(probe, species, field, stop, settings, &rec);

  SecularResult out;
  const int m = static_cast<int>(trace.size());
  for (int axis = 0; axis < 3; ++axis) {
    double mean = 0.0, peak = 0.0;
    for (const auto& s : trace) mean += s[static_cast<std::size_t>(axis)];
    mean /= m;
    for (const auto& s : trace)
      peak = std::max(peak,
                      std::abs(s[static_cast<std::size_t>(axis)] - mean));
    if (peak > 50.0 * probe_amplitude) {
      out.stable = false;
      continue;
    }

    // Windowed periodogram; coarse scan then local refinement.
    auto power = [&](double f) {
      const double w = 2.0 * pi * f;
      double re = 0.0, im = 0.0;
      for (int q = 0; q < m; ++q) {
        const double hann =
            0.5 * (1.0 - std::cos(2.0 * pi * q / (m - 1)));
        const double v =
            hann * (trace[static_cast<std::size_t>(q)]
                         [static_cast<std::size_t>(axis)] -
                    mean);
        re += v * std::cos(w * q * dt);
        im += v * std::sin(w * q * dt);
      }
      return re * re + im * im;
    };

    const double f_lo = 2.0 / duration, f_hi = 0.45 / dt;
    const int coarse = 600;
    double best_f = f_lo, best_p = -1.0;
    for (int q = 0; q <= coarse; ++q) {
      const double f = f_lo + (f_hi - f_lo) * q / coarse;
      const double p = power(f);
      if (p > best_p) {
        best_p = p;
        best_f = f;
      }
    }
    double df = (f_hi - f_lo) / coarse;
    for (int round = 0; round < 10; ++round) {
      double lf = best_f;
      for (int q = -4; q <= 4; ++q) {
        const double f = best_f + q * df / 4.0;
        if (f <= 0.0) continue;
        const double p = power(f);
        if (p > best_p) {
          best_p = p;
          lf = f;
        }
      }
      best_f = lf;
      df /= 4.0;
    }
    out.frequencies[axis] = 2.0 * pi * best_f;
  }
  return out;
}

std::vector<double> chain_equilibrium(int n, double omega_axial,
                                      const IonSpecies& species) {
  if (n < 1) throw ParameterError("chain_equilibrium needs n >= 1");
  if (omega_axial <= 0.0)
    throw ParameterError("chain_equilibrium needs omega > 0");

  const double ell = std::cbrt(coulomb_constant * species.charge_c() *
                               species.charge_c() /
                               (species.mass_kg() * omega_axial * omega_axial));
  if (n == 1) return {0.0};

  // Dimensionless positions u_i, ordered; residual
  // g_i = u_i - sum_{j<i} (u_i-u_j)^-2 + sum_{j>i} (u_i-u_j)^-2.
  VecX u(n);
  for (int i = 0; i < n; ++i) u[i] = 1.2 * (i - 0.5 * (n - 1));

  for (int iter = 0; iter < 200; ++iter) {
    VecX g(n);
    MatX jac = MatX::Identity(n, n);
    for (int i = 0; i < n; ++i) {
      g[i] = u[i];
      for (int j = 0; j < n; ++j) {
        if (j == i) continue;
        const double d = u[i] - u[j];
        const double s = d > 0.0 ? 1.0 : -1.0;
        g[i] -= s / (d * d);
        const double dd = 2.0 * s / (d * d * d);
        jac(i, i) += dd;
        jac(i, j) -= dd;
      }
    }
    if (g.norm() < 1e-13 * std::max(1.0, u.norm())) break;
    u -= jac.partialPivLu().solve(g);
  }

  std::vector<double> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = ell * u[i];
  std::sort(out.begin(), out.end());
  return out;
}

} // namespace iontrace::dynamics
