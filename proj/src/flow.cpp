#include "sdlab/flow.hpp"

#include <cmath>
#include <sstream>

namespace sdlab {

namespace {

constexpr double kTimeSlack = 1e-12;

void check_time(double t, const char* what) {
  if (!(t >= kTMin - kTimeSlack && t <= 1.0 + kTimeSlack)) {
    std::ostringstream msg;
    msg << what << " t = " << t << " is outside [" << kTMin << ", 1]";
    throw Error(msg.str());
  }
}

void check_finite(const Vec& x, double t, int step) {
  if (x.allFinite()) return;
  std::ostringstream msg;
  msg << "PF-ODE state became non-finite at step " << step << " (t = " << t << "): [";
  for (Eigen::Index i = 0; i < x.size(); ++i) msg << (i ? ", " : "") << x[i];
  msg << "]";
  throw Error(msg.str());
}

void check_spec(const OdeSpec& spec) {
  if (spec.steps < 1) throw Error("OdeSpec.steps must be >= 1");
  check_time(spec.t_start, "OdeSpec.t_start");
  check_time(spec.t_end, "OdeSpec.t_end");
}

bool at_floor(double t) { return std::abs(t - kTMin) <= kTimeSlack; }

// x0 = (x + σ²·score)/α at t_min.
Vec tweedie(const Denoiser& d, const Vec& x, const Condition& c,
            const std::optional<Guidance>& g, long& evals) {
  const auto& s = d.schedule();
  const double a = s.alpha(kTMin);
  const double v = s.sigma(kTMin) * s.sigma(kTMin);
  ++evals;
  return (x + v * flow_score(d, x, kTMin, c, g)) / a;
}

// Solves tweedie(x) = x0 by the fixed point x = α·x0 − σ²·score(x).
Vec untweedie(const Denoiser& d, const Vec& x0, const Condition& c,
              const std::optional<Guidance>& g, long& evals) {
  const auto& s = d.schedule();
  const double a = s.alpha(kTMin);
  const double v = s.sigma(kTMin) * s.sigma(kTMin);
  Vec x = a * x0;
  for (int it = 0; it < 2000; ++it) {
    ++evals;
    const Vec next = a * x0 - v * flow_score(d, x, kTMin, c, g);
    const double delta = (next - x).norm();
    x = next;
    if (delta <= 1e-14 * (1.0 + x.norm())) break;
  }
  return x;
}

}  // namespace

Solver solver_from_string(std::string_view s) {
  if (s == "euler") return Solver::euler;
  if (s == "heun") return Solver::heun;
  throw Error("unknown solver '" + std::string(s) + "'");
}

std::string_view to_string(Solver s) { return s == Solver::euler ? "euler" : "heun"; }

TimeGrid grid_from_string(std::string_view s) {
  if (s == "uniform") return TimeGrid::uniform;
  if (s == "quadratic") return TimeGrid::quadratic;
  throw Error("unknown time grid '" + std::string(s) + "'");
}

std::string_view to_string(TimeGrid g) { return g == TimeGrid::uniform ? "uniform" : "quadratic"; }

std::vector<double> time_grid(double from, double to, int steps, TimeGrid grid) {
  if (steps < 1) throw Error("time grid needs steps >= 1");
  std::vector<double> ts(steps + 1);
  const double lo = std::min(from, to);
  const double hi = std::max(from, to);
  for (int i = 0; i <= steps; ++i) {
    const double u = static_cast<double>(i) / steps;
    if (grid == TimeGrid::uniform) {
      ts[i] = from + (to - from) * u;
    } else {
      const double v = from > to ? 1.0 - u : u;
      ts[i] = lo + (hi - lo) * v * v;
    }
  }
  ts.front() = from;
  ts.back() = to;
  return ts;
}

Vec flow_score(const Denoiser& d, const Vec& x, double t, const Condition& cond,
               const std::optional<Guidance>& guidance) {
  if (!guidance) return d.score(cond, x, t);
  const double sigma = d.schedule().sigma(t);
  return -d.cfg_eps(x, t, cond, guidance->uncond, guidance->scale) / sigma;
}

Vec pf_ode_drift(const Denoiser& d, const Vec& x, double t, const Condition& cond,
                 const std::optional<Guidance>& guidance) {
  const double b = d.schedule().beta(t);
  return -0.5 * b * (x + flow_score(d, x, t, cond, guidance));
}

Vec pf_ode_step(const Denoiser& d, const Vec& x, double t, double dt, const Condition& cond,
                const std::optional<Guidance>& guidance, Solver solver, long* n_evals) {
  check_time(t, "step start");
  check_time(t + dt, "step end");
  if (dt == 0.0) return x;
  const Vec f0 = pf_ode_drift(d, x, t, cond, guidance);
  if (solver == Solver::euler) {
    if (n_evals) *n_evals += 1;
    return x + dt * f0;
  }
  const Vec pred = x + dt * f0;
  const Vec f1 = pf_ode_drift(d, pred, t + dt, cond, guidance);
  if (n_evals) *n_evals += 2;
  return x + 0.5 * dt * (f0 + f1);
}

FlowResult integrate(const Denoiser& d, const Vec& x, const OdeSpec& spec) {
  check_spec(spec);
  if (x.size() != d.world().dim()) throw Error("PF-ODE input has wrong dimension");
  FlowResult r;
  r.x = x;
  const bool forward = spec.t_end > spec.t_start;
  if (spec.denoise_final && forward && at_floor(spec.t_start)) {
    r.x = untweedie(d, r.x, spec.condition, spec.guidance, r.n_endpoint_evals);
  }
  const auto ts = time_grid(spec.t_start, spec.t_end, spec.steps, spec.grid);
  for (int i = 0; i < spec.steps; ++i) {
    r.x = pf_ode_step(d, r.x, ts[i], ts[i + 1] - ts[i], spec.condition, spec.guidance, spec.solver,
                      &r.n_evals);
    check_finite(r.x, ts[i + 1], i + 1);
  }
  if (spec.denoise_final && !forward && at_floor(spec.t_end)) {
    r.x = tweedie(d, r.x, spec.condition, spec.guidance, r.n_endpoint_evals);
    check_finite(r.x, 0.0, spec.steps);
  }
  return r;
}

FlowResult generate(const Denoiser& d, const Vec& z, const OdeSpec& spec) {
  if (!(spec.t_start > spec.t_end)) throw Error("generate integrates backward in time (t_start > t_end)");
  return integrate(d, z, spec);
}

FlowResult invert(const Denoiser& d, const Vec& x0, OdeSpec spec) {
  if (spec.t_start > spec.t_end) std::swap(spec.t_start, spec.t_end);
  if (spec.t_start == spec.t_end) throw Error("invert needs t_start < t_end");
  return integrate(d, x0, spec);
}

FlowResult ddib_translate(const Denoiser& d, const Vec& x_src, const Condition& cond_src,
                          const Condition& cond_tgt, const OdeSpec& spec) {
  OdeSpec down = spec;
  if (down.t_start < down.t_end) std::swap(down.t_start, down.t_end);
  OdeSpec up = down;
  up.condition = cond_src;
  down.condition = cond_tgt;
  const FlowResult latent = invert(d, x_src, up);
  FlowResult out = generate(d, latent.x, down);
  out.n_evals += latent.n_evals;
  out.n_endpoint_evals += latent.n_endpoint_evals;
  return out;
}

BridgePath bridge_endpoints(const Denoiser& d, const Vec& x_t, double t, const Condition& cond_src,
                            const Condition& cond_tgt, const OdeSpec& spec) {
  if (!(t > kTMin && t <= 1.0 + kTimeSlack)) throw Error("bridge time must lie in (t_min, 1]");
  OdeSpec s = spec;
  s.t_start = std::min(t, 1.0);
  s.t_end = kTMin;
  BridgePath p;
  p.x_t = x_t;
  p.t = t;
  s.condition = cond_src;
  const FlowResult src = integrate(d, x_t, s);
  p.psi0_src = src.x;
  if (cond_src == cond_tgt) {
    p.psi0_tgt = src.x;
    p.n_evals = src.n_evals + src.n_endpoint_evals;
    return p;
  }
  s.condition = cond_tgt;
  const FlowResult tgt = integrate(d, x_t, s);
  p.psi0_tgt = tgt.x;
  p.n_evals = src.n_evals + src.n_endpoint_evals + tgt.n_evals + tgt.n_endpoint_evals;
  return p;
}

namespace {

template <class F>
Points rowwise(const Points& in, Exec exec, F&& f) {
  Points out(in.rows(), in.cols());
  const auto n = static_cast<std::ptrdiff_t>(in.rows());
  if (exec == Exec::serial) {
    for (std::ptrdiff_t i = 0; i < n; ++i) out.row(i) = f(Vec(in.row(i).transpose())).transpose();
    return out;
  }
  // Exceptions must not escape the parallel region.
  std::string first_error;
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    try {
      out.row(i) = f(Vec(in.row(i).transpose())).transpose();
    } catch (const std::exception& e) {
#pragma omp critical(sdlab_flow_error)
      if (first_error.empty()) first_error = e.what();
    }
  }
  if (!first_error.empty()) throw Error(first_error);
  return out;
}

}  // namespace

Points generate_batch(const Denoiser& d, const Points& z, const OdeSpec& spec, Exec exec) {
  return rowwise(z, exec, [&](const Vec& x) { return generate(d, x, spec).x; });
}

Points ddib_translate_batch(const Denoiser& d, const Points& x, const Condition& cond_src,
                            const Condition& cond_tgt, const OdeSpec& spec, Exec exec) {
  return rowwise(x, exec, [&](const Vec& v) { return ddib_translate(d, v, cond_src, cond_tgt, spec).x; });
}

}  // namespace sdlab
