#pragma once

#include "sdlab/kernels.hpp"
#include "sdlab/oracle.hpp"

#include <optional>
#include <vector>

namespace sdlab {

enum class Solver { euler, heun };
enum class TimeGrid { uniform, quadratic };

struct Guidance {
  Condition uncond;
  double scale = 1.0;
};

struct OdeSpec {
  Solver solver = Solver::heun;
  int steps = 200;
  double t_start = 1.0;
  double t_end = kTMin;
  Condition condition;
  std::optional<Guidance> guidance;
  TimeGrid grid = TimeGrid::uniform;
  /// Treat the t_min state as a proxy for t = 0: generation ends with one
  /// Tweedie step, inversion starts by solving the inverse of that step.
  bool denoise_final = true;
};

struct FlowResult {
  Vec x;
  long n_evals = 0;           // score evaluations spent on ODE steps
  long n_endpoint_evals = 0;  // evaluations spent on the t_min <-> 0 map
};

struct BridgePath {
  Vec x_t;
  double t = 0.0;
  Vec psi0_src;
  Vec psi0_tgt;
  long n_evals = 0;
};

Solver solver_from_string(std::string_view s);
std::string_view to_string(Solver s);
TimeGrid grid_from_string(std::string_view s);
std::string_view to_string(TimeGrid g);

/// steps+1 times from `from` to `to`; the quadratic grid is dense near the
/// lower end of the interval.
std::vector<double> time_grid(double from, double to, int steps, TimeGrid grid);

/// Score, or the score implied by the guided ε when guidance is present.
Vec flow_score(const Denoiser& d, const Vec& x, double t, const Condition& cond,
               const std::optional<Guidance>& guidance);

/// −½β(t)x − ½β(t)·score
Vec pf_ode_drift(const Denoiser& d, const Vec& x, double t, const Condition& cond,
                 const std::optional<Guidance>& guidance);

Vec pf_ode_step(const Denoiser& d, const Vec& x, double t, double dt, const Condition& cond,
                const std::optional<Guidance>& guidance = {}, Solver solver = Solver::heun,
                long* n_evals = nullptr);

/// Integrates from spec.t_start to spec.t_end in either direction.
FlowResult integrate(const Denoiser& d, const Vec& x, const OdeSpec& spec);

/// spec.t_start must be above spec.t_end.
FlowResult generate(const Denoiser& d, const Vec& z, const OdeSpec& spec);
/// Forward direction; the defaults of `spec` are reinterpreted as t_min -> 1.
FlowResult invert(const Denoiser& d, const Vec& x0, OdeSpec spec);

FlowResult ddib_translate(const Denoiser& d, const Vec& x_src, const Condition& cond_src,
                          const Condition& cond_tgt, const OdeSpec& spec);

/// Both PF-ODE solutions from the shared (x_t, t) down to spec.t_end.
BridgePath bridge_endpoints(const Denoiser& d, const Vec& x_t, double t, const Condition& cond_src,
                            const Condition& cond_tgt, const OdeSpec& spec);

/// Row-wise batch versions; rows are independent.
Points generate_batch(const Denoiser& d, const Points& z, const OdeSpec& spec,
                      Exec exec = Exec::parallel);
Points ddib_translate_batch(const Denoiser& d, const Points& x, const Condition& cond_src,
                            const Condition& cond_tgt, const OdeSpec& spec,
                            Exec exec = Exec::parallel);

}  // namespace sdlab
