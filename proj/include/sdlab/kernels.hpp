#pragma once

#include "sdlab/world.hpp"

#include <span>

namespace sdlab {

/// Execution path for data-parallel loops. `serial` is the reference path the
/// tests compare against; `parallel` uses OpenMP when it is available.
enum class Exec { serial, parallel };

void set_thread_count(int n);
int thread_count();
/// `--threads` if positive, else SDLAB_THREADS, else leave the OpenMP default.
void configure_threads(int requested);

namespace reference {

/// Textbook evaluation: forms α²Σ+σ²I explicitly and factors it per component.
Vec noised_score(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x, double t);
double noised_log_density(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x,
                          double t);

}  // namespace reference

/// ε for each row of `x` at its own time t[i]; out is resized to match x.
void batch_eps(const GaussianMixture& m, const NoiseSchedule& sched, const Points& x,
               std::span<const double> t, Points& out, Exec exec = Exec::parallel);
void batch_score(const GaussianMixture& m, const NoiseSchedule& sched, const Points& x,
                 std::span<const double> t, Points& out, Exec exec = Exec::parallel);

}  // namespace sdlab
