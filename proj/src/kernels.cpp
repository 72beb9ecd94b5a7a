#include "sdlab/kernels.hpp"

#include "sdlab/oracle.hpp"

#include <cmath>
#include <cstdlib>
#include <numbers>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sdlab {

void set_thread_count(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

int thread_count() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void configure_threads(int requested) {
  if (requested > 0) {
    set_thread_count(requested);
    return;
  }
  if (const char* env = std::getenv("SDLAB_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) set_thread_count(n);
  }
}

namespace reference {

namespace {

struct Terms {
  std::vector<double> logp;
  std::vector<Vec> grads;
};

Terms component_terms(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x,
                      double t) {
  const double a = sched.alpha(t);
  const double s = sched.sigma(t);
  const int d = m.dim();
  Terms out;
  for (const auto& c : m.components()) {
    Mat cov = a * a * c.cov + s * s * Mat::Identity(d, d);
    Eigen::LLT<Mat> llt(cov);
    const Vec diff = a * c.mean - x;
    const Vec sol = llt.solve(diff);
    const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    out.logp.push_back(std::log(c.weight) - 0.5 * diff.dot(sol) - 0.5 * logdet -
                       0.5 * d * std::log(2.0 * std::numbers::pi));
    out.grads.push_back(sol);
  }
  return out;
}

}  // namespace

Vec noised_score(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x, double t) {
  const Terms terms = component_terms(m, sched, x, t);
  const double best = *std::max_element(terms.logp.begin(), terms.logp.end());
  double total = 0.0;
  Vec acc = Vec::Zero(m.dim());
  for (std::size_t k = 0; k < terms.logp.size(); ++k) {
    const double w = std::exp(terms.logp[k] - best);
    total += w;
    acc += w * terms.grads[k];
  }
  return acc / total;
}

double noised_log_density(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x,
                          double t) {
  const Terms terms = component_terms(m, sched, x, t);
  const double best = *std::max_element(terms.logp.begin(), terms.logp.end());
  double total = 0.0;
  for (double lp : terms.logp) total += std::exp(lp - best);
  return best + std::log(total);
}

}  // namespace reference

namespace {

template <bool kEps>
void batch_eval(const GaussianMixture& m, const NoiseSchedule& sched, const Points& x,
                std::span<const double> t, Points& out, Exec exec) {
  if (x.cols() != m.dim()) throw Error("batch points have wrong dimension");
  if (static_cast<std::size_t>(x.rows()) != t.size()) throw Error("batch needs one time per point");
  out.resize(x.rows(), x.cols());
  const auto n = static_cast<std::ptrdiff_t>(x.rows());
  auto body = [&](std::ptrdiff_t i) {
    const double a = sched.alpha(t[i]);
    const double s = sched.sigma(t[i]);
    double* row = out.data() + i * out.cols();
    noised_score_kernel(m, a, s, x.data() + i * x.cols(), row);
    if constexpr (kEps) {
      for (std::ptrdiff_t j = 0; j < out.cols(); ++j) row[j] *= -s;
    }
  };
  if (exec == Exec::serial) {
    for (std::ptrdiff_t i = 0; i < n; ++i) body(i);
    return;
  }
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) body(i);
}

}  // namespace

void batch_eps(const GaussianMixture& m, const NoiseSchedule& sched, const Points& x,
               std::span<const double> t, Points& out, Exec exec) {
  for (double ti : t) {
    if (!(sched.sigma(ti) > 0.0)) throw Error("eps prediction is undefined at t = 0");
  }
  batch_eval<true>(m, sched, x, t, out, exec);
}

void batch_score(const GaussianMixture& m, const NoiseSchedule& sched, const Points& x,
                 std::span<const double> t, Points& out, Exec exec) {
  batch_eval<false>(m, sched, x, t, out, exec);
}

}  // namespace sdlab
