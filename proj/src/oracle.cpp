#include "sdlab/oracle.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numbers>

namespace sdlab {

namespace {

struct Scratch {
  std::vector<double> logp;
  std::vector<double> z;
  std::vector<double> r;
};

Scratch& scratch(std::size_t k, int d) {
  thread_local Scratch s;
  if (s.logp.size() < k) s.logp.resize(k);
  if (s.z.size() < k * d) s.z.resize(k * d);
  if (s.r.size() < static_cast<std::size_t>(d)) s.r.resize(d);
  return s;
}

// Fills logp[k] and z[k*d..] = (α²Λ+σ²)⁻¹ Uᵀ(αμ − x) in the eigenbasis.
double component_terms(const GaussianMixture& m, double alpha, double sigma, const double* x,
                       Scratch& s, bool keep_z) {
  const int d = m.dim();
  const double a2 = alpha * alpha;
  const double s2 = sigma * sigma;
  const double half_log2pi = 0.5 * d * std::log(2.0 * std::numbers::pi);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < m.size(); ++k) {
    const Component& c = m[k];
    const double* mu = c.mean.data();
    for (int j = 0; j < d; ++j) s.r[j] = alpha * mu[j] - x[j];
    double quad = 0.0;
    double half_logdet = 0.0;
    double* z = s.z.data() + k * d;
    for (int i = 0; i < d; ++i) {
      const double* u = c.basis.data() + static_cast<std::ptrdiff_t>(i) * d;
      double y = 0.0;
      for (int j = 0; j < d; ++j) y += u[j] * s.r[j];
      const double var = a2 * c.spectrum[i] + s2;
      const double zi = y / var;
      quad += y * zi;
      half_logdet += 0.5 * std::log(var);
      if (keep_z) z[i] = zi;
    }
    const double lp = std::log(c.weight) - 0.5 * quad - half_logdet - half_log2pi;
    s.logp[k] = lp;
    best = std::max(best, lp);
  }
  return best;
}

// s = 1 returns the conditional prediction bit-exactly.
Vec guided(const Vec& e_u, const Vec& e_c, double s) {
  if (s == 1.0) return e_c;
  return e_u + s * (e_c - e_u);
}

}  // namespace

void noised_score_kernel(const GaussianMixture& m, double alpha, double sigma, const double* x,
                         double* out) {
  const int d = m.dim();
  Scratch& s = scratch(m.size(), d);
  const double best = component_terms(m, alpha, sigma, x, s, true);
  double total = 0.0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    s.logp[k] = std::exp(s.logp[k] - best);
    total += s.logp[k];
  }
  std::fill(out, out + d, 0.0);
  for (std::size_t k = 0; k < m.size(); ++k) {
    const double resp = s.logp[k] / total;
    if (resp == 0.0) continue;
    const Component& c = m[k];
    const double* z = s.z.data() + k * d;
    for (int i = 0; i < d; ++i) {
      const double* u = c.basis.data() + static_cast<std::ptrdiff_t>(i) * d;
      const double coeff = resp * z[i];
      for (int j = 0; j < d; ++j) out[j] += coeff * u[j];
    }
  }
}

double noised_log_density_kernel(const GaussianMixture& m, double alpha, double sigma,
                                 const double* x) {
  Scratch& s = scratch(m.size(), m.dim());
  const double best = component_terms(m, alpha, sigma, x, s, false);
  double total = 0.0;
  for (std::size_t k = 0; k < m.size(); ++k) total += std::exp(s.logp[k] - best);
  return best + std::log(total);
}

Vec noised_score(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x, double t) {
  if (x.size() != m.dim()) throw Error("score query has wrong dimension");
  Vec out(m.dim());
  noised_score_kernel(m, sched.alpha(t), sched.sigma(t), x.data(), out.data());
  return out;
}

double noised_log_density(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x,
                          double t) {
  if (x.size() != m.dim()) throw Error("density query has wrong dimension");
  return noised_log_density_kernel(m, sched.alpha(t), sched.sigma(t), x.data());
}

EpsPrediction noised_eps(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x,
                         double t) {
  const double sigma = sched.sigma(t);
  if (!(sigma > 0.0)) throw Error("eps prediction is undefined at t = 0 (sigma_t = 0)");
  const double alpha = sched.alpha(t);
  EpsPrediction p;
  p.score = noised_score(m, sched, x, t);
  p.eps = -sigma * p.score;
  p.x0_hat = (x - sigma * p.eps) / alpha;
  return p;
}

// ---------------------------------------------------------------------------

Denoiser::Denoiser(World world) : world_(std::make_shared<const World>(std::move(world))) {}

Denoiser::Denoiser(std::shared_ptr<const World> world) : world_(std::move(world)) {}

const GaussianMixture& Denoiser::mixture(const Condition& c) const {
  {
    std::shared_lock lock(mutex_);
    for (const auto& [key, mix] : cache_) {
      if (key == c.class_weights) return *mix;
    }
  }
  auto built = std::make_unique<GaussianMixture>(world_->mixture(c));
  std::unique_lock lock(mutex_);
  for (const auto& [key, mix] : cache_) {
    if (key == c.class_weights) return *mix;
  }
  cache_.emplace_back(c.class_weights, std::move(built));
  return *cache_.back().second;
}

Vec Denoiser::score(const Condition& c, const Vec& x, double t) const {
  return noised_score(mixture(c), schedule(), x, t);
}

Vec Denoiser::eps(const Condition& c, const Vec& x, double t) const {
  const double sigma = schedule().sigma(t);
  if (!(sigma > 0.0)) throw Error("eps prediction is undefined at t = 0 (sigma_t = 0)");
  return -sigma * score(c, x, t);
}

EpsPrediction Denoiser::predict(const Condition& c, const Vec& x, double t) const {
  return noised_eps(mixture(c), schedule(), x, t);
}

Vec Denoiser::cfg_eps(const Vec& x, double t, const Condition& cond, const Condition& uncond,
                      double s) const {
  const Vec e_u = eps(uncond, x, t);
  const Vec e_c = eps(cond, x, t);
  return guided(e_u, e_c, s);
}

double Denoiser::log_density(const Condition& c, const Vec& x, double t) const {
  return noised_log_density(mixture(c), schedule(), x, t);
}

Vec score(const World& world, const ScoreQuery& q) {
  return noised_score(world.mixture(q.condition), world.schedule(), q.x, q.t);
}

EpsPrediction eps_pred(const World& world, const ScoreQuery& q) {
  return noised_eps(world.mixture(q.condition), world.schedule(), q.x, q.t);
}

Vec cfg_eps(const World& world, const Vec& x, double t, const Condition& cond,
            const Condition& uncond, double s) {
  const NoiseSchedule& sched = world.schedule();
  const Vec e_u = noised_eps(world.mixture(uncond), sched, x, t).eps;
  const Vec e_c = noised_eps(world.mixture(cond), sched, x, t).eps;
  return guided(e_u, e_c, s);
}

std::vector<double> dsm_loss_samples(const World& world, const ScoreFn& candidate,
                                     const Condition& cond, int n, std::uint64_t seed,
                                     double t_min) {
  if (n < 1) throw Error("dsm_loss needs n >= 1");
  std::mt19937_64 rng(seed);
  const Points x0 = sample(world.mixture(cond), n, rng);
  std::uniform_real_distribution<double> time(t_min, 1.0);
  std::normal_distribution<double> normal;
  const NoiseSchedule& sched = world.schedule();
  std::vector<double> out(n);
  Vec noise(world.dim());
  for (int i = 0; i < n; ++i) {
    const double t = time(rng);
    for (int j = 0; j < world.dim(); ++j) noise[j] = normal(rng);
    const double a = sched.alpha(t);
    const double s = sched.sigma(t);
    const Vec xt = a * x0.row(i).transpose() + s * noise;
    const Vec eps_hat = -s * candidate(xt, t);
    out[i] = (eps_hat - noise).squaredNorm();
  }
  return out;
}

double dsm_loss(const World& world, const ScoreFn& candidate, const Condition& cond, int n,
                std::uint64_t seed, double t_min) {
  const auto v = dsm_loss_samples(world, candidate, cond, n, seed, t_min);
  double acc = 0.0;
  for (double x : v) acc += x;
  return acc / static_cast<double>(v.size());
}

GaussianMixture random_mixture(std::mt19937_64& rng, int dim, int components) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal;
  std::vector<double> w(components);
  std::vector<Vec> means(components);
  std::vector<Mat> covs(components);
  double total = 0.0;
  for (int k = 0; k < components; ++k) {
    w[k] = 0.2 + unit(rng);
    total += w[k];
    means[k] = Vec(dim);
    for (int j = 0; j < dim; ++j) means[k][j] = 2.0 * normal(rng);
    Mat q = Mat(dim, dim);
    for (int r = 0; r < dim; ++r) {
      for (int c = 0; c < dim; ++c) q(r, c) = normal(rng);
    }
    const Mat basis = Eigen::HouseholderQR<Mat>(q).householderQ();
    Vec spec(dim);
    for (int j = 0; j < dim; ++j) spec[j] = 0.05 + 1.5 * unit(rng);
    covs[k] = basis * spec.asDiagonal() * basis.transpose();
    covs[k] = 0.5 * (covs[k] + covs[k].transpose());
  }
  for (double& x : w) x /= total;
  return GaussianMixture(std::move(w), std::move(means), std::move(covs));
}

FdReport finite_difference_check(int queries, std::uint64_t seed, double h) {
  if (queries < 1) throw Error("finite-difference check needs at least one query");
  const auto start = std::chrono::steady_clock::now();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> dims(1, 4), comps(1, 4);
  std::uniform_real_distribution<double> time(0.05, 1.0);
  std::normal_distribution<double> normal;
  const NoiseSchedule sched = NoiseSchedule::linear();
  FdReport rep;
  rep.queries = queries;
  for (int q = 0; q < queries; ++q) {
    const int d = dims(rng);
    const GaussianMixture m = random_mixture(rng, d, comps(rng));
    const double t = time(rng);
    Vec x(d);
    for (int j = 0; j < d; ++j) x[j] = sched.alpha(t) * 2.0 * normal(rng) + normal(rng);
    const Vec s = noised_score(m, sched, x, t);
    Vec fd(d);
    for (int j = 0; j < d; ++j) {
      Vec xp = x, xm = x;
      xp[j] += h;
      xm[j] -= h;
      fd[j] = (noised_log_density(m, sched, xp, t) - noised_log_density(m, sched, xm, t)) / (2.0 * h);
    }
    rep.max_rel_error = std::max(rep.max_rel_error, (fd - s).norm() / std::max(s.norm(), 1.0));
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rep;
}

}  // namespace sdlab
