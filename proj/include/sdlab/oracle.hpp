#pragma once

#include "sdlab/world.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <shared_mutex>
#include <vector>

namespace sdlab {

struct ScoreQuery {
  Vec x;
  double t = 0.5;
  Condition condition;
};

/// ε = −σ_t · score and x0_hat = (x − σ_t ε) / α_t (Tweedie posterior mean).
struct EpsPrediction {
  Vec eps;
  Vec score;
  Vec x0_hat;
};

// Closed-form kernels on the noised mixture Σ wₖ N(α μₖ, α² Σₖ + σ² I).
// `out` must hold dim() doubles. Both are allocation-free after warm-up.
void noised_score_kernel(const GaussianMixture& m, double alpha, double sigma, const double* x,
                         double* out);
double noised_log_density_kernel(const GaussianMixture& m, double alpha, double sigma,
                                 const double* x);

Vec noised_score(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x, double t);
double noised_log_density(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x,
                          double t);
EpsPrediction noised_eps(const GaussianMixture& m, const NoiseSchedule& sched, const Vec& x,
                         double t);

/// Exact ε-prediction oracle over a World. Condition mixtures are flattened once
/// and cached; the cache is safe for concurrent readers.
class Denoiser {
 public:
  explicit Denoiser(World world);
  explicit Denoiser(std::shared_ptr<const World> world);

  const World& world() const { return *world_; }
  const NoiseSchedule& schedule() const { return world_->schedule(); }

  const GaussianMixture& mixture(const Condition& c) const;

  Vec score(const Condition& c, const Vec& x, double t) const;
  Vec eps(const Condition& c, const Vec& x, double t) const;
  EpsPrediction predict(const Condition& c, const Vec& x, double t) const;
  /// ε_∅ + s·(ε_cond − ε_∅)
  Vec cfg_eps(const Vec& x, double t, const Condition& cond, const Condition& uncond,
              double s) const;
  double log_density(const Condition& c, const Vec& x, double t) const;

 private:
  std::shared_ptr<const World> world_;
  mutable std::shared_mutex mutex_;
  mutable std::vector<std::pair<std::vector<double>, std::unique_ptr<GaussianMixture>>> cache_;
};

Vec score(const World& world, const ScoreQuery& q);
EpsPrediction eps_pred(const World& world, const ScoreQuery& q);
Vec cfg_eps(const World& world, const Vec& x, double t, const Condition& cond,
            const Condition& uncond, double s);

/// Candidate score model s(x, t) ≈ ∇ₓ log p_t(x).
using ScoreFn = std::function<Vec(const Vec& x, double t)>;

/// Per-sample ‖ε̂(α_t x + σ_t ε) − ε‖² with x ~ p(cond), t ~ U[t_min, 1], w(t) = 1.
std::vector<double> dsm_loss_samples(const World& world, const ScoreFn& candidate,
                                     const Condition& cond, int n, std::uint64_t seed,
                                     double t_min = kTMin);
double dsm_loss(const World& world, const ScoreFn& candidate, const Condition& cond, int n,
                std::uint64_t seed, double t_min = kTMin);

struct FdReport {
  int queries = 0;
  double max_rel_error = 0.0;  // ‖fd − score‖ / max(‖score‖, 1)
  double seconds = 0.0;
};

/// Random mixtures (d ≤ 4, up to 4 components), points and times; compares the
/// score with central differences of the log-density at step h.
FdReport finite_difference_check(int queries, std::uint64_t seed, double h = 1e-5);

/// A random well-conditioned mixture used by the self-checks.
GaussianMixture random_mixture(std::mt19937_64& rng, int dim, int components);

}  // namespace sdlab
