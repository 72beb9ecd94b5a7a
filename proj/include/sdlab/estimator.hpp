#pragma once

#include "sdlab/world.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace sdlab {

enum class EstimatorKind { gaussian, gmm, kde };

EstimatorKind estimator_kind_from_string(std::string_view s);
std::string_view to_string(EstimatorKind k);

struct EstimatorConfig {
  EstimatorKind kind = EstimatorKind::gaussian;
  int K = 2;
  int iters = 50;
  double bandwidth = 0.0;  // kde; <= 0 selects Silverman's rule
  int refit_every = 1;
};

struct FittedSource {
  GaussianMixture model;
  long fit_iter = 0;   // optimizer iteration of the last refit
  long staleness = 0;  // iterations since that refit
  long fit_ops = 0;    // point-component evaluations spent fitting
  std::vector<double> loglik_trace;  // EM only
};

inline constexpr double kFitRidge = 1e-6;

/// Population mean/covariance plus kFitRidge·I.
FittedSource fit_gaussian(const Points& points);
/// EM from k-means++ seeding; the trace holds the mean log-likelihood before
/// each M-step and after the last.
FittedSource fit_gmm_em(const Points& points, int K, int iters, std::uint64_t seed);
FittedSource fit_kde(const Points& points, double h);

/// Silverman's rule of thumb, averaged over coordinates.
double silverman_bandwidth(const Points& points);

FittedSource fit_source(const Points& points, const EstimatorConfig& cfg, std::uint64_t seed);

/// ε of the noised fitted mixture.
Vec source_eps(const NoiseSchedule& sched, const FittedSource& fitted, const Vec& x, double t);

}  // namespace sdlab
