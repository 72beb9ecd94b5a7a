#pragma once

#include "sdlab/world.hpp"

#include <cstdint>

namespace sdlab {

struct MetricReport {
  double frechet = 0.0;
  double sliced_w2 = 0.0;
  double energy_dist = 0.0;
  double mean_loglik_target = 0.0;
  long n = 0;
};

/// ‖μa−μb‖² + tr(Σa + Σb − 2(Σa^½ Σb Σa^½)^½)
double frechet_from_moments(const Vec& mu_a, const Mat& cov_a, const Vec& mu_b, const Mat& cov_b);
/// Population moments of each set.
double frechet_gaussian(const Points& a, const Points& b);

/// Symmetric PSD square root; negative eigenvalues from round-off are clipped.
Mat sqrtm_psd(const Mat& m);

/// Mean over L seeded directions of the squared 1D W2 between projections.
/// Unequal set sizes use the exact quantile-function integral.
double sliced_w2(const Points& a, const Points& b, int L = 1024, std::uint64_t seed = 0);
/// Squared 1D W2 between empirical measures.
double w2_squared_1d(std::vector<double> a, std::vector<double> b);

/// The L seeded directions sliced_w2 uses, one per row.
Mat slice_directions(int dim, int L, std::uint64_t seed);

/// A fixed reference set with its projections sorted once; distance(a) equals
/// sliced_w2(a, ref, L, seed).
class SlicedReference {
 public:
  SlicedReference() = default;
  SlicedReference(const Points& ref, int L, std::uint64_t seed);
  double distance(const Points& a) const;

 private:
  Mat dirs_;
  std::vector<std::vector<double>> sorted_;
};

/// energy_distance(a, ref) with the reference self-term computed once.
class EnergyReference {
 public:
  EnergyReference() = default;
  explicit EnergyReference(Points ref);
  double distance(const Points& a) const;

 private:
  Points ref_;
  double self_ = 0.0;
};

/// 2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖ with V-statistics (zero for identical sets).
double energy_distance(const Points& a, const Points& b);

double mean_loglik(const World& world, const Condition& cond, const Points& points);
double mean_loglik(const GaussianMixture& m, const Points& points);

MetricReport metric_report(const Points& a, const Points& b, int L = 1024, std::uint64_t seed = 0);

}  // namespace sdlab
