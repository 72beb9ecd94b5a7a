#pragma once

#include "sdlab/flow.hpp"

#include <functional>
#include <vector>

namespace sdlab {

struct CouplingPlan {
  Mat plan;
  Mat cost;
  double epsilon = 0.0;
  Vec a, b;
  int iterations = 0;
  bool converged = false;
  double residual = 0.0;        // Σ|row sums − a| at exit; columns are exact
  std::vector<double> residuals;  // one per iteration at the target ε
};

using CostFn = std::function<double(const Vec&, const Vec&)>;

Mat cost_matrix(const Points& x, const Points& y, const CostFn& c);
/// ‖x − y‖²
Mat sq_euclidean_cost(const Points& x, const Points& y);

/// Log-domain Sinkhorn. ε is approached from 10ε by halving; only the
/// iterations at the final ε enter `residuals`. Running out of max_iter returns
/// the last plan with converged = false.
CouplingPlan sinkhorn(const Mat& cost, const Vec& a, const Vec& b, double epsilon,
                      int max_iter = 2000, double tol = 1e-6);

struct PairedPoints {
  Points src;
  Points tgt;
};

/// (x, ddib_translate(x)) for each row.
PairedPoints coupling_from_bridge(const Denoiser& d, const Points& src_samples,
                                  const Condition& cond_src, const Condition& cond_tgt,
                                  const OdeSpec& spec, Exec exec = Exec::parallel);

/// Rows of `plan_targets` are the support of plan.b; plan.a is supported on
/// pairs.src. Mean of ‖pair target − barycentric projection of its source‖².
double coupling_discrepancy(const PairedPoints& pairs, const CouplingPlan& plan,
                            const Points& plan_targets);

/// Spearman rank correlation of two equally long sequences (average ranks for ties).
double rank_correlation(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace sdlab
