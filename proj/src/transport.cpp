#include "sdlab/transport.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace sdlab {

Mat cost_matrix(const Points& x, const Points& y, const CostFn& c) {
  if (x.cols() != y.cols()) throw Error("cost matrix operands differ in dimension");
  Mat out(x.rows(), y.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const Vec xi = x.row(i).transpose();
    for (Eigen::Index j = 0; j < y.rows(); ++j) out(i, j) = c(xi, y.row(j).transpose());
  }
  return out;
}

Mat sq_euclidean_cost(const Points& x, const Points& y) {
  return cost_matrix(x, y, [](const Vec& u, const Vec& v) { return (u - v).squaredNorm(); });
}

namespace {

void check_distribution(const Vec& p, const char* name) {
  if (p.size() < 1) throw Error(std::string(name) + " must be non-empty");
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0) || !std::isfinite(p[i])) throw Error(std::string(name) + " entries must be positive");
  }
  if (std::abs(p.sum() - 1.0) > 1e-9) throw Error(std::string(name) + " must sum to 1");
}

}  // namespace

CouplingPlan sinkhorn(const Mat& cost, const Vec& a, const Vec& b, double epsilon, int max_iter,
                      double tol) {
  if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw Error("sinkhorn needs epsilon > 0");
  if (max_iter < 1) throw Error("sinkhorn needs max_iter >= 1");
  check_distribution(a, "a");
  check_distribution(b, "b");
  const auto n = cost.rows();
  const auto m = cost.cols();
  if (a.size() != n || b.size() != m) throw Error("marginals do not match the cost matrix");
  if (!cost.allFinite()) throw Error("cost matrix must be finite");

  CouplingPlan out;
  out.cost = cost;
  out.epsilon = epsilon;
  out.a = a;
  out.b = b;
  const Vec log_a = a.array().log();
  const Vec log_b = b.array().log();
  Vec f = Vec::Zero(n);
  Vec g = Vec::Zero(m);

  std::vector<double> eps_stages;
  // anneal from the cost scale down to epsilon; each stage warm-starts the next
  const double range = cost.maxCoeff() - cost.minCoeff();
  for (double e = std::max(10.0 * epsilon, range); e > epsilon; e *= 0.5) eps_stages.push_back(e);
  eps_stages.push_back(epsilon);

  Vec lse_row(n);
  int used = 0;
  double residual = std::numeric_limits<double>::infinity();
  for (std::size_t stage = 0; stage < eps_stages.size(); ++stage) {
    const double eps = eps_stages[stage];
    const bool last = stage + 1 == eps_stages.size();
    const double stage_tol = last ? tol : std::max(tol, 1e-3);
    const int budget = last ? max_iter - used : std::min(200, max_iter - used);
    for (int it = 0; it < budget; ++it) {
      // f-update; its log-sum-exp also yields the row sums of the current plan
      residual = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) {
        double top = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < m; ++j) top = std::max(top, (g[j] - cost(i, j)) / eps);
        double acc = 0.0;
        for (Eigen::Index j = 0; j < m; ++j) acc += std::exp((g[j] - cost(i, j)) / eps - top);
        lse_row[i] = top + std::log(acc);
        if (used > 0) residual += std::abs(std::exp(f[i] / eps + lse_row[i]) - a[i]);
      }
      if (used > 0) {
        if (last) out.residuals.push_back(residual);
        if (residual < stage_tol) break;
      }
      f = eps * (log_a - lse_row);
      for (Eigen::Index j = 0; j < m; ++j) {
        double top = -std::numeric_limits<double>::infinity();
        for (Eigen::Index i = 0; i < n; ++i) top = std::max(top, (f[i] - cost(i, j)) / eps);
        double acc = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) acc += std::exp((f[i] - cost(i, j)) / eps - top);
        g[j] = eps * (log_b[j] - top - std::log(acc));
      }
      ++used;
    }
    if (used >= max_iter) break;
  }

  out.plan.resize(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < m; ++j) out.plan(i, j) = std::exp((f[i] + g[j] - cost(i, j)) / epsilon);
  }
  out.residual = (out.plan.rowwise().sum() - a).cwiseAbs().sum();
  out.iterations = used;
  out.converged = out.residual < tol;
  return out;
}

PairedPoints coupling_from_bridge(const Denoiser& d, const Points& src_samples,
                                  const Condition& cond_src, const Condition& cond_tgt,
                                  const OdeSpec& spec, Exec exec) {
  return {src_samples, ddib_translate_batch(d, src_samples, cond_src, cond_tgt, spec, exec)};
}

double coupling_discrepancy(const PairedPoints& pairs, const CouplingPlan& plan,
                            const Points& plan_targets) {
  if (pairs.src.rows() != plan.plan.rows()) throw Error("plan rows must match the bridge pairs");
  if (plan_targets.rows() != plan.plan.cols()) throw Error("plan columns must match the plan targets");
  if (pairs.tgt.rows() != pairs.src.rows()) throw Error("bridge pairs are ragged");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < plan.plan.rows(); ++i) {
    const double mass = plan.plan.row(i).sum();
    if (!(mass > 0.0)) throw Error("plan row has no mass");
    const Vec proj = (plan.plan.row(i) * plan_targets).transpose() / mass;
    acc += (pairs.tgt.row(i).transpose() - proj).squaredNorm();
  }
  return acc / static_cast<double>(plan.plan.rows());
}

namespace {

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto i, auto j) { return x[i] < x[j]; });
  std::vector<double> r(x.size());
  for (std::size_t k = 0; k < idx.size();) {
    std::size_t e = k;
    while (e + 1 < idx.size() && x[idx[e + 1]] == x[idx[k]]) ++e;
    for (std::size_t q = k; q <= e; ++q) r[idx[q]] = 0.5 * static_cast<double>(k + e);
    k = e + 1;
  }
  return r;
}

}  // namespace

double rank_correlation(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw Error("rank correlation needs two equal sequences of length >= 2");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / rx.size();
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / ry.size();
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace sdlab
