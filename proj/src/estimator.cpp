#include "sdlab/estimator.hpp"

#include "sdlab/oracle.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

namespace sdlab {

EstimatorKind estimator_kind_from_string(std::string_view s) {
  if (s == "gaussian") return EstimatorKind::gaussian;
  if (s == "gmm") return EstimatorKind::gmm;
  if (s == "kde") return EstimatorKind::kde;
  throw Error("unknown estimator kind '" + std::string(s) + "'");
}

std::string_view to_string(EstimatorKind k) {
  switch (k) {
    case EstimatorKind::gaussian: return "gaussian";
    case EstimatorKind::gmm: return "gmm";
    case EstimatorKind::kde: return "kde";
  }
  return "?";
}

namespace {

void moments(const Points& p, const Eigen::VectorXd& w, Vec& mean, Mat& cov) {
  const double total = w.sum();
  mean = (p.transpose() * w) / total;
  const Points centered = p.rowwise() - mean.transpose();
  cov = (centered.transpose() * w.asDiagonal() * centered) / total;
  cov = 0.5 * (cov + cov.transpose());
  cov.diagonal().array() += kFitRidge;
}

}  // namespace

FittedSource fit_gaussian(const Points& points) {
  if (points.rows() < 2) throw Error("fit_gaussian needs at least 2 points");
  Vec mean;
  Mat cov;
  moments(points, Vec::Ones(points.rows()), mean, cov);
  FittedSource f;
  f.model = GaussianMixture::single(mean, cov);
  f.fit_ops = points.rows();
  return f;
}

FittedSource fit_gmm_em(const Points& points, int K, int iters, std::uint64_t seed) {
  if (K < 1) throw Error("fit_gmm_em needs K >= 1");
  if (iters < 1) throw Error("fit_gmm_em needs iters >= 1");
  const auto n = points.rows();
  const auto d = points.cols();
  if (n < 2) throw Error("fit_gmm_em needs at least 2 points");
  std::mt19937_64 rng(seed);
  FittedSource f;

  // k-means++ seeding
  std::vector<Vec> centers;
  centers.push_back(points.row(std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng)).transpose());
  Eigen::VectorXd d2(n);
  while (static_cast<int>(centers.size()) < K) {
    for (Eigen::Index i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers) best = std::min(best, (points.row(i).transpose() - c).squaredNorm());
      d2[i] = best;
    }
    f.fit_ops += n * static_cast<long>(centers.size());
    if (!(d2.sum() > 0.0)) {
      centers.push_back(centers.back());
      continue;
    }
    std::discrete_distribution<Eigen::Index> pick(d2.data(), d2.data() + n);
    centers.push_back(points.row(pick(rng)).transpose());
  }

  Vec global_mean;
  Mat global_cov;
  moments(points, Vec::Ones(n), global_mean, global_cov);
  std::vector<double> w(K, 1.0 / K);
  std::vector<Vec> means = centers;
  std::vector<Mat> covs(K, global_cov);

  Mat resp(n, K);
  auto e_step = [&]() {
    GaussianMixture m(w, means, covs);
    double ll = 0.0;
    Vec lp(K);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec x = points.row(i).transpose();
      for (int k = 0; k < K; ++k) {
        const auto& c = m[k];
        const Vec z = c.basis.transpose() * (x - c.mean);
        lp[k] = std::log(c.weight) - 0.5 * (z.array().square() / c.spectrum.array()).sum() -
                0.5 * c.spectrum.array().log().sum() - 0.5 * d * std::log(2.0 * std::numbers::pi);
      }
      const double top = lp.maxCoeff();
      const double lse = top + std::log((lp.array() - top).exp().sum());
      resp.row(i) = (lp.array() - lse).exp().transpose();
      ll += lse;
    }
    f.fit_ops += n * K;
    return ll / static_cast<double>(n);
  };

  for (int it = 0; it < iters; ++it) {
    f.loglik_trace.push_back(e_step());
    for (int k = 0; k < K; ++k) {
      const Vec rk = resp.col(k);
      if (rk.sum() < 1e-8 * static_cast<double>(n)) {
        // empty cluster: restart it on the point worst explained by the others
        Eigen::Index far = 0;
        double worst = -1.0;
        for (Eigen::Index i = 0; i < n; ++i) {
          double best = std::numeric_limits<double>::infinity();
          for (int j = 0; j < K; ++j) {
            if (j != k) best = std::min(best, (points.row(i).transpose() - means[j]).squaredNorm());
          }
          if (best > worst) {
            worst = best;
            far = i;
          }
        }
        means[k] = points.row(far).transpose();
        covs[k] = global_cov;
        w[k] = 1.0 / static_cast<double>(n);
        continue;
      }
      moments(points, rk, means[k], covs[k]);
      w[k] = rk.sum() / static_cast<double>(n);
    }
    double total = 0.0;
    for (double x : w) total += x;
    for (double& x : w) x /= total;
  }
  f.loglik_trace.push_back(e_step());
  f.model = GaussianMixture(w, means, covs);
  return f;
}

FittedSource fit_kde(const Points& points, double h) {
  if (!(h > 0.0) || !std::isfinite(h)) throw Error("fit_kde needs a finite bandwidth h > 0");
  if (points.rows() < 1) throw Error("fit_kde needs at least one point");
  const auto n = points.rows();
  std::vector<double> w(n, 1.0 / static_cast<double>(n));
  std::vector<Vec> means;
  for (Eigen::Index i = 0; i < n; ++i) means.push_back(points.row(i).transpose());
  FittedSource f;
  f.model = GaussianMixture::isotropic(std::move(w), std::move(means), std::vector<double>(n, h * h));
  f.fit_ops = n;
  return f;
}

double silverman_bandwidth(const Points& points) {
  const auto n = points.rows();
  if (n < 2) throw Error("bandwidth selection needs at least 2 points");
  const auto d = static_cast<double>(points.cols());
  const Vec mean = points.colwise().mean().transpose();
  const Points c = points.rowwise() - mean.transpose();
  const double sd = std::sqrt((c.array().square().colwise().sum() / static_cast<double>(n)).mean());
  const double h = sd * std::pow(4.0 / ((d + 2.0) * static_cast<double>(n)), 1.0 / (d + 4.0));
  return h > 0.0 ? h : 1e-3;
}

FittedSource fit_source(const Points& points, const EstimatorConfig& cfg, std::uint64_t seed) {
  switch (cfg.kind) {
    case EstimatorKind::gaussian: return fit_gaussian(points);
    case EstimatorKind::gmm: return fit_gmm_em(points, cfg.K, cfg.iters, seed);
    case EstimatorKind::kde:
      return fit_kde(points, cfg.bandwidth > 0.0 ? cfg.bandwidth : silverman_bandwidth(points));
  }
  throw Error("unknown estimator kind");
}

Vec source_eps(const NoiseSchedule& sched, const FittedSource& fitted, const Vec& x, double t) {
  return noised_eps(fitted.model, sched, x, t).eps;
}

}  // namespace sdlab
