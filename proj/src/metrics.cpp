#include "sdlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace sdlab {

Mat sqrtm_psd(const Mat& m) {
  Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (m + m.transpose()));
  const Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

double frechet_from_moments(const Vec& mu_a, const Mat& cov_a, const Vec& mu_b, const Mat& cov_b) {
  if (mu_a.size() != mu_b.size() || cov_a.rows() != mu_a.size() || cov_b.rows() != mu_b.size()) {
    throw Error("frechet operands differ in dimension");
  }
  const Mat ra = sqrtm_psd(cov_a);
  const Mat cross = sqrtm_psd(ra * cov_b * ra);
  const double v = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
  return std::max(v, 0.0);
}

namespace {

void population_moments(const Points& p, Vec& mean, Mat& cov) {
  if (p.rows() < 1) throw Error("metric needs at least one point");
  mean = p.colwise().mean().transpose();
  const Points c = p.rowwise() - mean.transpose();
  cov = (c.transpose() * c) / static_cast<double>(p.rows());
}

}  // namespace

double frechet_gaussian(const Points& a, const Points& b) {
  if (a.cols() != b.cols()) throw Error("frechet operands differ in dimension");
  Vec ma, mb;
  Mat ca, cb;
  population_moments(a, ma, ca);
  population_moments(b, mb, cb);
  return frechet_from_moments(ma, ca, mb, cb);
}

Mat slice_directions(int dim, int L, std::uint64_t seed) {
  if (L < 1) throw Error("sliced_w2 needs L >= 1");
  Mat dirs(L, dim);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal;
  Vec dir(dim);
  for (int l = 0; l < L; ++l) {
    if (dim == 1) {
      dir[0] = 1.0;
    } else {
      do {
        for (int k = 0; k < dim; ++k) dir[k] = normal(rng);
      } while (dir.norm() < 1e-12);
      dir.normalize();
    }
    dirs.row(l) = dir.transpose();
  }
  return dirs;
}

namespace {

double w2_sorted(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  // merge the two quantile step functions over u in [0, 1]
  double acc = 0.0, u = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double next_a = static_cast<double>(i + 1) / na;
    const double next_b = static_cast<double>(j + 1) / nb;
    const double next = std::min(next_a, next_b);
    const double diff = a[i] - b[j];
    acc += (next - u) * diff * diff;
    u = next;
    if (next_a <= next) ++i;
    if (next_b <= next) ++j;
  }
  return acc;
}

std::vector<double> sorted_projection(const Points& p, const Mat& dirs, int l) {
  const Vec proj = p * dirs.row(l).transpose();
  std::vector<double> v(proj.begin(), proj.end());
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace

double w2_squared_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw Error("w2 needs non-empty samples");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return w2_sorted(a, b);
}

double sliced_w2(const Points& a, const Points& b, int L, std::uint64_t seed) {
  if (a.cols() != b.cols()) throw Error("sliced_w2 operands differ in dimension");
  if (a.rows() < 1 || b.rows() < 1) throw Error("sliced_w2 needs non-empty samples");
  const Mat dirs = slice_directions(static_cast<int>(a.cols()), L, seed);
  double acc = 0.0;
  for (int l = 0; l < L; ++l) acc += w2_sorted(sorted_projection(a, dirs, l), sorted_projection(b, dirs, l));
  return acc / L;
}

SlicedReference::SlicedReference(const Points& ref, int L, std::uint64_t seed)
    : dirs_(slice_directions(static_cast<int>(ref.cols()), L, seed)) {
  if (ref.rows() < 1) throw Error("sliced reference needs points");
  for (int l = 0; l < L; ++l) sorted_.push_back(sorted_projection(ref, dirs_, l));
}

double SlicedReference::distance(const Points& a) const {
  if (a.cols() != dirs_.cols()) throw Error("sliced_w2 operands differ in dimension");
  if (a.rows() < 1) throw Error("sliced_w2 needs non-empty samples");
  double acc = 0.0;
  for (Eigen::Index l = 0; l < dirs_.rows(); ++l) {
    acc += w2_sorted(sorted_projection(a, dirs_, static_cast<int>(l)), sorted_[l]);
  }
  return acc / static_cast<double>(dirs_.rows());
}

namespace {

double mean_dist(const Points& x, const Points& y) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    for (Eigen::Index j = 0; j < y.rows(); ++j) acc += (x.row(i) - y.row(j)).norm();
  }
  return acc / (static_cast<double>(x.rows()) * static_cast<double>(y.rows()));
}

}  // namespace

EnergyReference::EnergyReference(Points ref) : ref_(std::move(ref)) {
  if (ref_.rows() < 1) throw Error("energy reference needs points");
  self_ = mean_dist(ref_, ref_);
}

double EnergyReference::distance(const Points& a) const {
  if (a.cols() != ref_.cols()) throw Error("energy distance operands differ in dimension");
  if (a.rows() < 1) throw Error("energy distance needs non-empty samples");
  return std::max(2.0 * mean_dist(a, ref_) - mean_dist(a, a) - self_, 0.0);
}

double energy_distance(const Points& a, const Points& b) {
  if (a.cols() != b.cols()) throw Error("energy distance operands differ in dimension");
  if (a.rows() < 1 || b.rows() < 1) throw Error("energy distance needs non-empty samples");
  const double v = 2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b);
  return std::max(v, 0.0);
}

double mean_loglik(const GaussianMixture& m, const Points& points) {
  if (points.cols() != m.dim()) throw Error("loglik points have wrong dimension");
  if (points.rows() < 1) throw Error("loglik needs at least one point");
  double acc = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) acc += m.log_density(points.row(i).transpose());
  return acc / static_cast<double>(points.rows());
}

double mean_loglik(const World& world, const Condition& cond, const Points& points) {
  return mean_loglik(world.mixture(cond), points);
}

MetricReport metric_report(const Points& a, const Points& b, int L, std::uint64_t seed) {
  MetricReport r;
  r.frechet = frechet_gaussian(a, b);
  r.sliced_w2 = sliced_w2(a, b, L, seed);
  r.energy_dist = energy_distance(a, b);
  r.n = a.rows();
  return r;
}

}  // namespace sdlab
