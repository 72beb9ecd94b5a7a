#include "sdlab/world.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace sdlab {

namespace {

constexpr double kEigenFloor = 1e-10;
constexpr double kCosineOffset = 0.008;
constexpr double kCosineAlphaEnd = 5e-3;

Component decompose(double weight, Vec mean, Mat cov) {
  const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
    throw Error("covariance is not symmetric");
  }
  cov = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> eig(cov);
  if (eig.info() != Eigen::Success) throw Error("covariance eigendecomposition failed");
  if (eig.eigenvalues().minCoeff() <= kEigenFloor) {
    throw Error("covariance minimum eigenvalue " + std::to_string(eig.eigenvalues().minCoeff()) +
                " is below the 1e-10 floor");
  }
  return {weight, std::move(mean), std::move(cov), eig.eigenvectors(), eig.eigenvalues()};
}

}  // namespace

GaussianMixture::GaussianMixture(std::vector<double> weights, std::vector<Vec> means,
                                 std::vector<Mat> covs) {
  if (weights.empty()) throw Error("mixture needs at least one component");
  if (weights.size() != means.size() || weights.size() != covs.size()) {
    throw Error("mixture weights/means/covs length mismatch");
  }
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw Error("mixture weights must be finite and >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw Error("mixture weights sum to " + std::to_string(total) + ", expected 1");
  }
  dim_ = static_cast<int>(means.front().size());
  if (dim_ < 1 || dim_ > kMaxDim) throw Error("mixture dimension must be in [1, 16]");
  components_.reserve(weights.size());
  for (std::size_t k = 0; k < weights.size(); ++k) {
    if (means[k].size() != dim_ || covs[k].rows() != dim_ || covs[k].cols() != dim_) {
      throw Error("component " + std::to_string(k) + " has inconsistent dimension");
    }
    if (!means[k].allFinite() || !covs[k].allFinite()) throw Error("non-finite component");
    components_.push_back(decompose(weights[k] / total, std::move(means[k]), std::move(covs[k])));
  }
}

GaussianMixture GaussianMixture::single(const Vec& mean, const Mat& cov) {
  return GaussianMixture({1.0}, {mean}, {cov});
}

GaussianMixture GaussianMixture::isotropic(std::vector<double> weights, std::vector<Vec> means,
                                           std::vector<double> variances) {
  std::vector<Mat> covs;
  covs.reserve(variances.size());
  for (std::size_t k = 0; k < variances.size(); ++k) {
    const auto d = means.at(k).size();
    covs.push_back(variances[k] * Mat::Identity(d, d));
  }
  return GaussianMixture(std::move(weights), std::move(means), std::move(covs));
}

GaussianMixture with_components(std::vector<Component> comps, int dim) {
  GaussianMixture m;
  m.components_ = std::move(comps);
  m.dim_ = dim;
  return m;
}

Vec GaussianMixture::mean() const {
  Vec mu = Vec::Zero(dim_);
  for (const auto& c : components_) mu += c.weight * c.mean;
  return mu;
}

Mat GaussianMixture::covariance() const {
  const Vec mu = mean();
  Mat cov = Mat::Zero(dim_, dim_);
  for (const auto& c : components_) {
    const Vec d = c.mean - mu;
    cov += c.weight * (c.cov + d * d.transpose());
  }
  return cov;
}

double GaussianMixture::log_density(const Vec& x) const {
  const double log2pi = std::log(2.0 * std::numbers::pi);
  std::vector<double> lp(components_.size());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < components_.size(); ++k) {
    const auto& c = components_[k];
    const Vec y = c.basis.transpose() * (x - c.mean);
    double quad = 0.0;
    double logdet = 0.0;
    for (int i = 0; i < dim_; ++i) {
      quad += y[i] * y[i] / c.spectrum[i];
      logdet += std::log(c.spectrum[i]);
    }
    lp[k] = std::log(c.weight) - 0.5 * (quad + logdet + dim_ * log2pi);
    best = std::max(best, lp[k]);
  }
  double acc = 0.0;
  for (double v : lp) acc += std::exp(v - best);
  return best + std::log(acc);
}

GaussianMixture GaussianMixture::combine(const std::vector<const GaussianMixture*>& parts,
                                         const std::vector<double>& mix) {
  if (parts.empty() || parts.size() != mix.size()) throw Error("combine: bad arguments");
  const double total = std::accumulate(mix.begin(), mix.end(), 0.0);
  if (!(total > 0.0)) throw Error("combine: mixing weights must have positive mass");
  std::vector<Component> comps;
  int dim = parts.front()->dim();
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (mix[i] <= 0.0) continue;
    if (parts[i]->dim() != dim) throw Error("combine: dimension mismatch");
    for (auto c : parts[i]->components()) {
      c.weight *= mix[i] / total;
      comps.push_back(std::move(c));
    }
  }
  return with_components(std::move(comps), dim);
}

// ---------------------------------------------------------------------------

NoiseSchedule::NoiseSchedule(ScheduleKind kind, double beta_min, double beta_max)
    : kind_(kind), beta_min_(beta_min), beta_max_(beta_max) {
  if (!(beta_min > 0.0) || !(beta_max >= beta_min)) {
    throw Error("noise schedule needs 0 < beta_min <= beta_max");
  }
}

double NoiseSchedule::cosine_phase(double t) const {
  using std::numbers::pi;
  constexpr double s = kCosineOffset;
  // Time is stretched so alpha(1) equals kCosineAlphaEnd instead of exactly zero,
  // which keeps beta(1) finite.
  static const double stretch = [] {
    const double phi0 = s / (1.0 + s) * pi / 2.0;
    const double phi1 = std::acos(kCosineAlphaEnd * std::cos(phi0));
    return phi1 * 2.0 / pi * (1.0 + s) - s;
  }();
  return (t * stretch + s) / (1.0 + s) * pi / 2.0;
}

double NoiseSchedule::integrated_beta(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("schedule time must lie in [0, 1]");
  if (kind_ == ScheduleKind::vp_linear) {
    return beta_min_ * t + 0.5 * (beta_max_ - beta_min_) * t * t;
  }
  return -2.0 * std::log(std::cos(cosine_phase(t)) / std::cos(cosine_phase(0.0)));
}

double NoiseSchedule::beta(double t) const {
  if (!(t >= 0.0 && t <= 1.0)) throw Error("schedule time must lie in [0, 1]");
  if (kind_ == ScheduleKind::vp_linear) return beta_min_ + (beta_max_ - beta_min_) * t;
  const double dphi = cosine_phase(1.0) - cosine_phase(0.0);
  return 2.0 * std::tan(cosine_phase(t)) * dphi;
}

double NoiseSchedule::alpha_bar(double t) const { return std::exp(-integrated_beta(t)); }

double NoiseSchedule::alpha(double t) const { return std::exp(-0.5 * integrated_beta(t)); }

double NoiseSchedule::sigma(double t) const { return std::sqrt(-std::expm1(-integrated_beta(t))); }

// ---------------------------------------------------------------------------

std::string_view to_string(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::smooth: return "smooth";
    case CorruptionKind::desaturate: return "desaturate";
    case CorruptionKind::oversaturate: return "oversaturate";
    case CorruptionKind::noisy: return "noisy";
    case CorruptionKind::shift: return "shift";
  }
  return "?";
}

CorruptionKind corruption_kind_from_string(std::string_view s) {
  for (auto k : {CorruptionKind::smooth, CorruptionKind::desaturate, CorruptionKind::oversaturate,
                 CorruptionKind::noisy, CorruptionKind::shift}) {
    if (to_string(k) == s) return k;
  }
  throw Error("unknown corruption kind '" + std::string(s) + "'");
}

GaussianMixture apply_corruption(const GaussianMixture& m, const CorruptionOp& op) {
  std::vector<Component> comps = m.components();
  switch (op.kind) {
    case CorruptionKind::smooth:
    case CorruptionKind::noisy: {
      if (!(op.amount >= 0.0)) throw Error("variance corruption needs c >= 0");
      for (auto& c : comps) {
        c.cov.diagonal().array() += op.amount;
        c.spectrum.array() += op.amount;
      }
      break;
    }
    case CorruptionKind::desaturate:
    case CorruptionKind::oversaturate: {
      if (!(op.amount > 0.0 && op.amount <= 2.0)) throw Error("saturation factor must lie in (0, 2]");
      const Vec center = op.center ? *op.center : m.mean();
      if (center.size() != m.dim()) throw Error("saturation center has wrong dimension");
      for (auto& c : comps) c.mean = op.amount * c.mean + (1.0 - op.amount) * center;
      break;
    }
    case CorruptionKind::shift: {
      if (op.offset.size() != m.dim()) throw Error("shift vector has wrong dimension");
      for (auto& c : comps) c.mean += op.offset;
      break;
    }
  }
  return with_components(std::move(comps), m.dim());
}

GaussianMixture noised_mixture(const GaussianMixture& m, double t, const NoiseSchedule& sched) {
  const double a = sched.alpha(t);
  const double s2 = sched.sigma(t) * sched.sigma(t);
  std::vector<Component> comps = m.components();
  for (auto& c : comps) {
    c.mean *= a;
    c.cov = a * a * c.cov;
    c.cov.diagonal().array() += s2;
    c.spectrum = (a * a * c.spectrum.array() + s2).matrix();
  }
  return with_components(std::move(comps), m.dim());
}

Points sample(const GaussianMixture& m, int n, std::mt19937_64& rng) {
  if (n < 1) throw Error("sample needs n >= 1");
  std::vector<double> w;
  for (const auto& c : m.components()) w.push_back(c.weight);
  std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
  std::normal_distribution<double> normal;
  Points out(n, m.dim());
  Vec z(m.dim());
  for (int i = 0; i < n; ++i) {
    const auto& c = m[pick(rng)];
    for (int j = 0; j < m.dim(); ++j) z[j] = normal(rng) * std::sqrt(c.spectrum[j]);
    out.row(i) = (c.mean + c.basis * z).transpose();
  }
  return out;
}

Points sample(const GaussianMixture& m, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample(m, n, rng);
}

// ---------------------------------------------------------------------------

World::World(std::vector<WorldClass> classes, NoiseSchedule schedule,
             std::optional<std::vector<double>> prior)
    : classes_(std::move(classes)), schedule_(schedule) {
  if (classes_.empty()) throw Error("world needs at least one class");
  dim_ = classes_.front().mixture.dim();
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i].mixture.dim() != dim_) throw Error("class '" + classes_[i].label + "' has mismatched dimension");
    for (std::size_t j = 0; j < i; ++j) {
      if (classes_[j].label == classes_[i].label) throw Error("duplicate class label '" + classes_[i].label + "'");
    }
  }
  if (prior) {
    if (prior->size() != classes_.size()) throw Error("prior length must match class count");
    prior_ = *prior;
  } else {
    prior_.assign(classes_.size(), 0.0);
    for (std::size_t i = 0; i < classes_.size(); ++i) prior_[i] = classes_[i].content ? 1.0 : 0.0;
  }
  const double total = std::accumulate(prior_.begin(), prior_.end(), 0.0);
  if (!(total > 0.0)) throw Error("unconditional prior has no mass (no content classes?)");
  for (double& p : prior_) {
    if (p < 0.0) throw Error("prior weights must be >= 0");
    p /= total;
  }
}

std::size_t World::index_of(std::string_view label) const {
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i].label == label) return i;
  }
  throw Error("unknown class label '" + std::string(label) + "'");
}

Condition World::unconditional() const { return {prior_, "uncond"}; }

Condition World::condition(std::string_view label) const {
  std::vector<double> w(classes_.size(), 0.0);
  w[index_of(label)] = 1.0;
  return {std::move(w), std::string(label)};
}

Condition World::uniform_over(const std::vector<std::string>& labels, std::string label) const {
  if (labels.empty()) throw Error("condition over an empty class list");
  std::vector<double> w(classes_.size(), 0.0);
  for (const auto& l : labels) w[index_of(l)] += 1.0 / static_cast<double>(labels.size());
  if (label.empty()) {
    for (const auto& l : labels) label += (label.empty() ? "" : "|") + l;
  }
  return {std::move(w), std::move(label)};
}

Condition World::corruptions_of(std::string_view base) const {
  auto labels = corruption_labels(base);
  if (labels.empty()) throw Error("class '" + std::string(base) + "' has no corruption classes");
  return uniform_over(labels, "corruptions(" + std::string(base) + ")");
}

Condition World::negative() const {
  auto labels = corruption_labels();
  if (labels.empty()) throw Error("world has no corruption classes");
  return uniform_over(labels, "negative");
}

Condition World::parse_condition(std::string_view expr) const {
  if (expr.empty() || expr == "uncond" || expr == "∅") return unconditional();
  if (expr == "negative") return negative();
  if (expr.starts_with("corruptions(") && expr.ends_with(")")) {
    return corruptions_of(expr.substr(12, expr.size() - 13));
  }
  if (expr.find('|') != std::string_view::npos) {
    std::vector<std::string> labels;
    std::size_t start = 0;
    while (start <= expr.size()) {
      const auto bar = expr.find('|', start);
      const auto end = bar == std::string_view::npos ? expr.size() : bar;
      labels.emplace_back(expr.substr(start, end - start));
      start = end + 1;
    }
    return uniform_over(labels, std::string(expr));
  }
  return condition(expr);
}

void World::check(const Condition& c) const {
  if (c.class_weights.size() != classes_.size()) {
    throw Error("condition '" + c.label + "' does not align with the world's classes");
  }
  double total = 0.0;
  for (double w : c.class_weights) {
    if (!(w >= 0.0)) throw Error("condition weights must be >= 0");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("condition weights must sum to 1");
}

GaussianMixture World::mixture(const Condition& c) const {
  check(c);
  std::vector<const GaussianMixture*> parts;
  std::vector<double> mix;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    parts.push_back(&classes_[i].mixture);
    mix.push_back(c.class_weights[i]);
  }
  return GaussianMixture::combine(parts, mix);
}

std::vector<std::string> World::content_labels() const {
  std::vector<std::string> out;
  for (const auto& c : classes_) {
    if (c.content) out.push_back(c.label);
  }
  return out;
}

std::vector<std::string> World::corruption_labels(std::string_view base) const {
  std::vector<std::string> out;
  for (const auto& c : classes_) {
    if (!c.content && (base.empty() || c.base_class == base)) out.push_back(c.label);
  }
  return out;
}

GaussianMixture mixture_for_condition(const World& world, const Condition& c, double t) {
  return noised_mixture(world.mixture(c), t, world.schedule());
}

}  // namespace sdlab
