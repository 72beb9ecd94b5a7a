#pragma once

#include "sdlab/types.hpp"

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace sdlab {

/// One weighted Gaussian. The covariance eigendecomposition is computed at
/// construction so noised covariances α²Σ + σ²I can be inverted in closed form.
struct Component {
  double weight = 0.0;
  Vec mean;
  Mat cov;
  Mat basis;     // eigenvectors of cov, one per column
  Vec spectrum;  // eigenvalues of cov, ascending
};

class GaussianMixture {
 public:
  GaussianMixture() = default;

  /// Validates weights (non-negative, sum to one within 1e-6, renormalized
  /// exactly), dimensions and covariance symmetry / positive definiteness.
  GaussianMixture(std::vector<double> weights, std::vector<Vec> means, std::vector<Mat> covs);

  static GaussianMixture single(const Vec& mean, const Mat& cov);
  static GaussianMixture isotropic(std::vector<double> weights, std::vector<Vec> means,
                                   std::vector<double> variances);

  int dim() const { return dim_; }
  std::size_t size() const { return components_.size(); }
  const std::vector<Component>& components() const { return components_; }
  const Component& operator[](std::size_t k) const { return components_[k]; }

  Vec mean() const;
  /// Total (law of total variance) covariance.
  Mat covariance() const;

  double log_density(const Vec& x) const;

  /// Weighted union; weights of `parts` are scaled by `mix` and renormalized.
  static GaussianMixture combine(const std::vector<const GaussianMixture*>& parts,
                                 const std::vector<double>& mix);

 private:
  friend GaussianMixture with_components(std::vector<Component> comps, int dim);

  std::vector<Component> components_;
  int dim_ = 0;
};

/// Builds a mixture from already-decomposed components (no validation beyond sizes).
GaussianMixture with_components(std::vector<Component> comps, int dim);

enum class ScheduleKind { vp_linear, vp_cosine };

/// Continuous-time variance-preserving schedule.
class NoiseSchedule {
 public:
  NoiseSchedule() = default;
  NoiseSchedule(ScheduleKind kind, double beta_min, double beta_max);

  static NoiseSchedule linear(double beta_min = 0.1, double beta_max = 20.0) {
    return {ScheduleKind::vp_linear, beta_min, beta_max};
  }
  static NoiseSchedule cosine() { return {ScheduleKind::vp_cosine, 0.1, 20.0}; }

  ScheduleKind kind() const { return kind_; }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }

  /// ∫₀ᵗ β(s) ds
  double integrated_beta(double t) const;
  double beta(double t) const;
  double alpha_bar(double t) const;
  double alpha(double t) const;
  double sigma(double t) const;

 private:
  double cosine_phase(double t) const;

  ScheduleKind kind_ = ScheduleKind::vp_linear;
  double beta_min_ = 0.1;
  double beta_max_ = 20.0;
};

/// Text-prompt analog: a probability vector over a World's classes.
struct Condition {
  std::vector<double> class_weights;
  std::string label;

  bool operator==(const Condition& o) const { return class_weights == o.class_weights; }
};

enum class CorruptionKind { smooth, desaturate, oversaturate, noisy, shift };

struct CorruptionOp {
  CorruptionKind kind = CorruptionKind::smooth;
  double amount = 0.0;          // c for smooth/noisy, λ for (de|over)saturate
  Vec offset;                   // shift vector
  std::optional<Vec> center;    // saturation center; defaults to the mixture mean

  static CorruptionOp smooth(double c) { return {CorruptionKind::smooth, c, {}, {}}; }
  static CorruptionOp noisy(double c) { return {CorruptionKind::noisy, c, {}, {}}; }
  static CorruptionOp desaturate(double lambda, std::optional<Vec> center = {}) {
    return {CorruptionKind::desaturate, lambda, {}, std::move(center)};
  }
  static CorruptionOp oversaturate(double lambda, std::optional<Vec> center = {}) {
    return {CorruptionKind::oversaturate, lambda, {}, std::move(center)};
  }
  static CorruptionOp shift(Vec v) { return {CorruptionKind::shift, 0.0, std::move(v), {}}; }
};

std::string_view to_string(CorruptionKind k);
CorruptionKind corruption_kind_from_string(std::string_view s);

GaussianMixture apply_corruption(const GaussianMixture& m, const CorruptionOp& op);

/// Σ wₖ N(α_t μₖ, α_t² Σₖ + σ_t² I)
GaussianMixture noised_mixture(const GaussianMixture& m, double t, const NoiseSchedule& sched);

/// n i.i.d. draws, one per row.
Points sample(const GaussianMixture& m, int n, std::mt19937_64& rng);
Points sample(const GaussianMixture& m, int n, std::uint64_t seed);

struct WorldClass {
  std::string label;
  GaussianMixture mixture;
  bool content = true;       // false for corruption classes
  std::string base_class;    // corruption classes only
  std::vector<CorruptionOp> corruption;
};

/// Condition-labeled family of mixtures plus a noise schedule.
class World {
 public:
  World() = default;
  World(std::vector<WorldClass> classes, NoiseSchedule schedule,
        std::optional<std::vector<double>> prior = {});

  int dim() const { return dim_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const std::vector<WorldClass>& classes() const { return classes_; }
  std::size_t num_classes() const { return classes_.size(); }

  /// Throws on unknown labels.
  std::size_t index_of(std::string_view label) const;
  const WorldClass& at(std::string_view label) const { return classes_[index_of(label)]; }

  /// ∅: the configured prior (uniform over content classes by default).
  Condition unconditional() const;
  Condition condition(std::string_view label) const;
  Condition uniform_over(const std::vector<std::string>& labels, std::string label = {}) const;
  /// Uniform over every corruption class derived from `base`.
  Condition corruptions_of(std::string_view base) const;
  /// Uniform over all corruption classes (content-free negative).
  Condition negative() const;

  /// Parses "uncond", "negative", "corruptions(X)", "A|B|C" or a single label.
  Condition parse_condition(std::string_view expr) const;

  /// Class-weighted union of class mixtures at t = 0.
  GaussianMixture mixture(const Condition& c) const;

  std::vector<std::string> content_labels() const;
  std::vector<std::string> corruption_labels(std::string_view base = {}) const;

 private:
  void check(const Condition& c) const;

  std::vector<WorldClass> classes_;
  NoiseSchedule schedule_;
  std::vector<double> prior_;
  int dim_ = 0;
};

GaussianMixture mixture_for_condition(const World& world, const Condition& c, double t);

}  // namespace sdlab
