#pragma once

#include "sdlab/estimator.hpp"
#include "sdlab/flow.hpp"
#include "sdlab/kernels.hpp"
#include "sdlab/oracle.hpp"

#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace sdlab {

/// x_t = α_t·x + σ_t·eps_noise. Optimizers descend `grad_eps`.
struct GradSample {
  double t = 0.0;
  Vec eps_noise;
  Vec x_t;
  Vec grad_eps;
  std::vector<std::pair<std::string, Vec>> terms;
  long n_evals = 0;

  /// nullptr when the term is absent.
  const Vec* term(std::string_view name) const;
};

GradSample grad_sds(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                    const Condition& y_tgt, double s);
GradSample grad_sds_dominant(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                             const Condition& y_tgt, double s);
GradSample grad_dds(const Denoiser& d, const Vec& x, double t, const Vec& eps, const Vec& x_ref,
                    const Condition& y_tgt, const Condition& y_src);
/// ‖ε_src(x_ref,t) − ε_src(x_t)‖ for the shared noise.
double dds_source_mismatch(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                           const Vec& x_ref, const Condition& y_src);
GradSample grad_nfsd(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                     const Condition& y_tgt, const Condition& y_neg, double s,
                     double t_gate = 0.2);
/// w₂ decays linearly to 0 over anneal_steps; anneal_steps = 0 keeps it constant.
GradSample grad_csd(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                    const Condition& y_tgt, const Condition& y_src, double w1, double w2,
                    long step, long anneal_steps);
double csd_w2(double w2, long step, long anneal_steps);
GradSample grad_vsd(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                    const Condition& y_tgt, double s, const FittedSource& fitted);
GradSample grad_ours(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                     const Condition& y_tgt, const Condition& y_src, double w);
/// terms["displacement"] = w·(ψ0_tgt − ψ0_src). grad_eps expresses it in ε
/// units, −(α_t/σ_t)·displacement, so it is on the same scale as grad_ours.
GradSample grad_bridge(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                       const Condition& y_tgt, const Condition& y_src, double w,
                       const OdeSpec& ode);

// ---------------------------------------------------------------------------

class Renderer {
 public:
  enum class Kind { identity, multiview };

  static Renderer identity(int d);
  /// x_i = A_i θ + b_i. The stacked [A_1; …; A_V] must have full column rank.
  static Renderer multiview(std::vector<Mat> A, std::vector<Vec> b);

  Kind kind() const { return kind_; }
  int param_dim() const { return p_; }
  int out_dim() const { return d_; }
  int views() const { return static_cast<int>(A_.size()); }
  const Mat& view_matrix(int i) const { return A_[i]; }
  const Vec& view_offset(int i) const { return b_[i]; }

  std::vector<Vec> render(const Vec& theta) const;
  /// Σ_i A_iᵀ g_i
  Vec pullback(const std::vector<Vec>& grads) const;
  /// One row per (particle, view), particle-major.
  Points render_all(const Points& theta) const;

 private:
  Kind kind_ = Kind::identity;
  int p_ = 0;
  int d_ = 0;
  std::vector<Mat> A_;
  std::vector<Vec> b_;
};

struct OptimizerConfig {
  enum class Kind { adam, sgd } kind = Kind::adam;
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

class ParticleSystem {
 public:
  ParticleSystem(Points theta, Renderer renderer, OptimizerConfig opt = {});

  const Points& theta() const { return theta_; }
  const Renderer& renderer() const { return renderer_; }
  const OptimizerConfig& optimizer() const { return opt_; }
  long step() const { return step_; }
  int size() const { return static_cast<int>(theta_.rows()); }

  Points rendered() const { return renderer_.render_all(theta_); }
  /// One optimizer update with one gradient row per particle.
  void apply(const Points& grad_theta);
  void set_theta(Points theta);

 private:
  Points theta_;
  Renderer renderer_;
  OptimizerConfig opt_;
  Points m_, v_;
  long step_ = 0;
};

// ---------------------------------------------------------------------------

struct SdsParams { double s = 100.0; };
struct SdsDominantParams { double s = 100.0; };
/// Reference images default to each particle's initial render.
struct DdsParams {
  std::string y_src = "uncond";
  std::optional<Points> x_ref;
};
struct NfsdParams {
  double s = 7.5;
  std::string y_neg = "negative";
  double t_gate = 0.2;
};
struct CsdParams {
  double w1 = 40.0;
  double w2 = 40.0;
  long anneal_steps = 500;
  std::string y_src = "negative";
};
struct VsdParams {
  double s = 7.5;
  EstimatorConfig estimator;
};
/// Empty y_src means corruptions(target).
struct OursParams {
  double w = 25.0;
  std::string y_src;
  long stage1_steps = 500;
  double stage1_s = 40.0;
  long blend_steps = 0;
};
struct BridgeParams {
  double w = 25.0;
  std::string y_src;
  OdeSpec ode = [] {
    OdeSpec o;
    o.steps = 16;
    o.grid = TimeGrid::quadratic;
    return o;
  }();
  enum class Warmup { sds, ours } warmup = Warmup::sds;
  long warmup_steps = 500;
  double warmup_s = 40.0;
  bool from_scratch = false;
};

using MethodParams = std::variant<SdsParams, SdsDominantParams, DdsParams, NfsdParams, CsdParams,
                                  VsdParams, OursParams, BridgeParams>;

std::string method_name(const MethodParams& m);

struct TSampling {
  enum class Kind { uniform, annealed } kind = Kind::uniform;
  double t_lo = 0.02;
  double t_hi = 0.98;
  double t_hi_final = 0.5;  // annealed only: t_hi shrinks linearly to this
};

enum class TimeWeight { unit, sigma_sq };

struct DistillSpec {
  std::string name;  // defaults to the method name
  MethodParams method = SdsParams{};
  std::string target;
  TSampling t_sampling;
  TimeWeight w_t = TimeWeight::unit;
  std::uint64_t seed = 0;
};

struct RunRow {
  long iter = 0;
  std::string method;
  int stage = 1;
  double t_mean = 0.0;
  double grad_norm = 0.0;
  std::vector<double> terms;    // mean norm per term name, 0 when absent
  std::vector<double> metrics;  // NaN on rows without an evaluation
  long n_evals = 0;             // cumulative oracle calls
  long fit_ops = 0;             // cumulative estimator work
};

struct RunRecord {
  std::vector<std::string> term_names;
  std::vector<std::string> metric_names;
  std::vector<RunRow> rows;
  long n_evals = 0;
  long fit_ops = 0;
  bool aborted = false;
  std::string abort_reason;
  Points last_good;  // theta before the failing step when aborted
};

struct RunCallbacks {
  std::vector<std::string> metric_names;
  /// Called with rendered points (one row per particle and view).
  std::function<std::vector<double>(const Points&)> evaluate;
  /// Used for the closing row when set; defaults to `evaluate`.
  std::function<std::vector<double>(const Points&)> evaluate_final;
  std::function<void(long iter, const Points& theta)> snapshot;
  long eval_every = 100;
  long log_every = 1;
  long snapshot_every = 0;
  Exec exec = Exec::parallel;
};

/// Term names a method's record uses, stage-1 terms included.
std::vector<std::string> term_names(const MethodParams& m);

RunRecord run(const Denoiser& d, ParticleSystem& system, const DistillSpec& spec, long iters,
              const RunCallbacks& callbacks = {});

}  // namespace sdlab
