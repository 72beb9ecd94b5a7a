#include "sdlab/distill.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace sdlab {

const Vec* GradSample::term(std::string_view name) const {
  for (const auto& [k, v] : terms) {
    if (k == name) return &v;
  }
  return nullptr;
}

namespace {

GradSample noised(const Denoiser& d, const Vec& x, double t, const Vec& eps) {
  const auto& sched = d.schedule();
  if (x.size() != d.world().dim() || eps.size() != x.size()) throw Error("gradient query has wrong dimension");
  if (!(sched.sigma(t) > 0.0)) throw Error("gradients need t > 0 (sigma_t = 0)");
  GradSample g;
  g.t = t;
  g.eps_noise = eps;
  g.x_t = sched.alpha(t) * x + sched.sigma(t) * eps;
  return g;
}

}  // namespace

GradSample grad_sds(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                    const Condition& y_tgt, double s) {
  GradSample g = noised(d, x, t, eps);
  const Vec e_u = d.eps(d.world().unconditional(), g.x_t, t);
  const Vec e_c = d.eps(y_tgt, g.x_t, t);
  Vec delta = s * (e_c - e_u);
  g.grad_eps = e_u + delta - eps;
  g.terms = {{"uncond", e_u}, {"delta", std::move(delta)}, {"noise", -eps}};
  g.n_evals = 2;
  return g;
}

GradSample grad_sds_dominant(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                             const Condition& y_tgt, double s) {
  GradSample g = noised(d, x, t, eps);
  const Vec e_u = d.eps(d.world().unconditional(), g.x_t, t);
  const Vec e_c = d.eps(y_tgt, g.x_t, t);
  g.grad_eps = s * (e_c - e_u);
  g.terms = {{"delta", g.grad_eps}};
  g.n_evals = 2;
  return g;
}

GradSample grad_dds(const Denoiser& d, const Vec& x, double t, const Vec& eps, const Vec& x_ref,
                    const Condition& y_tgt, const Condition& y_src) {
  GradSample g = noised(d, x, t, eps);
  if (x_ref.size() != x.size()) throw Error("dds reference has wrong dimension");
  const auto& sched = d.schedule();
  const Vec ref_t = sched.alpha(t) * x_ref + sched.sigma(t) * eps;
  const Vec e_t = d.eps(y_tgt, g.x_t, t);
  const Vec e_r = d.eps(y_src, ref_t, t);
  g.grad_eps = e_t - e_r;
  g.terms = {{"tgt", e_t}, {"src_ref", -e_r}};
  g.n_evals = 2;
  return g;
}

double dds_source_mismatch(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                           const Vec& x_ref, const Condition& y_src) {
  const auto& sched = d.schedule();
  const Vec x_t = sched.alpha(t) * x + sched.sigma(t) * eps;
  const Vec ref_t = sched.alpha(t) * x_ref + sched.sigma(t) * eps;
  return (d.eps(y_src, ref_t, t) - d.eps(y_src, x_t, t)).norm();
}

GradSample grad_nfsd(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                     const Condition& y_tgt, const Condition& y_neg, double s, double t_gate) {
  GradSample g = noised(d, x, t, eps);
  const Vec e_u = d.eps(d.world().unconditional(), g.x_t, t);
  const Vec e_c = d.eps(y_tgt, g.x_t, t);
  Vec neg = Vec::Zero(x.size());
  g.n_evals = 2;
  if (t < t_gate) {
    neg = -d.eps(y_neg, g.x_t, t);
    g.n_evals = 3;
  }
  Vec delta = s * (e_c - e_u);
  g.grad_eps = (e_u + neg) + delta;
  g.terms = {{"uncond", e_u}, {"delta", std::move(delta)}, {"neg", std::move(neg)}};
  return g;
}

double csd_w2(double w2, long step, long anneal_steps) {
  if (anneal_steps <= 0) return w2;
  if (step >= anneal_steps) return 0.0;
  return w2 * (1.0 - static_cast<double>(step) / static_cast<double>(anneal_steps));
}

GradSample grad_csd(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                    const Condition& y_tgt, const Condition& y_src, double w1, double w2,
                    long step, long anneal_steps) {
  GradSample g = noised(d, x, t, eps);
  const Vec e_u = d.eps(d.world().unconditional(), g.x_t, t);
  const Vec e_c = d.eps(y_tgt, g.x_t, t);
  g.n_evals = 2;
  Vec delta = w1 * (e_c - e_u);
  const double w2_eff = csd_w2(w2, step, anneal_steps);
  Vec src = Vec::Zero(x.size());
  if (w2_eff != 0.0) {
    src = w2_eff * (e_u - d.eps(y_src, g.x_t, t));
    g.n_evals = 3;
    g.grad_eps = delta + src;
  } else {
    g.grad_eps = delta;
  }
  g.terms = {{"delta", std::move(delta)}, {"src_delta", std::move(src)}};
  return g;
}

GradSample grad_vsd(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                    const Condition& y_tgt, double s, const FittedSource& fitted) {
  GradSample g = noised(d, x, t, eps);
  const Vec e_u = d.eps(d.world().unconditional(), g.x_t, t);
  const Vec e_c = d.eps(y_tgt, g.x_t, t);
  const Vec e_l = source_eps(d.schedule(), fitted, g.x_t, t);
  Vec delta = s * (e_c - e_u);
  g.grad_eps = e_u + delta - e_l;
  g.terms = {{"uncond", e_u}, {"delta", std::move(delta)}, {"lora", -e_l}};
  g.n_evals = 2;
  return g;
}

GradSample grad_ours(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                     const Condition& y_tgt, const Condition& y_src, double w) {
  GradSample g = noised(d, x, t, eps);
  const Vec e_t = d.eps(y_tgt, g.x_t, t);
  const Vec e_s = d.eps(y_src, g.x_t, t);
  g.grad_eps = w * (e_t - e_s);
  g.terms = {{"tgt", w * e_t}, {"src", -w * e_s}};
  g.n_evals = 2;
  return g;
}

GradSample grad_bridge(const Denoiser& d, const Vec& x, double t, const Vec& eps,
                       const Condition& y_tgt, const Condition& y_src, double w,
                       const OdeSpec& ode) {
  GradSample g = noised(d, x, t, eps);
  const BridgePath path = bridge_endpoints(d, g.x_t, t, y_src, y_tgt, ode);
  Vec disp = w * (path.psi0_tgt - path.psi0_src);
  const auto& sched = d.schedule();
  g.grad_eps = -(sched.alpha(t) / sched.sigma(t)) * disp;
  g.terms = {{"displacement", std::move(disp)}};
  g.n_evals = path.n_evals;
  return g;
}

// ---------------------------------------------------------------------------

Renderer Renderer::identity(int d) {
  if (d < 1 || d > kMaxDim) throw Error("identity renderer dimension out of range");
  Renderer r;
  r.kind_ = Kind::identity;
  r.p_ = r.d_ = d;
  r.A_ = {Mat::Identity(d, d)};
  r.b_ = {Vec::Zero(d)};
  return r;
}

Renderer Renderer::multiview(std::vector<Mat> A, std::vector<Vec> b) {
  if (A.empty()) throw Error("multiview renderer needs at least one view");
  if (b.size() != A.size()) throw Error("multiview renderer needs one offset per view");
  const auto d = A.front().rows();
  const auto p = A.front().cols();
  if (d < 1 || d > kMaxDim || p < 1) throw Error("multiview view matrix has invalid shape");
  Mat stacked(d * static_cast<Eigen::Index>(A.size()), p);
  for (std::size_t i = 0; i < A.size(); ++i) {
    if (A[i].rows() != d || A[i].cols() != p) throw Error("multiview view matrices must share a shape");
    if (b[i].size() != d) throw Error("multiview offset has wrong dimension");
    if (!A[i].allFinite() || !b[i].allFinite()) throw Error("multiview renderer must be finite");
    stacked.middleRows(static_cast<Eigen::Index>(i) * d, d) = A[i];
  }
  if (Eigen::FullPivLU<Mat>(stacked).rank() != p) {
    throw Error("stacked view matrices must have full column rank");
  }
  Renderer r;
  r.kind_ = Kind::multiview;
  r.p_ = static_cast<int>(p);
  r.d_ = static_cast<int>(d);
  r.A_ = std::move(A);
  r.b_ = std::move(b);
  return r;
}

std::vector<Vec> Renderer::render(const Vec& theta) const {
  if (theta.size() != p_) throw Error("renderer parameter has wrong dimension");
  if (kind_ == Kind::identity) return {theta};
  std::vector<Vec> out;
  out.reserve(A_.size());
  for (std::size_t i = 0; i < A_.size(); ++i) out.push_back(A_[i] * theta + b_[i]);
  return out;
}

Vec Renderer::pullback(const std::vector<Vec>& grads) const {
  if (grads.size() != A_.size()) throw Error("pullback needs one gradient per view");
  if (kind_ == Kind::identity) return grads.front();
  Vec g = Vec::Zero(p_);
  for (std::size_t i = 0; i < A_.size(); ++i) g.noalias() += A_[i].transpose() * grads[i];
  return g;
}

Points Renderer::render_all(const Points& theta) const {
  if (theta.cols() != p_) throw Error("renderer parameter has wrong dimension");
  const auto v = static_cast<Eigen::Index>(views());
  Points out(theta.rows() * v, d_);
  for (Eigen::Index i = 0; i < theta.rows(); ++i) {
    const auto xs = render(theta.row(i).transpose());
    for (Eigen::Index k = 0; k < v; ++k) out.row(i * v + k) = xs[k].transpose();
  }
  return out;
}

ParticleSystem::ParticleSystem(Points theta, Renderer renderer, OptimizerConfig opt)
    : theta_(std::move(theta)), renderer_(std::move(renderer)), opt_(opt) {
  if (theta_.rows() < 1) throw Error("particle system needs at least one particle");
  if (theta_.cols() != renderer_.param_dim()) throw Error("particle parameters do not match the renderer");
  if (!theta_.allFinite()) throw Error("particle parameters must be finite");
  if (!(opt_.lr > 0.0) || !std::isfinite(opt_.lr)) throw Error("learning rate must be positive");
  m_ = Points::Zero(theta_.rows(), theta_.cols());
  v_ = Points::Zero(theta_.rows(), theta_.cols());
}

void ParticleSystem::set_theta(Points theta) {
  if (theta.rows() != theta_.rows() || theta.cols() != theta_.cols()) throw Error("theta shape mismatch");
  theta_ = std::move(theta);
}

void ParticleSystem::apply(const Points& g) {
  if (g.rows() != theta_.rows() || g.cols() != theta_.cols()) throw Error("gradient shape mismatch");
  ++step_;
  if (opt_.kind == OptimizerConfig::Kind::sgd) {
    theta_ -= opt_.lr * g;
    return;
  }
  m_ = opt_.beta1 * m_ + (1.0 - opt_.beta1) * g;
  v_ = opt_.beta2 * v_ + (1.0 - opt_.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(step_));
  theta_.array() -= opt_.lr * (m_.array() / c1) / ((v_.array() / c2).sqrt() + opt_.eps);
}

// ---------------------------------------------------------------------------

std::string method_name(const MethodParams& m) {
  static const char* names[] = {"sds", "sds_dominant", "dds", "nfsd", "csd", "vsd", "ours", "bridge"};
  return names[m.index()];
}

std::vector<std::string> term_names(const MethodParams& m) {
  struct V {
    std::vector<std::string> operator()(const SdsParams&) const { return {"uncond", "delta", "noise"}; }
    std::vector<std::string> operator()(const SdsDominantParams&) const { return {"delta"}; }
    std::vector<std::string> operator()(const DdsParams&) const { return {"tgt", "src_ref"}; }
    std::vector<std::string> operator()(const NfsdParams&) const { return {"uncond", "delta", "neg"}; }
    std::vector<std::string> operator()(const CsdParams&) const { return {"delta", "src_delta"}; }
    std::vector<std::string> operator()(const VsdParams&) const { return {"uncond", "delta", "lora"}; }
    std::vector<std::string> operator()(const OursParams&) const {
      return {"uncond", "delta", "noise", "tgt", "src"};
    }
    std::vector<std::string> operator()(const BridgeParams& b) const {
      if (b.warmup == BridgeParams::Warmup::ours) return {"tgt", "src", "displacement"};
      return {"uncond", "delta", "noise", "displacement"};
    }
  };
  return std::visit(V{}, m);
}

namespace {

enum class Active { sds, sds_dominant, dds, nfsd, csd, vsd, ours, bridge };

struct Plan {
  Active active;
  int stage = 1;
  double s = 0.0;        // guidance scale for sds-like stages
  double blend = 1.0;    // weight on the ours gradient while blending
};

const char* active_name(Active a) {
  static const char* names[] = {"sds", "sds_dominant", "dds", "nfsd", "csd", "vsd", "ours", "bridge"};
  return names[static_cast<int>(a)];
}

Plan plan_for(const MethodParams& m, long iter) {
  if (auto p = std::get_if<SdsParams>(&m)) return {Active::sds, 1, p->s};
  if (auto p = std::get_if<SdsDominantParams>(&m)) return {Active::sds_dominant, 1, p->s};
  if (std::holds_alternative<DdsParams>(m)) return {Active::dds, 1};
  if (auto p = std::get_if<NfsdParams>(&m)) return {Active::nfsd, 1, p->s};
  if (std::holds_alternative<CsdParams>(m)) return {Active::csd, 1};
  if (auto p = std::get_if<VsdParams>(&m)) return {Active::vsd, 1, p->s};
  if (auto p = std::get_if<OursParams>(&m)) {
    if (iter < p->stage1_steps) return {Active::sds, 1, p->stage1_s};
    const long into = iter - p->stage1_steps;
    if (into < p->blend_steps) {
      return {Active::ours, 2, p->stage1_s, static_cast<double>(into + 1) / static_cast<double>(p->blend_steps + 1)};
    }
    return {Active::ours, 2};
  }
  const auto& b = std::get<BridgeParams>(m);
  if (!b.from_scratch && iter < b.warmup_steps) {
    return b.warmup == BridgeParams::Warmup::sds ? Plan{Active::sds, 1, b.warmup_s} : Plan{Active::ours, 1};
  }
  return {Active::bridge, 2};
}

struct Resolved {
  Condition tgt;
  Condition src;
  Condition neg;
};

Resolved resolve(const World& w, const DistillSpec& spec) {
  Resolved r;
  r.tgt = w.parse_condition(spec.target);
  auto src_of = [&](const std::string& expr) {
    return expr.empty() ? w.corruptions_of(spec.target) : w.parse_condition(expr);
  };
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, DdsParams> || std::is_same_v<T, CsdParams>) r.src = w.parse_condition(p.y_src);
        if constexpr (std::is_same_v<T, OursParams> || std::is_same_v<T, BridgeParams>) r.src = src_of(p.y_src);
        if constexpr (std::is_same_v<T, NfsdParams>) r.neg = w.parse_condition(p.y_neg);
      },
      spec.method);
  return r;
}

void validate(const DistillSpec& spec, const ParticleSystem& sys, const World& w) {
  if (sys.renderer().out_dim() != w.dim()) throw Error("renderer output dimension does not match the world");
  const auto& ts = spec.t_sampling;
  if (!(ts.t_lo >= kTMin && ts.t_lo < ts.t_hi && ts.t_hi <= 1.0)) {
    throw Error("t sampling needs t_min <= t_lo < t_hi <= 1");
  }
  if (ts.kind == TSampling::Kind::annealed && !(ts.t_hi_final > ts.t_lo && ts.t_hi_final <= ts.t_hi)) {
    throw Error("annealed t sampling needs t_lo < t_hi_final <= t_hi");
  }
  if (auto b = std::get_if<BridgeParams>(&spec.method)) {
    if (!b->from_scratch && b->warmup_steps <= 0) {
      throw Error("bridge needs warmup_steps > 0 unless from_scratch is set");
    }
    if (b->ode.steps < 1) throw Error("bridge ODE needs steps >= 1");
  }
  if (auto v = std::get_if<VsdParams>(&spec.method)) {
    if (v->estimator.refit_every < 1) throw Error("estimator refit_every must be >= 1");
  }
  if (auto dd = std::get_if<DdsParams>(&spec.method)) {
    if (dd->x_ref && (dd->x_ref->rows() != static_cast<Eigen::Index>(sys.size()) * sys.renderer().views() ||
                      dd->x_ref->cols() != w.dim())) {
      throw Error("dds x_ref needs one row per particle and view");
    }
  }
}

struct ParticleResult {
  Vec grad_theta;
  double t_sum = 0.0;
  double norm_sum = 0.0;
  std::vector<double> term_sums;
  long evals = 0;
  long fit_ops = 0;
};

}  // namespace

RunRecord run(const Denoiser& d, ParticleSystem& system, const DistillSpec& spec, long iters,
              const RunCallbacks& cb) {
  const World& world = d.world();
  validate(spec, system, world);
  if (iters < 0) throw Error("iteration count must be >= 0");
  const Resolved cond = resolve(world, spec);
  const Condition uncond = world.unconditional();

  RunRecord rec;
  rec.term_names = term_names(spec.method);
  rec.metric_names = cb.metric_names;
  const auto n_terms = rec.term_names.size();
  const int n = system.size();
  const int views = system.renderer().views();
  const int dim = world.dim();
  const long log_every = std::max<long>(cb.log_every, 1);
  const long eval_every = std::max<long>(cb.eval_every, 1);

  std::vector<std::mt19937_64> rngs;
  rngs.reserve(n);
  for (int i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(i), 0x5d1abu};
    rngs.emplace_back(seq);
  }

  Points x_ref;
  if (auto dd = std::get_if<DdsParams>(&spec.method)) x_ref = dd->x_ref ? *dd->x_ref : system.rendered();

  std::optional<FittedSource> fitted;
  const VsdParams* vsd = std::get_if<VsdParams>(&spec.method);

  auto metrics_now = [&](long iter) {
    std::vector<double> m(rec.metric_names.size(), std::numeric_limits<double>::quiet_NaN());
    if (cb.evaluate && iter % eval_every == 0) {
      m = cb.evaluate(system.rendered());
      if (m.size() != rec.metric_names.size()) throw Error("metric callback returned the wrong column count");
    }
    return m;
  };

  std::vector<ParticleResult> results(n);

  for (long iter = 0; iter < iters; ++iter) {
    const Plan plan = plan_for(spec.method, iter);
    const auto& ts = spec.t_sampling;
    double t_hi = ts.t_hi;
    if (ts.kind == TSampling::Kind::annealed && iters > 1) {
      t_hi = ts.t_hi + (ts.t_hi_final - ts.t_hi) * static_cast<double>(iter) / static_cast<double>(iters - 1);
    }

    long refit_ops = 0;
    if (vsd) {
      if (!fitted || iter % vsd->estimator.refit_every == 0) {
        fitted = fit_source(system.rendered(), vsd->estimator, spec.seed ^ (0x9e3779b97f4a7c15ull * (iter + 1)));
        fitted->fit_iter = iter;
        refit_ops = fitted->fit_ops;
      } else {
        ++fitted->staleness;
      }
    }

    const Points& theta = system.theta();
    auto particle = [&](int i) {
      ParticleResult& r = results[i];
      r = ParticleResult{};
      r.term_sums.assign(n_terms, 0.0);
      std::uniform_real_distribution<double> time(ts.t_lo, t_hi);
      std::normal_distribution<double> normal;
      const auto xs = system.renderer().render(theta.row(i).transpose());
      std::vector<Vec> grads;
      grads.reserve(views);
      for (int v = 0; v < views; ++v) {
        const double t = time(rngs[i]);
        Vec eps(dim);
        for (int j = 0; j < dim; ++j) eps[j] = normal(rngs[i]);
        const Vec& x = xs[v];
        GradSample g;
        switch (plan.active) {
          case Active::sds: g = grad_sds(d, x, t, eps, cond.tgt, plan.s); break;
          case Active::sds_dominant: g = grad_sds_dominant(d, x, t, eps, cond.tgt, plan.s); break;
          case Active::dds:
            g = grad_dds(d, x, t, eps, x_ref.row(static_cast<Eigen::Index>(i) * views + v).transpose(), cond.tgt,
                         cond.src);
            break;
          case Active::nfsd: {
            const auto& p = std::get<NfsdParams>(spec.method);
            g = grad_nfsd(d, x, t, eps, cond.tgt, cond.neg, p.s, p.t_gate);
            break;
          }
          case Active::csd: {
            const auto& p = std::get<CsdParams>(spec.method);
            g = grad_csd(d, x, t, eps, cond.tgt, cond.src, p.w1, p.w2, iter, p.anneal_steps);
            break;
          }
          case Active::vsd:
            g = grad_vsd(d, x, t, eps, cond.tgt, plan.s, *fitted);
            r.fit_ops += static_cast<long>(fitted->model.size());
            break;
          case Active::ours: {
            const double w = std::holds_alternative<OursParams>(spec.method) ? std::get<OursParams>(spec.method).w
                                                                              : std::get<BridgeParams>(spec.method).w;
            g = grad_ours(d, x, t, eps, cond.tgt, cond.src, w);
            if (plan.blend < 1.0) {
              GradSample s1 = grad_sds(d, x, t, eps, cond.tgt, plan.s);
              g.grad_eps = plan.blend * g.grad_eps + (1.0 - plan.blend) * s1.grad_eps;
              g.n_evals += 1;  // ∅ is the only extra query; ε_tgt is shared
            }
            break;
          }
          case Active::bridge: {
            const auto& p = std::get<BridgeParams>(spec.method);
            g = grad_bridge(d, x, t, eps, cond.tgt, cond.src, p.w, p.ode);
            break;
          }
        }
        if (spec.w_t == TimeWeight::sigma_sq) {
          const double s = d.schedule().sigma(t);
          g.grad_eps *= s * s;
        }
        r.t_sum += t;
        r.norm_sum += g.grad_eps.norm();
        r.evals += g.n_evals;
        for (const auto& [name, vec] : g.terms) {
          for (std::size_t k = 0; k < n_terms; ++k) {
            if (rec.term_names[k] == name) r.term_sums[k] += vec.norm();
          }
        }
        grads.push_back(std::move(g.grad_eps));
      }
      r.grad_theta = system.renderer().pullback(grads);
    };

    std::string first_error;
    if (cb.exec == Exec::serial) {
      for (int i = 0; i < n; ++i) particle(i);
    } else {
#pragma omp parallel for schedule(dynamic, 1)
      for (int i = 0; i < n; ++i) {
        try {
          particle(i);
        } catch (const std::exception& e) {
#pragma omp critical(sdlab_run_error)
          if (first_error.empty()) first_error = e.what();
        }
      }
      if (!first_error.empty()) throw Error(first_error);
    }

    Points G(n, system.renderer().param_dim());
    RunRow row;
    row.iter = iter;
    row.method = active_name(plan.active);
    row.stage = plan.stage;
    row.terms.assign(n_terms, 0.0);
    long evals = 0, ops = refit_ops;
    bool finite = true;
    for (int i = 0; i < n; ++i) {
      const auto& r = results[i];
      G.row(i) = r.grad_theta.transpose();
      finite = finite && r.grad_theta.allFinite();
      row.t_mean += r.t_sum;
      row.grad_norm += r.norm_sum;
      for (std::size_t k = 0; k < n_terms; ++k) row.terms[k] += r.term_sums[k];
      evals += r.evals;
      ops += r.fit_ops;
    }
    const double denom = static_cast<double>(n) * views;
    row.t_mean /= denom;
    row.grad_norm /= denom;
    for (double& v : row.terms) v /= denom;
    rec.n_evals += evals;
    rec.fit_ops += ops;
    row.n_evals = rec.n_evals;
    row.fit_ops = rec.fit_ops;

    if (iter % log_every == 0 || iter % eval_every == 0) {
      row.metrics = metrics_now(iter);
      rec.rows.push_back(std::move(row));
    }

    const Points before = system.theta();
    if (finite) system.apply(G);
    if (!finite || !system.theta().allFinite()) {
      std::ostringstream msg;
      msg << "non-finite " << (finite ? "parameters" : "gradient") << " at iteration " << iter;
      system.set_theta(before);
      rec.aborted = true;
      rec.abort_reason = msg.str();
      rec.last_good = before;
      return rec;
    }
    if (cb.snapshot && cb.snapshot_every > 0 && (iter + 1) % cb.snapshot_every == 0) cb.snapshot(iter + 1, system.theta());
  }

  RunRow last;
  last.iter = iters;
  last.method = "final";
  last.stage = iters > 0 ? plan_for(spec.method, iters - 1).stage : 1;
  last.terms.assign(n_terms, 0.0);
  last.n_evals = rec.n_evals;
  last.fit_ops = rec.fit_ops;
  last.metrics.assign(rec.metric_names.size(), std::numeric_limits<double>::quiet_NaN());
  if (const auto& f = cb.evaluate_final ? cb.evaluate_final : cb.evaluate) {
    last.metrics = f(system.rendered());
    if (last.metrics.size() != rec.metric_names.size()) throw Error("metric callback returned the wrong column count");
  }
  rec.rows.push_back(std::move(last));
  rec.last_good = system.theta();
  return rec;
}

}  // namespace sdlab
