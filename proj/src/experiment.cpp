#include "sdlab/experiment.hpp"

#include "json_util.hpp"
#include "sdlab/world_io.hpp"

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace sdlab {

using nlohmann::json;
using jsonu::Reader;

namespace {

constexpr const char* kWhat = "experiment config";

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t scenario_seed(std::uint64_t seed, int k) { return splitmix(splitmix(seed) + static_cast<std::uint64_t>(k)); }

std::uint64_t label_seed(std::uint64_t seed, const std::string& label) {
  std::uint64_t h = splitmix(seed ^ 0x7a3ull);
  for (unsigned char c : label) h = splitmix(h ^ c);
  return h;
}

json vec_json(const Vec& v) { return std::vector<double>(v.begin(), v.end()); }

json mat_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

json points_json(const Points& p) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < p.cols(); ++c) row.push_back(p(r, c));
    rows.push_back(row);
  }
  return rows;
}

Mat read_matrix(const json& j, const std::string& path) {
  if (!j.is_array() || j.empty() || !j[0].is_array() || j[0].empty()) jsonu::fail(kWhat, path, "expected a non-empty matrix");
  const auto rows = j.size();
  const auto cols = j[0].size();
  Mat m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    if (!j[r].is_array() || j[r].size() != cols) jsonu::fail(kWhat, path + "/" + std::to_string(r), "ragged matrix row");
    for (std::size_t c = 0; c < cols; ++c) {
      if (!j[r][c].is_number()) jsonu::fail(kWhat, path + "/" + std::to_string(r) + "/" + std::to_string(c), "expected a number");
      m(r, c) = j[r][c].get<double>();
    }
  }
  return m;
}

Vec read_vector(const json& j, const std::string& path) {
  if (!j.is_array()) jsonu::fail(kWhat, path, "expected an array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) jsonu::fail(kWhat, path + "/" + std::to_string(i), "expected a number");
    v[i] = j[i].get<double>();
  }
  return v;
}

TSampling parse_t_sampling(const Reader& r) {
  r.only({"kind", "t_lo", "t_hi", "t_hi_final"});
  TSampling t;
  const auto kind = r.string("kind", "uniform");
  if (kind == "uniform") t.kind = TSampling::Kind::uniform;
  else if (kind == "annealed") t.kind = TSampling::Kind::annealed;
  else r.error("kind", "expected uniform or annealed");
  t.t_lo = r.number("t_lo", t.t_lo);
  t.t_hi = r.number("t_hi", t.t_hi);
  t.t_hi_final = r.number("t_hi_final", t.t_hi_final);
  if (!(t.t_lo >= kTMin)) r.error("t_lo", "must be >= t_min = 1e-3");
  if (!(t.t_hi > t.t_lo && t.t_hi <= 1.0)) r.error("t_hi", "must lie in (t_lo, 1]");
  if (t.kind == TSampling::Kind::annealed && !(t.t_hi_final > t.t_lo && t.t_hi_final <= t.t_hi)) {
    r.error("t_hi_final", "must lie in (t_lo, t_hi]");
  }
  return t;
}

OdeSpec parse_ode(const Reader& r) {
  r.only({"solver", "steps", "grid", "denoise_final"});
  OdeSpec o = BridgeParams{}.ode;
  try {
    o.solver = solver_from_string(r.string("solver", std::string(to_string(o.solver))));
  } catch (const Error& e) {
    r.error("solver", e.what());
  }
  try {
    o.grid = grid_from_string(r.string("grid", std::string(to_string(o.grid))));
  } catch (const Error& e) {
    r.error("grid", e.what());
  }
  o.steps = static_cast<int>(r.integer("steps", o.steps));
  if (o.steps < 1) r.error("steps", "must be >= 1");
  o.denoise_final = r.boolean("denoise_final", o.denoise_final);
  return o;
}

EstimatorConfig parse_estimator(const Reader& r) {
  r.only({"kind", "K", "iters", "bandwidth", "refit_every"});
  EstimatorConfig e;
  try {
    e.kind = estimator_kind_from_string(r.string("kind", "gaussian"));
  } catch (const Error& err) {
    r.error("kind", err.what());
  }
  e.K = static_cast<int>(r.integer("K", e.K));
  e.iters = static_cast<int>(r.integer("iters", e.iters));
  e.bandwidth = r.number("bandwidth", e.bandwidth);
  e.refit_every = static_cast<int>(r.integer("refit_every", e.refit_every));
  if (e.K < 1) r.error("K", "must be >= 1");
  if (e.iters < 1) r.error("iters", "must be >= 1");
  if (e.refit_every < 1) r.error("refit_every", "must be >= 1");
  return e;
}

void check_positive(const Reader& r, const char* key, double v) {
  if (!(v > 0.0)) r.error(key, "must be > 0");
}

}  // namespace

DistillSpec parse_method(const json& j, const std::string& path) {
  Reader r(j, path, kWhat);
  DistillSpec spec;
  const auto m = r.string("method");
  if (r.has("t_sampling")) spec.t_sampling = parse_t_sampling(r.object("t_sampling"));
  const auto wt = r.string("w_t", "unit");
  if (wt == "unit") spec.w_t = TimeWeight::unit;
  else if (wt == "sigma_sq") spec.w_t = TimeWeight::sigma_sq;
  else r.error("w_t", "expected unit or sigma_sq");

  if (m == "sds") {
    r.only({"method", "name", "t_sampling", "w_t", "s"});
    spec.method = SdsParams{r.number("s", 100.0)};
  } else if (m == "sds_dominant") {
    r.only({"method", "name", "t_sampling", "w_t", "s"});
    spec.method = SdsDominantParams{r.number("s", 100.0)};
  } else if (m == "dds") {
    r.only({"method", "name", "t_sampling", "w_t", "y_src"});
    DdsParams p;
    p.y_src = r.string("y_src", p.y_src);
    spec.method = p;
  } else if (m == "nfsd") {
    r.only({"method", "name", "t_sampling", "w_t", "s", "y_neg", "t_gate"});
    NfsdParams p;
    p.s = r.number("s", p.s);
    p.y_neg = r.string("y_neg", p.y_neg);
    p.t_gate = r.number("t_gate", p.t_gate);
    spec.method = p;
  } else if (m == "csd") {
    r.only({"method", "name", "t_sampling", "w_t", "w1", "w2", "anneal_steps", "y_src"});
    CsdParams p;
    p.w1 = r.number("w1", p.w1);
    p.w2 = r.number("w2", p.w2);
    p.anneal_steps = r.integer("anneal_steps", p.anneal_steps);
    if (p.anneal_steps < 0) r.error("anneal_steps", "must be >= 0");
    p.y_src = r.string("y_src", p.y_src);
    spec.method = p;
  } else if (m == "vsd") {
    r.only({"method", "name", "t_sampling", "w_t", "s", "estimator"});
    VsdParams p;
    p.s = r.number("s", p.s);
    if (r.has("estimator")) p.estimator = parse_estimator(r.object("estimator"));
    spec.method = p;
  } else if (m == "ours") {
    r.only({"method", "name", "t_sampling", "w_t", "w", "y_src", "stage1_steps", "stage1_s", "blend_steps"});
    OursParams p;
    p.w = r.number("w", p.w);
    p.y_src = r.string("y_src", p.y_src);
    p.stage1_steps = r.integer("stage1_steps", p.stage1_steps);
    p.stage1_s = r.number("stage1_s", p.stage1_s);
    p.blend_steps = r.integer("blend_steps", p.blend_steps);
    if (p.stage1_steps < 0) r.error("stage1_steps", "must be >= 0");
    if (p.blend_steps < 0) r.error("blend_steps", "must be >= 0");
    spec.method = p;
  } else if (m == "bridge") {
    r.only({"method", "name", "t_sampling", "w_t", "w", "y_src", "ode", "warmup", "warmup_steps", "warmup_s",
            "from_scratch"});
    BridgeParams p;
    p.w = r.number("w", p.w);
    p.y_src = r.string("y_src", p.y_src);
    if (r.has("ode")) p.ode = parse_ode(r.object("ode"));
    const auto warm = r.string("warmup", "sds");
    if (warm == "sds") p.warmup = BridgeParams::Warmup::sds;
    else if (warm == "ours") p.warmup = BridgeParams::Warmup::ours;
    else r.error("warmup", "expected sds or ours");
    p.warmup_steps = r.integer("warmup_steps", p.warmup_steps);
    p.warmup_s = r.number("warmup_s", p.warmup_s);
    p.from_scratch = r.boolean("from_scratch", p.from_scratch);
    if (!p.from_scratch && p.warmup_steps <= 0) r.error("warmup_steps", "must be > 0 unless from_scratch is true");
    spec.method = p;
  } else {
    r.error("method", "unknown method '" + m + "'");
  }
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (requires { p.s; }) {
          if (!std::isfinite(p.s)) r.error("s", "must be finite");
        }
        if constexpr (std::is_same_v<T, OursParams> || std::is_same_v<T, BridgeParams>) check_positive(r, "w", p.w);
      },
      spec.method);
  spec.name = r.string("name", method_name(spec.method));
  if (spec.name.empty() || spec.name.find_first_of("/\\ ") != std::string::npos) {
    r.error("name", "must be a non-empty name without spaces or slashes");
  }
  return spec;
}

json method_to_json(const DistillSpec& spec) {
  json j;
  j["method"] = method_name(spec.method);
  j["name"] = spec.name;
  j["w_t"] = spec.w_t == TimeWeight::unit ? "unit" : "sigma_sq";
  json ts = {{"kind", spec.t_sampling.kind == TSampling::Kind::uniform ? "uniform" : "annealed"},
             {"t_lo", spec.t_sampling.t_lo},
             {"t_hi", spec.t_sampling.t_hi}};
  if (spec.t_sampling.kind == TSampling::Kind::annealed) ts["t_hi_final"] = spec.t_sampling.t_hi_final;
  j["t_sampling"] = ts;
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, SdsParams> || std::is_same_v<T, SdsDominantParams>) {
          j["s"] = p.s;
        } else if constexpr (std::is_same_v<T, DdsParams>) {
          j["y_src"] = p.y_src;
        } else if constexpr (std::is_same_v<T, NfsdParams>) {
          j["s"] = p.s;
          j["y_neg"] = p.y_neg;
          j["t_gate"] = p.t_gate;
        } else if constexpr (std::is_same_v<T, CsdParams>) {
          j["w1"] = p.w1;
          j["w2"] = p.w2;
          j["anneal_steps"] = p.anneal_steps;
          j["y_src"] = p.y_src;
        } else if constexpr (std::is_same_v<T, VsdParams>) {
          j["s"] = p.s;
          j["estimator"] = {{"kind", std::string(to_string(p.estimator.kind))},
                            {"K", p.estimator.K},
                            {"iters", p.estimator.iters},
                            {"bandwidth", p.estimator.bandwidth},
                            {"refit_every", p.estimator.refit_every}};
        } else if constexpr (std::is_same_v<T, OursParams>) {
          j["w"] = p.w;
          j["y_src"] = p.y_src;
          j["stage1_steps"] = p.stage1_steps;
          j["stage1_s"] = p.stage1_s;
          j["blend_steps"] = p.blend_steps;
        } else {
          j["w"] = p.w;
          j["y_src"] = p.y_src;
          j["ode"] = {{"solver", std::string(to_string(p.ode.solver))},
                      {"steps", p.ode.steps},
                      {"grid", std::string(to_string(p.ode.grid))},
                      {"denoise_final", p.ode.denoise_final}};
          j["warmup"] = p.warmup == BridgeParams::Warmup::sds ? "sds" : "ours";
          j["warmup_steps"] = p.warmup_steps;
          j["warmup_s"] = p.warmup_s;
          j["from_scratch"] = p.from_scratch;
        }
      },
      spec.method);
  return j;
}

Renderer multiview_preset() {
  Mat a1 = Mat::Zero(2, 4), a2 = Mat::Zero(2, 4), a3 = Mat::Zero(2, 4);
  a1.leftCols(2).setIdentity();
  a2.rightCols(2).setIdentity();
  a3.leftCols(2) = 0.5 * Mat::Identity(2, 2);
  a3.rightCols(2) = 0.5 * Mat::Identity(2, 2);
  return Renderer::multiview({a1, a2, a3}, {Vec::Zero(2), Vec::Zero(2), Vec::Zero(2)});
}

std::vector<DistillSpec> default_table_methods() {
  std::vector<DistillSpec> out;
  for (MethodParams m : std::vector<MethodParams>{SdsParams{}, NfsdParams{}, CsdParams{}, VsdParams{}, OursParams{}}) {
    DistillSpec s;
    s.method = m;
    s.name = method_name(m);
    out.push_back(s);
  }
  return out;
}

namespace {

void check_conditions(const World& w, const DistillSpec& spec, const std::string& target, const std::string& path) {
  auto check = [&](const std::string& key, const std::string& expr) {
    try {
      if (expr.empty()) w.corruptions_of(target);
      else w.parse_condition(expr);
    } catch (const Error& e) {
      jsonu::fail(kWhat, path + "/" + key, e.what());
    }
  };
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, DdsParams> || std::is_same_v<T, CsdParams>) {
          check("y_src", p.y_src.empty() ? "uncond" : p.y_src);
        } else if constexpr (std::is_same_v<T, OursParams> || std::is_same_v<T, BridgeParams>) {
          check("y_src", p.y_src);
        } else if constexpr (std::is_same_v<T, NfsdParams>) {
          check("y_neg", p.y_neg);
        }
      },
      spec.method);
}

}  // namespace

ExperimentConfig parse_experiment(const json& j) {
  Reader r(j, "", kWhat);
  r.only({"world", "renderer", "methods", "targets", "scenarios", "particles", "optimizer", "iters", "eval_every",
          "log_every", "snapshot_every", "metrics_n", "slices", "seed", "output_dir", "threads", "config_hash"});
  ExperimentConfig c;
  c.source = j;
  c.world_spec = r.has("world") ? r.need("world") : json("b1");
  try {
    if (c.world_spec.is_string()) {
      c.world = std::make_shared<const World>(load_world(c.world_spec.get<std::string>()));
    } else {
      c.world = std::make_shared<const World>(world_from_json(c.world_spec));
    }
  } catch (const Error& e) {
    r.error("world", e.what());
  }
  const World& w = *c.world;

  c.renderer = Renderer::identity(w.dim());
  const bool multiview_world = c.world_spec.is_string() && c.world_spec.get<std::string>() == "b3";
  if (multiview_world) c.renderer = multiview_preset();
  if (r.has("renderer")) {
    const Reader rr = r.object("renderer");
    rr.only({"kind", "preset", "views"});
    const auto kind = rr.string("kind", "identity");
    if (kind == "identity") {
      c.renderer = Renderer::identity(w.dim());
    } else if (kind == "multiview") {
      if (rr.has("preset")) {
        if (rr.string("preset") != "b3") rr.error("preset", "unknown renderer preset");
        c.renderer = multiview_preset();
      } else {
        const json& views = rr.need("views");
        if (!views.is_array() || views.empty()) rr.error("views", "expected a non-empty array");
        std::vector<Mat> A;
        std::vector<Vec> b;
        for (std::size_t i = 0; i < views.size(); ++i) {
          const Reader vr(views[i], rr.at("views") + "/" + std::to_string(i), kWhat);
          vr.only({"A", "b"});
          A.push_back(read_matrix(vr.need("A"), vr.at("A")));
          b.push_back(vr.has("b") ? read_vector(vr.need("b"), vr.at("b")) : Vec::Zero(A.back().rows()));
        }
        try {
          c.renderer = Renderer::multiview(std::move(A), std::move(b));
        } catch (const Error& e) {
          rr.error("views", e.what());
        }
      }
    } else {
      rr.error("kind", "expected identity or multiview");
    }
  }
  if (c.renderer.out_dim() != w.dim()) r.error("renderer", "renderer output dimension does not match the world");

  if (r.has("targets")) {
    const json& tj = r.need("targets");
    if (!tj.is_array() || tj.empty()) r.error("targets", "expected a non-empty array of class labels");
    for (std::size_t i = 0; i < tj.size(); ++i) {
      const auto p = r.at("targets") + "/" + std::to_string(i);
      if (!tj[i].is_string()) jsonu::fail(kWhat, p, "expected a class label");
      const auto label = tj[i].get<std::string>();
      try {
        w.index_of(label);
      } catch (const Error& e) {
        jsonu::fail(kWhat, p, e.what());
      }
      c.targets.push_back(label);
    }
  } else {
    c.targets = w.content_labels();
  }

  if (r.has("methods")) {
    const json& mj = r.need("methods");
    if (!mj.is_array() || mj.empty()) r.error("methods", "expected a non-empty array");
    for (std::size_t i = 0; i < mj.size(); ++i) c.methods.push_back(parse_method(mj[i], r.at("methods") + "/" + std::to_string(i)));
  } else {
    c.methods = default_table_methods();
  }
  for (std::size_t i = 0; i < c.methods.size(); ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      if (c.methods[k].name == c.methods[i].name) {
        jsonu::fail(kWhat, r.at("methods") + "/" + std::to_string(i) + "/name", "duplicate method name '" + c.methods[i].name + "'");
      }
    }
    for (const auto& t : c.targets) check_conditions(w, c.methods[i], t, r.at("methods") + "/" + std::to_string(i));
  }

  c.scenarios = static_cast<int>(r.integer("scenarios", c.scenarios));
  if (c.scenarios < 1) r.error("scenarios", "must be >= 1");

  if (r.has("particles")) {
    const Reader pr = r.object("particles");
    pr.only({"n", "init", "scale"});
    c.init.scale = pr.number("scale", c.init.scale);
    if (!(c.init.scale > 0.0)) pr.error("scale", "must be > 0");
    c.n_particles = static_cast<int>(pr.integer("n", c.n_particles));
    if (c.n_particles < 1) pr.error("n", "must be >= 1");
    const auto init = pr.string("init", "noise");
    if (init == "noise") {
      c.init.kind = ParticleInit::Kind::noise;
    } else if (init == "corruption-of-target") {
      c.init.kind = ParticleInit::Kind::corruption_of_target;
      for (const auto& t : c.targets) {
        try {
          w.corruptions_of(t);
        } catch (const Error& e) {
          pr.error("init", e.what());
        }
      }
    } else if (init.starts_with("class:")) {
      c.init.kind = ParticleInit::Kind::class_label;
      c.init.label = init.substr(6);
      try {
        w.parse_condition(c.init.label);
      } catch (const Error& e) {
        pr.error("init", e.what());
      }
    } else {
      pr.error("init", "expected noise, class:<label> or corruption-of-target");
    }
  }

  if (r.has("optimizer")) {
    const Reader orr = r.object("optimizer");
    orr.only({"kind", "lr", "beta1", "beta2", "eps"});
    const auto kind = orr.string("kind", "adam");
    if (kind == "adam") c.optimizer.kind = OptimizerConfig::Kind::adam;
    else if (kind == "sgd") c.optimizer.kind = OptimizerConfig::Kind::sgd;
    else orr.error("kind", "expected adam or sgd");
    c.optimizer.lr = orr.number("lr", c.optimizer.lr);
    c.optimizer.beta1 = orr.number("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = orr.number("beta2", c.optimizer.beta2);
    c.optimizer.eps = orr.number("eps", c.optimizer.eps);
    if (!(c.optimizer.lr > 0.0)) orr.error("lr", "must be > 0");
    if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0)) orr.error("beta1", "must lie in [0, 1)");
    if (!(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0)) orr.error("beta2", "must lie in [0, 1)");
    if (!(c.optimizer.eps > 0.0)) orr.error("eps", "must be > 0");
  }

  c.iters = r.integer("iters", c.iters);
  if (c.iters < 0) r.error("iters", "must be >= 0");
  c.eval_every = r.integer("eval_every", c.eval_every);
  if (c.eval_every < 1) r.error("eval_every", "must be >= 1");
  c.log_every = r.integer("log_every", c.log_every);
  if (c.log_every < 1) r.error("log_every", "must be >= 1");
  c.snapshot_every = r.integer("snapshot_every", c.snapshot_every);
  if (c.snapshot_every < 0) r.error("snapshot_every", "must be >= 0");
  c.metrics_n = static_cast<int>(r.integer("metrics_n", c.metrics_n));
  if (c.metrics_n < 2) r.error("metrics_n", "must be >= 2");
  c.slices = static_cast<int>(r.integer("slices", c.slices));
  if (c.slices < 1) r.error("slices", "must be >= 1");
  if (r.has("seed")) {
    const json& sj = r.need("seed");
    if (!sj.is_number_unsigned() && !(sj.is_number_integer() && sj.get<long long>() >= 0)) r.error("seed", "expected a non-negative integer");
    c.seed = sj.get<std::uint64_t>();
  }
  c.output_dir = r.string("output_dir", c.output_dir);
  c.threads = static_cast<int>(r.integer("threads", 0));
  if (c.threads < 0) r.error("threads", "must be >= 0");
  return c;
}

ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw Error("config '" + path + "' is not valid JSON: " + e.what());
  }
  return parse_experiment(j);
}

json experiment_to_json(const ExperimentConfig& c) {
  json j;
  j["world"] = c.world_spec;
  if (c.renderer.kind() == Renderer::Kind::identity) {
    j["renderer"] = {{"kind", "identity"}};
  } else {
    json views = json::array();
    for (int i = 0; i < c.renderer.views(); ++i) {
      views.push_back({{"A", mat_json(c.renderer.view_matrix(i))}, {"b", vec_json(c.renderer.view_offset(i))}});
    }
    j["renderer"] = {{"kind", "multiview"}, {"views", views}};
  }
  j["methods"] = json::array();
  for (const auto& m : c.methods) j["methods"].push_back(method_to_json(m));
  j["targets"] = c.targets;
  j["scenarios"] = c.scenarios;
  std::string init = "noise";
  if (c.init.kind == ParticleInit::Kind::class_label) init = "class:" + c.init.label;
  if (c.init.kind == ParticleInit::Kind::corruption_of_target) init = "corruption-of-target";
  j["particles"] = {{"n", c.n_particles}, {"init", init}};
  if (c.init.kind == ParticleInit::Kind::noise && c.init.scale != 1.0) j["particles"]["scale"] = c.init.scale;
  j["optimizer"] = {{"kind", c.optimizer.kind == OptimizerConfig::Kind::adam ? "adam" : "sgd"},
                    {"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps}};
  j["iters"] = c.iters;
  j["eval_every"] = c.eval_every;
  j["log_every"] = c.log_every;
  j["snapshot_every"] = c.snapshot_every;
  j["metrics_n"] = c.metrics_n;
  j["slices"] = c.slices;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["threads"] = c.threads;
  return j;
}

std::string config_hash(const json& j) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

std::string experiment_hash(const ExperimentConfig& c) {
  json j = experiment_to_json(c);
  j.erase("output_dir");
  j.erase("threads");
  return config_hash(j);
}

ExperimentConfig default_experiment(const std::string& world) {
  json j = {{"world", world}};
  return parse_experiment(j);
}

std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Points read_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open point file '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t\r", used) != std::string::npos) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw Error(path + ":" + std::to_string(lineno) + ": '" + cell + "' is not a number");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw Error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(rows.front().size()) + " columns");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw Error("point file '" + path + "' has no rows");
  Points p(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) p(r, c) = rows[r][c];
  }
  return p;
}

std::string points_csv(const Points& p) {
  std::ostringstream out;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    for (Eigen::Index c = 0; c < p.cols(); ++c) out << (c ? "," : "") << format_double(p(r, c));
    out << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------

double MethodResult::mean_final_frechet() const {
  double acc = 0.0;
  for (const auto& s : scenarios) acc += s.final_metrics.frechet;
  return scenarios.empty() ? 0.0 : acc / static_cast<double>(scenarios.size());
}

double MethodResult::mean_final_loglik() const {
  double acc = 0.0;
  for (const auto& s : scenarios) acc += s.final_metrics.mean_loglik_target;
  return scenarios.empty() ? 0.0 : acc / static_cast<double>(scenarios.size());
}

long MethodResult::total_evals() const {
  long acc = 0;
  for (const auto& s : scenarios) acc += s.n_evals;
  return acc;
}

long MethodResult::total_fit_ops() const {
  long acc = 0;
  for (const auto& s : scenarios) acc += s.fit_ops;
  return acc;
}

bool MethodResult::any_aborted() const {
  for (const auto& s : scenarios) {
    if (s.aborted) return true;
  }
  return false;
}

bool BenchmarkResult::any_aborted() const {
  for (const auto& m : methods) {
    if (m.any_aborted()) return true;
  }
  return false;
}

const MethodResult& BenchmarkResult::at(std::string_view name) const {
  for (const auto& m : methods) {
    if (m.name == name) return m;
  }
  throw Error("no method named '" + std::string(name) + "' in the result");
}

std::string record_csv(const MethodResult& m, const std::string& hash) {
  std::ostringstream out;
  out << "# config_hash=" << hash << "\n";
  if (m.records.empty()) return out.str();
  const auto& first = m.records.front();
  out << "scenario,target,iter,method,stage,t_mean,grad_norm";
  for (const auto& t : first.term_names) out << ",term_" << t;
  out << ",n_evals,fit_ops";
  for (const auto& name : first.metric_names) out << "," << name;
  out << "\n";
  for (std::size_t k = 0; k < m.records.size(); ++k) {
    const auto& sc = m.scenarios[k];
    for (const auto& row : m.records[k].rows) {
      out << sc.scenario << "," << sc.target << "," << row.iter << "," << row.method << "," << row.stage << ","
          << format_double(row.t_mean) << "," << format_double(row.grad_norm);
      for (double v : row.terms) out << "," << format_double(v);
      out << "," << row.n_evals << "," << row.fit_ops;
      for (double v : row.metrics) out << "," << format_double(v);
      out << "\n";
    }
  }
  return out.str();
}

namespace {

const std::vector<std::string> kMetricNames = {"frechet", "mean_loglik", "sliced_w2", "energy"};
constexpr int kPairwiseCap = 2000;

struct TargetRef {
  GaussianMixture mixture;
  Points samples;
  SlicedReference sliced;
  EnergyReference energy;
  Vec mean;
  Mat cov;
};

TargetRef make_target(const World& w, const std::string& label, const ExperimentConfig& c) {
  TargetRef t;
  t.mixture = w.mixture(w.parse_condition(label));
  t.samples = sample(t.mixture, c.metrics_n, label_seed(c.seed, label));
  const Points sub = t.samples.topRows(std::min<Eigen::Index>(t.samples.rows(), kPairwiseCap));
  t.sliced = SlicedReference(sub, c.slices, c.seed);
  t.energy = EnergyReference(sub);
  t.mean = t.samples.colwise().mean().transpose();
  const Points centered = t.samples.rowwise() - t.mean.transpose();
  t.cov = centered.transpose() * centered / static_cast<double>(t.samples.rows());
  return t;
}

double frechet_to(const TargetRef& t, const Points& p) {
  const Vec mu = p.colwise().mean().transpose();
  const Points c = p.rowwise() - mu.transpose();
  return frechet_from_moments(mu, c.transpose() * c / static_cast<double>(p.rows()), t.mean, t.cov);
}

MetricReport full_report(const TargetRef& t, const Points& p) {
  MetricReport r;
  r.frechet = frechet_to(t, p);
  r.mean_loglik_target = mean_loglik(t.mixture, p);
  r.sliced_w2 = t.sliced.distance(p);
  r.energy_dist = t.energy.distance(p);
  r.n = p.rows();
  return r;
}

json report_json(const MetricReport& r) {
  return {{"frechet", r.frechet},
          {"sliced_w2", r.sliced_w2},
          {"energy_dist", r.energy_dist},
          {"mean_loglik_target", r.mean_loglik_target},
          {"n", r.n}};
}

Points initial_theta(const ExperimentConfig& c, const std::string& target, int k) {
  const World& w = *c.world;
  const Renderer& rend = c.renderer;
  std::mt19937_64 rng(scenario_seed(c.seed, k) ^ 0x1417ull);
  const int p = rend.param_dim();
  if (c.init.kind == ParticleInit::Kind::noise) {
    return c.init.scale * sample(GaussianMixture::single(Vec::Zero(p), Mat::Identity(p, p)), c.n_particles, rng);
  }
  const Condition cond =
      c.init.kind == ParticleInit::Kind::class_label ? w.parse_condition(c.init.label) : w.corruptions_of(target);
  const Points x = sample(w.mixture(cond), c.n_particles, rng);
  if (rend.kind() == Renderer::Kind::identity) return x;
  // every view sees the sampled point: least-squares θ for the stacked system
  const int v = rend.views();
  const int d = rend.out_dim();
  Mat A(d * v, p);
  Vec b(d * v);
  for (int i = 0; i < v; ++i) {
    A.middleRows(i * d, d) = rend.view_matrix(i);
    b.segment(i * d, d) = rend.view_offset(i);
  }
  const Eigen::ColPivHouseholderQR<Mat> qr(A);
  Points theta(c.n_particles, p);
  for (int n = 0; n < c.n_particles; ++n) {
    Vec rhs(d * v);
    for (int i = 0; i < v; ++i) rhs.segment(i * d, d) = x.row(n).transpose() - b.segment(i * d, d);
    theta.row(n) = qr.solve(rhs).transpose();
  }
  return theta;
}

int count_non_monotone(const RunRecord& rec) {
  int count = 0;
  double prev = std::numeric_limits<double>::quiet_NaN();
  for (const auto& row : rec.rows) {
    const double f = row.metrics.empty() ? std::numeric_limits<double>::quiet_NaN() : row.metrics[0];
    if (std::isnan(f)) continue;
    if (!std::isnan(prev) && f > prev) ++count;
    prev = f;
  }
  return count;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << text;
  if (!out) throw Error("failed writing '" + p.string() + "'");
}

BenchmarkResult execute(const ExperimentConfig& c, const std::vector<DistillSpec>& arms, const std::string& kind,
                        const RunOptions& opt) {
  const json cfg_json = experiment_to_json(c);
  const std::string hash = experiment_hash(c);
  Denoiser den(c.world);

  std::map<std::string, TargetRef> targets;
  for (const auto& t : c.targets) {
    if (!targets.count(t)) targets.emplace(t, make_target(*c.world, t, c));
  }

  BenchmarkResult result;
  for (const auto& arm : arms) {
    MethodResult m;
    m.name = arm.name;
    m.hash = config_hash(method_to_json(arm));
    result.methods.push_back(std::move(m));
  }
  std::vector<json> snapshots(arms.size(), json::array());
  std::ostringstream timing;
  timing << "# config_hash=" << hash << "\nmethod,scenario,target,wall_ms\n";

  for (int k = 0; k < c.scenarios; ++k) {
    const std::string& target = c.targets[static_cast<std::size_t>(k) % c.targets.size()];
    const TargetRef& ref = targets.at(target);
    const Points theta0 = initial_theta(c, target, k);
    const MetricReport init = full_report(ref, c.renderer.render_all(theta0));

    for (std::size_t a = 0; a < arms.size(); ++a) {
      DistillSpec spec = arms[a];
      spec.target = target;
      spec.seed = scenario_seed(c.seed, k);
      ParticleSystem ps(theta0, c.renderer, c.optimizer);
      RunCallbacks cb;
      cb.metric_names = kMetricNames;
      cb.eval_every = c.eval_every;
      cb.log_every = c.log_every;
      cb.exec = opt.exec;
      cb.evaluate = [&](const Points& p) {
        return std::vector<double>{frechet_to(ref, p), mean_loglik(ref.mixture, p),
                                   std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
      };
      cb.evaluate_final = [&](const Points& p) {
        const MetricReport r = full_report(ref, p);
        return std::vector<double>{r.frechet, r.mean_loglik_target, r.sliced_w2, r.energy_dist};
      };
      cb.snapshot_every = c.snapshot_every;
      cb.snapshot = [&](long iter, const Points& theta) {
        snapshots[a].push_back({{"scenario", k}, {"iter", iter}, {"theta", points_json(theta)}});
      };

      const auto t0 = std::chrono::steady_clock::now();
      RunRecord rec = run(den, ps, spec, c.iters, cb);
      const double wall = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

      ScenarioResult sr;
      sr.scenario = k;
      sr.target = target;
      sr.init_metrics = init;
      const auto& last = rec.rows.back().metrics;
      if (rec.aborted) {
        sr.final_metrics = full_report(ref, c.renderer.render_all(ps.theta()));
      } else {
        sr.final_metrics = {last[0], last[2], last[3], last[1], ps.size() * static_cast<long>(c.renderer.views())};
      }
      sr.n_evals = rec.n_evals;
      sr.fit_ops = rec.fit_ops;
      sr.aborted = rec.aborted;
      sr.non_monotone = count_non_monotone(rec);
      sr.wall_ms = wall;
      timing << arms[a].name << "," << k << "," << target << "," << format_double(wall) << "\n";
      result.methods[a].scenarios.push_back(sr);
      result.methods[a].records.push_back(std::move(rec));
    }
  }

  json summary;
  summary["config_hash"] = hash;
  summary["kind"] = kind;
  summary["world"] = c.world_spec;
  summary["scenarios"] = c.scenarios;
  summary["iters"] = c.iters;
  summary["methods"] = json::array();
  for (std::size_t a = 0; a < arms.size(); ++a) {
    const auto& m = result.methods[a];
    MetricReport mean_final, mean_init;
    json per = json::array();
    double wall = 0.0;
    int non_mono = 0;
    for (const auto& s : m.scenarios) {
      const double inv = 1.0 / static_cast<double>(m.scenarios.size());
      mean_final.frechet += inv * s.final_metrics.frechet;
      mean_final.sliced_w2 += inv * s.final_metrics.sliced_w2;
      mean_final.energy_dist += inv * s.final_metrics.energy_dist;
      mean_final.mean_loglik_target += inv * s.final_metrics.mean_loglik_target;
      mean_final.n = s.final_metrics.n;
      mean_init.frechet += inv * s.init_metrics.frechet;
      mean_init.sliced_w2 += inv * s.init_metrics.sliced_w2;
      mean_init.energy_dist += inv * s.init_metrics.energy_dist;
      mean_init.mean_loglik_target += inv * s.init_metrics.mean_loglik_target;
      mean_init.n = s.init_metrics.n;
      wall += s.wall_ms;
      non_mono += s.non_monotone;
      per.push_back({{"scenario", s.scenario},
                     {"target", s.target},
                     {"final", report_json(s.final_metrics)},
                     {"n_evals", s.n_evals},
                     {"fit_ops", s.fit_ops},
                     {"aborted", s.aborted},
                     {"non_monotone", s.non_monotone}});
    }
    summary["methods"].push_back({{"name", m.name},
                                  {"method", method_to_json(arms[a])},
                                  {"config_hash", m.hash},
                                  {"mean_final", report_json(mean_final)},
                                  {"mean_init", report_json(mean_init)},
                                  {"n_evals", m.total_evals()},
                                  {"fit_ops", m.total_fit_ops()},
                                  {"total_compute", m.total_evals() + m.total_fit_ops()},
                                  {"aborted", m.any_aborted()},
                                  {"non_monotone", non_mono},
                                  {"wall_ms", wall},
                                  {"scenarios", per}});
  }
  result.summary = summary;

  if (opt.write) {
    namespace fs = std::filesystem;
    const fs::path root(c.output_dir);
    std::error_code ec;
    fs::create_directories(root / "runs", ec);
    if (ec) throw Error("cannot create output directory '" + root.string() + "': " + ec.message());
    json cfg_out = cfg_json;
    cfg_out["config_hash"] = hash;
    write_file(root / "config.json", cfg_out.dump(2) + "\n");
    write_file(root / "worlds.json", json{{"config_hash", hash}, {"world", world_to_json(*c.world)}}.dump(2) + "\n");
    for (std::size_t a = 0; a < arms.size(); ++a) {
      const fs::path dir = root / "runs" / arms[a].name;
      fs::create_directories(dir, ec);
      if (ec) throw Error("cannot create '" + dir.string() + "': " + ec.message());
      write_file(dir / "record.csv", record_csv(result.methods[a], hash));
      write_file(dir / "snapshots.json",
                 json{{"config_hash", hash}, {"snapshots", snapshots[a]}}.dump() + "\n");
    }
    write_file(root / "timing.csv", timing.str());
    write_file(root / "summary.json", summary.dump(2) + "\n");
  }
  if (!opt.keep_records) {
    for (auto& m : result.methods) m.records.clear();
  }
  return result;
}

OursParams base_ours(const ExperimentConfig& c, TSampling& ts) {
  for (const auto& m : c.methods) {
    if (auto p = std::get_if<OursParams>(&m.method)) {
      ts = m.t_sampling;
      return *p;
    }
  }
  return {};
}

}  // namespace

BenchmarkResult run_benchmark(const ExperimentConfig& config, const RunOptions& opt) {
  return execute(config, config.methods, "table1", opt);
}

BenchmarkResult run_ablation_stage1(const ExperimentConfig& config, const RunOptions& opt) {
  TSampling ts;
  const OursParams ours = base_ours(config, ts);
  const long steps = ours.stage1_steps > 0 ? ours.stage1_steps : OursParams{}.stage1_steps;
  std::vector<DistillSpec> arms;
  auto add = [&](std::string name, MethodParams m) {
    DistillSpec s;
    s.name = std::move(name);
    s.method = std::move(m);
    s.t_sampling = ts;
    arms.push_back(std::move(s));
  };
  OursParams skip = ours;
  skip.stage1_steps = 0;
  OursParams staged = ours;
  staged.stage1_steps = steps;
  add("ours_stage1_0", skip);
  add("ours_stage1_" + std::to_string(steps), staged);
  std::ostringstream sds_name;
  sds_name << "sds_s" << ours.stage1_s;
  add(sds_name.str(), SdsParams{ours.stage1_s});
  return execute(config, arms, "ablate-stage1", opt);
}

BenchmarkResult run_bridge_study(const ExperimentConfig& config, const RunOptions& opt) {
  TSampling ts;
  const OursParams ours = base_ours(config, ts);
  BridgeParams bridge;
  for (const auto& m : config.methods) {
    if (auto p = std::get_if<BridgeParams>(&m.method)) bridge = *p;
  }
  bridge.w = ours.w;
  bridge.y_src = ours.y_src;
  std::vector<DistillSpec> arms(3);
  arms[0].name = "ours";
  arms[0].method = ours;
  BridgeParams warm = bridge;
  warm.from_scratch = false;
  warm.warmup = BridgeParams::Warmup::sds;
  warm.warmup_s = ours.stage1_s;
  warm.warmup_steps = ours.stage1_steps > 0 ? ours.stage1_steps : BridgeParams{}.warmup_steps;
  arms[1].name = "bridge_warmup";
  arms[1].method = warm;
  BridgeParams scratch = bridge;
  scratch.from_scratch = true;
  arms[2].name = "bridge_scratch";
  arms[2].method = scratch;
  for (auto& a : arms) a.t_sampling = ts;
  return execute(config, arms, "bridge", opt);
}

}  // namespace sdlab
