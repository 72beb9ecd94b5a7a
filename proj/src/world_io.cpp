#include "sdlab/world_io.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

namespace sdlab {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& msg) {
  throw Error("world config " + (path.empty() ? std::string("/") : path) + ": " + msg);
}

const json& need(const json& obj, const std::string& key, const std::string& path) {
  if (!obj.is_object()) fail(path, "expected an object");
  auto it = obj.find(key);
  if (it == obj.end()) fail(path + "/" + key, "missing required key");
  return *it;
}

double number(const json& j, const std::string& path) {
  if (!j.is_number()) fail(path, "expected a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) fail(path, "must be finite");
  return v;
}

Vec vector_of(const json& j, const std::string& path) {
  if (j.is_number()) return Vec::Constant(1, number(j, path));
  if (!j.is_array() || j.empty()) fail(path, "expected a non-empty array of numbers");
  Vec v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = number(j[i], path + "/" + std::to_string(i));
  return v;
}

Mat matrix_of(const json& j, int d, const std::string& path) {
  // 1D worlds may write a covariance as a bare variance.
  if (j.is_number()) {
    if (d != 1) fail(path, "scalar covariance only allowed for d = 1");
    return Mat::Constant(1, 1, number(j, path));
  }
  if (!j.is_array() || static_cast<int>(j.size()) != d) fail(path, "expected " + std::to_string(d) + " rows");
  Mat m(d, d);
  for (int r = 0; r < d; ++r) {
    const auto rp = path + "/" + std::to_string(r);
    const json& row = j[r];
    if (d == 1 && row.is_number()) {
      m(0, 0) = number(row, rp);
      continue;
    }
    if (!row.is_array() || static_cast<int>(row.size()) != d) fail(rp, "expected " + std::to_string(d) + " columns");
    for (int c = 0; c < d; ++c) m(r, c) = number(row[c], rp + "/" + std::to_string(c));
  }
  return m;
}

NoiseSchedule schedule_of(const json& j, const std::string& path) {
  if (!j.is_object()) fail(path, "expected an object");
  const std::string kind = j.value("kind", std::string("vp-linear"));
  const double bmin = j.contains("beta_min") ? number(j["beta_min"], path + "/beta_min") : 0.1;
  const double bmax = j.contains("beta_max") ? number(j["beta_max"], path + "/beta_max") : 20.0;
  try {
    if (kind == "vp-linear") return NoiseSchedule(ScheduleKind::vp_linear, bmin, bmax);
    if (kind == "vp-cosine") return NoiseSchedule(ScheduleKind::vp_cosine, bmin, bmax);
  } catch (const Error& e) {
    fail(path, e.what());
  }
  fail(path + "/kind", "unknown schedule kind '" + kind + "'");
}

CorruptionOp op_of(const json& j, int d, const std::string& path) {
  const json& kind_j = need(j, "kind", path);
  if (!kind_j.is_string()) fail(path + "/kind", "expected a string");
  CorruptionKind kind{};
  try {
    kind = corruption_kind_from_string(kind_j.get<std::string>());
  } catch (const Error& e) {
    fail(path + "/kind", e.what());
  }
  const json& params = j.contains("params") ? j["params"] : j;
  const std::string pp = j.contains("params") ? path + "/params" : path;
  switch (kind) {
    case CorruptionKind::smooth:
    case CorruptionKind::noisy: {
      const double c = number(need(params, "c", pp), pp + "/c");
      if (c < 0.0) fail(pp + "/c", "must be >= 0");
      return {kind, c, {}, {}};
    }
    case CorruptionKind::desaturate:
    case CorruptionKind::oversaturate: {
      const double lambda = number(need(params, "lambda", pp), pp + "/lambda");
      if (!(lambda > 0.0 && lambda <= 2.0)) fail(pp + "/lambda", "must lie in (0, 2]");
      std::optional<Vec> center;
      if (params.contains("center")) {
        center = vector_of(params["center"], pp + "/center");
        if (center->size() != d) fail(pp + "/center", "wrong dimension");
      }
      return {kind, lambda, {}, std::move(center)};
    }
    case CorruptionKind::shift: {
      Vec v = vector_of(need(params, "v", pp), pp + "/v");
      if (v.size() != d) fail(pp + "/v", "wrong dimension");
      return {kind, 0.0, std::move(v), {}};
    }
  }
  fail(path, "unreachable");
}

json op_to_json(const CorruptionOp& op) {
  json params = json::object();
  switch (op.kind) {
    case CorruptionKind::smooth:
    case CorruptionKind::noisy:
      params["c"] = op.amount;
      break;
    case CorruptionKind::desaturate:
    case CorruptionKind::oversaturate:
      params["lambda"] = op.amount;
      if (op.center) params["center"] = std::vector<double>(op.center->begin(), op.center->end());
      break;
    case CorruptionKind::shift:
      params["v"] = std::vector<double>(op.offset.begin(), op.offset.end());
      break;
  }
  return {{"kind", std::string(to_string(op.kind))}, {"params", params}};
}

WorldClass content_class(const json& j, const std::string& path, const std::string& label) {
  const json& wj = need(j, "weights", path);
  const json& mj = need(j, "means", path);
  const json& cj = need(j, "covs", path);
  if (!wj.is_array() || wj.empty()) fail(path + "/weights", "expected a non-empty array");
  if (!mj.is_array() || mj.size() != wj.size()) fail(path + "/means", "expected one mean per weight");
  if (!cj.is_array() || cj.size() != wj.size()) fail(path + "/covs", "expected one covariance per weight");
  std::vector<double> w;
  std::vector<Vec> means;
  std::vector<Mat> covs;
  for (std::size_t k = 0; k < wj.size(); ++k) {
    const auto ks = std::to_string(k);
    w.push_back(number(wj[k], path + "/weights/" + ks));
    means.push_back(vector_of(mj[k], path + "/means/" + ks));
    const int d = static_cast<int>(means.back().size());
    if (d != means.front().size()) fail(path + "/means/" + ks, "dimension differs from component 0");
    covs.push_back(matrix_of(cj[k], d, path + "/covs/" + ks));
  }
  try {
    return {label, GaussianMixture(std::move(w), std::move(means), std::move(covs)), true, {}, {}};
  } catch (const Error& e) {
    fail(path, e.what());
  }
}

}  // namespace

World world_from_json(const json& j) {
  if (!j.is_object()) fail("", "expected an object");
  const NoiseSchedule sched = j.contains("schedule") ? schedule_of(j["schedule"], "/schedule") : NoiseSchedule{};
  const json& cls = need(j, "classes", "");
  if (!cls.is_array() || cls.empty()) fail("/classes", "expected a non-empty array");

  std::vector<WorldClass> out(cls.size());
  std::vector<bool> done(cls.size(), false);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < cls.size(); ++i) {
    const auto path = "/classes/" + std::to_string(i);
    const json& lj = need(cls[i], "label", path);
    if (!lj.is_string() || lj.get<std::string>().empty()) fail(path + "/label", "expected a non-empty string");
    const auto label = lj.get<std::string>();
    if (!index.emplace(label, i).second) fail(path + "/label", "duplicate label '" + label + "'");
    if (!cls[i].contains("base_class")) {
      out[i] = content_class(cls[i], path, label);
      done[i] = true;
    }
  }
  for (std::size_t i = 0; i < cls.size(); ++i) {
    if (done[i]) continue;
    const auto path = "/classes/" + std::to_string(i);
    const json& bj = cls[i]["base_class"];
    if (!bj.is_string()) fail(path + "/base_class", "expected a string");
    const auto base = bj.get<std::string>();
    auto it = index.find(base);
    if (it == index.end()) fail(path + "/base_class", "unknown class '" + base + "'");
    if (!done[it->second]) fail(path + "/base_class", "base must be a content class");
    const GaussianMixture& bm = out[it->second].mixture;
    const json& cj = need(cls[i], "corruption", path);
    std::vector<CorruptionOp> ops;
    if (cj.is_array()) {
      if (cj.empty()) fail(path + "/corruption", "empty corruption list");
      for (std::size_t k = 0; k < cj.size(); ++k) {
        ops.push_back(op_of(cj[k], bm.dim(), path + "/corruption/" + std::to_string(k)));
      }
    } else {
      ops.push_back(op_of(cj, bm.dim(), path + "/corruption"));
    }
    GaussianMixture m = bm;
    for (const auto& op : ops) m = apply_corruption(m, op);
    out[i] = {cls[i]["label"].get<std::string>(), std::move(m), false, base, std::move(ops)};
  }

  std::optional<std::vector<double>> prior;
  if (j.contains("prior")) {
    const json& pj = j["prior"];
    if (!pj.is_array() || pj.size() != cls.size()) fail("/prior", "expected one weight per class");
    prior.emplace();
    for (std::size_t i = 0; i < pj.size(); ++i) prior->push_back(number(pj[i], "/prior/" + std::to_string(i)));
  }
  try {
    return World(std::move(out), sched, std::move(prior));
  } catch (const Error& e) {
    fail("", e.what());
  }
}

json schedule_to_json(const NoiseSchedule& s) {
  return {{"kind", s.kind() == ScheduleKind::vp_linear ? "vp-linear" : "vp-cosine"},
          {"beta_min", s.beta_min()},
          {"beta_max", s.beta_max()}};
}

json world_to_json(const World& w) {
  json classes = json::array();
  for (const auto& c : w.classes()) {
    if (!c.content) {
      json ops = json::array();
      for (const auto& op : c.corruption) ops.push_back(op_to_json(op));
      classes.push_back({{"label", c.label}, {"base_class", c.base_class}, {"corruption", ops}});
      continue;
    }
    json weights = json::array(), means = json::array(), covs = json::array();
    for (const auto& comp : c.mixture.components()) {
      weights.push_back(comp.weight);
      means.push_back(std::vector<double>(comp.mean.begin(), comp.mean.end()));
      json cov = json::array();
      for (int r = 0; r < comp.cov.rows(); ++r) {
        json row = json::array();
        for (int k = 0; k < comp.cov.cols(); ++k) row.push_back(comp.cov(r, k));
        cov.push_back(row);
      }
      covs.push_back(cov);
    }
    classes.push_back({{"label", c.label}, {"weights", weights}, {"means", means}, {"covs", covs}});
  }
  const Condition u = w.unconditional();
  return {{"schedule", schedule_to_json(w.schedule())}, {"prior", u.class_weights}, {"classes", classes}};
}

// ---------------------------------------------------------------------------

namespace {

void add_corruptions(std::vector<WorldClass>& classes, const WorldClass& base, int d) {
  const Vec center = Vec::Zero(d);
  const std::vector<std::pair<std::string, std::vector<CorruptionOp>>> recipes = {
      {"oversaturated", {CorruptionOp::oversaturate(1.5, center)}},
      {"desaturated", {CorruptionOp::desaturate(0.5, center)}},
      {"noisy", {CorruptionOp::noisy(0.5)}},
      {"smooth+noisy", {CorruptionOp::smooth(0.25), CorruptionOp::noisy(0.5)}},
  };
  for (const auto& [suffix, ops] : recipes) {
    GaussianMixture m = base.mixture;
    for (const auto& op : ops) m = apply_corruption(m, op);
    classes.push_back({base.label + ":" + suffix, std::move(m), false, base.label, ops});
  }
}

World make_b1() {
  std::vector<WorldClass> classes;
  const Mat v = Mat::Constant(1, 1, 0.25);
  WorldClass a{"A", GaussianMixture::single(Vec::Constant(1, -2.0), v), true, {}, {}};
  WorldClass b{"B", GaussianMixture::single(Vec::Constant(1, 2.0), v), true, {}, {}};
  classes.push_back(a);
  classes.push_back(b);
  add_corruptions(classes, a, 1);
  add_corruptions(classes, b, 1);
  return World(std::move(classes), NoiseSchedule::linear());
}

World make_ring() {
  auto half = [](int first) {
    std::vector<Vec> means;
    for (int k = first; k < first + 4; ++k) {
      const double ang = std::numbers::pi / 8.0 + k * std::numbers::pi / 4.0;
      means.push_back(Vec{{3.0 * std::cos(ang), 3.0 * std::sin(ang)}});
    }
    return GaussianMixture::isotropic({0.25, 0.25, 0.25, 0.25}, means, {0.1, 0.1, 0.1, 0.1});
  };
  std::vector<WorldClass> classes;
  WorldClass upper{"upper", half(0), true, {}, {}};
  WorldClass lower{"lower", half(4), true, {}, {}};
  classes.push_back(upper);
  classes.push_back(lower);
  add_corruptions(classes, upper, 2);
  add_corruptions(classes, lower, 2);
  return World(std::move(classes), NoiseSchedule::linear());
}

World make_shift() {
  // α(1) ≈ 5e-4 here, so the affine flow between the two classes is a shift
  // by 4 up to a residual well under 1e-2.
  std::vector<WorldClass> classes;
  const Mat v = Mat::Identity(1, 1);
  classes.push_back({"A", GaussianMixture::single(Vec::Constant(1, -2.0), v), true, {}, {}});
  classes.push_back({"B", GaussianMixture::single(Vec::Constant(1, 2.0), v), true, {}, {}});
  return World(std::move(classes), NoiseSchedule::linear(0.1, 30.0));
}

}  // namespace

std::vector<std::string> builtin_world_names() { return {"b1", "b2", "b3", "shift"}; }

std::vector<std::string> builtin_corruption_suffixes() {
  return {"oversaturated", "desaturated", "noisy", "smooth+noisy"};
}

bool is_builtin_world(std::string_view name) {
  for (const auto& n : builtin_world_names()) {
    if (n == name) return true;
  }
  return false;
}

World builtin_world(std::string_view name) {
  if (name == "b1") return make_b1();
  if (name == "b2" || name == "b3") return make_ring();
  if (name == "shift") return make_shift();
  throw Error("unknown builtin world '" + std::string(name) + "'");
}

World load_world(const std::string& name_or_path) {
  if (is_builtin_world(name_or_path)) return builtin_world(name_or_path);
  std::ifstream in(name_or_path);
  if (!in) throw Error("cannot open world file '" + name_or_path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw Error("world file '" + name_or_path + "' is not valid JSON: " + e.what());
  }
  return world_from_json(j);
}

}  // namespace sdlab
