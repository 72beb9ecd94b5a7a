#include "oracles.hpp"
#include "sdlab/oracle.hpp"
#include "sdlab/world.hpp"
#include "sdlab/world_io.hpp"

#include <doctest.h>

#include <cmath>

using namespace sdlab;

namespace {

GaussianMixture bimodal_1d(double a = 2.0, double var = 1.0) {
  return GaussianMixture::isotropic({0.5, 0.5}, {Vec::Constant(1, -a), Vec::Constant(1, a)}, {var, var});
}

World two_class_world() {
  std::vector<WorldClass> cls;
  cls.push_back({"A", GaussianMixture::isotropic({1.0}, {Vec::Constant(2, -1.0)}, {0.5}), true, {}, {}});
  cls.push_back({"B", GaussianMixture::isotropic({0.3, 0.7}, {Vec::Constant(2, 1.0), Vec::Constant(2, 2.0)}, {0.2, 0.4}), true, {}, {}});
  return World(std::move(cls), NoiseSchedule::linear());
}

}  // namespace

TEST_CASE("mixture rejects malformed inputs") {
  const Vec m = Vec::Zero(2);
  const Mat I = Mat::Identity(2, 2);
  CHECK_THROWS_AS(GaussianMixture({}, {}, {}), Error);
  CHECK_THROWS_AS(GaussianMixture({-0.1, 1.1}, {m, m}, {I, I}), Error);
  CHECK_THROWS_AS(GaussianMixture({0.5, 0.4}, {m, m}, {I, I}), Error);
  CHECK_THROWS_AS(GaussianMixture({1.0}, {m}, {Mat::Identity(3, 3)}), Error);
  Mat asym = I;
  asym(0, 1) = 0.3;
  CHECK_THROWS_AS(GaussianMixture({1.0}, {m}, {asym}), Error);
  Mat singular = Mat::Zero(2, 2);
  singular(0, 0) = 1.0;
  CHECK_THROWS_AS(GaussianMixture({1.0}, {m}, {singular}), Error);
  CHECK_THROWS_AS(GaussianMixture::single(Vec::Zero(17), Mat::Identity(17, 17)), Error);
  Vec bad = m;
  bad[0] = std::nan("");
  CHECK_THROWS_AS(GaussianMixture({1.0}, {bad}, {I}), Error);
}

TEST_CASE("mixture weights are renormalized exactly") {
  const GaussianMixture g({1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0 + 5e-7},
                          {Vec::Zero(1), Vec::Ones(1), -Vec::Ones(1)},
                          {Mat::Identity(1, 1), Mat::Identity(1, 1), Mat::Identity(1, 1)});
  double total = 0.0;
  for (const auto& c : g.components()) total += c.weight;
  CHECK(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("mixture moments follow the law of total variance") {
  const auto m = bimodal_1d();
  CHECK(m.mean()[0] == doctest::Approx(0.0));
  CHECK(m.covariance()(0, 0) == doctest::Approx(5.0));
}

TEST_CASE("schedule is variance preserving and monotone") {
  for (const auto& s : {NoiseSchedule::linear(), NoiseSchedule::cosine(), NoiseSchedule::linear(0.5, 30.0)}) {
    CHECK(s.alpha(0.0) == 1.0);
    CHECK(s.sigma(0.0) == 0.0);
    double prev_a = 2.0, prev_s = -1.0;
    for (int i = 0; i <= 1000; ++i) {
      const double t = i / 1000.0;
      const double a = s.alpha(t), sg = s.sigma(t);
      CHECK(std::abs(a * a + sg * sg - 1.0) < 1e-12);
      CHECK(a < prev_a);
      CHECK(sg > prev_s);
      prev_a = a;
      prev_s = sg;
    }
  }
  CHECK(NoiseSchedule::linear().alpha(1.0) < 1e-2);
  CHECK(NoiseSchedule::cosine().alpha(1.0) < 1e-2);
}

TEST_CASE("beta is the derivative of the integrated rate") {
  for (const auto& s : {NoiseSchedule::linear(), NoiseSchedule::cosine()}) {
    for (double t : {0.05, 0.3, 0.5, 0.8, 0.95}) {
      const double h = 1e-6;
      const double fd = (s.integrated_beta(t + h) - s.integrated_beta(t - h)) / (2 * h);
      CHECK(s.beta(t) == doctest::Approx(fd).epsilon(1e-6));
    }
  }
}

TEST_CASE("schedule rejects bad parameters and times") {
  CHECK_THROWS_AS(NoiseSchedule::linear(0.0, 20.0), Error);
  CHECK_THROWS_AS(NoiseSchedule::linear(5.0, 1.0), Error);
  CHECK_THROWS_AS(NoiseSchedule::linear().alpha(1.5), Error);
  CHECK_THROWS_AS(NoiseSchedule::linear().sigma(-0.1), Error);
}

TEST_CASE("noised mixture fixed points") {
  const auto sched = NoiseSchedule::linear();
  const auto std_normal = GaussianMixture::single(Vec::Zero(3), Mat::Identity(3, 3));
  for (double t : {0.0, 0.1, 0.7, 1.0}) {
    const auto n = noised_mixture(std_normal, t, sched);
    CHECK(n[0].mean.norm() == 0.0);
    CHECK((n[0].cov - Mat::Identity(3, 3)).norm() < 1e-12);
  }
  const auto narrow = GaussianMixture::single(Vec::Constant(2, 3.0), 1e-8 * Mat::Identity(2, 2));
  const auto n0 = noised_mixture(narrow, 0.0, sched);
  CHECK((n0[0].mean - narrow[0].mean).norm() == 0.0);
  CHECK((n0[0].cov - narrow[0].cov).norm() < 1e-20);
}

TEST_CASE("noised bimodal mixture at alpha one half matches forward noising") {
  const auto sched = NoiseSchedule::linear();
  const double t = oracle::time_for_alpha(sched, 0.5);
  const auto m = bimodal_1d();
  const auto n = noised_mixture(m, t, sched);
  CHECK(n[0].mean[0] == doctest::Approx(-1.0).epsilon(1e-10));
  CHECK(n[1].mean[0] == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(n[0].cov(0, 0) == doctest::Approx(1.0).epsilon(1e-10));
  CHECK(n[0].weight == 0.5);

  const int N = 100000;
  const Points x0 = sample(m, N, 11);
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  std::vector<double> xt(N);
  for (int i = 0; i < N; ++i) xt[i] = sched.alpha(t) * x0(i, 0) + sched.sigma(t) * nd(rng);
  const double ks = oracle::ks_statistic(xt, [](double x) {
    return 0.5 * oracle::normal_cdf(x, -1.0, 1.0) + 0.5 * oracle::normal_cdf(x, 1.0, 1.0);
  });
  // 1% critical value of the one-sample KS test
  CHECK(ks < 1.63 / std::sqrt(N));
}

TEST_CASE("noised log-density equals the explicit component sum") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  for (const auto& sched : {NoiseSchedule::linear(), NoiseSchedule::cosine()}) {
    for (int trial = 0; trial < 40; ++trial) {
      const int d = 1 + trial % 4;
      const auto m = random_mixture(rng, d, 1 + trial % 3);
      const double t = 0.02 + 0.96 * (trial / 40.0);
      Vec x(d);
      for (int i = 0; i < d; ++i) x[i] = 2.0 * nd(rng);
      const double got = noised_mixture(m, t, sched).log_density(x);
      CHECK(got == doctest::Approx(oracle::log_density(m, sched, x, t)).epsilon(1e-10));
    }
  }
}

TEST_CASE("noised log-density agrees with a forward-noising histogram in 1D") {
  const auto sched = NoiseSchedule::linear();
  const auto m = GaussianMixture::isotropic({0.3, 0.7}, {Vec::Constant(1, -1.5), Vec::Constant(1, 2.0)}, {0.2, 0.5});
  const double t = 0.3;
  const int N = 200000;
  const Points x0 = sample(m, N, 21);
  std::mt19937_64 rng(22);
  std::normal_distribution<double> nd;
  const double h = 0.1;
  const auto noised = noised_mixture(m, t, sched);
  for (double c : {-1.0, 0.0, 1.5}) {
    int hits = 0;
    for (int i = 0; i < N; ++i) {
      const double xt = sched.alpha(t) * x0(i, 0) + sched.sigma(t) * nd(rng);
      hits += std::abs(xt - c) < h / 2;
    }
    const double est = hits / (N * h);
    CHECK(est == doctest::Approx(std::exp(noised.log_density(Vec::Constant(1, c)))).epsilon(0.05));
  }
}

TEST_CASE("fully noised centered mixtures are close to the standard normal") {
  std::mt19937_64 rng(5);
  for (const auto& sched : {NoiseSchedule::linear(), NoiseSchedule::cosine()}) {
    for (int trial = 0; trial < 10; ++trial) {
      auto m = random_mixture(rng, 3, 3);
      m = apply_corruption(m, CorruptionOp::shift(-m.mean()));
      const auto n = noised_mixture(m, 1.0, sched);
      CHECK(n.mean().norm() < 1e-3);
      CHECK((n.covariance() - Mat::Identity(3, 3)).norm() < 1e-3);
    }
  }
}

TEST_CASE("corruptions transform means and covariances") {
  const auto m = bimodal_1d();
  const auto same = apply_corruption(m, CorruptionOp::desaturate(1.0));
  CHECK(same[0].mean[0] == -2.0);
  CHECK(same[1].mean[0] == 2.0);

  const auto std_normal = GaussianMixture::single(Vec::Zero(2), Mat::Identity(2, 2));
  const auto smooth = apply_corruption(std_normal, CorruptionOp::smooth(0.5));
  CHECK((smooth[0].cov - 1.5 * Mat::Identity(2, 2)).norm() < 1e-15);

  const auto over = apply_corruption(m, CorruptionOp::oversaturate(1.5));
  CHECK(over[0].mean[0] == doctest::Approx(-3.0));
  CHECK(over[1].mean[0] == doctest::Approx(3.0));
  CHECK(over[0].cov(0, 0) == 1.0);

  const auto desat = apply_corruption(m, CorruptionOp::desaturate(0.5, Vec::Constant(1, 1.0)));
  CHECK(desat[0].mean[0] == doctest::Approx(-0.5));
  CHECK(desat[1].mean[0] == doctest::Approx(1.5));

  const auto shifted = apply_corruption(m, CorruptionOp::shift(Vec::Constant(1, 4.0)));
  CHECK(shifted[0].mean[0] == 2.0);
  CHECK(shifted.size() == m.size());
}

TEST_CASE("corruptions are deterministic and validate parameters") {
  std::mt19937_64 rng(8);
  const auto m = random_mixture(rng, 3, 4);
  for (const auto& op : {CorruptionOp::smooth(0.3), CorruptionOp::noisy(1.0), CorruptionOp::desaturate(0.4),
                         CorruptionOp::oversaturate(1.8), CorruptionOp::shift(Vec::Ones(3))}) {
    const auto a = apply_corruption(m, op);
    const auto b = apply_corruption(m, op);
    REQUIRE(a.size() == m.size());
    for (std::size_t k = 0; k < a.size(); ++k) {
      CHECK(a[k].mean == b[k].mean);
      CHECK(a[k].cov == b[k].cov);
    }
  }
  CHECK_THROWS_AS(apply_corruption(m, CorruptionOp::smooth(-0.1)), Error);
  CHECK_THROWS_AS(apply_corruption(m, CorruptionOp::desaturate(0.0)), Error);
  CHECK_THROWS_AS(apply_corruption(m, CorruptionOp::oversaturate(2.5)), Error);
  CHECK_THROWS_AS(apply_corruption(m, CorruptionOp::shift(Vec::Ones(2))), Error);
  CHECK_THROWS_AS(corruption_kind_from_string("pixelated"), Error);
  CHECK(corruption_kind_from_string(to_string(CorruptionKind::noisy)) == CorruptionKind::noisy);
}

TEST_CASE("sampling") {
  const auto m = bimodal_1d();
  CHECK_THROWS_AS(sample(m, 0, 1), Error);

  const auto narrow = GaussianMixture::single(Vec::Constant(3, 1.0), 1e-8 * Mat::Identity(3, 3));
  const Points p = sample(narrow, 500, 2);
  for (int i = 0; i < p.rows(); ++i) CHECK((p.row(i).transpose() - Vec::Constant(3, 1.0)).norm() < 1e-3);

  const Points big = sample(m, 100000, 3);
  CHECK(std::abs(big.col(0).mean()) < 0.05);
  CHECK(sample(m, 64, 99) == sample(m, 64, 99));
  CHECK(sample(m, 64, 99) != sample(m, 64, 100));
}

TEST_CASE("world conditions") {
  const World w = two_class_world();
  CHECK_THROWS_AS(w.index_of("C"), Error);
  CHECK_THROWS_AS(w.parse_condition("A|C"), Error);
  CHECK_THROWS_AS(w.negative(), Error);

  const auto a = w.condition("A");
  const auto ma = mixture_for_condition(w, a, 0.4);
  const auto ref = noised_mixture(w.at("A").mixture, 0.4, w.schedule());
  REQUIRE(ma.size() == ref.size());
  CHECK(ma[0].mean == ref[0].mean);
  CHECK(ma[0].cov == ref[0].cov);

  const auto uniform = w.uniform_over({"A", "B"});
  const auto prior = mixture_for_condition(w, w.unconditional(), 0.0);
  const auto u0 = mixture_for_condition(w, uniform, 0.0);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> nd;
  for (int i = 0; i < 100; ++i) {
    const Vec x = Vec::NullaryExpr(2, [&](Eigen::Index) { return 2.0 * nd(rng); });
    CHECK(u0.log_density(x) == doctest::Approx(prior.log_density(x)).epsilon(1e-12));
    const double t = 0.25;
    const auto half = mixture_for_condition(w, w.parse_condition("A|B"), t);
    const double pa = std::exp(oracle::log_density(w.at("A").mixture, w.schedule(), x, t));
    const double pb = std::exp(oracle::log_density(w.at("B").mixture, w.schedule(), x, t));
    CHECK(half.log_density(x) == doctest::Approx(std::log(0.5 * pa + 0.5 * pb)).epsilon(1e-10));
  }

  Condition misaligned{{1.0}, "bad"};
  CHECK_THROWS_AS(mixture_for_condition(w, misaligned, 0.5), Error);
  Condition unnormalized{{0.6, 0.6}, "bad"};
  CHECK_THROWS_AS(mixture_for_condition(w, unnormalized, 0.5), Error);
}

TEST_CASE("world construction errors") {
  std::vector<WorldClass> dup;
  dup.push_back({"A", GaussianMixture::single(Vec::Zero(1), Mat::Identity(1, 1)), true, {}, {}});
  dup.push_back({"A", GaussianMixture::single(Vec::Ones(1), Mat::Identity(1, 1)), true, {}, {}});
  CHECK_THROWS_AS(World(dup, NoiseSchedule::linear()), Error);

  std::vector<WorldClass> mixed;
  mixed.push_back({"A", GaussianMixture::single(Vec::Zero(1), Mat::Identity(1, 1)), true, {}, {}});
  mixed.push_back({"B", GaussianMixture::single(Vec::Zero(2), Mat::Identity(2, 2)), true, {}, {}});
  CHECK_THROWS_AS(World(mixed, NoiseSchedule::linear()), Error);

  std::vector<WorldClass> ok;
  ok.push_back({"A", GaussianMixture::single(Vec::Zero(1), Mat::Identity(1, 1)), true, {}, {}});
  CHECK_THROWS_AS(World(ok, NoiseSchedule::linear(), std::vector<double>{0.5, 0.5}), Error);
  CHECK_THROWS_AS(World({}, NoiseSchedule::linear()), Error);
}

TEST_CASE("builtin worlds") {
  for (const std::string name : {"b1", "b2", "b3"}) {
    CAPTURE(name);
    const World w = builtin_world(name);
    CHECK(w.content_labels().size() == 2);
    CHECK(w.num_classes() == 2 * (1 + builtin_corruption_suffixes().size()));
    const auto prior = w.unconditional();
    for (std::size_t i = 0; i < w.num_classes(); ++i)
      CHECK((prior.class_weights[i] > 0.0) == w.classes()[i].content);
    for (const auto& label : w.content_labels()) CHECK(w.corruption_labels(label).size() == builtin_corruption_suffixes().size());
    CHECK(w.corruptions_of(w.content_labels()[1]).class_weights.size() == w.num_classes());
  }
  const World shift = builtin_world("shift");
  CHECK(shift.num_classes() == 2);
  CHECK(shift.schedule().alpha(1.0) < 1e-3);
  CHECK(is_builtin_world("shift"));
  CHECK_FALSE(is_builtin_world("worlds/b1.json"));
  CHECK_THROWS_AS(builtin_world("b9"), Error);
  CHECK_THROWS_AS(load_world("/nonexistent/world.json"), Error);

  const World b1 = builtin_world("b1");
  const auto& sn = b1.at("B:smooth+noisy");
  CHECK(sn.base_class == "B");
  CHECK(sn.mixture[0].cov(0, 0) == doctest::Approx(b1.at("B").mixture[0].cov(0, 0) + 0.75));
}

TEST_CASE("world JSON round trip") {
  for (const auto& name : builtin_world_names()) {
    CAPTURE(name);
    const World w = builtin_world(name);
    const World back = world_from_json(world_to_json(w));
    REQUIRE(back.num_classes() == w.num_classes());
    CHECK(back.schedule().beta_max() == w.schedule().beta_max());
    for (std::size_t i = 0; i < w.num_classes(); ++i) {
      const auto& a = w.classes()[i];
      const auto& b = back.classes()[i];
      CHECK(a.label == b.label);
      CHECK(a.content == b.content);
      REQUIRE(a.mixture.size() == b.mixture.size());
      for (std::size_t k = 0; k < a.mixture.size(); ++k) {
        CHECK((a.mixture[k].mean - b.mixture[k].mean).norm() < 1e-14);
        CHECK((a.mixture[k].cov - b.mixture[k].cov).norm() < 1e-14);
      }
    }
  }
}

namespace {

std::string world_error(const nlohmann::json& j) {
  try {
    world_from_json(j);
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("world JSON errors name the offending path") {
  using nlohmann::json;
  const json good = {
      {"schedule", {{"kind", "vp-linear"}}},
      {"classes",
       {{{"label", "A"}, {"weights", {1.0}}, {"means", {{0.0, 1.0}}}, {"covs", {{{1.0, 0.0}, {0.0, 1.0}}}}},
        {{"label", "A:blur"}, {"base_class", "A"}, {"corruption", {{"kind", "smooth"}, {"params", {{"c", 0.5}}}}}}}}};
  const World w = world_from_json(good);
  CHECK(w.num_classes() == 2);
  CHECK(w.at("A:blur").mixture[0].cov(1, 1) == 1.5);

  json j = good;
  j["classes"][0]["covs"][0][0][1] = 0.5;
  CHECK(world_error(j).find("/classes/0") != std::string::npos);

  j = good;
  j["classes"][0].erase("means");
  CHECK(world_error(j).find("/classes/0/means") != std::string::npos);

  j = good;
  j["classes"][1]["base_class"] = "Z";
  CHECK(world_error(j).find("/classes/1/base_class") != std::string::npos);

  j = good;
  j["classes"][1]["corruption"]["params"]["c"] = -1.0;
  CHECK(world_error(j).find("/classes/1/corruption/params/c") != std::string::npos);

  j = good;
  j["classes"][1]["corruption"]["kind"] = "pixelated";
  CHECK(world_error(j).find("/classes/1/corruption/kind") != std::string::npos);

  j = good;
  j["schedule"]["kind"] = "ve";
  CHECK(world_error(j).find("/schedule/kind") != std::string::npos);

  j = good;
  j["classes"][1]["label"] = "A";
  CHECK(world_error(j).find("duplicate") != std::string::npos);

  CHECK(world_error(json::array()).find("world config /") == 0);
}
