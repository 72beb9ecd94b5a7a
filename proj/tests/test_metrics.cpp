#include "oracles.hpp"
#include "sdlab/metrics.hpp"
#include "sdlab/world_io.hpp"

#include <doctest.h>

#include <cmath>
#include <numbers>

using namespace sdlab;

namespace {

Points shifted(Points p, double c) {
  p.array() += c;
  return p;
}

}  // namespace

TEST_CASE("frechet closed forms") {
  const Mat one = Mat::Identity(1, 1);
  CHECK(frechet_from_moments(Vec::Zero(1), one, Vec::Ones(1), one) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(frechet_from_moments(Vec::Zero(1), one, Vec::Zero(1), 4.0 * one) == doctest::Approx(1.0).epsilon(1e-12));

  // Diagonal covariances reduce to per-axis (√a − √b)².
  const Vec da{{0.5, 2.0, 3.0}}, db{{1.5, 0.25, 3.0}};
  double expected = 0.0;
  for (int i = 0; i < 3; ++i) expected += std::pow(std::sqrt(da[i]) - std::sqrt(db[i]), 2);
  CHECK(std::abs(frechet_from_moments(Vec::Zero(3), da.asDiagonal().toDenseMatrix(), Vec::Zero(3),
                                      db.asDiagonal().toDenseMatrix()) - expected) < 1e-10);

  // Commuting (jointly rotated) covariances keep the same value.
  const Mat q = Eigen::HouseholderQR<Mat>(Mat::Random(3, 3)).householderQ();
  const Mat ra = q * da.asDiagonal() * q.transpose(), rb = q * db.asDiagonal() * q.transpose();
  CHECK(std::abs(frechet_from_moments(Vec::Zero(3), ra, Vec::Zero(3), rb) - expected) < 1e-10);

  Mat s(2, 2);
  s << 2.0, 0.6, 0.6, 1.0;
  const Mat r = sqrtm_psd(s);
  CHECK((r * r - s).norm() < 1e-12);
  CHECK((r - r.transpose()).norm() < 1e-15);
  Mat nearly(2, 2);
  nearly << 1.0, 1.0, 1.0, 1.0 - 1e-17;
  CHECK(sqrtm_psd(nearly).allFinite());
}

TEST_CASE("metrics vanish on identical sets and are symmetric") {
  const World w = builtin_world("b2");
  const Points a = sample(w.at("upper").mixture, 500, 1);
  const Points b = sample(w.at("lower").mixture, 400, 2);
  CHECK(std::abs(frechet_gaussian(a, a)) < 1e-12);
  CHECK(sliced_w2(a, a, 64, 3) == 0.0);
  CHECK(energy_distance(a, a) == 0.0);
  CHECK(frechet_gaussian(a, b) == doctest::Approx(frechet_gaussian(b, a)).epsilon(1e-10));
  CHECK(sliced_w2(a, b, 64, 3) == doctest::Approx(sliced_w2(b, a, 64, 3)).epsilon(1e-12));
  CHECK(energy_distance(a, b) == doctest::Approx(energy_distance(b, a)).epsilon(1e-12));
  CHECK(frechet_gaussian(a, b) > 1.0);
  CHECK(sliced_w2(a, b, 64, 3) > 1.0);
  CHECK(energy_distance(a, b) > 0.5);
}

TEST_CASE("independent samples of one mixture are close") {
  const World w = builtin_world("b2");
  const auto& m = w.at("upper").mixture;
  const Points a = sample(m, 10000, 4), b = sample(m, 10000, 5);
  CHECK(frechet_gaussian(a, b) < 1e-2);
  CHECK(sliced_w2(a, b, 256, 6) < 1e-2);
  CHECK(energy_distance(a.topRows(3000), b.topRows(3000)) < 1e-2);
}

TEST_CASE("sliced w2 in 1D") {
  const Points a = sample(GaussianMixture::single(Vec::Zero(1), Mat::Identity(1, 1)), 300, 7);
  CHECK(sliced_w2(a, shifted(a, 1.5), 16, 0) == doctest::Approx(2.25).epsilon(1e-12));
  CHECK(w2_squared_1d({0.0, 1.0}, {0.0, 1.0}) == 0.0);
  // Unequal sizes: {0, 1} vs {0, 0.5, 1} by quantile functions.
  // F_a⁻¹ = 0 on (0,½], 1 on (½,1]; F_b⁻¹ = 0, 0.5, 1 on thirds.
  const double expected = (1.0 / 6.0) * 0.25 + (1.0 / 6.0) * 0.25;
  CHECK(w2_squared_1d({1.0, 0.0}, {0.5, 0.0, 1.0}) == doctest::Approx(expected).epsilon(1e-14));
  CHECK_THROWS_AS(w2_squared_1d({}, {1.0}), Error);
}

TEST_CASE("sliced w2 is deterministic and converges in the slice count") {
  const World w = builtin_world("b2");
  const Points a = sample(w.at("upper").mixture, 2000, 8);
  const Points b = sample(w.at("lower:noisy").mixture, 2000, 9);
  CHECK(sliced_w2(a, b, 128, 4) == sliced_w2(a, b, 128, 4));
  const double coarse = sliced_w2(a, b, 512, 1), fine = sliced_w2(a, b, 4096, 2);
  CHECK(coarse == doctest::Approx(fine).epsilon(0.02));
  const Mat dirs = slice_directions(3, 50, 1);
  CHECK(dirs.rows() == 50);
  for (int i = 0; i < 50; ++i) CHECK(dirs.row(i).norm() == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(slice_directions(1, 4, 2).cwiseAbs().minCoeff() == 1.0);
}

TEST_CASE("cached references agree with the direct computation") {
  const World w = builtin_world("b2");
  const Points ref = sample(w.at("upper").mixture, 700, 10);
  const Points a = sample(w.at("upper:smooth+noisy").mixture, 300, 11);
  const SlicedReference sr(ref, 128, 5);
  CHECK(sr.distance(a) == doctest::Approx(sliced_w2(a, ref, 128, 5)).epsilon(1e-12));
  const EnergyReference er(ref);
  CHECK(er.distance(a) == doctest::Approx(energy_distance(a, ref)).epsilon(1e-12));
}

TEST_CASE("log-likelihood") {
  const auto m = GaussianMixture::isotropic({0.3, 0.7}, {Vec::Constant(2, -10.0), Vec::Constant(2, 10.0)}, {0.5, 2.0});
  Points at_mode(1, 2);
  at_mode << 10.0, 10.0;
  const double peak = std::log(0.7) - std::log(2.0 * std::numbers::pi * 2.0);
  CHECK(mean_loglik(m, at_mode) == doctest::Approx(peak).epsilon(1e-12));

  double prev = mean_loglik(m, at_mode);
  for (int k = 1; k <= 5; ++k) {
    const double ll = mean_loglik(m, shifted(at_mode, k * std::sqrt(2.0)));
    CHECK(ll < prev);
    prev = ll;
  }

  const World w = builtin_world("b1");
  const Points p = sample(w.at("B").mixture, 50, 12);
  CHECK(mean_loglik(w, w.condition("B"), p) == doctest::Approx(mean_loglik(w.at("B").mixture, p)));
  CHECK(mean_loglik(w, w.condition("B"), p) > mean_loglik(w, w.condition("A"), p));
  CHECK_THROWS_AS(mean_loglik(m, Points::Zero(3, 1)), Error);
}

TEST_CASE("metric report") {
  const World w = builtin_world("b1");
  const Points a = sample(w.at("B").mixture, 400, 13);
  const Points b = sample(w.at("A").mixture, 300, 14);
  const auto r = metric_report(a, b, 64, 1);
  CHECK(r.n == 400);
  CHECK(r.frechet == doctest::Approx(frechet_gaussian(a, b)));
  CHECK(r.sliced_w2 == doctest::Approx(sliced_w2(a, b, 64, 1)));
  CHECK(r.energy_dist == doctest::Approx(energy_distance(a, b)));
  CHECK(std::isfinite(r.mean_loglik_target));
  CHECK_THROWS_AS(frechet_gaussian(a, Points::Zero(5, 2)), Error);
}
