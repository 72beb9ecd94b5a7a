#include "sdlab/distill.hpp"
#include "sdlab/kernels.hpp"
#include "sdlab/world_io.hpp"

#include <benchmark/benchmark.h>

#include <random>

using namespace sdlab;

namespace {

struct Batch {
  GaussianMixture m;
  NoiseSchedule sched = NoiseSchedule::linear();
  Points x;
  std::vector<double> t;
};

Batch make_batch(int n, int dim, int components) {
  std::mt19937_64 rng(1);
  Batch b{random_mixture(rng, dim, components)};
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> ut(0.02, 0.98);
  b.x = Points::NullaryExpr(n, dim, [&](Eigen::Index, Eigen::Index) { return 2.0 * nd(rng); });
  for (int i = 0; i < n; ++i) b.t.push_back(ut(rng));
  return b;
}

Exec exec_of(const benchmark::State& s) { return s.range(1) ? Exec::parallel : Exec::serial; }

void BM_batch_eps(benchmark::State& state) {
  const auto b = make_batch(static_cast<int>(state.range(0)), 4, 8);
  Points out;
  for (auto _ : state) {
    batch_eps(b.m, b.sched, b.x, b.t, out, exec_of(state));
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_batch_eps)->ArgsProduct({{1 << 10, 1 << 14}, {0, 1}})->ArgNames({"n", "parallel"});

void BM_reference_score(benchmark::State& state) {
  const auto b = make_batch(static_cast<int>(state.range(0)), 4, 8);
  for (auto _ : state) {
    for (Eigen::Index i = 0; i < b.x.rows(); ++i) {
      benchmark::DoNotOptimize(reference::noised_score(b.m, b.sched, b.x.row(i).transpose(), b.t[i]).data());
    }
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_reference_score)->Arg(1 << 10)->ArgName("n");

void BM_generate_batch(benchmark::State& state) {
  const World w = builtin_world("b2");
  const Denoiser d(w);
  OdeSpec spec;
  spec.steps = 50;
  spec.condition = w.condition("upper");
  const Points z = sample(GaussianMixture::single(Vec::Zero(2), Mat::Identity(2, 2)), static_cast<int>(state.range(0)), 2);
  for (auto _ : state) benchmark::DoNotOptimize(generate_batch(d, z, spec, exec_of(state)).data());
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_generate_batch)->ArgsProduct({{256}, {0, 1}})->ArgNames({"n", "parallel"});

void BM_distill_run(benchmark::State& state) {
  const World w = builtin_world("b2");
  const Denoiser d(w);
  DistillSpec spec;
  spec.name = "ours";
  spec.method = OursParams{};
  spec.target = "upper";
  const Points theta0 = sample(GaussianMixture::single(Vec::Zero(2), Mat::Identity(2, 2)), static_cast<int>(state.range(0)), 3);
  RunCallbacks cb;
  cb.exec = exec_of(state);
  cb.log_every = 1000;
  cb.eval_every = 1000;
  for (auto _ : state) {
    ParticleSystem ps(theta0, Renderer::identity(2), OptimizerConfig{});
    benchmark::DoNotOptimize(run(d, ps, spec, 100, cb).n_evals);
  }
  state.SetItemsProcessed(state.iterations() * state.range(0) * 100);
}
BENCHMARK(BM_distill_run)->ArgsProduct({{256}, {0, 1}})->ArgNames({"n", "parallel"});

}  // namespace

BENCHMARK_MAIN();
