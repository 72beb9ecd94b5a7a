#include "sdlab/experiment.hpp"
#include "sdlab/flow.hpp"
#include "sdlab/kernels.hpp"
#include "sdlab/metrics.hpp"
#include "sdlab/oracle.hpp"
#include "sdlab/transport.hpp"
#include "sdlab/world_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

using namespace sdlab;
using nlohmann::json;

namespace {

constexpr int kExitAborted = 3;

struct Globals {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out;
  int threads = 0;
};

// "1,2;3,4" -> two 2D points
Points parse_points(const std::string& text, int dim) {
  std::vector<std::vector<double>> rows;
  std::stringstream rs(text);
  std::string row;
  while (std::getline(rs, row, ';')) {
    std::vector<double> v;
    std::stringstream cs(row);
    std::string cell;
    while (std::getline(cs, cell, ',')) v.push_back(std::stod(cell));
    if (static_cast<int>(v.size()) != dim) throw Error("point '" + row + "' does not have " + std::to_string(dim) + " coordinates");
    rows.push_back(std::move(v));
  }
  if (rows.empty()) throw Error("no points given");
  Points p(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (int c = 0; c < dim; ++c) p(r, c) = rows[r][c];
  }
  return p;
}

json points_json(const Points& p) {
  json out = json::array();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < p.cols(); ++c) row.push_back(p(r, c));
    out.push_back(row);
  }
  return out;
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  out << text;
}

struct FlowArgs {
  std::string world = "b1";
  std::string cond = "uncond";
  std::string src, tgt;
  std::string points;
  std::string in_csv;
  int n = 8;
  int steps = 200;
  std::string solver = "heun";
  std::string grid = "uniform";
  double guidance = 0.0;
  std::string uncond = "uncond";
  bool no_denoise = false;
};

OdeSpec flow_spec(const FlowArgs& a, const World& w) {
  OdeSpec s;
  s.steps = a.steps;
  s.solver = solver_from_string(a.solver);
  s.grid = grid_from_string(a.grid);
  s.condition = w.parse_condition(a.cond);
  s.denoise_final = !a.no_denoise;
  if (a.guidance != 0.0) s.guidance = Guidance{w.parse_condition(a.uncond), a.guidance};
  return s;
}

Points flow_inputs(const FlowArgs& a, int dim, std::uint64_t seed, bool noise) {
  if (!a.in_csv.empty()) return read_points_csv(a.in_csv);
  if (!a.points.empty()) return parse_points(a.points, dim);
  if (!noise) throw Error("give input points with --x or --in");
  if (a.n < 1) throw Error("--n must be >= 1");
  return sample(GaussianMixture::single(Vec::Zero(dim), Mat::Identity(dim, dim)), a.n, seed);
}

int run_flow(const std::string& mode, const FlowArgs& a, const Globals& g) {
  Denoiser d(load_world(a.world));
  const World& w = d.world();
  OdeSpec spec = flow_spec(a, w);
  const Points in = flow_inputs(a, w.dim(), g.seed, mode == "sample");
  if (in.cols() != w.dim()) throw Error("input points do not match the world dimension");
  Points out(in.rows(), in.cols());
  long evals = 0, endpoint = 0;
  for (Eigen::Index i = 0; i < in.rows(); ++i) {
    const Vec x = in.row(i).transpose();
    FlowResult r;
    if (mode == "sample") {
      r = generate(d, x, spec);
    } else if (mode == "invert") {
      r = invert(d, x, spec);
    } else {
      r = ddib_translate(d, x, w.parse_condition(a.src), w.parse_condition(a.tgt), spec);
    }
    out.row(i) = r.x.transpose();
    evals += r.n_evals;
    endpoint += r.n_endpoint_evals;
  }
  json j = {{"mode", mode},
            {"world", a.world},
            {"solver", a.solver},
            {"steps", a.steps},
            {"inputs", points_json(in)},
            {"outputs", points_json(out)},
            {"n_evals", evals},
            {"n_endpoint_evals", endpoint}};
  if (mode == "translate") {
    j["src"] = a.src;
    j["tgt"] = a.tgt;
  } else {
    j["condition"] = a.cond;
  }
  emit(j.dump(2) + "\n", g.out);
  return 0;
}

std::vector<double> parse_sweep(const std::string& s) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string p;
  while (std::getline(ss, p, ':')) parts.push_back(p);
  if (parts.size() != 3) throw Error("--eps-sweep expects lo:hi:n");
  const double lo = std::stod(parts[0]);
  const double hi = std::stod(parts[1]);
  const int n = std::stoi(parts[2]);
  if (!(lo > 0.0 && hi >= lo && n >= 1)) throw Error("--eps-sweep needs 0 < lo <= hi and n >= 1");
  std::vector<double> out;
  for (int i = 0; i < n; ++i) {
    out.push_back(n == 1 ? lo : lo * std::pow(hi / lo, static_cast<double>(i) / (n - 1)));
  }
  return out;
}

int run_transport(const std::string& world, const std::string& src, const std::string& tgt, const std::string& sweep,
                  int n, int steps, int max_iter, const Globals& g) {
  Denoiser d(load_world(world));
  const World& w = d.world();
  const Condition cs = w.parse_condition(src);
  const Condition ct = w.parse_condition(tgt);
  const Points xs = sample(w.mixture(cs), n, g.seed);
  const Points ys = sample(w.mixture(ct), n, g.seed + 1);
  OdeSpec spec;
  spec.steps = steps;
  const PairedPoints pairs = coupling_from_bridge(d, xs, cs, ct, spec);
  // the same sources paired with a random permutation of the bridge targets
  std::vector<Eigen::Index> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::mt19937_64 rng(g.seed + 2);
  std::shuffle(perm.begin(), perm.end(), rng);
  PairedPoints shuffled{xs, Points(n, w.dim())};
  for (int i = 0; i < n; ++i) shuffled.tgt.row(i) = pairs.tgt.row(perm[i]);

  const Mat cost = sq_euclidean_cost(xs, ys);
  const Vec a = Vec::Constant(n, 1.0 / n);
  std::ostringstream out;
  out << "epsilon,discrepancy,random_discrepancy,iterations,converged,residual\n";
  for (double eps : parse_sweep(sweep)) {
    const CouplingPlan plan = sinkhorn(cost, a, a, eps, max_iter, 1e-6);
    out << format_double(eps) << "," << format_double(coupling_discrepancy(pairs, plan, ys)) << ","
        << format_double(coupling_discrepancy(shuffled, plan, ys)) << "," << plan.iterations << ","
        << (plan.converged ? 1 : 0) << "," << format_double(plan.residual) << "\n";
  }
  emit(out.str(), g.out);
  return 0;
}

int run_metrics(const std::string& a_path, const std::string& b_path, int slices, const std::string& world,
                const std::string& cond, const Globals& g) {
  const Points a = read_points_csv(a_path);
  const Points b = read_points_csv(b_path);
  MetricReport r = metric_report(a, b, slices, g.seed);
  json j = {{"frechet", r.frechet}, {"sliced_w2", r.sliced_w2}, {"energy_dist", r.energy_dist}, {"n", r.n}};
  if (!world.empty()) {
    const World w = load_world(world);
    j["mean_loglik_target"] = mean_loglik(w, w.parse_condition(cond), a);
  } else {
    j["mean_loglik_target"] = nullptr;
  }
  emit(j.dump(2) + "\n", "");
  return 0;
}

int run_bench(const std::string& kind, const std::string& world, const std::string& config, long iters,
              int scenarios, const Globals& g) {
  ExperimentConfig c;
  if (!config.empty()) {
    c = load_experiment(config);
  } else {
    c = default_experiment(world);
    c.output_dir = "out/" + kind + "_" + world;
  }
  if (g.seed_set) c.seed = g.seed;
  if (!g.out.empty()) c.output_dir = g.out;
  if (iters >= 0) c.iters = iters;
  if (scenarios > 0) c.scenarios = scenarios;
  if (g.threads == 0 && c.threads > 0) configure_threads(c.threads);
  BenchmarkResult r;
  if (kind == "table1" || kind == "run") r = run_benchmark(c);
  else if (kind == "ablate-stage1") r = run_ablation_stage1(c);
  else r = run_bridge_study(c);

  std::printf("%-22s %12s %12s %12s %14s %12s %s\n", "method", "frechet", "sliced_w2", "loglik", "n_evals", "fit_ops",
              "aborted");
  for (const auto& m : r.summary["methods"]) {
    const auto& f = m["mean_final"];
    std::printf("%-22s %12.5g %12.5g %12.5g %14lld %12lld %s\n", m["name"].get<std::string>().c_str(),
                f["frechet"].get<double>(), f["sliced_w2"].get<double>(), f["mean_loglik_target"].get<double>(),
                m["n_evals"].get<long long>(), m["fit_ops"].get<long long>(), m["aborted"].get<bool>() ? "yes" : "no");
  }
  std::printf("outputs: %s (config_hash %s)\n", c.output_dir.c_str(), r.summary["config_hash"].get<std::string>().c_str());
  return r.any_aborted() ? kExitAborted : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdlab: score distillation on analytic worlds"};
  app.require_subcommand(1);
  Globals g;
  app.add_option_function<std::uint64_t>(
         "--seed", [&](const std::uint64_t& s) { g.seed = s; g.seed_set = true; }, "RNG seed")
      ->configurable(false);
  app.add_option("--out", g.out, "output file or directory");
  app.add_option("--threads", g.threads, "worker threads (falls back to SDLAB_THREADS)");
  app.fallthrough();

  std::function<int()> action;

  auto* oracle = app.add_subcommand("oracle", "score oracle diagnostics");
  oracle->require_subcommand(1);
  int fd_queries = 200;
  auto* check = oracle->add_subcommand("check", "score vs central differences of the log-density");
  check->add_option("--queries", fd_queries, "random queries")->check(CLI::PositiveNumber);
  check->callback([&] {
    action = [&] {
      const FdReport r = finite_difference_check(fd_queries, g.seed);
      std::printf("queries %d  max relative error %.3e  (%.3f s)\n", r.queries, r.max_rel_error, r.seconds);
      return r.max_rel_error < 1e-6 ? 0 : 1;
    };
  });

  auto* flow = app.add_subcommand("flow", "probability-flow ODE");
  flow->require_subcommand(1);
  FlowArgs fa;
  for (const char* mode : {"sample", "invert", "translate"}) {
    const std::string m(mode);
    auto* sc = flow->add_subcommand(mode, m == "sample" ? "integrate noise to data" : m == "invert" ? "integrate data to noise"
                                                                                                   : "invert under --src, generate under --tgt");
    sc->add_option("--world", fa.world, "builtin world or JSON file")->capture_default_str();
    if (std::string(mode) == "translate") {
      sc->add_option("--src", fa.src, "source condition")->required();
      sc->add_option("--tgt", fa.tgt, "target condition")->required();
    } else {
      sc->add_option("--cond", fa.cond, "condition")->capture_default_str();
    }
    sc->add_option("--x", fa.points, "points, e.g. \"1,2;3,4\"");
    sc->add_option("--in", fa.in_csv, "headerless CSV of points");
    if (std::string(mode) == "sample") sc->add_option("--n", fa.n, "noise draws when no points are given");
    sc->add_option("--steps", fa.steps)->check(CLI::PositiveNumber)->capture_default_str();
    sc->add_option("--solver", fa.solver)->check(CLI::IsMember({"euler", "heun"}))->capture_default_str();
    sc->add_option("--grid", fa.grid)->check(CLI::IsMember({"uniform", "quadratic"}))->capture_default_str();
    sc->add_option("--guidance", fa.guidance, "CFG scale (0 disables)");
    sc->add_option("--uncond", fa.uncond, "unconditional condition for guidance");
    sc->add_flag("--no-denoise", fa.no_denoise, "keep the t_min state instead of mapping it to t = 0");
    sc->callback([&, m = std::string(mode)] { action = [&, m] { return run_flow(m, fa, g); }; });
  }

  auto* distill = app.add_subcommand("distill", "particle distillation");
  distill->require_subcommand(1);
  std::string run_config;
  auto* drun = distill->add_subcommand("run", "run every method in a config");
  drun->add_option("--config", run_config, "experiment JSON")->required()->check(CLI::ExistingFile);
  drun->callback([&] { action = [&] { return run_bench("run", "", run_config, -1, 0, g); }; });

  auto* transport = app.add_subcommand("transport", "entropic OT reference");
  transport->require_subcommand(1);
  std::string tw = "shift", tsrc = "A", ttgt = "B", sweep = "1e-3:1:8";
  int tn = 256, tsteps = 100, titer = 2000;
  auto* compare = transport->add_subcommand("compare", "DDIB pairs vs Sinkhorn barycentric map");
  compare->add_option("--world", tw)->capture_default_str();
  compare->add_option("--src", tsrc)->capture_default_str();
  compare->add_option("--tgt", ttgt)->capture_default_str();
  compare->add_option("--eps-sweep", sweep, "lo:hi:n, log-spaced")->capture_default_str();
  compare->add_option("--n", tn, "samples per side")->check(CLI::PositiveNumber)->capture_default_str();
  compare->add_option("--steps", tsteps, "Heun steps per PF-ODE leg")->check(CLI::PositiveNumber);
  compare->add_option("--max-iter", titer)->check(CLI::PositiveNumber);
  compare->callback([&] { action = [&] { return run_transport(tw, tsrc, ttgt, sweep, tn, tsteps, titer, g); }; });

  auto* metrics = app.add_subcommand("metrics", "distribution distances");
  metrics->require_subcommand(1);
  std::string ma, mb, mworld, mcond = "uncond";
  int slices = 1024;
  auto* report = metrics->add_subcommand("report", "metric report for two point files");
  report->add_option("--a", ma, "headerless CSV")->required()->check(CLI::ExistingFile);
  report->add_option("--b", mb, "headerless CSV")->required()->check(CLI::ExistingFile);
  report->add_option("--slices", slices)->check(CLI::PositiveNumber)->capture_default_str();
  report->add_option("--world", mworld, "world for mean_loglik_target of --a");
  report->add_option("--cond", mcond, "condition for mean_loglik_target");
  report->callback([&] { action = [&] { return run_metrics(ma, mb, slices, mworld, mcond, g); }; });

  auto* bench = app.add_subcommand("bench", "benchmark studies");
  bench->require_subcommand(1);
  std::string bworld = "b1", bconfig;
  long biters = -1;
  int bscen = 0;
  const std::pair<const char*, const char*> kinds[] = {
      {"table1", "every configured method on shared scenarios"},
      {"ablate-stage1", "ours with and without the stage-1 SDS phase"},
      {"bridge", "ours against the full PF-ODE bridge, with and without warmup"}};
  for (const auto& [kind, help] : kinds) {
    auto* sc = bench->add_subcommand(kind, help);
    sc->add_option("--world", bworld, "builtin world")->check(CLI::IsMember(builtin_world_names()))->capture_default_str();
    sc->add_option("--config", bconfig, "experiment JSON (overrides --world)")->check(CLI::ExistingFile);
    sc->add_option("--iters", biters, "override iteration count");
    sc->add_option("--scenarios", bscen, "override scenario count");
    sc->callback([&, k = std::string(kind)] { action = [&, k] { return run_bench(k, bworld, bconfig, biters, bscen, g); }; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    configure_threads(g.threads);
    return action ? action() : 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
