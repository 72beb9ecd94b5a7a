#include <doctest.h>

#include "sdlab/experiment.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace sdlab;
using nlohmann::json;

namespace {

json small(json extra = json::object()) {
  json j = {{"world", "b1"},
            {"scenarios", 2},
            {"particles", {{"n", 8}}},
            {"iters", 20},
            {"eval_every", 10},
            {"log_every", 5},
            {"snapshot_every", 0},
            {"metrics_n", 200},
            {"slices", 16},
            {"seed", 7}};
  j.update(extra);
  return j;
}

std::string error_of(const json& j) {
  try {
    parse_experiment(j);
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

// NaN marks rows without an evaluation, so compare bit patterns
bool same(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

RunOptions memory_only() { return {false, true, Exec::serial}; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sdlab_test_" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("defaults follow the table protocol") {
  const auto c = default_experiment("b1");
  CHECK(c.scenarios == 16);
  CHECK(c.n_particles == 64);
  CHECK(c.iters == 2500);
  CHECK(c.optimizer.lr == doctest::Approx(0.01));
  CHECK(c.targets == c.world->content_labels());
  REQUIRE(!c.methods.empty());
  const auto& names = c.methods;
  auto has = [&](const std::string& n) {
    for (const auto& m : names) {
      if (m.name == n) return true;
    }
    return false;
  };
  CHECK(has("sds"));
  CHECK(has("ours"));
  CHECK(has("vsd"));
}

TEST_CASE("method defaults") {
  const auto sds = parse_method(json{{"method", "sds"}}, "/m");
  CHECK(std::get<SdsParams>(sds.method).s == 100.0);
  CHECK(sds.name == "sds");
  const auto ours = parse_method(json{{"method", "ours"}}, "/m");
  CHECK(std::get<OursParams>(ours.method).w == 25.0);
  CHECK(std::get<OursParams>(ours.method).stage1_steps == 500);
  CHECK(std::get<NfsdParams>(parse_method(json{{"method", "nfsd"}}, "/m").method).s == 7.5);
  CHECK(std::get<VsdParams>(parse_method(json{{"method", "vsd"}}, "/m").method).s == 7.5);
  const auto csd = std::get<CsdParams>(parse_method(json{{"method", "csd"}}, "/m").method);
  CHECK(csd.w1 == 40.0);
  CHECK(csd.w2 == 40.0);
  CHECK(csd.anneal_steps == 500);
}

TEST_CASE("schema errors name the offending key") {
  CHECK(error_of(small({{"bogus", 1}})).find("/bogus: unknown key") != std::string::npos);
  CHECK(error_of(small({{"methods", {{{"method", "magic"}}}}})).find("/methods/0/method: unknown method 'magic'") !=
        std::string::npos);
  CHECK(error_of(small({{"methods", {{{"method", "sds"}}, {{"method", "sds"}}}}}))
            .find("/methods/1/name: duplicate method name") != std::string::npos);
  CHECK(error_of(small({{"methods", {{{"method", "sds"}, {"s", "x"}}}}})).find("/methods/0/s: expected a number") !=
        std::string::npos);
  CHECK(error_of(small({{"methods", {{{"method", "ours"}, {"w", 0}}}}})).find("/methods/0/w: must be > 0") !=
        std::string::npos);
  CHECK(error_of(small({{"methods", {{{"method", "sds"}, {"name", "a b"}}}}})).find("/methods/0/name") !=
        std::string::npos);
  CHECK(error_of(small({{"targets", {"nope"}}})).find("/targets/0") != std::string::npos);
  CHECK(error_of(small({{"targets", json::array()}})).find("/targets") != std::string::npos);
  CHECK(error_of(small({{"scenarios", 0}})).find("/scenarios: must be >= 1") != std::string::npos);
  CHECK(error_of(small({{"particles", {{"n", 0}}}})).find("/particles/n: must be >= 1") != std::string::npos);
  CHECK(error_of(small({{"particles", {{"init", "random"}}}})).find("/particles/init") != std::string::npos);
  CHECK(error_of(small({{"particles", {{"init", "class:nope"}}}})).find("/particles/init") != std::string::npos);
  CHECK(error_of(small({{"optimizer", {{"lr", -1}}}})).find("/optimizer/lr: must be > 0") != std::string::npos);
  CHECK(error_of(small({{"optimizer", {{"beta1", 1.0}}}})).find("/optimizer/beta1") != std::string::npos);
  CHECK(error_of(small({{"optimizer", {{"kind", "rmsprop"}}}})).find("/optimizer/kind") != std::string::npos);
  CHECK(error_of(small({{"renderer", {{"kind", "multiview"}, {"preset", "b9"}}}}))
            .find("/renderer/preset: unknown renderer preset") != std::string::npos);
  CHECK(error_of(small({{"renderer", {{"kind", "multiview"}, {"preset", "b3"}}}}))
            .find("renderer output dimension does not match the world") != std::string::npos);
  CHECK(error_of(small({{"world", "b7"}})).find("/world") != std::string::npos);
  CHECK(error_of(small({{"seed", -3}})).find("/seed") != std::string::npos);
  CHECK(error_of(small({{"iters", -1}})).find("/iters") != std::string::npos);
  CHECK(error_of(small({{"metrics_n", 1}})).find("/metrics_n") != std::string::npos);
  CHECK(error_of(small({{"methods", {{{"method", "bridge"}, {"ode", {{"solver", "rk4"}}}}}}}))
            .find("/methods/0/ode") != std::string::npos);
  CHECK(error_of(small({{"methods", {{{"method", "csd"}, {"anneal_steps", -1}}}}}))
            .find("/methods/0/anneal_steps") != std::string::npos);
}

TEST_CASE("load_experiment reports unreadable and malformed files") {
  CHECK_THROWS_AS(load_experiment("/nonexistent/sdlab.json"), Error);
  const auto dir = scratch_dir("bad_json");
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "c.json") << "{ not json";
  CHECK_THROWS_WITH_AS(load_experiment((dir / "c.json").string()), doctest::Contains("not valid JSON"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("b3 picks up the multiview renderer") {
  const auto c = parse_experiment(small({{"world", "b3"}}));
  CHECK(c.renderer.kind() == Renderer::Kind::multiview);
  CHECK(c.renderer.views() == 3);
  CHECK(c.renderer.param_dim() == 4);
  CHECK(c.renderer.out_dim() == 2);
}

TEST_CASE("config JSON round trip keeps the hash") {
  json j = small({{"methods",
                   {{{"method", "sds"}, {"s", 50}},
                    {{"method", "ours"}, {"w", 10}, {"stage1_steps", 3}, {"blend_steps", 2}},
                    {{"method", "vsd"}, {"estimator", {{"kind", "gmm"}, {"K", 3}}}},
                    {{"method", "bridge"}, {"from_scratch", true}, {"ode", {{"steps", 4}}}},
                    {{"method", "csd"}, {"w2", 5}, {"anneal_steps", 0}},
                    {{"method", "nfsd"}, {"t_sampling", {{"kind", "annealed"}, {"t_hi_final", 0.4}}}},
                    {{"method", "dds"}, {"w_t", "sigma_sq"}}}},
                  {"particles", {{"n", 8}, {"init", "corruption-of-target"}}},
                  {"optimizer", {{"kind", "sgd"}, {"lr", 0.5}}}});
  const auto a = parse_experiment(j);
  const json ja = experiment_to_json(a);
  const auto b = parse_experiment(ja);
  const json jb = experiment_to_json(b);
  CHECK(ja == jb);
  CHECK(config_hash(ja) == config_hash(jb));
  CHECK(config_hash(ja).size() == 16);
  json changed = ja;
  changed["seed"] = 8;
  CHECK(config_hash(changed) != config_hash(ja));
  auto moved = a;
  moved.output_dir = "elsewhere";
  moved.threads = 3;
  CHECK(experiment_hash(moved) == experiment_hash(a));
  moved.seed = 99;
  CHECK(experiment_hash(moved) != experiment_hash(a));
  CHECK(a.init.kind == ParticleInit::Kind::corruption_of_target);
  CHECK(b.methods.size() == 7);
}

TEST_CASE("config hash is FNV-1a of the compact dump") {
  // FNV-1a 64 of the two bytes "{}"
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : std::string("{}")) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  CHECK(config_hash(json::object()) == buf);
}

TEST_CASE("format_double round trips and leaves NaN blank") {
  for (double v : {0.0, -1.5, 0.1, 1e-300, 12345.678901234567, std::nextafter(1.0, 2.0)}) {
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(std::numeric_limits<double>::quiet_NaN()).empty());
}

TEST_CASE("points CSV round trip and errors") {
  const auto dir = scratch_dir("points");
  std::filesystem::create_directories(dir);
  Points p(3, 2);
  p << 0.1, -2.0, 1e-17, 3.0, 5.5, 1.0 / 3.0;
  std::ofstream(dir / "p.csv") << "# comment\n" << points_csv(p);
  const Points q = read_points_csv((dir / "p.csv").string());
  CHECK(q == p);
  std::ofstream(dir / "ragged.csv") << "1,2\n3\n";
  CHECK_THROWS_WITH_AS(read_points_csv((dir / "ragged.csv").string()), doctest::Contains(":2: expected 2 columns"),
                       Error);
  std::ofstream(dir / "nan.csv") << "1,x\n";
  CHECK_THROWS_WITH_AS(read_points_csv((dir / "nan.csv").string()), doctest::Contains("is not a number"), Error);
  std::ofstream(dir / "empty.csv") << "# nothing\n";
  CHECK_THROWS_WITH_AS(read_points_csv((dir / "empty.csv").string()), doctest::Contains("no rows"), Error);
  CHECK_THROWS_AS(read_points_csv((dir / "missing.csv").string()), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("zero iterations yields initialization metrics only") {
  const auto c = parse_experiment(small({{"iters", 0}, {"methods", {{{"method", "sds"}}}}}));
  const auto r = run_benchmark(c, memory_only());
  const auto& m = r.at("sds");
  REQUIRE(m.records.size() == 2);
  for (std::size_t k = 0; k < m.records.size(); ++k) {
    const auto& rec = m.records[k];
    REQUIRE(rec.rows.size() == 1);
    CHECK(rec.rows[0].iter == 0);
    CHECK(rec.n_evals == 0);
    CHECK(m.scenarios[k].final_metrics.frechet == doctest::Approx(m.scenarios[k].init_metrics.frechet).epsilon(1e-12));
  }
  CHECK_THROWS_AS(r.at("ours"), Error);
}

TEST_CASE("methods share initial rows") {
  const auto c = parse_experiment(small({{"iters", 0},
                                         {"methods",
                                          {{{"method", "sds"}, {"s", 100}},
                                           {{"method", "ours"}, {"w", 25}},
                                           {{"method", "vsd"}, {"s", 7.5}}}}}));
  const auto r = run_benchmark(c, memory_only());
  REQUIRE(r.methods.size() == 3);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& ref = r.methods[0].records[k].rows.front().metrics;
    for (const auto& m : r.methods) CHECK(m.records[k].rows.front().metrics == ref);
  }
}

TEST_CASE("oracle-call accounting per iteration") {
  const long n = 8, iters = 20, scen = 2;
  const auto c = parse_experiment(small({{"methods",
                                          {{{"method", "sds"}},
                                           {{"method", "ours"}, {"stage1_steps", 0}},
                                           {{"method", "ours"}, {"name", "ours_staged"}, {"stage1_steps", 5}},
                                           {{"method", "vsd"}},
                                           {{"method", "nfsd"}},
                                           {{"method", "nfsd"}, {"name", "nfsd_low"}, {"t_sampling", {{"t_hi", 0.19}}}},
                                           {{"method", "nfsd"}, {"name", "nfsd_high"}, {"t_sampling", {{"t_lo", 0.3}}}},
                                           {{"method", "bridge"}, {"from_scratch", true}, {"ode", {{"steps", 4}}}}}}}));
  const auto r = run_benchmark(c, memory_only());
  const long base = n * iters * scen;
  CHECK(r.at("sds").total_evals() == 2 * base);
  CHECK(r.at("ours").total_evals() == 2 * base);
  CHECK(r.at("ours_staged").total_evals() == 2 * base);
  CHECK(r.at("vsd").total_evals() == 2 * base);
  CHECK(r.at("vsd").total_fit_ops() > 0);
  CHECK(r.at("sds").total_fit_ops() == 0);
  CHECK(r.at("nfsd_low").total_evals() == 3 * base);
  CHECK(r.at("nfsd_high").total_evals() == 2 * base);
  const long mixed = r.at("nfsd").total_evals();
  CHECK(mixed > 2 * base);
  CHECK(mixed < 3 * base);
  // two Heun solves of 4 steps, each with a closing Tweedie query
  CHECK(r.at("bridge").total_evals() == 2 * (2 * 4 + 1) * base);
  for (const auto& m : r.methods) {
    for (const auto& rec : m.records) {
      long prev = -1, iter = -1;
      for (const auto& row : rec.rows) {
        CHECK(row.n_evals >= prev);
        CHECK(row.iter > iter);
        prev = row.n_evals;
        iter = row.iter;
      }
      CHECK(rec.rows.back().iter == iters);
    }
  }
}

TEST_CASE("record CSV layout") {
  const auto c = parse_experiment(small({{"methods", {{{"method", "ours"}, {"stage1_steps", 5}}}}}));
  const auto r = run_benchmark(c, memory_only());
  const std::string hash = experiment_hash(c);
  const std::string csv = record_csv(r.at("ours"), hash);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "# config_hash=" + hash);
  std::getline(in, line);
  const auto cols = std::count(line.begin(), line.end(), ',') + 1;
  CHECK(line.rfind("scenario,target,iter,method,stage,t_mean,grad_norm", 0) == 0);
  CHECK(line.find("frechet") != std::string::npos);
  int rows = 0;
  bool saw_stage1 = false, saw_stage2 = false;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') + 1 == cols);
    saw_stage1 = saw_stage1 || line.find(",sds,1,") != std::string::npos;
    saw_stage2 = saw_stage2 || line.find(",ours,2,") != std::string::npos;
    ++rows;
  }
  // iterations 0, 5, 10, 15 plus the closing row, per scenario
  CHECK(rows == 2 * 5);
  CHECK(saw_stage1);
  CHECK(saw_stage2);
}

TEST_CASE("serial runs reproduce byte-identical output files") {
  const auto d1 = scratch_dir("det1");
  const auto d2 = scratch_dir("det2");
  json j = small({{"methods", {{{"method", "sds"}}, {{"method", "vsd"}}, {{"method", "ours"}, {"stage1_steps", 4}}}},
                  {"snapshot_every", 10}});
  j["output_dir"] = d1.string();
  const auto c1 = parse_experiment(j);
  j["output_dir"] = d2.string();
  const auto c2 = parse_experiment(j);
  run_benchmark(c1, {true, false, Exec::serial});
  run_benchmark(c2, {true, false, Exec::serial});
  for (const std::string m : {"sds", "vsd", "ours"}) {
    const auto a = slurp(d1 / "runs" / m / "record.csv");
    CHECK(!a.empty());
    CHECK(a == slurp(d2 / "runs" / m / "record.csv"));
    CHECK(slurp(d1 / "runs" / m / "snapshots.json") == slurp(d2 / "runs" / m / "snapshots.json"));
  }
  const auto cfg = json::parse(slurp(d1 / "config.json"));
  const std::string hash = cfg.at("config_hash");
  for (const auto* f : {"config.json", "worlds.json", "summary.json", "timing.csv", "runs/sds/record.csv",
                        "runs/sds/snapshots.json"}) {
    CHECK_MESSAGE(slurp(d1 / f).find(hash) != std::string::npos, f);
  }
  const auto summary = json::parse(slurp(d1 / "summary.json"));
  CHECK(summary.at("methods").size() == 3);
  CHECK(summary.at("methods")[1].at("total_compute").get<long>() >
        summary.at("methods")[1].at("n_evals").get<long>());
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST_CASE("parallel execution matches serial") {
  const auto c = parse_experiment(small({{"methods", {{{"method", "sds"}}, {{"method", "ours"}, {"stage1_steps", 4}}}}}));
  const auto s = run_benchmark(c, memory_only());
  const auto p = run_benchmark(c, {false, true, Exec::parallel});
  const std::string hash = experiment_hash(c);
  for (const std::string m : {"sds", "ours"}) CHECK(record_csv(s.at(m), hash) == record_csv(p.at(m), hash));
}

TEST_CASE("stage-1 ablation arms agree until the switch") {
  const auto c = parse_experiment(small({{"iters", 12},
                                         {"log_every", 1},
                                         {"eval_every", 2},
                                         {"methods", {{{"method", "ours"}, {"stage1_steps", 6}, {"stage1_s", 40}}}}}));
  const auto r = run_ablation_stage1(c, memory_only());
  REQUIRE(r.methods.size() == 3);
  CHECK(r.methods[0].name == "ours_stage1_0");
  CHECK(r.methods[1].name == "ours_stage1_6");
  CHECK(r.methods[2].name == "sds_s40");
  CHECK(r.summary.at("kind") == "ablate-stage1");
  CHECK(r.methods[0].hash != r.methods[1].hash);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& staged = r.methods[1].records[k].rows;
    const auto& sds = r.methods[2].records[k].rows;
    const auto& skip = r.methods[0].records[k].rows;
    for (std::size_t i = 0; i < staged.size(); ++i) {
      if (staged[i].iter >= 6) {
        CHECK(staged[i].grad_norm != sds[i].grad_norm);
        break;
      }
      CHECK(staged[i].grad_norm == sds[i].grad_norm);
      CHECK(same(staged[i].metrics, sds[i].metrics));
    }
    CHECK(skip[1].grad_norm != staged[1].grad_norm);
  }
  for (const auto& m : r.summary.at("methods")) CHECK(m.at("config_hash").get<std::string>().size() == 16);
}

TEST_CASE("bridge study arms and accounting") {
  const auto c = parse_experiment(small({{"iters", 6},
                                         {"methods",
                                          {{{"method", "ours"}, {"stage1_steps", 3}},
                                           {{"method", "bridge"}, {"ode", {{"steps", 3}}}}}}}));
  const auto r = run_bridge_study(c, memory_only());
  REQUIRE(r.methods.size() == 3);
  const long per = 8 * 2;
  CHECK(r.at("ours").total_evals() == 2 * 6 * per);
  CHECK(r.at("bridge_warmup").total_evals() == (2 * 3 + 2 * (2 * 3 + 1) * 3) * per);
  CHECK(r.at("bridge_scratch").total_evals() == 2 * (2 * 3 + 1) * 6 * per);
  CHECK(r.at("bridge_warmup").total_evals() > r.at("ours").total_evals());
}

TEST_CASE("class and corruption initializations") {
  const auto c = parse_experiment(small({{"iters", 0},
                                         {"targets", {"B"}},
                                         {"particles", {{"n", 400}, {"init", "class:B"}}},
                                         {"methods", {{{"method", "sds"}}}}}));
  const auto r = run_benchmark(c, memory_only());
  for (const auto& s : r.at("sds").scenarios) CHECK(s.init_metrics.frechet < 0.1);

  const auto cc = parse_experiment(small({{"iters", 0},
                                          {"particles", {{"n", 400}, {"init", "corruption-of-target"}}},
                                          {"methods", {{{"method", "sds"}}}}}));
  const auto rc = run_benchmark(cc, memory_only());
  for (const auto& s : rc.at("sds").scenarios) CHECK(s.init_metrics.frechet > 0.1);
}

TEST_CASE("multiview runs keep one point per particle and view") {
  const auto c = parse_experiment(small({{"world", "b3"}, {"iters", 4}, {"methods", {{{"method", "ours"}}}}}));
  const auto r = run_benchmark(c, memory_only());
  CHECK(r.at("ours").scenarios[0].final_metrics.n == 8 * 3);
}

TEST_CASE("shipped configs parse") {
  int seen = 0;
  for (const auto& entry : std::filesystem::directory_iterator(std::string(SDLAB_SOURCE_DIR) + "/configs")) {
    if (entry.path().extension() != ".json") continue;
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_experiment(entry.path().string()));
    ++seen;
  }
  CHECK(seen > 0);
}

TEST_CASE("noise scale option") {
  CHECK(error_of(small({{"particles", {{"scale", 0}}}})).find("/particles/scale: must be > 0") != std::string::npos);
  const auto wide = parse_experiment(small({{"iters", 0}, {"particles", {{"n", 400}, {"scale", 5}}}, {"methods", {{{"method", "sds"}}}}}));
  CHECK(experiment_to_json(wide)["particles"]["scale"] == 5.0);
  CHECK(parse_experiment(experiment_to_json(wide)).init.scale == 5.0);
  CHECK(!experiment_to_json(parse_experiment(small())).at("particles").contains("scale"));
  const auto narrow = parse_experiment(small({{"iters", 0}, {"particles", {{"n", 400}}}, {"methods", {{{"method", "sds"}}}}}));
  const auto rw = run_benchmark(wide, memory_only());
  const auto rn = run_benchmark(narrow, memory_only());
  CHECK(rw.at("sds").scenarios[0].init_metrics.frechet > rn.at("sds").scenarios[0].init_metrics.frechet);
}
