#include "doctest.h"
#include "support.hpp"

#include <fstream>
#include <sstream>

using namespace scc;
using scc::testing::random_matrix;
using scc::testing::tiny_config;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("scc_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream s;
  s << f.rdbuf();
  return s.str();
}

ReportCell cell(const std::string& name, double per, double flops, std::optional<double> x = {}) {
  ReportCell c;
  c.name = name;
  c.train_controller = c.test_controller = "surprisal";
  c.train_mode = c.test_mode = "stochastic";
  c.per_mean = per;
  c.per_std = 0.25;
  c.flops = flops;
  c.x = x;
  c.seeds = {0, 1};
  c.config = R"({"a":1,"b":"x,y"})";
  return c;
}

}  // namespace

TEST_CASE("experiment config round trips and rejects unknown fields") {
  ExperimentConfig c;
  c.seeds = 3;
  c.test_mode = ExecMode::deterministic;
  c.data.train_count = 17;
  const nlohmann::json j = c;
  CHECK(j.get<ExperimentConfig>() == c);

  nlohmann::json bad = j;
  bad["epoch"] = 3;
  CHECK_THROWS_AS(bad.get<ExperimentConfig>(), ConfigError);
  bad = j;
  bad["seeds"] = 0;
  try {
    validate(bad.get<ExperimentConfig>());
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("seeds") != std::string::npos);
  }
  bad = j;
  bad["controller"] = "fixed_big";
  CHECK_THROWS_AS(validate(bad.get<ExperimentConfig>()), ConfigError);
  CHECK(nlohmann::json::object().get<ExperimentConfig>() == ExperimentConfig{});
}

TEST_CASE("config files: missing and malformed") {
  const auto dir = temp_dir("config");
  CHECK_THROWS_AS(load_config(dir / "absent.json"), ConfigError);
  std::ofstream(dir / "broken.json") << "{\"seeds\": ";
  CHECK_THROWS_AS(load_config(dir / "broken.json"), ConfigError);
  std::ofstream(dir / "ok.json") << "{\"seeds\": 2, \"preset\": \"desk\"}";
  CHECK(load_config(dir / "ok.json").seeds == 2);
}

TEST_CASE("checkpoints round trip byte for byte and restore the exact function") {
  ExperimentConfig cfg = tiny_config();
  const ArchitectureSpec spec = preset(cfg.preset);
  Rng rng(81);
  auto ar = std::make_shared<ARModel>(spec, rng);
  ar->freeze();
  ConditionalModel m(spec, ar, true, rng);
  m.use_surprisal({0.7, -0.3});
  const Checkpoint ck = make_checkpoint(m, cfg, 4, 12.5);
  const auto bytes = serialize_checkpoint(ck);
  const Checkpoint back = deserialize_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(serialize_checkpoint(back) == bytes);

  const auto dir = temp_dir("ckpt");
  save_checkpoint(ck, dir / "m.ckpt");
  CHECK(load_checkpoint(dir / "m.ckpt") == ck);

  Rng other(82);
  ConditionalModel fresh(spec, ar, true, other);
  apply_checkpoint(back, fresh);
  CHECK(fresh.surprisal_controller().w == 0.7);
  const PreparedSequence seq = m.prepare(random_matrix(9, spec.obs_dim, rng));
  Rng r1(3), r2(3);
  CHECK(m.forward(seq, ExecMode::stochastic, r1).log_probs.value() ==
        fresh.forward(seq, ExecMode::stochastic, r2).log_probs.value());
}

TEST_CASE("a checkpoint applied to the wrong preset names the parameter") {
  const ArchitectureSpec desk = preset("desk");
  Rng rng(83);
  ConditionalModel small_model(desk, nullptr, false, rng);
  small_model.use_random(0.5);
  const Checkpoint ck = make_checkpoint(small_model, tiny_config(), 1, std::nullopt);
  ConditionalModel big_model(preset("main"), nullptr, false, rng);
  try {
    apply_checkpoint(ck, big_model);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("pre.") != std::string::npos);
  }
}

TEST_CASE("damaged checkpoints are rejected") {
  Rng rng(84);
  ConditionalModel m(preset("desk"), nullptr, false, rng);
  m.use_random(0.5);
  auto bytes = serialize_checkpoint(make_checkpoint(m, tiny_config(), 1, std::nullopt));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize_checkpoint(truncated), ParseError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), ParseError);
  auto bad_version = bytes;
  bad_version[8] = 99;
  CHECK_THROWS_AS(deserialize_checkpoint(bad_version), ParseError);
}

TEST_CASE("pareto marking on a ten-row trade-off table") {
  // (PER, FLOPs in millions) for the eight ablation rows, then small-only and big-only.
  const std::vector<std::pair<double, double>> rows = {
      {22.81, 2.91}, {22.49, 5.75}, {22.73, 2.91}, {22.58, 5.75}, {20.52, 6.63},
      {20.52, 6.41}, {20.28, 6.63}, {20.00, 6.41}, {20.61, 5.70}, {20.09, 7.54}};
  const std::vector<bool> flags = pareto_flags(rows);
  const std::vector<bool> want = {false, false, true, false, false, false, false, true, true, false};
  CHECK(flags == want);
  CHECK(pareto_flags(std::vector<std::pair<double, double>>{{1, 1}, {1, 1}}) == std::vector<bool>{true, true});
}

TEST_CASE("report CSV round trips and the markdown has one row per cell") {
  RunReport r;
  r.title = "t";
  r.cells = {cell("a", 21.5, 1234.5), cell("b", 19.25, 999.0, 0.5)};
  r.cells[1].per_std.reset();
  r.cells[0].train_loss = 1.5;
  mark_pareto(r.cells);
  CHECK(r.cells[1].pareto);
  const std::string csv = report_csv(r);
  const RunReport back = parse_report_csv(csv);
  CHECK(back.cells == r.cells);
  CHECK(report_csv(back) == csv);
  CHECK_THROWS_AS(r.cell("zzz"), ContractError);

  const std::string md = report_markdown(r);
  int table_rows = 0;
  std::istringstream lines(md);
  for (std::string line; std::getline(lines, line);) table_rows += line.rfind("| ", 0) == 0;
  CHECK(table_rows == 2 + 1);  // header plus cells
}

TEST_CASE("sweep reports write plot data as x y err") {
  RunReport r;
  r.title = "sweep";
  r.cells = {cell("ref", 20.0, 10.0), cell("p0", 22.0, 5.0, 0.0), cell("p1", 21.0, 7.0, 1.0)};
  const auto dir = temp_dir("emit");
  const auto files = emit_report(r, dir, "s");
  CHECK(std::filesystem::exists(dir / "s.csv"));
  CHECK(std::filesystem::exists(dir / "s_ref_ref.dat"));
  const std::string per = slurp(dir / "s_per.dat");
  std::istringstream in(per);
  std::string header;
  std::getline(in, header);
  CHECK(header == "x y err");
  double x, y, e;
  in >> x >> y >> e;
  CHECK(x == 0.0);
  CHECK(y == 22.0);
  CHECK(e == 0.25);
  CHECK(files.size() == 2 + 3 + 1);
}

TEST_CASE("parallel_for runs every task and rethrows failures") {
  for (int jobs : {1, 3}) {
    std::vector<int> hit(50, 0);
    parallel_for(hit.size(), jobs, [&](std::size_t i) { hit[i] += 1; });
    CHECK(std::all_of(hit.begin(), hit.end(), [](int v) { return v == 1; }));
    CHECK_THROWS_AS(parallel_for(10, jobs, [](std::size_t i) {
                      if (i == 7) throw DomainError("boom");
                    }),
                    DomainError);
  }
}

TEST_CASE("train and evaluation keys") {
  const TrainSpec a{ControllerKind::random, true, ExecMode::stochastic, 0.1};
  const TrainSpec b{ControllerKind::random, true, ExecMode::stochastic, 0.2};
  const TrainSpec c{ControllerKind::learned, true, ExecMode::stochastic, 0.1};
  const TrainSpec d{ControllerKind::learned, true, ExecMode::stochastic, 0.2};
  CHECK(a.key() == b.key());
  CHECK(c.key() != d.key());
  CHECK(a.key() != TrainSpec{ControllerKind::random, false, ExecMode::stochastic, 0.1}.key());
}

TEST_CASE("small experiments: grids, sweeps and reproducibility") {
  ExperimentConfig cfg = tiny_config();
  Workspace ws(cfg);
  CHECK(ws.ar()->frozen());

  SUBCASE("determinism grid trains twice per seed and reports four cells") {
    const RunReport r = compare_determinism(ws);
    CHECK(r.trainings == 2 * static_cast<std::size_t>(cfg.seeds));
    CHECK(r.cells.size() == 4);
    CHECK(r.evaluations == 4 * static_cast<std::size_t>(cfg.seeds));
    for (const ReportCell& c : r.cells) CHECK(c.train_loss.has_value());
  }

  SUBCASE("ablation shares runs between cells") {
    const RunReport r = run_ablation(ws);
    CHECK(r.cells.size() == 10);
    CHECK(r.trainings == 6 * static_cast<std::size_t>(cfg.seeds));
    const ReportCell& small = r.cell("small_only");
    const ReportCell& big = r.cell("big_only");
    CHECK(small.flops < big.flops);
    CHECK(small.mean_p_big == 0.0);
    CHECK(big.mean_p_big == 1.0);
    CHECK_FALSE(big.train_loss.has_value());
  }

  SUBCASE("bias sweep is monotone and saturates at big-only cost") {
    const RunReport r = sweep_bias(ws, 5);
    CHECK(r.cells.size() == 2 + 5 + 1);
    double last = -1.0;
    for (const ReportCell& c : r.cells) {
      if (!c.x) continue;
      CHECK(c.mean_p_big >= last);
      last = c.mean_p_big;
    }
    const ReportCell& sat = r.cell("saturation");
    CHECK(sat.mean_p_big > 0.999);
    const ReportCell& big = r.cell("big_only");
    // Saturated routing also pays for the surprisal controller.
    CHECK(std::abs(sat.flops - big.flops) <= 2.0 + 1e-6 * big.flops);
  }

  SUBCASE("lambda sweep has one cell per lambda plus references") {
    const RunReport r = sweep_lambda(ws, false);
    CHECK(r.cells.size() == lambda_grid().size() + 2);
    CHECK(r.trainings == (lambda_grid().size() + 2) * static_cast<std::size_t>(cfg.seeds));
  }

  SUBCASE("single runs select the best validation epoch") {
    const SingleResult s = run_single(ws, cfg, 0);
    const auto& h = s.run->history;
    REQUIRE_FALSE(h.validation_per.empty());
    double best = h.validation_per.front().second;
    for (const auto& [epoch, v] : h.validation_per) best = std::min(best, v);
    CHECK(s.run->best_validation_per == best);
    CHECK(s.metrics.test_per >= 0.0);
  }
}

TEST_CASE("reports are byte-identical across reruns and job counts") {
  ExperimentConfig cfg = tiny_config();
  cfg.seeds = 3;
  Workspace one(cfg), two(cfg);
  const std::string a = report_csv(compare_determinism(one, {1}));
  const std::string b = report_csv(compare_determinism(two, {3}));
  CHECK(a == b);
}
