#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "acmil/commands.hpp"
#include "acmil/errors.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace acmil;
using namespace acmil::testing;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "acmil_test_commands" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig quick_run() {
  RunConfig cfg;
  cfg.synthetic.feature_dim = 8;
  cfg.synthetic.bags_per_class = 10;
  cfg.synthetic.instances_per_bag = {15, 30};
  cfg.train.epochs = 3;
  cfg.train.lr0 = 1e-3;
  cfg.train.dims.E = 8;
  cfg.train.dims.L = 8;
  cfg.train.dims.M = 3;
  cfg.train.stkim = StkimConfig::with_count(3, 0.6);
  return cfg;
}

size_t csv_rows(const std::string& text) {
  size_t n = 0;
  for (char ch : text) n += ch == '\n';
  return n;
}

}  // namespace

TEST_CASE("gen-data") {
  const fs::path dir = scratch("gen");
  RunConfig cfg;
  const Dataset ds = cmd_gen_data(cfg, dir / "a.json");
  CHECK(ds.bags.size() == 120);
  CHECK(ds.select(Split::train).size() == 72);
  CHECK(ds.select(Split::val).size() == 24);
  CHECK(ds.select(Split::test).size() == 24);
  cmd_gen_data(cfg, dir / "b.json");
  CHECK(read_text_file(dir / "a.json") == read_text_file(dir / "b.json"));
  CHECK(load_dataset(dir / "a.json").splits == ds.splits);

  cfg.split_ratios = {0.5, 0.5, 0.5};
  try {
    cmd_gen_data(cfg, dir / "c.json");
    FAIL("expected config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("split.ratios") != std::string::npos);
  }
  CHECK_FALSE(fs::exists(dir / "c.json"));
}

TEST_CASE("run config documents") {
  RunConfig cfg = quick_run();
  cfg.exports.attention = true;
  const Json j = to_json(cfg);
  CHECK(to_json(run_config_from_json(j)) == j);
  CHECK(to_json(load_run_config("")) == to_json(RunConfig{}));
  Json bad = j;
  bad["train"]["nonsense"] = 1;
  try {
    run_config_from_json(bad);
    FAIL("expected config error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("nonsense") != std::string::npos);
  }
}

TEST_CASE("model labels") {
  TrainConfig cfg;
  CHECK(model_label(cfg) == "ACMIL");
  cfg.dims.M = 1;
  cfg.stkim = StkimConfig::disabled();
  CHECK(model_label(cfg) == "ABMIL");
  cfg.stkim = StkimConfig::with_count(10, 0.6);
  CHECK(model_label(cfg) == "ACMIL");
  cfg.aggregator = Aggregator::max_pool;
  CHECK(model_label(cfg) == "max-pooling");
  cfg.aggregator = Aggregator::mean_pool;
  CHECK(model_label(cfg) == "mean-pooling");
}

TEST_CASE("train and eval") {
  RunConfig cfg = quick_run();
  cfg.exports.attention = true;
  cfg.exports.embeddings = true;
  const Dataset ds = split_dataset(generate_synthetic(cfg.synthetic), cfg.split_ratios, 0);
  const fs::path a = scratch("train_a"), b = scratch("train_b");
  const TrainRun run = cmd_train(ds, cfg, a);
  cmd_train(ds, cfg, b);

  for (const char* f : {"config.json", "checkpoint.json", "history.csv", "report.json", "report.csv",
                        "attention.json", "embeddings.csv"}) {
    CAPTURE(f);
    REQUIRE(fs::exists(a / f));
    CHECK(read_text_file(a / f) == read_text_file(b / f));
  }
  CHECK(csv_rows(read_text_file(a / "history.csv")) == 1 + 3);

  const Json report = load_document(a / "report.json");
  CHECK(report["model"] == "ACMIL");
  CHECK(report["split"] == "test");
  CHECK(report["selected_epoch"] == run.result.history.selected_epoch);

  const Checkpoint ck = load_checkpoint(a / "checkpoint.json");
  const Evaluation ev = cmd_eval(ck, ds, false);
  CHECK(report_to_json(ev.report) == report_to_json(run.test.report));
  Json flat = report;
  flat.erase("selected_epoch");
  CHECK(evaluation_report(ev, "ACMIL", "test") == flat);

  SUBCASE("stkim at eval with p = 0 changes nothing") {
    Checkpoint zero = ck;
    Json c = zero.config;
    c["stkim"]["p"] = 0.0;
    zero.config = c;
    CHECK(report_to_json(cmd_eval(zero, ds, true).report) == report_to_json(ev.report));
    CHECK(cmd_eval(ck, ds, true).any_mask);
  }
  SUBCASE("dims mismatch") {
    Dataset other = ds;
    other.feature_dim = 9;
    for (auto& bag : other.bags) bag.instances.conservativeResize(Eigen::NoChange, 9);
    CHECK_THROWS_AS(cmd_eval(ck, other, false), ConfigError);
  }
}

TEST_CASE("ABMIL and pooling runs") {
  RunConfig cfg = quick_run();
  const Dataset ds = split_dataset(generate_synthetic(cfg.synthetic), cfg.split_ratios, 0);
  cfg.train.dims.M = 1;
  cfg.train.stkim = StkimConfig::disabled();
  const TrainRun ab = cmd_train(ds, cfg, "");
  CHECK_FALSE(ab.test.report.mean_branch_cosine.has_value());
  CHECK(ab.test.report.instance_localization_auc.has_value());
  for (Aggregator agg : {Aggregator::max_pool, Aggregator::mean_pool}) {
    cfg.train.aggregator = agg;
    const fs::path dir = scratch("pool");
    cmd_train(ds, cfg, dir);
    CHECK(load_document(dir / "report.json")["model"] == (agg == Aggregator::max_pool ? "max-pooling" : "mean-pooling"));
  }
}

TEST_CASE("ablation grid") {
  TrainConfig base;
  SUBCASE("M sweep bookkeeping") {
    const AblationGrid g = expand_grid(Json{{"M", {1, 5}}, {"n_seeds", 5}}, base);
    CHECK(g.cells.size() == 2);
    CHECK(g.n_seeds == 5);
  }
  SUBCASE("presets") {
    const AblationGrid g = expand_grid(Json{{"presets", {"stkim", "weno", "mhim"}}}, base);
    REQUIRE(g.cells.size() == 3);
    CHECK(g.cells[0].stkim.count == 10);
    CHECK(g.cells[0].stkim.prob == 0.6);
    CHECK(g.cells[1].stkim.count == 95);
    CHECK(g.cells[1].stkim.prob == 1.0);
    CHECK(g.cells[2].stkim.mode == StkimConfig::KMode::fraction);
    CHECK(g.cells[2].stkim.fraction == 0.01);
    CHECK(g.cells[2].stkim.prob == 0.5);
    CHECK_THROWS_AS(expand_grid(Json{{"presets", {"nope"}}}, base), ConfigError);
  }
  SUBCASE("cartesian product") {
    const AblationGrid g =
        expand_grid(Json{{"K", {5, 10}}, {"fraction", {0.1}}, {"p", {0.3, 1.0}}, {"disable_L_d", {false, true}}}, base);
    CHECK(g.cells.size() == 3 * 2 * 2);
  }
  SUBCASE("unknown keys") { CHECK_THROWS_AS(expand_grid(Json{{"lr", {1}}}, base), ConfigError); }

  SUBCASE("runs") {
    RunConfig cfg = quick_run();
    cfg.train.epochs = 2;
    const Dataset ds = split_dataset(generate_synthetic(cfg.synthetic), cfg.split_ratios, 0);
    const AblationGrid g = expand_grid(Json{{"M", {1, 2}}, {"p", {0.6, 1.0}}, {"n_seeds", 2}}, cfg.train);
    const fs::path dir = scratch("ablate");
    const AblationSummary one = cmd_ablate(ds, cfg, g, dir, 1);
    CHECK(one.runs.size() == 8);
    for (const auto& r : one.runs) CHECK(r.ok);
    CHECK(csv_rows(one.table_csv) == 1 + 4);
    CHECK(csv_rows(one.runs_csv) == 1 + 8);
    CHECK(fs::exists(dir / "summary.csv"));
    // Thread count does not change results.
    const AblationSummary two = cmd_ablate(ds, cfg, g, "", 2);
    CHECK(two.table_csv == one.table_csv);
    CHECK(two.runs_csv == one.runs_csv);
  }
}

TEST_CASE("grad-check command") {
  GradCheckOptions opts;
  opts.seeds = 4;
  const auto results = cmd_grad_check(opts);
  CHECK(results.size() == 8);
  bool masked = false;
  for (const auto& r : results) {
    CHECK(r.max_rel_error < 1e-5);
    masked |= r.masked > 0;
  }
  CHECK(masked);
  // A coarse step shows its truncation error.
  opts.seeds = 1;
  opts.probs = {0.6};
  opts.eps = 1e-1;
  const double coarse = cmd_grad_check(opts)[0].max_rel_error;
  opts.eps = 1e-4;
  const double fine = cmd_grad_check(opts)[0].max_rel_error;
  CHECK(fine < coarse);
  opts.seeds = 0;
  CHECK_THROWS_AS(cmd_grad_check(opts), ConfigError);
}
