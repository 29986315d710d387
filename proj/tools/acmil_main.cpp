// acmil: command-line front end.
//
//   acmil gen-data   --config cfg.json --out data.json
//   acmil train      --data data.json [--config cfg.json] [--seed S] --out run/
//   acmil eval       --checkpoint run/checkpoint.json --data data.json [--stkim-at-eval] [--out dir]
//   acmil ablate     --data data.json --grid grid.json [--config cfg.json] [--jobs J] --out sweep/
//   acmil grad-check [--seed S] [--seeds N] [--D ..] [--p 0 --p 0.6] [--eps 1e-4]
//
// Flags override values from --config. Errors print one line
// "error[<kind>]: <message>" to stderr and exit with status 1.

#include <iostream>

#include <CLI11.hpp>

#include "acmil/commands.hpp"

namespace fs = std::filesystem;
using namespace acmil;

namespace {

RunConfig resolve(const std::string& config_path, const std::optional<std::uint64_t>& seed,
                  const std::string& data, const std::string& out) {
  RunConfig cfg = load_run_config(config_path);
  if (seed) cfg.train.seed = *seed;
  if (!data.empty()) cfg.data_path = data;
  if (!out.empty()) cfg.out_dir = out;
  return cfg;
}

void print_report(const Json& report) { std::cout << dump_document(report); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-branch attention MIL with stochastic top-K instance masking"};
  app.require_subcommand(1);

  std::string config, data, out, checkpoint, grid_path;
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool stkim_at_eval = false;
  std::string split_name = "test";

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic bag dataset");
  gen->add_option("--config", config, "Run configuration (synthetic + split sections)");
  gen->add_option("--out", out, "Output dataset path (.json text, .acmb binary)")->required();
  gen->add_option("--seed", seed, "Override synthetic.seed");

  auto* tr = app.add_subcommand("train", "Train and evaluate on the test split");
  tr->add_option("--data", data, "Dataset file")->required();
  tr->add_option("--config", config, "Run configuration");
  tr->add_option("--seed", seed, "Override train.seed");
  tr->add_option("--out", out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--data", data, "Dataset file")->required();
  ev->add_flag("--stkim-at-eval", stkim_at_eval, "Keep top-K masking on during evaluation");
  ev->add_option("--split", split_name, "Split to evaluate (train|val|test)");
  ev->add_option("--out", out, "Directory for report.json (default: stdout)");

  auto* ab = app.add_subcommand("ablate", "Train a grid of configurations over several seeds");
  ab->add_option("--data", data, "Dataset file")->required();
  ab->add_option("--config", config, "Base run configuration");
  ab->add_option("--grid", grid_path, "Grid document")->required();
  ab->add_option("--seed", seed, "Base seed");
  ab->add_option("--jobs", jobs, "Parallel training runs")->check(CLI::PositiveNumber);
  ab->add_option("--out", out, "Output directory")->required();

  GradCheckOptions gc;
  std::vector<double> probs;
  std::uint64_t gc_seed = 0;
  auto* gr = app.add_subcommand("grad-check", "Compare analytic gradients with central differences");
  gr->add_option("--seed", gc_seed, "First seed");
  gr->add_option("--seeds", gc.seeds, "Number of consecutive seeds");
  gr->add_option("--D", gc.dims.D);
  gr->add_option("--E", gc.dims.E);
  gr->add_option("--L", gc.dims.L);
  gr->add_option("--M", gc.dims.M);
  gr->add_option("--C", gc.dims.C);
  gr->add_option("--N", gc.instances);
  gr->add_option("--K", gc.top_k, "Top-K candidates for the frozen mask");
  gr->add_option("--p", probs, "Masking probabilities (repeatable)");
  gr->add_option("--eps", gc.eps, "Central-difference step");
  gr->add_option("--threshold", gc.threshold, "Maximum accepted relative error");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      RunConfig cfg = load_run_config(config);
      if (seed) cfg.synthetic.seed = *seed;
      const Dataset ds = cmd_gen_data(cfg, out);
      std::cout << "wrote " << ds.bags.size() << " bags to " << out << "\n";
    } else if (*tr) {
      RunConfig cfg = resolve(config, seed, data, out);
      const Dataset ds = load_any_dataset(data);
      const TrainRun run = cmd_train(ds, cfg, out);
      std::cout << model_label(run.result.config) << " selected epoch "
                << run.result.history.selected_epoch << "\n";
      print_report(report_to_json(run.test.report));
    } else if (*ev) {
      const Checkpoint ckpt = load_checkpoint(checkpoint);
      const Dataset ds = load_any_dataset(data);
      const Split split = split_from_string(split_name);
      const Evaluation result = cmd_eval(ckpt, ds, stkim_at_eval, split);
      const TrainConfig cfg = ckpt.config.empty() ? TrainConfig{} : train_config_from_json(ckpt.config);
      const Json report = evaluation_report(result, model_label(cfg), split_name);
      if (out.empty()) {
        print_report(report);
      } else {
        fs::create_directories(out);
        save_document(fs::path(out) / "report.json", report);
      }
    } else if (*ab) {
      RunConfig cfg = resolve(config, seed, data, out);
      const Dataset ds = load_any_dataset(data);
      const AblationGrid grid = expand_grid(load_document(grid_path), cfg.train);
      const AblationSummary summary = cmd_ablate(ds, cfg, grid, out, jobs);
      std::cout << summary.table_csv;
    } else if (*gr) {
      if (!probs.empty()) gc.probs = probs;
      gc.seed = gc_seed;
      bool pass = true;
      double worst = 0.0;
      for (const auto& r : cmd_grad_check(gc)) {
        const bool ok = r.max_rel_error < gc.threshold;
        pass = pass && ok;
        worst = std::max(worst, r.max_rel_error);
        std::cout << "seed=" << r.seed << " p=" << r.prob << " masked=" << r.masked
                  << " max_rel_error=" << r.max_rel_error << (ok ? " PASS" : " FAIL") << "\n";
      }
      std::cout << "max_rel_error=" << worst << (pass ? " PASS" : " FAIL") << "\n";
      return pass ? 0 : 1;
    }
  } catch (const acmil::Error& e) {
    std::cerr << "error[" << e.kind() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
