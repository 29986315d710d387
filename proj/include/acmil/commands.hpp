#pragma once

// Command implementations behind the `acmil` executable. Each writes its
// artifacts under a fixed layout and is deterministic in its inputs and seed.
//
// train output directory:
//   config.json       resolved run configuration
//   checkpoint.json   selected model, config and seed
//   history.csv       one row per epoch (see history_to_csv)
//   report.json       test-split metrics
//   report.csv        the same metrics as one flat row
//   attention.json    per-bag heatmaps (export.attention)
//   embeddings.csv    per-bag embeddings (export.embeddings)

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "acmil/config.hpp"

namespace acmil {

/// Generates the synthetic dataset described by cfg.synthetic, splits it with
/// cfg.split_ratios and writes it to `out`.
Dataset cmd_gen_data(const RunConfig& cfg, const std::filesystem::path& out);

/// "ABMIL", "ACMIL", "max-pooling" or "mean-pooling".
std::string model_label(const TrainConfig& cfg);

struct TrainRun {
  TrainResult result;
  Evaluation test;
};

/// Trains on the train/val splits and evaluates the selected model on the
/// test split. An empty out_dir skips writing.
TrainRun cmd_train(const Dataset& data, const RunConfig& cfg, const std::filesystem::path& out_dir);

Json evaluation_report(const Evaluation& ev, const std::string& label, const std::string& split);

/// Evaluates a checkpoint on one split (all bags when the dataset is unsplit).
Evaluation cmd_eval(const Checkpoint& ckpt, const Dataset& data, bool stkim_at_eval,
                    Split split = Split::test);

struct AblationCell {
  Index M = 5;
  StkimConfig stkim;
  bool diversity_loss = true;
  std::string preset;  // empty unless expanded from a preset

  std::string describe() const;
};

struct AblationGrid {
  std::vector<AblationCell> cells;
  int n_seeds = 1;
};

/// Strategy presets for the masking comparison.
StkimConfig stkim_preset(const std::string& name);

/// Expands a grid document ({M, K, fraction, p, disable_L_d, presets, n_seeds})
/// against the base configuration.
AblationGrid expand_grid(const Json& grid, const TrainConfig& base);

struct AblationRun {
  size_t cell = 0;
  int seed_index = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  MetricsReport report;
  long degenerate_masks = 0;  // fallbacks to the unmasked heatmap during training
};

struct AblationSummary {
  std::vector<AblationRun> runs;
  std::string table_csv;  // one row per cell
  std::string runs_csv;   // one row per run
};

AblationSummary cmd_ablate(const Dataset& data, const RunConfig& base, const AblationGrid& grid,
                           const std::filesystem::path& out_dir, int jobs = 1);

struct GradCheckOptions {
  std::uint64_t seed = 0;
  int seeds = 20;
  Dims dims{8, 4, 4, 3, 3};
  Index instances = 6;
  Index top_k = 3;
  std::vector<double> probs{0.0, 0.6};
  double eps = 1e-4;
  double threshold = 1e-5;
  Activation activation = Activation::relu;
};

struct GradCheckResult {
  std::uint64_t seed = 0;
  double prob = 0.0;
  double max_rel_error = 0.0;
  std::size_t masked = 0;
};

std::vector<GradCheckResult> cmd_grad_check(const GradCheckOptions& opts);

}  // namespace acmil
