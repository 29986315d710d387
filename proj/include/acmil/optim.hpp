#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "acmil/attention.hpp"
#include "acmil/data.hpp"
#include "acmil/metrics.hpp"
#include "acmil/model.hpp"
#include "acmil/objectives.hpp"

namespace acmil {

enum class SelectionMetric { macro_auc, macro_f1 };

std::string to_string(SelectionMetric m);
SelectionMetric selection_metric_from_string(const std::string& s);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  /// false: decay added to the gradient (L2). true: decoupled, AdamW-style.
  bool decoupled = false;
};

struct AdamState {
  Parameters m;
  Parameters v;
  long step = 0;

  static AdamState for_model(const Model& model) {
    return {zeros_like(model.params), zeros_like(model.params), 0};
  }
};

/// One bias-corrected Adam update; increments state.step first. Throws
/// NumericalError naming the tensor if an updated value is not finite.
void adam_step(Parameters& params, const Gradients& grads, AdamState& state, double lr,
               const AdamConfig& cfg);

/// 0.5 * lr0 * (1 + cos(pi * epoch / epochs)).
double cosine_lr(int epoch, int epochs, double lr0);

struct TrainConfig {
  int epochs = 100;
  double lr0 = 1e-4;
  AdamConfig adam;
  int batch_size = 1;
  std::uint64_t seed = 0;
  StkimConfig stkim = StkimConfig::with_count(10, 0.6);
  /// D and C of 0 are taken from the dataset.
  Dims dims{0, 64, 128, 5, 0};
  Activation activation = Activation::relu;
  Aggregator aggregator = Aggregator::attention;
  bool diversity_loss = true;
  SelectionMetric selection_metric = SelectionMetric::macro_auc;
  std::vector<Index> topk_list{10};

  void validate() const;
  /// True for the single-branch, unmasked attention configuration.
  bool is_abmil() const;
};

Json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const Json& doc);
Json to_json(const StkimConfig& cfg);
StkimConfig stkim_config_from_json(const Json& doc);

struct EvalOptions {
  bool stkim_at_eval = false;
  StkimConfig stkim = StkimConfig::disabled();
  std::uint64_t seed = 0;
  std::vector<Index> topk_list{10};
  LossOptions loss;
  bool cluster_embeddings = true;
};

struct BagOutput {
  std::string id;
  int label = 0;
  Vector probs;
  Vector heatmap;
  Vector embedding;
  std::vector<Vector> branch_attn;
};

struct Evaluation {
  MetricsReport report;
  std::vector<BagOutput> bags;
  double mean_loss = 0.0;
  bool any_mask = false;
  long degenerate_masks = 0;
};

/// Forward passes (training = stkim_at_eval) over the bags plus the metrics.
Evaluation evaluate(const Model& model, std::span<const Bag* const> bags, const EvalOptions& opts);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown train_loss;
  double val_loss = 0.0;
  double val_macro_auc = 0.0;
  double val_macro_f1 = 0.0;
  double val_entropy = 0.0;
  double val_topk = 0.0;
  double val_localization = std::numeric_limits<double>::quiet_NaN();
  long degenerate_masks = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int selected_epoch = 0;
};

std::string history_to_csv(const TrainHistory& h);

struct TrainResult {
  Model model;  // parameters at the selected epoch
  TrainHistory history;
  TrainConfig config;  // with D and C resolved
};

/// Batch size 1, per-epoch shuffle from (seed, epoch), validation with STKIM
/// off, best-validation selection (earliest epoch on ties).
TrainResult train(const Dataset& ds, const TrainConfig& cfg);

}  // namespace acmil
