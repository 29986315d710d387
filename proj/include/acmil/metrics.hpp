#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "acmil/numerics.hpp"
#include "acmil/text_io.hpp"

namespace acmil {

/// Binary AUC via the Mann-Whitney rank statistic, ties counted half.
/// Empty when either class is absent.
std::optional<double> binary_auc(std::span<const double> scores, const std::vector<bool>& positive);

struct AucResult {
  double macro = 0.0;  // NaN when no class is computable
  std::vector<std::optional<double>> per_class;
};

/// One-vs-rest AUC per class over scores (n x C); classes without both
/// positives and negatives are skipped.
AucResult macro_auc(const Matrix& scores, std::span<const int> labels);

struct F1Result {
  double macro = 0.0;
  std::vector<double> per_class;
};

/// Per-class F1 with 0/0 -> 0, averaged over all `num_classes` classes.
F1Result macro_f1(std::span<const int> predictions, std::span<const int> labels, int num_classes);

/// -sum a ln a in nats, with 0 ln 0 = 0.
double attention_entropy(const Vector& attn);

/// Sum of the min(K, N) largest values.
double topk_cumulative(const Vector& attn, Index k);

/// Lloyd's algorithm with k-means++ seeding. Points are rows.
std::vector<int> kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters = 300);

struct VMeasure {
  double homogeneity = 1.0;
  double completeness = 1.0;
  double v = 1.0;
};

VMeasure v_measure(std::span<const int> clusters, std::span<const int> labels);

/// AUC of attention as a detector of discriminative instances (label >= 1).
std::optional<double> instance_localization_auc(const Vector& attn,
                                                std::span<const int> instance_labels);

struct MetricsReport {
  std::size_t n_bags = 0;
  double macro_auc = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::optional<double>> per_class_auc;
  std::vector<double> per_class_f1;
  double mean_attention_entropy = 0.0;
  std::vector<Index> topk_list{10};
  std::vector<double> mean_topk_cumulative;
  std::optional<double> v_measure;
  std::optional<double> instance_localization_auc;
  std::optional<double> mean_branch_cosine;
};

Json report_to_json(const MetricsReport& r);

/// Column names of the flat summary row, in order.
std::vector<std::string> report_csv_header(const MetricsReport& r);
std::vector<std::string> report_csv_row(const MetricsReport& r);

}  // namespace acmil
