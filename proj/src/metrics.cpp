#include "acmil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "acmil/rng.hpp"

namespace acmil {

std::optional<double> binary_auc(std::span<const double> scores, const std::vector<bool>& positive) {
  if (scores.size() != positive.size()) throw DomainError("binary_auc: length mismatch");
  const size_t n = scores.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Midranks over tie groups.
  double pos_rank_sum = 0.0;
  size_t n_pos = 0;
  for (size_t i = 0; i < n;) {
    size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (size_t t = i; t < j; ++t)
      if (positive[order[t]]) {
        pos_rank_sum += mid;
        ++n_pos;
      }
    i = j;
  }
  const size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  const double np = static_cast<double>(n_pos);
  return (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

AucResult macro_auc(const Matrix& scores, std::span<const int> labels) {
  if (static_cast<size_t>(scores.rows()) != labels.size())
    throw DomainError("macro_auc: score/label count mismatch");
  AucResult out;
  const Index c = scores.cols();
  std::vector<double> col(labels.size());
  std::vector<bool> pos(labels.size());
  double sum = 0.0;
  int computable = 0;
  for (Index k = 0; k < c; ++k) {
    for (size_t i = 0; i < labels.size(); ++i) {
      col[i] = scores(static_cast<Index>(i), k);
      pos[i] = labels[i] == k;
    }
    auto auc = binary_auc(col, pos);
    out.per_class.push_back(auc);
    if (auc) {
      sum += *auc;
      ++computable;
    }
  }
  out.macro = computable > 0 ? sum / computable : std::numeric_limits<double>::quiet_NaN();
  return out;
}

F1Result macro_f1(std::span<const int> predictions, std::span<const int> labels, int num_classes) {
  if (predictions.size() != labels.size()) throw DomainError("macro_f1: length mismatch");
  F1Result out;
  double sum = 0.0;
  for (int k = 0; k < num_classes; ++k) {
    double tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool pred = predictions[i] == k;
      const bool truth = labels[i] == k;
      tp += pred && truth;
      fp += pred && !truth;
      fn += !pred && truth;
    }
    const double denom = 2 * tp + fp + fn;
    const double f1 = denom > 0 ? 2 * tp / denom : 0.0;
    out.per_class.push_back(f1);
    sum += f1;
  }
  out.macro = num_classes > 0 ? sum / num_classes : 0.0;
  return out;
}

double attention_entropy(const Vector& attn) {
  double h = 0.0;
  for (Index i = 0; i < attn.size(); ++i)
    if (attn[i] > 0) h -= attn[i] * std::log(attn[i]);
  return h;
}

double topk_cumulative(const Vector& attn, Index k) {
  if (k < 1) throw DomainError("topk_cumulative: K must be >= 1");
  std::vector<double> v(attn.data(), attn.data() + attn.size());
  const auto take = static_cast<size_t>(std::min<Index>(k, attn.size()));
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(take), v.end(),
                    std::greater<>());
  return std::accumulate(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(take), 0.0);
}

std::vector<int> kmeans(const Matrix& points, int k, std::uint64_t seed, int max_iters) {
  const Index n = points.rows();
  if (k < 1 || k > n) throw DomainError("kmeans: need 1 <= k <= number of points");
  Rng rng(seed);

  auto sqdist = [&](Index i, const Matrix& centers, Index c) {
    return (points.row(i) - centers.row(c)).squaredNorm();
  };

  // k-means++ seeding.
  Matrix centers(k, points.cols());
  centers.row(0) = points.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
  Vector best = Vector::Constant(n, std::numeric_limits<double>::infinity());
  for (int c = 1; c < k; ++c) {
    for (Index i = 0; i < n; ++i) best[i] = std::min(best[i], sqdist(i, centers, c - 1));
    const double total = best.sum();
    Index pick = 0;
    if (total > 0) {
      double target = rng.uniform() * total;
      for (pick = 0; pick < n - 1; ++pick) {
        target -= best[pick];
        if (target < 0) break;
      }
    } else {
      pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    centers.row(c) = points.row(pick);
  }

  std::vector<int> assign(static_cast<size_t>(n), -1);
  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (Index i = 0; i < n; ++i) {
      int arg = 0;
      double d = sqdist(i, centers, 0);
      for (int c = 1; c < k; ++c) {
        const double dc = sqdist(i, centers, c);
        if (dc < d) {
          d = dc;
          arg = c;
        }
      }
      if (assign[static_cast<size_t>(i)] != arg) {
        assign[static_cast<size_t>(i)] = arg;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;

    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<Index> counts(static_cast<size_t>(k), 0);
    for (Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<size_t>(i)]) += points.row(i);
      ++counts[static_cast<size_t>(assign[static_cast<size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] > 0) {
        centers.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<size_t>(c)]);
        continue;
      }
      // Empty cluster: re-seed at the point farthest from its center.
      Index far = 0;
      double far_d = -1.0;
      for (Index i = 0; i < n; ++i) {
        const double di = sqdist(i, centers, assign[static_cast<size_t>(i)]);
        if (di > far_d) {
          far_d = di;
          far = i;
        }
      }
      centers.row(c) = points.row(far);
      assign[static_cast<size_t>(far)] = c;
    }
  }
  return assign;
}

VMeasure v_measure(std::span<const int> clusters, std::span<const int> labels) {
  if (clusters.size() != labels.size() || clusters.empty())
    throw DomainError("v_measure: need equal non-zero lengths");
  const double n = static_cast<double>(labels.size());
  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> by_class, by_cluster;
  for (size_t i = 0; i < labels.size(); ++i) {
    joint[{labels[i], clusters[i]}] += 1;
    by_class[labels[i]] += 1;
    by_cluster[clusters[i]] += 1;
  }
  auto entropy = [&](const std::map<int, double>& counts) {
    double h = 0;
    for (const auto& [_, c] : counts) h -= (c / n) * std::log(c / n);
    return h;
  };
  const double h_class = entropy(by_class);
  const double h_cluster = entropy(by_cluster);
  double h_class_given_cluster = 0, h_cluster_given_class = 0;
  for (const auto& [key, c] : joint) {
    h_class_given_cluster -= (c / n) * std::log(c / by_cluster[key.second]);
    h_cluster_given_class -= (c / n) * std::log(c / by_class[key.first]);
  }
  VMeasure out;
  out.homogeneity = h_class == 0 ? 1.0 : 1.0 - h_class_given_cluster / h_class;
  out.completeness = h_cluster == 0 ? 1.0 : 1.0 - h_cluster_given_class / h_cluster;
  const double hc = out.homogeneity + out.completeness;
  out.v = hc == 0 ? 0.0 : 2.0 * out.homogeneity * out.completeness / hc;
  return out;
}

std::optional<double> instance_localization_auc(const Vector& attn,
                                                std::span<const int> instance_labels) {
  if (static_cast<size_t>(attn.size()) != instance_labels.size())
    throw DomainError("instance_localization_auc: length mismatch");
  std::vector<bool> pos(instance_labels.size());
  for (size_t i = 0; i < instance_labels.size(); ++i) pos[i] = instance_labels[i] >= 1;
  return binary_auc(std::span<const double>(attn.data(), instance_labels.size()), pos);
}

namespace {

Json optional_to_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

std::string csv_value(double x) { return std::isfinite(x) ? format_double(x) : "nan"; }
std::string csv_value(const std::optional<double>& x) { return x ? csv_value(*x) : ""; }

}  // namespace

Json report_to_json(const MetricsReport& r) {
  Json doc;
  doc["n_bags"] = r.n_bags;
  doc["macro_auc"] = std::isfinite(r.macro_auc) ? Json(r.macro_auc) : Json(nullptr);
  doc["macro_f1"] = r.macro_f1;
  Json auc = Json::array();
  for (const auto& a : r.per_class_auc) auc.push_back(optional_to_json(a));
  doc["per_class_auc"] = std::move(auc);
  doc["per_class_f1"] = r.per_class_f1;
  doc["mean_attention_entropy"] = r.mean_attention_entropy;
  Json topk = Json::object();
  for (size_t i = 0; i < r.topk_list.size(); ++i)
    topk[std::to_string(r.topk_list[i])] = r.mean_topk_cumulative.at(i);
  doc["mean_topk_cumulative"] = std::move(topk);
  doc["v_measure"] = optional_to_json(r.v_measure);
  doc["instance_localization_auc"] = optional_to_json(r.instance_localization_auc);
  doc["mean_branch_cosine"] = optional_to_json(r.mean_branch_cosine);
  return doc;
}

std::vector<std::string> report_csv_header(const MetricsReport& r) {
  std::vector<std::string> h{"n_bags", "macro_auc", "macro_f1", "mean_attention_entropy"};
  for (Index k : r.topk_list) h.push_back("top" + std::to_string(k) + "_cumulative");
  h.insert(h.end(), {"v_measure", "instance_localization_auc", "mean_branch_cosine"});
  return h;
}

std::vector<std::string> report_csv_row(const MetricsReport& r) {
  std::vector<std::string> row{std::to_string(r.n_bags), csv_value(r.macro_auc),
                               csv_value(r.macro_f1), csv_value(r.mean_attention_entropy)};
  for (double v : r.mean_topk_cumulative) row.push_back(csv_value(v));
  row.push_back(csv_value(r.v_measure));
  row.push_back(csv_value(r.instance_localization_auc));
  row.push_back(csv_value(r.mean_branch_cosine));
  return row;
}

}  // namespace acmil
