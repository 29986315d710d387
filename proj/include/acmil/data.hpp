#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "acmil/model.hpp"
#include "acmil/text_io.hpp"

namespace acmil {

/// Gaussian-cluster bag generator. Class 0 bags hold background instances
/// only; a class c >= 1 bag draws a fraction w of its instances from a random
/// subset of class c's discriminative clusters.
struct SyntheticConfig {
  int num_classes = 2;
  Index feature_dim = 32;
  int patterns_per_class = 4;
  int background_patterns = 3;
  double cluster_std = 1.0;
  double cluster_separation = 8.0;
  int bags_per_class = 60;
  std::pair<Index, Index> instances_per_bag{100, 200};
  std::pair<double, double> positive_fraction{0.1, 0.4};
  // How many of the P patterns a positive bag shows; unset means all of them.
  std::optional<std::pair<int, int>> patterns_per_bag;
  // When true each bag draws its own background mixing proportions from a
  // flat Dirichlet, so bag means wander and mean pooling is not a shortcut.
  bool vary_background_mix = true;
  std::uint64_t seed = 0;

  void validate() const;
  std::pair<int, int> pattern_count_range() const {
    return patterns_per_bag.value_or(std::pair{patterns_per_class, patterns_per_class});
  }
};

Json to_json(const SyntheticConfig& cfg);
SyntheticConfig synthetic_config_from_json(const Json& doc);

enum class Split { unassigned, train, val, test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Dataset {
  Index feature_dim = 0;
  int num_classes = 2;
  std::vector<Bag> bags;
  std::vector<Split> splits;  // parallel to bags; empty when never split
  Json provenance = Json::object();
  Json split_info = Json::object();

  bool has_splits() const;
  std::vector<const Bag*> select(Split s) const;
};

/// Throws ValidationError naming the first inconsistent bag.
void validate_dataset(const Dataset& ds);

/// Pure function of cfg (including its seed). Throws GenerationError if the
/// cluster-separation constraint cannot be met.
Dataset generate_synthetic(const SyntheticConfig& cfg);

/// Cluster means used by generate_synthetic: rows 0..B-1 background, then
/// P rows per positive class.
Matrix synthetic_cluster_means(const SyntheticConfig& cfg);

Json dataset_to_json(const Dataset& ds);
Dataset dataset_from_json(const Json& doc, const std::string& source);

/// Text form (exact round trip).
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// "ACMB" binary container. Features are stored as 32-bit floats, so a round
/// trip through this form is lossy; split assignments are not stored.
void save_dataset_binary(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset_binary(const std::filesystem::path& path);

/// Picks the format from the extension (".acmb" binary, anything else text).
Dataset load_any_dataset(const std::filesystem::path& path);

/// Stratified train/val/test assignment. Per class, floor(ratio * n) bags go
/// to val and test and the remainder to train. Classes with fewer bags than
/// non-empty splits are pooled and split unstratified (recorded as a warning
/// in split_info).
Dataset split_dataset(Dataset ds, const std::array<double, 3>& ratios, std::uint64_t seed);

void validate_ratios(const std::array<double, 3>& ratios);

}  // namespace acmil
