#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acmil/numerics.hpp"
#include "acmil/rng.hpp"
#include "acmil/text_io.hpp"

namespace acmil {

/// One MIL sample: N instances of D features and a bag-level class label.
/// `instance_labels` (0 = background, k >= 1 = discriminative pattern k) is
/// only ever read by diagnostics.
struct Bag {
  std::string id;
  Matrix instances;  // N x D
  int label = 0;
  std::optional<std::vector<int>> instance_labels;

  Index num_instances() const { return instances.rows(); }
  Index feature_dim() const { return instances.cols(); }
};

void validate_bag(const Bag& bag, Index feature_dim, int num_classes);

enum class Activation { relu, identity };
enum class Aggregator { attention, max_pool, mean_pool };

std::string to_string(Activation a);
std::string to_string(Aggregator a);
Activation activation_from_string(const std::string& s);
Aggregator aggregator_from_string(const std::string& s);

/// D input features, E embedding width, L attention hidden width, M branches,
/// C classes.
struct Dims {
  Index D = 0;
  Index E = 64;
  Index L = 128;
  Index M = 5;
  Index C = 2;

  friend bool operator==(const Dims&, const Dims&) = default;
};

/// score(h) = w^T (tanh(V1 h) * sigm(V2 h)).
struct GatedAttentionParams {
  Matrix V1;  // L x E
  Matrix V2;  // L x E
  Vector w;   // L
};

/// logits = W z + b.
struct LinearHead {
  Matrix W;  // C x E
  Vector b;  // C
};

/// Every trainable tensor. Also used for gradients and optimizer moments.
struct Parameters {
  Matrix embed_W;  // E x D
  Vector embed_b;  // E
  std::vector<GatedAttentionParams> branches;
  std::vector<LinearHead> branch_heads;
  LinearHead bag_head;
};

using Gradients = Parameters;

struct Model {
  Dims dims;
  Activation activation = Activation::relu;
  Aggregator aggregator = Aggregator::attention;
  Parameters params;
};

/// A named flat view of one tensor.
template <typename T>
struct TensorView {
  std::string name;
  std::span<T> data;
  Index rows;
  Index cols;
};

std::vector<TensorView<double>> tensors(Parameters& p);
std::vector<TensorView<const double>> tensors(const Parameters& p);

Parameters zeros_like(const Parameters& p);
Parameters zero_parameters(const Dims& dims);

/// Glorot-uniform weights, zero biases.
Model init_model(const Dims& dims, Rng& rng, Activation activation = Activation::relu,
                 Aggregator aggregator = Aggregator::attention);

/// Throws ConfigError if any tensor shape disagrees with dims or M < 1.
void validate_model(const Model& model);

Json model_to_json(const Model& model);
Model model_from_json(const Json& doc);

/// Checkpoint document: the model plus the run configuration and seed that
/// produced it.
struct Checkpoint {
  Model model;
  Json config;
  std::uint64_t seed = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace acmil
