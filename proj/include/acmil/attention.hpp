#pragma once

// Forward pass of the multi-branch gated-attention MIL model: instance
// embedding, per-branch gated attention, stochastic top-K masking, attention
// pooling and the branch/bag classifiers. Also the max/mean pooling baselines.

#include <span>
#include <vector>

#include "acmil/model.hpp"
#include "acmil/numerics.hpp"
#include "acmil/rng.hpp"

namespace acmil {

struct StkimConfig {
  enum class KMode { count, fraction };

  KMode mode = KMode::count;
  Index count = 10;
  double fraction = 0.01;
  double prob = 0.6;
  bool enabled_at_eval = false;

  static StkimConfig with_count(Index k, double p) {
    StkimConfig c;
    c.mode = KMode::count;
    c.count = k;
    c.prob = p;
    return c;
  }
  static StkimConfig with_fraction(double f, double p) {
    StkimConfig c;
    c.mode = KMode::fraction;
    c.fraction = f;
    c.prob = p;
    return c;
  }
  static StkimConfig disabled() { return with_count(0, 0.0); }

  /// Number of top-ranked candidates for a bag of n instances:
  /// min(K, n) for a count, min(max(1, round(f n)), n) for a fraction.
  Index candidates(Index n) const;

  void validate() const;
};

/// Indices whose attention was zeroed. `fallback` is set when every surviving
/// value would have been zero; the unmasked attention is then used instead.
struct Mask {
  std::vector<Index> zeroed;
  bool fallback = false;

  bool empty() const { return zeroed.empty(); }
};

struct MaskedAttention {
  Vector values;
  Mask mask;
};

struct GatedAttentionTrace {
  Matrix tanh_part;  // N x L, tanh(H V1^T)
  Matrix sigm_part;  // N x L, sigm(H V2^T)
  Vector scores;     // N
  Vector attn;       // N, softmax(scores)
};

struct BranchTrace {
  GatedAttentionTrace gate;
  Vector attn;  // post-mask
  Mask mask;
  double kept_mass = 1.0;  // sum of raw attention over surviving indices
  Vector z;
  Vector logits;
  Vector probs;

  const Vector& raw_attn() const { return gate.attn; }
};

struct ForwardTrace {
  Matrix pre_activation;  // N x E
  Matrix embeddings;      // N x E
  std::vector<BranchTrace> branches;
  Vector heatmap;  // mean of the branch attentions
  Vector z;
  Vector logits;
  Vector probs;

  std::vector<Mask> masks() const;
};

/// h_n = act(W x_n + b) for every instance (rows of the result).
Matrix embed_instances(const Bag& bag, const Model& model);

GatedAttentionTrace gated_attention_trace(const Matrix& embeddings,
                                          const GatedAttentionParams& branch);
Vector gated_attention(const Matrix& embeddings, const GatedAttentionParams& branch);

/// Zeroes `zeroed` and renormalizes. Returns the input unchanged (and sets
/// *fell_back) when nothing positive survives.
Vector apply_mask(const Vector& attn, const std::vector<Index>& zeroed, bool* fell_back = nullptr);

/// Stochastic top-K instance masking. Identity when !training and the config
/// is not enabled at eval.
MaskedAttention stkim_mask(const Vector& attn, const StkimConfig& cfg, Rng& rng, bool training);

/// z = sum_n a_n h_n.
template <typename DA, typename DH>
Vector aggregate(const Eigen::MatrixBase<DA>& attn, const Eigen::MatrixBase<DH>& embeddings) {
  if (attn.size() != embeddings.rows()) throw DomainError("aggregate: length mismatch");
  return embeddings.transpose() * attn;
}

Vector average_heatmap(std::span<const Vector> branch_attns);

ForwardTrace mba_forward(const Bag& bag, const Model& model, const StkimConfig& stkim, Rng& rng,
                         bool training);

/// Replays a forward pass with masks fixed in advance (for gradient checks and
/// for reproducing a recorded training step).
ForwardTrace mba_forward_frozen(const Bag& bag, const Model& model, std::span<const Mask> masks);

struct PoolingTrace {
  Matrix pre_activation;
  Matrix embeddings;
  Vector z;
  std::vector<Index> argmax;  // per embedding column, max mode only
  Vector logits;
  Vector probs;
};

PoolingTrace pooling_trace(const Bag& bag, const Model& model, Aggregator mode);
Vector pooling_forward(const Bag& bag, const Model& model, Aggregator mode);

}  // namespace acmil
