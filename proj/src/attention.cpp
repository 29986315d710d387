#include "acmil/attention.hpp"

#include <algorithm>
#include <cmath>

namespace acmil {

Index StkimConfig::candidates(Index n) const {
  if (n <= 0) return 0;
  if (mode == KMode::count) return std::min(count, n);
  const Index k = std::max<Index>(1, static_cast<Index>(std::llround(fraction * static_cast<double>(n))));
  return std::min(k, n);
}

void StkimConfig::validate() const {
  if (mode == KMode::count && count < 0) throw ConfigError("stkim.K: must be >= 0");
  if (mode == KMode::fraction && !(fraction > 0.0 && fraction <= 1.0))
    throw ConfigError("stkim.fraction: must lie in (0, 1]");
  if (!(prob >= 0.0 && prob <= 1.0)) throw ConfigError("stkim.p: must lie in [0, 1]");
}

std::vector<Mask> ForwardTrace::masks() const {
  std::vector<Mask> out;
  out.reserve(branches.size());
  for (const auto& b : branches) out.push_back(b.mask);
  return out;
}

namespace {

void check_dims(const Bag& bag, const Model& model) {
  if (bag.feature_dim() != model.dims.D)
    throw ConfigError("bag '" + bag.id + "' has " + std::to_string(bag.feature_dim()) +
                      " features but the model expects D=" + std::to_string(model.dims.D));
  if (bag.num_instances() < 1) throw ConfigError("bag '" + bag.id + "' is empty");
}

void embed(const Bag& bag, const Model& model, Matrix& pre, Matrix& out) {
  check_dims(bag, model);
  pre = bag.instances * model.params.embed_W.transpose();
  pre.rowwise() += model.params.embed_b.transpose();
  out = model.activation == Activation::relu ? Matrix(relu(pre.array()).matrix()) : pre;
}

void classify(const LinearHead& head, const Vector& z, Vector& logits, Vector& probs) {
  logits = head.W * z + head.b;
  probs = softmax(logits);
}

// Shared tail of both forward variants: pool, classify, average.
void finish(const Model& model, ForwardTrace& tr) {
  const auto& p = model.params;
  std::vector<Vector> attns;
  attns.reserve(tr.branches.size());
  for (size_t i = 0; i < tr.branches.size(); ++i) {
    auto& b = tr.branches[i];
    b.z = aggregate(b.attn, tr.embeddings);
    classify(p.branch_heads[i], b.z, b.logits, b.probs);
    attns.push_back(b.attn);
  }
  tr.heatmap = average_heatmap(attns);
  tr.z = aggregate(tr.heatmap, tr.embeddings);
  classify(p.bag_head, tr.z, tr.logits, tr.probs);
}

double surviving_mass(const Vector& attn, const std::vector<Index>& zeroed) {
  Vector kept = attn;
  for (Index i : zeroed) kept[i] = 0.0;
  return kept.sum();
}

}  // namespace

Matrix embed_instances(const Bag& bag, const Model& model) {
  Matrix pre, out;
  embed(bag, model, pre, out);
  return out;
}

GatedAttentionTrace gated_attention_trace(const Matrix& embeddings,
                                          const GatedAttentionParams& branch) {
  if (embeddings.rows() < 1) throw DomainError("gated_attention: no instances");
  if (branch.V1.cols() != embeddings.cols() || branch.V2.cols() != embeddings.cols())
    throw DomainError("gated_attention: embedding width mismatch");
  GatedAttentionTrace t;
  t.tanh_part = (embeddings * branch.V1.transpose()).array().tanh().matrix();
  t.sigm_part = sigmoid((embeddings * branch.V2.transpose()).array()).matrix();
  t.scores = t.tanh_part.cwiseProduct(t.sigm_part) * branch.w;
  t.attn = softmax(t.scores);
  return t;
}

Vector gated_attention(const Matrix& embeddings, const GatedAttentionParams& branch) {
  return gated_attention_trace(embeddings, branch).attn;
}

Vector apply_mask(const Vector& attn, const std::vector<Index>& zeroed, bool* fell_back) {
  if (fell_back) *fell_back = false;
  if (zeroed.empty()) return attn;
  Vector out = attn;
  for (Index i : zeroed) out[i] = 0.0;
  const double mass = out.sum();
  if (!(mass > 0.0)) {
    if (fell_back) *fell_back = true;
    return attn;
  }
  return out / mass;
}

MaskedAttention stkim_mask(const Vector& attn, const StkimConfig& cfg, Rng& rng, bool training) {
  if (!training && !cfg.enabled_at_eval) return {attn, {}};
  const Index k = cfg.candidates(attn.size());
  if (k == 0 || cfg.prob <= 0.0) return {attn, {}};

  const auto order = argsort_descending(attn);
  Mask mask;
  for (Index r = 0; r < k; ++r)
    if (rng.bernoulli(cfg.prob)) mask.zeroed.push_back(order[r]);
  std::sort(mask.zeroed.begin(), mask.zeroed.end());

  bool fell_back = false;
  Vector values = apply_mask(attn, mask.zeroed, &fell_back);
  if (fell_back) {
    mask.zeroed.clear();
    mask.fallback = true;
  }
  return {std::move(values), std::move(mask)};
}

Vector average_heatmap(std::span<const Vector> branch_attns) {
  if (branch_attns.empty()) throw DomainError("average_heatmap: no branches");
  Vector sum = branch_attns[0];
  for (size_t i = 1; i < branch_attns.size(); ++i) {
    if (branch_attns[i].size() != sum.size()) throw DomainError("average_heatmap: length mismatch");
    sum += branch_attns[i];
  }
  if (branch_attns.size() == 1) return sum;
  return sum / static_cast<double>(branch_attns.size());
}

ForwardTrace mba_forward(const Bag& bag, const Model& model, const StkimConfig& stkim, Rng& rng,
                         bool training) {
  ForwardTrace tr;
  embed(bag, model, tr.pre_activation, tr.embeddings);
  tr.branches.resize(model.params.branches.size());
  for (size_t i = 0; i < tr.branches.size(); ++i) {
    auto& b = tr.branches[i];
    b.gate = gated_attention_trace(tr.embeddings, model.params.branches[i]);
    auto masked = stkim_mask(b.gate.attn, stkim, rng, training);
    b.attn = std::move(masked.values);
    b.mask = std::move(masked.mask);
    b.kept_mass = b.mask.empty() ? 1.0 : surviving_mass(b.gate.attn, b.mask.zeroed);
  }
  finish(model, tr);
  return tr;
}

ForwardTrace mba_forward_frozen(const Bag& bag, const Model& model, std::span<const Mask> masks) {
  if (masks.size() != model.params.branches.size())
    throw DomainError("mba_forward_frozen: one mask per branch required");
  ForwardTrace tr;
  embed(bag, model, tr.pre_activation, tr.embeddings);
  tr.branches.resize(model.params.branches.size());
  for (size_t i = 0; i < tr.branches.size(); ++i) {
    auto& b = tr.branches[i];
    b.gate = gated_attention_trace(tr.embeddings, model.params.branches[i]);
    bool fell_back = false;
    b.attn = apply_mask(b.gate.attn, masks[i].zeroed, &fell_back);
    b.mask = masks[i];
    if (fell_back) {
      b.mask.zeroed.clear();
      b.mask.fallback = true;
    }
    b.kept_mass = b.mask.empty() ? 1.0 : surviving_mass(b.gate.attn, b.mask.zeroed);
  }
  finish(model, tr);
  return tr;
}

PoolingTrace pooling_trace(const Bag& bag, const Model& model, Aggregator mode) {
  PoolingTrace t;
  embed(bag, model, t.pre_activation, t.embeddings);
  const Index n = t.embeddings.rows();
  if (mode == Aggregator::max_pool) {
    t.z.resize(t.embeddings.cols());
    t.argmax.resize(static_cast<size_t>(t.embeddings.cols()));
    for (Index c = 0; c < t.embeddings.cols(); ++c) {
      Index best = 0;
      for (Index r = 1; r < n; ++r)
        if (t.embeddings(r, c) > t.embeddings(best, c)) best = r;
      t.argmax[static_cast<size_t>(c)] = best;
      t.z[c] = t.embeddings(best, c);
    }
  } else if (mode == Aggregator::mean_pool) {
    t.z = t.embeddings.colwise().mean().transpose();
  } else {
    throw DomainError("pooling_trace: aggregator must be max or mean");
  }
  classify(model.params.bag_head, t.z, t.logits, t.probs);
  return t;
}

Vector pooling_forward(const Bag& bag, const Model& model, Aggregator mode) {
  return pooling_trace(bag, model, mode).probs;
}

}  // namespace acmil
