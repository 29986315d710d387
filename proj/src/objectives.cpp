#include "acmil/objectives.hpp"

#include <algorithm>
#include <cmath>

// Chain rule for one bag (N instances, M branches, label y):
//
//   pre = X W^T + b,  H = act(pre)
//   branch i:  T = tanh(H V1^T), S = sigm(H V2^T), s = (T*S) w, r = softmax(s)
//              a = r*m / sum(r*m)            (m = 0/1 keep indicators, constant)
//              z_i = H^T a, P_i = softmax(W_i z_i + b_i)
//   abar = mean_i a_i, z = H^T abar, P = softmax(W_g z + b_g)
//   L = -log P[y] - (1/M) sum_i log P_i[y] + c sum_{i<j} cos(a_i, a_j),
//   c = 2/(M(M-1)).
//
// Reverse sweep:
//   dlogits = P - e_y;  dW_g = dlogits z^T;  dz = W_g^T dlogits
//   dH += abar dz^T;    dabar = H dz;        da_i += dabar / M
//   same for each branch head with weight 1/M, feeding dH and da_i directly
//   da_i += c sum_{j != i} d cos(a_i, a_j) / da_i
//   dr_k = m_k (da_k - da.a) / sum(r*m)      (identity when nothing is masked)
//   ds = r * (dr - r.dr)
//   dw = (T*S)^T ds;  dG = ds w^T
//   dA = dG*S*(1 - T^2);  dB = dG*T*S*(1 - S)
//   dV1 = dA^T H;  dV2 = dB^T H;  dH += dA V1 + dB V2
//   dpre = dH * act'(pre);  dW = dpre^T X;  db = colsum(dpre)

namespace acmil {

namespace {

double clamped_nll(const Vector& probs, int label) {
  if (label < 0 || label >= probs.size()) throw DomainError("label outside class range");
  return -std::log(std::max(probs[label], kLogFloor));
}

// d(-log max(p_y, floor)) / dlogits through the softmax.
Vector nll_logit_grad(const Vector& probs, int label) {
  if (probs[label] < kLogFloor) return Vector::Zero(probs.size());
  Vector g = probs;
  g[label] -= 1.0;
  return g;
}

void check_finite(const Gradients& g) {
  for (const auto& t : tensors(g))
    for (double x : t.data)
      if (!std::isfinite(x)) throw NumericalError("non-finite gradient in tensor " + t.name);
}

Gradients& embed_backward(Gradients& g, const Matrix& dH, const Matrix& pre, const Bag& bag,
                          const Model& model) {
  const Matrix dpre = model.activation == Activation::relu
                          ? Matrix(dH.array() * relu_derivative(pre.array()))
                          : dH;
  g.embed_W = dpre.transpose() * bag.instances;
  g.embed_b = dpre.colwise().sum().transpose();
  return g;
}

}  // namespace

double branch_loss(std::span<const Vector> branch_probs, int label) {
  if (branch_probs.empty()) throw DomainError("branch_loss: no branches");
  double sum = 0.0;
  for (const auto& p : branch_probs) sum += clamped_nll(p, label);
  return sum / static_cast<double>(branch_probs.size());
}

double mean_pairwise_cosine(std::span<const Vector> branch_attns) {
  const size_t m = branch_attns.size();
  if (m < 2) return 0.0;
  double sum = 0.0;
  for (size_t i = 0; i < m; ++i)
    for (size_t j = i + 1; j < m; ++j) sum += cosine_similarity(branch_attns[i], branch_attns[j]);
  return 2.0 * sum / static_cast<double>(m * (m - 1));
}

double diversity_loss(std::span<const Vector> branch_attns) {
  if (branch_attns.empty()) throw DomainError("diversity_loss: no branches");
  return mean_pairwise_cosine(branch_attns);
}

double bag_loss(const Vector& bag_probs, int label) { return clamped_nll(bag_probs, label); }

LossBreakdown total_loss(const ForwardTrace& trace, int label, const LossOptions& opts) {
  std::vector<Vector> probs, attns;
  for (const auto& b : trace.branches) {
    probs.push_back(b.probs);
    attns.push_back(b.attn);
  }
  LossBreakdown out;
  out.l_b = bag_loss(trace.probs, label);
  out.l_p = branch_loss(probs, label);
  out.l_d = opts.diversity ? diversity_loss(attns) : 0.0;
  out.total = out.l_b + out.l_p + out.l_d;
  return out;
}

Gradients backward(const ForwardTrace& trace, const Bag& bag, const Model& model,
                   const LossOptions& opts) {
  const auto& p = model.params;
  const Matrix& H = trace.embeddings;
  const size_t m = trace.branches.size();
  const double inv_m = 1.0 / static_cast<double>(m);
  Gradients g = zero_parameters(model.dims);
  Matrix dH = Matrix::Zero(H.rows(), H.cols());

  const Vector dlogits = nll_logit_grad(trace.probs, bag.label);
  g.bag_head.W = dlogits * trace.z.transpose();
  g.bag_head.b = dlogits;
  const Vector dz = p.bag_head.W.transpose() * dlogits;
  dH.noalias() += trace.heatmap * dz.transpose();
  const Vector dheat = H * dz;

  std::vector<Vector> da(m, dheat * inv_m);
  for (size_t i = 0; i < m; ++i) {
    const auto& b = trace.branches[i];
    const Vector dl = nll_logit_grad(b.probs, bag.label) * inv_m;
    g.branch_heads[i].W = dl * b.z.transpose();
    g.branch_heads[i].b = dl;
    const Vector dzi = p.branch_heads[i].W.transpose() * dl;
    dH.noalias() += b.attn * dzi.transpose();
    da[i] += H * dzi;
  }

  if (opts.diversity && m >= 2) {
    const double c = 2.0 / static_cast<double>(m * (m - 1));
    for (size_t i = 0; i < m; ++i)
      for (size_t j = i + 1; j < m; ++j) {
        const auto& ai = trace.branches[i].attn;
        const auto& aj = trace.branches[j].attn;
        da[i] += c * cosine_similarity_grad(ai, aj);
        da[j] += c * cosine_similarity_grad(aj, ai);
      }
  }

  for (size_t i = 0; i < m; ++i) {
    const auto& b = trace.branches[i];
    const auto& br = p.branches[i];
    Vector dr = da[i];
    if (!b.mask.empty()) {
      const double inner = da[i].dot(b.attn);
      dr = (da[i].array() - inner).matrix() / b.kept_mass;
      for (Index k : b.mask.zeroed) dr[k] = 0.0;
    }
    const Vector ds = softmax_backward(b.raw_attn(), dr);
    const auto& T = b.gate.tanh_part;
    const auto& S = b.gate.sigm_part;
    g.branches[i].w = T.cwiseProduct(S).transpose() * ds;
    const Matrix dG = ds * br.w.transpose();
    const Matrix dA = (dG.array() * S.array() * (1.0 - T.array().square())).matrix();
    const Matrix dB = (dG.array() * T.array() * S.array() * (1.0 - S.array())).matrix();
    g.branches[i].V1 = dA.transpose() * H;
    g.branches[i].V2 = dB.transpose() * H;
    dH.noalias() += dA * br.V1;
    dH.noalias() += dB * br.V2;
  }

  embed_backward(g, dH, trace.pre_activation, bag, model);
  check_finite(g);
  return g;
}

LossBreakdown pooling_loss(const PoolingTrace& trace, int label) {
  LossBreakdown out;
  out.l_b = bag_loss(trace.probs, label);
  out.total = out.l_b + out.l_p + out.l_d;
  return out;
}

Gradients pooling_backward(const PoolingTrace& trace, const Bag& bag, const Model& model) {
  const auto& p = model.params;
  Gradients g = zero_parameters(model.dims);
  const Vector dlogits = nll_logit_grad(trace.probs, bag.label);
  g.bag_head.W = dlogits * trace.z.transpose();
  g.bag_head.b = dlogits;
  const Vector dz = p.bag_head.W.transpose() * dlogits;
  Matrix dH = Matrix::Zero(trace.embeddings.rows(), trace.embeddings.cols());
  if (!trace.argmax.empty()) {
    for (Index c = 0; c < dH.cols(); ++c) dH(trace.argmax[static_cast<size_t>(c)], c) = dz[c];
  } else {
    dH.rowwise() = dz.transpose() / static_cast<double>(dH.rows());
  }
  embed_backward(g, dH, trace.pre_activation, bag, model);
  check_finite(g);
  return g;
}

}  // namespace acmil
