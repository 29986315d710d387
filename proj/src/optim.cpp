#include "acmil/optim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

namespace acmil {

std::string to_string(SelectionMetric m) {
  return m == SelectionMetric::macro_auc ? "macro_auc" : "macro_f1";
}

SelectionMetric selection_metric_from_string(const std::string& s) {
  if (s == "macro_auc") return SelectionMetric::macro_auc;
  if (s == "macro_f1") return SelectionMetric::macro_f1;
  throw ConfigError("train.selection_metric: unknown value '" + s + "'");
}

void adam_step(Parameters& params, const Gradients& grads, AdamState& state, double lr,
               const AdamConfig& cfg) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto theta = tensors(params);
  const auto g = tensors(grads);
  auto m = tensors(state.m);
  auto v = tensors(state.v);
  if (theta.size() != g.size() || theta.size() != m.size() || theta.size() != v.size())
    throw DomainError("adam_step: tensor count mismatch");
  for (size_t k = 0; k < theta.size(); ++k) {
    if (theta[k].data.size() != g[k].data.size() || theta[k].data.size() != m[k].data.size())
      throw DomainError("adam_step: shape mismatch in " + theta[k].name);
    for (size_t i = 0; i < theta[k].data.size(); ++i) {
      double& p = theta[k].data[i];
      double gi = g[k].data[i];
      if (!cfg.decoupled) gi += cfg.weight_decay * p;
      double& mi = m[k].data[i];
      double& vi = v[k].data[i];
      mi = cfg.beta1 * mi + (1.0 - cfg.beta1) * gi;
      vi = cfg.beta2 * vi + (1.0 - cfg.beta2) * gi * gi;
      if (cfg.decoupled) p -= lr * cfg.weight_decay * p;
      p -= lr * (mi / c1) / (std::sqrt(vi / c2) + cfg.eps);
      if (!std::isfinite(p) || !std::isfinite(mi) || !std::isfinite(vi))
        throw NumericalError("adam_step: non-finite update in tensor " + theta[k].name);
    }
  }
}

double cosine_lr(int epoch, int epochs, double lr0) {
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * epoch / static_cast<double>(epochs)));
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train.epochs: must be >= 1");
  if (!(lr0 > 0)) throw ConfigError("train.lr0: must be positive");
  if (batch_size != 1) throw ConfigError("train.batch_size: only 1 is supported");
  if (!(adam.weight_decay >= 0)) throw ConfigError("train.weight_decay: must be >= 0");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1))
    throw ConfigError("train.betas: must lie in [0, 1)");
  if (!(adam.eps > 0)) throw ConfigError("train.adam_eps: must be positive");
  if (dims.E < 1 || dims.L < 1 || dims.M < 1) throw ConfigError("train.dims: E, L, M must be >= 1");
  if (topk_list.empty()) throw ConfigError("train.topk: list must be non-empty");
  for (Index k : topk_list)
    if (k < 1) throw ConfigError("train.topk: entries must be >= 1");
  stkim.validate();
}

bool TrainConfig::is_abmil() const {
  return aggregator == Aggregator::attention && dims.M == 1 &&
         (stkim.prob == 0.0 || (stkim.mode == StkimConfig::KMode::count && stkim.count == 0));
}

Json to_json(const StkimConfig& c) {
  Json j;
  if (c.mode == StkimConfig::KMode::count)
    j["K"] = c.count;
  else
    j["fraction"] = c.fraction;
  j["p"] = c.prob;
  j["enabled_at_eval"] = c.enabled_at_eval;
  return j;
}

StkimConfig stkim_config_from_json(const Json& j) {
  StkimConfig c;
  try {
    if (j.contains("K") && j.contains("fraction"))
      throw ConfigError("stkim: give either K or fraction, not both");
    if (j.contains("fraction")) {
      c.mode = StkimConfig::KMode::fraction;
      c.fraction = j.at("fraction").get<double>();
    } else if (j.contains("K")) {
      c.count = j.at("K").get<Index>();
    }
    c.prob = j.value("p", c.prob);
    c.enabled_at_eval = j.value("enabled_at_eval", false);
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "K" && it.key() != "fraction" && it.key() != "p" && it.key() != "enabled_at_eval")
        throw ConfigError("stkim." + it.key() + ": unknown field");
  } catch (const Json::exception&) {
    throw ConfigError("stkim: wrong field type");
  }
  c.validate();
  return c;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["epochs"] = c.epochs;
  j["lr0"] = c.lr0;
  j["weight_decay"] = c.adam.weight_decay;
  j["decoupled_weight_decay"] = c.adam.decoupled;
  j["betas"] = {c.adam.beta1, c.adam.beta2};
  j["adam_eps"] = c.adam.eps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["stkim"] = to_json(c.stkim);
  j["dims"] = {{"D", c.dims.D}, {"E", c.dims.E}, {"L", c.dims.L}, {"M", c.dims.M}, {"C", c.dims.C}};
  j["activation"] = to_string(c.activation);
  j["aggregator"] = to_string(c.aggregator);
  j["diversity_loss"] = c.diversity_loss;
  j["selection_metric"] = to_string(c.selection_metric);
  j["topk"] = c.topk_list;
  return j;
}

TrainConfig train_config_from_json(const Json& j) {
  TrainConfig c;
  static const std::vector<std::string> known{
      "epochs", "lr0", "weight_decay", "decoupled_weight_decay", "betas", "adam_eps", "batch_size",
      "seed", "stkim", "dims", "activation", "aggregator", "diversity_loss", "selection_metric", "topk"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("train." + it.key() + ": unknown field");
  std::string current;
  try {
    auto field = [&](const char* name, auto& target) {
      current = name;
      if (j.contains(name)) j.at(name).get_to(target);
    };
    field("epochs", c.epochs);
    field("lr0", c.lr0);
    field("weight_decay", c.adam.weight_decay);
    field("decoupled_weight_decay", c.adam.decoupled);
    current = "betas";
    if (j.contains("betas")) {
      const auto b = j.at("betas").get<std::vector<double>>();
      if (b.size() != 2) throw ConfigError("train.betas: need two values");
      c.adam.beta1 = b[0];
      c.adam.beta2 = b[1];
    }
    field("adam_eps", c.adam.eps);
    field("batch_size", c.batch_size);
    field("seed", c.seed);
    current = "dims";
    if (j.contains("dims")) {
      const auto& d = j.at("dims");
      c.dims.D = d.value("D", c.dims.D);
      c.dims.E = d.value("E", c.dims.E);
      c.dims.L = d.value("L", c.dims.L);
      c.dims.M = d.value("M", c.dims.M);
      c.dims.C = d.value("C", c.dims.C);
    }
    current = "activation";
    if (j.contains("activation")) c.activation = activation_from_string(j.at("activation").get<std::string>());
    current = "aggregator";
    if (j.contains("aggregator")) c.aggregator = aggregator_from_string(j.at("aggregator").get<std::string>());
    field("diversity_loss", c.diversity_loss);
    current = "selection_metric";
    if (j.contains("selection_metric"))
      c.selection_metric = selection_metric_from_string(j.at("selection_metric").get<std::string>());
    field("topk", c.topk_list);
  } catch (const Json::exception&) {
    throw ConfigError("train." + current + ": wrong type");
  }
  if (j.contains("stkim")) c.stkim = stkim_config_from_json(j.at("stkim"));
  c.validate();
  return c;
}

namespace {

Vector attention_proxy(const PoolingTrace& t, Aggregator mode) {
  const Index n = t.embeddings.rows();
  if (mode == Aggregator::mean_pool) return Vector::Constant(n, 1.0 / static_cast<double>(n));
  // Max pooling: share of embedding coordinates each instance supplies.
  Vector share = Vector::Zero(n);
  for (Index r : t.argmax) share[r] += 1.0;
  return share / static_cast<double>(t.argmax.size());
}

Index argmax(const Vector& v) {
  Index best = 0;
  for (Index i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace

Evaluation evaluate(const Model& model, std::span<const Bag* const> bags, const EvalOptions& opts) {
  Evaluation ev;
  Rng rng(opts.seed);
  const Index c = model.dims.C;
  Matrix scores(static_cast<Index>(bags.size()), c);
  std::vector<int> labels, preds;
  double entropy_sum = 0.0, loss_sum = 0.0, cosine_sum = 0.0;
  std::vector<double> topk_sum(opts.topk_list.size(), 0.0);
  double loc_sum = 0.0;
  int loc_count = 0;

  for (size_t i = 0; i < bags.size(); ++i) {
    const Bag& bag = *bags[i];
    BagOutput out{bag.id, bag.label, {}, {}, {}, {}};
    if (model.aggregator == Aggregator::attention) {
      const ForwardTrace tr = mba_forward(bag, model, opts.stkim, rng, opts.stkim_at_eval);
      for (const auto& b : tr.branches) {
        ev.any_mask = ev.any_mask || !b.mask.empty();
        ev.degenerate_masks += b.mask.fallback;
        out.branch_attn.push_back(b.attn);
      }
      loss_sum += total_loss(tr, bag.label, opts.loss).total;
      cosine_sum += mean_pairwise_cosine(out.branch_attn);
      out.probs = tr.probs;
      out.heatmap = tr.heatmap;
      out.embedding = tr.z;
    } else {
      const PoolingTrace tr = pooling_trace(bag, model, model.aggregator);
      loss_sum += pooling_loss(tr, bag.label).total;
      out.probs = tr.probs;
      out.heatmap = attention_proxy(tr, model.aggregator);
      out.embedding = tr.z;
    }
    scores.row(static_cast<Index>(i)) = out.probs.transpose();
    labels.push_back(bag.label);
    preds.push_back(static_cast<int>(argmax(out.probs)));
    entropy_sum += attention_entropy(out.heatmap);
    for (size_t k = 0; k < opts.topk_list.size(); ++k)
      topk_sum[k] += topk_cumulative(out.heatmap, opts.topk_list[k]);
    if (bag.instance_labels) {
      if (auto loc = instance_localization_auc(out.heatmap, *bag.instance_labels)) {
        loc_sum += *loc;
        ++loc_count;
      }
    }
    ev.bags.push_back(std::move(out));
  }

  auto& r = ev.report;
  const double n = static_cast<double>(bags.size());
  r.n_bags = bags.size();
  r.topk_list = opts.topk_list;
  if (bags.empty()) {
    r.macro_auc = std::numeric_limits<double>::quiet_NaN();
    r.mean_topk_cumulative.assign(opts.topk_list.size(), 0.0);
    return ev;
  }
  if (bags.size() >= 2) {
    const auto auc = macro_auc(scores, labels);
    r.macro_auc = auc.macro;
    r.per_class_auc = auc.per_class;
  } else {
    r.macro_auc = std::numeric_limits<double>::quiet_NaN();
    r.per_class_auc.assign(static_cast<size_t>(c), std::nullopt);
  }
  const auto f1 = macro_f1(preds, labels, static_cast<int>(c));
  r.macro_f1 = f1.macro;
  r.per_class_f1 = f1.per_class;
  r.mean_attention_entropy = entropy_sum / n;
  for (double s : topk_sum) r.mean_topk_cumulative.push_back(s / n);
  if (loc_count > 0) r.instance_localization_auc = loc_sum / loc_count;
  if (model.aggregator == Aggregator::attention && model.dims.M >= 2) r.mean_branch_cosine = cosine_sum / n;
  if (opts.cluster_embeddings && bags.size() >= static_cast<size_t>(c)) {
    Matrix emb(static_cast<Index>(bags.size()), model.dims.E);
    for (size_t i = 0; i < bags.size(); ++i) emb.row(static_cast<Index>(i)) = ev.bags[i].embedding.transpose();
    const auto clusters = kmeans(emb, static_cast<int>(c), opts.seed);
    r.v_measure = v_measure(clusters, labels).v;
  }
  ev.mean_loss = loss_sum / n;
  return ev;
}

std::string history_to_csv(const TrainHistory& h) {
  std::ostringstream out;
  out << "epoch,lr,train_l_b,train_l_p,train_l_d,train_total,val_loss,val_macro_auc,val_macro_f1,"
         "val_entropy,val_topk,val_localization,degenerate_masks,selected\n";
  auto num = [](double x) { return std::isfinite(x) ? format_double(x) : std::string("nan"); };
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << num(e.lr) << ',' << num(e.train_loss.l_b) << ','
        << num(e.train_loss.l_p) << ',' << num(e.train_loss.l_d) << ',' << num(e.train_loss.total)
        << ',' << num(e.val_loss) << ',' << num(e.val_macro_auc) << ',' << num(e.val_macro_f1)
        << ',' << num(e.val_entropy) << ',' << num(e.val_topk) << ',' << num(e.val_localization) << ',' << e.degenerate_masks << ','
        << (e.epoch == h.selected_epoch ? 1 : 0) << '\n';
  }
  return out.str();
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg_in) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  validate_dataset(ds);
  if (cfg.dims.D == 0) cfg.dims.D = ds.feature_dim;
  if (cfg.dims.C == 0) cfg.dims.C = ds.num_classes;
  if (cfg.dims.D != ds.feature_dim || cfg.dims.C != ds.num_classes)
    throw ConfigError("train.dims: D/C disagree with the dataset (D=" + std::to_string(ds.feature_dim) +
                      ", C=" + std::to_string(ds.num_classes) + ")");

  const auto train_bags = ds.select(Split::train);
  const auto val_bags = ds.select(Split::val);
  if (train_bags.empty()) throw ConfigError("dataset: training split is empty");
  if (val_bags.empty()) throw ConfigError("dataset: validation split is empty");

  const Rng root(cfg.seed);
  Rng init_rng = root.child(1);
  Model model = init_model(cfg.dims, init_rng, cfg.activation, cfg.aggregator);
  AdamState state = AdamState::for_model(model);
  const LossOptions loss_opts{cfg.diversity_loss};

  EvalOptions val_opts;
  val_opts.topk_list = cfg.topk_list;
  val_opts.loss = loss_opts;
  val_opts.cluster_embeddings = false;
  val_opts.seed = root.child(3).seed();

  TrainResult result{model, {}, cfg};
  double best = -std::numeric_limits<double>::infinity();
  std::vector<size_t> order(train_bags.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.epochs, cfg.lr0);
    Rng shuffle_rng = root.child(100).child(static_cast<std::uint64_t>(epoch));
    Rng mask_rng = root.child(200).child(static_cast<std::uint64_t>(epoch));
    std::iota(order.begin(), order.end(), size_t{0});
    for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (size_t idx : order) {
      const Bag& bag = *train_bags[idx];
      LossBreakdown loss;
      Gradients grads;
      if (model.aggregator == Aggregator::attention) {
        const ForwardTrace tr = mba_forward(bag, model, cfg.stkim, mask_rng, true);
        for (const auto& b : tr.branches) rec.degenerate_masks += b.mask.fallback;
        loss = total_loss(tr, bag.label, loss_opts);
        grads = backward(tr, bag, model, loss_opts);
      } else {
        const PoolingTrace tr = pooling_trace(bag, model, model.aggregator);
        loss = pooling_loss(tr, bag.label);
        grads = pooling_backward(tr, bag, model);
      }
      rec.train_loss.l_b += loss.l_b;
      rec.train_loss.l_p += loss.l_p;
      rec.train_loss.l_d += loss.l_d;
      rec.train_loss.total += loss.total;
      adam_step(model.params, grads, state, lr, cfg.adam);
    }
    const double n = static_cast<double>(train_bags.size());
    rec.train_loss.l_b /= n;
    rec.train_loss.l_p /= n;
    rec.train_loss.l_d /= n;
    rec.train_loss.total /= n;

    const Evaluation val = evaluate(model, val_bags, val_opts);
    if (val.any_mask) throw std::logic_error("validation pass produced an attention mask");
    rec.val_loss = val.mean_loss;
    rec.val_macro_auc = val.report.macro_auc;
    rec.val_macro_f1 = val.report.macro_f1;
    rec.val_entropy = val.report.mean_attention_entropy;
    rec.val_topk = val.report.mean_topk_cumulative.front();
    if (val.report.instance_localization_auc) rec.val_localization = *val.report.instance_localization_auc;
    result.history.epochs.push_back(rec);

    double score = cfg.selection_metric == SelectionMetric::macro_auc ? rec.val_macro_auc : rec.val_macro_f1;
    if (!std::isfinite(score)) score = -std::numeric_limits<double>::infinity();
    if (epoch == 0 || score > best) {
      best = score;
      result.history.selected_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

}  // namespace acmil
