#include "acmil/commands.hpp"

#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <thread>

namespace acmil {

namespace fs = std::filesystem;

Dataset cmd_gen_data(const RunConfig& cfg, const fs::path& out) {
  validate_ratios(cfg.split_ratios);
  Dataset ds = split_dataset(generate_synthetic(cfg.synthetic), cfg.split_ratios, cfg.split_seed);
  if (!out.empty()) {
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    if (out.extension() == ".acmb")
      save_dataset_binary(ds, out);
    else
      save_dataset(ds, out);
  }
  return ds;
}

std::string model_label(const TrainConfig& cfg) {
  if (cfg.aggregator == Aggregator::max_pool) return "max-pooling";
  if (cfg.aggregator == Aggregator::mean_pool) return "mean-pooling";
  return cfg.is_abmil() ? "ABMIL" : "ACMIL";
}

namespace {

std::uint64_t eval_seed(std::uint64_t run_seed) { return Rng(run_seed).child(4).seed(); }

EvalOptions test_options(const TrainConfig& cfg, bool stkim_at_eval) {
  EvalOptions o;
  o.stkim_at_eval = stkim_at_eval;
  o.stkim = cfg.stkim;
  o.seed = eval_seed(cfg.seed);
  o.topk_list = cfg.topk_list;
  o.loss = LossOptions{cfg.diversity_loss};
  return o;
}

std::vector<const Bag*> bags_for(const Dataset& data, Split split) {
  if (!data.has_splits()) {
    std::vector<const Bag*> all;
    for (const auto& b : data.bags) all.push_back(&b);
    return all;
  }
  return data.select(split);
}

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + xs[i];
  return out;
}

Json vector_json(const Vector& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

}  // namespace

Json evaluation_report(const Evaluation& ev, const std::string& label, const std::string& split) {
  Json doc;
  doc["model"] = label;
  doc["split"] = split;
  doc["mean_loss"] = std::isfinite(ev.mean_loss) ? Json(ev.mean_loss) : Json(nullptr);
  doc["degenerate_masks"] = ev.degenerate_masks;
  const Json metrics = report_to_json(ev.report);
  for (auto it = metrics.begin(); it != metrics.end(); ++it) doc[it.key()] = it.value();
  return doc;
}

TrainRun cmd_train(const Dataset& data, const RunConfig& cfg, const fs::path& out_dir) {
  if (!data.has_splits()) throw ConfigError("dataset: no split assignments (run gen-data with split ratios)");
  TrainRun run{train(data, cfg.train), {}};
  const TrainConfig& resolved = run.result.config;
  run.test = evaluate(run.result.model, data.select(Split::test), test_options(resolved, false));
  if (out_dir.empty()) return run;

  fs::create_directories(out_dir);
  RunConfig effective = cfg;
  effective.train = resolved;
  save_document(out_dir / "config.json", to_json(effective));
  save_checkpoint(out_dir / "checkpoint.json", {run.result.model, to_json(resolved), resolved.seed});
  if (cfg.exports.history) write_text_file(out_dir / "history.csv", history_to_csv(run.result.history));
  const std::string label = model_label(resolved);
  Json report = evaluation_report(run.test, label, "test");
  report["selected_epoch"] = run.result.history.selected_epoch;
  save_document(out_dir / "report.json", report);
  write_text_file(out_dir / "report.csv", "model," + join(report_csv_header(run.test.report)) + "\n" +
                                              label + "," + join(report_csv_row(run.test.report)) + "\n");
  if (cfg.exports.attention) {
    Json bags = Json::array();
    for (const auto& b : run.test.bags) {
      Json branches = Json::array();
      for (const auto& a : b.branch_attn) branches.push_back(vector_json(a));
      bags.push_back({{"id", b.id}, {"label", b.label}, {"probs", vector_json(b.probs)},
                      {"heatmap", vector_json(b.heatmap)}, {"branches", std::move(branches)}});
    }
    save_document(out_dir / "attention.json", Json{{"split", "test"}, {"bags", std::move(bags)}});
  }
  if (cfg.exports.embeddings) {
    std::string csv = "id,label";
    for (Index e = 0; e < resolved.dims.E; ++e) csv += ",z" + std::to_string(e);
    csv += "\n";
    for (const auto& b : run.test.bags) {
      csv += b.id + "," + std::to_string(b.label);
      for (Index e = 0; e < b.embedding.size(); ++e) csv += "," + format_double(b.embedding[e]);
      csv += "\n";
    }
    write_text_file(out_dir / "embeddings.csv", csv);
  }
  return run;
}

Evaluation cmd_eval(const Checkpoint& ckpt, const Dataset& data, bool stkim_at_eval, Split split) {
  validate_model(ckpt.model);
  if (ckpt.model.dims.D != data.feature_dim || ckpt.model.dims.C != data.num_classes)
    throw ConfigError("checkpoint dims (D=" + std::to_string(ckpt.model.dims.D) + ", C=" +
                      std::to_string(ckpt.model.dims.C) + ") disagree with the dataset");
  const TrainConfig cfg = ckpt.config.is_object() && !ckpt.config.empty()
                              ? train_config_from_json(ckpt.config)
                              : TrainConfig{};
  const auto bags = bags_for(data, split);
  return evaluate(ckpt.model, bags, test_options(cfg, stkim_at_eval));
}

std::string AblationCell::describe() const {
  std::ostringstream s;
  if (!preset.empty()) s << preset << " ";
  s << "M=" << M << " ";
  if (stkim.mode == StkimConfig::KMode::count)
    s << "K=" << stkim.count;
  else
    s << "f=" << format_double(stkim.fraction);
  s << " p=" << format_double(stkim.prob) << (diversity_loss ? "" : " no-L_d");
  return s.str();
}

StkimConfig stkim_preset(const std::string& name) {
  if (name == "stkim") return StkimConfig::with_count(10, 0.6);
  if (name == "weno") return StkimConfig::with_count(95, 1.0);
  if (name == "mhim") return StkimConfig::with_fraction(0.01, 0.5);
  throw ConfigError("grid.presets: unknown preset '" + name + "'");
}

AblationGrid expand_grid(const Json& g, const TrainConfig& base) {
  static const std::vector<std::string> known{"M", "K", "fraction", "p", "disable_L_d", "presets", "n_seeds"};
  for (auto it = g.begin(); it != g.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("grid." + it.key() + ": unknown field");
  AblationGrid grid;
  try {
    grid.n_seeds = g.value("n_seeds", 1);
    if (grid.n_seeds < 1) throw ConfigError("grid.n_seeds: must be >= 1");
    const auto ms = g.contains("M") ? g.at("M").get<std::vector<Index>>() : std::vector<Index>{base.dims.M};
    const auto no_ld = g.contains("disable_L_d") ? g.at("disable_L_d").get<std::vector<bool>>()
                                                 : std::vector<bool>{!base.diversity_loss};

    std::vector<std::pair<StkimConfig, std::string>> masks;
    if (g.contains("presets")) {
      for (const auto& name : g.at("presets").get<std::vector<std::string>>())
        masks.emplace_back(stkim_preset(name), name);
    } else {
      std::vector<StkimConfig> kspecs;
      if (g.contains("K"))
        for (Index k : g.at("K").get<std::vector<Index>>()) kspecs.push_back(StkimConfig::with_count(k, base.stkim.prob));
      if (g.contains("fraction"))
        for (double f : g.at("fraction").get<std::vector<double>>())
          kspecs.push_back(StkimConfig::with_fraction(f, base.stkim.prob));
      if (kspecs.empty()) kspecs.push_back(base.stkim);
      const auto ps = g.contains("p") ? g.at("p").get<std::vector<double>>() : std::vector<double>{base.stkim.prob};
      for (const auto& k : kspecs)
        for (double p : ps) {
          StkimConfig s = k;
          s.prob = p;
          masks.emplace_back(s, "");
        }
    }
    for (Index m : ms)
      for (const auto& [s, name] : masks)
        for (bool d : no_ld) {
          s.validate();
          if (m < 1) throw ConfigError("grid.M: values must be >= 1");
          grid.cells.push_back({m, s, !d, name});
        }
  } catch (const Json::exception&) {
    throw ConfigError("grid: malformed value lists");
  }
  return grid;
}

namespace {

struct Stat {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();
};

Stat stat(const std::vector<double>& xs) {
  Stat s;
  if (xs.empty()) return s;
  double sum = 0;
  for (double x : xs) sum += x;
  s.mean = sum / static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - s.mean) * (x - s.mean);
  s.std = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
  return s;
}

std::string num(double x) { return std::isfinite(x) ? format_double(x) : "nan"; }

std::string csv_escape(const std::string& s) {
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

AblationSummary cmd_ablate(const Dataset& data, const RunConfig& base, const AblationGrid& grid,
                           const fs::path& out_dir, int jobs) {
  if (!data.has_splits()) throw ConfigError("dataset: no split assignments");
  AblationSummary out;
  for (size_t c = 0; c < grid.cells.size(); ++c)
    for (int s = 0; s < grid.n_seeds; ++s)
      out.runs.push_back({c, s, derive_seed(base.train.seed, static_cast<std::uint64_t>(s)), false, {}, {}, 0});

  std::atomic<size_t> next{0};
  auto worker = [&] {
    for (size_t i = next++; i < out.runs.size(); i = next++) {
      auto& run = out.runs[i];
      const auto& cell = grid.cells[run.cell];
      RunConfig cfg = base;
      cfg.train.seed = run.seed;
      cfg.train.dims.M = cell.M;
      cfg.train.stkim = cell.stkim;
      cfg.train.diversity_loss = cell.diversity_loss;
      try {
        const TrainRun tr = cmd_train(data, cfg, {});
        run.report = tr.test.report;
        for (const auto& e : tr.result.history.epochs) run.degenerate_masks += e.degenerate_masks;
        run.ok = true;
      } catch (const std::exception& e) {
        run.error = e.what();
      }
    }
  };
  const int n_threads = std::max(1, std::min<int>(jobs, static_cast<int>(out.runs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream table;
  table << "cell,setting,M,k_mode,k,p,diversity_loss,n_ok,n_failed,degenerate_masks,macro_auc_mean,macro_auc_std,"
           "macro_f1_mean,macro_f1_std,entropy_mean,entropy_std,top10_mean,top10_std,"
           "localization_auc_mean,localization_auc_std,errors\n";
  std::ostringstream runs;
  runs << "cell,seed_index,seed,ok,degenerate_masks,macro_auc,macro_f1,entropy,top10,localization_auc,error\n";
  for (size_t c = 0; c < grid.cells.size(); ++c) {
    const auto& cell = grid.cells[c];
    std::vector<double> auc, f1, ent, top, loc;
    int failed = 0;
    long degenerate = 0;
    std::string errors;
    for (const auto& r : out.runs) {
      if (r.cell != c) continue;
      auto topk10 = [&] {
        for (size_t k = 0; k < r.report.topk_list.size(); ++k)
          if (r.report.topk_list[k] == 10) return r.report.mean_topk_cumulative[k];
        return std::numeric_limits<double>::quiet_NaN();
      };
      runs << c << ',' << r.seed_index << ',' << r.seed << ',' << (r.ok ? 1 : 0) << ',' << r.degenerate_masks << ',';
      degenerate += r.degenerate_masks;
      if (r.ok) {
        auc.push_back(r.report.macro_auc);
        f1.push_back(r.report.macro_f1);
        ent.push_back(r.report.mean_attention_entropy);
        top.push_back(topk10());
        if (r.report.instance_localization_auc) loc.push_back(*r.report.instance_localization_auc);
        runs << num(r.report.macro_auc) << ',' << num(r.report.macro_f1) << ','
             << num(r.report.mean_attention_entropy) << ',' << num(topk10()) << ','
             << (r.report.instance_localization_auc ? num(*r.report.instance_localization_auc) : "")
             << ",\n";
      } else {
        ++failed;
        if (!errors.empty()) errors += "; ";
        errors += r.error;
        runs << ",,,,," << csv_escape(r.error) << '\n';
      }
    }
    const Stat a = stat(auc), f = stat(f1), e = stat(ent), t = stat(top), l = stat(loc);
    table << c << ',' << csv_escape(cell.describe()) << ',' << cell.M << ','
          << (cell.stkim.mode == StkimConfig::KMode::count ? "count" : "fraction") << ','
          << (cell.stkim.mode == StkimConfig::KMode::count ? std::to_string(cell.stkim.count)
                                                           : num(cell.stkim.fraction))
          << ',' << num(cell.stkim.prob) << ',' << (cell.diversity_loss ? 1 : 0) << ','
          << auc.size() << ',' << failed << ',' << degenerate << ',' << num(a.mean) << ',' << num(a.std) << ','
          << num(f.mean) << ',' << num(f.std) << ',' << num(e.mean) << ',' << num(e.std) << ','
          << num(t.mean) << ',' << num(t.std) << ',' << num(l.mean) << ',' << num(l.std) << ','
          << csv_escape(errors) << '\n';
  }
  out.table_csv = table.str();
  out.runs_csv = runs.str();
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    save_document(out_dir / "config.json", to_json(base));
    write_text_file(out_dir / "summary.csv", out.table_csv);
    write_text_file(out_dir / "runs.csv", out.runs_csv);
  }
  return out;
}

std::vector<GradCheckResult> cmd_grad_check(const GradCheckOptions& opts) {
  if (opts.seeds < 1) throw ConfigError("grad-check: --seeds must be >= 1");
  if (opts.instances < 1) throw ConfigError("grad-check: N must be >= 1");
  std::vector<GradCheckResult> results;
  for (int s = 0; s < opts.seeds; ++s) {
    const std::uint64_t seed = opts.seed + static_cast<std::uint64_t>(s);
    for (double p : opts.probs) {
      Rng rng(seed);
      Model model = init_model(opts.dims, rng, opts.activation);
      // Non-zero biases move the relu and softmax operating points off their defaults.
      for (auto& t : tensors(model.params))
        if (t.cols == 1 && t.name.ends_with(".b"))
          for (double& x : t.data) x = 0.1 * rng.normal();
      Bag bag;
      bag.id = "grad-check";
      bag.instances = Matrix(opts.instances, opts.dims.D);
      for (Index i = 0; i < bag.instances.size(); ++i) bag.instances.data()[i] = rng.normal();
      bag.label = static_cast<int>(rng.below(static_cast<std::uint64_t>(opts.dims.C)));

      const StkimConfig stkim = StkimConfig::with_count(opts.top_k, p);
      const ForwardTrace trace = mba_forward(bag, model, stkim, rng, true);
      const auto masks = trace.masks();
      const Gradients grads = backward(trace, bag, model);

      std::vector<std::span<double>> params;
      std::vector<std::span<const double>> analytic;
      for (auto& t : tensors(model.params)) params.push_back(t.data);
      for (const auto& t : tensors(grads)) analytic.push_back(t.data);
      auto fn = [&] { return total_loss(mba_forward_frozen(bag, model, masks), bag.label).total; };

      GradCheckResult r;
      r.seed = seed;
      r.prob = p;
      r.max_rel_error = finite_diff_check(fn, params, analytic, opts.eps);
      for (const auto& m : masks) r.masked += m.zeroed.size();
      results.push_back(r);
    }
  }
  return results;
}

}  // namespace acmil
