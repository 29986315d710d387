#include "acmil/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "acmil/rng.hpp"

namespace acmil {

void SyntheticConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError("synthetic." + field + ": " + why);
  };
  if (num_classes < 2) fail("num_classes", "must be >= 2");
  if (feature_dim < 1) fail("feature_dim", "must be >= 1");
  if (patterns_per_class < 1) fail("patterns_per_class", "must be >= 1");
  if (background_patterns < 1) fail("background_patterns", "must be >= 1");
  if (!(cluster_std > 0)) fail("cluster_std", "must be positive");
  if (!(cluster_separation >= 0)) fail("cluster_separation", "must be >= 0");
  if (bags_per_class < 0) fail("bags_per_class", "must be >= 0");
  if (instances_per_bag.first < 1 || instances_per_bag.second < instances_per_bag.first)
    fail("instances_per_bag", "need 1 <= min <= max");
  if (!(positive_fraction.first > 0 && positive_fraction.first <= positive_fraction.second &&
        positive_fraction.second < 1))
    fail("positive_fraction", "need 0 < min <= max < 1");
  const auto [k_lo, k_hi] = pattern_count_range();
  if (k_lo < 1 || k_hi < k_lo || k_hi > patterns_per_class)
    fail("patterns_per_bag", "need 1 <= min <= max <= patterns_per_class");
}

Json to_json(const SyntheticConfig& c) {
  Json j;
  j["num_classes"] = c.num_classes;
  j["feature_dim"] = c.feature_dim;
  j["patterns_per_class"] = c.patterns_per_class;
  j["background_patterns"] = c.background_patterns;
  j["cluster_std"] = c.cluster_std;
  j["cluster_separation"] = c.cluster_separation;
  j["bags_per_class"] = c.bags_per_class;
  j["instances_per_bag"] = {c.instances_per_bag.first, c.instances_per_bag.second};
  j["positive_fraction"] = {c.positive_fraction.first, c.positive_fraction.second};
  j["patterns_per_bag"] = c.patterns_per_bag
                             ? Json{c.patterns_per_bag->first, c.patterns_per_bag->second}
                             : Json(nullptr);
  j["vary_background_mix"] = c.vary_background_mix;
  j["seed"] = c.seed;
  return j;
}

SyntheticConfig synthetic_config_from_json(const Json& j) {
  SyntheticConfig c;
  auto field = [&](const char* name, auto& target) {
    if (!j.contains(name)) return;
    try {
      j.at(name).get_to(target);
    } catch (const Json::exception&) {
      throw ConfigError(std::string("synthetic.") + name + ": wrong type");
    }
  };
  field("num_classes", c.num_classes);
  field("feature_dim", c.feature_dim);
  field("patterns_per_class", c.patterns_per_class);
  field("background_patterns", c.background_patterns);
  field("cluster_std", c.cluster_std);
  field("cluster_separation", c.cluster_separation);
  field("bags_per_class", c.bags_per_class);
  field("instances_per_bag", c.instances_per_bag);
  field("positive_fraction", c.positive_fraction);
  if (j.contains("patterns_per_bag") && !j.at("patterns_per_bag").is_null()) {
    c.patterns_per_bag.emplace();
    field("patterns_per_bag", *c.patterns_per_bag);
  }
  field("vary_background_mix", c.vary_background_mix);
  field("seed", c.seed);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!to_json(c).contains(it.key())) throw ConfigError("synthetic." + it.key() + ": unknown field");
  c.validate();
  return c;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unassigned: break;
  }
  return "unassigned";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw ParseError("unknown split '" + s + "'");
}

bool Dataset::has_splits() const {
  return !splits.empty() &&
         std::any_of(splits.begin(), splits.end(), [](Split s) { return s != Split::unassigned; });
}

std::vector<const Bag*> Dataset::select(Split s) const {
  std::vector<const Bag*> out;
  for (size_t i = 0; i < bags.size(); ++i)
    if (i < splits.size() && splits[i] == s) out.push_back(&bags[i]);
  return out;
}

void validate_dataset(const Dataset& ds) {
  if (ds.feature_dim < 1) throw ValidationError("dataset: feature_dim must be >= 1");
  if (ds.num_classes < 2) throw ValidationError("dataset: num_classes must be >= 2");
  if (!ds.splits.empty() && ds.splits.size() != ds.bags.size())
    throw ValidationError("dataset: split list length disagrees with bag count");
  for (const auto& bag : ds.bags) validate_bag(bag, ds.feature_dim, ds.num_classes);
}

Matrix synthetic_cluster_means(const SyntheticConfig& cfg) {
  cfg.validate();
  const Index count = cfg.background_patterns +
                      static_cast<Index>(cfg.num_classes - 1) * cfg.patterns_per_class;
  // Spread chosen so typical pairwise distances are 1.5x the required separation.
  const double spread =
      1.5 * cfg.cluster_separation / std::sqrt(2.0 * static_cast<double>(cfg.feature_dim));
  Rng rng = Rng(cfg.seed).child(0);
  Matrix means(count, cfg.feature_dim);
  constexpr int kMaxTries = 10000;
  for (Index r = 0; r < count; ++r) {
    int tries = 0;
    for (;; ++tries) {
      if (tries == kMaxTries)
        throw GenerationError("cannot place " + std::to_string(count) +
                              " cluster means with separation " +
                              format_double(cfg.cluster_separation));
      for (Index c = 0; c < cfg.feature_dim; ++c) means(r, c) = rng.normal(0.0, spread);
      bool ok = true;
      for (Index q = 0; q < r && ok; ++q)
        ok = (means.row(r) - means.row(q)).norm() >= cfg.cluster_separation;
      if (ok) break;
    }
  }
  return means;
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  const Matrix means = synthetic_cluster_means(cfg);
  Dataset ds;
  ds.feature_dim = cfg.feature_dim;
  ds.num_classes = cfg.num_classes;
  ds.provenance = {{"kind", "synthetic"}, {"config", to_json(cfg)}};

  const Index bg = cfg.background_patterns;
  const int P = cfg.patterns_per_class;
  Rng rng = Rng(cfg.seed).child(1);
  auto draw_int = [&](Index lo, Index hi) {
    return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1)));
  };

  for (int c = 0; c < cfg.num_classes; ++c) {
    for (int b = 0; b < cfg.bags_per_class; ++b) {
      Bag bag;
      bag.id = "c" + std::to_string(c) + "_" + std::to_string(b);
      bag.label = c;
      const Index n = draw_int(cfg.instances_per_bag.first, cfg.instances_per_bag.second);
      std::vector<int> labels(static_cast<size_t>(n), 0);
      std::vector<Index> cluster(static_cast<size_t>(n), 0);

      Index n_pos = 0;
      std::vector<int> chosen;
      if (c > 0) {
        const double w = rng.uniform(cfg.positive_fraction.first, cfg.positive_fraction.second);
        n_pos = std::clamp<Index>(static_cast<Index>(std::llround(w * static_cast<double>(n))), 1, n);
        const auto [k_lo, k_hi] = cfg.pattern_count_range();
        const int k = static_cast<int>(draw_int(k_lo, k_hi));
        std::vector<int> all(static_cast<size_t>(P));
        std::iota(all.begin(), all.end(), 0);
        for (int i = 0; i < k; ++i) {
          const auto j = static_cast<size_t>(i) + rng.below(static_cast<std::uint64_t>(P - i));
          std::swap(all[static_cast<size_t>(i)], all[j]);
        }
        chosen.assign(all.begin(), all.begin() + k);
        std::sort(chosen.begin(), chosen.end());
      }
      // Cumulative background proportions; Dirichlet(1) via normalized exponentials.
      std::vector<double> mix(static_cast<size_t>(bg), 1.0);
      if (cfg.vary_background_mix)
        for (auto& m : mix) m = -std::log1p(-rng.uniform());
      std::partial_sum(mix.begin(), mix.end(), mix.begin());
      for (auto& m : mix) m /= mix.back();
      for (Index i = 0; i < n; ++i) {
        if (i < n_pos) {
          // Every chosen pattern appears at least once, the rest are random.
          const int pat = i < static_cast<Index>(chosen.size())
                              ? chosen[static_cast<size_t>(i)]
                              : chosen[rng.below(chosen.size())];
          cluster[static_cast<size_t>(i)] = bg + static_cast<Index>(c - 1) * P + pat;
          labels[static_cast<size_t>(i)] = (c - 1) * P + pat + 1;
        } else {
          const double u = rng.uniform();
          const auto k = std::upper_bound(mix.begin(), mix.end() - 1, u) - mix.begin();
          cluster[static_cast<size_t>(i)] = static_cast<Index>(k);
        }
      }
      // Shuffle instance order.
      for (Index i = n - 1; i > 0; --i) {
        const auto j = static_cast<size_t>(rng.below(static_cast<std::uint64_t>(i + 1)));
        std::swap(cluster[static_cast<size_t>(i)], cluster[j]);
        std::swap(labels[static_cast<size_t>(i)], labels[j]);
      }
      bag.instances.resize(n, cfg.feature_dim);
      for (Index i = 0; i < n; ++i)
        for (Index d = 0; d < cfg.feature_dim; ++d)
          bag.instances(i, d) = means(cluster[static_cast<size_t>(i)], d) + rng.normal(0.0, cfg.cluster_std);
      bag.instance_labels = std::move(labels);
      ds.bags.push_back(std::move(bag));
    }
  }
  return ds;
}

Json dataset_to_json(const Dataset& ds) {
  validate_dataset(ds);
  Json doc;
  doc["format"] = "acmil-dataset";
  doc["format_version"] = 1;
  doc["feature_dim"] = ds.feature_dim;
  doc["num_classes"] = ds.num_classes;
  doc["provenance"] = ds.provenance;
  if (!ds.split_info.empty()) doc["split_info"] = ds.split_info;
  Json bags = Json::array();
  for (size_t i = 0; i < ds.bags.size(); ++i) {
    const auto& bag = ds.bags[i];
    Json b;
    b["id"] = bag.id;
    b["label"] = bag.label;
    if (!ds.splits.empty() && ds.splits[i] != Split::unassigned) b["split"] = to_string(ds.splits[i]);
    if (bag.instance_labels) b["instance_labels"] = *bag.instance_labels;
    Json rows = Json::array();
    for (Index r = 0; r < bag.instances.rows(); ++r) {
      Json row = Json::array();
      for (Index c = 0; c < bag.instances.cols(); ++c) row.push_back(bag.instances(r, c));
      rows.push_back(std::move(row));
    }
    b["instances"] = std::move(rows);
    bags.push_back(std::move(b));
  }
  doc["bags"] = std::move(bags);
  return doc;
}

Dataset dataset_from_json(const Json& doc, const std::string& source) {
  Dataset ds;
  std::string where = source;
  try {
    if (doc.value("format", std::string()) != "acmil-dataset")
      throw ParseError(source + ": not a dataset document");
    ds.feature_dim = doc.at("feature_dim").get<Index>();
    ds.num_classes = doc.at("num_classes").get<int>();
    ds.provenance = doc.value("provenance", Json::object());
    ds.split_info = doc.value("split_info", Json::object());
    bool any_split = false;
    for (const auto& b : doc.at("bags")) {
      Bag bag;
      bag.id = b.at("id").get<std::string>();
      where = source + ": bag '" + bag.id + "'";
      bag.label = b.at("label").get<int>();
      const auto& rows = b.at("instances");
      bag.instances.resize(static_cast<Index>(rows.size()), ds.feature_dim);
      for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != static_cast<size_t>(ds.feature_dim))
          throw ValidationError(source + ": bag '" + bag.id + "' row " + std::to_string(r) +
                                " has " + std::to_string(rows[r].size()) +
                                " values, expected feature_dim " + std::to_string(ds.feature_dim));
        for (size_t c = 0; c < rows[r].size(); ++c)
          bag.instances(static_cast<Index>(r), static_cast<Index>(c)) = rows[r][c].get<double>();
      }
      if (b.contains("instance_labels")) bag.instance_labels = b.at("instance_labels").get<std::vector<int>>();
      Split s = Split::unassigned;
      if (b.contains("split")) {
        s = split_from_string(b.at("split").get<std::string>());
        any_split = true;
      }
      ds.splits.push_back(s);
      ds.bags.push_back(std::move(bag));
    }
    if (!any_split) ds.splits.clear();
  } catch (const Json::exception& e) {
    throw ParseError(where + ": " + e.what());
  }
  try {
    validate_dataset(ds);
  } catch (const ValidationError& e) {
    throw ValidationError(source + ": " + e.what());
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  save_document(path, dataset_to_json(ds));
}

Dataset load_dataset(const std::filesystem::path& path) {
  return dataset_from_json(load_document(path), path.string());
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  std::string source;

  void need(size_t n) {
    if (pos + n > buf.size())
      throw ParseError(source + ": truncated binary container at offset " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<size_t>(i)])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
};

}  // namespace

void save_dataset_binary(const Dataset& ds, const std::filesystem::path& path) {
  validate_dataset(ds);
  std::string out = "ACMB";
  put_u32(out, 1);
  for (const auto& bag : ds.bags) {
    put_u32(out, static_cast<std::uint32_t>(bag.id.size()));
    out += bag.id;
    put_u32(out, static_cast<std::uint32_t>(bag.label));
    put_u32(out, static_cast<std::uint32_t>(bag.instances.rows()));
    put_u32(out, static_cast<std::uint32_t>(bag.instances.cols()));
    for (Index i = 0; i < bag.instances.size(); ++i)
      put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(bag.instances.data()[i])));
    out.push_back(bag.instance_labels ? 1 : 0);
    if (bag.instance_labels)
      for (int l : *bag.instance_labels) out.push_back(static_cast<char>(static_cast<std::uint8_t>(l)));
  }
  write_text_file(path, out);
}

Dataset load_dataset_binary(const std::filesystem::path& path) {
  const std::string buf = read_text_file(path);
  Reader in{buf, 0, path.string()};
  in.need(4);
  if (buf.compare(0, 4, "ACMB") != 0) throw ParseError(path.string() + ": bad magic, expected ACMB");
  in.pos = 4;
  const std::uint32_t version = in.u32();
  if (version != 1) throw ParseError(path.string() + ": unsupported format_version " + std::to_string(version));
  Dataset ds;
  ds.provenance = {{"kind", "external"}, {"path", path.string()}};
  int max_label = 1;
  while (in.pos < buf.size()) {
    Bag bag;
    const std::uint32_t id_len = in.u32();
    in.need(id_len);
    bag.id = buf.substr(in.pos, id_len);
    in.pos += id_len;
    bag.label = static_cast<int>(in.u32());
    const Index n = in.u32();
    const Index d = in.u32();
    if (ds.bags.empty()) ds.feature_dim = d;
    bag.instances.resize(n, d);
    for (Index i = 0; i < n * d; ++i) bag.instances.data()[i] = std::bit_cast<float>(in.u32());
    if (in.u8()) {
      std::vector<int> labels(static_cast<size_t>(n));
      for (auto& l : labels) l = in.u8();
      bag.instance_labels = std::move(labels);
    }
    max_label = std::max(max_label, bag.label);
    ds.bags.push_back(std::move(bag));
  }
  ds.num_classes = max_label + 1;
  if (ds.feature_dim == 0) ds.feature_dim = 1;
  validate_dataset(ds);
  return ds;
}

Dataset load_any_dataset(const std::filesystem::path& path) {
  return path.extension() == ".acmb" ? load_dataset_binary(path) : load_dataset(path);
}

void validate_ratios(const std::array<double, 3>& r) {
  for (double x : r)
    if (!(x >= 0.0) || !std::isfinite(x)) throw ConfigError("split.ratios: entries must be finite and >= 0");
  if (!(r[0] > 0.0)) throw ConfigError("split.ratios: training ratio must be positive");
  if (std::abs(r[0] + r[1] + r[2] - 1.0) > 1e-9) throw ConfigError("split.ratios: must sum to 1");
}

Dataset split_dataset(Dataset ds, const std::array<double, 3>& ratios, std::uint64_t seed) {
  validate_ratios(ratios);
  ds.splits.assign(ds.bags.size(), Split::unassigned);
  const int nonempty = static_cast<int>(std::count_if(ratios.begin(), ratios.end(), [](double x) { return x > 0; }));
  Rng root(seed);
  Json warnings = Json::array();

  auto assign = [&](std::vector<size_t> idx, Rng rng) {
    for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
    const auto n = static_cast<double>(idx.size());
    const auto n_val = static_cast<size_t>(std::floor(ratios[1] * n + 1e-9));
    const auto n_test = static_cast<size_t>(std::floor(ratios[2] * n + 1e-9));
    for (size_t k = 0; k < idx.size(); ++k) {
      Split s = Split::train;
      if (k < n_val) s = Split::val;
      else if (k < n_val + n_test) s = Split::test;
      ds.splits[idx[k]] = s;
    }
  };

  std::vector<size_t> pooled;
  for (int c = 0; c < ds.num_classes; ++c) {
    std::vector<size_t> idx;
    for (size_t i = 0; i < ds.bags.size(); ++i)
      if (ds.bags[i].label == c) idx.push_back(i);
    if (idx.empty()) continue;
    if (static_cast<int>(idx.size()) < nonempty) {
      warnings.push_back("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                         " bags, fewer than the number of splits; assigned unstratified");
      pooled.insert(pooled.end(), idx.begin(), idx.end());
      continue;
    }
    assign(std::move(idx), root.child(static_cast<std::uint64_t>(c)));
  }
  if (!pooled.empty()) assign(std::move(pooled), root.child(0xffffffffULL));

  Json empty = Json::array();
  for (Split s : {Split::train, Split::val, Split::test})
    if (ds.select(s).empty()) empty.push_back(to_string(s));
  ds.split_info = {{"ratios", ratios}, {"seed", seed}, {"empty_splits", empty}, {"warnings", warnings}};
  return ds;
}

}  // namespace acmil
