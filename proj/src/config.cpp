#include "acmil/config.hpp"

namespace acmil {

Json to_json(const RunConfig& c) {
  Json j;
  j["train"] = to_json(c.train);
  j["synthetic"] = to_json(c.synthetic);
  j["split"] = {{"ratios", c.split_ratios}, {"seed", c.split_seed}};
  j["data"] = c.data_path;
  j["out"] = c.out_dir;
  j["export"] = {{"attention", c.exports.attention},
                 {"embeddings", c.exports.embeddings},
                 {"history", c.exports.history}};
  return j;
}

RunConfig run_config_from_json(const Json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  RunConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& key = it.key();
    if (key != "train" && key != "synthetic" && key != "split" && key != "data" && key != "out" &&
        key != "export")
      throw ConfigError(key + ": unknown field");
  }
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("synthetic")) c.synthetic = synthetic_config_from_json(j.at("synthetic"));
  if (j.contains("split")) {
    const auto& s = j.at("split");
    try {
      if (s.contains("ratios")) {
        const auto r = s.at("ratios").get<std::vector<double>>();
        if (r.size() != 3) throw ConfigError("split.ratios: need three values (train, val, test)");
        c.split_ratios = {r[0], r[1], r[2]};
      }
      c.split_seed = s.value("seed", c.split_seed);
    } catch (const Json::exception&) {
      throw ConfigError("split.ratios: wrong type");
    }
    validate_ratios(c.split_ratios);
  }
  try {
    c.data_path = j.value("data", std::string());
    c.out_dir = j.value("out", std::string());
    if (j.contains("export")) {
      const auto& e = j.at("export");
      c.exports.attention = e.value("attention", c.exports.attention);
      c.exports.embeddings = e.value("embeddings", c.exports.embeddings);
      c.exports.history = e.value("history", c.exports.history);
    }
  } catch (const Json::exception&) {
    throw ConfigError("export: wrong type");
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  if (path.empty()) return {};
  return run_config_from_json(load_document(path));
}

}  // namespace acmil
