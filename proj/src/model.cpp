#include "acmil/model.hpp"

#include <cmath>

namespace acmil {

void validate_bag(const Bag& bag, Index feature_dim, int num_classes) {
  if (bag.num_instances() < 1) throw ValidationError("bag '" + bag.id + "' has no instances");
  if (bag.feature_dim() != feature_dim)
    throw ValidationError("bag '" + bag.id + "' has " + std::to_string(bag.feature_dim()) +
                          " features, expected " + std::to_string(feature_dim));
  if (bag.label < 0 || bag.label >= num_classes)
    throw ValidationError("bag '" + bag.id + "' has label " + std::to_string(bag.label) +
                          " outside [0, " + std::to_string(num_classes) + ")");
  if (!bag.instances.allFinite())
    throw ValidationError("bag '" + bag.id + "' contains non-finite features");
  if (bag.instance_labels && static_cast<Index>(bag.instance_labels->size()) != bag.num_instances())
    throw ValidationError("bag '" + bag.id + "' instance_labels length mismatch");
}

std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

std::string to_string(Aggregator a) {
  switch (a) {
    case Aggregator::attention: return "attention";
    case Aggregator::max_pool: return "max";
    case Aggregator::mean_pool: return "mean";
  }
  return "attention";
}

Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw ConfigError("activation: unknown value '" + s + "'");
}

Aggregator aggregator_from_string(const std::string& s) {
  if (s == "attention") return Aggregator::attention;
  if (s == "max") return Aggregator::max_pool;
  if (s == "mean") return Aggregator::mean_pool;
  throw ConfigError("aggregator: unknown value '" + s + "'");
}

namespace {

template <typename P, typename T>
std::vector<TensorView<T>> collect(P& p) {
  std::vector<TensorView<T>> out;
  auto add = [&](std::string name, auto& m) {
    out.push_back({std::move(name), std::span<T>(m.data(), static_cast<size_t>(m.size())), m.rows(),
                   m.cols()});
  };
  add("embed.W", p.embed_W);
  add("embed.b", p.embed_b);
  for (size_t i = 0; i < p.branches.size(); ++i) {
    const std::string pre = "branch" + std::to_string(i) + ".";
    add(pre + "V1", p.branches[i].V1);
    add(pre + "V2", p.branches[i].V2);
    add(pre + "w", p.branches[i].w);
  }
  for (size_t i = 0; i < p.branch_heads.size(); ++i) {
    const std::string pre = "branch_head" + std::to_string(i) + ".";
    add(pre + "W", p.branch_heads[i].W);
    add(pre + "b", p.branch_heads[i].b);
  }
  add("bag_head.W", p.bag_head.W);
  add("bag_head.b", p.bag_head.b);
  return out;
}

void glorot(Matrix& m, Rng& rng) {
  const double s = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-s, s);
}

void glorot(Vector& v, Rng& rng) {
  // A column vector used as an L x 1 weight.
  const double s = std::sqrt(6.0 / static_cast<double>(v.size() + 1));
  for (Index i = 0; i < v.size(); ++i) v[i] = rng.uniform(-s, s);
}

}  // namespace

std::vector<TensorView<double>> tensors(Parameters& p) { return collect<Parameters, double>(p); }

std::vector<TensorView<const double>> tensors(const Parameters& p) {
  return collect<const Parameters, const double>(p);
}

Parameters zero_parameters(const Dims& d) {
  Parameters p;
  p.embed_W = Matrix::Zero(d.E, d.D);
  p.embed_b = Vector::Zero(d.E);
  for (Index i = 0; i < d.M; ++i) {
    p.branches.push_back({Matrix::Zero(d.L, d.E), Matrix::Zero(d.L, d.E), Vector::Zero(d.L)});
    p.branch_heads.push_back({Matrix::Zero(d.C, d.E), Vector::Zero(d.C)});
  }
  p.bag_head = {Matrix::Zero(d.C, d.E), Vector::Zero(d.C)};
  return p;
}

Parameters zeros_like(const Parameters& p) {
  Parameters z = p;
  for (auto& t : tensors(z)) std::fill(t.data.begin(), t.data.end(), 0.0);
  return z;
}

Model init_model(const Dims& dims, Rng& rng, Activation activation, Aggregator aggregator) {
  if (dims.D < 1 || dims.E < 1 || dims.L < 1 || dims.M < 1 || dims.C < 2)
    throw ConfigError("dims: D, E, L, M must be >= 1 and C >= 2");
  Model m{dims, activation, aggregator, zero_parameters(dims)};
  auto& p = m.params;
  glorot(p.embed_W, rng);
  for (auto& br : p.branches) {
    glorot(br.V1, rng);
    glorot(br.V2, rng);
    glorot(br.w, rng);
  }
  for (auto& h : p.branch_heads) glorot(h.W, rng);
  glorot(p.bag_head.W, rng);
  return m;
}

void validate_model(const Model& model) {
  const Dims& d = model.dims;
  if (d.M < 1) throw ConfigError("model: M must be >= 1");
  const Parameters expected = zero_parameters(d);
  const auto want = tensors(expected);
  const auto have = tensors(model.params);
  if (want.size() != have.size()) throw ConfigError("model: branch count disagrees with M");
  for (size_t i = 0; i < want.size(); ++i) {
    if (want[i].rows != have[i].rows || want[i].cols != have[i].cols)
      throw ConfigError("model: tensor " + want[i].name + " has shape " +
                        std::to_string(have[i].rows) + "x" + std::to_string(have[i].cols) +
                        ", expected " + std::to_string(want[i].rows) + "x" +
                        std::to_string(want[i].cols));
  }
}

Json model_to_json(const Model& model) {
  Json doc;
  doc["dims"] = {{"D", model.dims.D}, {"E", model.dims.E}, {"L", model.dims.L},
                 {"M", model.dims.M}, {"C", model.dims.C}};
  doc["activation"] = to_string(model.activation);
  doc["aggregator"] = to_string(model.aggregator);
  Json params = Json::object();
  for (const auto& t : tensors(model.params)) {
    Json data = Json::array();
    for (double x : t.data) data.push_back(x);
    params[t.name] = {{"rows", t.rows}, {"cols", t.cols}, {"data", std::move(data)}};
  }
  doc["params"] = std::move(params);
  return doc;
}

Model model_from_json(const Json& doc) {
  try {
    Model m;
    const auto& d = doc.at("dims");
    m.dims = {d.at("D").get<Index>(), d.at("E").get<Index>(), d.at("L").get<Index>(),
              d.at("M").get<Index>(), d.at("C").get<Index>()};
    if (m.dims.M < 1) throw ConfigError("checkpoint: M must be >= 1");
    m.activation = activation_from_string(doc.at("activation").get<std::string>());
    m.aggregator = aggregator_from_string(doc.value("aggregator", std::string("attention")));
    m.params = zero_parameters(m.dims);
    const auto& params = doc.at("params");
    for (auto& t : tensors(m.params)) {
      const auto& entry = params.at(t.name);
      if (entry.at("rows").get<Index>() != t.rows || entry.at("cols").get<Index>() != t.cols)
        throw ConfigError("checkpoint: tensor " + t.name + " shape disagrees with dims");
      const auto& data = entry.at("data");
      if (data.size() != t.data.size())
        throw ConfigError("checkpoint: tensor " + t.name + " has wrong element count");
      for (size_t i = 0; i < t.data.size(); ++i) {
        const double x = data[i].get<double>();
        if (!std::isfinite(x)) throw ValidationError("checkpoint: non-finite value in " + t.name);
        t.data[i] = x;
      }
    }
    return m;
  } catch (const Json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  Json doc;
  doc["format"] = "acmil-checkpoint";
  doc["format_version"] = 1;
  doc["seed"] = ckpt.seed;
  doc["config"] = ckpt.config;
  doc["model"] = model_to_json(ckpt.model);
  save_document(path, doc);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const Json doc = load_document(path);
  if (doc.value("format", std::string()) != "acmil-checkpoint")
    throw ParseError(path.string() + ": not a checkpoint document");
  Checkpoint c;
  c.model = model_from_json(doc.at("model"));
  c.config = doc.value("config", Json::object());
  c.seed = doc.value("seed", std::uint64_t{0});
  return c;
}

}  // namespace acmil
