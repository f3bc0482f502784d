#include "metaite/cli/config.hpp"

#include "metaite/io.hpp"
#include "metaite/numkit/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>

extern char** environ;

namespace metaite::cli {

using nlohmann::json;

namespace {

json defaults_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["jobs"] = c.jobs;
  j["dataset"] = {{"kind", to_string(c.dataset.kind)},
                  {"n", c.dataset.n},
                  {"k", c.dataset.k},
                  {"topics", c.dataset.topics},
                  {"scale", c.dataset.scale},
                  {"kappa", c.dataset.kappa},
                  {"noise_sd", c.dataset.noise_sd},
                  {"bias_weight", c.dataset.bias_weight},
                  {"path", c.dataset.path},
                  {"train_fraction", c.dataset.train_fraction}};
  j["imbalance"] = {{"keep_fraction", c.imbalance.keep_fraction}, {"keep_count", c.imbalance.keep_count}};
  j["method"] = {{"name", c.method.name},
                 {"knn_k", c.method.baseline.knn_k},
                 {"ridge_jitter", c.method.baseline.ridge_jitter},
                 {"target", c.method.target}};
  const MetaConfig& m = c.meta;
  j["meta"] = {{"alpha", m.alpha},
               {"beta", m.beta},
               {"mu", m.mu},
               {"epsilon", m.epsilon},
               {"gamma", m.gamma},
               {"inner_steps", m.inner_steps},
               {"per_task_k", m.per_task_k},
               {"meta_batch", m.meta_batch},
               {"max_iters", m.max_iters},
               {"first_order", m.first_order},
               {"weight_decay", m.weight_decay},
               {"extractor", m.extractor},
               {"head", m.head},
               {"activation", to_string(m.activation)},
               {"ensemble_draws", m.ensemble_draws}};
  j["paths"] = {{"train", c.paths.train},
                {"test", c.paths.test},
                {"checkpoint", c.paths.checkpoint},
                {"predictions", c.paths.predictions}};
  j["sweep"] = {{"mode", c.sweep.mode},
                {"methods", c.sweep.methods},
                {"fractions", c.sweep.fractions},
                {"grid", c.sweep.grid},
                {"repeats", c.sweep.repeats}};
  return j;
}

void merge(json& base, const json& update, const std::string& prefix, std::set<std::string>& explicit_keys) {
  if (!update.is_object()) throw ConfigError("config: " + (prefix.empty() ? std::string("document") : prefix) +
                                             " must be an object");
  for (auto it = update.begin(); it != update.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    json& slot = base[it.key()];
    if (slot.is_object()) {
      merge(slot, it.value(), key, explicit_keys);
    } else {
      slot = it.value();
      explicit_keys.insert(key);
    }
  }
}

template <typename T>
T get(const json& j, const std::string& section, const std::string& key) {
  const json& v = section.empty() ? j.at(key) : j.at(section).at(key);
  const std::string name = section.empty() ? key : section + "." + key;
  try {
    if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned()) throw ConfigError("");
      }
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + name + "' has the wrong type (got " + v.dump() + ")");
  }
}

template <typename T>
std::vector<T> get_list(const json& j, const std::string& section, const std::string& key) {
  const json& v = j.at(section).at(key);
  const std::string name = section + "." + key;
  if (!v.is_array()) throw ConfigError("config key '" + name + "' must be a list");
  std::vector<T> out;
  for (const auto& e : v) {
    bool ok = false;
    if constexpr (std::is_floating_point_v<T>) {
      ok = e.is_number();
    } else if constexpr (std::is_integral_v<T>) {
      ok = e.is_number_integer();
    } else {
      ok = e.is_string();
    }
    if (!ok) throw ConfigError("config key '" + name + "' has an element of the wrong type (" + e.dump() + ")");
    out.push_back(e.get<T>());
  }
  return out;
}

RunConfig config_from_json(const json& j, const std::set<std::string>& explicit_keys) {
  RunConfig c;
  c.seed = get<std::uint64_t>(j, "", "seed");
  c.out_dir = get<std::string>(j, "", "out_dir");
  c.jobs = get<int>(j, "", "jobs");

  try {
    c.dataset.kind = dataset_kind_from_string(get<std::string>(j, "dataset", "kind"));
    c.method.baseline.knn_k = get<int>(j, "method", "knn_k");
    c.meta.activation = activation_from_string(get<std::string>(j, "meta", "activation"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.dataset.n = get<Index>(j, "dataset", "n");
  c.dataset.k = get<int>(j, "dataset", "k");
  c.dataset.topics = get<Index>(j, "dataset", "topics");
  c.dataset.scale = get<double>(j, "dataset", "scale");
  c.dataset.kappa = get<double>(j, "dataset", "kappa");
  c.dataset.noise_sd = get<double>(j, "dataset", "noise_sd");
  c.dataset.bias_weight = get<double>(j, "dataset", "bias_weight");
  c.dataset.path = get<std::string>(j, "dataset", "path");
  c.dataset.train_fraction = get<double>(j, "dataset", "train_fraction");

  c.imbalance.keep_fraction = get_list<double>(j, "imbalance", "keep_fraction");
  c.imbalance.keep_count = get_list<Index>(j, "imbalance", "keep_count");

  c.method.name = get<std::string>(j, "method", "name");
  c.method.baseline.ridge_jitter = get<double>(j, "method", "ridge_jitter");
  c.method.target = get<int>(j, "method", "target");

  MetaConfig& m = c.meta;
  m.alpha = get<double>(j, "meta", "alpha");
  m.beta = get<double>(j, "meta", "beta");
  const auto weights = default_loss_weights(c.dataset);
  m.mu = explicit_keys.count("meta.mu") ? get<double>(j, "meta", "mu") : weights[0];
  m.epsilon = explicit_keys.count("meta.epsilon") ? get<double>(j, "meta", "epsilon") : weights[1];
  m.gamma = explicit_keys.count("meta.gamma") ? get<double>(j, "meta", "gamma") : weights[2];
  m.inner_steps = get<int>(j, "meta", "inner_steps");
  m.per_task_k = get<int>(j, "meta", "per_task_k");
  m.meta_batch = get<int>(j, "meta", "meta_batch");
  m.max_iters = get<long>(j, "meta", "max_iters");
  m.first_order = get<bool>(j, "meta", "first_order");
  m.weight_decay = get<double>(j, "meta", "weight_decay");
  m.extractor = get_list<Index>(j, "meta", "extractor");
  m.head = get_list<Index>(j, "meta", "head");
  m.ensemble_draws = get<int>(j, "meta", "ensemble_draws");
  m.seed = c.seed;

  c.paths.train = get<std::string>(j, "paths", "train");
  c.paths.test = get<std::string>(j, "paths", "test");
  c.paths.checkpoint = get<std::string>(j, "paths", "checkpoint");
  c.paths.predictions = get<std::string>(j, "paths", "predictions");

  c.sweep.mode = get<std::string>(j, "sweep", "mode");
  c.sweep.methods = get_list<std::string>(j, "sweep", "methods");
  c.sweep.fractions = get_list<double>(j, "sweep", "fractions");
  c.sweep.grid = get_list<double>(j, "sweep", "grid");
  c.sweep.repeats = get<int>(j, "sweep", "repeats");
  return c;
}

void validate_method_name(const std::string& name, const std::string& key) {
  if (name == "metaite") return;
  try {
    baseline_kind_from_string(name);
  } catch (const std::invalid_argument&) {
    throw ConfigError("config key '" + key + "': unknown method '" + name + "'");
  }
}

void validate(const RunConfig& c) {
  if (c.jobs < 1) throw ConfigError("config key 'jobs' must be >= 1");
  if (c.out_dir.empty()) throw ConfigError("config key 'out_dir' must not be empty");
  const DatasetSpec& d = c.dataset;
  if (d.n < 0) throw ConfigError("config key 'dataset.n' must be >= 0");
  if (d.kind == DatasetKind::news) {
    if (d.k < 2) throw ConfigError("config key 'dataset.k' must be >= 2");
    if (d.topics < d.k) throw ConfigError("config key 'dataset.topics' must be >= dataset.k");
  }
  if (d.kind == DatasetKind::csv && d.path.empty()) throw ConfigError("config key 'dataset.path' is required for csv");
  if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0))
    throw ConfigError("config key 'dataset.train_fraction' must lie in (0,1)");
  if (d.noise_sd < 0.0) throw ConfigError("config key 'dataset.noise_sd' must be >= 0");
  for (double f : c.imbalance.keep_fraction)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("config key 'imbalance.keep_fraction' entries must lie in (0,1]");
  for (Index n : c.imbalance.keep_count)
    if (n == 0) throw ConfigError("config key 'imbalance.keep_count' entries must be non-zero (negative keeps all)");
  validate_method_name(c.method.name, "method.name");
  if (c.method.baseline.knn_k < 1) throw ConfigError("config key 'method.knn_k' must be >= 1");
  if (!(c.method.baseline.ridge_jitter >= 0.0)) throw ConfigError("config key 'method.ridge_jitter' must be >= 0");
  try {
    c.meta.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (c.sweep.mode != "robustness" && c.sweep.mode != "ablation" && c.sweep.mode != "repeat")
    throw ConfigError("config key 'sweep.mode' must be robustness, ablation or repeat");
  for (const auto& name : c.sweep.methods) validate_method_name(name, "sweep.methods");
  for (double f : c.sweep.fractions)
    if (!(f > 0.0 && f <= 1.0)) throw ConfigError("config key 'sweep.fractions' entries must lie in (0,1]");
  for (double g : c.sweep.grid)
    if (!(g >= 0.0 && g <= 1.0)) throw ConfigError("config key 'sweep.grid' entries must lie in [0,1]");
  if (c.sweep.repeats < 1) throw ConfigError("config key 'sweep.repeats' must be >= 1");
}

json parse_env_value(const std::string& raw) {
  json v = json::parse(raw, nullptr, false);
  if (v.is_discarded()) return raw;
  return v;
}

}  // namespace

RunPlan RunConfig::plan() const {
  RunPlan p;
  p.dataset = dataset;
  p.imbalance = imbalance;
  p.method = method;
  p.meta = meta;
  p.meta.seed = seed;
  p.config_hash = hash();
  return p;
}

std::string RunConfig::to_json() const {
  json j = defaults_json(*this);
  return j.dump(2) + "\n";
}

std::string RunConfig::hash() const {
  json j = defaults_json(*this);
  j.erase("out_dir");
  j.erase("jobs");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return buf;
}

RunConfig parse_config(const std::string& text, const std::map<std::string, std::string>& env) {
  json doc = json::parse(text, nullptr, false);
  if (doc.is_discarded()) throw ConfigError("config: not valid JSON");
  json merged = defaults_json(RunConfig{});
  std::set<std::string> explicit_keys;
  merge(merged, doc, "", explicit_keys);

  for (const auto& [name, raw] : env) {
    const std::string prefix = "METAITE_";
    if (name.rfind(prefix, 0) != 0) continue;
    std::string rest = name.substr(prefix.size());
    std::transform(rest.begin(), rest.end(), rest.begin(), [](unsigned char ch) { return std::tolower(ch); });
    json update;
    const auto sep = rest.find("__");
    if (sep == std::string::npos) {
      update[rest] = parse_env_value(raw);
    } else {
      update[rest.substr(0, sep)][rest.substr(sep + 2)] = parse_env_value(raw);
    }
    try {
      merge(merged, update, "", explicit_keys);
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(e.what()) + " (from environment variable " + name + ")");
    }
  }

  RunConfig c = config_from_json(merged, explicit_keys);
  validate(c);
  return c;
}

RunConfig load_config(const std::string& path, const std::map<std::string, std::string>& env) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception&) {
    throw ConfigError("cannot read config file '" + path + "'");
  }
  return parse_config(text, env);
}

std::map<std::string, std::string> environment_overrides() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind("METAITE_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    out[entry.substr(0, eq)] = entry.substr(eq + 1);
  }
  return out;
}

}  // namespace metaite::cli
