#include "canf/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace canf {

std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void type_error(const std::string& key, const char* expected, const std::string& got) {
  throw ConfigError("key '" + key + "': expected " + expected + ", got '" + got + "'");
}

Index parse_int(const std::string& key, const std::string& v) {
  Index out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) type_error(key, "integer", v);
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) type_error(key, "number", v);
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  type_error(key, "boolean (true/false)", v);
}

std::vector<std::string> parse_list(const std::string& key, const std::string& v) {
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') type_error(key, "list like [a,b]", v);
  std::vector<std::string> items;
  std::stringstream ss(v.substr(1, v.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

std::string join_list(const std::vector<std::string>& items) {
  std::string out = "[";
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += items[i];
  }
  return out + "]";
}

struct KeySpec {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> parse;
  std::function<std::string(const RunConfig&)> print;
};

KeySpec int_key(const std::string& name, Index ModelConfig::*field) {
  return {name, [=](RunConfig& c, const std::string& v) { c.model.*field = parse_int(name, v); },
          [=](const RunConfig& c) { return std::to_string(c.model.*field); }};
}

KeySpec train_int_key(const std::string& name, Index TrainSettings::*field) {
  return {name, [=](RunConfig& c, const std::string& v) { c.train.*field = parse_int(name, v); },
          [=](const RunConfig& c) { return std::to_string(c.train.*field); }};
}

KeySpec train_double_key(const std::string& name, double TrainSettings::*field) {
  return {name, [=](RunConfig& c, const std::string& v) { c.train.*field = parse_double(name, v); },
          [=](const RunConfig& c) { return format_double(c.train.*field); }};
}

const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = [] {
    std::vector<KeySpec> s;
    s.push_back(int_key("image_size", &ModelConfig::image_size));
    s.push_back(int_key("in_channels", &ModelConfig::in_channels));
    s.push_back(int_key("patch_size", &ModelConfig::patch_size));
    s.push_back(int_key("width", &ModelConfig::width));
    s.push_back(int_key("depth", &ModelConfig::depth));
    s.push_back(int_key("heads", &ModelConfig::heads));
    s.push_back(int_key("mlp_ratio", &ModelConfig::mlp_ratio));
    s.push_back(int_key("cond_dim", &ModelConfig::cond_dim));
    s.push_back(int_key("n_classes", &ModelConfig::n_classes));
    s.push_back(int_key("n_timesteps", &ModelConfig::n_timesteps));
    s.push_back({"cond_aware_set",
                 [](RunConfig& c, const std::string& v) {
                   std::set<LayerKind> kinds;
                   for (const auto& item : parse_list("cond_aware_set", v)) {
                     auto kind = layer_kind_from_string(item);
                     if (!kind) {
                       type_error("cond_aware_set",
                                  "members of {dw-conv, patch-embed, out-proj, qkv-proj, mlp, head}",
                                  item);
                     }
                     kinds.insert(*kind);
                   }
                   c.model.cond_aware_set = kinds;
                 },
                 [](const RunConfig& c) {
                   std::vector<std::string> items;
                   for (auto k : c.model.cond_aware_set) items.emplace_back(to_string(k));
                   return join_list(items);
                 }});
    s.push_back({"control_method",
                 [](RunConfig& c, const std::string& v) {
                   ControlMethods m;
                   for (const auto& item : parse_list("control_method", v)) {
                     if (item == "CAN")
                       m.can = true;
                     else if (item == "AdaNorm")
                       m.ada_norm = true;
                     else if (item == "CondTokens")
                       m.cond_tokens = true;
                     else
                       type_error("control_method", "members of {CAN, AdaNorm, CondTokens}", item);
                   }
                   c.model.control = m;
                 },
                 [](const RunConfig& c) {
                   std::vector<std::string> items;
                   if (c.model.control.can) items.emplace_back("CAN");
                   if (c.model.control.ada_norm) items.emplace_back("AdaNorm");
                   if (c.model.control.cond_tokens) items.emplace_back("CondTokens");
                   return join_list(items);
                 }});
    s.push_back({"cond_sources",
                 [](RunConfig& c, const std::string& v) {
                   ConditionSources src{false, false};
                   for (const auto& item : parse_list("cond_sources", v)) {
                     if (item == "ClassLabel")
                       src.class_label = true;
                     else if (item == "Timestep")
                       src.timestep = true;
                     else
                       type_error("cond_sources", "members of {ClassLabel, Timestep}", item);
                   }
                   c.model.cond_sources = src;
                 },
                 [](const RunConfig& c) {
                   std::vector<std::string> items;
                   if (c.model.cond_sources.class_label) items.emplace_back("ClassLabel");
                   if (c.model.cond_sources.timestep) items.emplace_back("Timestep");
                   return join_list(items);
                 }});
    s.push_back({"skip_connections",
                 [](RunConfig& c, const std::string& v) {
                   c.model.skip_connections = parse_bool("skip_connections", v);
                 },
                 [](const RunConfig& c) {
                   return std::string(c.model.skip_connections ? "true" : "false");
                 }});
    s.push_back(int_key("selection_kernels", &ModelConfig::selection_kernels));

    s.push_back(train_int_key("epochs", &TrainSettings::epochs));
    s.push_back(train_int_key("batch_size", &TrainSettings::batch_size));
    s.push_back(train_int_key("n_per_class", &TrainSettings::n_per_class));
    s.push_back(train_int_key("eval_per_class", &TrainSettings::eval_per_class));
    s.push_back(train_int_key("eval_repeats", &TrainSettings::eval_repeats));
    s.push_back(train_double_key("jitter", &TrainSettings::jitter));
    s.push_back(train_double_key("p_null", &TrainSettings::p_null));
    s.push_back(train_double_key("beta_start", &TrainSettings::beta_start));
    s.push_back(train_double_key("beta_end", &TrainSettings::beta_end));
    s.push_back(train_int_key("sample_steps", &TrainSettings::sample_steps));
    s.push_back(train_double_key("guidance", &TrainSettings::guidance));
    s.push_back(train_int_key("samples_per_class", &TrainSettings::samples_per_class));
    s.push_back({"seed",
                 [](RunConfig& c, const std::string& v) {
                   std::uint64_t out = 0;
                   auto res = std::from_chars(v.data(), v.data() + v.size(), out);
                   if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
                     type_error("seed", "unsigned 64-bit integer", v);
                   }
                   c.train.seed = out;
                 },
                 [](const RunConfig& c) { return std::to_string(c.train.seed); }});
    return s;
  }();
  return specs;
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] != b[j - 1])});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

void validate_train(const RunConfig& c) {
  const auto& t = c.train;
  auto at_least = [](Index v, Index lo, const char* key) {
    if (v < lo) throw ConfigError(std::string(key) + ": must be >= " + std::to_string(lo) + ", got " + std::to_string(v));
  };
  at_least(t.epochs, 0, "epochs");
  at_least(t.batch_size, 1, "batch_size");
  at_least(t.n_per_class, 1, "n_per_class");
  at_least(t.eval_per_class, 1, "eval_per_class");
  at_least(t.eval_repeats, 1, "eval_repeats");
  at_least(t.sample_steps, 1, "sample_steps");
  at_least(t.samples_per_class, 0, "samples_per_class");
  if (t.sample_steps > c.model.n_timesteps) {
    throw ConfigError("sample_steps: " + std::to_string(t.sample_steps) + " exceeds n_timesteps " +
                      std::to_string(c.model.n_timesteps));
  }
  if (!(t.jitter >= 0.0)) throw ConfigError("jitter: must be >= 0");
  if (!(t.p_null >= 0.0 && t.p_null <= 1.0)) throw ConfigError("p_null: must lie in [0, 1]");
  if (!(t.beta_start > 0.0 && t.beta_start <= t.beta_end && t.beta_end < 1.0)) {
    throw ConfigError("beta_start/beta_end: need 0 < beta_start <= beta_end < 1");
  }
  if (!std::isfinite(t.guidance)) throw ConfigError("guidance: must be finite");
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& s : key_specs()) k.push_back(s.name);
    return k;
  }();
  return keys;
}

void apply_override(RunConfig& config, const std::string& key_value) {
  const auto eq = key_value.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override '" + key_value + "': expected key=value");
  }
  const std::string key = trim(key_value.substr(0, eq));
  const std::string value = trim(key_value.substr(eq + 1));
  const auto& specs = key_specs();
  auto it = std::find_if(specs.begin(), specs.end(), [&](const KeySpec& s) { return s.name == key; });
  if (it == specs.end()) {
    const auto nearest = std::min_element(specs.begin(), specs.end(), [&](const KeySpec& a, const KeySpec& b) {
      return edit_distance(key, a.name) < edit_distance(key, b.name);
    });
    throw ConfigError("unknown key '" + key + "' (did you mean '" + nearest->name + "'?)");
  }
  it->parse(config, value);
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig config;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    apply_override(config, line);
  }
  config.model.validate();
  validate_train(config);
  return config;
}

RunConfig parse_config(const std::optional<std::filesystem::path>& path,
                       const std::vector<std::string>& overrides) {
  std::string text;
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("config file '" + path->string() + "' cannot be read");
    std::stringstream buf;
    buf << in.rdbuf();
    text = buf.str();
  }
  for (const auto& o : overrides) text += "\n" + o;
  return parse_config_text(text);
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  for (const auto& spec : key_specs()) out += spec.name + "=" + spec.print(config) + "\n";
  return out;
}

std::string serialize_model_config(const ModelConfig& config) {
  RunConfig rc;
  rc.model = config;
  std::string full = serialize_config(rc);
  // Keep only model keys (everything before the first training key).
  const auto cut = full.find("\nepochs=");
  return cut == std::string::npos ? full : full.substr(0, cut + 1);
}

std::string config_hash(const RunConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize_config(config)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace canf
