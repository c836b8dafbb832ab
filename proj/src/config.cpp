#include "gtm/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace gtm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& v) {
  if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front())
    return v.substr(1, v.size() - 2);
  return v;
}

double to_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

Eigen::Vector3d to_vec3(const std::string& key, const std::string& v) {
  std::string s = v;
  if (s.size() >= 2 && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
  std::stringstream in(s);
  Eigen::Vector3d out;
  std::string part;
  int i = 0;
  while (std::getline(in, part, ',')) {
    if (i == 3) throw ConfigError(key + ": expected 3 components");
    out[i++] = to_double(key, trim(part));
  }
  if (i != 3) throw ConfigError(key + ": expected 3 components");
  return out;
}

using Setter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;
using Getter = std::function<std::string(const TrainConfig&)>;

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

struct Field {
  Setter set;
  Getter get;
};

#define GTM_DOUBLE(name, member)                                                                           \
  {                                                                                                        \
    name, {                                                                                                \
      [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = to_double(k, v); },      \
          [](const TrainConfig& c) { return fmt(double(c.member)); }                                       \
    }                                                                                                      \
  }
#define GTM_INT(name, member)                                                                              \
  {                                                                                                        \
    name, {                                                                                                \
      [](TrainConfig& c, const std::string& k, const std::string& v) {                                     \
        c.member = decltype(c.member)(to_int(k, v));                                                       \
      },                                                                                                   \
          [](const TrainConfig& c) { return std::to_string(c.member); }                                    \
    }                                                                                                      \
  }
#define GTM_BOOL(name, member)                                                                             \
  {                                                                                                        \
    name, {                                                                                                \
      [](TrainConfig& c, const std::string& k, const std::string& v) { c.member = to_bool(k, v); },        \
          [](const TrainConfig& c) { return std::string(c.member ? "true" : "false"); }                    \
    }                                                                                                      \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      GTM_INT("iterations", iterations),
      GTM_DOUBLE("lr_features", lr_features),
      GTM_DOUBLE("lr_offsets", lr_offsets),
      GTM_DOUBLE("lr_scalings", lr_scalings),
      GTM_DOUBLE("lr_heads", lr_heads),
      GTM_DOUBLE("lr_embeddings", lr_embeddings),
      GTM_DOUBLE("lr_final_factor", lr_final_factor),
      GTM_BOOL("decay_embeddings", decay_embeddings),
      GTM_DOUBLE("lambda_ssim", loss.lambda_ssim),
      GTM_DOUBLE("lambda_vol", loss.lambda_vol),
      GTM_BOOL("adapt", adapt),
      GTM_INT("adapt_interval", adapt_interval),
      GTM_INT("adapt_start", adapt_start),
      GTM_INT("adapt_stop", adapt_stop),
      GTM_DOUBLE("grow_threshold", grow_threshold),
      GTM_DOUBLE("prune_opacity", prune_opacity),
      GTM_DOUBLE("voxel_fraction", voxel_fraction),
      GTM_INT("seed", seed),
      GTM_INT("threads", threads),
      GTM_INT("checkpoint_interval", checkpoint_interval),
      GTM_INT("feature_dim", model.feature_dim),
      GTM_INT("offsets_per_anchor", model.offsets_per_anchor),
      GTM_INT("embedding_dim", model.embedding_dim),
      GTM_INT("pe_frequencies", model.pe_frequencies),
      GTM_INT("hidden_width", model.hidden_width),
      GTM_INT("hidden_layers", model.hidden_layers),
      GTM_DOUBLE("scene_extent", model.scene_extent),
      GTM_DOUBLE("near_clip", model.near_clip),
      GTM_DOUBLE("cull_margin", model.cull_margin),
      {"encoder",
       {[](TrainConfig& c, const std::string&, const std::string& v) { c.model.encoder = parse_time_encoder(v); },
        [](const TrainConfig& c) { return "\"" + to_string(c.model.encoder) + "\""; }}},
      {"background",
       {[](TrainConfig& c, const std::string& k, const std::string& v) { c.background = to_vec3(k, v); },
        [](const TrainConfig& c) {
          return "[" + fmt(c.background[0]) + ", " + fmt(c.background[1]) + ", " + fmt(c.background[2]) + "]";
        }}},
  };
  return table;
}

#undef GTM_DOUBLE
#undef GTM_INT
#undef GTM_BOOL

}  // namespace

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(config, key, unquote(trim(value)));
}

void apply_config_text(TrainConfig& config, const std::string& text, const std::string& origin) {
  std::stringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string s = line;
    // comments, but not inside a quoted string
    bool quoted = false;
    for (size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') quoted = !quoted;
      if (s[i] == '#' && !quoted) {
        s.resize(i);
        break;
      }
    }
    s = trim(s);
    if (s.empty()) continue;
    if (s.front() == '[' && s.back() == ']' && s.find('=') == std::string::npos) continue;  // table headers
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
    try {
      set_config_value(config, trim(s.substr(0, eq)), s.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void apply_config_file(TrainConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(config, buf.str(), path.string());
}

std::string format_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

}  // namespace gtm
