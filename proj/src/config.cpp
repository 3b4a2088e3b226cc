#include "bevref/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

namespace bevref::cfg {

namespace {

constexpr int kConfigVersion = 1;

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "': expected a number, got '" + v + "'");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long i = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw config_error("key '" + key + "': expected an integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw config_error("key '" + key + "': expected true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// One table drives set(), to_json() and from_json(), so keys can never drift.
const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    auto dbl = [&f](const std::string& key, double RunConfig::* mem) {
      f[key] = {[key, mem](RunConfig& c, const std::string& v) { c.*mem = parse_double(key, v); },
                [mem](const RunConfig& c) { return fmt_double(c.*mem); }};
    };
    auto itg = [&f](const std::string& key, int RunConfig::* mem) {
      f[key] = {[key, mem](RunConfig& c, const std::string& v) {
                  c.*mem = static_cast<int>(parse_int(key, v));
                },
                [mem](const RunConfig& c) { return std::to_string(c.*mem); }};
    };
    auto bl = [&f](const std::string& key, bool RunConfig::* mem) {
      f[key] = {[key, mem](RunConfig& c, const std::string& v) { c.*mem = parse_bool(key, v); },
                [mem](const RunConfig& c) { return std::string(c.*mem ? "true" : "false"); }};
    };
    f["seed"] = {[](RunConfig& c, const std::string& v) {
                   c.seed = static_cast<std::uint64_t>(parse_int("seed", v));
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }};
    dbl("x_min", &RunConfig::x_min);
    dbl("x_max", &RunConfig::x_max);
    dbl("y_min", &RunConfig::y_min);
    dbl("y_max", &RunConfig::y_max);
    dbl("z_min", &RunConfig::z_min);
    dbl("z_max", &RunConfig::z_max);
    dbl("voxel_x", &RunConfig::voxel_x);
    dbl("voxel_y", &RunConfig::voxel_y);
    dbl("voxel_z", &RunConfig::voxel_z);
    itg("embed_dim", &RunConfig::embed_dim);
    itg("num_tokens", &RunConfig::num_tokens);
    itg("num_queries", &RunConfig::num_queries);
    dbl("tau", &RunConfig::tau);
    dbl("lambda_heatmap", &RunConfig::lambda_heatmap);
    dbl("lambda_query", &RunConfig::lambda_query);
    dbl("lambda_cls", &RunConfig::lambda_cls);
    dbl("lambda_reg", &RunConfig::lambda_reg);
    itg("encoder_layers", &RunConfig::encoder_layers);
    itg("decoder_layers", &RunConfig::decoder_layers);
    itg("heads", &RunConfig::heads);
    itg("max_text_tokens", &RunConfig::max_text_tokens);
    itg("epochs", &RunConfig::epochs);
    itg("batch_size", &RunConfig::batch_size);
    dbl("lr_max", &RunConfig::lr_max);
    dbl("weight_decay", &RunConfig::weight_decay);
    dbl("momentum_lo", &RunConfig::momentum_lo);
    dbl("momentum_hi", &RunConfig::momentum_hi);
    bl("token_selection", &RunConfig::token_selection);
    bl("context_supervision", &RunConfig::context_supervision);
    return f;
  }();
  return table;
}

}  // namespace

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::paper() {
  RunConfig c;
  c.x_min = -54.0;
  c.x_max = 54.0;
  c.y_min = 0.0;
  c.y_max = 54.0;
  c.z_min = -5.0;
  c.z_max = 3.0;
  c.voxel_x = 0.075;
  c.voxel_y = 0.075;
  c.voxel_z = 0.2;
  c.embed_dim = 128;
  c.num_tokens = 500;
  c.num_queries = 256;
  c.encoder_layers = 1;
  c.decoder_layers = 3;
  c.epochs = 20;
  return c;
}

grid::GridSpec RunConfig::make_grid() const {
  return grid::GridSpec::create(x_min, x_max, y_min, y_max, z_min, z_max, voxel_x, voxel_y, voxel_z);
}

void RunConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw config_error(std::string(name) + " must be positive");
  };
  positive(embed_dim, "embed_dim");
  positive(num_tokens, "num_tokens");
  positive(num_queries, "num_queries");
  positive(tau, "tau");
  positive(heads, "heads");
  positive(max_text_tokens, "max_text_tokens");
  positive(epochs, "epochs");
  positive(batch_size, "batch_size");
  positive(lr_max, "lr_max");
  if (decoder_layers < 0) throw config_error("decoder_layers must be non-negative");
  if (encoder_layers < 1) throw config_error("encoder_layers must be positive");
  if (weight_decay < 0.0) throw config_error("weight_decay must be non-negative");
  if (embed_dim % 4 != 0) throw config_error("embed_dim must be divisible by 4 (2D sinusoidal PE)");
  if (embed_dim % heads != 0) throw config_error("embed_dim must be divisible by heads");
  if (!(momentum_lo > 0.0 && momentum_lo < 1.0) || !(momentum_hi > 0.0 && momentum_hi < 1.0))
    throw config_error("momentum bounds must lie in (0,1)");
  if (momentum_lo > momentum_hi) throw config_error("momentum_lo must not exceed momentum_hi");
  const grid::GridSpec g = make_grid();  // validates divisibility
  if (num_tokens > g.h * g.w)
    throw config_error("num_tokens " + std::to_string(num_tokens) + " exceeds grid cells " +
                       std::to_string(g.h * g.w));
  if (num_queries > num_tokens)
    throw config_error("num_queries " + std::to_string(num_queries) + " exceeds num_tokens " +
                       std::to_string(num_tokens));
}

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "config_version") {
    if (parse_int(key, value) != kConfigVersion)
      throw config_error("unsupported config_version " + value);
    return;
  }
  const auto& table = fields();
  const auto it = table.find(key);
  if (it == table.end()) throw config_error("unknown config key '" + key + "'");
  it->second.set(*this, value);
}

std::string RunConfig::to_json() const {
  std::string out = "{\"config_version\":" + std::to_string(kConfigVersion);
  for (const auto& [key, field] : fields()) {
    out += ",\"" + key + "\":\"";
    out += field.get(*this);
    out += '"';
  }
  out += '}';
  return out;
}

RunConfig RunConfig::from_json(const std::string& j) {
  RunConfig c;
  try {
    const nlohmann::json p = nlohmann::json::parse(j);
    if (!p.contains("config_version") || p["config_version"].get<int>() != kConfigVersion)
      throw config_error("missing or unsupported config_version");
    for (const auto& [key, value] : p.items()) {
      if (key == "config_version") continue;
      c.set(key, value.get<std::string>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config parse: ") + e.what());
  }
  return c;
}

RunConfig load_config_file(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file '" + path + "'");
  std::string line;
  int line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::string trimmed = line.substr(first, last - first + 1);
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos)
      throw config_error(path + ":" + std::to_string(line_number) + ": expected key=value");
    try {
      base.set(trimmed.substr(0, eq), trimmed.substr(eq + 1));
    } catch (const config_error& e) {
      throw config_error(path + ":" + std::to_string(line_number) + ": " + e.what());
    }
  }
  return base;
}

RunConfig preset(const std::string& name) {
  if (name == "desk") return RunConfig::desk();
  if (name == "paper") return RunConfig::paper();
  throw config_error("unknown preset '" + name + "' (expected desk or paper)");
}

}  // namespace bevref::cfg
