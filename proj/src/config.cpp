#include "hdt/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include "hdt/error.hpp"

namespace hdt {

HdtConfig HdtConfig::tiny() {
  HdtConfig c;
  c.channels = 8;
  c.embed = 16;
  c.window = 4;
  c.heads = 2;
  c.dts_per_group = 2;
  c.groups = 1;
  return c;
}

std::size_t HdtConfig::mlp_hidden() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(mlp_ratio * static_cast<double>(embed))));
}

void HdtConfig::validate() const {
  if (channels < 1) throw ConfigError("channels must be >= 1");
  if (embed < 1) throw ConfigError("embed must be >= 1");
  if (heads < 1 || embed % heads != 0) {
    throw ConfigError("embed (" + std::to_string(embed) + ") must be divisible by heads (" + std::to_string(heads) +
                      ")");
  }
  if (window < 1) throw ConfigError("window must be >= 1");
  if (dts_per_group < 1) throw ConfigError("dts_per_group (N) must be >= 1");
  if (groups < 1) throw ConfigError("groups (M) must be >= 1");
  if (!(mlp_ratio > 0)) throw ConfigError("mlp_ratio must be positive");
  if (dilation < 1) throw ConfigError("dilation must be >= 1");
}

TrainConfig TrainConfig::tiny() {
  TrainConfig t;
  t.batch_size = 2;
  t.patch = 32;
  t.stride = 16;
  t.synthetic_size = 32;
  return t;
}

void TrainConfig::validate(const HdtConfig& model) const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (patch < model.window) {
    throw ConfigError("patch (" + std::to_string(patch) + ") must be >= window (" + std::to_string(model.window) + ")");
  }
  if (stride < 1 || stride > patch) throw ConfigError("stride must be in [1, patch]");
  if (!(mu > 0)) throw ConfigError("mu must be positive");
  if (!(gamma > 0)) throw ConfigError("gamma must be positive");
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("beta1/beta2 must be in [0, 1)");
  if (!(adam_eps > 0)) throw ConfigError("adam_eps must be positive");
  if (synthetic_size < patch) throw ConfigError("synthetic_size must be >= patch");
  if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::size_t parse_size(const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos) throw std::invalid_argument("not integer");
  return static_cast<std::size_t>(std::stoull(v));
}

double parse_double(const std::string& v) {
  std::size_t used = 0;
  const double d = std::stod(v, &used);
  if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument("not a number");
  return d;
}

bool parse_bool(const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("not a boolean");
}

using Setter = std::function<void(Config&, const std::string&)>;

const std::map<std::string, std::pair<const char*, Setter>>& setters() {
  static const std::map<std::string, std::pair<const char*, Setter>> table = {
      {"channels", {"integer", [](Config& c, const std::string& v) { c.model.channels = parse_size(v); }}},
      {"embed", {"integer", [](Config& c, const std::string& v) { c.model.embed = parse_size(v); }}},
      {"window", {"integer", [](Config& c, const std::string& v) { c.model.window = parse_size(v); }}},
      {"heads", {"integer", [](Config& c, const std::string& v) { c.model.heads = parse_size(v); }}},
      {"dts_per_group", {"integer", [](Config& c, const std::string& v) { c.model.dts_per_group = parse_size(v); }}},
      {"groups", {"integer", [](Config& c, const std::string& v) { c.model.groups = parse_size(v); }}},
      {"mlp_ratio", {"number", [](Config& c, const std::string& v) { c.model.mlp_ratio = parse_double(v); }}},
      {"dilation", {"integer", [](Config& c, const std::string& v) { c.model.dilation = parse_size(v); }}},
      {"sar", {"boolean", [](Config& c, const std::string& v) { c.model.sar = parse_bool(v); }}},
      {"deformable", {"boolean", [](Config& c, const std::string& v) { c.model.deformable = parse_bool(v); }}},
      {"batch_size", {"integer", [](Config& c, const std::string& v) { c.train.batch_size = parse_size(v); }}},
      {"epochs", {"integer", [](Config& c, const std::string& v) { c.train.epochs = parse_size(v); }}},
      {"patch", {"integer", [](Config& c, const std::string& v) { c.train.patch = parse_size(v); }}},
      {"stride", {"integer", [](Config& c, const std::string& v) { c.train.stride = parse_size(v); }}},
      {"seed", {"integer", [](Config& c, const std::string& v) { c.train.seed = parse_size(v); }}},
      {"mu", {"number", [](Config& c, const std::string& v) { c.train.mu = parse_double(v); }}},
      {"gamma", {"number", [](Config& c, const std::string& v) { c.train.gamma = parse_double(v); }}},
      {"lr", {"number", [](Config& c, const std::string& v) { c.train.lr = parse_double(v); }}},
      {"beta1", {"number", [](Config& c, const std::string& v) { c.train.beta1 = parse_double(v); }}},
      {"beta2", {"number", [](Config& c, const std::string& v) { c.train.beta2 = parse_double(v); }}},
      {"adam_eps", {"number", [](Config& c, const std::string& v) { c.train.adam_eps = parse_double(v); }}},
      {"max_steps", {"integer", [](Config& c, const std::string& v) { c.train.max_steps = parse_size(v); }}},
      {"checkpoint_every",
       {"integer", [](Config& c, const std::string& v) { c.train.checkpoint_every = parse_size(v); }}},
      {"augment", {"boolean", [](Config& c, const std::string& v) { c.train.augment = parse_bool(v); }}},
      {"precision",
       {"f32|f64",
        [](Config& c, const std::string& v) {
          if (v == "f32") {
            c.train.precision = Precision::f32;
          } else if (v == "f64") {
            c.train.precision = Precision::f64;
          } else {
            throw std::invalid_argument("precision");
          }
        }}},
      {"synthetic_size", {"integer", [](Config& c, const std::string& v) { c.train.synthetic_size = parse_size(v); }}},
      {"synthetic_motion", {"boolean", [](Config& c, const std::string& v) { c.train.synthetic_motion = parse_bool(v); }}},
      {"checkpoint_path", {"path", [](Config& c, const std::string& v) { c.train.checkpoint_path = v; }}},
      {"log_path", {"path", [](Config& c, const std::string& v) { c.train.log_path = v; }}},
  };
  return table;
}

}  // namespace

Config parse_config(std::string_view text) {
  struct Entry {
    std::size_t line;
    std::string key, value;
  };
  std::vector<Entry> entries;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  std::string preset = "paper";
  while (std::getline(in, raw)) {
    ++line_no;
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    const std::string line = trim(raw);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    Entry e{line_no, trim(line.substr(0, eq)), trim(line.substr(eq + 1))};
    if (e.key == "preset") {
      if (e.value != "paper" && e.value != "tiny") {
        throw ConfigError("config line " + std::to_string(line_no) + ": preset must be paper or tiny");
      }
      preset = e.value;
      continue;
    }
    if (!setters().count(e.key)) {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + e.key + "'");
    }
    entries.push_back(std::move(e));
  }

  Config cfg;
  if (preset == "tiny") {
    cfg.model = HdtConfig::tiny();
    cfg.train = TrainConfig::tiny();
  }
  for (const auto& e : entries) {
    const auto& [type, set] = setters().at(e.key);
    try {
      set(cfg, e.value);
    } catch (const std::exception&) {
      throw ConfigError("config line " + std::to_string(e.line) + ": '" + e.key + "' expects " + type + ", got '" +
                        e.value + "'");
    }
  }
  cfg.model.validate();
  cfg.train.validate(cfg.model);
  return cfg;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string model_config_text(const HdtConfig& m) {
  std::ostringstream os;
  os.precision(17);
  os << "channels=" << m.channels << "\n"
     << "embed=" << m.embed << "\n"
     << "window=" << m.window << "\n"
     << "heads=" << m.heads << "\n"
     << "dts_per_group=" << m.dts_per_group << "\n"
     << "groups=" << m.groups << "\n"
     << "mlp_ratio=" << m.mlp_ratio << "\n"
     << "dilation=" << m.dilation << "\n"
     << "sar=" << (m.sar ? "true" : "false") << "\n"
     << "deformable=" << (m.deformable ? "true" : "false") << "\n";
  return os.str();
}

std::string config_text(const Config& c) {
  std::ostringstream os;
  os.precision(17);
  const auto& t = c.train;
  os << model_config_text(c.model) << "batch_size=" << t.batch_size << "\n"
     << "epochs=" << t.epochs << "\n"
     << "patch=" << t.patch << "\n"
     << "stride=" << t.stride << "\n"
     << "seed=" << t.seed << "\n"
     << "mu=" << t.mu << "\n"
     << "gamma=" << t.gamma << "\n"
     << "lr=" << t.lr << "\n"
     << "beta1=" << t.beta1 << "\n"
     << "beta2=" << t.beta2 << "\n"
     << "adam_eps=" << t.adam_eps << "\n"
     << "max_steps=" << t.max_steps << "\n"
     << "checkpoint_every=" << t.checkpoint_every << "\n"
     << "augment=" << (t.augment ? "true" : "false") << "\n"
     << "precision=" << (t.precision == Precision::f64 ? "f64" : "f32") << "\n"
     << "synthetic_size=" << t.synthetic_size << "\n"
     << "synthetic_motion=" << (t.synthetic_motion ? "true" : "false") << "\n"
     << "checkpoint_path=" << t.checkpoint_path << "\n"
     << "log_path=" << t.log_path << "\n";
  return os.str();
}

}  // namespace hdt
