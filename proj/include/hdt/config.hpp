#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace hdt {

/// Architecture hyperparameters. Defaults are the full-scale `paper` preset.
struct HdtConfig {
  std::size_t channels = 60;       // C, head feature channels
  std::size_t embed = 60;          // D, token embedding width
  std::size_t window = 8;          // attention window side
  std::size_t heads = 6;
  std::size_t dts_per_group = 6;   // N
  std::size_t groups = 3;          // M
  double mlp_ratio = 2.0;
  std::size_t dilation = 2;
  bool sar = true;                 // reference-feature attention
  bool deformable = true;          // deformable convs in the local branch

  static HdtConfig paper() { return {}; }
  static HdtConfig tiny();

  /// Throws ConfigError when an invariant does not hold.
  void validate() const;

  std::size_t mlp_hidden() const;

  friend bool operator==(const HdtConfig&, const HdtConfig&) = default;
};

enum class Precision { f32, f64 };

struct TrainConfig {
  std::size_t batch_size = 16;
  std::size_t epochs = 100;
  std::size_t patch = 128;
  std::size_t stride = 64;
  std::uint64_t seed = 0;
  double mu = 5000.0;
  double gamma = 2.2;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t max_steps = 0;         // 0: no cap
  std::size_t checkpoint_every = 1;  // epochs
  bool augment = true;
  Precision precision = Precision::f32;
  std::size_t synthetic_size = 128;
  bool synthetic_motion = true;
  std::string checkpoint_path = "checkpoint.hdt";
  std::string log_path = "metrics.jsonl";

  static TrainConfig paper() { return {}; }
  static TrainConfig tiny();

  void validate(const HdtConfig& model) const;
};

struct Config {
  HdtConfig model;
  TrainConfig train;
};

/// Parses `key=value` lines. `#` starts a comment; an optional
/// `preset=paper|tiny` line selects the defaults the other keys override.
/// Unknown keys and malformed values raise ConfigError naming the line.
Config parse_config(std::string_view text);

Config load_config(const std::string& path);

/// Canonical key=value rendering of every model field.
std::string model_config_text(const HdtConfig& cfg);

/// Canonical key=value rendering of every field.
std::string config_text(const Config& cfg);

}  // namespace hdt
