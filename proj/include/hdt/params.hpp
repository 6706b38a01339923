#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "hdt/config.hpp"
#include "hdt/tensor.hpp"

namespace hdt {

enum class InitKind { conv, projection, zeros, ones };

/// One named parameter of the model.
struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind init = InitKind::zeros;
  std::size_t fan_in = 1;
};

/// Channel widths of the local-branch convolution chain for embed width D:
/// D/10, D/5 and 2D/5, each at least 1.
struct LocalWidths {
  std::size_t reduce, expand, deform;
};
LocalWidths local_widths(std::size_t embed);

/// Every parameter of the model described by cfg, in a fixed order.
std::vector<ParamSpec> model_manifest(const HdtConfig& cfg);

std::size_t parameter_count(const std::vector<ParamSpec>& manifest);

/// Printable manifest: ablation flags, one `name shape count` line per
/// parameter and the total.
std::string manifest_text(const HdtConfig& cfg);

/// Named parameter tensors in manifest order.
template <typename T>
class ParamStore {
 public:
  void add(std::string name, Tensor<T> value) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor<T>& value(std::size_t i) { return values_.at(i); }
  const Tensor<T>& value(std::size_t i) const { return values_.at(i); }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t index(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return it->second;
  }
  Tensor<T>& operator[](const std::string& name) { return values_[index(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return values_[index(name)]; }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Seeded initialization: fan-in scaled uniform for convolutions, truncated
/// normal (σ = 0.02) for projections, zeros for biases and offset predictors,
/// ones for layer-norm gains.
template <typename T>
ParamStore<T> init_params(const HdtConfig& cfg, std::uint64_t seed);

// --- checkpoints --------------------------------------------------------------

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

struct CheckpointEntry {
  std::string name;
  Shape shape;
  DType dtype = DType::f32;
  std::vector<double> data;
};

/// Versioned container: magic, key=value metadata (including the model
/// config), a manifest of (name, shape, dtype), then little-endian payloads.
struct Checkpoint {
  std::map<std::string, std::string> metadata;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

inline constexpr char kCheckpointMagic[8] = {'H', 'D', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(const std::string& bytes);

/// Writes through a temporary file and renames, so an interrupted write
/// leaves the previous checkpoint intact.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Adds every parameter as an entry of the matching dtype.
template <typename T>
void store_params(Checkpoint& ck, const ParamStore<T>& params, const std::string& prefix = "");

/// Records cfg as `model.<key>` metadata.
void store_model_config(Checkpoint& ck, const HdtConfig& cfg);

/// Model config recorded in a checkpoint's metadata.
HdtConfig checkpoint_model_config(const Checkpoint& ck);

/// Loads parameters for cfg. Throws ConfigError describing the first
/// difference when the checkpoint manifest does not match cfg.
template <typename T>
ParamStore<T> load_params(const Checkpoint& ck, const HdtConfig& cfg, const std::string& prefix = "");

}  // namespace hdt
