#include "hdt/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "hdt/error.hpp"

namespace hdt {

namespace fs = std::filesystem;

LocalWidths local_widths(std::size_t embed) {
  auto at_least_one = [](std::size_t v) { return v < 1 ? std::size_t{1} : v; };
  return {at_least_one(embed / 10), at_least_one(embed / 5), at_least_one(2 * embed / 5)};
}

namespace {

void conv(std::vector<ParamSpec>& m, const std::string& name, std::size_t cin, std::size_t cout,
          InitKind kind = InitKind::conv) {
  m.push_back({name + ".w", Shape{3, 3, cin, cout}, kind, 9 * cin});
  m.push_back({name + ".b", Shape{cout}, InitKind::zeros, 1});
}

void proj(std::vector<ParamSpec>& m, const std::string& name, std::size_t din, std::size_t dout) {
  m.push_back({name + ".w", Shape{din, dout}, InitKind::projection, din});
  m.push_back({name + ".b", Shape{dout}, InitKind::zeros, 1});
}

void norm(std::vector<ParamSpec>& m, const std::string& name, std::size_t d) {
  m.push_back({name + ".gamma", Shape{d}, InitKind::ones, 1});
  m.push_back({name + ".beta", Shape{d}, InitKind::zeros, 1});
}

}  // namespace

std::vector<ParamSpec> model_manifest(const HdtConfig& cfg) {
  cfg.validate();
  const std::size_t c = cfg.channels, d = cfg.embed;
  const auto lw = local_widths(d);
  std::vector<ParamSpec> m;

  conv(m, "head.shallow0", 6, c);
  conv(m, "head.shallow1", c, c);
  conv(m, "head.shallow2", c, c);
  for (const char* att : {"head.att1", "head.att3"}) {
    conv(m, std::string(att) + ".conv0", 2 * c, c);
    conv(m, std::string(att) + ".conv1", c, c);
  }

  conv(m, "body.embed", 4 * c, d);
  for (std::size_t g = 0; g < cfg.groups; ++g) {
    const std::string gp = "body.g" + std::to_string(g);
    for (std::size_t n = 0; n < cfg.dts_per_group; ++n) {
      const std::string p = gp + ".dt" + std::to_string(n);
      norm(m, p + ".ln1", d);
      for (const char* q : {".msa.q", ".msa.k", ".msa.v", ".msa.o"}) proj(m, p + q, d, d);
      norm(m, p + ".ln2", d);
      proj(m, p + ".mlp.fc0", d, cfg.mlp_hidden());
      proj(m, p + ".mlp.fc1", cfg.mlp_hidden(), d);
      norm(m, p + ".local.ln", d);
      conv(m, p + ".local.conv0", d, lw.reduce);
      conv(m, p + ".local.conv1", lw.reduce, lw.expand);
      if (cfg.deformable) {
        conv(m, p + ".local.deform0", lw.expand, lw.deform);
        conv(m, p + ".local.deform0.offset", lw.expand, 18, InitKind::zeros);
        conv(m, p + ".local.deform1", lw.deform, lw.deform);
        conv(m, p + ".local.deform1.offset", lw.deform, 18, InitKind::zeros);
      } else {
        conv(m, p + ".local.plain0", lw.expand, lw.deform);
        conv(m, p + ".local.plain1", lw.deform, lw.deform);
      }
      proj(m, p + ".local.fc", lw.deform, d);
    }
    conv(m, gp + ".conv", d, d);
  }
  conv(m, "body.dilated", d, d);
  conv(m, "body.conv_res", d, d);
  conv(m, "body.out", d, 3);
  return m;
}

std::size_t parameter_count(const std::vector<ParamSpec>& manifest) {
  std::size_t n = 0;
  for (const auto& p : manifest) n += p.shape.numel();
  return n;
}

std::string manifest_text(const HdtConfig& cfg) {
  const auto m = model_manifest(cfg);
  std::ostringstream os;
  os << "# sar=" << (cfg.sar ? "true" : "false") << " deformable=" << (cfg.deformable ? "true" : "false") << "\n";
  for (const auto& p : m) os << p.name << " " << p.shape.str() << " " << p.shape.numel() << "\n";
  os << "total " << parameter_count(m) << "\n";
  return os.str();
}

template <typename T>
ParamStore<T> init_params(const HdtConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamStore<T> store;
  for (const auto& spec : model_manifest(cfg)) {
    Tensor<T> t(spec.shape);
    switch (spec.init) {
      case InitKind::conv: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (auto& v : t.data()) v = static_cast<T>(u(rng));
        break;
      }
      case InitKind::projection: {
        std::normal_distribution<double> n(0.0, 0.02);
        for (auto& v : t.data()) {
          double s;
          do {
            s = n(rng);
          } while (std::abs(s) > 0.04);
          v = static_cast<T>(s);
        }
        break;
      }
      case InitKind::zeros:
        break;
      case InitKind::ones:
        t.fill(T(1));
        break;
    }
    store.add(spec.name, std::move(t));
  }
  return store;
}

template ParamStore<float> init_params(const HdtConfig&, std::uint64_t);
template ParamStore<double> init_params(const HdtConfig&, std::uint64_t);

// --- checkpoint codec ---------------------------------------------------------

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& b) : bytes_(b) {}
  std::size_t offset() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw FormatError(std::string("checkpoint truncated in ") + what, pos_);
  }
  std::uint64_t uint(std::size_t width, const char* what) {
    need(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += width;
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  std::string meta;
  for (const auto& [k, v] : ck.metadata) meta += k + "=" + v + "\n";
  put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  put_u32(out, static_cast<std::uint32_t>(ck.entries.size()));
  for (const auto& e : ck.entries) {
    if (e.data.size() != e.shape.numel()) throw ShapeError("checkpoint entry " + e.name + " size mismatch");
    put_u32(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.dtype));
    put_u32(out, static_cast<std::uint32_t>(e.shape.rank()));
    for (auto d : e.shape.dims()) put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (const auto& e : ck.entries) {
    for (double v : e.data) {
      if (e.dtype == DType::f32) {
        put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_u64(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(sizeof(kCheckpointMagic), "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError("bad checkpoint magic", 0);
  }
  const auto version = r.uint(4, "version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), 8);
  }
  Checkpoint ck;
  const auto meta_len = r.uint(4, "metadata length");
  std::istringstream meta(r.str(meta_len, "metadata"));
  for (std::string line; std::getline(meta, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("malformed checkpoint metadata line", r.offset());
    ck.metadata[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.uint(4, "entry count");
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = r.str(r.uint(4, "name length"), "name");
    const auto dt = r.uint(1, "dtype");
    if (dt > 1) throw FormatError("unknown dtype in entry " + e.name, r.offset() - 1);
    e.dtype = static_cast<DType>(dt);
    const auto rank = r.uint(4, "rank");
    std::vector<std::size_t> dims;
    for (std::uint64_t a = 0; a < rank; ++a) dims.push_back(r.uint(4, "dims"));
    try {
      e.shape = Shape(std::move(dims));
    } catch (const ShapeError& err) {
      throw FormatError(std::string("entry ") + e.name + ": " + err.what(), r.offset());
    }
    ck.entries.push_back(std::move(e));
  }
  for (auto& e : ck.entries) {
    e.data.resize(e.shape.numel());
    for (auto& v : e.data) {
      if (e.dtype == DType::f32) {
        v = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4, "payload")));
      } else {
        v = std::bit_cast<double>(r.uint(8, "payload"));
      }
    }
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload", r.offset());
  return ck;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ck) {
  const std::string bytes = encode_checkpoint(ck);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

template <typename T>
void store_params(Checkpoint& ck, const ParamStore<T>& params, const std::string& prefix) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    CheckpointEntry e;
    e.name = prefix + params.name(i);
    e.shape = params.value(i).shape();
    e.dtype = std::is_same_v<T, double> ? DType::f64 : DType::f32;
    e.data.assign(params.value(i).data().begin(), params.value(i).data().end());
    ck.entries.push_back(std::move(e));
  }
}

void store_model_config(Checkpoint& ck, const HdtConfig& cfg) {
  std::istringstream in(model_config_text(cfg));
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    ck.metadata["model." + line.substr(0, eq)] = line.substr(eq + 1);
  }
}

HdtConfig checkpoint_model_config(const Checkpoint& ck) {
  std::string text;
  for (const auto& [k, v] : ck.metadata) {
    if (k.rfind("model.", 0) == 0) text += k.substr(6) + "=" + v + "\n";
  }
  if (text.empty()) throw ConfigError("checkpoint carries no model configuration");
  return parse_config(text).model;
}

template <typename T>
ParamStore<T> load_params(const Checkpoint& ck, const HdtConfig& cfg, const std::string& prefix) {
  ParamStore<T> out;
  for (const auto& spec : model_manifest(cfg)) {
    const auto* e = ck.find(prefix + spec.name);
    if (!e) throw ConfigError("checkpoint is missing parameter " + spec.name);
    if (!(e->shape == spec.shape)) {
      throw ConfigError("parameter " + spec.name + " has shape " + e->shape.str() + " in checkpoint, config expects " +
                        spec.shape.str());
    }
    std::vector<T> data(e->data.begin(), e->data.end());
    out.add(spec.name, Tensor<T>(spec.shape, std::move(data)));
  }
  for (const auto& e : ck.entries) {
    if (e.name.rfind(prefix, 0) != 0 || e.name.rfind("adam.", 0) == 0) continue;
    if (!out.contains(e.name.substr(prefix.size()))) {
      throw ConfigError("checkpoint parameter " + e.name + " is not part of the configured model");
    }
  }
  return out;
}

template void store_params(Checkpoint&, const ParamStore<float>&, const std::string&);
template void store_params(Checkpoint&, const ParamStore<double>&, const std::string&);
template ParamStore<float> load_params(const Checkpoint&, const HdtConfig&, const std::string&);
template ParamStore<double> load_params(const Checkpoint&, const HdtConfig&, const std::string&);

}  // namespace hdt
