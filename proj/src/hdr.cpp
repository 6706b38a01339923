#include "hdt/hdr.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace hdt {

namespace fs = std::filesystem;

void validate(const SampleTriplet& s) {
  const Shape& ref = s.ldr[0].pixels.shape();
  if (ref.rank() != 3 || ref[2] != 3) {
    throw ShapeError("sample " + s.id + ": LDR images must be H×W×3, got " + ref.str());
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const auto& img = s.ldr[i];
    if (!(img.exposure_time > 0) || !std::isfinite(img.exposure_time)) {
      throw Error("sample " + s.id + ": exposure time " + std::to_string(i) + " must be positive");
    }
    if (!(img.pixels.shape() == ref)) {
      throw ShapeError("sample " + s.id + ": ldr_" + std::to_string(i) + " has shape " + img.pixels.shape().str() +
                       ", expected " + ref.str());
    }
    for (float v : img.pixels.data()) {
      if (!(v >= 0.0f && v <= 1.0f)) throw Error("sample " + s.id + ": LDR pixel outside [0, 1]");
    }
    if (i > 0 && !(s.ldr[i - 1].exposure_time < img.exposure_time)) {
      throw Error("sample " + s.id + ": exposure times must be strictly increasing");
    }
  }
  if (s.ground_truth && !(s.ground_truth->pixels.shape() == ref)) {
    throw ShapeError("sample " + s.id + ": ground truth shape " + s.ground_truth->pixels.shape().str() +
                     " differs from LDR shape " + ref.str());
  }
}

double gamma_correct(double value, double exposure_time, double gamma) {
  if (!(exposure_time > 0)) throw Error("gamma_correct: exposure time must be positive");
  if (!(gamma > 0)) throw Error("gamma_correct: gamma must be positive");
  return std::pow(value, gamma) / exposure_time;
}

Tensor<float> gamma_correct(const LdrImage& img, double gamma) {
  Tensor<float> out(img.pixels.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(gamma_correct(img.pixels[i], img.exposure_time, gamma));
  }
  return out;
}

double mu_law(double x, double mu) {
  if (!(mu > 0)) throw Error("mu_law: mu must be positive");
  return std::log1p(mu * std::clamp(x, 0.0, 1.0)) / std::log1p(mu);
}

template <typename T>
Tensor<T> mu_law(const Tensor<T>& x, double mu) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(mu_law(static_cast<double>(x[i]), mu));
  return out;
}

template <typename T>
std::array<Tensor<T>, 3> build_batch_input(const std::vector<const SampleTriplet*>& batch, double gamma) {
  if (batch.empty()) throw Error("build_input: empty batch");
  const std::size_t h = batch.front()->height(), w = batch.front()->width();
  std::array<Tensor<T>, 3> out;
  for (auto& t : out) t = Tensor<T>(Shape{batch.size(), h, w, 6});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = *batch[b];
    validate(s);
    if (s.height() != h || s.width() != w) {
      throw ShapeError("build_input: sample " + s.id + " is " + std::to_string(s.height()) + "x" +
                       std::to_string(s.width()) + ", batch expects " + std::to_string(h) + "x" + std::to_string(w));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      const auto& ldr = s.ldr[i].pixels;
      const auto hdr = gamma_correct(s.ldr[i], gamma);
      T* dst = out[i].ptr() + b * h * w * 6;
      for (std::size_t p = 0; p < h * w; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
          dst[p * 6 + c] = static_cast<T>(ldr[p * 3 + c]);
          dst[p * 6 + 3 + c] = static_cast<T>(hdr[p * 3 + c]);
        }
      }
    }
  }
  return out;
}

template <typename T>
std::array<Tensor<T>, 3> build_input(const SampleTriplet& s, double gamma) {
  return build_batch_input<T>({&s}, gamma);
}

template <typename T>
Tensor<T> stack_ground_truth(const std::vector<const SampleTriplet*>& batch) {
  if (batch.empty()) throw Error("stack_ground_truth: empty batch");
  const std::size_t h = batch.front()->height(), w = batch.front()->width();
  Tensor<T> out(Shape{batch.size(), h, w, 3});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (!batch[b]->ground_truth) throw Error("sample " + batch[b]->id + " has no ground truth");
    const auto& gt = batch[b]->ground_truth->pixels;
    if (!(gt.shape() == Shape{h, w, 3})) throw ShapeError("stack_ground_truth: size mismatch in " + batch[b]->id);
    std::transform(gt.ptr(), gt.ptr() + gt.size(), out.ptr() + b * gt.size(), [](float v) { return T(v); });
  }
  return out;
}

template Tensor<float> mu_law(const Tensor<float>&, double);
template Tensor<double> mu_law(const Tensor<double>&, double);
template std::array<Tensor<float>, 3> build_input(const SampleTriplet&, double);
template std::array<Tensor<double>, 3> build_input(const SampleTriplet&, double);
template std::array<Tensor<float>, 3> build_batch_input(const std::vector<const SampleTriplet*>&, double);
template std::array<Tensor<double>, 3> build_batch_input(const std::vector<const SampleTriplet*>&, double);
template Tensor<float> stack_ground_truth(const std::vector<const SampleTriplet*>&);
template Tensor<double> stack_ground_truth(const std::vector<const SampleTriplet*>&);

// --- header scanning ----------------------------------------------------------

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::string token(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_])) && bytes_[pos_] != '#') {
      ++pos_;
    }
    if (pos_ == start) throw FormatError(std::string("missing ") + what, start);
    return std::string(bytes_.substr(start, pos_ - start));
  }

  std::size_t positive_int(const char* what) {
    const std::size_t start = pos_;
    const std::string t = token(what);
    if (!std::all_of(t.begin(), t.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
      throw FormatError(std::string("invalid ") + what + " '" + t + "'", start);
    }
    const unsigned long long v = std::stoull(t);
    if (v == 0) throw FormatError(std::string(what) + " must be positive", start);
    return static_cast<std::size_t>(v);
  }

  // Exactly one whitespace byte separates the header from the payload.
  void end_of_header() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      throw FormatError("expected whitespace before payload", pos_);
    }
    ++pos_;
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

void require_rgb(const Tensor<float>& pixels, const char* what) {
  if (pixels.rank() != 3 || pixels.dim(2) != 3) {
    throw ShapeError(std::string(what) + ": expected H×W×3 pixels, got " + pixels.shape().str());
  }
}

}  // namespace

// --- PPM ------------------------------------------------------------------------

Tensor<float> decode_ppm(std::string_view bytes) {
  HeaderReader r(bytes);
  const std::string magic = r.token("magic");
  if (magic != "P6") throw FormatError("not a binary PPM (magic '" + magic + "')", 0);
  const std::size_t width = r.positive_int("width");
  const std::size_t height = r.positive_int("height");
  const std::size_t maxval_at = r.offset();
  const std::size_t maxval = r.positive_int("maxval");
  if (maxval > 65535) throw FormatError("maxval " + std::to_string(maxval) + " exceeds 65535", maxval_at);
  r.end_of_header();
  const std::size_t sample_bytes = maxval < 256 ? 1 : 2;
  const std::size_t start = r.offset();
  const std::size_t needed = width * height * 3 * sample_bytes;
  if (bytes.size() - start < needed) {
    throw FormatError("truncated payload: need " + std::to_string(needed) + " bytes, have " +
                          std::to_string(bytes.size() - start),
                      bytes.size());
  }
  Tensor<float> out(Shape{height, width, 3});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + start);
  const double scale = 1.0 / static_cast<double>(maxval);
  for (std::size_t i = 0; i < out.size(); ++i) {
    unsigned v = sample_bytes == 1 ? p[i] : (unsigned(p[2 * i]) << 8) | p[2 * i + 1];
    if (v > maxval) throw FormatError("sample exceeds maxval", start + i * sample_bytes);
    out[i] = static_cast<float>(v * scale);
  }
  return out;
}

std::string encode_ppm(const Tensor<float>& pixels, unsigned maxval) {
  require_rgb(pixels, "encode_ppm");
  if (maxval != 255 && maxval != 65535) throw Error("encode_ppm: maxval must be 255 or 65535");
  std::string out = "P6\n" + std::to_string(pixels.dim(1)) + " " + std::to_string(pixels.dim(0)) + "\n" +
                    std::to_string(maxval) + "\n";
  const std::size_t header = out.size();
  const std::size_t sample_bytes = maxval == 255 ? 1 : 2;
  out.resize(header + pixels.size() * sample_bytes);
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const double x = std::clamp(static_cast<double>(pixels[i]), 0.0, 1.0);
    const auto q = static_cast<unsigned>(std::floor(x * maxval + 0.5));
    if (sample_bytes == 1) {
      out[header + i] = static_cast<char>(q);
    } else {
      out[header + 2 * i] = static_cast<char>(q >> 8);
      out[header + 2 * i + 1] = static_cast<char>(q & 0xff);
    }
  }
  return out;
}

Tensor<float> read_ppm(const fs::path& path) {
  try {
    return decode_ppm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_ppm(const fs::path& path, const Tensor<float>& pixels, unsigned maxval) {
  write_file(path, encode_ppm(pixels, maxval));
}

// --- PFM ------------------------------------------------------------------------

HdrImage decode_pfm(std::string_view bytes) {
  HeaderReader r(bytes);
  const std::string magic = r.token("magic");
  if (magic == "Pf") throw FormatError("grayscale PFM (Pf) is not supported", 0);
  if (magic != "PF") throw FormatError("not a colour PFM (magic '" + magic + "')", 0);
  const std::size_t width = r.positive_int("width");
  const std::size_t height = r.positive_int("height");
  const std::size_t scale_at = r.offset();
  const std::string scale_text = r.token("scale");
  double scale = 0;
  try {
    std::size_t used = 0;
    scale = std::stod(scale_text, &used);
    if (used != scale_text.size()) throw std::invalid_argument("trailing");
  } catch (const std::exception&) {
    throw FormatError("invalid scale '" + scale_text + "'", scale_at);
  }
  if (scale == 0 || !std::isfinite(scale)) throw FormatError("scale must be finite and non-zero", scale_at);
  r.end_of_header();
  const bool little = scale < 0;
  const std::size_t start = r.offset();
  const std::size_t needed = width * height * 3 * 4;
  const std::size_t have = bytes.size() - start;
  if (have != needed) {
    throw FormatError("payload length " + std::to_string(have) + " does not match declared " +
                          std::to_string(needed) + " bytes",
                      start);
  }
  const bool swap = little != (std::endian::native == std::endian::little);
  HdrImage img{Tensor<float>(Shape{height, width, 3})};
  for (std::size_t row = 0; row < height; ++row) {
    const std::size_t y = height - 1 - row;
    for (std::size_t i = 0; i < width * 3; ++i) {
      const std::size_t at = start + (row * width * 3 + i) * 4;
      std::uint32_t bits;
      std::memcpy(&bits, bytes.data() + at, 4);
      if (swap) bits = __builtin_bswap32(bits);
      const float v = std::bit_cast<float>(bits);
      if (!std::isfinite(v)) throw FormatError("non-finite radiance", at);
      img.pixels[y * width * 3 + i] = v;
    }
  }
  return img;
}

std::string encode_pfm(const HdrImage& img) {
  require_rgb(img.pixels, "encode_pfm");
  const std::size_t h = img.height(), w = img.width();
  std::string out = "PF\n" + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + h * w * 3 * 4);
  const bool swap = std::endian::native != std::endian::little;
  for (std::size_t row = 0; row < h; ++row) {
    const std::size_t y = h - 1 - row;
    for (std::size_t i = 0; i < w * 3; ++i) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(img.pixels[y * w * 3 + i]);
      if (swap) bits = __builtin_bswap32(bits);
      std::memcpy(out.data() + header + (row * w * 3 + i) * 4, &bits, 4);
    }
  }
  return out;
}

HdrImage read_pfm(const fs::path& path) {
  try {
    return decode_pfm(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_pfm(const fs::path& path, const HdrImage& img) { write_file(path, encode_pfm(img)); }

// --- dataset --------------------------------------------------------------------

double normalize_radiance(Tensor<float>& pixels) {
  std::vector<float> sorted(pixels.data().begin(), pixels.data().end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(0.999 * static_cast<double>(sorted.size()))) - 1;
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(rank), sorted.end());
  double scale = sorted[rank];
  if (!(scale > 0)) scale = 1.0;
  const float s = static_cast<float>(scale);
  for (auto& v : pixels.data()) v = std::clamp(v / s, 0.0f, 1.0f);
  return scale;
}

std::array<double, 3> parse_exposures(std::string_view text) {
  std::string clean(text);
  // Accept the typographic minus sign as well as '-'.
  for (std::size_t at; (at = clean.find("\xE2\x88\x92")) != std::string::npos;) clean.replace(at, 3, "-");
  std::istringstream in(clean);
  std::vector<double> values;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    const std::string tok = line.substr(first, last - first + 1);
    try {
      std::size_t used = 0;
      values.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw IoError("exposures.txt line " + std::to_string(line_no) + ": invalid value '" + tok + "'");
    }
  }
  if (values.size() != 3) {
    throw IoError("exposures.txt must hold 3 exposure values, found " + std::to_string(values.size()));
  }
  for (std::size_t i = 1; i < 3; ++i) {
    if (!(values[i - 1] < values[i])) throw IoError("exposures.txt values must be strictly increasing");
  }
  return {values[0], values[1], values[2]};
}

SampleTriplet load_sample(const fs::path& dir) {
  SampleTriplet s;
  s.id = dir.filename().string();
  for (std::size_t i = 0; i < 3; ++i) {
    const fs::path p = dir / ("ldr_" + std::to_string(i) + ".ppm");
    if (!fs::exists(p)) throw IoError("sample " + s.id + ": missing " + p.filename().string());
  }
  const fs::path exp_path = dir / "exposures.txt";
  if (!fs::exists(exp_path)) throw IoError("sample " + s.id + ": missing exposures.txt");
  const auto exps = parse_exposures(read_file(exp_path));
  for (std::size_t i = 0; i < 3; ++i) {
    s.ldr[i].pixels = read_ppm(dir / ("ldr_" + std::to_string(i) + ".ppm"));
    s.ldr[i].exposure_time = std::exp2(exps[i]);
  }
  const fs::path gt = dir / "gt.pfm";
  if (fs::exists(gt)) {
    HdrImage img = read_pfm(gt);
    for (float v : img.pixels.data()) {
      if (v < 0) throw IoError("sample " + s.id + ": negative radiance in gt.pfm");
    }
    s.gt_scale = normalize_radiance(img.pixels);
    s.ground_truth = std::move(img);
  }
  validate(s);
  return s;
}

std::vector<SampleTriplet> load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw IoError("dataset root " + root.string() + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());
  std::vector<SampleTriplet> out;
  out.reserve(dirs.size());
  for (const auto& d : dirs) out.push_back(load_sample(d));
  if (out.empty()) throw IoError("dataset root " + root.string() + " holds no samples");
  return out;
}

void save_sample(const fs::path& dir, const SampleTriplet& s) {
  validate(s);
  fs::create_directories(dir);
  std::ostringstream exps;
  exps.precision(17);
  for (std::size_t i = 0; i < 3; ++i) {
    write_ppm(dir / ("ldr_" + std::to_string(i) + ".ppm"), s.ldr[i].pixels, 65535);
    exps << std::log2(s.ldr[i].exposure_time) << "\n";
  }
  write_file(dir / "exposures.txt", exps.str());
  if (s.ground_truth) write_pfm(dir / "gt.pfm", *s.ground_truth);
}

}  // namespace hdt
