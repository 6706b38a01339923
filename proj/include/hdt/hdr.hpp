#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "hdt/tensor.hpp"

namespace hdt {

inline constexpr double kDefaultGamma = 2.2;
inline constexpr double kDefaultMu = 5000.0;

/// Low dynamic range exposure: H×W×3 pixels in [0, 1] and the exposure
/// time in seconds.
struct LdrImage {
  Tensor<float> pixels;
  double exposure_time = 1.0;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
};

/// Linear radiance, H×W×3, non-negative and finite.
struct HdrImage {
  Tensor<float> pixels;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
};

/// Short, medium and long exposure of one scene. The medium exposure is the
/// reference frame.
struct SampleTriplet {
  std::string id;
  std::array<LdrImage, 3> ldr;
  std::optional<HdrImage> ground_truth;
  /// Radiance divided out of the ground truth at load time.
  double gt_scale = 1.0;

  std::size_t height() const { return ldr[0].height(); }
  std::size_t width() const { return ldr[0].width(); }
};

/// Throws unless exposures are strictly increasing and positive, all images
/// share one H×W×3 shape and LDR pixels lie in [0, 1].
void validate(const SampleTriplet& s);

/// value^gamma / exposure_time.
double gamma_correct(double value, double exposure_time, double gamma = kDefaultGamma);

/// Maps an LDR exposure to HDR space, pixel by pixel.
Tensor<float> gamma_correct(const LdrImage& img, double gamma = kDefaultGamma);

/// log(1 + mu·x) / log(1 + mu) with x clamped to [0, 1].
double mu_law(double x, double mu = kDefaultMu);

template <typename T>
Tensor<T> mu_law(const Tensor<T>& x, double mu = kDefaultMu);

/// One 1×H×W×6 tensor per exposure with channels [LDR RGB, gamma-corrected RGB].
template <typename T>
std::array<Tensor<T>, 3> build_input(const SampleTriplet& s, double gamma = kDefaultGamma);

/// Stacks the ground truth of several samples into B×H×W×3.
template <typename T>
Tensor<T> stack_ground_truth(const std::vector<const SampleTriplet*>& batch);

/// Batched variant of build_input: three B×H×W×6 tensors.
template <typename T>
std::array<Tensor<T>, 3> build_batch_input(const std::vector<const SampleTriplet*>& batch,
                                           double gamma = kDefaultGamma);

// --- codecs -----------------------------------------------------------------

/// Binary P6 decoder; samples are divided by maxval.
Tensor<float> decode_ppm(std::string_view bytes);

/// Binary P6 encoder with maxval 255 or 65535 (big-endian 16-bit), rounding
/// half up after clamping to [0, 1].
std::string encode_ppm(const Tensor<float>& pixels, unsigned maxval = 255);

Tensor<float> read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor<float>& pixels, unsigned maxval = 255);

/// Colour PFM decoder. A negative scale marks little-endian payloads; rows
/// are stored bottom-up.
HdrImage decode_pfm(std::string_view bytes);

/// Colour PFM encoder, little-endian.
std::string encode_pfm(const HdrImage& img);

HdrImage read_pfm(const std::filesystem::path& path);
void write_pfm(const std::filesystem::path& path, const HdrImage& img);

// --- dataset ----------------------------------------------------------------

/// Divides radiance by its 99.9th-percentile value and clamps to [0, 1].
/// Returns the divisor. Applying it twice leaves the image unchanged.
double normalize_radiance(Tensor<float>& pixels);

/// Reads `<dir>/{ldr_0.ppm, ldr_1.ppm, ldr_2.ppm, exposures.txt[, gt.pfm]}`.
SampleTriplet load_sample(const std::filesystem::path& dir);

/// Every sample directory under root, sorted by directory name.
std::vector<SampleTriplet> load_dataset(const std::filesystem::path& root);

/// Writes a sample in the layout read by load_sample. LDRs use 16-bit PPM.
void save_sample(const std::filesystem::path& dir, const SampleTriplet& s);

/// Parses exposures.txt content: three base-2 exposure values, one per line.
std::array<double, 3> parse_exposures(std::string_view text);

}  // namespace hdt
