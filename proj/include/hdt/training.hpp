#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "hdt/autodiff.hpp"
#include "hdt/config.hpp"
#include "hdt/hdr.hpp"
#include "hdt/params.hpp"

namespace hdt {

/// Mean |T(pred) − T(gt)| with T the μ-law tonemap.
template <typename T>
Var<T> l1_tonemapped_loss(Var<T> prediction, const Tensor<T>& ground_truth, double mu = kDefaultMu);

template <typename T>
double l1_tonemapped_loss(const Tensor<T>& prediction, const Tensor<T>& ground_truth, double mu = kDefaultMu);

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;
  std::uint64_t step = 0;
  double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  /// Zero moments shaped like params, hyperparameters from cfg.
  static AdamState init(const ParamStore<T>& params, const TrainConfig& cfg);
};

/// Bias-corrected Adam update. A null gradient counts as zero. Throws
/// NumericError naming the parameter, before touching any state, when a
/// gradient is not finite.
template <typename T>
void adam_step(ParamStore<T>& params, const std::vector<const Tensor<T>*>& grads, AdamState<T>& state);

/// Window origins {0, stride, 2·stride, ...} that fit, plus size − patch when
/// the last one leaves the border uncovered.
std::vector<std::size_t> crop_positions(std::size_t size, std::size_t patch, std::size_t stride);

/// Aligned patch×patch crops of all three LDRs and the ground truth.
std::vector<SampleTriplet> crop_patches(const SampleTriplet& s, std::size_t patch, std::size_t stride);

/// Dihedral transform of an H×W×C image: code % 4 quarter turns
/// counter-clockwise, then a horizontal flip when code ≥ 4.
Tensor<float> augment_image(const Tensor<float>& img, unsigned code);

/// augment_image applied to every image of the triplet.
SampleTriplet augment(const SampleTriplet& s, unsigned code);

/// Code c' with augment(augment(x, c), c') == x.
unsigned inverse_augment_code(unsigned code);

inline constexpr std::array<double, 3> kSyntheticExposures = {0.25, 1.0, 4.0};

/// Procedural triplets: a smooth radiance gradient plus soft blobs, exposed
/// at t = (0.25, 1, 4) as clamp((t·r)^(1/γ), 0, 1). With motion, one blob is
/// shifted by a few pixels in the non-reference frames. Ground truth is the
/// normalized reference radiance.
std::vector<SampleTriplet> synth_dataset(std::size_t n, std::uint64_t seed, std::size_t size = 64,
                                         bool motion = true, double gamma = kDefaultGamma);

/// Samples held out for validation: the last 10% by sorted id.
std::size_t validation_count(std::size_t n);

struct EpochRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss = 0;     // mean training loss over the epoch's steps
  double psnr_mu = 0;  // on the validation samples, or on all samples when none are held out
};

struct TrainOptions {
  std::filesystem::path out_dir = ".";
  std::optional<std::filesystem::path> resume;
  const std::atomic<bool>* stop = nullptr;  // checked after every step
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  std::vector<double> step_losses;  // steps run by this call
  std::vector<EpochRecord> epochs;
  std::size_t steps = 0;            // total optimizer steps, including resumed ones
  bool interrupted = false;
  std::filesystem::path checkpoint;
  std::filesystem::path log;
};

/// Seeded shuffled mini-batches of (augmented) patches; forward, loss,
/// backward and Adam per step; one JSON line per epoch in the metrics log;
/// a checkpoint every checkpoint_every epochs and on exit. A non-finite loss
/// throws NumericError and leaves the last checkpoint untouched.
TrainResult train_loop(const std::vector<SampleTriplet>& dataset, const Config& cfg, const TrainOptions& opt = {});

/// Checkpoint written by train_loop: parameters, Adam moments and progress.
template <typename T>
Checkpoint training_checkpoint(const ParamStore<T>& params, const AdamState<T>& adam, const Config& cfg,
                               std::size_t epoch, std::size_t batch_in_epoch, double epoch_loss_sum);

}  // namespace hdt
