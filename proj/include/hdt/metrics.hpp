#pragma once

// PSNR and SSIM in the tonemapped (μ) and linear (l) domains.

#include <limits>
#include <string>
#include <vector>

#include "hdt/config.hpp"
#include "hdt/hdr.hpp"
#include "hdt/params.hpp"
#include "hdt/tensor.hpp"

namespace hdt {

/// Reported in place of +∞ when two images are identical.
inline constexpr double kPsnrCap = 100.0;

/// 10·log10(peak² / MSE); +∞ when MSE is zero.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0);

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 11×11 Gaussian weights, row-major.
std::vector<double> ssim_gaussian_window();

/// Mean SSIM over valid window positions of the channel-mean grayscale
/// images (H×W×C, dynamic range 1).
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b);

struct MetricRow {
  std::string id;
  double psnr_mu = 0, psnr_l = 0, ssim_mu = 0, ssim_l = 0;
};

/// Metrics of a prediction against its ground truth. PSNR values are
/// capped at kPsnrCap.
MetricRow compare_hdr(const std::string& id, const Tensor<float>& prediction, const Tensor<float>& ground_truth,
                      double mu = kDefaultMu);

struct EvalReport {
  std::vector<MetricRow> rows;
  MetricRow mean;
  std::vector<std::string> skipped;  // samples without ground truth
};

/// Arithmetic mean of the rows, in row order.
MetricRow mean_row(const std::vector<MetricRow>& rows);

/// Fuses every sample that has ground truth and scores it.
template <typename T>
EvalReport eval_report(const ParamStore<T>& params, const HdtConfig& cfg, const std::vector<SampleTriplet>& dataset,
                       double mu = kDefaultMu, double gamma = kDefaultGamma);

/// Tab-separated table with a header row and a final `mean` row.
std::string report_tsv(const EvalReport& r);

/// The same fields as report_tsv as one JSON document.
std::string report_json(const EvalReport& r);

}  // namespace hdt
