#include "hdt/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>

#include <json.hpp>

#include "hdt/error.hpp"
#include "hdt/model.hpp"

namespace hdt {

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak) {
  require_same_shape(a.shape(), b.shape(), "psnr");
  if (a.size() == 0) throw ShapeError("psnr: empty images");
  // Neumaier summation keeps a constant difference image at its exact MSE.
  double se = 0, comp = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    const double term = d * d, t = se + term;
    comp += std::abs(se) >= std::abs(term) ? (se - t) + term : (term - t) + se;
    se = t;
  }
  const double mse = (se + comp) / static_cast<double>(a.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(peak / std::sqrt(mse));
}

namespace {

std::vector<double> gaussian_1d() {
  const std::size_t n = kSsimWindow;
  const double c = static_cast<double>(n / 2);
  std::vector<double> g(n);
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
    total += g[i];
  }
  for (auto& v : g) v /= total;
  return g;
}

}  // namespace

std::vector<double> ssim_gaussian_window() {
  const auto g = gaussian_1d();
  const std::size_t n = g.size();
  std::vector<double> w(n * n);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) w[y * n + x] = g[y] * g[x];
  }
  return w;
}

namespace {

template <typename T>
std::vector<double> grayscale(const Tensor<T>& img) {
  require_rank(img.shape(), 3, "ssim");
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  std::vector<double> g(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    double s = 0;
    for (std::size_t k = 0; k < c; ++k) s += static_cast<double>(img[i * c + k]);
    g[i] = s / static_cast<double>(c);
  }
  return g;
}

// Valid-position correlation with the separable Gaussian: rows first, then columns.
std::vector<double> gaussian_filter(const std::vector<double>& img, std::size_t h, std::size_t w,
                                    const std::vector<double>& g) {
  const std::size_t n = g.size(), ow = w - n + 1, oh = h - n + 1;
  std::vector<double> rows(h * ow);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += g[k] * img[y * w + x + k];
      rows[y * ow + x] = s;
    }
  }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0;
      for (std::size_t k = 0; k < n; ++k) s += g[k] * rows[(y + k) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

}  // namespace

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a.shape(), b.shape(), "ssim");
  require_rank(a.shape(), 3, "ssim");
  const std::size_t h = a.dim(0), w = a.dim(1);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ShapeError("ssim: image " + a.shape().str() + " is smaller than the 11×11 window");
  }
  const auto ga = grayscale(a), gb = grayscale(b);
  std::vector<double> aa(ga.size()), bb(ga.size()), ab(ga.size());
  for (std::size_t i = 0; i < ga.size(); ++i) {
    aa[i] = ga[i] * ga[i];
    bb[i] = gb[i] * gb[i];
    ab[i] = ga[i] * gb[i];
  }
  const auto g = gaussian_1d();
  const auto mu_a = gaussian_filter(ga, h, w, g), mu_b = gaussian_filter(gb, h, w, g);
  const auto e_aa = gaussian_filter(aa, h, w, g), e_bb = gaussian_filter(bb, h, w, g),
             e_ab = gaussian_filter(ab, h, w, g);
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;  // L = 1
  double total = 0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(mu_a.size());
}

MetricRow compare_hdr(const std::string& id, const Tensor<float>& prediction, const Tensor<float>& ground_truth,
                      double mu) {
  require_same_shape(prediction.shape(), ground_truth.shape(), "compare_hdr");
  const auto pm = mu_law(prediction.cast<double>(), mu), gm = mu_law(ground_truth.cast<double>(), mu);
  const auto pl = prediction.cast<double>(), gl = ground_truth.cast<double>();
  MetricRow r;
  r.id = id;
  r.psnr_mu = std::min(psnr(pm, gm), kPsnrCap);
  r.psnr_l = std::min(psnr(pl, gl), kPsnrCap);
  r.ssim_mu = ssim(pm, gm);
  r.ssim_l = ssim(pl, gl);
  return r;
}

MetricRow mean_row(const std::vector<MetricRow>& rows) {
  MetricRow m;
  m.id = "mean";
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.psnr_mu += r.psnr_mu;
    m.psnr_l += r.psnr_l;
    m.ssim_mu += r.ssim_mu;
    m.ssim_l += r.ssim_l;
  }
  const double n = static_cast<double>(rows.size());
  m.psnr_mu /= n;
  m.psnr_l /= n;
  m.ssim_mu /= n;
  m.ssim_l /= n;
  return m;
}

template <typename T>
EvalReport eval_report(const ParamStore<T>& params, const HdtConfig& cfg, const std::vector<SampleTriplet>& dataset,
                       double mu, double gamma) {
  EvalReport r;
  for (const auto& s : dataset) {
    if (!s.ground_truth) {
      std::cerr << "warning: sample " << s.id << " has no ground truth, skipped\n";
      r.skipped.push_back(s.id);
      continue;
    }
    const HdrImage out = fuse(params, cfg, s, gamma);
    r.rows.push_back(compare_hdr(s.id, out.pixels, s.ground_truth->pixels, mu));
  }
  r.mean = mean_row(r.rows);
  return r;
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string report_tsv(const EvalReport& r) {
  std::string out = "id\tpsnr_mu\tpsnr_l\tssim_mu\tssim_l\n";
  auto line = [&](const MetricRow& m) {
    out += m.id + "\t" + fmt(m.psnr_mu) + "\t" + fmt(m.psnr_l) + "\t" + fmt(m.ssim_mu) + "\t" + fmt(m.ssim_l) + "\n";
  };
  for (const auto& m : r.rows) line(m);
  line(r.mean);
  return out;
}

std::string report_json(const EvalReport& r) {
  auto row = [](const MetricRow& m) {
    return nlohmann::json{{"id", m.id}, {"psnr_mu", m.psnr_mu}, {"psnr_l", m.psnr_l}, {"ssim_mu", m.ssim_mu},
                          {"ssim_l", m.ssim_l}};
  };
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& m : r.rows) j["rows"].push_back(row(m));
  j["mean"] = row(r.mean);
  j["skipped"] = r.skipped;
  return j.dump(2) + "\n";
}

template double psnr(const Tensor<float>&, const Tensor<float>&, double);
template double psnr(const Tensor<double>&, const Tensor<double>&, double);
template double ssim(const Tensor<float>&, const Tensor<float>&);
template double ssim(const Tensor<double>&, const Tensor<double>&);
template EvalReport eval_report(const ParamStore<float>&, const HdtConfig&, const std::vector<SampleTriplet>&, double,
                                double);
template EvalReport eval_report(const ParamStore<double>&, const HdtConfig&, const std::vector<SampleTriplet>&, double,
                                double);

}  // namespace hdt
