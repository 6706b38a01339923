#include "hdt/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <random>

#include <json.hpp>

#include "hdt/error.hpp"
#include "hdt/metrics.hpp"
#include "hdt/model.hpp"

namespace fs = std::filesystem;

namespace hdt {

template <typename T>
Var<T> l1_tonemapped_loss(Var<T> prediction, const Tensor<T>& ground_truth, double mu) {
  require_same_shape(prediction.shape(), ground_truth.shape(), "l1_tonemapped_loss");
  return ad::mean_abs_diff(ad::mu_law(prediction, static_cast<T>(mu)), mu_law(ground_truth, mu));
}

template <typename T>
double l1_tonemapped_loss(const Tensor<T>& prediction, const Tensor<T>& ground_truth, double mu) {
  require_same_shape(prediction.shape(), ground_truth.shape(), "l1_tonemapped_loss");
  const auto a = mu_law(prediction, mu), b = mu_law(ground_truth, mu);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return s / static_cast<double>(a.size());
}

// --- Adam ---------------------------------------------------------------------

template <typename T>
AdamState<T> AdamState<T>::init(const ParamStore<T>& params, const TrainConfig& cfg) {
  AdamState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.emplace_back(params.value(i).shape());
    s.v.emplace_back(params.value(i).shape());
  }
  s.lr = cfg.lr;
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.eps = cfg.adam_eps;
  return s;
}

template <typename T>
void adam_step(ParamStore<T>& params, const std::vector<const Tensor<T>*>& grads, AdamState<T>& state) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("adam_step: parameter, gradient and moment counts differ");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i]) continue;
    require_same_shape(grads[i]->shape(), params.value(i).shape(), "adam_step");
    const auto& g = *grads[i];
    for (std::size_t j = 0; j < g.size(); ++j) {
      if (!std::isfinite(static_cast<double>(g[j]))) {
        throw NumericError("non-finite gradient for parameter " + params.name(i) + " at element " +
                           std::to_string(j) + " (step " + std::to_string(state.step + 1) + ")");
      }
    }
  }
  state.step += 1;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params.value(i).data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i] ? static_cast<double>((*grads[i])[j]) : 0.0;
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = state.lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps);
      p[j] = static_cast<T>(static_cast<double>(p[j]) - update);
    }
  }
}

// --- patches and augmentation ----------------------------------------------------

std::vector<std::size_t> crop_positions(std::size_t size, std::size_t patch, std::size_t stride) {
  if (patch == 0 || stride == 0) throw ConfigError("patch and stride must be positive");
  if (size < patch) {
    throw ShapeError("image side " + std::to_string(size) + " is smaller than patch " + std::to_string(patch));
  }
  std::vector<std::size_t> pos;
  for (std::size_t p = 0; p + patch <= size; p += stride) pos.push_back(p);
  if (pos.back() + patch < size) pos.push_back(size - patch);
  return pos;
}

namespace {

Tensor<float> crop_image(const Tensor<float>& img, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  const std::size_t width = img.dim(1), c = img.dim(2);
  Tensor<float> out(Shape{h, w, c});
  for (std::size_t y = 0; y < h; ++y) {
    const float* src = img.ptr() + ((y0 + y) * width + x0) * c;
    std::copy(src, src + w * c, out.ptr() + y * w * c);
  }
  return out;
}

}  // namespace

std::vector<SampleTriplet> crop_patches(const SampleTriplet& s, std::size_t patch, std::size_t stride) {
  const auto ys = crop_positions(s.height(), patch, stride);
  const auto xs = crop_positions(s.width(), patch, stride);
  std::vector<SampleTriplet> out;
  for (const auto y : ys) {
    for (const auto x : xs) {
      SampleTriplet p;
      p.id = s.id + "@" + std::to_string(y) + "," + std::to_string(x);
      for (std::size_t i = 0; i < 3; ++i) {
        p.ldr[i].pixels = crop_image(s.ldr[i].pixels, y, x, patch, patch);
        p.ldr[i].exposure_time = s.ldr[i].exposure_time;
      }
      if (s.ground_truth) p.ground_truth = HdrImage{crop_image(s.ground_truth->pixels, y, x, patch, patch)};
      p.gt_scale = s.gt_scale;
      out.push_back(std::move(p));
    }
  }
  return out;
}

Tensor<float> augment_image(const Tensor<float>& img, unsigned code) {
  if (code > 7) throw Error("augment code must be in 0..7");
  require_rank(img.shape(), 3, "augment");
  const unsigned rot = code % 4;
  const bool flip = code >= 4;
  const std::size_t h = img.dim(0), w = img.dim(1), c = img.dim(2);
  if (rot % 2 == 1 && h != w) {
    throw ShapeError("augment: quarter-turn rotation needs a square patch, got " + img.shape().str());
  }
  const std::size_t oh = rot % 2 ? w : h, ow = rot % 2 ? h : w;
  Tensor<float> out(Shape{oh, ow, c});
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      const std::size_t xr = flip ? ow - 1 - x : x;  // flip is applied after the rotation
      std::size_t sy = 0, sx = 0;
      switch (rot) {
        case 0: sy = y; sx = xr; break;
        case 1: sy = xr; sx = w - 1 - y; break;
        case 2: sy = h - 1 - y; sx = w - 1 - xr; break;
        default: sy = h - 1 - xr; sx = y; break;
      }
      const float* src = img.ptr() + (sy * w + sx) * c;
      std::copy(src, src + c, out.ptr() + (y * ow + x) * c);
    }
  }
  return out;
}

SampleTriplet augment(const SampleTriplet& s, unsigned code) {
  SampleTriplet out = s;
  for (auto& l : out.ldr) l.pixels = augment_image(l.pixels, code);
  if (out.ground_truth) out.ground_truth->pixels = augment_image(out.ground_truth->pixels, code);
  return out;
}

unsigned inverse_augment_code(unsigned code) {
  if (code > 7) throw Error("augment code must be in 0..7");
  return code >= 4 ? code : (4 - code) % 4;
}

// --- synthetic data ---------------------------------------------------------------

namespace {

struct Blob {
  double cy, cx, sigma, amplitude;
  std::array<double, 3> tint;
};

Tensor<double> render_radiance(std::size_t size, double base, double gy, double gx, const std::array<double, 3>& tint,
                               const std::vector<Blob>& blobs) {
  Tensor<double> r(Shape{size, size, 3});
  const double n = static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double fy = static_cast<double>(y) / n, fx = static_cast<double>(x) / n;
      const double ramp = std::max(0.02, base + gy * fy + gx * fx);
      for (std::size_t c = 0; c < 3; ++c) {
        double v = ramp * tint[c];
        for (const auto& b : blobs) {
          const double dy = static_cast<double>(y) - b.cy, dx = static_cast<double>(x) - b.cx;
          v += b.amplitude * b.tint[c] * std::exp(-(dy * dy + dx * dx) / (2 * b.sigma * b.sigma));
        }
        r[(y * size + x) * 3 + c] = v;
      }
    }
  }
  return r;
}

Tensor<float> expose(const Tensor<double>& radiance, double t, double gamma) {
  Tensor<float> out(radiance.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<float>(std::clamp(std::pow(t * radiance[i], 1.0 / gamma), 0.0, 1.0));
  }
  return out;
}

}  // namespace

std::vector<SampleTriplet> synth_dataset(std::size_t n, std::uint64_t seed, std::size_t size, bool motion,
                                         double gamma) {
  if (n < 1) throw ConfigError("synthetic dataset size must be >= 1");
  if (size < 1) throw ConfigError("synthetic image size must be >= 1");
  std::vector<SampleTriplet> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
    const double s = static_cast<double>(size);

    const double base = uni(0.05, 0.3), gy = uni(-0.2, 0.4), gx = uni(-0.2, 0.4);
    const std::array<double, 3> tint{uni(0.7, 1.0), uni(0.7, 1.0), uni(0.7, 1.0)};
    std::vector<Blob> blobs(3);
    for (auto& b : blobs) {
      b.cy = uni(0, s);
      b.cx = uni(0, s);
      b.sigma = uni(s / 10, s / 5);
      b.amplitude = uni(0.3, 2.5);
      b.tint = {uni(0.6, 1.0), uni(0.6, 1.0), uni(0.6, 1.0)};
    }
    const double my = std::round(uni(-3, 3)), mx = std::round(uni(-3, 3));

    const auto reference = render_radiance(size, base, gy, gx, tint, blobs);
    SampleTriplet t;
    char id[32];
    std::snprintf(id, sizeof id, "synth_%04zu", i);
    t.id = id;
    for (std::size_t k = 0; k < 3; ++k) {
      t.ldr[k].exposure_time = kSyntheticExposures[k];
      if (motion && k != 1) {
        auto moved = blobs;
        const double dir = k == 0 ? 1.0 : -1.0;
        moved[0].cy += dir * my;
        moved[0].cx += dir * mx;
        t.ldr[k].pixels = expose(render_radiance(size, base, gy, gx, tint, moved), kSyntheticExposures[k], gamma);
      } else {
        t.ldr[k].pixels = expose(reference, kSyntheticExposures[k], gamma);
      }
    }
    HdrImage gt{reference.cast<float>()};
    t.gt_scale = normalize_radiance(gt.pixels);
    t.ground_truth = std::move(gt);
    out.push_back(std::move(t));
  }
  return out;
}

std::size_t validation_count(std::size_t n) { return n / 10; }

// --- training loop ----------------------------------------------------------------

template <typename T>
Checkpoint training_checkpoint(const ParamStore<T>& params, const AdamState<T>& adam, const Config& cfg,
                               std::size_t epoch, std::size_t batch_in_epoch, double epoch_loss_sum) {
  Checkpoint ck;
  store_model_config(ck, cfg.model);
  ck.metadata["precision"] = std::is_same_v<T, double> ? "f64" : "f32";
  ck.metadata["train.seed"] = std::to_string(cfg.train.seed);
  ck.metadata["train.epoch"] = std::to_string(epoch);
  ck.metadata["train.batch"] = std::to_string(batch_in_epoch);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", epoch_loss_sum);
  ck.metadata["train.epoch_loss_sum"] = buf;
  ck.metadata["adam.step"] = std::to_string(adam.step);
  store_params(ck, params);
  ParamStore<T> m, v;
  for (std::size_t i = 0; i < params.size(); ++i) {
    m.add(params.name(i), adam.m[i]);
    v.add(params.name(i), adam.v[i]);
  }
  store_params(ck, m, "adam.m.");
  store_params(ck, v, "adam.v.");
  return ck;
}

namespace {

std::size_t metadata_size(const Checkpoint& ck, const std::string& key) {
  auto it = ck.metadata.find(key);
  if (it == ck.metadata.end()) throw ConfigError("checkpoint is missing training field " + key);
  try {
    return static_cast<std::size_t>(std::stoull(it->second));
  } catch (const std::exception&) {
    throw ConfigError("checkpoint field " + key + " is not an integer: " + it->second);
  }
}

struct EpochPlan {
  std::vector<std::size_t> order;
  std::vector<unsigned> codes;
};

EpochPlan plan_epoch(std::uint64_t seed, std::size_t epoch, std::size_t count, bool augment) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  EpochPlan p;
  p.order.resize(count);
  for (std::size_t i = 0; i < count; ++i) p.order[i] = i;
  std::shuffle(p.order.begin(), p.order.end(), rng);
  p.codes.assign(count, 0);
  if (augment) {
    std::uniform_int_distribution<unsigned> code(0, 7);
    for (auto& c : p.codes) c = code(rng);
  }
  return p;
}

fs::path resolve(const fs::path& dir, const std::string& file) {
  const fs::path p(file);
  return p.is_absolute() ? p : dir / p;
}

template <typename T>
double mean_psnr_mu(const ParamStore<T>& params, const Config& cfg, const std::vector<const SampleTriplet*>& samples) {
  double total = 0;
  for (const auto* s : samples) {
    const auto out = fuse(params, cfg.model, *s, cfg.train.gamma);
    const auto a = mu_law(out.pixels, cfg.train.mu), b = mu_law(s->ground_truth->pixels, cfg.train.mu);
    total += std::min(psnr(a, b), kPsnrCap);
  }
  return total / static_cast<double>(samples.size());
}

template <typename T>
TrainResult train_impl(const std::vector<SampleTriplet>& dataset, const Config& cfg, const TrainOptions& opt) {
  cfg.model.validate();
  cfg.train.validate(cfg.model);
  const auto& tc = cfg.train;
  if (dataset.empty()) throw IoError("training dataset is empty");

  std::vector<const SampleTriplet*> sorted;
  for (const auto& s : dataset) {
    if (!s.ground_truth) throw IoError("training sample " + s.id + " has no ground truth");
    sorted.push_back(&s);
  }
  std::stable_sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
  const std::size_t n_val = validation_count(sorted.size());
  const std::vector<const SampleTriplet*> train_set(sorted.begin(), sorted.end() - static_cast<long>(n_val));
  const std::vector<const SampleTriplet*> val_set =
      n_val ? std::vector<const SampleTriplet*>(sorted.end() - static_cast<long>(n_val), sorted.end()) : sorted;

  std::vector<SampleTriplet> patches;
  for (const auto* s : train_set) {
    for (auto& p : crop_patches(*s, tc.patch, tc.stride)) {
      patches.push_back(std::move(p));
    }
  }
  const std::size_t per_epoch = (patches.size() + tc.batch_size - 1) / tc.batch_size;

  ParamStore<T> params;
  AdamState<T> adam;
  std::size_t start_epoch = 0, start_batch = 0;
  double epoch_loss_sum = 0;
  if (opt.resume) {
    const Checkpoint ck = load_checkpoint(*opt.resume);
    if (checkpoint_model_config(ck) != cfg.model) {
      throw ConfigError("resume checkpoint model differs from the configured model");
    }
    params = load_params<T>(ck, cfg.model);
    adam = AdamState<T>::init(params, tc);
    const auto m = load_params<T>(ck, cfg.model, "adam.m."), v = load_params<T>(ck, cfg.model, "adam.v.");
    for (std::size_t i = 0; i < params.size(); ++i) {
      adam.m[i] = m.value(i);
      adam.v[i] = v.value(i);
    }
    adam.step = metadata_size(ck, "adam.step");
    start_epoch = metadata_size(ck, "train.epoch");
    start_batch = metadata_size(ck, "train.batch");
    epoch_loss_sum = std::strtod(ck.metadata.at("train.epoch_loss_sum").c_str(), nullptr);
  } else {
    params = init_params<T>(cfg.model, tc.seed);
    adam = AdamState<T>::init(params, tc);
  }

  fs::create_directories(opt.out_dir);
  TrainResult result;
  result.checkpoint = resolve(opt.out_dir, tc.checkpoint_path);
  result.log = resolve(opt.out_dir, tc.log_path);
  std::ofstream log(result.log, opt.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open metrics log " + result.log.string());

  auto save = [&](std::size_t epoch, std::size_t batch, double sum) {
    save_checkpoint(result.checkpoint, training_checkpoint(params, adam, cfg, epoch, batch, sum));
  };
  auto cap_reached = [&] { return tc.max_steps != 0 && adam.step >= tc.max_steps; };

  for (std::size_t epoch = start_epoch; epoch < tc.epochs; ++epoch) {
    const EpochPlan plan = plan_epoch(tc.seed, epoch, patches.size(), tc.augment);
    for (std::size_t b = epoch == start_epoch ? start_batch : 0; b < per_epoch; ++b) {
      if (cap_reached()) {
        save(epoch, b, epoch_loss_sum);
        result.steps = adam.step;
        return result;
      }
      std::vector<SampleTriplet> batch;
      for (std::size_t k = b * tc.batch_size; k < std::min(patches.size(), (b + 1) * tc.batch_size); ++k) {
        const auto& p = patches[plan.order[k]];
        batch.push_back(plan.codes[k] ? augment(p, plan.codes[k]) : p);
      }
      std::vector<const SampleTriplet*> ptrs;
      for (const auto& s : batch) ptrs.push_back(&s);

      Tape<T> tape;
      BoundParams<T> bound(tape, params, true);
      auto in = build_batch_input<T>(ptrs, tc.gamma);
      const std::array<Var<T>, 3> vars{tape.constant(std::move(in[0])), tape.constant(std::move(in[1])),
                                       tape.constant(std::move(in[2]))};
      const Var<T> loss = l1_tonemapped_loss(model_forward(bound, cfg.model, vars), stack_ground_truth<T>(ptrs), tc.mu);
      const double lv = static_cast<double>(loss.value().item());
      if (!std::isfinite(lv)) {
        throw NumericError("non-finite loss at step " + std::to_string(adam.step + 1) + "; last checkpoint kept at " +
                           result.checkpoint.string());
      }
      tape.backward(loss);
      std::vector<const Tensor<T>*> grads(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) grads[i] = tape.grad(bound.at(i));
      adam_step(params, grads, adam);
      epoch_loss_sum += lv;
      result.step_losses.push_back(lv);

      if (opt.stop && opt.stop->load()) {
        save(epoch, b + 1, epoch_loss_sum);
        result.steps = adam.step;
        result.interrupted = true;
        return result;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.step = adam.step;
    rec.loss = epoch_loss_sum / static_cast<double>(per_epoch);
    rec.psnr_mu = mean_psnr_mu(params, cfg, val_set);
    epoch_loss_sum = 0;
    log << nlohmann::json{{"epoch", rec.epoch}, {"step", rec.step}, {"loss", rec.loss}, {"psnr_mu", rec.psnr_mu}}.dump()
        << "\n";
    log.flush();
    result.epochs.push_back(rec);
    if (opt.on_epoch) opt.on_epoch(rec);
    if ((epoch + 1) % tc.checkpoint_every == 0 || epoch + 1 == tc.epochs) save(epoch + 1, 0, 0.0);
  }
  result.steps = adam.step;
  return result;
}

}  // namespace

TrainResult train_loop(const std::vector<SampleTriplet>& dataset, const Config& cfg, const TrainOptions& opt) {
  return cfg.train.precision == Precision::f64 ? train_impl<double>(dataset, cfg, opt)
                                               : train_impl<float>(dataset, cfg, opt);
}

template Var<float> l1_tonemapped_loss(Var<float>, const Tensor<float>&, double);
template Var<double> l1_tonemapped_loss(Var<double>, const Tensor<double>&, double);
template double l1_tonemapped_loss(const Tensor<float>&, const Tensor<float>&, double);
template double l1_tonemapped_loss(const Tensor<double>&, const Tensor<double>&, double);
template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(ParamStore<float>&, const std::vector<const Tensor<float>*>&, AdamState<float>&);
template void adam_step(ParamStore<double>&, const std::vector<const Tensor<double>*>&, AdamState<double>&);
template Checkpoint training_checkpoint(const ParamStore<float>&, const AdamState<float>&, const Config&, std::size_t,
                                        std::size_t, double);
template Checkpoint training_checkpoint(const ParamStore<double>&, const AdamState<double>&, const Config&,
                                        std::size_t, std::size_t, double);

}  // namespace hdt
