#include "hdt/autodiff.hpp"

#include <cmath>
#include <string>

namespace hdt::ad {

namespace k = hdt::kernels;

namespace {

template <typename T>
void add_into(Tensor<T>* dst, const Tensor<T>& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

template <typename T>
Tape<T>& tape_of(Var<T> a) {
  if (!a.tape) throw Error("operation on a detached variable");
  return *a.tape;
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw Error("operands recorded on different tapes");
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, const Conv2dOptions& opt) {
  auto& t = tape_of(x);
  same_tape(x, w);
  same_tape(x, b);
  auto y = k::conv2d(x.value(), w.value(), b.value(), opt);
  return t.record(std::move(y), {x, w, b}, [x, w, b, opt](Tape<T>& tp, const Tensor<T>& g) {
    k::conv2d_backward(tp.value(x.id), tp.value(w.id), opt, g, tp.grad_buffer(x.id), tp.grad_buffer(w.id),
                       tp.grad_buffer(b.id));
  });
}

template <typename T>
Var<T> deformable_conv2d(Var<T> x, Var<T> w, Var<T> b, Var<T> offsets) {
  auto& t = tape_of(x);
  same_tape(x, w);
  same_tape(x, offsets);
  auto y = k::deformable_conv2d(x.value(), w.value(), b.value(), offsets.value());
  return t.record(std::move(y), {x, w, b, offsets}, [x, w, b, offsets](Tape<T>& tp, const Tensor<T>& g) {
    k::deformable_conv2d_backward(tp.value(x.id), tp.value(w.id), tp.value(offsets.id), g, tp.grad_buffer(x.id),
                                  tp.grad_buffer(w.id), tp.grad_buffer(b.id), tp.grad_buffer(offsets.id));
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  auto& t = tape_of(x);
  Tensor<T> mu, rs;
  auto y = k::layer_norm(x.value(), gamma.value(), beta.value(), eps, &mu, &rs);
  return t.record(std::move(y), {x, gamma, beta},
                  [x, gamma, beta, mu = std::move(mu), rs = std::move(rs)](Tape<T>& tp, const Tensor<T>& g) {
                    k::layer_norm_backward(tp.value(x.id), tp.value(gamma.id), mu, rs, g, tp.grad_buffer(x.id),
                                           tp.grad_buffer(gamma.id), tp.grad_buffer(beta.id));
                  });
}

template <typename T>
Var<T> softmax(Var<T> x) {
  auto& t = tape_of(x);
  auto y = k::softmax(x.value());
  const std::size_t out_id = t.size();
  return t.record(std::move(y), {x}, [x, out_id](Tape<T>& tp, const Tensor<T>& g) {
    if (auto* gx = tp.grad_buffer(x.id)) k::softmax_backward(tp.value(out_id), g, gx);
  });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  auto& t = tape_of(x);
  auto y = k::linear(x.value(), w.value(), b.value());
  return t.record(std::move(y), {x, w, b}, [x, w, b](Tape<T>& tp, const Tensor<T>& g) {
    k::linear_backward(tp.value(x.id), tp.value(w.id), g, tp.grad_buffer(x.id), tp.grad_buffer(w.id),
                       tp.grad_buffer(b.id));
  });
}

template <typename T>
Var<T> batched_matmul(Var<T> a, Var<T> b, bool transpose_b) {
  auto& t = tape_of(a);
  same_tape(a, b);
  auto y = k::batched_matmul(a.value(), b.value(), transpose_b);
  return t.record(std::move(y), {a, b}, [a, b, transpose_b](Tape<T>& tp, const Tensor<T>& g) {
    k::batched_matmul_backward(tp.value(a.id), tp.value(b.id), transpose_b, g, tp.grad_buffer(a.id),
                               tp.grad_buffer(b.id));
  });
}

template <typename T>
Var<T> leaky_relu(Var<T> x) {
  auto& t = tape_of(x);
  auto y = k::leaky_relu(x.value());
  return t.record(std::move(y), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    const auto& xv = tp.value(x.id);
    const T slope = T(k::kLeakySlope);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += xv[i] > T(0) ? g[i] : slope * g[i];
  });
}

template <typename T>
Var<T> gelu(Var<T> x) {
  auto& t = tape_of(x);
  auto y = k::gelu(x.value());
  return t.record(std::move(y), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    const auto& xv = tp.value(x.id);
    const T inv_sqrt_2pi = T(0.5 * M_2_SQRTPI * M_SQRT1_2);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = xv[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * T(M_SQRT1_2)));
      (*gx)[i] += g[i] * (cdf + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v));
    }
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  auto& t = tape_of(x);
  auto y = k::sigmoid(x.value());
  const std::size_t out_id = t.size();
  return t.record(std::move(y), {x}, [x, out_id](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    const auto& yv = tp.value(out_id);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * yv[i] * (T(1) - yv[i]);
  });
}

template <typename T>
Var<T> global_avg_pool(Var<T> x) {
  auto& t = tape_of(x);
  auto y = k::global_avg_pool(x.value());
  return t.record(std::move(y), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    const auto& s = tp.value(x.id).shape();
    const std::size_t hw = s[1] * s[2], c = s[3];
    const T inv = T(1) / T(hw);
    for (std::size_t b = 0; b < s[0]; ++b) {
      for (std::size_t p = 0; p < hw; ++p) {
        T* dst = gx->ptr() + (b * hw + p) * c;
        for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += g[b * c + ci] * inv;
      }
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& t = tape_of(a);
  same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
  return t.record(std::move(y), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    add_into(tp.grad_buffer(a.id), g);
    add_into(tp.grad_buffer(b.id), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& t = tape_of(a);
  same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= b.value()[i];
  return t.record(std::move(y), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    add_into(tp.grad_buffer(a.id), g);
    if (auto* gb = tp.grad_buffer(b.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& t = tape_of(a);
  same_tape(a, b);
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
  return t.record(std::move(y), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
    const auto& av = tp.value(a.id);
    const auto& bv = tp.value(b.id);
    if (auto* ga = tp.grad_buffer(a.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
    }
    if (auto* gb = tp.grad_buffer(b.id)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> mul_channel(Var<T> x, Var<T> w) {
  auto& t = tape_of(x);
  same_tape(x, w);
  const auto& xs = x.shape();
  require_rank(xs, 4, "mul_channel");
  if (!(w.shape() == Shape{xs[0], xs[3]})) {
    throw ShapeError("mul_channel: gate " + w.shape().str() + " does not match channels of " + xs.str());
  }
  const std::size_t hw = xs[1] * xs[2], c = xs[3];
  Tensor<T> y = x.value();
  for (std::size_t b = 0; b < xs[0]; ++b) {
    for (std::size_t p = 0; p < hw; ++p) {
      T* row = y.ptr() + (b * hw + p) * c;
      for (std::size_t ci = 0; ci < c; ++ci) row[ci] *= w.value()[b * c + ci];
    }
  }
  return t.record(std::move(y), {x, w}, [x, w, hw, c](Tape<T>& tp, const Tensor<T>& g) {
    const auto& xv = tp.value(x.id);
    const auto& wv = tp.value(w.id);
    auto* gx = tp.grad_buffer(x.id);
    auto* gw = tp.grad_buffer(w.id);
    const std::size_t nb = xv.dim(0);
    for (std::size_t b = 0; b < nb; ++b) {
      for (std::size_t p = 0; p < hw; ++p) {
        const std::size_t base = (b * hw + p) * c;
        for (std::size_t ci = 0; ci < c; ++ci) {
          if (gx) (*gx)[base + ci] += g[base + ci] * wv[b * c + ci];
          if (gw) (*gw)[b * c + ci] += g[base + ci] * xv[base + ci];
        }
      }
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  auto& t = tape_of(x);
  Tensor<T> y = x.value();
  for (auto& v : y.data()) v *= factor;
  return t.record(std::move(y), {x}, [x, factor](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  auto& t = tape_of(parts.front());
  std::vector<const Tensor<T>*> values;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    values.push_back(&p.value());
    widths.push_back(p.shape().back());
  }
  auto y = k::concat_last(values);
  return t.record(std::move(y), parts, [parts, widths](Tape<T>& tp, const Tensor<T>& g) {
    std::size_t total = 0;
    for (auto wd : widths) total += wd;
    const std::size_t rows = g.size() / total;
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (auto* gp = tp.grad_buffer(parts[i].id)) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < widths[i]; ++c) (*gp)[r * widths[i] + c] += g[r * total + offset + c];
        }
      }
      offset += widths[i];
    }
  });
}

template <typename T>
Var<T> slice_channels(Var<T> x, std::size_t begin, std::size_t count) {
  auto& t = tape_of(x);
  auto y = k::slice_last(x.value(), begin, count);
  const std::size_t width = x.shape().back();
  return t.record(std::move(y), {x}, [x, begin, count, width](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    const std::size_t rows = g.size() / count;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < count; ++c) (*gx)[r * width + begin + c] += g[r * count + c];
    }
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  auto& t = tape_of(x);
  auto y = x.value().reshaped(std::move(shape));
  return t.record(std::move(y), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

template <typename T>
Var<T> roll(Var<T> x, long dy, long dx) {
  auto& t = tape_of(x);
  auto y = k::roll(x.value(), dy, dx);
  return t.record(std::move(y), {x}, [x, dy, dx](Tape<T>& tp, const Tensor<T>& g) {
    add_into(tp.grad_buffer(x.id), k::roll(g, -dy, -dx));
  });
}

template <typename T>
Var<T> pad_reflect(Var<T> x, std::size_t bottom, std::size_t right) {
  auto& t = tape_of(x);
  if (bottom == 0 && right == 0) return x;
  auto y = k::pad_reflect(x.value(), bottom, right);
  const std::size_t h = x.shape()[1], w = x.shape()[2];
  return t.record(std::move(y), {x}, [x, h, w](Tape<T>& tp, const Tensor<T>& g) {
    k::pad_reflect_backward(g, h, w, tp.grad_buffer(x.id));
  });
}

template <typename T>
Var<T> crop(Var<T> x, std::size_t height, std::size_t width) {
  auto& t = tape_of(x);
  if (height == x.shape()[1] && width == x.shape()[2]) return x;
  auto y = k::crop(x.value(), height, width);
  return t.record(std::move(y), {x}, [x, height, width](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    const std::size_t c = g.dim(3);
    for (std::size_t b = 0; b < g.dim(0); ++b) {
      for (std::size_t yy = 0; yy < height; ++yy) {
        for (std::size_t xx = 0; xx < width * c; ++xx) {
          (&gx->at(b, yy, 0, 0))[xx] += (&g.at(b, yy, 0, 0))[xx];
        }
      }
    }
  });
}

template <typename T>
Var<T> window_partition(Var<T> x, std::size_t window, std::size_t shift) {
  const auto& s = x.shape();
  require_rank(s, 4, "window_partition");
  Var<T> src = shift ? roll(x, -static_cast<long>(shift), -static_cast<long>(shift)) : x;
  auto& t = tape_of(x);
  auto y = k::window_partition(src.value(), window);
  const std::size_t nb = s[0], h = s[1], w = s[2];
  return t.record(std::move(y), {src}, [src, window, nb, h, w](Tape<T>& tp, const Tensor<T>& g) {
    add_into(tp.grad_buffer(src.id), k::window_reverse(g, window, nb, h, w));
  });
}

template <typename T>
Var<T> window_reverse(Var<T> windows, std::size_t window, std::size_t batch, std::size_t height, std::size_t width,
                      std::size_t shift) {
  auto& t = tape_of(windows);
  auto y = k::window_reverse(windows.value(), window, batch, height, width);
  Var<T> merged = t.record(std::move(y), {windows}, [windows, window](Tape<T>& tp, const Tensor<T>& g) {
    add_into(tp.grad_buffer(windows.id), k::window_partition(g, window));
  });
  return shift ? roll(merged, static_cast<long>(shift), static_cast<long>(shift)) : merged;
}

template <typename T>
Var<T> split_heads(Var<T> x, std::size_t heads) {
  auto& t = tape_of(x);
  auto y = k::split_heads(x.value(), heads);
  return t.record(std::move(y), {x}, [x, heads](Tape<T>& tp, const Tensor<T>& g) {
    add_into(tp.grad_buffer(x.id), k::merge_heads(g, heads));
  });
}

template <typename T>
Var<T> merge_heads(Var<T> x, std::size_t heads) {
  auto& t = tape_of(x);
  auto y = k::merge_heads(x.value(), heads);
  return t.record(std::move(y), {x}, [x, heads](Tape<T>& tp, const Tensor<T>& g) {
    add_into(tp.grad_buffer(x.id), k::split_heads(g, heads));
  });
}

template <typename T>
Var<T> mu_law(Var<T> x, T mu) {
  if (!(mu > T(0))) throw Error("mu_law: mu must be positive");
  auto& t = tape_of(x);
  const T denom = std::log1p(mu);
  Tensor<T> y(x.shape());
  const auto& xv = x.value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T c = std::clamp(xv[i], T(0), T(1));
    y[i] = std::log1p(mu * c) / denom;
  }
  return t.record(std::move(y), {x}, [x, mu, denom](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    const auto& xv = tp.value(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] < T(0) || xv[i] > T(1)) continue;
      (*gx)[i] += g[i] * mu / ((T(1) + mu * xv[i]) * denom);
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  auto& t = tape_of(x);
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  return t.record(Tensor<T>::scalar(acc), {x}, [x](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    for (auto& v : gx->data()) v += g[0];
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  auto& t = tape_of(x);
  T acc = 0;
  for (T v : x.value().data()) acc += v;
  const T n = T(x.value().size());
  return t.record(Tensor<T>::scalar(acc / n), {x}, [x, n](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    for (auto& v : gx->data()) v += g[0] / n;
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> x, const Tensor<T>& weights) {
  auto& t = tape_of(x);
  require_same_shape(x.shape(), weights.shape(), "weighted_sum");
  T acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) acc += x.value()[i] * weights[i];
  return t.record(Tensor<T>::scalar(acc), {x}, [x, weights](Tape<T>& tp, const Tensor<T>& g) {
    auto* gx = tp.grad_buffer(x.id);
    for (std::size_t i = 0; i < weights.size(); ++i) (*gx)[i] += g[0] * weights[i];
  });
}

template <typename T>
Var<T> mean_abs_diff(Var<T> a, const Tensor<T>& target) {
  auto& t = tape_of(a);
  require_same_shape(a.shape(), target.shape(), "mean_abs_diff");
  T acc = 0;
  for (std::size_t i = 0; i < target.size(); ++i) acc += std::abs(a.value()[i] - target[i]);
  const T n = T(target.size());
  return t.record(Tensor<T>::scalar(acc / n), {a}, [a, target, n](Tape<T>& tp, const Tensor<T>& g) {
    auto* ga = tp.grad_buffer(a.id);
    const auto& av = tp.value(a.id);
    for (std::size_t i = 0; i < target.size(); ++i) {
      const T d = av[i] - target[i];
      if (d > T(0)) {
        (*ga)[i] += g[0] / n;
      } else if (d < T(0)) {
        (*ga)[i] -= g[0] / n;
      }
    }
  });
}

#define HDT_INSTANTIATE(T)                                                                                       \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, const Conv2dOptions&);                                          \
  template Var<T> deformable_conv2d(Var<T>, Var<T>, Var<T>, Var<T>);                                             \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                                         \
  template Var<T> softmax(Var<T>);                                                                               \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                                \
  template Var<T> batched_matmul(Var<T>, Var<T>, bool);                                                          \
  template Var<T> leaky_relu(Var<T>);                                                                            \
  template Var<T> gelu(Var<T>);     \
  template Var<T> sigmoid(Var<T>);                                                                               \
  template Var<T> global_avg_pool(Var<T>);                                                                       \
  template Var<T> add(Var<T>, Var<T>);                                                                           \
  template Var<T> sub(Var<T>, Var<T>);                                                                           \
  template Var<T> mul(Var<T>, Var<T>);                                                                           \
  template Var<T> mul_channel(Var<T>, Var<T>);                                                                   \
  template Var<T> scale(Var<T>, T);                                                                              \
  template Var<T> concat(const std::vector<Var<T>>&);                                                            \
  template Var<T> slice_channels(Var<T>, std::size_t, std::size_t);                                              \
  template Var<T> reshape(Var<T>, Shape);                                                                        \
  template Var<T> roll(Var<T>, long, long);                                                                      \
  template Var<T> pad_reflect(Var<T>, std::size_t, std::size_t);                                                 \
  template Var<T> crop(Var<T>, std::size_t, std::size_t);                                                        \
  template Var<T> window_partition(Var<T>, std::size_t, std::size_t);                                            \
  template Var<T> window_reverse(Var<T>, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t);       \
  template Var<T> split_heads(Var<T>, std::size_t);                                                              \
  template Var<T> merge_heads(Var<T>, std::size_t);                                                              \
  template Var<T> mu_law(Var<T>, T);                                                                             \
  template Var<T> sum(Var<T>);                                                                                   \
  template Var<T> mean(Var<T>);                                                                                  \
  template Var<T> weighted_sum(Var<T>, const Tensor<T>&);                                                        \
  template Var<T> mean_abs_diff(Var<T>, const Tensor<T>&);

HDT_INSTANTIATE(float)
HDT_INSTANTIATE(double)

#undef HDT_INSTANTIATE

}  // namespace hdt::ad
