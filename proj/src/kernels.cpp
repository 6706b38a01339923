#include "hdt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hdt/parallel.hpp"

namespace hdt::kernels {

namespace {

struct ConvGeometry {
  std::size_t batch, height, width, cin;
  std::size_t k, cout;
  std::size_t out_h, out_w;
  long pad;
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, const Conv2dOptions& opt, const char* op) {
  require_rank(x.shape(), 4, op);
  require_rank(w.shape(), 4, op);
  const std::size_t k = w.dim(0);
  if (w.dim(1) != k) {
    throw ShapeError(std::string(op) + ": kernel must be square, got " + w.shape().str());
  }
  if (k % 2 == 0) {
    throw ShapeError(std::string(op) + ": kernel size must be odd, got " + std::to_string(k));
  }
  if (x.dim(3) != w.dim(2)) {
    throw ShapeError(std::string(op) + ": input channels (dim 3) = " + std::to_string(x.dim(3)) +
                     " but kernel expects Cin = " + std::to_string(w.dim(2)));
  }
  if (opt.stride < 1 || opt.dilation < 1) {
    throw ShapeError(std::string(op) + ": stride and dilation must be >= 1");
  }
  ConvGeometry g{};
  g.batch = x.dim(0);
  g.height = x.dim(1);
  g.width = x.dim(2);
  g.cin = x.dim(3);
  g.k = k;
  g.cout = w.dim(3);
  const std::size_t span = opt.dilation * (k - 1);
  g.pad = opt.padding == Padding::same ? static_cast<long>(span / 2) : 0;
  const std::size_t ph = g.height + 2 * static_cast<std::size_t>(g.pad);
  const std::size_t pw = g.width + 2 * static_cast<std::size_t>(g.pad);
  if (ph <= span || pw <= span) {
    throw ShapeError(std::string(op) + ": input " + x.shape().str() + " smaller than dilated kernel");
  }
  g.out_h = (ph - span - 1) / opt.stride + 1;
  g.out_w = (pw - span - 1) / opt.stride + 1;
  return g;
}

template <typename T>
void require_bias(const Tensor<T>& b, std::size_t cout, const char* op) {
  if (b.size() != cout) {
    throw ShapeError(std::string(op) + ": bias has " + std::to_string(b.size()) + " elements, Cout = " +
                     std::to_string(cout));
  }
}

// Bilinear corner set for one continuous sample position.
template <typename T>
struct Corners {
  long y0, x0;
  T ly, lx;
  bool clamped_y, clamped_x;
};

template <typename T>
Corners<T> locate(T py, T px, long pad, std::size_t height, std::size_t width) {
  Corners<T> c{};
  const T lo_y = T(-pad), hi_y = T(static_cast<long>(height) - 1 + pad);
  const T lo_x = T(-pad), hi_x = T(static_cast<long>(width) - 1 + pad);
  c.clamped_y = py < lo_y || py > hi_y;
  c.clamped_x = px < lo_x || px > hi_x;
  py = std::clamp(py, lo_y, hi_y);
  px = std::clamp(px, lo_x, hi_x);
  const T fy = std::floor(py), fx = std::floor(px);
  c.y0 = static_cast<long>(fy);
  c.x0 = static_cast<long>(fx);
  c.ly = py - fy;
  c.lx = px - fx;
  return c;
}

inline bool inside(long v, std::size_t n) { return v >= 0 && v < static_cast<long>(n); }

// Row pointer for pixel (y, x) of image b, or nullptr when outside.
template <typename T>
const T* pixel(const Tensor<T>& x, std::size_t b, long y, long xx) {
  if (!inside(y, x.dim(1)) || !inside(xx, x.dim(2))) return nullptr;
  return &x.at(b, static_cast<std::size_t>(y), static_cast<std::size_t>(xx), 0);
}

template <typename T>
void sample_channels(const Tensor<T>& x, std::size_t b, const Corners<T>& c, T* out) {
  const std::size_t cin = x.dim(3);
  const T w00 = (T(1) - c.ly) * (T(1) - c.lx);
  const T w01 = (T(1) - c.ly) * c.lx;
  const T w10 = c.ly * (T(1) - c.lx);
  const T w11 = c.ly * c.lx;
  const T* p00 = pixel(x, b, c.y0, c.x0);
  const T* p01 = pixel(x, b, c.y0, c.x0 + 1);
  const T* p10 = pixel(x, b, c.y0 + 1, c.x0);
  const T* p11 = pixel(x, b, c.y0 + 1, c.x0 + 1);
  for (std::size_t ci = 0; ci < cin; ++ci) {
    const T v00 = p00 ? p00[ci] : T(0);
    const T v01 = p01 ? p01[ci] : T(0);
    const T v10 = p10 ? p10[ci] : T(0);
    const T v11 = p11 ? p11[ci] : T(0);
    out[ci] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11;
  }
}

template <typename T>
void check_offsets(const Tensor<T>& x, const Tensor<T>& offsets, std::size_t k, const char* op) {
  require_rank(offsets.shape(), 4, op);
  if (offsets.dim(3) != 2 * k * k) {
    throw ShapeError(std::string(op) + ": offset channels (dim 3) = " + std::to_string(offsets.dim(3)) +
                     ", expected 2*k*k = " + std::to_string(2 * k * k));
  }
  for (std::size_t a = 0; a < 3; ++a) {
    if (offsets.dim(a) != x.dim(a)) {
      throw ShapeError(std::string(op) + ": offset dim " + std::to_string(a) + " = " +
                       std::to_string(offsets.dim(a)) + " does not match input " + x.shape().str());
    }
  }
}

std::size_t rows_of(const Shape& s) { return s.numel() / s.back(); }

}  // namespace

// --- conv2d ---------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dOptions& opt) {
  const auto g = conv_geometry(x, w, opt, "conv2d");
  require_bias(b, g.cout, "conv2d");
  Tensor<T> y(Shape{g.batch, g.out_h, g.out_w, g.cout});
  const long s = static_cast<long>(opt.stride), d = static_cast<long>(opt.dilation);
  parallel_for(g.batch * g.out_h, [&](std::size_t row) {
    const std::size_t bi = row / g.out_h, oy = row % g.out_h;
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      T* out = &y.at(bi, oy, ox, 0);
      std::copy(b.ptr(), b.ptr() + g.cout, out);
      for (std::size_t ky = 0; ky < g.k; ++ky) {
        const long iy = static_cast<long>(oy) * s - g.pad + static_cast<long>(ky) * d;
        if (!inside(iy, g.height)) continue;
        for (std::size_t kx = 0; kx < g.k; ++kx) {
          const long ix = static_cast<long>(ox) * s - g.pad + static_cast<long>(kx) * d;
          if (!inside(ix, g.width)) continue;
          const T* xp = &x.at(bi, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
          const T* wp = w.ptr() + (ky * g.k + kx) * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const T xv = xp[ci];
            const T* wr = wp + ci * g.cout;
            for (std::size_t co = 0; co < g.cout; ++co) out[co] += xv * wr[co];
          }
        }
      }
    }
  });
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Conv2dOptions& opt, const Tensor<T>& gy,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const auto g = conv_geometry(x, w, opt, "conv2d_backward");
  require_same_shape(gy.shape(), Shape{g.batch, g.out_h, g.out_w, g.cout}, "conv2d_backward");
  const long s = static_cast<long>(opt.stride), d = static_cast<long>(opt.dilation);

  if (gb) {
    for (std::size_t p = 0; p < rows_of(gy.shape()); ++p) {
      const T* gp = gy.ptr() + p * g.cout;
      for (std::size_t co = 0; co < g.cout; ++co) (*gb)[co] += gp[co];
    }
  }
  if (gw) {
    parallel_for(g.k * g.k, [&](std::size_t tap) {
      const std::size_t ky = tap / g.k, kx = tap % g.k;
      T* gwp = gw->ptr() + tap * g.cin * g.cout;
      for (std::size_t bi = 0; bi < g.batch; ++bi) {
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy) * s - g.pad + static_cast<long>(ky) * d;
          if (!inside(iy, g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox) * s - g.pad + static_cast<long>(kx) * d;
            if (!inside(ix, g.width)) continue;
            const T* xp = &x.at(bi, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), 0);
            const T* gp = &gy.at(bi, oy, ox, 0);
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              const T xv = xp[ci];
              T* row = gwp + ci * g.cout;
              for (std::size_t co = 0; co < g.cout; ++co) row[co] += xv * gp[co];
            }
          }
        }
      }
    });
  }
  if (gx) {
    parallel_for(g.batch * g.height, [&](std::size_t row) {
      const std::size_t bi = row / g.height, iy = row % g.height;
      for (std::size_t ix = 0; ix < g.width; ++ix) {
        T* gxp = &gx->at(bi, iy, ix, 0);
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          const long ny = static_cast<long>(iy) + g.pad - static_cast<long>(ky) * d;
          if (ny < 0 || ny % s != 0) continue;
          const std::size_t oy = static_cast<std::size_t>(ny / s);
          if (oy >= g.out_h) continue;
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const long nx = static_cast<long>(ix) + g.pad - static_cast<long>(kx) * d;
            if (nx < 0 || nx % s != 0) continue;
            const std::size_t ox = static_cast<std::size_t>(nx / s);
            if (ox >= g.out_w) continue;
            const T* gp = &gy.at(bi, oy, ox, 0);
            const T* wp = w.ptr() + (ky * g.k + kx) * g.cin * g.cout;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              const T* wr = wp + ci * g.cout;
              T acc = 0;
              for (std::size_t co = 0; co < g.cout; ++co) acc += gp[co] * wr[co];
              gxp[ci] += acc;
            }
          }
        }
      }
    });
  }
}

// --- deformable conv ------------------------------------------------------

template <typename T>
T bilinear_sample(const Tensor<T>& x, std::size_t b, T py, T px, std::size_t c) {
  const auto cr = locate(py, px, 1, x.dim(1), x.dim(2));
  std::vector<T> v(x.dim(3));
  sample_channels(x, b, cr, v.data());
  return v.at(c);
}

template <typename T>
Tensor<T> deformable_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& offsets) {
  const auto g = conv_geometry(x, w, Conv2dOptions{}, "deformable_conv2d");
  require_bias(b, g.cout, "deformable_conv2d");
  check_offsets(x, offsets, g.k, "deformable_conv2d");
  Tensor<T> y(Shape{g.batch, g.height, g.width, g.cout});
  parallel_for(g.batch * g.height, [&](std::size_t row) {
    const std::size_t bi = row / g.height, oy = row % g.height;
    std::vector<T> val(g.cin);
    for (std::size_t ox = 0; ox < g.width; ++ox) {
      T* out = &y.at(bi, oy, ox, 0);
      const T* off = &offsets.at(bi, oy, ox, 0);
      std::copy(b.ptr(), b.ptr() + g.cout, out);
      for (std::size_t tap = 0; tap < g.k * g.k; ++tap) {
        const std::size_t ky = tap / g.k, kx = tap % g.k;
        const T py = T(static_cast<long>(oy) - g.pad + static_cast<long>(ky)) + off[2 * tap];
        const T px = T(static_cast<long>(ox) - g.pad + static_cast<long>(kx)) + off[2 * tap + 1];
        sample_channels(x, bi, locate(py, px, g.pad, g.height, g.width), val.data());
        const T* wp = w.ptr() + tap * g.cin * g.cout;
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
          const T xv = val[ci];
          const T* wr = wp + ci * g.cout;
          for (std::size_t co = 0; co < g.cout; ++co) out[co] += xv * wr[co];
        }
      }
    }
  });
  return y;
}

template <typename T>
void deformable_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& offsets, const Tensor<T>& gy,
                                Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb, Tensor<T>* goffsets) {
  const auto g = conv_geometry(x, w, Conv2dOptions{}, "deformable_conv2d_backward");
  check_offsets(x, offsets, g.k, "deformable_conv2d_backward");
  require_same_shape(gy.shape(), Shape{g.batch, g.height, g.width, g.cout}, "deformable_conv2d_backward");
  const std::size_t taps = g.k * g.k;

  auto corners_at = [&](std::size_t bi, std::size_t oy, std::size_t ox, std::size_t tap) {
    const T* off = &offsets.at(bi, oy, ox, 0);
    const std::size_t ky = tap / g.k, kx = tap % g.k;
    const T py = T(static_cast<long>(oy) - g.pad + static_cast<long>(ky)) + off[2 * tap];
    const T px = T(static_cast<long>(ox) - g.pad + static_cast<long>(kx)) + off[2 * tap + 1];
    return locate(py, px, g.pad, g.height, g.width);
  };

  if (gb) {
    for (std::size_t p = 0; p < rows_of(gy.shape()); ++p) {
      const T* gp = gy.ptr() + p * g.cout;
      for (std::size_t co = 0; co < g.cout; ++co) (*gb)[co] += gp[co];
    }
  }
  if (gw) {
    parallel_for(taps, [&](std::size_t tap) {
      std::vector<T> val(g.cin);
      T* gwp = gw->ptr() + tap * g.cin * g.cout;
      for (std::size_t bi = 0; bi < g.batch; ++bi) {
        for (std::size_t oy = 0; oy < g.height; ++oy) {
          for (std::size_t ox = 0; ox < g.width; ++ox) {
            sample_channels(x, bi, corners_at(bi, oy, ox, tap), val.data());
            const T* gp = &gy.at(bi, oy, ox, 0);
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              T* row = gwp + ci * g.cout;
              for (std::size_t co = 0; co < g.cout; ++co) row[co] += val[ci] * gp[co];
            }
          }
        }
      }
    });
  }
  if (!gx && !goffsets) return;

  // Each image scatters only into its own slice of gx, so batch elements run
  // independently with a fixed position order inside.
  parallel_for(g.batch, [&](std::size_t bi) {
    std::vector<T> gval(g.cin);
    for (std::size_t oy = 0; oy < g.height; ++oy) {
      for (std::size_t ox = 0; ox < g.width; ++ox) {
        const T* gp = &gy.at(bi, oy, ox, 0);
        for (std::size_t tap = 0; tap < taps; ++tap) {
          const T* wp = w.ptr() + tap * g.cin * g.cout;
          for (std::size_t ci = 0; ci < g.cin; ++ci) {
            const T* wr = wp + ci * g.cout;
            T acc = 0;
            for (std::size_t co = 0; co < g.cout; ++co) acc += gp[co] * wr[co];
            gval[ci] = acc;
          }
          const auto c = corners_at(bi, oy, ox, tap);
          const long ys[2] = {c.y0, c.y0 + 1};
          const long xs[2] = {c.x0, c.x0 + 1};
          const T wy[2] = {T(1) - c.ly, c.ly};
          const T wx[2] = {T(1) - c.lx, c.lx};
          if (gx) {
            for (int a = 0; a < 2; ++a) {
              for (int e = 0; e < 2; ++e) {
                if (!inside(ys[a], g.height) || !inside(xs[e], g.width)) continue;
                const T wgt = wy[a] * wx[e];
                T* gxp = &gx->at(bi, static_cast<std::size_t>(ys[a]), static_cast<std::size_t>(xs[e]), 0);
                for (std::size_t ci = 0; ci < g.cin; ++ci) gxp[ci] += wgt * gval[ci];
              }
            }
          }
          if (goffsets) {
            const T* p00 = pixel(x, bi, ys[0], xs[0]);
            const T* p01 = pixel(x, bi, ys[0], xs[1]);
            const T* p10 = pixel(x, bi, ys[1], xs[0]);
            const T* p11 = pixel(x, bi, ys[1], xs[1]);
            T dpy = 0, dpx = 0;
            for (std::size_t ci = 0; ci < g.cin; ++ci) {
              const T v00 = p00 ? p00[ci] : T(0);
              const T v01 = p01 ? p01[ci] : T(0);
              const T v10 = p10 ? p10[ci] : T(0);
              const T v11 = p11 ? p11[ci] : T(0);
              dpy += gval[ci] * (wx[0] * (v10 - v00) + wx[1] * (v11 - v01));
              dpx += gval[ci] * (wy[0] * (v01 - v00) + wy[1] * (v11 - v10));
            }
            T* go = &goffsets->at(bi, oy, ox, 0);
            if (!c.clamped_y) go[2 * tap] += dpy;
            if (!c.clamped_x) go[2 * tap + 1] += dpx;
          }
        }
      }
    }
  });
}

// --- layer norm -----------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps, Tensor<T>* mean,
                     Tensor<T>* rstd) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: gamma/beta size must equal last dim " + std::to_string(d));
  }
  const std::size_t rows = rows_of(x.shape());
  Tensor<T> y(x.shape());
  if (mean) *mean = Tensor<T>(Shape{rows});
  if (rstd) *rstd = Tensor<T>(Shape{rows});
  parallel_for(rows, [&](std::size_t r) {
    const T* xp = x.ptr() + r * d;
    T* yp = y.ptr() + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += xp[i];
    mu /= T(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xp[i] - mu) * (xp[i] - mu);
    var /= T(d);
    const T rs = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) yp[i] = (xp[i] - mu) * rs * gamma[i] + beta[i];
    if (mean) (*mean)[r] = mu;
    if (rstd) (*rstd)[r] = rs;
  });
  return y;
}

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& mean, const Tensor<T>& rstd,
                         const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = rows_of(x.shape());
  if (gx) {
    parallel_for(rows, [&](std::size_t r) {
      const T* xp = x.ptr() + r * d;
      const T* gp = gy.ptr() + r * d;
      T* out = gx->ptr() + r * d;
      const T mu = mean[r], rs = rstd[r];
      T sum_g = 0, sum_gx = 0;
      for (std::size_t i = 0; i < d; ++i) {
        const T gi = gp[i] * gamma[i];
        sum_g += gi;
        sum_gx += gi * (xp[i] - mu) * rs;
      }
      sum_g /= T(d);
      sum_gx /= T(d);
      for (std::size_t i = 0; i < d; ++i) {
        const T xhat = (xp[i] - mu) * rs;
        out[i] += rs * (gp[i] * gamma[i] - sum_g - xhat * sum_gx);
      }
    });
  }
  if (ggamma || gbeta) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* xp = x.ptr() + r * d;
      const T* gp = gy.ptr() + r * d;
      for (std::size_t i = 0; i < d; ++i) {
        if (ggamma) (*ggamma)[i] += gp[i] * (xp[i] - mean[r]) * rstd[r];
        if (gbeta) (*gbeta)[i] += gp[i];
      }
    }
  }
}

// --- softmax --------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t d = x.shape().back();
  Tensor<T> y(x.shape());
  parallel_for(rows_of(x.shape()), [&](std::size_t r) {
    const T* xp = x.ptr() + r * d;
    T* yp = y.ptr() + r * d;
    const T mx = *std::max_element(xp, xp + d);
    T sum = 0;
    for (std::size_t i = 0; i < d; ++i) {
      yp[i] = std::exp(xp[i] - mx);
      sum += yp[i];
    }
    for (std::size_t i = 0; i < d; ++i) yp[i] /= sum;
  });
  return y;
}

template <typename T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& gy, Tensor<T>* gx) {
  const std::size_t d = y.shape().back();
  parallel_for(rows_of(y.shape()), [&](std::size_t r) {
    const T* yp = y.ptr() + r * d;
    const T* gp = gy.ptr() + r * d;
    T* out = gx->ptr() + r * d;
    T dot = 0;
    for (std::size_t i = 0; i < d; ++i) dot += gp[i] * yp[i];
    for (std::size_t i = 0; i < d; ++i) out[i] += yp[i] * (gp[i] - dot);
  });
}

// --- linear ---------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require_rank(w.shape(), 2, "linear");
  const std::size_t din = w.dim(0), dout = w.dim(1);
  if (x.shape().back() != din) {
    throw ShapeError("linear: input last dim " + std::to_string(x.shape().back()) + " != weight Din " +
                     std::to_string(din));
  }
  require_bias(b, dout, "linear");
  const std::size_t rows = rows_of(x.shape());
  Tensor<T> y(x.rank() == 0 ? Shape{dout} : x.shape().with_last(dout));
  parallel_for(rows, [&](std::size_t r) {
    const T* xp = x.ptr() + r * din;
    T* yp = y.ptr() + r * dout;
    std::copy(b.ptr(), b.ptr() + dout, yp);
    for (std::size_t i = 0; i < din; ++i) {
      const T xv = xp[i];
      const T* wr = w.ptr() + i * dout;
      for (std::size_t o = 0; o < dout; ++o) yp[o] += xv * wr[o];
    }
  });
  return y;
}

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* gw,
                     Tensor<T>* gb) {
  const std::size_t din = w.dim(0), dout = w.dim(1);
  const std::size_t rows = rows_of(x.shape());
  if (gx) {
    parallel_for(rows, [&](std::size_t r) {
      const T* gp = gy.ptr() + r * dout;
      T* out = gx->ptr() + r * din;
      for (std::size_t i = 0; i < din; ++i) {
        const T* wr = w.ptr() + i * dout;
        T acc = 0;
        for (std::size_t o = 0; o < dout; ++o) acc += gp[o] * wr[o];
        out[i] += acc;
      }
    });
  }
  if (gw) {
    parallel_for(din, [&](std::size_t i) {
      T* row = gw->ptr() + i * dout;
      for (std::size_t r = 0; r < rows; ++r) {
        const T xv = x[r * din + i];
        const T* gp = gy.ptr() + r * dout;
        for (std::size_t o = 0; o < dout; ++o) row[o] += xv * gp[o];
      }
    });
  }
  if (gb) {
    for (std::size_t r = 0; r < rows; ++r) {
      const T* gp = gy.ptr() + r * dout;
      for (std::size_t o = 0; o < dout; ++o) (*gb)[o] += gp[o];
    }
  }
}

// --- batched matmul -------------------------------------------------------

template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require_rank(a.shape(), 3, "batched_matmul");
  require_rank(b.shape(), 3, "batched_matmul");
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  const std::size_t kb = transpose_b ? b.dim(2) : b.dim(1);
  if (b.dim(0) != nb) throw ShapeError("batched_matmul: batch dim 0 mismatch");
  if (kb != k) throw ShapeError("batched_matmul: inner dimension mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> y(Shape{nb, m, n});
  parallel_for(nb * m, [&](std::size_t row) {
    const std::size_t bi = row / m, i = row % m;
    const T* ap = a.ptr() + (bi * m + i) * k;
    const T* bp = b.ptr() + bi * k * n;
    T* yp = y.ptr() + (bi * m + i) * n;
    if (transpose_b) {
      for (std::size_t j = 0; j < n; ++j) {
        T acc = 0;
        for (std::size_t l = 0; l < k; ++l) acc += ap[l] * bp[j * k + l];
        yp[j] = acc;
      }
    } else {
      for (std::size_t l = 0; l < k; ++l) {
        const T av = ap[l];
        for (std::size_t j = 0; j < n; ++j) yp[j] += av * bp[l * n + j];
      }
    }
  });
  return y;
}

template <typename T>
void batched_matmul_backward(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b, const Tensor<T>& gy,
                             Tensor<T>* ga, Tensor<T>* gb) {
  const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t n = gy.dim(2);
  if (ga) {
    parallel_for(nb * m, [&](std::size_t row) {
      const std::size_t bi = row / m, i = row % m;
      const T* gp = gy.ptr() + (bi * m + i) * n;
      const T* bp = b.ptr() + bi * k * n;
      T* out = ga->ptr() + (bi * m + i) * k;
      for (std::size_t l = 0; l < k; ++l) {
        T acc = 0;
        if (transpose_b) {
          for (std::size_t j = 0; j < n; ++j) acc += gp[j] * bp[j * k + l];
        } else {
          for (std::size_t j = 0; j < n; ++j) acc += gp[j] * bp[l * n + j];
        }
        out[l] += acc;
      }
    });
  }
  if (gb) {
    parallel_for(nb, [&](std::size_t bi) {
      const T* ap = a.ptr() + bi * m * k;
      const T* gp = gy.ptr() + bi * m * n;
      T* out = gb->ptr() + bi * k * n;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
          const T av = ap[i * k + l];
          for (std::size_t j = 0; j < n; ++j) {
            if (transpose_b) {
              out[j * k + l] += gp[i * n + j] * av;
            } else {
              out[l * n + j] += av * gp[i * n + j];
            }
          }
        }
      }
    });
  }
}

// --- elementwise ----------------------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : slope * x[i];
  return y;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = x[i] * T(0.5) * (T(1) + std::erf(x[i] * T(M_SQRT1_2)));
  }
  return y;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    if (v >= T(0)) {
      y[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      y[i] = e / (T(1) + e);
    }
  }
  return y;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool");
  const std::size_t nb = x.dim(0), hw = x.dim(1) * x.dim(2), c = x.dim(3);
  Tensor<T> y(Shape{nb, c});
  for (std::size_t b = 0; b < nb; ++b) {
    T* yp = y.ptr() + b * c;
    for (std::size_t p = 0; p < hw; ++p) {
      const T* xp = x.ptr() + (b * hw + p) * c;
      for (std::size_t ci = 0; ci < c; ++ci) yp[ci] += xp[ci];
    }
    for (std::size_t ci = 0; ci < c; ++ci) yp[ci] /= T(hw);
  }
  return y;
}

// --- layout ---------------------------------------------------------------

template <typename T>
Tensor<T> roll(const Tensor<T>& x, long dy, long dx) {
  require_rank(x.shape(), 4, "roll");
  const long h = static_cast<long>(x.dim(1)), w = static_cast<long>(x.dim(2));
  const std::size_t c = x.dim(3);
  Tensor<T> y(x.shape());
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    for (long yy = 0; yy < h; ++yy) {
      const long sy = ((yy - dy) % h + h) % h;
      for (long xx = 0; xx < w; ++xx) {
        const long sx = ((xx - dx) % w + w) % w;
        const T* src = &x.at(b, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx), 0);
        std::copy(src, src + c, &y.at(b, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), 0));
      }
    }
  }
  return y;
}

namespace {
std::size_t reflect_index(std::size_t i, std::size_t n) { return i < n ? i : 2 * (n - 1) - i; }
}  // namespace

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t bottom, std::size_t right) {
  require_rank(x.shape(), 4, "pad_reflect");
  const std::size_t h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (bottom >= h || right >= w) {
    throw ShapeError("pad_reflect: padding (" + std::to_string(bottom) + ", " + std::to_string(right) +
                     ") must be smaller than image " + x.shape().str());
  }
  Tensor<T> y(Shape{x.dim(0), h + bottom, w + right, c});
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    for (std::size_t yy = 0; yy < h + bottom; ++yy) {
      for (std::size_t xx = 0; xx < w + right; ++xx) {
        const T* src = &x.at(b, reflect_index(yy, h), reflect_index(xx, w), 0);
        std::copy(src, src + c, &y.at(b, yy, xx, 0));
      }
    }
  }
  return y;
}

template <typename T>
void pad_reflect_backward(const Tensor<T>& gy, std::size_t height, std::size_t width, Tensor<T>* gx) {
  const std::size_t c = gy.dim(3);
  for (std::size_t b = 0; b < gy.dim(0); ++b) {
    for (std::size_t yy = 0; yy < gy.dim(1); ++yy) {
      for (std::size_t xx = 0; xx < gy.dim(2); ++xx) {
        const T* src = &gy.at(b, yy, xx, 0);
        T* dst = &gx->at(b, reflect_index(yy, height), reflect_index(xx, width), 0);
        for (std::size_t ci = 0; ci < c; ++ci) dst[ci] += src[ci];
      }
    }
  }
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t height, std::size_t width) {
  require_rank(x.shape(), 4, "crop");
  if (height > x.dim(1) || width > x.dim(2)) throw ShapeError("crop: region larger than " + x.shape().str());
  const std::size_t c = x.dim(3);
  Tensor<T> y(Shape{x.dim(0), height, width, c});
  for (std::size_t b = 0; b < x.dim(0); ++b) {
    for (std::size_t yy = 0; yy < height; ++yy) {
      const T* src = &x.at(b, yy, 0, 0);
      std::copy(src, src + width * c, &y.at(b, yy, 0, 0));
    }
  }
  return y;
}

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window) {
  require_rank(x.shape(), 4, "window_partition");
  const std::size_t nb = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  if (window == 0 || h % window != 0 || w % window != 0) {
    throw ShapeError("window_partition: window " + std::to_string(window) + " does not divide " + x.shape().str());
  }
  const std::size_t nwh = h / window, nww = w / window;
  Tensor<T> y(Shape{nb * nwh * nww, window * window, d});
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t wy = 0; wy < nwh; ++wy) {
      for (std::size_t wx = 0; wx < nww; ++wx) {
        const std::size_t win = (b * nwh + wy) * nww + wx;
        for (std::size_t ty = 0; ty < window; ++ty) {
          const T* src = &x.at(b, wy * window + ty, wx * window, 0);
          std::copy(src, src + window * d, y.ptr() + (win * window * window + ty * window) * d);
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t window, std::size_t batch, std::size_t height,
                         std::size_t width) {
  require_rank(windows.shape(), 3, "window_reverse");
  const std::size_t d = windows.dim(2);
  const std::size_t nwh = height / window, nww = width / window;
  if (windows.dim(0) != batch * nwh * nww || windows.dim(1) != window * window) {
    throw ShapeError("window_reverse: " + windows.shape().str() + " does not tile " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  Tensor<T> y(Shape{batch, height, width, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t wy = 0; wy < nwh; ++wy) {
      for (std::size_t wx = 0; wx < nww; ++wx) {
        const std::size_t win = (b * nwh + wy) * nww + wx;
        for (std::size_t ty = 0; ty < window; ++ty) {
          const T* src = windows.ptr() + (win * window * window + ty * window) * d;
          std::copy(src, src + window * d, &y.at(b, wy * window + ty, wx * window, 0));
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  require_rank(x.shape(), 3, "split_heads");
  const std::size_t nb = x.dim(0), t = x.dim(1), dm = x.dim(2);
  if (dm % heads != 0) throw ShapeError("split_heads: dim " + std::to_string(dm) + " not divisible by heads");
  const std::size_t hd = dm / heads;
  Tensor<T> y(Shape{nb * heads, t, hd});
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < t; ++i) {
        const T* src = x.ptr() + (b * t + i) * dm + h * hd;
        std::copy(src, src + hd, y.ptr() + ((b * heads + h) * t + i) * hd);
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  require_rank(x.shape(), 3, "merge_heads");
  const std::size_t nb = x.dim(0) / heads, t = x.dim(1), hd = x.dim(2), dm = hd * heads;
  Tensor<T> y(Shape{nb, t, dm});
  for (std::size_t b = 0; b < nb; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < t; ++i) {
        const T* src = x.ptr() + ((b * heads + h) * t + i) * hd;
        std::copy(src, src + hd, y.ptr() + (b * t + i) * dm + h * hd);
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> concat_last(const std::vector<const Tensor<T>*>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& base = parts.front()->shape();
  const std::size_t rows = rows_of(base);
  std::size_t total = 0;
  for (const auto* p : parts) {
    if (p->rank() != base.rank() || rows_of(p->shape()) != rows) {
      throw ShapeError("concat: leading dims differ between " + base.str() + " and " + p->shape().str());
    }
    for (std::size_t a = 0; a + 1 < base.rank(); ++a) {
      if (p->dim(a) != base[a]) throw ShapeError("concat: dim " + std::to_string(a) + " differs");
    }
    total += p->shape().back();
  }
  Tensor<T> y(base.with_last(total));
  for (std::size_t r = 0; r < rows; ++r) {
    T* dst = y.ptr() + r * total;
    for (const auto* p : parts) {
      const std::size_t c = p->shape().back();
      std::copy(p->ptr() + r * c, p->ptr() + (r + 1) * c, dst);
      dst += c;
    }
  }
  return y;
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t count) {
  const std::size_t c = x.shape().back();
  if (begin + count > c || count == 0) {
    throw ShapeError("slice: channels [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") out of range for " + x.shape().str());
  }
  const std::size_t rows = rows_of(x.shape());
  Tensor<T> y(x.shape().with_last(count));
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy(x.ptr() + r * c + begin, x.ptr() + r * c + begin + count, y.ptr() + r * count);
  }
  return y;
}

#define HDT_INSTANTIATE(T)                                                                                          \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Conv2dOptions&);           \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Conv2dOptions&, const Tensor<T>&,         \
                                Tensor<T>*, Tensor<T>*, Tensor<T>*);                                                \
  template T bilinear_sample(const Tensor<T>&, std::size_t, T, T, std::size_t);                                     \
  template Tensor<T> deformable_conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template void deformable_conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,  \
                                           Tensor<T>*, Tensor<T>*, Tensor<T>*, Tensor<T>*);                         \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T, Tensor<T>*, Tensor<T>*);   \
  template void layer_norm_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                    const Tensor<T>&, Tensor<T>*, Tensor<T>*, Tensor<T>*);                          \
  template Tensor<T> softmax(const Tensor<T>&);                                                                     \
  template void softmax_backward(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                                   \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                                  \
  template void linear_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>*, Tensor<T>*,       \
                                Tensor<T>*);                                                                        \
  template Tensor<T> batched_matmul(const Tensor<T>&, const Tensor<T>&, bool);                                      \
  template void batched_matmul_backward(const Tensor<T>&, const Tensor<T>&, bool, const Tensor<T>&, Tensor<T>*,     \
                                        Tensor<T>*);                                                                \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                               \
  template Tensor<T> gelu(const Tensor<T>&);     \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                                     \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                             \
  template Tensor<T> roll(const Tensor<T>&, long, long);                                                            \
  template Tensor<T> pad_reflect(const Tensor<T>&, std::size_t, std::size_t);                                       \
  template void pad_reflect_backward(const Tensor<T>&, std::size_t, std::size_t, Tensor<T>*);                       \
  template Tensor<T> crop(const Tensor<T>&, std::size_t, std::size_t);                                              \
  template Tensor<T> window_partition(const Tensor<T>&, std::size_t);                                               \
  template Tensor<T> window_reverse(const Tensor<T>&, std::size_t, std::size_t, std::size_t, std::size_t);          \
  template Tensor<T> split_heads(const Tensor<T>&, std::size_t);                                                    \
  template Tensor<T> merge_heads(const Tensor<T>&, std::size_t);                                                    \
  template Tensor<T> concat_last(const std::vector<const Tensor<T>*>&);                                             \
  template Tensor<T> slice_last(const Tensor<T>&, std::size_t, std::size_t);

HDT_INSTANTIATE(float)
HDT_INSTANTIATE(double)

#undef HDT_INSTANTIATE

}  // namespace hdt::kernels
