#pragma once

// Forward and adjoint kernels on plain tensors. Image tensors are B×H×W×C,
// convolution weights are k×k×Cin×Cout, and all reductions run in a fixed
// order per output element so results do not depend on the thread count.
//
// Every *_backward function accumulates (+=) into the gradient tensors it is
// given. Null gradient pointers are skipped.

#include <cstddef>

#include "hdt/tensor.hpp"

namespace hdt::kernels {

enum class Padding { same, valid };

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Padding padding = Padding::same;
};

/// Cross-correlation with zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Conv2dOptions& opt = {});

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Conv2dOptions& opt, const Tensor<T>& gy,
                     Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb);

/// Deformable convolution (stride 1, same padding). offsets is B×H×W×(2·k·k);
/// channels (2t, 2t+1) hold the (dy, dx) displacement of tap t = ky·k + kx.
/// Taps are sampled bilinearly from the zero-padded input, and sample
/// coordinates are clamped to the padded image bounds.
template <typename T>
Tensor<T> deformable_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& offsets);

template <typename T>
void deformable_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& offsets, const Tensor<T>& gy,
                                Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb, Tensor<T>* goffsets);

/// Bilinear sample of channel c of image b at continuous (py, px), zero
/// outside the image.
template <typename T>
T bilinear_sample(const Tensor<T>& x, std::size_t b, T py, T px, std::size_t c);

/// Normalizes over the last axis. mean and rstd receive one value per row.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps, Tensor<T>* mean,
                     Tensor<T>* rstd);

template <typename T>
void layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& mean, const Tensor<T>& rstd,
                         const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* ggamma, Tensor<T>* gbeta);

/// Softmax over the last axis with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x);

template <typename T>
void softmax_backward(const Tensor<T>& y, const Tensor<T>& gy, Tensor<T>* gx);

/// y = x·w + b over the last axis; w is Din×Dout.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

template <typename T>
void linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>* gw,
                     Tensor<T>* gb);

/// Batched product of a (B×M×K) and b (B×K×N), or b (B×N×K) when
/// transpose_b is set.
template <typename T>
Tensor<T> batched_matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b);

template <typename T>
void batched_matmul_backward(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b, const Tensor<T>& gy,
                             Tensor<T>* ga, Tensor<T>* gb);

inline constexpr double kLeakySlope = 0.01;

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(kLeakySlope));

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

/// Exact GELU, x·Φ(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

/// Mean over H and W: B×H×W×C → B×C.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

/// Cyclic shift over H and W: out[y][x] = in[(y - dy) mod H][(x - dx) mod W].
template <typename T>
Tensor<T> roll(const Tensor<T>& x, long dy, long dx);

/// Extends H and W at the bottom/right by mirroring (edge pixel excluded).
template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, std::size_t bottom, std::size_t right);

template <typename T>
void pad_reflect_backward(const Tensor<T>& gy, std::size_t height, std::size_t width, Tensor<T>* gx);

/// Top-left height×width region.
template <typename T>
Tensor<T> crop(const Tensor<T>& x, std::size_t height, std::size_t width);

/// B×H×W×D → (B·nW)×(window²)×D, windows in row-major order per image.
template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, std::size_t window);

/// Inverse of window_partition.
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::size_t window, std::size_t batch, std::size_t height,
                         std::size_t width);

/// B×T×(h·d) → (B·h)×T×d.
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads);

/// (B·h)×T×d → B×T×(h·d).
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads);

/// Concatenates along the last axis.
template <typename T>
Tensor<T> concat_last(const std::vector<const Tensor<T>*>& parts);

/// Channels [begin, begin + count) of the last axis.
template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::size_t begin, std::size_t count);

}  // namespace hdt::kernels
