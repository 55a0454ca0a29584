#pragma once

// Layer primitives for the encoder/decoder stacks: strided convolutions,
// transposed convolutions and fully connected layers over row-major tensors,
// with hand-written backward passes.
//
// Layouts (row-major, channels last):
//   conv2d / tconv2d activations   (H, W, C)
//   conv1d / tconv1d activations   (L, C)   -- rank-1 (L) is read as C = 1
//   fc activations                 any dims, flattened
//   conv2d weights  (k, k, Cin, Cout)   conv1d weights  (k, Cin, Cout)
//   tconv2d weights (k, k, Cout, Cin)   tconv1d weights (k, Cout, Cin)
//   fc weights      (out, in)           bias            (Cout) / (out)

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "cardiovae/tensor.hpp"

namespace cardiovae {

enum class LayerKind { conv2d, conv1d, tconv2d, tconv1d, fc };
enum class Activation { relu, sigmoid, none };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::tconv2d: return "tconv2d";
    case LayerKind::tconv1d: return "tconv1d";
    case LayerKind::fc: return "fc";
  }
  return "?";
}

struct LayerSpec {
  LayerKind kind = LayerKind::fc;
  std::size_t in_channels = 1;   // input features for fc
  std::size_t out_channels = 1;  // output features for fc
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t output_padding = 0;  // transposed kinds only, < stride
  std::optional<std::size_t> output_padding_h;  // tconv2d height override; defaults to output_padding
  Activation activation = Activation::none;

  bool is_transposed() const { return kind == LayerKind::tconv2d || kind == LayerKind::tconv1d; }
  bool is_2d() const { return kind == LayerKind::conv2d || kind == LayerKind::tconv2d; }
  std::size_t height_output_padding() const { return output_padding_h.value_or(output_padding); }

  void validate() const {
    if (in_channels < 1 || out_channels < 1) throw Error(ErrorKind::invalid, "layer channels must be >= 1");
    if (kernel < 1) throw Error(ErrorKind::invalid, "layer kernel must be >= 1");
    if (stride < 1) throw Error(ErrorKind::invalid, "layer stride must be >= 1");
    if (is_transposed() && (output_padding >= stride || height_output_padding() >= stride))
      throw Error(ErrorKind::invalid, "output_padding must be smaller than stride");
  }
};

/// floor((n + 2 pad - kernel) / stride) + 1; throws when the result is < 1.
inline std::size_t conv_out_len(std::size_t n, std::size_t kernel, std::size_t stride, std::size_t pad) {
  if (n < 1 || kernel < 1 || stride < 1) throw Error(ErrorKind::invalid, "conv_out_len: invalid arguments");
  const long long span = static_cast<long long>(n + 2 * pad) - static_cast<long long>(kernel);
  if (span < 0) throw ShapeError("length", "degenerate output: kernel " + std::to_string(kernel) +
                                               " exceeds padded length " + std::to_string(n + 2 * pad));
  return static_cast<std::size_t>(span) / stride + 1;
}

/// (n - 1) stride - 2 pad + kernel + output_padding; throws when the result is < 1.
inline std::size_t tconv_out_len(std::size_t n, std::size_t kernel, std::size_t stride, std::size_t pad,
                                 std::size_t output_padding = 0) {
  if (n < 1 || kernel < 1 || stride < 1) throw Error(ErrorKind::invalid, "tconv_out_len: invalid arguments");
  const long long len = static_cast<long long>((n - 1) * stride + kernel + output_padding) -
                        2 * static_cast<long long>(pad);
  if (len < 1) throw ShapeError("length", "degenerate output for transposed convolution");
  return static_cast<std::size_t>(len);
}

inline Dims weight_dims(const LayerSpec& s) {
  switch (s.kind) {
    case LayerKind::conv2d: return {s.kernel, s.kernel, s.in_channels, s.out_channels};
    case LayerKind::conv1d: return {s.kernel, s.in_channels, s.out_channels};
    case LayerKind::tconv2d: return {s.kernel, s.kernel, s.out_channels, s.in_channels};
    case LayerKind::tconv1d: return {s.kernel, s.out_channels, s.in_channels};
    case LayerKind::fc: return {s.out_channels, s.in_channels};
  }
  return {};
}

inline Dims bias_dims(const LayerSpec& s) { return {s.out_channels}; }

namespace detail {

/// Convolution geometry on a (in_h, in_w, channels) grid. 1-D layers use in_h = 1.
struct ConvGeometry {
  std::size_t in_h, in_w, out_h, out_w;
  std::size_t kh, kw, sh, sw, ph, pw;
  std::size_t channels;

  std::size_t patch() const { return kh * kw * channels; }
  std::size_t positions() const { return out_h * out_w; }
};

template <typename S>
void im2col(const S* x, const ConvGeometry& g, S* cols) {
  const std::size_t C = g.channels;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      S* row = cols + (oy * g.out_w + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long long iy = static_cast<long long>(oy * g.sh + ky) - static_cast<long long>(g.ph);
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          S* dst = row + (ky * g.kw + kx) * C;
          const long long ix = static_cast<long long>(ox * g.sw + kx) - static_cast<long long>(g.pw);
          if (iy < 0 || iy >= static_cast<long long>(g.in_h) || ix < 0 || ix >= static_cast<long long>(g.in_w)) {
            std::fill(dst, dst + C, S(0));
          } else {
            std::memcpy(dst, x + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * C,
                        C * sizeof(S));
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-adds patch rows back onto the input grid.
template <typename S>
void col2im(const S* cols, const ConvGeometry& g, S* x) {
  const std::size_t C = g.channels;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const S* row = cols + (oy * g.out_w + ox) * g.patch();
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const long long iy = static_cast<long long>(oy * g.sh + ky) - static_cast<long long>(g.ph);
        if (iy < 0 || iy >= static_cast<long long>(g.in_h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const long long ix = static_cast<long long>(ox * g.sw + kx) - static_cast<long long>(g.pw);
          if (ix < 0 || ix >= static_cast<long long>(g.in_w)) continue;
          const S* src = row + (ky * g.kw + kx) * C;
          S* dst = x + (static_cast<std::size_t>(iy) * g.in_w + static_cast<std::size_t>(ix)) * C;
          for (std::size_t c = 0; c < C; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMat<S>>;

/// Spatial extents of a layer input: (h, w, channels).
struct Extents {
  std::size_t h, w, c;
};

inline Extents input_extents(const LayerSpec& s, const Dims& d) {
  if (s.is_2d()) {
    if (d.size() != 3) throw ShapeError("rank", std::string(layer_kind_name(s.kind)) + " expects (H,W,C) input, got " + dims_string(d));
    if (d[2] != s.in_channels)
      throw ShapeError("channels", std::string(layer_kind_name(s.kind)) + " expects " + std::to_string(s.in_channels) +
                                       " input channels, got " + std::to_string(d[2]));
    return {d[0], d[1], d[2]};
  }
  if (d.size() == 1) {
    if (s.in_channels != 1)
      throw ShapeError("channels", std::string(layer_kind_name(s.kind)) + " expects " + std::to_string(s.in_channels) +
                                       " input channels, got rank-1 input");
    return {1, d[0], 1};
  }
  if (d.size() != 2) throw ShapeError("rank", std::string(layer_kind_name(s.kind)) + " expects (L,C) input, got " + dims_string(d));
  if (d[1] != s.in_channels)
    throw ShapeError("channels", std::string(layer_kind_name(s.kind)) + " expects " + std::to_string(s.in_channels) +
                                     " input channels, got " + std::to_string(d[1]));
  return {1, d[0], d[1]};
}

/// Geometry of the underlying (forward) convolution. For transposed layers
/// this is the convolution mapping the output grid back onto the input grid.
inline ConvGeometry geometry(const LayerSpec& s, const Extents& in) {
  const bool two_d = s.is_2d();
  const std::size_t kh = two_d ? s.kernel : 1, sh = two_d ? s.stride : 1, ph = two_d ? s.padding : 0;
  if (!s.is_transposed()) {
    const std::size_t oh = two_d ? conv_out_len(in.h, kh, sh, ph) : 1;
    const std::size_t ow = conv_out_len(in.w, s.kernel, s.stride, s.padding);
    return {in.h, in.w, oh, ow, kh, s.kernel, sh, s.stride, ph, s.padding, s.in_channels};
  }
  const std::size_t oh = two_d ? tconv_out_len(in.h, kh, sh, ph, s.height_output_padding()) : 1;
  const std::size_t ow = tconv_out_len(in.w, s.kernel, s.stride, s.padding, s.output_padding);
  return {oh, ow, in.h, in.w, kh, s.kernel, sh, s.stride, ph, s.padding, s.out_channels};
}

inline void check_params(const LayerSpec& s, const Dims& w, const Dims& b) {
  if (w != weight_dims(s))
    throw ShapeError("weights", std::string(layer_kind_name(s.kind)) + " weights must be " + dims_string(weight_dims(s)) +
                                    ", got " + dims_string(w));
  if (b != bias_dims(s))
    throw ShapeError("bias", std::string(layer_kind_name(s.kind)) + " bias must be " + dims_string(bias_dims(s)) +
                                 ", got " + dims_string(b));
}

}  // namespace detail

/// Output dims of a layer for the given input dims (pre/post activation alike).
inline Dims output_dims(const LayerSpec& s, const Dims& in) {
  if (s.kind == LayerKind::fc) {
    if (dims_product(in) != s.in_channels)
      throw ShapeError("features", "fc expects " + std::to_string(s.in_channels) + " input features, got " +
                                       std::to_string(dims_product(in)));
    return {s.out_channels};
  }
  const auto ext = detail::input_extents(s, in);
  const auto g = detail::geometry(s, ext);
  if (!s.is_transposed()) {
    if (s.is_2d()) return {g.out_h, g.out_w, s.out_channels};
    return {g.out_w, s.out_channels};
  }
  if (s.is_2d()) return {g.in_h, g.in_w, s.out_channels};
  return {g.in_w, s.out_channels};
}

template <typename S>
void apply_activation(Activation a, BasicTensor<S>& t) {
  switch (a) {
    case Activation::relu:
      for (auto& v : t.values()) v = v > S(0) ? v : S(0);
      break;
    case Activation::sigmoid:
      for (auto& v : t.values()) v = S(1) / (S(1) + std::exp(-v));
      break;
    case Activation::none:
      break;
  }
}

/// In-place: turns d(loss)/d(output) into d(loss)/d(pre-activation), given the activated output.
template <typename S>
void activation_backward(Activation a, const BasicTensor<S>& out, BasicTensor<S>& grad) {
  switch (a) {
    case Activation::relu:
      for (std::size_t i = 0; i < grad.size(); ++i)
        if (!(out[i] > S(0))) grad[i] = S(0);
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] *= out[i] * (S(1) - out[i]);
      break;
    case Activation::none:
      break;
  }
}

/// Affine part of a layer (no activation).
template <typename S>
BasicTensor<S> layer_affine(const LayerSpec& s, const BasicTensor<S>& w, const BasicTensor<S>& b,
                            const BasicTensor<S>& x) {
  using namespace detail;
  s.validate();
  check_params(s, w.dims(), b.dims());
  BasicTensor<S> y(output_dims(s, x.dims()));
  const std::size_t cout = s.out_channels;

  if (s.kind == LayerKind::fc) {
    ConstMatMap<S> W(w.data(), s.out_channels, s.in_channels);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> xv(x.data(), s.in_channels);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> bv(b.data(), cout);
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> yv(y.data(), cout);
    yv.noalias() = W * xv;
    yv += bv;
    return y;
  }

  const auto g = geometry(s, input_extents(s, x.dims()));
  if (!s.is_transposed()) {
    RowMat<S> cols(g.positions(), g.patch());
    im2col(x.data(), g, cols.data());
    MatMap<S> Y(y.data(), g.positions(), cout);
    Y.noalias() = cols * ConstMatMap<S>(w.data(), g.patch(), cout);
  } else {
    const std::size_t pin = g.positions();  // input grid of the transposed layer
    RowMat<S> cols(pin, g.patch());
    cols.noalias() = ConstMatMap<S>(x.data(), pin, s.in_channels) *
                     ConstMatMap<S>(w.data(), g.patch(), s.in_channels).transpose();
    col2im(cols.data(), g, y.data());
  }
  const std::size_t npos = y.size() / cout;
  for (std::size_t p = 0; p < npos; ++p)
    for (std::size_t c = 0; c < cout; ++c) y[p * cout + c] += b[c];
  return y;
}

/// Full layer: affine map followed by the activation.
template <typename S>
BasicTensor<S> forward(const LayerSpec& s, const BasicTensor<S>& w, const BasicTensor<S>& b, const BasicTensor<S>& x) {
  auto y = layer_affine(s, w, b, x);
  apply_activation(s.activation, y);
  return y;
}

/// Backward through a full layer. `y` is the activated output of forward(),
/// `grad_y` is d(loss)/d(y). Parameter gradients are accumulated into
/// `grad_w`/`grad_b` when non-null. Returns d(loss)/d(x).
template <typename S>
BasicTensor<S> backward(const LayerSpec& s, const BasicTensor<S>& w, const BasicTensor<S>& x, const BasicTensor<S>& y,
                        BasicTensor<S> grad_y, std::type_identity_t<BasicTensor<S>>* grad_w,
                        std::type_identity_t<BasicTensor<S>>* grad_b) {
  using namespace detail;
  activation_backward(s.activation, y, grad_y);
  BasicTensor<S> grad_x(x.dims());
  const std::size_t cout = s.out_channels;

  if (grad_b) {
    const std::size_t npos = grad_y.size() / cout;
    for (std::size_t p = 0; p < npos; ++p)
      for (std::size_t c = 0; c < cout; ++c) (*grad_b)[c] += grad_y[p * cout + c];
  }

  if (s.kind == LayerKind::fc) {
    ConstMatMap<S> W(w.data(), s.out_channels, s.in_channels);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> gy(grad_y.data(), cout);
    Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>> xv(x.data(), s.in_channels);
    Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>> gx(grad_x.data(), s.in_channels);
    gx.noalias() = W.transpose() * gy;
    if (grad_w) MatMap<S>(grad_w->data(), s.out_channels, s.in_channels).noalias() += gy * xv.transpose();
    return grad_x;
  }

  const auto g = geometry(s, input_extents(s, x.dims()));
  if (!s.is_transposed()) {
    RowMat<S> cols(g.positions(), g.patch());
    im2col(x.data(), g, cols.data());
    ConstMatMap<S> GY(grad_y.data(), g.positions(), cout);
    if (grad_w) MatMap<S>(grad_w->data(), g.patch(), cout).noalias() += cols.transpose() * GY;
    cols.noalias() = GY * ConstMatMap<S>(w.data(), g.patch(), cout).transpose();
    col2im(cols.data(), g, grad_x.data());
  } else {
    const std::size_t pin = g.positions();
    RowMat<S> cols(pin, g.patch());
    im2col(grad_y.data(), g, cols.data());
    ConstMatMap<S> X(x.data(), pin, s.in_channels);
    if (grad_w) MatMap<S>(grad_w->data(), g.patch(), s.in_channels).noalias() += cols.transpose() * X;
    MatMap<S>(grad_x.data(), pin, s.in_channels).noalias() = cols * ConstMatMap<S>(w.data(), g.patch(), s.in_channels);
  }
  return grad_x;
}

/// Scalar function with analytic gradient: returns f(x) and, when `grad` is
/// non-null, writes df/dx into it (same dims as x).
using GradFunction = std::function<double(const TensorD& x, TensorD* grad)>;

/// Max over the chosen coordinates of |analytic - central difference| /
/// max(|analytic|, |central|, 1e-8). Checks every coordinate when `coords` is empty.
inline double gradient_check(const GradFunction& f, const TensorD& x, double eps,
                             const std::vector<std::size_t>& coords = {}) {
  TensorD analytic(x.dims());
  const double f0 = f(x, &analytic);
  if (!std::isfinite(f0)) throw NumericError("gradient_check: f(x) is not finite");
  analytic.require_finite("gradient_check analytic gradient");

  std::vector<std::size_t> idx = coords;
  if (idx.empty()) {
    idx.resize(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
  }
  TensorD probe = x;
  double worst = 0.0;
  for (std::size_t i : idx) {
    if (i >= x.size()) throw Error(ErrorKind::invalid, "gradient_check: coordinate out of range");
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe, nullptr);
    probe[i] = orig - eps;
    const double fm = f(probe, nullptr);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw NumericError("gradient_check: f is not finite near x");
    const double central = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - central) / denom);
  }
  return worst;
}

}  // namespace cardiovae
