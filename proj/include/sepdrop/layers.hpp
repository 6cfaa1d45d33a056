#pragma once

#include <cmath>
#include <random>

#include "sepdrop/ops.hpp"

namespace sepdrop {

namespace detail {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Patch-matrix width per matrix product.
inline constexpr std::int64_t kConvChunkColumns = 2048;

struct ConvGeometry {
  std::int64_t c, h, w;     // input
  std::int64_t k, stride, pad;
  std::int64_t oh, ow;      // output

  std::int64_t patch() const { return c * k * k; }
  std::int64_t positions() const { return oh * ow; }
};

// Output columns [lo, hi) whose input column oj * stride - pad + kj is in range.
inline std::pair<std::int64_t, std::int64_t> valid_columns(const ConvGeometry& g, std::int64_t kj) {
  const std::int64_t off = kj - g.pad;
  std::int64_t lo = off >= 0 ? 0 : (-off + g.stride - 1) / g.stride;
  std::int64_t hi = g.w - off <= 0 ? 0 : (g.w - off + g.stride - 1) / g.stride;
  lo = std::min(lo, g.ow);
  hi = std::clamp(hi, lo, g.ow);
  return {lo, hi};
}

// Rows of `cols` are (channel, ki, kj); columns are output positions.
// Consecutive rows are `ld` elements apart.
template <typename Scalar>
void im2col(const Scalar* img, const ConvGeometry& g, Scalar* cols, std::int64_t ld) {
  for (std::int64_t ch = 0; ch < g.c; ++ch)
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        Scalar* row = cols + ((ch * g.k + ki) * g.k + kj) * ld;
        const auto [lo, hi] = valid_columns(g, kj);
        const std::int64_t off = kj - g.pad;
        for (std::int64_t oi = 0; oi < g.oh; ++oi) {
          const std::int64_t ii = oi * g.stride - g.pad + ki;
          Scalar* dst = row + oi * g.ow;
          if (ii < 0 || ii >= g.h) {
            std::fill(dst, dst + g.ow, Scalar(0));
            continue;
          }
          const Scalar* src = img + (ch * g.h + ii) * g.w + off;
          std::fill(dst, dst + lo, Scalar(0));
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::int64_t oj = lo; oj < hi; ++oj) dst[oj] = src[oj * g.stride];
          }
          std::fill(dst + hi, dst + g.ow, Scalar(0));
        }
      }
}

template <typename Scalar>
void col2im_accumulate(const Scalar* cols, const ConvGeometry& g, Scalar* img, std::int64_t ld) {
  for (std::int64_t ch = 0; ch < g.c; ++ch)
    for (std::int64_t ki = 0; ki < g.k; ++ki)
      for (std::int64_t kj = 0; kj < g.k; ++kj) {
        const Scalar* row = cols + ((ch * g.k + ki) * g.k + kj) * ld;
        const auto [lo, hi] = valid_columns(g, kj);
        const std::int64_t off = kj - g.pad;
        for (std::int64_t oi = 0; oi < g.oh; ++oi) {
          const std::int64_t ii = oi * g.stride - g.pad + ki;
          if (ii < 0 || ii >= g.h) continue;
          Scalar* dst = img + (ch * g.h + ii) * g.w + off;
          const Scalar* src = row + oi * g.ow;
          if (g.stride == 1) {
            Eigen::Map<Buffer<Scalar>>(dst + lo, hi - lo) += Eigen::Map<const Buffer<Scalar>>(src + lo, hi - lo);
          } else {
            for (std::int64_t oj = lo; oj < hi; ++oj) dst[oj * g.stride] += src[oj];
          }
        }
      }
}

}  // namespace detail

/// Cross-correlation of x (n, c_in, h, w) with weight (c_out, c_in, k, k),
/// lowered to matrix products over the patches of a few samples at a time.
/// No bias.
template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, int stride, int padding) {
  using Mat = detail::RowMat<Scalar>;
  const Shape xs = x.shape(), ws = weight.shape();
  if (ws.h != ws.w) throw ShapeError("conv2d: only square kernels are supported, got " + ws.str());
  if (xs.c != ws.c)
    throw ShapeError("conv2d: input has " + std::to_string(xs.c) + " channels but weight expects " + std::to_string(ws.c));
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: stride must be >= 1 and padding >= 0");
  detail::ConvGeometry g{xs.c, xs.h, xs.w, ws.h, stride, padding, 0, 0};
  const auto span_h = xs.h + 2 * padding - ws.h;
  const auto span_w = xs.w + 2 * padding - ws.w;
  if (span_h < 0 || span_w < 0) throw ShapeError("conv2d: output extent < 1 for input " + xs.str() + " and kernel " + ws.str());
  g.oh = span_h / stride + 1;
  g.ow = span_w / stride + 1;
  const Shape os{xs.n, ws.n, g.oh, g.ow};
  const auto p = g.positions();
  const auto chunk = std::max<std::int64_t>(1, std::min<std::int64_t>(xs.n, detail::kConvChunkColumns / p));

  // Sample j of a chunk owns columns [j * p, (j + 1) * p) of the patch matrix.
  Mat cols(g.patch(), chunk * p);
  Mat y(os.c, chunk * p);
  Eigen::Map<const Mat> wm(weight.data().data(), ws.n, g.patch());
  Buffer<Scalar> out(os.numel());
  for (std::int64_t first = 0; first < xs.n; first += chunk) {
    const auto count = std::min(chunk, xs.n - first);
    const auto ld = count * p;
    for (std::int64_t j = 0; j < count; ++j)
      detail::im2col(x.data().data() + (first + j) * xs.c * xs.plane(), g, cols.data() + j * p, ld);
    Eigen::Map<Mat> cm(cols.data(), g.patch(), ld);
    Eigen::Map<Mat> ym(y.data(), os.c, ld);
    ym.noalias() = wm * cm;
    for (std::int64_t j = 0; j < count; ++j)
      Eigen::Map<Mat>(out.data() + (first + j) * os.c * p, os.c, p) = ym.middleCols(j * p, p);
  }

  return record_op<Scalar>("conv2d", os, std::move(out), {x, weight}, [g, xs, ws, os, p, chunk](const Buffer<Scalar>& gout, auto ins) {
    const bool need_x = ins[0]->requires_grad, need_w = ins[1]->requires_grad;
    if (!need_x && !need_w) return;
    Mat cols(g.patch(), chunk * p);
    Mat gbuf(os.c, chunk * p);
    Mat dw = Mat::Zero(ws.n, g.patch());
    Buffer<Scalar> dx;
    if (need_x) dx = Buffer<Scalar>::Zero(xs.numel());
    Eigen::Map<const Mat> wm(ins[1]->data.data(), ws.n, g.patch());
    for (std::int64_t first = 0; first < xs.n; first += chunk) {
      const auto count = std::min(chunk, xs.n - first);
      const auto ld = count * p;
      Eigen::Map<Mat> gm(gbuf.data(), os.c, ld);
      for (std::int64_t j = 0; j < count; ++j)
        gm.middleCols(j * p, p) = Eigen::Map<const Mat>(gout.data() + (first + j) * os.c * p, os.c, p);
      Eigen::Map<Mat> cm(cols.data(), g.patch(), ld);
      if (need_w) {
        for (std::int64_t j = 0; j < count; ++j)
          detail::im2col(ins[0]->data.data() + (first + j) * xs.c * xs.plane(), g, cols.data() + j * p, ld);
        dw.noalias() += gm * cm.transpose();
      }
      if (need_x) {
        cm.noalias() = wm.transpose() * gm;
        for (std::int64_t j = 0; j < count; ++j)
          detail::col2im_accumulate(cols.data() + j * p, g, dx.data() + (first + j) * xs.c * xs.plane(), ld);
      }
    }
    if (need_x) ins[0]->accumulate_grad(std::move(dx));
    if (need_w) ins[1]->accumulate_grad(Eigen::Map<const Buffer<Scalar>>(dw.data(), dw.size()));
  });
}

/// Per-channel batch normalization. In training mode the batch statistics
/// (biased variance) normalize the input and are folded into the running
/// estimates as new = (1 - momentum) * old + momentum * batch.
template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Buffer<Scalar>& running_mean, Buffer<Scalar>& running_var, bool training, double momentum,
                          double eps) {
  const Shape s = x.shape();
  const Shape ps{1, s.c, 1, 1};
  if (gamma.shape() != ps || beta.shape() != ps || running_mean.size() != s.c || running_var.size() != s.c)
    throw ShapeError("batch_norm: parameters do not have " + std::to_string(s.c) + " channels");
  const auto hw = s.plane();
  const auto m = s.n * hw;
  if (training && m < 2) throw std::invalid_argument("batch_norm: training mode needs at least 2 values per channel");

  const Scalar* xd = x.data().data();
  Buffer<Scalar> mean(s.c), inv_std(s.c);
  // Plane sums are vectorized in Scalar and combined in double.
  auto plane = [&](std::int64_t i, std::int64_t c) {
    return Eigen::Map<const Buffer<Scalar>>(xd + (i * s.c + c) * hw, hw);
  };
  if (training) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < s.n; ++i) acc += plane(i, c).sum();
      const double mu = acc / double(m);
      double sq = 0.0;
      for (std::int64_t i = 0; i < s.n; ++i) sq += (plane(i, c) - static_cast<Scalar>(mu)).square().sum();
      const double var = sq / double(m);
      mean[c] = static_cast<Scalar>(mu);
      inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(var + eps));
      running_mean[c] = static_cast<Scalar>((1.0 - momentum) * double(running_mean[c]) + momentum * mu);
      running_var[c] = static_cast<Scalar>((1.0 - momentum) * double(running_var[c]) + momentum * var);
    }
  } else {
    for (std::int64_t c = 0; c < s.c; ++c) {
      mean[c] = running_mean[c];
      inv_std[c] = static_cast<Scalar>(1.0 / std::sqrt(double(running_var[c]) + eps));
    }
  }

  Buffer<Scalar> xhat(s.numel());
  Buffer<Scalar> out(s.numel());
  for (std::int64_t i = 0; i < s.n; ++i)
    for (std::int64_t c = 0; c < s.c; ++c) {
      const auto off = (i * s.c + c) * hw;
      xhat.segment(off, hw) = (plane(i, c) - mean[c]) * inv_std[c];
      out.segment(off, hw) = xhat.segment(off, hw) * gamma[c] + beta[c];
    }

  return record_op<Scalar>(
      "batch_norm", s, std::move(out), {x, gamma, beta},
      [s, hw, m, training, inv_std = std::move(inv_std), xhat = std::move(xhat)](const Buffer<Scalar>& g, auto ins) {
        const auto& gam = ins[1]->data;
        std::vector<double> sum_g(s.c, 0.0), sum_gx(s.c, 0.0);
        for (std::int64_t i = 0; i < s.n; ++i)
          for (std::int64_t c = 0; c < s.c; ++c) {
            const auto off = (i * s.c + c) * hw;
            sum_g[c] += g.segment(off, hw).sum();
            sum_gx[c] += (g.segment(off, hw) * xhat.segment(off, hw)).sum();
          }
        if (ins[0]->requires_grad) {
          Buffer<Scalar> dx(s.numel());
          for (std::int64_t c = 0; c < s.c; ++c) {
            const Scalar k = gam[c] * inv_std[c];
            const Scalar mg = training ? static_cast<Scalar>(sum_g[c] / double(m)) : Scalar(0);
            const Scalar mgx = training ? static_cast<Scalar>(sum_gx[c] / double(m)) : Scalar(0);
            for (std::int64_t i = 0; i < s.n; ++i) {
              const auto off = (i * s.c + c) * hw;
              dx.segment(off, hw) = k * (g.segment(off, hw) - mg - xhat.segment(off, hw) * mgx);
            }
          }
          ins[0]->accumulate_grad(std::move(dx));
        }
        Buffer<Scalar> dgamma(s.c), dbeta(s.c);
        for (std::int64_t c = 0; c < s.c; ++c) {
          dgamma[c] = static_cast<Scalar>(sum_gx[c]);
          dbeta[c] = static_cast<Scalar>(sum_g[c]);
        }
        if (ins[1]->requires_grad) ins[1]->accumulate_grad(std::move(dgamma));
        if (ins[2]->requires_grad) ins[2]->accumulate_grad(std::move(dbeta));
      });
}

/// Zero-mean Gaussian with standard deviation sqrt(2 / fan_in), where fan_in
/// is c_in * kh * kw of the weight shape.
template <typename Scalar, typename Rng>
Tensor<Scalar> msra_init(Shape weight_shape, Rng& rng) {
  const auto fan_in = weight_shape.c * weight_shape.h * weight_shape.w;
  if (fan_in <= 0) throw std::invalid_argument("msra_init: zero fan-in for weight shape " + weight_shape.str());
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(fan_in)));
  Buffer<Scalar> data(weight_shape.numel());
  for (auto& v : data) v = static_cast<Scalar>(dist(rng));
  Tensor<Scalar> t(weight_shape, std::move(data));
  t.set_requires_grad();
  return t;
}

template <typename Scalar>
struct Conv2d {
  Tensor<Scalar> weight;
  int stride = 1;
  int padding = 1;

  Conv2d() = default;
  Conv2d(std::int64_t c_in, std::int64_t c_out, int kernel, int stride_, int padding_)
      : weight(Shape{c_out, c_in, kernel, kernel}), stride(stride_), padding(padding_) {
    weight.set_requires_grad();
  }

  template <typename Rng>
  void initialize(Rng& rng) {
    weight = msra_init<Scalar>(weight.shape(), rng);
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const { return conv2d(x, weight, stride, padding); }
};

enum class Mode { Training, Inference };

template <typename Scalar>
struct BatchNorm {
  static constexpr double kMomentum = 0.1;
  static constexpr double kEpsilon = 1e-5;

  Tensor<Scalar> gamma, beta;
  Buffer<Scalar> running_mean, running_var;
  double momentum = kMomentum;
  double eps = kEpsilon;

  BatchNorm() = default;
  explicit BatchNorm(std::int64_t channels)
      : gamma(Shape{1, channels, 1, 1}, Scalar(1)),
        beta(Shape{1, channels, 1, 1}, Scalar(0)),
        running_mean(Buffer<Scalar>::Zero(channels)),
        running_var(Buffer<Scalar>::Ones(channels)) {
    gamma.set_requires_grad();
    beta.set_requires_grad();
  }

  std::int64_t channels() const { return gamma.numel(); }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x, Mode mode) {
    return batch_norm(x, gamma, beta, running_mean, running_var, mode == Mode::Training, momentum, eps);
  }
};

/// Fully connected layer on (batch, features, 1, 1) inputs.
template <typename Scalar>
struct Linear {
  Tensor<Scalar> weight;  // (in, out, 1, 1)
  Tensor<Scalar> bias;    // (1, out, 1, 1)

  Linear() = default;
  Linear(std::int64_t in, std::int64_t out) : weight(Shape{in, out, 1, 1}), bias(Shape{1, out, 1, 1}) {
    weight.set_requires_grad();
    bias.set_requires_grad();
  }

  template <typename Rng>
  void initialize(Rng& rng) {
    const Shape s = weight.shape();
    // fan_in is the input feature count
    Tensor<Scalar> w = msra_init<Scalar>(Shape{s.c, s.n, 1, 1}, rng);
    weight = Tensor<Scalar>(s, std::move(w.data()));
    weight.set_requires_grad();
    bias = Tensor<Scalar>(bias.shape(), Scalar(0));
    bias.set_requires_grad();
  }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    const Shape s = x.shape();
    return add_row_bias(matmul(reshape(x, Shape{s.n, s.c * s.h * s.w, 1, 1}), weight), bias);
  }
};

}  // namespace sepdrop
