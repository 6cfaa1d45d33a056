#pragma once

#include <cmath>
#include <span>
#include <string>

#include "sepdrop/tensor.hpp"

namespace sepdrop {

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b) {
  if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
}

template <typename Scalar>
bool wants_grad(const std::shared_ptr<TensorImpl<Scalar>>& t) {
  return t->requires_grad;
}

inline std::uint64_t*& relu_pattern_sink() {
  thread_local std::uint64_t* sink = nullptr;
  return sink;
}

}  // namespace detail

/// While alive, folds the on/off pattern of every relu evaluated on this
/// thread into one hash. Finite differences are only meaningful when the
/// pattern is the same on both sides of the step.
class ReluPatternProbe {
 public:
  ReluPatternProbe() : previous_(detail::relu_pattern_sink()) { detail::relu_pattern_sink() = &hash_; }
  ~ReluPatternProbe() { detail::relu_pattern_sink() = previous_; }
  ReluPatternProbe(const ReluPatternProbe&) = delete;
  ReluPatternProbe& operator=(const ReluPatternProbe&) = delete;

  std::uint64_t take() { return std::exchange(hash_, kOffset); }

 private:
  static constexpr std::uint64_t kOffset = 1469598103934665603ULL;
  std::uint64_t hash_ = kOffset;
  std::uint64_t* previous_;
};

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("add", a.shape(), b.shape());
  return record_op<Scalar>("add", a.shape(), a.data() + b.data(), {a, b}, [](const Buffer<Scalar>& g, auto ins) {
    for (const auto& in : ins)
      if (in->requires_grad) in->accumulate_grad(g);
  });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  if (!std::isfinite(static_cast<double>(s))) throw std::invalid_argument("scale: non-finite factor");
  return record_op<Scalar>("scale", a.shape(), a.data() * s, {a}, [s](const Buffer<Scalar>& g, auto ins) {
    if (ins[0]->requires_grad) ins[0]->accumulate_grad(Buffer<Scalar>(g * s));
  });
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  return record_op<Scalar>("mul", a.shape(), a.data() * b.data(), {a, b}, [](const Buffer<Scalar>& g, auto ins) {
    if (ins[0]->requires_grad) ins[0]->accumulate_grad(g * ins[1]->data);
    if (ins[1]->requires_grad) ins[1]->accumulate_grad(g * ins[0]->data);
  });
}

/// Sum of all elements as a (1,1,1,1) tensor. Accumulates in double.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Buffer<Scalar> out(1);
  out[0] = static_cast<Scalar>(a.data().template cast<double>().sum());
  const auto n = a.numel();
  return record_op<Scalar>("sum", Shape{1, 1, 1, 1}, std::move(out), {a}, [n](const Buffer<Scalar>& g, auto ins) {
    if (ins[0]->requires_grad) ins[0]->accumulate_grad(Buffer<Scalar>::Constant(n, g[0]));
  });
}

/// Same data under a different shape of equal element count.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& a, Shape shape) {
  if (shape.numel() != a.numel())
    throw ShapeError("reshape: cannot view " + a.shape().str() + " as " + shape.str());
  return record_op<Scalar>("reshape", shape, a.data(), {a}, [](const Buffer<Scalar>& g, auto ins) {
    if (ins[0]->requires_grad) ins[0]->accumulate_grad(g);
  });
}

/// Product of matrices stored as (rows, cols, 1, 1) tensors.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const RowMat>;
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.h != 1 || sa.w != 1 || sb.h != 1 || sb.w != 1)
    throw ShapeError("matmul: operands must be matrices (r, c, 1, 1), got " + sa.str() + " and " + sb.str());
  if (sa.c != sb.n) throw ShapeError("matmul: inner dimensions differ " + sa.str() + " x " + sb.str());
  const auto m = sa.n, k = sa.c, n = sb.c;
  Buffer<Scalar> out(m * n);
  Eigen::Map<RowMat>(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  return record_op<Scalar>("matmul", Shape{m, n, 1, 1}, std::move(out), {a, b}, [m, k, n](const Buffer<Scalar>& g, auto ins) {
    MapC gm(g.data(), m, n);
    if (ins[0]->requires_grad) {
      Buffer<Scalar> ga(m * k);
      Eigen::Map<RowMat>(ga.data(), m, k).noalias() = gm * MapC(ins[1]->data.data(), k, n).transpose();
      ins[0]->accumulate_grad(std::move(ga));
    }
    if (ins[1]->requires_grad) {
      Buffer<Scalar> gb(k * n);
      Eigen::Map<RowMat>(gb.data(), k, n).noalias() = MapC(ins[0]->data.data(), m, k).transpose() * gm;
      ins[1]->accumulate_grad(std::move(gb));
    }
  });
}

/// Channels [begin, end) of every sample.
template <typename Scalar>
Tensor<Scalar> slice_channels(const Tensor<Scalar>& a, std::int64_t begin, std::int64_t end) {
  const Shape s = a.shape();
  if (begin < 0 || end > s.c || begin > end)
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " + s.str());
  const Shape os{s.n, end - begin, s.h, s.w};
  const auto hw = s.plane();
  Buffer<Scalar> out(os.numel());
  for (std::int64_t i = 0; i < s.n; ++i)
    out.segment(i * os.c * hw, os.c * hw) = a.data().segment((i * s.c + begin) * hw, os.c * hw);
  return record_op<Scalar>("slice_channels", os, std::move(out), {a}, [s, os, begin, hw](const Buffer<Scalar>& g, auto ins) {
    if (!ins[0]->requires_grad) return;
    Buffer<Scalar> ga = Buffer<Scalar>::Zero(s.numel());
    for (std::int64_t i = 0; i < s.n; ++i)
      ga.segment((i * s.c + begin) * hw, os.c * hw) = g.segment(i * os.c * hw, os.c * hw);
    ins[0]->accumulate_grad(std::move(ga));
  });
}

/// Stacks `a` and `b` along the channel axis.
template <typename Scalar>
Tensor<Scalar> concat_channels(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const Shape sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat_channels: incompatible shapes " + sa.str() + " and " + sb.str());
  const Shape os{sa.n, sa.c + sb.c, sa.h, sa.w};
  const auto hw = sa.plane();
  Buffer<Scalar> out(os.numel());
  for (std::int64_t i = 0; i < sa.n; ++i) {
    out.segment(i * os.c * hw, sa.c * hw) = a.data().segment(i * sa.c * hw, sa.c * hw);
    out.segment((i * os.c + sa.c) * hw, sb.c * hw) = b.data().segment(i * sb.c * hw, sb.c * hw);
  }
  return record_op<Scalar>("concat_channels", os, std::move(out), {a, b}, [sa, sb, os, hw](const Buffer<Scalar>& g, auto ins) {
    if (ins[0]->requires_grad) {
      Buffer<Scalar> ga(sa.numel());
      for (std::int64_t i = 0; i < sa.n; ++i) ga.segment(i * sa.c * hw, sa.c * hw) = g.segment(i * os.c * hw, sa.c * hw);
      ins[0]->accumulate_grad(std::move(ga));
    }
    if (ins[1]->requires_grad) {
      Buffer<Scalar> gb(sb.numel());
      for (std::int64_t i = 0; i < sb.n; ++i)
        gb.segment(i * sb.c * hw, sb.c * hw) = g.segment((i * os.c + sa.c) * hw, sb.c * hw);
      ins[1]->accumulate_grad(std::move(gb));
    }
  });
}

/// Appends all-zero channels up to `channels`. The gradient of the padded
/// channels is discarded.
template <typename Scalar>
Tensor<Scalar> pad_channels(const Tensor<Scalar>& a, std::int64_t channels) {
  const Shape s = a.shape();
  if (channels < s.c)
    throw ShapeError("pad_channels: target " + std::to_string(channels) + " is narrower than input " + s.str());
  const Shape os{s.n, channels, s.h, s.w};
  const auto hw = s.plane();
  Buffer<Scalar> out = Buffer<Scalar>::Zero(os.numel());
  for (std::int64_t i = 0; i < s.n; ++i) out.segment(i * os.c * hw, s.c * hw) = a.data().segment(i * s.c * hw, s.c * hw);
  return record_op<Scalar>("pad_channels", os, std::move(out), {a}, [s, os, hw](const Buffer<Scalar>& g, auto ins) {
    if (!ins[0]->requires_grad) return;
    Buffer<Scalar> ga(s.numel());
    for (std::int64_t i = 0; i < s.n; ++i) ga.segment(i * s.c * hw, s.c * hw) = g.segment(i * os.c * hw, s.c * hw);
    ins[0]->accumulate_grad(std::move(ga));
  });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  if (std::uint64_t* h = detail::relu_pattern_sink()) {
    for (Scalar v : a.data()) *h = (*h ^ std::uint64_t(v > Scalar(0))) * 1099511628211ULL;
  }
  return record_op<Scalar>("relu", a.shape(), a.data().max(Scalar(0)), {a}, [](const Buffer<Scalar>& g, auto ins) {
    if (ins[0]->requires_grad) ins[0]->accumulate_grad((ins[0]->data > Scalar(0)).select(g, Scalar(0)));
  });
}

/// 2x2 average pooling with stride 2.
template <typename Scalar>
Tensor<Scalar> avgpool2x2(const Tensor<Scalar>& a) {
  const Shape s = a.shape();
  if (s.h % 2 != 0 || s.w % 2 != 0) throw ShapeError("avgpool2x2: spatial extent not divisible by 2 in " + s.str());
  const Shape os{s.n, s.c, s.h / 2, s.w / 2};
  Buffer<Scalar> out(os.numel());
  const Scalar* x = a.data().data();
  for (std::int64_t p = 0; p < s.n * s.c; ++p) {
    const Scalar* src = x + p * s.plane();
    Scalar* dst = out.data() + p * os.plane();
    for (std::int64_t i = 0; i < os.h; ++i)
      for (std::int64_t j = 0; j < os.w; ++j) {
        const Scalar* q = src + (2 * i) * s.w + 2 * j;
        dst[i * os.w + j] = (q[0] + q[1] + q[s.w] + q[s.w + 1]) * Scalar(0.25);
      }
  }
  return record_op<Scalar>("avgpool2x2", os, std::move(out), {a}, [s, os](const Buffer<Scalar>& g, auto ins) {
    if (!ins[0]->requires_grad) return;
    Buffer<Scalar> ga(s.numel());
    for (std::int64_t p = 0; p < s.n * s.c; ++p) {
      const Scalar* src = g.data() + p * os.plane();
      Scalar* dst = ga.data() + p * s.plane();
      for (std::int64_t i = 0; i < s.h; ++i)
        for (std::int64_t j = 0; j < s.w; ++j) dst[i * s.w + j] = src[(i / 2) * os.w + j / 2] * Scalar(0.25);
    }
    ins[0]->accumulate_grad(std::move(ga));
  });
}

/// Mean over the spatial plane; output (n, c, 1, 1).
template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& a) {
  const Shape s = a.shape();
  const auto hw = s.plane();
  if (hw == 0) throw ShapeError("global_avg_pool: empty spatial extent in " + s.str());
  Buffer<Scalar> out(s.n * s.c);
  for (std::int64_t p = 0; p < s.n * s.c; ++p) out[p] = a.data().segment(p * hw, hw).mean();
  return record_op<Scalar>("global_avg_pool", Shape{s.n, s.c, 1, 1}, std::move(out), {a}, [s, hw](const Buffer<Scalar>& g, auto ins) {
    if (!ins[0]->requires_grad) return;
    Buffer<Scalar> ga(s.numel());
    for (std::int64_t p = 0; p < s.n * s.c; ++p) ga.segment(p * hw, hw).setConstant(g[p] / Scalar(hw));
    ins[0]->accumulate_grad(std::move(ga));
  });
}

/// x (rows, cols, 1, 1) plus a row vector bias (1, cols, 1, 1) on every row.
template <typename Scalar>
Tensor<Scalar> add_row_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& bias) {
  const Shape s = x.shape();
  if (s.h != 1 || s.w != 1 || bias.shape() != Shape{1, s.c, 1, 1})
    throw ShapeError("add_row_bias: bias " + bias.shape().str() + " does not fit " + s.str());
  Buffer<Scalar> out = x.data();
  for (std::int64_t i = 0; i < s.n; ++i) out.segment(i * s.c, s.c) += bias.data();
  return record_op<Scalar>("add_row_bias", s, std::move(out), {x, bias}, [s](const Buffer<Scalar>& g, auto ins) {
    if (ins[0]->requires_grad) ins[0]->accumulate_grad(g);
    if (ins[1]->requires_grad) {
      Buffer<Scalar> gb = Buffer<Scalar>::Zero(s.c);
      for (std::int64_t i = 0; i < s.n; ++i) gb += g.segment(i * s.c, s.c);
      ins[1]->accumulate_grad(std::move(gb));
    }
  });
}

/// Mean negative log-likelihood of `labels` under softmax(logits).
/// logits: (batch, classes, 1, 1). Log-sum-exp is max-shifted and
/// accumulated in double.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  const Shape s = logits.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("softmax_cross_entropy: logits must be (batch, classes, 1, 1), got " + s.str());
  if (static_cast<std::int64_t>(labels.size()) != s.n)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(s.n));
  if (s.n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  const auto k = s.c;
  Buffer<Scalar> probs(s.numel());
  std::vector<int> y(labels.begin(), labels.end());
  double total = 0.0;
  for (std::int64_t i = 0; i < s.n; ++i) {
    if (y[i] < 0 || y[i] >= k)
      throw std::out_of_range("softmax_cross_entropy: label " + std::to_string(y[i]) + " outside [0, " + std::to_string(k) + ")");
    const Scalar* z = logits.data().data() + i * k;
    double zmax = z[0];
    for (std::int64_t j = 1; j < k; ++j) zmax = std::max(zmax, double(z[j]));
    double denom = 0.0;
    for (std::int64_t j = 0; j < k; ++j) denom += std::exp(double(z[j]) - zmax);
    const double lse = zmax + std::log(denom);
    total += lse - double(z[y[i]]);
    for (std::int64_t j = 0; j < k; ++j) probs[i * k + j] = static_cast<Scalar>(std::exp(double(z[j]) - lse));
  }
  Buffer<Scalar> out(1);
  out[0] = static_cast<Scalar>(total / double(s.n));
  return record_op<Scalar>("softmax_cross_entropy", Shape{1, 1, 1, 1}, std::move(out), {logits},
                           [s, probs = std::move(probs), y = std::move(y)](const Buffer<Scalar>& g, auto ins) {
                             if (!ins[0]->requires_grad) return;
                             Buffer<Scalar> gl = probs;
                             for (std::int64_t i = 0; i < s.n; ++i) gl[i * s.c + y[i]] -= Scalar(1);
                             gl *= g[0] / Scalar(s.n);
                             ins[0]->accumulate_grad(std::move(gl));
                           });
}

}  // namespace sepdrop
