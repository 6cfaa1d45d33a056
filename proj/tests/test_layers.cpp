#include <doctest.h>

#include <cmath>
#include <numeric>

#include "sepdrop/layers.hpp"
#include "sepdrop/rng.hpp"
#include "support.hpp"

using namespace sepdrop;
using testing_support::max_relative_error;
using testing_support::numeric_gradient;
using testing_support::uniform;

namespace {

// Direct 7-loop cross-correlation.
std::vector<double> naive_conv(const Tensor<double>& x, const Tensor<double>& w, int stride, int pad) {
  const Shape xs = x.shape(), ws = w.shape();
  const std::int64_t oh = (xs.h + 2 * pad - ws.h) / stride + 1, ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  std::vector<double> out(xs.n * ws.n * oh * ow, 0.0);
  for (std::int64_t n = 0; n < xs.n; ++n)
    for (std::int64_t o = 0; o < ws.n; ++o)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j) {
          double acc = 0;
          for (std::int64_t c = 0; c < xs.c; ++c)
            for (std::int64_t a = 0; a < ws.h; ++a)
              for (std::int64_t b = 0; b < ws.w; ++b) {
                const auto y = i * stride + a - pad, z = j * stride + b - pad;
                if (y < 0 || z < 0 || y >= xs.h || z >= xs.w) continue;
                acc += x.at(n, c, y, z) * w.at(o, c, a, b);
              }
          out[((n * ws.n + o) * oh + i) * ow + j] = acc;
        }
  return out;
}

template <typename Scalar>
Tensor<Scalar> bn_train(const Tensor<Scalar>& x, BatchNorm<Scalar>& bn) {
  return bn(x, Mode::Training);
}

}  // namespace

TEST_CASE("conv2d") {
  SUBCASE("1x1 unit kernel is the identity") {
    auto x = uniform<float>({2, 1, 4, 4}, 1);
    Tensor<float> w({1, 1, 1, 1}, {1.f});
    CHECK((conv2d(x, w, 1, 0).data() == x.data()).all());
  }
  SUBCASE("3x3 ones on a constant 4x4 image: 9 inside, 4 at corners, 6 on edges") {
    Tensor<float> x({1, 1, 4, 4}, 1.f);
    Tensor<float> w({1, 1, 3, 3}, 1.f);
    Tensor<float> y = conv2d(x, w, 1, 1);
    CHECK(y.shape() == Shape{1, 1, 4, 4});
    CHECK(y.at(0, 0, 1, 1) == 9.f);
    CHECK(y.at(0, 0, 2, 2) == 9.f);
    for (auto [i, j] : {std::pair{0, 0}, {0, 3}, {3, 0}, {3, 3}}) CHECK(y.at(0, 0, i, j) == 4.f);
    CHECK(y.at(0, 0, 0, 1) == 6.f);
  }
  SUBCASE("matches a direct loop at several strides and paddings") {
    for (auto [stride, pad] : {std::pair{1, 1}, {2, 1}, {1, 0}, {2, 0}}) {
      auto x = uniform<double>({2, 3, 7, 6}, 2);
      auto w = uniform<double>({4, 3, 3, 3}, 3);
      const auto ref = naive_conv(x, w, stride, pad);
      Tensor<double> y = conv2d(x, w, stride, pad);
      REQUIRE(std::size_t(y.numel()) == ref.size());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
  SUBCASE("a batch larger than one lowering chunk gives the same result per sample") {
    auto x = uniform<float>({40, 2, 8, 8}, 4);
    auto w = uniform<float>({3, 2, 3, 3}, 5);
    Tensor<float> all = conv2d(x, w, 1, 1);
    Buffer<float> last = x.data().tail(2 * 64);
    Tensor<float> one = conv2d(Tensor<float>({1, 2, 8, 8}, last), w, 1, 1);
    CHECK((all.data().tail(3 * 64) == one.data()).all());
  }
  SUBCASE("stride 1, padding 1, kernel 3 preserves the spatial extent") {
    Tensor<float> y = conv2d(Tensor<float>(Shape{1, 2, 9, 5}), Tensor<float>(Shape{3, 2, 3, 3}), 1, 1);
    CHECK(y.shape() == Shape{1, 3, 9, 5});
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(conv2d(Tensor<float>(Shape{1, 2, 4, 4}), Tensor<float>(Shape{1, 3, 3, 3}), 1, 1), ShapeError);
    CHECK_THROWS_AS(conv2d(Tensor<float>(Shape{1, 1, 2, 2}), Tensor<float>(Shape{1, 1, 3, 3}), 1, 0), ShapeError);
  }
  SUBCASE("weight and input gradients on a random 2x3x5x5 input") {
    auto x = uniform<double>({2, 3, 5, 5}, 6);
    auto w = uniform<double>({4, 3, 3, 3}, 7);
    auto r = uniform<double>({2, 4, 5, 5}, 8);
    auto loss = [&] { return sum(mul(conv2d(x, w, 1, 1), r)); };
    backward(loss());
    NoGradGuard ng;
    auto f = [&] { return double(loss().item()); };
    CHECK(max_relative_error(w.grad(), numeric_gradient<double>(f, w, 1e-6)) < 1e-3);
    CHECK(max_relative_error(x.grad(), numeric_gradient<double>(f, x, 1e-6)) < 1e-3);
  }
}

TEST_CASE("batch_norm") {
  SUBCASE("constant channels normalize to zero") {
    Tensor<float> x({4, 2, 2, 2}, 3.5f);
    BatchNorm<float> bn(2);
    CHECK((bn_train(x, bn).data().abs() < 1e-6f).all());
  }
  SUBCASE("training output has zero mean and unit variance per channel") {
    auto x = uniform<float>({8, 3, 4, 4}, 9, -3.0, 5.0);
    BatchNorm<float> bn(3);
    Tensor<float> y = bn_train(x, bn);
    for (int c = 0; c < 3; ++c) {
      double s = 0, sq = 0;
      for (int n = 0; n < 8; ++n)
        for (int i = 0; i < 16; ++i) s += y[(n * 3 + c) * 16 + i];
      const double mean = s / 128;
      for (int n = 0; n < 8; ++n)
        for (int i = 0; i < 16; ++i) sq += std::pow(y[(n * 3 + c) * 16 + i] - mean, 2);
      CHECK(std::abs(mean) < 1e-4);
      CHECK(std::abs(sq / 128 - 1.0) < 1e-4);
    }
  }
  SUBCASE("running statistics follow 0.9 old + 0.1 batch with the biased variance") {
    Tensor<double> x({2, 1, 1, 2}, {1.0, 2.0, 3.0, 6.0});
    BatchNorm<double> bn(1);
    bn_train(x, bn);
    // mean 3, biased variance (4 + 1 + 0 + 9) / 4 = 3.5
    CHECK(bn.running_mean[0] == doctest::Approx(0.3));
    CHECK(bn.running_var[0] == doctest::Approx(0.9 + 0.35));
  }
  SUBCASE("inference uses running statistics and is affine") {
    BatchNorm<double> bn(2);
    bn.running_mean << 0.5, -1.0;
    bn.running_var << 4.0, 0.25;
    auto x = uniform<double>({3, 2, 2, 2}, 10);
    Tensor<double> once = bn(x, Mode::Inference);
    Tensor<double> twice = bn(once, Mode::Inference);
    for (int n = 0; n < 3; ++n)
      for (int c = 0; c < 2; ++c)
        for (int i = 0; i < 4; ++i) {
          const double m = bn.running_mean[c], s = std::sqrt(bn.running_var[c] + 1e-5);
          const double v = x[(n * 2 + c) * 4 + i];
          CHECK(once[(n * 2 + c) * 4 + i] == doctest::Approx((v - m) / s).epsilon(1e-12));
          CHECK(twice[(n * 2 + c) * 4 + i] == doctest::Approx(((v - m) / s - m) / s).epsilon(1e-5));
        }
  }
  SUBCASE("single value per channel in training mode is rejected") {
    BatchNorm<float> bn(2);
    CHECK_THROWS(bn_train(Tensor<float>(Shape{1, 2, 1, 1}), bn));
  }
  SUBCASE("gradient on a 4x3x2x2 input") {
    auto x = uniform<double>({4, 3, 2, 2}, 11);
    auto r = uniform<double>({4, 3, 2, 2}, 12);
    BatchNorm<double> bn(3);
    bn.gamma.data() << 0.7, 1.3, -0.4;
    bn.beta.data() << 0.1, -0.2, 0.3;
    auto loss = [&] { return sum(mul(bn_train(x, bn), r)); };
    backward(loss());
    NoGradGuard ng;
    auto f = [&] { return double(loss().item()); };
    CHECK(max_relative_error(x.grad(), numeric_gradient<double>(f, x, 1e-6)) < 1e-3);
    CHECK(max_relative_error(bn.gamma.grad(), numeric_gradient<double>(f, bn.gamma, 1e-6)) < 1e-3);
    CHECK(max_relative_error(bn.beta.grad(), numeric_gradient<double>(f, bn.beta, 1e-6)) < 1e-3);
  }
}

TEST_CASE("relu, pooling, linear and cross-entropy") {
  SUBCASE("relu values") {
    Tensor<float> x({1, 1, 1, 3}, {-1.f, 0.f, 2.f});
    Tensor<float> y = relu(x);
    CHECK(y[0] == 0.f);
    CHECK(y[1] == 0.f);
    CHECK(y[2] == 2.f);
  }
  SUBCASE("uniform logits give ln 10") {
    Tensor<float> logits({3, 10, 1, 1}, 0.25f);
    const std::vector<int> labels{0, 4, 9};
    CHECK(softmax_cross_entropy(logits, std::span<const int>(labels)).item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
  }
  SUBCASE("cross-entropy is non-negative and vanishes only for a dominant correct logit") {
    auto logits = uniform<double>({5, 4, 1, 1}, 13, -3, 3);
    const std::vector<int> labels{0, 1, 2, 3, 1};
    CHECK(softmax_cross_entropy(logits, std::span<const int>(labels)).item() > 0.0);
    Tensor<double> sure({1, 3, 1, 1}, {0.0, 60.0, 0.0});
    const std::vector<int> right{1}, wrong{0};
    CHECK(softmax_cross_entropy(sure, std::span<const int>(right)).item() < 1e-20);
    CHECK(softmax_cross_entropy(sure, std::span<const int>(wrong)).item() > 1.0);
  }
  SUBCASE("errors") {
    const std::vector<int> bad{10};
    CHECK_THROWS_AS(softmax_cross_entropy(Tensor<float>(Shape{1, 10, 1, 1}), std::span<const int>(bad)), std::out_of_range);
    CHECK_THROWS_AS(avgpool2x2(Tensor<float>(Shape{1, 1, 3, 4})), ShapeError);
  }
  SUBCASE("avgpool of a ramp") {
    Tensor<double> x({1, 1, 2, 4}, {0, 1, 2, 3, 4, 5, 6, 7});
    Tensor<double> y = avgpool2x2(x);
    CHECK(y[0] == 2.5);
    CHECK(y[1] == 4.5);
  }
  SUBCASE("every op passes a central-difference check") {
    auto x = uniform<double>({2, 3, 4, 4}, 14);
    // keep relu inputs away from the kink
    for (auto& v : x.data())
      if (std::abs(v) < 0.05) v = 0.1;
    auto r4 = uniform<double>({2, 3, 4, 4}, 15);
    auto r2 = uniform<double>({2, 3, 2, 2}, 16);
    auto r1 = uniform<double>({2, 3, 1, 1}, 17);
    auto w = uniform<double>({3, 5, 1, 1}, 18);
    auto b = uniform<double>({1, 5, 1, 1}, 19);
    auto logits = uniform<double>({4, 6, 1, 1}, 20, -2, 2);
    const std::vector<int> labels{5, 0, 2, 2};
    const std::vector<std::pair<const char*, std::function<Tensor<double>()>>> cases = {
        {"relu", [&] { return sum(mul(relu(x), r4)); }},
        {"avgpool", [&] { return sum(mul(avgpool2x2(x), r2)); }},
        {"global_avg_pool", [&] { return sum(mul(global_avg_pool(x), r1)); }},
        {"linear", [&] { return sum(add_row_bias(matmul(reshape(global_avg_pool(x), {2, 3, 1, 1}), w), b)); }},
        {"softmax_cross_entropy", [&] { return softmax_cross_entropy(logits, std::span<const int>(labels)); }},
    };
    for (const auto& [name, loss] : cases) {
      const std::string op = name;
      CAPTURE(op);
      Tensor<double>& leaf = std::string(name) == "softmax_cross_entropy" ? logits : x;
      leaf.zero_grad();
      backward(loss());
      NoGradGuard ng;
      CHECK(max_relative_error(leaf.grad(), numeric_gradient<double>([&] { return double(loss().item()); }, leaf, 1e-6)) <
            1e-3);
    }
  }
}

TEST_CASE("msra initialization") {
  SUBCASE("16 to 16 channels, 3x3: sample std within 2% of sqrt(2 / 144)") {
    Rng rng = derive_stream(3, {1});
    std::vector<double> all;
    while (all.size() < 100000) {
      Tensor<float> w = msra_init<float>({16, 16, 3, 3}, rng);
      all.insert(all.end(), w.data().begin(), w.data().end());
    }
    const double mean = std::accumulate(all.begin(), all.end(), 0.0) / all.size();
    double sq = 0;
    for (double v : all) sq += (v - mean) * (v - mean);
    const double sigma = std::sqrt(sq / all.size());
    CHECK(std::abs(sigma / std::sqrt(2.0 / 144.0) - 1.0) < 0.02);
  }
  SUBCASE("fan-in 2 gives unit std") {
    Rng rng = derive_stream(4, {1});
    double sq = 0;
    const int draws = 50;
    for (int i = 0; i < draws * 1000; i += 2) {
      Tensor<double> w = msra_init<double>({1, 2, 1, 1}, rng);
      sq += w[0] * w[0] + w[1] * w[1];
    }
    CHECK(std::sqrt(sq / (draws * 1000)) == doctest::Approx(1.0).epsilon(0.02));
  }
  SUBCASE("identical seeds give identical weights") {
    Rng a = derive_stream(9, {1}), b = derive_stream(9, {1});
    CHECK((msra_init<float>({4, 3, 3, 3}, a).data() == msra_init<float>({4, 3, 3, 3}, b).data()).all());
  }
  SUBCASE("zero fan-in is rejected") {
    Rng rng = derive_stream(0, {1});
    CHECK_THROWS(msra_init<float>({4, 0, 3, 3}, rng));
  }
  SUBCASE("convolutions carry no bias and BN starts at gamma 1, beta 0") {
    Conv2d<float> conv(3, 4, 3, 1, 1);
    CHECK(conv.weight.shape() == Shape{4, 3, 3, 3});
    BatchNorm<float> bn(4);
    CHECK((bn.gamma.data() == 1.f).all());
    CHECK((bn.beta.data() == 0.f).all());
    CHECK((bn.running_var > 0.f).all());
  }
}
