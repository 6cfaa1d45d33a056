#include <doctest.h>

#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "sepdrop/trainer.hpp"
#include "support.hpp"

using namespace sepdrop;
using testing_support::bitwise_equal;
using testing_support::evaluate_every;
using testing_support::small_config;
using testing_support::small_data;

namespace {

template <typename Scalar>
std::vector<NamedTensor<Scalar>> one_parameter(Scalar w) {
  Tensor<Scalar> t(Shape{1, 1, 1, 1}, w);
  t.set_requires_grad();
  return {{"w", t}};
}

void set_grad(std::vector<NamedTensor<double>>& p, double g) { p[0].tensor.grad() = Buffer<double>::Constant(1, g); }

// Mean cross-entropy over a whole normalized set with batch statistics and
// every gate open; no parameter or running-statistic side effects that matter.
double full_training_loss(Network<float>& net, const LabeledImageSet& set) {
  NoGradGuard ng;
  Tensor<float> logits = net.forward(images_to_tensor<float>(set, 0, set.count), net.pinned_gates(true));
  return softmax_cross_entropy(logits, std::span<const int>(set.labels)).item();
}

}  // namespace

TEST_CASE("Nesterov SGD") {
  SUBCASE("no momentum, no decay: plain SGD") {
    auto p = one_parameter(1.0);
    SgdNesterov<double> opt(p, 0.0, 0.0);
    set_grad(p, 0.5);
    opt.step(p, 0.1);
    CHECK(p[0].tensor[0] == doctest::Approx(0.95).epsilon(1e-15));
  }
  SUBCASE("two momentum steps by hand") {
    auto p = one_parameter(0.0);
    SgdNesterov<double> opt(p, 0.9, 0.0);
    set_grad(p, 1.0);
    opt.step(p, 1.0);
    CHECK(opt.velocities()[0][0] == doctest::Approx(1.0));
    CHECK(p[0].tensor[0] == doctest::Approx(-1.9));
    set_grad(p, 1.0);
    opt.step(p, 1.0);
    CHECK(opt.velocities()[0][0] == doctest::Approx(1.9));
    CHECK(p[0].tensor[0] == doctest::Approx(-4.61));
  }
  SUBCASE("weight decay alone shrinks by 1 - lr wd per step") {
    auto p = one_parameter(2.0);
    SgdNesterov<double> opt(p, 0.0, 0.01);
    for (int s = 1; s <= 5; ++s) {
      set_grad(p, 0.0);
      opt.step(p, 0.5);
      CHECK(p[0].tensor[0] == doctest::Approx(2.0 * std::pow(1 - 0.5 * 0.01, s)).epsilon(1e-14));
    }
  }
  SUBCASE("BN affine terms can be exempted from decay") {
    Tensor<double> gamma(Shape{1, 1, 1, 1}, 1.0), conv(Shape{1, 1, 1, 1}, 1.0);
    std::vector<NamedTensor<double>> p{{"s1.b1.bn1.gamma", gamma}, {"s1.b1.conv1.weight", conv}};
    SgdNesterov<double> opt(p, 0.0, 0.1, false);
    for (auto& q : p) q.tensor.grad() = Buffer<double>::Zero(1);
    opt.step(p, 1.0);
    CHECK(gamma[0] == 1.0);
    CHECK(conv[0] == doctest::Approx(0.9));
  }
  SUBCASE("missing gradient names the parameter") {
    auto p = one_parameter(1.0);
    SgdNesterov<double> opt(p, 0.9, 0.0);
    try {
      opt.step(p, 0.1);
      FAIL("expected MissingGradientError");
    } catch (const MissingGradientError& e) {
      CHECK(std::string(e.what()).find("w") != std::string::npos);
    }
  }
}

TEST_CASE("optimizer matches a scalar 64-bit recurrence over random 10-step trajectories") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    const int n = 7;
    const double lr = 0.05 + 0.2 * std::abs(u(rng)), momentum = 0.9, wd = 1e-3;
    Tensor<float> t(Shape{1, n, 1, 1});
    std::vector<double> w(n), v(n, 0.0);
    for (int i = 0; i < n; ++i) t[i] = float(w[i] = u(rng));
    for (int i = 0; i < n; ++i) w[i] = t[i];
    std::vector<NamedTensor<float>> p{{"w", t}};
    SgdNesterov<float> opt(p, momentum, wd);
    for (int s = 0; s < 10; ++s) {
      Buffer<float> g(n);
      for (int i = 0; i < n; ++i) g[i] = float(u(rng));
      t.grad() = g;
      opt.step(p, lr);
      for (int i = 0; i < n; ++i) {
        const double gd = double(g[i]) + wd * w[i];
        v[i] = momentum * v[i] + gd;
        w[i] -= lr * (gd + momentum * v[i]);
      }
    }
    for (int i = 0; i < n; ++i) CHECK(std::abs(t[i] - w[i]) <= 1e-6 * std::max(1.0, std::abs(w[i])));
  }
}

TEST_CASE("weight decay at momentum 0 equals an L2 penalty of wd / 2 |w|^2") {
  const double lambda = 0.3, lr = 0.1;
  Tensor<double> x(Shape{1, 2, 1, 1}, {0.7, -1.2});
  auto run = [&](bool penalty) {
    Tensor<double> w(Shape{1, 2, 1, 1}, {0.5, 0.25});
    w.set_requires_grad();
    std::vector<NamedTensor<double>> p{{"w", w}};
    SgdNesterov<double> opt(p, 0.0, penalty ? 0.0 : lambda);
    for (int s = 0; s < 10; ++s) {
      w.zero_grad();
      Tensor<double> fit = sum(mul(w, x));
      Tensor<double> loss = mul(fit, fit);
      if (penalty) loss = add(loss, scale(sum(mul(w, w)), lambda / 2));
      backward(loss);
      opt.step(p, lr);
    }
    return std::vector<double>{w[0], w[1]};
  };
  const auto decayed = run(false), penalized = run(true);
  for (int i = 0; i < 2; ++i) CHECK(decayed[i] == doctest::Approx(penalized[i]).epsilon(1e-6));
}

TEST_CASE("training epochs") {
  SUBCASE("one epoch on 64 samples lowers the training loss in at least 9 of 10 seeds") {
    int improved = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto data = small_data(64, seed);
      Trainer<float> trainer(small_config(seed), data, nullptr, compute_preprocess(data), evaluate_every(0));
      const double before = full_training_loss(trainer.network(), trainer.normalized_train());
      trainer.train_epoch();
      const double after = full_training_loss(trainer.network(), trainer.normalized_train());
      improved += after < before;
    }
    CHECK(improved >= 9);
  }
  SUBCASE("lr 0 leaves every parameter bitwise unchanged") {
    auto cfg = small_config(3);
    cfg.initial_lr = 0.0;
    const auto data = small_data(64, 3);
    Trainer<float> trainer(cfg, data, nullptr, compute_preprocess(data), evaluate_every(0));
    Network<float> before = trainer.network().clone();
    trainer.train_epoch();
    auto a = before.parameters(), b = trainer.network().parameters();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(bitwise_equal(a[i].tensor, b[i].tensor));
  }
  SUBCASE("the metrics record carries the epoch, learning rate and a test error when evaluated") {
    const auto train = small_data(64, 4), test = small_data(40, 4, Split::Test);
    Trainer<float> trainer(small_config(4), train, &test, compute_preprocess(train), evaluate_every(2));
    const EpochMetrics first = trainer.train_epoch();
    CHECK(first.epoch == 0);
    CHECK(first.lr == 0.1);
    CHECK_FALSE(first.test_err.has_value());
    CHECK(first.train_err >= 0.0);
    CHECK(first.train_err <= 1.0);
    CHECK(std::isfinite(first.train_loss));
    const EpochMetrics second = trainer.train_epoch();
    REQUIRE(second.test_err.has_value());
    CHECK(*second.test_err >= 0.0);
    CHECK(trainer.train_epoch().lr == doctest::Approx(0.01));
  }
  SUBCASE("a non-finite loss aborts with the batch and learning rate") {
    const auto data = small_data(64, 5);
    Trainer<float> trainer(small_config(5), data, nullptr, compute_preprocess(data), evaluate_every(0));
    for (auto& p : trainer.network().parameters())
      if (p.name == "head.fc.bias") p.tensor[0] = std::numeric_limits<float>::quiet_NaN();
    try {
      trainer.train_epoch();
      FAIL("expected NonFiniteLossError");
    } catch (const NonFiniteLossError& e) {
      const std::string what = e.what();
      CHECK(what.find("batch 0") != std::string::npos);
      CHECK(what.find("lr 0.1") != std::string::npos);
    }
  }
  SUBCASE("a training set smaller than one batch is rejected") {
    const auto data = small_data(8, 6);
    CHECK_THROWS_AS(Trainer<float>(small_config(6), data, nullptr, compute_preprocess(data)), DataError);
  }
}

TEST_CASE("gates pinned open: PyramidSepDrop trains exactly like PyramidNet") {
  const auto data = small_data(64, 7);
  const auto pre = compute_preprocess(data);
  Trainer<float> sep(small_config(7, VariantKind::PyramidSepDrop), data, nullptr, pre, evaluate_every(0, true));
  Trainer<float> pyr(small_config(7, VariantKind::PyramidNet), data, nullptr, pre, evaluate_every(0, true));
  for (int e = 0; e < 2; ++e) {
    const auto a = sep.train_epoch(), b = pyr.train_epoch();
    CHECK(a.train_loss == b.train_loss);
    CHECK(a.train_err == b.train_err);
  }
  auto pa = sep.network().parameters(), pb = pyr.network().parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(bitwise_equal(pa[i].tensor, pb[i].tensor));
}

TEST_CASE("evaluation") {
  SUBCASE("one-hot logits make no mistakes") {
    Tensor<float> logits(Shape{3, 4, 1, 1});
    const std::vector<int> labels{2, 0, 3};
    for (int i = 0; i < 3; ++i) logits[i * 4 + labels[i]] = 1.f;
    CHECK(count_top1_errors(logits, std::span<const int>(labels)) == 0);
  }
  SUBCASE("constant logits on balanced 10-class labels: ties go to class 0, error 0.9") {
    Tensor<float> logits(Shape{100, 10, 1, 1}, 0.3f);
    std::vector<int> labels(100);
    for (int i = 0; i < 100; ++i) labels[i] = i % 10;
    CHECK(double(count_top1_errors(logits, std::span<const int>(labels))) / 100 == doctest::Approx(0.9));
  }
  SUBCASE("repeatable, mode-preserving, and rejects an empty set") {
    auto cfg = small_config(8);
    Rng rng = derive_stream(8, {1});
    auto net = Network<float>::build(cfg.network, rng);
    const auto data = small_data(30, 8);
    const auto normalized = normalize(data, compute_preprocess(data));
    const double a = evaluate(net, normalized, 7);
    CHECK(a == evaluate(net, normalized, 30));
    CHECK(net.mode() == Mode::Training);
    LabeledImageSet empty = subset(normalized, 0, 0);
    CHECK_THROWS_AS(evaluate(net, empty), DataError);
  }
}

TEST_CASE("metrics rows") {
  CHECK(metrics_header(false) == "epoch,lr,train_loss,train_err,test_err,seconds");
  CHECK(metrics_header(true) == "epoch,lr,train_loss,train_err,test_err,seconds,models");
  EpochMetrics m;
  m.epoch = 3;
  m.lr = 0.05;
  m.train_loss = 1.23456789;
  m.train_err = 0.25;
  m.seconds = 2.0;
  CHECK(format_metrics_row(m, false) == "3,0.05,1.23457,0.25,,2");
  m.test_err = 0.125;
  m.models = 4;
  CHECK(format_metrics_row(m, true) == "3,0.05,1.23457,0.25,0.125,2,4");
}
