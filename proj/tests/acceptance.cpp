// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset.

#include <chrono>
#include <cmath>
#include <cstring>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "sepdrop/allocator.hpp"
#include "sepdrop/gradcheck.hpp"
#include "sepdrop/trainer.hpp"
#include "shortcut_oracle.hpp"

using namespace sepdrop;

namespace {

// Tolerances and budgets, pinned.
constexpr double kLayerGradTol = 1e-3;
constexpr double kNetworkGradTol = 1e-2;
constexpr double kExpectationTol = 1e-5;
constexpr double kShortcutOracleTol = 1e-6;
constexpr double kMultiModelTol = 1e-5;
constexpr double kBnCouplingMin = 1e-3;  // "measurably nonzero"
constexpr double kTrainErrMax = 0.05;
constexpr int kTrainSeeds = 10;
constexpr int kTrainSeedsRequired = 9;
constexpr int kTrainEpochs = 30;
constexpr double kGapSlack = 0.02;
constexpr int kGapSeeds = 5;
constexpr int kGapEpochs = 15;

TrainerOptions no_eval() {
  TrainerOptions o;
  o.eval_every = 0;
  return o;
}

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

template <typename Scalar>
bool same_bits(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), sizeof(Scalar) * a.numel()) == 0;
}

template <typename Scalar>
bool same_parameters(Network<Scalar>& a, Network<Scalar>& b) {
  auto pa = a.parameters(), pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!same_bits(pa[i].tensor, pb[i].tensor)) return false;
  return true;
}

template <typename Scalar>
Tensor<Scalar> random_input(Shape s, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Buffer<Scalar> d(s.numel());
  for (auto& v : d) v = static_cast<Scalar>(u(rng));
  return Tensor<Scalar>(s, std::move(d));
}

NetworkSpec spec_of(VariantKind v, int depth, double alpha, double p_last = 0.5) {
  NetworkSpec s;
  s.variant = v;
  s.depth = depth;
  s.alpha = alpha;
  s.p_last = p_last;
  return s;
}

template <typename Scalar>
Network<Scalar> build(const NetworkSpec& s, std::uint64_t seed) {
  Rng rng = derive_stream(seed, {1});
  return Network<Scalar>::build(s, rng);
}

// The recipe at desk scale: depth 8, alpha 5, batch 128, milestones at 50%
// and 75% of the epochs, lr 0.1.
TrainConfig desk_recipe(std::uint64_t seed, VariantKind v, int depth, int epochs) {
  TrainConfig cfg;
  cfg.network = spec_of(v, depth, alpha_for_depth(depth));
  cfg.initial_lr = 0.1;
  cfg.total_epochs = epochs;
  cfg.milestones = {epochs / 2, epochs * 3 / 4};
  cfg.batch_size = 128;
  cfg.seed = seed;
  return cfg;
}

Outcome configuration_exactness() {
  bool ok = alpha_for_depth(110) == 90.0 && alpha_for_depth(146) == 120.0 && alpha_for_depth(182) == 150.0;
  TrainConfig cfg;
  ok = ok && lr_at_epoch(cfg, 0) == 0.5 && lr_at_epoch(cfg, 150) == 0.05 && lr_at_epoch(cfg, 225) == 0.005;
  return {ok, "alpha(110,146,182) = 90,120,150; lr(0,150,225) = 0.5,0.05,0.005 exactly"};
}

Outcome gradient_suite() {
  GradcheckOptions layer;
  GradcheckOptions network;
  network.floor = 5e-2;
  network.max_coordinates = 16;
  network.skip_kinks = true;
  double worst_layer = 0, worst_net = 0;
  std::string failed;
  for (const auto& c : standard_gradcheck_components(spec_of(VariantKind::PyramidSepDrop, 8, 5), layer, kLayerGradTol,
                                                     network, kNetworkGradTol)) {
    const GradcheckResult r = c.run();
    if (!r.passed()) failed += " " + r.component;
    double& worst = r.tolerance == kLayerGradTol ? worst_layer : worst_net;
    worst = std::max(worst, r.max_rel_error);
  }
  return {failed.empty(), fmt("worst at 1e-3 (layers, 64-bit network) %.2e; worst at 1e-2 (block, 32-bit network) %.2e",
                              worst_layer, worst_net) +
                              (failed.empty() ? "" : "; failed:" + failed)};
}

Outcome gate_expectation() {
  const double p = 0.7;
  ResidualBlock<float> b(BlockSpec{4, 7, 2, VariantKind::PyramidSepDrop, p});
  Rng rng = derive_stream(3, {1});
  b.initialize(rng);
  std::uniform_real_distribution<double> u(0.2, 1.5);
  b.visit_buffers("b", [&](const std::string& name, Buffer<float>& buf) {
    for (auto& v : buf) v = static_cast<float>(name.find("mean") != std::string::npos ? u(rng) - 0.85 : u(rng));
  });
  b.set_branch_activation(false);
  const Tensor<float> x = random_input<float>({2, 4, 6, 6}, 4);
  Buffer<double> expected = Buffer<double>::Zero(2 * 7 * 9);
  for (bool b1 : {false, true})
    for (bool b2 : {false, true}) {
      const double w = (b1 ? p : 1 - p) * (b2 ? p : 1 - p);
      const GateDraw g{0, GateKind::Separated, b1, b2, p, 0};
      expected += w * b.forward(x, g, Mode::Training, Mode::Inference).data().cast<double>();
    }
  const Buffer<double> inference = b.forward(x, GateDraw{}, Mode::Inference, Mode::Inference).data().cast<double>();
  const double err = (expected - inference).abs().maxCoeff();
  return {err < kExpectationTol, fmt("max |E[train] - inference| = %.2e (< %.0e) over 4 gate outcomes", err, kExpectationTol)};
}

Outcome degenerate_collapses() {
  // (a) p_last = 1
  const Tensor<float> x = random_input<float>({4, 3, 32, 32}, 5);
  auto sep = build<float>(spec_of(VariantKind::PyramidSepDrop, 14, 10, 1.0), 6);
  auto drop = build<float>(spec_of(VariantKind::PyramidDrop, 14, 10, 1.0), 6);
  auto pyr = build<float>(spec_of(VariantKind::PyramidNet, 14, 10, 1.0), 6);
  Rng r1 = derive_stream(7, {2}), r2 = derive_stream(7, {2});
  bool a = true;
  for (int step = 0; step < 3; ++step) {
    const Tensor<float> c = pyr.forward(x, pyr.pinned_gates(true));
    a = a && same_bits(sep.forward(x, sep.draw_gates(r1)), c) && same_bits(drop.forward(x, drop.draw_gates(r2)), c);
  }
  for (auto* n : {&sep, &drop, &pyr}) n->set_mode(Mode::Inference);
  a = a && same_bits(sep.forward(x), pyr.forward(x)) && same_bits(drop.forward(x), pyr.forward(x));

  // (b) alpha = 0: every width stays at the base width, as in a plain
  // constant-width residual network, and the parameter count matches it.
  bool b = true;
  for (int depth : {8, 20, 56, 110}) {
    const auto s = spec_of(VariantKind::PyramidNet, depth, 0);
    for (int w : channel_schedule_for(s).block_widths) b = b && w == 16;
    const std::int64_t n = s.block_count();
    b = b && parameter_count(s) == 3 * 16 * 9 + n * (3 * 2 * 16 + 2 * 16 * 16 * 9) + 2 * 16 + 16 * 10 + 10;
  }

  // (c) all gates closed against the straight-line oracle, in 64-bit
  auto net = build<double>(spec_of(VariantKind::PyramidSepDrop, 14, 10), 8);
  const Tensor<double> xd = random_input<double>({3, 3, 32, 32}, 9);
  const Tensor<double> logits = net.forward(xd, net.pinned_gates(false));
  const auto oracle = shortcut_only_logits(net, xd);
  double worst = 0;
  for (std::size_t i = 0; i < oracle.size(); ++i) worst = std::max(worst, std::abs(logits[i] - oracle[i]));
  const bool c = worst < kShortcutOracleTol;
  return {a && b && c, std::string("(a) p_last=1 bitwise ") + (a ? "yes" : "NO") + "; (b) alpha=0 widths " +
                           (b ? "yes" : "NO") + fmt("; (c) shortcut oracle %.2e (< %.0e)", worst, kShortcutOracleTol)};
}

double averaged_vs_single(bool frozen) {
  Network<float> base = build<float>(spec_of(VariantKind::PyramidSepDrop, 8, 5), 10);
  Network<float> single = base.clone();
  ReplicaGroup<float> group(std::move(base), 2);
  group.set_batchnorm_frozen(frozen);
  single.set_batchnorm_frozen(frozen);
  const Tensor<float> images = random_input<float>({16, 3, 32, 32}, 11);
  std::vector<int> labels(16);
  for (int i = 0; i < 16; ++i) labels[i] = (3 * i) % 10;
  const auto parts = split_batch(images, std::span<const int>(labels), 2);
  GateSource<float> open = [](int, Network<float>& n) { return n.pinned_gates(true); };
  group.zero_grad();
  replica_pass(group, std::span<const SubBatch<float>>(parts), open);
  group.average_gradients();
  single.zero_grad();
  backward(softmax_cross_entropy(single.forward(images, single.pinned_gates(true)), std::span<const int>(labels)));
  double worst = 0;
  auto pa = group.primary().parameters(), pb = single.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const double scale = std::max(1e-3, double(pb[i].tensor.grad().abs().maxCoeff()));
    worst = std::max(worst, double((pa[i].tensor.grad() - pb[i].tensor.grad()).abs().maxCoeff()) / scale);
  }
  return worst;
}

Outcome multi_model() {
  const double frozen = averaged_vs_single(true);
  const double coupled = averaged_vs_single(false);

  ReplicaGroup<float> group(build<float>(spec_of(VariantKind::PyramidSepDrop, 8, 5), 12), 4);
  auto params = group.primary().parameters();
  SgdNesterov<float> opt(params, 0.9, 1e-4);
  auto rngs = replica_rng_streams(12, 4);
  GateSource<float> gates = [&](int r, Network<float>& n) { return n.draw_gates(rngs[r], std::uint64_t(r)); };
  const Tensor<float> images = random_input<float>({32, 3, 32, 32}, 13);
  std::vector<int> labels(32);
  for (int i = 0; i < 32; ++i) labels[i] = i % 10;
  const auto parts = split_batch(images, std::span<const int>(labels), 4);
  double drift = 0;
  for (int step = 0; step < 5; ++step) {
    synchronized_step(group, std::span<const SubBatch<float>>(parts), gates, opt, 0.1);
    drift = std::max(drift, group.max_parameter_difference());
  }
  const bool ok = frozen < kMultiModelTol && coupled > kBnCouplingMin && drift == 0.0;
  return {ok, fmt("frozen-BN K=2 vs concatenated %.2e (< %.0e); training-BN difference %.2e (> %.0e)", frozen,
                  kMultiModelTol, coupled, kBnCouplingMin) +
                  fmt("; max replica difference after 5 synchronized steps %g", drift)};
}

Outcome schedule_properties() {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> n_dist(1, 40);
  std::uniform_real_distribution<double> a_dist(0.0, 300.0), p_dist(0.01, 1.0);
  int violations = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int depth = 6 * n_dist(rng) + 2;
    const double alpha = trial % 2 ? a_dist(rng) : std::floor(a_dist(rng));
    const auto w = build_channel_schedule(depth, alpha).block_widths;
    for (std::size_t k = 1; k < w.size(); ++k) violations += w[k] < w[k - 1];
    violations += w.back() != int(std::floor(16 + alpha));
    const double p_last = p_dist(rng);
    const auto s = build_survival_schedule((depth - 2) / 2, p_last).survival;
    for (std::size_t l = 1; l < s.size(); ++l) violations += !(s[l] < s[l - 1]);
    violations += s.back() != p_last;
  }
  return {violations == 0, fmt("200 random (depth, alpha, p_last): %g violations", violations)};
}

Outcome training_sanity() {
  const int samples = 512;
  int good = 0;
  std::string errs;
  for (int seed = 0; seed < kTrainSeeds; ++seed) {
    const auto data = synthesize_dataset(10, samples, 32, seed);
    Trainer<float> t(desk_recipe(seed, VariantKind::PyramidSepDrop, 8, kTrainEpochs), data, nullptr, compute_preprocess(data),
                     no_eval());
    for (int e = 0; e < kTrainEpochs; ++e) t.train_epoch();
    const double err = t.evaluate_train();
    good += err <= kTrainErrMax;
    errs += fmt(errs.empty() ? "%.3f" : " %.3f", err);
  }
  // determinism: the same seed gives the same parameters after two epochs
  const auto data = synthesize_dataset(10, samples, 32, 0);
  const auto cfg = desk_recipe(0, VariantKind::PyramidSepDrop, 8, kTrainEpochs);
  Trainer<float> a(cfg, data, nullptr, compute_preprocess(data), no_eval()), b(cfg, data, nullptr, compute_preprocess(data), no_eval());
  for (int e = 0; e < 2; ++e) a.train_epoch(), b.train_epoch();
  const bool deterministic = same_parameters(a.network(), b.network());
  return {good >= kTrainSeedsRequired && deterministic,
          fmt("%g of %g seeds reach train error <= %.2f after %g epochs", good, kTrainSeeds, kTrainErrMax, kTrainEpochs) +
              " [" + errs + "]; deterministic " + (deterministic ? "yes" : "NO")};
}

Outcome regularization_direction() {
  double gap[2] = {0, 0};
  const VariantKind variants[2] = {VariantKind::PyramidSepDrop, VariantKind::PyramidNet};
  for (int seed = 0; seed < kGapSeeds; ++seed) {
    const auto train = synthesize_dataset(10, 512, 32, 100 + seed, {}, Split::Train);
    const auto held = synthesize_dataset(10, 512, 32, 100 + seed, {}, Split::Test);
    for (int v = 0; v < 2; ++v) {
      Trainer<float> t(desk_recipe(seed, variants[v], 14, kGapEpochs), train, &held, compute_preprocess(train), no_eval());
      for (int e = 0; e < kGapEpochs; ++e) t.train_epoch();
      gap[v] += (evaluate(t.network(), *t.normalized_test()) - t.evaluate_train()) / kGapSeeds;
    }
  }
  return {gap[0] <= gap[1] + kGapSlack,
          fmt("mean held-out minus train error over %g seeds: PyramidSepDrop %.4f, PyramidNet %.4f (allowed %.4f)", kGapSeeds,
              gap[0], gap[1], gap[1] + kGapSlack)};
}

Outcome persistence() {
  const auto data = synthesize_dataset(10, 256, 32, 14);
  const auto test = synthesize_dataset(10, 128, 32, 14, {}, Split::Test);
  const auto pre = compute_preprocess(data);
  TrainConfig cfg = desk_recipe(14, VariantKind::PyramidSepDrop, 8, 4);
  Trainer<float> straight(cfg, data, &test, pre);
  straight.train_epoch();
  const auto bytes = encode_checkpoint(straight.checkpoint());

  Network<float> restored = build<float>(cfg.network, 99);
  restore_network(decode_checkpoint(bytes), restored);
  const Tensor<float> x = random_input<float>({8, 3, 32, 32}, 15);
  straight.network().set_mode(Mode::Inference);
  restored.set_mode(Mode::Inference);
  const bool logits = same_bits(straight.network().forward(x), restored.forward(x));

  const EpochMetrics expected = straight.train_epoch();
  Trainer<float> resumed(cfg, data, &test, pre);
  resumed.restore(decode_checkpoint(bytes));
  const EpochMetrics got = resumed.train_epoch();
  const bool next = got.train_loss == expected.train_loss && got.train_err == expected.train_err &&
                    got.test_err == expected.test_err && same_parameters(straight.network(), resumed.network());
  return {logits && next, std::string("round-trip logits bitwise ") + (logits ? "yes" : "NO") +
                              "; resumed next epoch bitwise " + (next ? "yes" : "NO")};
}

}  // namespace

int main(int argc, char** argv) {
  retain_freed_memory();
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"configuration exactness", configuration_exactness},
      {"gradient suite", gradient_suite},
      {"gate-expectation identity", gate_expectation},
      {"degenerate collapses", degenerate_collapses},
      {"multi-model equivalence", multi_model},
      {"schedule properties", schedule_properties},
      {"training sanity", training_sanity},
      {"regularization direction", regularization_direction},
      {"persistence", persistence},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = int(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    failures += !o.pass;
    std::printf("criterion %d %-26s %s  %s  [%.1fs]\n", id, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
