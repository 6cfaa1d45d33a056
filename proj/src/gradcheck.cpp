#include "sepdrop/gradcheck.hpp"

namespace sepdrop {

namespace {

using D = double;

GradcheckResult finish(std::string name, const GradientErrorStats& st, double tol) {
  return GradcheckResult{std::move(name), st.max_rel_error, tol, st.checked, st.skipped};
}

// One component over a probe loss of a function of random leaves.
GradcheckComponent op_component(std::string name, std::vector<Shape> shapes, Shape out_shape, bool off_zero,
                                std::function<Tensor<D>(std::vector<Tensor<D>>&)> fn, GradcheckOptions opt, double tol) {
  return {name, [=] {
            Rng rng = derive_stream(opt.seed, {std::hash<std::string>{}(name)});
            std::vector<Tensor<D>> leaves;
            for (const Shape& s : shapes)
              leaves.push_back(off_zero ? random_tensor_off_zero<D>(s, rng) : random_tensor<D>(s, rng));
            const Tensor<D> r = random_tensor<D>(out_shape, rng);
            auto loss = [&] {
              std::vector<Tensor<D>> in = leaves;
              return probe(fn(in), r);
            };
            return finish(name, gradient_error<D>(loss, leaves, opt), tol);
          }};
}

// Cross-entropy of a whole network on two random images, gates pinned open.
template <typename Scalar>
GradcheckResult network_check(std::string name, const NetworkSpec& spec, const GradcheckOptions& opt, double tol) {
  Rng rng = derive_stream(opt.seed, {19});
  Network<Scalar> net = Network<Scalar>::build(spec, rng);
  Tensor<Scalar> x = random_tensor<Scalar>({2, spec.in_channels, spec.image_size, spec.image_size}, rng);
  const std::vector<int> labels{0, 1};
  const auto gates = net.pinned_gates(true);
  std::vector<Tensor<Scalar>> wrt{x};
  for (auto& p : net.parameters()) wrt.push_back(p.tensor);
  auto loss = [&] { return softmax_cross_entropy(net.forward(x, gates), std::span<const int>(labels)); };
  return finish(std::move(name), gradient_error<Scalar>(loss, wrt, opt), tol);
}

}  // namespace

std::vector<GradcheckComponent> standard_gradcheck_components(const NetworkSpec& spec, const GradcheckOptions& lo,
                                                              double layer_tol, const GradcheckOptions& no,
                                                              double network_tol) {
  using T = std::vector<Tensor<D>>;
  std::vector<GradcheckComponent> out;
  const Shape s4{2, 3, 4, 4};

  out.push_back(op_component("add", {s4, s4}, s4, false, [](T& in) { return add(in[0], in[1]); }, lo, layer_tol));
  out.push_back(op_component("scale", {s4}, s4, false, [](T& in) { return scale(in[0], 0.7); }, lo, layer_tol));
  out.push_back(op_component("mul", {s4, s4}, s4, false, [](T& in) { return mul(in[0], in[1]); }, lo, layer_tol));
  out.push_back(op_component("matmul", {{3, 4, 1, 1}, {4, 2, 1, 1}}, {3, 2, 1, 1}, false,
                             [](T& in) { return matmul(in[0], in[1]); }, lo, layer_tol));
  out.push_back(op_component("slice_concat", {s4, {2, 2, 4, 4}}, {2, 4, 4, 4}, false,
                             [](T& in) { return concat_channels(slice_channels(in[0], 1, 3), in[1]); }, lo, layer_tol));
  out.push_back(op_component("pad_channels", {s4}, {2, 5, 4, 4}, false, [](T& in) { return pad_channels(in[0], 5); }, lo,
                             layer_tol));
  out.push_back(op_component("relu", {s4}, s4, true, [](T& in) { return relu(in[0]); }, lo, layer_tol));
  out.push_back(op_component("avgpool2x2", {s4}, {2, 3, 2, 2}, false, [](T& in) { return avgpool2x2(in[0]); }, lo,
                             layer_tol));
  out.push_back(op_component("global_avg_pool", {s4}, {2, 3, 1, 1}, false, [](T& in) { return global_avg_pool(in[0]); },
                             lo, layer_tol));
  out.push_back(op_component("linear", {{3, 5, 1, 1}, {5, 4, 1, 1}, {1, 4, 1, 1}}, {3, 4, 1, 1}, false,
                             [](T& in) { return add_row_bias(matmul(in[0], in[1]), in[2]); }, lo, layer_tol));
  out.push_back({"softmax_cross_entropy", [=] {
                   Rng rng = derive_stream(lo.seed, {11});
                   Tensor<D> logits = random_tensor<D>({4, 10, 1, 1}, rng, -2.0, 2.0);
                   const std::vector<int> labels{3, 0, 9, 3};
                   auto loss = [&] { return softmax_cross_entropy(logits, std::span<const int>(labels)); };
                   return finish("softmax_cross_entropy", gradient_error<D>(loss, {logits}, lo), layer_tol);
                 }});
  out.push_back(op_component("conv2d", {{2, 3, 5, 5}, {4, 3, 3, 3}}, {2, 4, 5, 5}, false,
                             [](T& in) { return conv2d(in[0], in[1], 1, 1); }, lo, layer_tol));
  out.push_back(op_component("conv2d_stride2", {{2, 3, 6, 6}, {4, 3, 3, 3}}, {2, 4, 3, 3}, false,
                             [](T& in) { return conv2d(in[0], in[1], 2, 1); }, lo, layer_tol));
  out.push_back(op_component("batchnorm_train", {{4, 3, 2, 2}, {1, 3, 1, 1}, {1, 3, 1, 1}}, {4, 3, 2, 2}, false,
                             [](T& in) {
                               Buffer<D> mean = Buffer<D>::Zero(3), var = Buffer<D>::Ones(3);
                               return batch_norm(in[0], in[1], in[2], mean, var, true, 0.1, 1e-5);
                             },
                             lo, layer_tol));
  out.push_back(op_component("batchnorm_inference", {{4, 3, 2, 2}, {1, 3, 1, 1}, {1, 3, 1, 1}}, {4, 3, 2, 2}, false,
                             [](T& in) {
                               Buffer<D> mean(3), var(3);
                               mean << 0.1, -0.2, 0.3;
                               var << 0.5, 1.5, 2.0;
                               return batch_norm(in[0], in[1], in[2], mean, var, false, 0.1, 1e-5);
                             },
                             lo, layer_tol));
  out.push_back(op_component("shortcut", {s4}, {2, 5, 2, 2}, false, [](T& in) { return shortcut(in[0], 5, 2); }, lo,
                             layer_tol));

  // A separated-gate block with one part dropped, in 64-bit; many ops deep,
  // so it is held to the composite tolerance.
  out.push_back({"sepdrop_block", [=] {
                   Rng rng = derive_stream(lo.seed, {17});
                   ResidualBlock<D> block(BlockSpec{4, 6, 2, VariantKind::PyramidSepDrop, 0.5});
                   block.initialize(rng);
                   Tensor<D> x = random_tensor<D>({2, 4, 8, 8}, rng);
                   const Tensor<D> r = random_tensor<D>({2, 6, 4, 4}, rng);
                   const GateDraw gate{0, GateKind::Separated, true, false, 0.5, 0};
                   std::vector<Tensor<D>> wrt{x};
                   block.visit_parameters("b", [&](const std::string&, Tensor<D>& t) { wrt.push_back(t); });
                   auto loss = [&] { return probe(block.forward(x, gate, Mode::Training, Mode::Training), r); };
                   return finish("sepdrop_block", gradient_error<D>(loss, wrt, lo), network_tol);
                 }});

  out.push_back({"network_end_to_end", [=] { return network_check<float>("network_end_to_end", spec, no, network_tol); }});
  out.push_back({"network_end_to_end_64", [=] {
                   GradcheckOptions strict = no;
                   strict.floor = lo.floor;
                   return network_check<double>("network_end_to_end_64", spec, strict, layer_tol);
                 }});
  return out;
}

}  // namespace sepdrop
