#pragma once

#include <span>
#include <stdexcept>
#include <vector>

#include "sepdrop/tensor.hpp"

namespace sepdrop {

/// Row-wise argmax of (batch, classes, 1, 1) logits. Ties go to the lowest
/// class index.
template <typename Scalar>
std::vector<int> predict_labels(const Tensor<Scalar>& logits) {
  const Shape s = logits.shape();
  std::vector<int> out(s.n);
  for (std::int64_t i = 0; i < s.n; ++i) {
    int best = 0;
    for (std::int64_t c = 1; c < s.c; ++c)
      if (logits[i * s.c + c] > logits[i * s.c + best]) best = static_cast<int>(c);
    out[i] = best;
  }
  return out;
}

template <typename Scalar>
int count_top1_errors(const Tensor<Scalar>& logits, std::span<const int> labels) {
  if (std::int64_t(labels.size()) != logits.shape().n) throw ShapeError("label count does not match the batch");
  const auto pred = predict_labels(logits);
  int wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i];
  return wrong;
}

}  // namespace sepdrop
