#pragma once

// Central finite-difference oracle for gradient checks. Independent of the
// backward pass: it relies only on forward() and the loss value.
//
// ReLU and max-pooling make the loss piecewise smooth; when a probe interval
// [theta-h, theta+h] crosses a unit's decision boundary the central
// difference measures a chord across the kink and stops being a derivative
// estimate. Such entries are detected by comparing the activation decision
// pattern (ReLU sign mask, pooling argmax) at both probe points and reported
// as skipped rather than checked. Callers bound the skipped fraction.

#include <cmath>
#include <string>
#include <vector>

#include "sessionfit/optim.hpp"

namespace gradcheck {

using namespace sessionfit;

struct ProbeResult {
  double loss = 0.0;
  std::vector<std::uint32_t> decisions;
};

inline ProbeResult probe(const NetworkSpec& spec, const ParameterSet& params,
                         const Tensor& batch, const std::vector<int>& labels) {
  ForwardResult fwd = forward(spec, params, batch, /*training=*/true);
  ProbeResult result;
  result.loss = softmax_cross_entropy(fwd.logits, labels).first;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (std::holds_alternative<ReLU>(spec.layers[i].op)) {
      const Tensor& x = fwd.cache.entries[i].input;
      std::uint32_t word = 0;
      int bits = 0;
      for (std::size_t j = 0; j < x.size(); ++j) {
        word = (word << 1) | (x.data[j] > 0.0f ? 1u : 0u);
        if (++bits == 32) {
          result.decisions.push_back(word);
          word = 0;
          bits = 0;
        }
      }
      if (bits) result.decisions.push_back(word);
    } else if (std::holds_alternative<MaxPool2D>(spec.layers[i].op)) {
      const auto& argmax = fwd.cache.entries[i].pool_argmax;
      result.decisions.insert(result.decisions.end(), argmax.begin(), argmax.end());
    }
  }
  return result;
}

struct GradCheckStats {
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probe interval crossed a ReLU/pool decision
  std::size_t failed = 0;
  double worst_abs_err = 0.0;
};

// Compares analytic gradients against central differences (h = 1e-3 in the
// 32-bit engine, relative tolerance 1e-2, absolute floor covering the f32
// quotient noise). `max_per_tensor` = 0 checks every entry; otherwise a
// deterministic sample per tensor.
inline GradCheckStats check_gradients(const NetworkSpec& spec, ParameterSet params,
                                      const Tensor& batch, const std::vector<int>& labels,
                                      std::size_t max_per_tensor = 0, double h = 1e-3,
                                      double rel_tol = 1e-2, double abs_tol = 2e-3) {
  ForwardResult fwd = forward(spec, params, batch, /*training=*/true);
  auto [loss, dlogits] = softmax_cross_entropy(fwd.logits, labels);
  (void)loss;
  const GradientSet grads = backward(spec, params, fwd.cache, dlogits);

  GradCheckStats stats;
  Prng picker(20240);
  for (std::size_t li = 0; li < params.layers.size(); ++li) {
    if (!params.layers[li].has_params()) continue;
    for (int which = 0; which < 2; ++which) {
      Tensor& value = which == 0 ? params.layers[li].weights : params.layers[li].bias;
      const Tensor& grad = which == 0 ? grads[li].weights : grads[li].bias;
      std::vector<std::size_t> indices;
      if (max_per_tensor == 0 || value.size() <= max_per_tensor) {
        indices.resize(value.size());
        for (std::size_t i = 0; i < value.size(); ++i) indices[i] = i;
      } else {
        for (std::size_t i = 0; i < max_per_tensor; ++i)
          indices.push_back(static_cast<std::size_t>(picker.next_below(value.size())));
      }
      for (std::size_t idx : indices) {
        const float saved = value.data[idx];
        value.data[idx] = static_cast<float>(saved + h);
        const ProbeResult plus = probe(spec, params, batch, labels);
        value.data[idx] = static_cast<float>(saved - h);
        const ProbeResult minus = probe(spec, params, batch, labels);
        value.data[idx] = saved;
        if (plus.decisions != minus.decisions) {
          ++stats.skipped;
          continue;
        }
        const double fd = (plus.loss - minus.loss) / (2.0 * h);
        const double an = static_cast<double>(grad.data[idx]);
        const double err = std::abs(fd - an);
        const double allow = std::max(rel_tol * std::max(std::abs(fd), std::abs(an)), abs_tol);
        ++stats.checked;
        if (err > allow) ++stats.failed;
        if (err > stats.worst_abs_err) stats.worst_abs_err = err;
      }
    }
  }
  return stats;
}

}  // namespace gradcheck
