#pragma once

// Sparse categorical cross-entropy loss and Adam updates that respect the
// per-tensor trainable mask, plus the epoch/batch training loop.

#include <algorithm>
#include <cstdint>
#include <utility>
#include <vector>

#include "sessionfit/detmath.hpp"
#include "sessionfit/network.hpp"

namespace sessionfit {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float epsilon = 1e-8f;
};

// First/second moment accumulators mirroring the ParameterSet, plus the step
// counter. Frozen tensors keep zero moments for their whole lifetime.
struct AdamState {
  AdamConfig config;
  std::vector<LayerGrads> moments1;
  std::vector<LayerGrads> moments2;
  std::uint64_t step = 0;

  static AdamState init(const ParameterSet& params, AdamConfig config) {
    AdamState state;
    state.config = config;
    state.moments1.resize(params.layers.size());
    state.moments2.resize(params.layers.size());
    for (std::size_t i = 0; i < params.layers.size(); ++i) {
      if (!params.layers[i].has_params()) continue;
      state.moments1[i].weights = Tensor::zeros(params.layers[i].weights.shape);
      state.moments1[i].bias = Tensor::zeros(params.layers[i].bias.shape);
      state.moments2[i].weights = Tensor::zeros(params.layers[i].weights.shape);
      state.moments2[i].bias = Tensor::zeros(params.layers[i].bias.shape);
    }
    return state;
  }
};

// Mean over the batch of -log softmax(logits)[label], with max-subtraction
// stabilization. Returns the loss and dlogits = (softmax - onehot) / B.
inline std::pair<double, Tensor> softmax_cross_entropy(const Tensor& logits,
                                                       const std::vector<int>& labels) {
  if (logits.shape.size() != 2)
    throw std::invalid_argument("softmax_cross_entropy: logits must be [B x C]");
  const std::size_t batch = logits.shape[0];
  const std::size_t classes = logits.shape[1];
  if (labels.size() != batch)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  Tensor dlogits = Tensor::zeros(logits.shape);
  double loss_sum = 0.0;
  std::vector<double> probs(classes);
  for (std::size_t b = 0; b < batch; ++b) {
    const int label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes)
      throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                  " out of range [0," + std::to_string(classes) + ")");
    const float* row = logits.data.data() + b * classes;
    float maxv = row[0];
    for (std::size_t c = 1; c < classes; ++c)
      if (row[c] > maxv) maxv = row[c];
    double denom = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      probs[c] = det_exp(static_cast<double>(row[c]) - static_cast<double>(maxv));
      denom += probs[c];
    }
    loss_sum += det_log(denom) -
                (static_cast<double>(row[static_cast<std::size_t>(label)]) -
                 static_cast<double>(maxv));
    float* drow = dlogits.data.data() + b * classes;
    for (std::size_t c = 0; c < classes; ++c) {
      double g = probs[c] / denom;
      if (c == static_cast<std::size_t>(label)) g -= 1.0;
      drow[c] = static_cast<float>(g / static_cast<double>(batch));
    }
  }
  return {loss_sum / static_cast<double>(batch), std::move(dlogits)};
}

namespace detail {

inline void adam_update_tensor(Tensor& value, const Tensor& grad, Tensor& m, Tensor& v,
                               const AdamConfig& cfg, double bc1, double bc2) {
  const double lr = static_cast<double>(cfg.lr);
  const double b1 = static_cast<double>(cfg.beta1);
  const double b2 = static_cast<double>(cfg.beta2);
  const double eps = static_cast<double>(cfg.epsilon);
  for (std::size_t i = 0; i < value.size(); ++i) {
    const double g = static_cast<double>(grad.data[i]);
    const double mi = b1 * static_cast<double>(m.data[i]) + (1.0 - b1) * g;
    const double vi = b2 * static_cast<double>(v.data[i]) + (1.0 - b2) * g * g;
    m.data[i] = static_cast<float>(mi);
    v.data[i] = static_cast<float>(vi);
    const double mhat = mi / bc1;
    const double vhat = vi / bc2;
    value.data[i] =
        static_cast<float>(static_cast<double>(value.data[i]) - lr * mhat / (std::sqrt(vhat) + eps));
  }
}

}  // namespace detail

// One Adam step over every trainable tensor. The step counter advances once
// per call; non-trainable tensors (value and moments) are left untouched.
inline void adam_step(ParameterSet& params, const GradientSet& grads, AdamState& state) {
  if (grads.size() != params.layers.size() || state.moments1.size() != params.layers.size())
    throw std::invalid_argument("adam_step: layer count mismatch");
  state.step += 1;
  const double bc1 = 1.0 - pow_int(static_cast<double>(state.config.beta1), state.step);
  const double bc2 = 1.0 - pow_int(static_cast<double>(state.config.beta2), state.step);
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    LayerParams& p = params.layers[i];
    if (!p.has_params()) continue;
    if (!grads[i].weights.same_shape(p.weights) || !grads[i].bias.same_shape(p.bias))
      throw std::invalid_argument("adam_step: gradient shape mismatch at layer " +
                                  std::to_string(i));
    if (p.weights_trainable)
      detail::adam_update_tensor(p.weights, grads[i].weights, state.moments1[i].weights,
                                 state.moments2[i].weights, state.config, bc1, bc2);
    if (p.bias_trainable)
      detail::adam_update_tensor(p.bias, grads[i].bias, state.moments1[i].bias,
                                 state.moments2[i].bias, state.config, bc1, bc2);
  }
}

// A dataset element: a borrowed [1 x H x W] image and its class id.
struct Sample {
  const Tensor* image = nullptr;
  int label = 0;
};

inline Tensor stack_batch(const std::vector<Sample>& samples, std::size_t begin,
                          std::size_t end, std::vector<int>& labels_out) {
  const Tensor& first = *samples[begin].image;
  const std::size_t c = first.shape[0], h = first.shape[1], w = first.shape[2];
  const std::size_t n = end - begin;
  Tensor batch = Tensor::zeros({n, c, h, w});
  labels_out.clear();
  labels_out.reserve(n);
  const std::size_t stride = c * h * w;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor& img = *samples[begin + i].image;
    if (img.size() != stride)
      throw std::invalid_argument("stack_batch: inconsistent image shapes");
    std::copy(img.data.begin(), img.data.end(), batch.data.begin() + i * stride);
    labels_out.push_back(samples[begin + i].label);
  }
  return batch;
}

// Shuffle-and-train loop: each epoch reshuffles with `rng`, then walks full
// batches plus one ragged remainder batch, applying forward -> loss ->
// backward -> adam_step. Returns the per-epoch mean loss (weighted per
// sample).
inline std::vector<double> train_phase(const NetworkSpec& spec, ParameterSet& params,
                                       AdamState& state, const std::vector<Sample>& dataset,
                                       int epochs, int batch_size, Prng& rng) {
  if (dataset.empty()) throw std::invalid_argument("train_phase: empty dataset");
  if (batch_size < 1) throw std::invalid_argument("train_phase: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train_phase: negative epoch count");

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(epochs));
  std::vector<Sample> shuffled(dataset.size());
  std::vector<int> labels;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t i = 0; i < order.size(); ++i) shuffled[i] = dataset[order[i]];
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < shuffled.size();
         begin += static_cast<std::size_t>(batch_size)) {
      const std::size_t end =
          std::min(shuffled.size(), begin + static_cast<std::size_t>(batch_size));
      Tensor batch = stack_batch(shuffled, begin, end, labels);
      ForwardResult fwd = forward(spec, params, batch, /*training=*/true);
      auto [loss, dlogits] = softmax_cross_entropy(fwd.logits, labels);
      GradientSet grads = backward(spec, params, fwd.cache, dlogits);
      adam_step(params, grads, state);
      loss_sum += loss * static_cast<double>(end - begin);
    }
    trace.push_back(loss_sum / static_cast<double>(shuffled.size()));
  }
  return trace;
}

}  // namespace sessionfit
