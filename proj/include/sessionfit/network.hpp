#pragma once

// Layer definitions, deterministic initialization, forward pass with
// caching and the hand-written backward pass. Convolution is computed as
// cross-correlation (no kernel flip) with zero padding, the usual deep
// learning convention.
//
// Accumulation orders are fixed everywhere (input channel, then kernel row,
// then kernel column; batch ascending for weight gradients) so repeated runs
// produce bitwise identical results.

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "sessionfit/tensor.hpp"

namespace sessionfit {

struct Conv2D {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int padding = 0;
};

struct ReLU {};

struct MaxPool2D {
  int window = 2;
  int stride = 2;
};

struct Flatten {};

struct Dense {
  int in_features = 1;
  int out_features = 1;
};

using LayerOp = std::variant<Conv2D, ReLU, MaxPool2D, Flatten, Dense>;

struct LayerSpec {
  std::string name;
  LayerOp op;
};

struct InputShape {
  int channels = 1;
  int height = 0;
  int width = 0;
};

struct NetworkSpec {
  InputShape input;
  std::vector<LayerSpec> layers;
  int class_count = 5;
};

// Learnable tensors for one layer. Layers without parameters keep empty
// tensors. Every learnable tensor carries its own trainable flag; freezing
// only flips flags, it never rewrites values.
struct LayerParams {
  Tensor weights;
  Tensor bias;
  bool weights_trainable = true;
  bool bias_trainable = true;

  bool has_params() const { return !weights.empty(); }
};

struct ParameterSet {
  std::vector<LayerParams> layers;  // 1:1 with NetworkSpec::layers
};

struct LayerGrads {
  Tensor weights;
  Tensor bias;
};

using GradientSet = std::vector<LayerGrads>;

enum class FreezeMode { none, freeze_conv_sections, freeze_all_but_last };

// ---------------------------------------------------------------------------
// Shape propagation

struct Shape3 {
  int c = 0, h = 0, w = 0;
  bool operator==(const Shape3&) const = default;
};

// Output shape of every layer in order; throws with a descriptive message
// when the stack is ill-formed (e.g. pooling an exhausted spatial extent).
inline std::vector<Shape3> propagate_shapes(const NetworkSpec& spec) {
  Shape3 cur{spec.input.channels, spec.input.height, spec.input.width};
  if (cur.c < 1 || cur.h < 1 || cur.w < 1)
    throw std::invalid_argument("network: input shape must have positive extents");
  std::vector<Shape3> out;
  out.reserve(spec.layers.size());
  bool flattened = false;
  for (const LayerSpec& layer : spec.layers) {
    if (const auto* conv = std::get_if<Conv2D>(&layer.op)) {
      if (flattened) throw std::invalid_argument(layer.name + ": Conv2D after Flatten");
      if (conv->in_channels < 1 || conv->out_channels < 1 || conv->kernel < 1 ||
          conv->stride < 1 || conv->padding < 0)
        throw std::invalid_argument(layer.name + ": Conv2D extents must be positive");
      if (conv->in_channels != cur.c)
        throw std::invalid_argument(layer.name + ": expects " +
                                    std::to_string(conv->in_channels) +
                                    " input channels, got " + std::to_string(cur.c));
      const int ph = cur.h + 2 * conv->padding;
      const int pw = cur.w + 2 * conv->padding;
      if (ph < conv->kernel || pw < conv->kernel)
        throw std::invalid_argument(layer.name + ": kernel " + std::to_string(conv->kernel) +
                                    " exceeds padded extent " + std::to_string(ph) + "x" +
                                    std::to_string(pw));
      cur = {conv->out_channels, (ph - conv->kernel) / conv->stride + 1,
             (pw - conv->kernel) / conv->stride + 1};
    } else if (std::holds_alternative<ReLU>(layer.op)) {
      // shape preserved
    } else if (const auto* pool = std::get_if<MaxPool2D>(&layer.op)) {
      if (flattened) throw std::invalid_argument(layer.name + ": MaxPool2D after Flatten");
      if (pool->window < 1 || pool->stride < 1)
        throw std::invalid_argument(layer.name + ": MaxPool2D extents must be positive");
      if (pool->window > cur.h || pool->window > cur.w)
        throw std::invalid_argument(layer.name + ": pool window " +
                                    std::to_string(pool->window) +
                                    " exceeds spatial extent " + std::to_string(cur.h) + "x" +
                                    std::to_string(cur.w) +
                                    " (spatial extent collapsed before this stage)");
      cur = {cur.c, (cur.h - pool->window) / pool->stride + 1,
             (cur.w - pool->window) / pool->stride + 1};
    } else if (std::holds_alternative<Flatten>(layer.op)) {
      cur = {cur.c * cur.h * cur.w, 1, 1};
      flattened = true;
    } else if (const auto* dense = std::get_if<Dense>(&layer.op)) {
      if (!flattened)
        throw std::invalid_argument(layer.name + ": Dense requires a prior Flatten");
      if (dense->in_features < 1 || dense->out_features < 1)
        throw std::invalid_argument(layer.name + ": Dense extents must be positive");
      if (dense->in_features != cur.c)
        throw std::invalid_argument(layer.name + ": expects " +
                                    std::to_string(dense->in_features) +
                                    " input features, got " + std::to_string(cur.c));
      cur = {dense->out_features, 1, 1};
    }
    out.push_back(cur);
  }
  if (out.empty() || out.back().c != spec.class_count || out.back().h != 1 ||
      out.back().w != 1)
    throw std::invalid_argument("network: layer stack does not end in " +
                                std::to_string(spec.class_count) + " logits");
  return out;
}

// ---------------------------------------------------------------------------
// Initialization

// He-uniform weights (bound sqrt(6/fan_in)), zero biases. Weight tensors are
// filled in layer order, each in row-major element order, from a single
// stream seeded with `seed`; the layout is part of the determinism contract.
inline ParameterSet init_parameters(const NetworkSpec& spec, std::uint64_t seed) {
  propagate_shapes(spec);  // validates the stack
  Prng rng(seed);
  ParameterSet params;
  params.layers.resize(spec.layers.size());
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    LayerParams& p = params.layers[i];
    if (const auto* conv = std::get_if<Conv2D>(&layer.op)) {
      const std::size_t oc = static_cast<std::size_t>(conv->out_channels);
      const std::size_t ic = static_cast<std::size_t>(conv->in_channels);
      const std::size_t k = static_cast<std::size_t>(conv->kernel);
      const float bound = std::sqrt(6.0f / static_cast<float>(ic * k * k));
      p.weights = rng_uniform(rng, -bound, bound, {oc, ic, k, k});
      p.bias = Tensor::zeros({oc});
    } else if (const auto* dense = std::get_if<Dense>(&layer.op)) {
      const std::size_t fin = static_cast<std::size_t>(dense->in_features);
      const std::size_t fout = static_cast<std::size_t>(dense->out_features);
      const float bound = std::sqrt(6.0f / static_cast<float>(fin));
      p.weights = rng_uniform(rng, -bound, bound, {fin, fout});
      p.bias = Tensor::zeros({fout});
    }
  }
  return params;
}

// The default stack: five convolution sections (3x3 same-padding Conv2D with
// channels 8,16,32,64,128, ReLU, 2x2/2 MaxPool), Flatten, Dense->128, ReLU,
// Dense->class_count. Input must survive five 2x poolings, i.e. height and
// width of at least 32.
inline NetworkSpec default_network_spec(InputShape input, int class_count = 5) {
  NetworkSpec spec;
  spec.input = input;
  spec.class_count = class_count;
  const int channels[5] = {8, 16, 32, 64, 128};
  int in_c = input.channels;
  int h = input.height, w = input.width;
  for (int s = 0; s < 5; ++s) {
    const std::string n = "conv" + std::to_string(s + 1);
    spec.layers.push_back({n, Conv2D{in_c, channels[s], 3, 1, 1}});
    spec.layers.push_back({n + "_relu", ReLU{}});
    spec.layers.push_back({n + "_pool", MaxPool2D{2, 2}});
    in_c = channels[s];
    h /= 2;
    w /= 2;
  }
  spec.layers.push_back({"flatten", Flatten{}});
  const int flat = in_c * h * w;
  spec.layers.push_back({"fc1", Dense{flat, 128}});
  spec.layers.push_back({"fc1_relu", ReLU{}});
  spec.layers.push_back({"fc2", Dense{128, class_count}});
  return spec;
}

inline std::pair<NetworkSpec, ParameterSet> build_default_network(InputShape input,
                                                                  int class_count,
                                                                  std::uint64_t seed) {
  NetworkSpec spec = default_network_spec(input, class_count);
  ParameterSet params = init_parameters(spec, seed);  // throws if input too small
  // The classifier head starts at zero: an untrained network emits exactly
  // uniform class probabilities, so the first-epoch loss sits at ln(classes).
  LayerParams& head = params.layers.back();
  std::fill(head.weights.data.begin(), head.weights.data.end(), 0.0f);
  return {std::move(spec), std::move(params)};
}

// ---------------------------------------------------------------------------
// Freezing

// Resets every trainable flag according to `mode`. Forward results never
// depend on the flags; only the optimizer consults them.
inline void set_freeze_boundary(const NetworkSpec& spec, ParameterSet& params,
                                FreezeMode mode) {
  if (spec.layers.size() != params.layers.size())
    throw std::invalid_argument("set_freeze_boundary: spec/params layer count mismatch");
  std::size_t last_dense = spec.layers.size();
  for (std::size_t i = 0; i < spec.layers.size(); ++i)
    if (std::holds_alternative<Dense>(spec.layers[i].op)) last_dense = i;
  if (last_dense == spec.layers.size())
    throw std::invalid_argument("set_freeze_boundary: network has no Dense layer");

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    LayerParams& p = params.layers[i];
    if (!p.has_params()) continue;
    bool trainable = true;
    switch (mode) {
      case FreezeMode::none:
        trainable = true;
        break;
      case FreezeMode::freeze_conv_sections:
        trainable = !std::holds_alternative<Conv2D>(spec.layers[i].op);
        break;
      case FreezeMode::freeze_all_but_last:
        trainable = (i == last_dense);
        break;
    }
    p.weights_trainable = trainable;
    p.bias_trainable = trainable;
  }
}

// ---------------------------------------------------------------------------
// Forward

struct LayerCacheEntry {
  Tensor input;                           // the tensor fed into this layer
  std::vector<std::uint32_t> pool_argmax; // per output element, flat index into its input plane
};

struct ForwardCache {
  std::vector<LayerCacheEntry> entries;  // 1:1 with layers when training
  std::size_t batch = 0;
};

struct ForwardResult {
  Tensor logits;
  ForwardCache cache;
};

// Runs the layer stack on a [B x C x H x W] batch. When `training` is set the
// returned cache stores each layer's input (and pooling argmax positions) for
// the backward pass; otherwise the cache is empty.
inline ForwardResult forward(const NetworkSpec& spec, const ParameterSet& params,
                             const Tensor& batch, bool training);

// Exact gradients of the scalar loss whose logit gradient is `dlogits`, for
// every learnable tensor regardless of the trainable flags (masking is the
// optimizer's job).
inline GradientSet backward(const NetworkSpec& spec, const ParameterSet& params,
                            const ForwardCache& cache, const Tensor& dlogits);

}  // namespace sessionfit

#include "sessionfit/network_impl.hpp"
