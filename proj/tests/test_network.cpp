#include <catch2/catch_amalgamated.hpp>

#include "gradcheck.hpp"
#include "sessionfit/network.hpp"

using namespace sessionfit;

namespace {

Tensor random_batch(Prng& rng, std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
  return rng_uniform(rng, 0.0f, 1.0f, {b, c, h, w});
}

std::vector<int> cycle_labels(std::size_t n, int classes) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  return labels;
}

}  // namespace

TEST_CASE("default network builds deterministically") {
  auto [spec_a, params_a] = build_default_network({1, 64, 64}, 5, 7);
  auto [spec_b, params_b] = build_default_network({1, 64, 64}, 5, 7);
  REQUIRE(params_a.layers.size() == params_b.layers.size());
  for (std::size_t i = 0; i < params_a.layers.size(); ++i) {
    REQUIRE(params_a.layers[i].weights.data == params_b.layers[i].weights.data);
    REQUIRE(params_a.layers[i].bias.data == params_b.layers[i].bias.data);
  }
}

TEST_CASE("default network shape audit at 64x64") {
  const NetworkSpec spec = default_network_spec({1, 64, 64}, 5);
  const std::vector<Shape3> shapes = propagate_shapes(spec);
  // five conv sections: spatial extent halves at each pooling stage
  const int expected_extent[5] = {32, 16, 8, 4, 2};
  const int expected_channels[5] = {8, 16, 32, 64, 128};
  for (int s = 0; s < 5; ++s) {
    const Shape3 after_pool = shapes[static_cast<std::size_t>(3 * s + 2)];
    REQUIRE(after_pool.c == expected_channels[s]);
    REQUIRE(after_pool.h == expected_extent[s]);
    REQUIRE(after_pool.w == expected_extent[s]);
  }
  const Shape3 flat = shapes[15];
  REQUIRE(flat.c == 128 * 2 * 2);
  REQUIRE(shapes.back().c == 5);
}

TEST_CASE("default network at paper resolution produces [B x 5] logits") {
  auto [spec, params] = build_default_network({1, 640, 640}, 5, 3);
  Prng rng(8);
  const Tensor batch = random_batch(rng, 2, 1, 640, 640);
  const ForwardResult fwd = forward(spec, params, batch, false);
  REQUIRE(fwd.logits.shape == Shape{2, 5});
}

TEST_CASE("too-small input is rejected with a shape error") {
  REQUIRE_THROWS_WITH(build_default_network({1, 16, 16}, 5, 1),
                      Catch::Matchers::ContainsSubstring("spatial extent"));
  REQUIRE_NOTHROW(build_default_network({1, 32, 32}, 5, 1));
}

TEST_CASE("he-uniform initialization respects fan-in bound, biases zero") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 21);
  REQUIRE(spec.layers.size() == params.layers.size());
  const float bound_conv1 = std::sqrt(6.0f / 9.0f);
  for (float v : params.layers[0].weights.data) {
    REQUIRE(v >= -bound_conv1);
    REQUIRE(v < bound_conv1);
  }
  for (const LayerParams& p : params.layers)
    for (float v : p.bias.data) REQUIRE(v == 0.0f);
  // the classifier head starts at zero so untrained logits are uniform
  for (float v : params.layers.back().weights.data) REQUIRE(v == 0.0f);
}

TEST_CASE("conv identity kernel reproduces input") {
  NetworkSpec spec;
  spec.input = {1, 3, 3};
  spec.layers.push_back({"conv", Conv2D{1, 1, 1, 1, 0}});
  ParameterSet params;
  params.layers.resize(1);
  params.layers[0].weights = Tensor({1, 1, 1, 1}, {1.0f});
  params.layers[0].bias = Tensor({1}, {0.0f});
  Prng rng(4);
  const Tensor batch = random_batch(rng, 2, 1, 3, 3);
  const ForwardResult fwd = forward(spec, params, batch, false);
  REQUIRE(fwd.logits.data == batch.data);
}

TEST_CASE("all-ones 3x3 kernel with zero padding on constant input") {
  NetworkSpec spec;
  spec.input = {1, 3, 3};
  spec.layers.push_back({"conv", Conv2D{1, 1, 3, 1, 1}});
  ParameterSet params;
  params.layers.resize(1);
  params.layers[0].weights = Tensor::full({1, 1, 3, 3}, 1.0f);
  params.layers[0].bias = Tensor({1}, {0.0f});
  const float c = 0.25f;
  const Tensor batch = Tensor::full({1, 1, 3, 3}, c);
  const ForwardResult fwd = forward(spec, params, batch, false);
  // corners see a 2x2 window, the center the full 3x3
  REQUIRE(fwd.logits.data[4] == 9.0f * c);
  REQUIRE(fwd.logits.data[0] == 4.0f * c);
  REQUIRE(fwd.logits.data[2] == 4.0f * c);
  REQUIRE(fwd.logits.data[6] == 4.0f * c);
  REQUIRE(fwd.logits.data[8] == 4.0f * c);
  REQUIRE(fwd.logits.data[1] == 6.0f * c);
}

TEST_CASE("max pooling picks window maxima") {
  NetworkSpec spec;
  spec.input = {1, 2, 2};
  spec.layers.push_back({"pool", MaxPool2D{2, 2}});
  ParameterSet params;
  params.layers.resize(1);
  const Tensor batch({1, 1, 2, 2}, {1, 2, 3, 4});
  const ForwardResult fwd = forward(spec, params, batch, false);
  REQUIRE(fwd.logits.shape == Shape{1, 1, 1, 1});
  REQUIRE(fwd.logits.data[0] == 4.0f);
}

TEST_CASE("forward is pure: repeated calls give bitwise-identical logits") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 15);
  Prng rng(16);
  const Tensor batch = random_batch(rng, 3, 1, 32, 32);
  const ForwardResult a = forward(spec, params, batch, false);
  const ForwardResult b = forward(spec, params, batch, true);
  REQUIRE(a.logits.data == b.logits.data);
}

TEST_CASE("forward rejects mismatched batch shape") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 15);
  const Tensor wrong = Tensor::zeros({2, 1, 16, 16});
  REQUIRE_THROWS_AS(forward(spec, params, wrong, false), std::invalid_argument);
}

TEST_CASE("freeze modes flip flags without touching forward results") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 33);
  Prng rng(2);
  const Tensor batch = random_batch(rng, 2, 1, 32, 32);
  const Tensor base = forward(spec, params, batch, false).logits;

  set_freeze_boundary(spec, params, FreezeMode::freeze_conv_sections);
  int frozen = 0, trainable = 0;
  for (const LayerParams& p : params.layers) {
    if (!p.has_params()) continue;
    frozen += (p.weights_trainable ? 0 : 1) + (p.bias_trainable ? 0 : 1);
    trainable += (p.weights_trainable ? 1 : 0) + (p.bias_trainable ? 1 : 0);
  }
  REQUIRE(frozen == 10);     // 5 conv layers x (weights, bias)
  REQUIRE(trainable == 4);   // 2 dense layers x (weights, bias)
  REQUIRE(forward(spec, params, batch, false).logits.data == base.data);

  set_freeze_boundary(spec, params, FreezeMode::freeze_all_but_last);
  trainable = 0;
  for (const LayerParams& p : params.layers) {
    if (!p.has_params()) continue;
    trainable += (p.weights_trainable ? 1 : 0) + (p.bias_trainable ? 1 : 0);
  }
  REQUIRE(trainable == 2);  // final dense weights and bias only
  REQUIRE(params.layers.back().weights_trainable);
  REQUIRE(params.layers.back().bias_trainable);
  REQUIRE(forward(spec, params, batch, false).logits.data == base.data);

  set_freeze_boundary(spec, params, FreezeMode::none);
  for (const LayerParams& p : params.layers) {
    if (!p.has_params()) continue;
    REQUIRE(p.weights_trainable);
    REQUIRE(p.bias_trainable);
  }
  REQUIRE(forward(spec, params, batch, false).logits.data == base.data);
}

TEST_CASE("set_freeze_boundary requires a dense layer") {
  NetworkSpec spec;
  spec.input = {1, 4, 4};
  spec.layers.push_back({"conv", Conv2D{1, 1, 3, 1, 1}});
  ParameterSet params;
  params.layers.resize(1);
  params.layers[0].weights = Tensor::full({1, 1, 3, 3}, 0.5f);
  params.layers[0].bias = Tensor({1}, {0.0f});
  REQUIRE_THROWS_AS(set_freeze_boundary(spec, params, FreezeMode::freeze_all_but_last),
                    std::invalid_argument);
}

TEST_CASE("backward with all-zero dlogits yields all-zero gradients") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 44);
  Prng rng(12);
  const Tensor batch = random_batch(rng, 2, 1, 32, 32);
  const ForwardResult fwd = forward(spec, params, batch, true);
  const Tensor dlogits = Tensor::zeros({2, 5});
  const GradientSet grads = backward(spec, params, fwd.cache, dlogits);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!params.layers[i].has_params()) continue;
    for (float v : grads[i].weights.data) REQUIRE(v == 0.0f);
    for (float v : grads[i].bias.data) REQUIRE(v == 0.0f);
  }
}

TEST_CASE("backward rejects a missing cache") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 44);
  Prng rng(12);
  const Tensor batch = random_batch(rng, 2, 1, 32, 32);
  const ForwardResult fwd = forward(spec, params, batch, false);  // no cache
  const Tensor dlogits = Tensor::zeros({2, 5});
  REQUIRE_THROWS_AS(backward(spec, params, fwd.cache, dlogits), std::invalid_argument);
}

TEST_CASE("dense gradient is x^T dy") {
  NetworkSpec spec;
  spec.input = {2, 1, 1};
  spec.class_count = 2;
  spec.layers.push_back({"flatten", Flatten{}});
  spec.layers.push_back({"fc", Dense{2, 2}});
  ParameterSet params;
  params.layers.resize(2);
  params.layers[1].weights = Tensor({2, 2}, {0.3f, -0.2f, 0.1f, 0.4f});
  params.layers[1].bias = Tensor({2}, {0.0f, 0.0f});

  const Tensor x({1, 2, 1, 1}, {2.0f, 3.0f});
  const ForwardResult fwd = forward(spec, params, x, true);
  const Tensor dy({1, 2}, {0.5f, -1.5f});
  const GradientSet grads = backward(spec, params, fwd.cache, dy);
  // dW[i][j] = x[i] * dy[j]
  REQUIRE(grads[1].weights.data == std::vector<float>{1.0f, -3.0f, 1.5f, -4.5f});
  REQUIRE(grads[1].bias.data == std::vector<float>{0.5f, -1.5f});
}

namespace {

// Naive reference convolution, written independently of the library kernels.
Tensor reference_conv(const Conv2D& c, const Tensor& w, const Tensor& bias,
                      const Tensor& input) {
  const std::size_t batch = input.shape[0];
  const int h = static_cast<int>(input.shape[2]);
  const int wd = static_cast<int>(input.shape[3]);
  const int oh = (h + 2 * c.padding - c.kernel) / c.stride + 1;
  const int ow = (wd + 2 * c.padding - c.kernel) / c.stride + 1;
  Tensor out = Tensor::zeros({batch, static_cast<std::size_t>(c.out_channels),
                              static_cast<std::size_t>(oh), static_cast<std::size_t>(ow)});
  std::size_t oidx = 0;
  for (std::size_t b = 0; b < batch; ++b)
    for (int oc = 0; oc < c.out_channels; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias.data[static_cast<std::size_t>(oc)];
          for (int ic = 0; ic < c.in_channels; ++ic)
            for (int ky = 0; ky < c.kernel; ++ky)
              for (int kx = 0; kx < c.kernel; ++kx) {
                const int iy = oy * c.stride + ky - c.padding;
                const int ix = ox * c.stride + kx - c.padding;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                const std::size_t widx =
                    ((static_cast<std::size_t>(oc) * c.in_channels + ic) * c.kernel + ky) *
                        c.kernel + kx;
                const std::size_t iidx =
                    ((b * c.in_channels + ic) * h + iy) * static_cast<std::size_t>(wd) + ix;
                acc += static_cast<double>(w.data[widx]) * input.data[iidx];
              }
          out.data[oidx++] = static_cast<float>(acc);
        }
  return out;
}

}  // namespace

TEST_CASE("conv forward matches a naive reference on every kernel path") {
  struct Case {
    Conv2D conv;
    int h, w;
  };
  // wide plane (row path), narrow plane with many channels (patch path),
  // narrow plane with few channels (row path), strided (generic path)
  const Case cases[] = {
      {Conv2D{3, 4, 3, 1, 1}, 20, 20},
      {Conv2D{8, 32, 3, 1, 1}, 6, 6},
      {Conv2D{2, 3, 3, 1, 1}, 5, 5},
      {Conv2D{2, 4, 3, 2, 0}, 9, 9},
      {Conv2D{1, 2, 5, 1, 2}, 8, 8},
  };
  Prng rng(314);
  for (const Case& tc : cases) {
    NetworkSpec spec;
    spec.input = {tc.conv.in_channels, tc.h, tc.w};
    spec.layers.push_back({"conv", tc.conv});
    ParameterSet params;
    params.layers.resize(1);
    const std::size_t k = static_cast<std::size_t>(tc.conv.kernel);
    params.layers[0].weights =
        rng_uniform(rng, -0.5f, 0.5f, {static_cast<std::size_t>(tc.conv.out_channels),
                                       static_cast<std::size_t>(tc.conv.in_channels), k, k});
    params.layers[0].bias =
        rng_uniform(rng, -0.1f, 0.1f, {static_cast<std::size_t>(tc.conv.out_channels)});
    const Tensor batch = rng_uniform(rng, 0.0f, 1.0f,
                                     {3, static_cast<std::size_t>(tc.conv.in_channels),
                                      static_cast<std::size_t>(tc.h),
                                      static_cast<std::size_t>(tc.w)});
    const Tensor got = forward(spec, params, batch, false).logits;
    const Tensor want = reference_conv(tc.conv, params.layers[0].weights,
                                       params.layers[0].bias, batch);
    REQUIRE(got.shape == want.shape);
    for (std::size_t i = 0; i < got.size(); ++i)
      REQUIRE(got.data[i] == Catch::Approx(want.data[i]).margin(1e-4));
  }
}

// ---------------------------------------------------------------------------
// Finite-difference agreement, every layer kind in isolation then composed.

TEST_CASE("gradcheck: flatten + dense") {
  NetworkSpec spec;
  spec.input = {1, 4, 4};
  spec.class_count = 4;
  spec.layers.push_back({"flatten", Flatten{}});
  spec.layers.push_back({"fc", Dense{16, 4}});
  ParameterSet params = init_parameters(spec, 101);
  Prng rng(55);
  const Tensor batch = random_batch(rng, 2, 1, 4, 4);
  const auto stats = gradcheck::check_gradients(spec, params, batch, cycle_labels(2, 4));
  INFO("worst error " << stats.worst_abs_err);
  REQUIRE(stats.checked == 68);  // a pure linear stack has no kinks to skip
  REQUIRE(stats.skipped == 0);
  REQUIRE(stats.failed == 0);
}

TEST_CASE("gradcheck: conv (stride 1, padded)") {
  NetworkSpec spec;
  spec.input = {2, 5, 5};
  spec.class_count = 4;
  spec.layers.push_back({"conv", Conv2D{2, 3, 3, 1, 1}});
  spec.layers.push_back({"flatten", Flatten{}});
  spec.layers.push_back({"fc", Dense{75, 4}});
  ParameterSet params = init_parameters(spec, 102);
  Prng rng(56);
  const Tensor batch = random_batch(rng, 2, 2, 5, 5);
  const auto stats = gradcheck::check_gradients(spec, params, batch, cycle_labels(2, 4));
  INFO("worst error " << stats.worst_abs_err);
  REQUIRE(stats.failed == 0);
}

TEST_CASE("gradcheck: conv (stride 2, unpadded)") {
  NetworkSpec spec;
  spec.input = {1, 7, 7};
  spec.class_count = 3;
  spec.layers.push_back({"conv", Conv2D{1, 2, 3, 2, 0}});
  spec.layers.push_back({"flatten", Flatten{}});
  spec.layers.push_back({"fc", Dense{18, 3}});
  ParameterSet params = init_parameters(spec, 103);
  Prng rng(57);
  const Tensor batch = random_batch(rng, 2, 1, 7, 7);
  const auto stats = gradcheck::check_gradients(spec, params, batch, cycle_labels(2, 3));
  INFO("worst error " << stats.worst_abs_err);
  REQUIRE(stats.failed == 0);
}

TEST_CASE("gradcheck: relu") {
  NetworkSpec spec;
  spec.input = {1, 5, 5};
  spec.class_count = 3;
  spec.layers.push_back({"conv", Conv2D{1, 2, 3, 1, 1}});
  spec.layers.push_back({"relu", ReLU{}});
  spec.layers.push_back({"flatten", Flatten{}});
  spec.layers.push_back({"fc", Dense{50, 3}});
  ParameterSet params = init_parameters(spec, 104);
  Prng rng(58);
  const Tensor batch = random_batch(rng, 2, 1, 5, 5);
  const auto stats = gradcheck::check_gradients(spec, params, batch, cycle_labels(2, 3));
  INFO("worst error " << stats.worst_abs_err);
  REQUIRE(stats.failed == 0);
}

TEST_CASE("gradcheck: max pooling (non-overlapping and overlapping)") {
  for (const MaxPool2D pool : {MaxPool2D{2, 2}, MaxPool2D{2, 1}}) {
    NetworkSpec spec;
    spec.input = {1, 6, 6};
    spec.class_count = 3;
    spec.layers.push_back({"conv", Conv2D{1, 2, 3, 1, 1}});
    spec.layers.push_back({"pool", pool});
    const int oh = (6 - pool.window) / pool.stride + 1;
    spec.layers.push_back({"flatten", Flatten{}});
    spec.layers.push_back({"fc", Dense{2 * oh * oh, 3}});
    ParameterSet params = init_parameters(spec, 105);
    Prng rng(59);
    const Tensor batch = random_batch(rng, 2, 1, 6, 6);
    const auto stats = gradcheck::check_gradients(spec, params, batch, cycle_labels(2, 3));
    INFO("pool window " << pool.window << " stride " << pool.stride << " worst error "
                        << stats.worst_abs_err);
    REQUIRE(stats.failed == 0);
  }
}

TEST_CASE("gradcheck: two-layer toy net at 8x8, every entry") {
  NetworkSpec spec;
  spec.input = {1, 8, 8};
  spec.class_count = 5;
  spec.layers.push_back({"conv", Conv2D{1, 3, 3, 1, 1}});
  spec.layers.push_back({"relu", ReLU{}});
  spec.layers.push_back({"pool", MaxPool2D{2, 2}});
  spec.layers.push_back({"flatten", Flatten{}});
  spec.layers.push_back({"fc", Dense{48, 5}});
  ParameterSet params = init_parameters(spec, 106);
  Prng rng(60);
  const Tensor batch = random_batch(rng, 2, 1, 8, 8);
  const auto stats = gradcheck::check_gradients(spec, params, batch, cycle_labels(2, 5));
  INFO("worst error " << stats.worst_abs_err << " skipped " << stats.skipped);
  REQUIRE(stats.checked + stats.skipped == 275);
  REQUIRE(stats.skipped <= 27);  // at most 10% of probes may sit on a kink
  REQUIRE(stats.failed == 0);
}

TEST_CASE("gradcheck: composed default network at 32x32, sampled entries") {
  // checked at a generic He-initialized point so no layer's gradient is
  // vacuously zero
  const NetworkSpec spec = default_network_spec({1, 32, 32}, 5);
  ParameterSet params = init_parameters(spec, 107);
  Prng rng(61);
  const Tensor batch = random_batch(rng, 2, 1, 32, 32);
  const auto stats =
      gradcheck::check_gradients(spec, params, batch, cycle_labels(2, 5), /*max_per_tensor=*/12);
  INFO("checked " << stats.checked << " skipped " << stats.skipped << " worst error "
                  << stats.worst_abs_err);
  REQUIRE(stats.checked >= 100);  // kink probes get skipped, most entries remain
  REQUIRE(stats.skipped <= stats.checked);
  REQUIRE(stats.failed == 0);
}
