#include <catch2/catch_amalgamated.hpp>

#include "sessionfit/data.hpp"
#include "sessionfit/experiment.hpp"
#include "sessionfit/optim.hpp"

using namespace sessionfit;

namespace {

// single scalar weight plus bias, enough to watch one Adam update closely
ParameterSet scalar_params(float w) {
  ParameterSet params;
  params.layers.resize(1);
  params.layers[0].weights = Tensor({1}, {w});
  params.layers[0].bias = Tensor({1}, {0.0f});
  return params;
}

GradientSet scalar_grads(float gw, float gb = 0.0f) {
  GradientSet grads(1);
  grads[0].weights = Tensor({1}, {gw});
  grads[0].bias = Tensor({1}, {gb});
  return grads;
}

std::vector<Sample> corpus_samples(const SessionCorpus& corpus) {
  std::vector<Sample> samples;
  for (const Session& s : corpus.sessions)
    for (const Round& r : s)
      for (const LabeledImage& img : r) samples.push_back({&img.pixels, img.label});
  return samples;
}

bool params_equal(const ParameterSet& a, const ParameterSet& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].weights.data != b.layers[i].weights.data) return false;
    if (a.layers[i].bias.data != b.layers[i].bias.data) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("cross entropy of uniform logits is ln(classes)") {
  const Tensor logits = Tensor::zeros({3, 5});
  const std::vector<int> labels{0, 2, 4};
  const auto [loss, dlogits] = softmax_cross_entropy(logits, labels);
  REQUIRE(loss == Catch::Approx(1.6094379124341003).epsilon(1e-9));
}

TEST_CASE("cross entropy gradient row for uniform logits") {
  const Tensor logits = Tensor::zeros({1, 5});
  const auto [loss, dlogits] = softmax_cross_entropy(logits, {2});
  REQUIRE(dlogits.data[0] == Catch::Approx(0.2).margin(1e-7));
  REQUIRE(dlogits.data[1] == Catch::Approx(0.2).margin(1e-7));
  REQUIRE(dlogits.data[2] == Catch::Approx(-0.8).margin(1e-7));
  REQUIRE(dlogits.data[3] == Catch::Approx(0.2).margin(1e-7));
  REQUIRE(dlogits.data[4] == Catch::Approx(0.2).margin(1e-7));
}

TEST_CASE("cross entropy of a confident correct logit") {
  const Tensor logits({1, 5}, {10.0f, 0.0f, 0.0f, 0.0f, 0.0f});
  const auto [loss, dlogits] = softmax_cross_entropy(logits, {0});
  // -log softmax evaluates to log1p(4 e^-10)
  REQUIRE(loss == Catch::Approx(1.8158323181616254e-4).epsilon(1e-6));
}

TEST_CASE("cross entropy dlogits sums to zero per row and scales by batch") {
  Prng rng(31);
  const Tensor logits = rng_uniform(rng, -2.0f, 2.0f, {4, 5});
  const auto [loss, dlogits] = softmax_cross_entropy(logits, {0, 1, 2, 3});
  for (std::size_t b = 0; b < 4; ++b) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) sum += dlogits.data[b * 5 + c];
    REQUIRE(sum == Catch::Approx(0.0).margin(1e-6));
  }
}

TEST_CASE("cross entropy rejects out-of-range labels") {
  const Tensor logits = Tensor::zeros({2, 5});
  REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {0, 5}), std::invalid_argument);
  REQUIRE_THROWS_AS(softmax_cross_entropy(logits, {-1, 0}), std::invalid_argument);
}

TEST_CASE("adam leaves parameters alone under zero gradient") {
  ParameterSet params = scalar_params(1.25f);
  AdamState state = AdamState::init(params, AdamConfig{});
  adam_step(params, scalar_grads(0.0f), state);
  REQUIRE(params.layers[0].weights.data[0] == 1.25f);
  REQUIRE(state.step == 1);
}

TEST_CASE("adam first bias-corrected step") {
  ParameterSet params = scalar_params(1.0f);
  AdamState state = AdamState::init(params, AdamConfig{0.001f});
  adam_step(params, scalar_grads(0.5f), state);
  // reduces to theta - lr * g / (|g| + eps) on the first step
  REQUIRE(params.layers[0].weights.data[0] == Catch::Approx(0.999).margin(1e-6));
  REQUIRE(state.moments1[0].weights.data[0] == Catch::Approx(0.05).margin(1e-8));
  // beta2 is stored as float32, so (1-beta2)*g^2 lands a few 1e-9 off 2.5e-4
  REQUIRE(state.moments2[0].weights.data[0] == Catch::Approx(0.00025).margin(1e-8));
}

TEST_CASE("adam skips non-trainable tensors bitwise") {
  ParameterSet params = scalar_params(0.75f);
  params.layers[0].weights_trainable = false;
  params.layers[0].bias_trainable = false;
  AdamState state = AdamState::init(params, AdamConfig{});
  for (int i = 0; i < 10; ++i) adam_step(params, scalar_grads(1.0f, 1.0f), state);
  REQUIRE(params.layers[0].weights.data[0] == 0.75f);
  REQUIRE(params.layers[0].bias.data[0] == 0.0f);
  REQUIRE(state.moments1[0].weights.data[0] == 0.0f);
  REQUIRE(state.moments2[0].weights.data[0] == 0.0f);
  REQUIRE(state.step == 10);
}

TEST_CASE("adam with zero learning rate moves moments but not parameters") {
  ParameterSet params = scalar_params(0.5f);
  AdamState state = AdamState::init(params, AdamConfig{0.0f});
  adam_step(params, scalar_grads(0.7f), state);
  REQUIRE(params.layers[0].weights.data[0] == 0.5f);
  REQUIRE(state.moments1[0].weights.data[0] != 0.0f);
}

TEST_CASE("adam rejects mismatched gradient shapes") {
  ParameterSet params = scalar_params(0.5f);
  AdamState state = AdamState::init(params, AdamConfig{});
  GradientSet grads(1);
  grads[0].weights = Tensor({2}, {0.1f, 0.2f});
  grads[0].bias = Tensor({1}, {0.0f});
  REQUIRE_THROWS_AS(adam_step(params, grads, state), std::invalid_argument);
}

TEST_CASE("train_phase with zero epochs returns parameters bitwise unchanged") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 9);
  const ParameterSet before = params;
  AdamState state = AdamState::init(params, AdamConfig{});
  GeneratorConfig gen;
  gen.height = gen.width = 32;
  gen.sessions_count = 1;
  gen.rounds_per_session = 1;
  gen.images_per_class_per_round = 2;
  gen.session_shift_px = 0;
  gen.round_jitter_px = 0;
  const SessionCorpus corpus = generate_corpus(gen);
  const std::vector<Sample> samples = corpus_samples(corpus);
  Prng rng(5);
  const std::vector<double> trace = train_phase(spec, params, state, samples, 0, 4, rng);
  REQUIRE(trace.empty());
  REQUIRE(params_equal(params, before));
}

TEST_CASE("train_phase rejects an empty dataset") {
  auto [spec, params] = build_default_network({1, 32, 32}, 5, 9);
  AdamState state = AdamState::init(params, AdamConfig{});
  Prng rng(5);
  const std::vector<Sample> empty;
  REQUIRE_THROWS_AS(train_phase(spec, params, state, empty, 1, 4, rng), std::invalid_argument);
}

TEST_CASE("train_phase is deterministic for a fixed seed") {
  GeneratorConfig gen;
  gen.seed = 77;
  gen.height = gen.width = 32;
  gen.sessions_count = 1;
  gen.rounds_per_session = 1;
  gen.images_per_class_per_round = 4;
  gen.session_shift_px = 0;
  const SessionCorpus corpus = generate_corpus(gen);
  const std::vector<Sample> samples = corpus_samples(corpus);

  auto run = [&] {
    auto [spec, params] = build_default_network({1, 32, 32}, 5, 11);
    AdamState state = AdamState::init(params, AdamConfig{});
    Prng rng(13);
    train_phase(spec, params, state, samples, 2, 8, rng);
    return params;
  };
  REQUIRE(params_equal(run(), run()));
}

TEST_CASE("frozen conv tensors stay bitwise fixed with zero moments") {
  GeneratorConfig gen;
  gen.seed = 31;
  gen.height = gen.width = 32;
  gen.sessions_count = 1;
  gen.rounds_per_session = 1;
  gen.images_per_class_per_round = 4;
  const SessionCorpus corpus = generate_corpus(gen);
  const std::vector<Sample> samples = corpus_samples(corpus);

  auto [spec, params] = build_default_network({1, 32, 32}, 5, 21);
  set_freeze_boundary(spec, params, FreezeMode::freeze_conv_sections);
  const ParameterSet before = params;
  AdamState state = AdamState::init(params, AdamConfig{});
  Prng rng(17);
  train_phase(spec, params, state, samples, 3, 8, rng);

  bool dense_moved = false;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    if (!params.layers[i].has_params()) continue;
    if (std::holds_alternative<Conv2D>(spec.layers[i].op)) {
      REQUIRE(params.layers[i].weights.data == before.layers[i].weights.data);
      REQUIRE(params.layers[i].bias.data == before.layers[i].bias.data);
      for (float v : state.moments1[i].weights.data) REQUIRE(v == 0.0f);
      for (float v : state.moments2[i].weights.data) REQUIRE(v == 0.0f);
    } else if (params.layers[i].weights.data != before.layers[i].weights.data) {
      dense_moved = true;
    }
  }
  REQUIRE(dense_moved);
}

TEST_CASE("first-epoch loss on an untrained net stays near ln 5") {
  GeneratorConfig gen;
  gen.seed = 41;
  gen.height = gen.width = 32;
  gen.sessions_count = 1;
  gen.rounds_per_session = 1;
  gen.images_per_class_per_round = 10;
  const SessionCorpus corpus = generate_corpus(gen);
  const std::vector<Sample> samples = corpus_samples(corpus);

  auto [spec, params] = build_default_network({1, 32, 32}, 5, 3);
  AdamState state = AdamState::init(params, AdamConfig{});
  Prng rng(7);
  const std::vector<double> trace = train_phase(spec, params, state, samples, 1, 16, rng);
  const double ln5 = 1.6094379124341003;
  REQUIRE(trace[0] > 0.9 * ln5);
  REQUIRE(trace[0] < 1.1 * ln5);
}

TEST_CASE("overfit sanity: 50 images memorized within 30 epochs") {
  GeneratorConfig gen;
  gen.seed = 53;
  gen.height = gen.width = 32;
  gen.sessions_count = 1;
  gen.rounds_per_session = 1;
  gen.images_per_class_per_round = 10;  // 50 images total
  gen.session_shift_px = 0;
  gen.round_jitter_px = 0;
  gen.speckle_sigma = 0.1f;
  const SessionCorpus corpus = generate_corpus(gen);
  const std::vector<Sample> samples = corpus_samples(corpus);
  REQUIRE(samples.size() == 50);

  auto [spec, params] = build_default_network({1, 32, 32}, 5, 29);
  AdamState state = AdamState::init(params, AdamConfig{0.001f});
  Prng rng(19);
  const std::vector<double> trace = train_phase(spec, params, state, samples, 30, 32, rng);
  REQUIRE(trace.back() < trace.front());  // eventually decreasing
  const EvalResult result = evaluate_accuracy(spec, params, samples, 32);
  REQUIRE(result.total == 50);
  REQUIRE(result.accuracy() >= 0.99);
}
