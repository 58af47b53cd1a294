#include <cmath>
#include <cstring>
#include <thread>

#include "doctest.h"
#include "gradtrace/corpus.hpp"
#include "gradtrace/error.hpp"
#include "gradtrace/io.hpp"
#include "gradtrace/toy_lm.hpp"
#include "gradtrace/train.hpp"
#include "support.hpp"

using namespace gradtrace;

namespace {

// Central differences of `loss` with respect to parameter i.
template <typename Loss>
double finite_difference(ToyLM& model, std::size_t i, Loss loss, double h = 1e-5) {
  auto p = model.mutable_parameters();
  const double keep = p[i];
  p[i] = keep + h;
  const double up = loss(model);
  p[i] = keep - h;
  const double down = loss(model);
  p[i] = keep;
  return (up - down) / (2 * h);
}

void check_against_fd(ToyLM& model, const FlatGradient& g, Rng& rng, auto loss) {
  for (int c = 0; c < 20; ++c) {
    const std::size_t i = rng.uniform_below(model.parameter_count());
    const double fd = finite_difference(model, i, loss);
    INFO("coordinate " << i << " analytic " << g.values[i] << " fd " << fd);
    // exact-zero coordinates (unused embeddings) come out exactly zero both ways
    CHECK(testing::close_rel(g.values[i], fd, 1e-4, 1e-9));
  }
}

}  // namespace

TEST_CASE("layer map is contiguous and sums to the parameter count") {
  const auto shape = ModelShape{};
  const LayerMap map = ToyLM::layer_map_for(shape);
  std::size_t expect = 0;
  for (const auto& e : map.entries()) {
    CHECK(e.offset == expect);
    CHECK(e.length > 0);
    expect += e.length;
  }
  CHECK(map.total_length() == expect);
  CHECK(expect == 64 * 16 + 48 * 6 * 16 + 48 + 64 * 48 + 64);
  CHECK(ToyLM::initialize(shape, 1).parameter_count() == expect);
  CHECK_THROWS_AS(LayerMap({{"a", 0}}), ConfigError);
}

TEST_CASE("sample gradient matches finite differences") {
  for (std::uint64_t fixture = 0; fixture < 10; ++fixture) {
    Rng rng(100 + fixture);
    ToyLM model = ToyLM::initialize(testing::small_shape(), fixture);
    const ToySample s = testing::random_sample(rng, model.shape().vocab_size, fixture);
    const auto g = sample_gradient(model, s);
    CHECK(g.values.size() == model.parameter_count());
    check_against_fd(model, g, rng, [&](const ToyLM& m) { return sample_loss(m, s); });
  }
}

TEST_CASE("token gradient matches finite differences") {
  for (std::uint64_t fixture = 0; fixture < 10; ++fixture) {
    Rng rng(200 + fixture);
    ToyLM model = ToyLM::initialize(testing::small_shape(), fixture + 50);
    const ToySample s = testing::random_sample(rng, model.shape().vocab_size, fixture);
    const std::size_t j = rng.uniform_below(s.generation.size());
    const auto g = token_gradient(model, s, j);
    CHECK(g.source == SourceId::of_token(s.id, static_cast<std::uint32_t>(j)));
    check_against_fd(model, g, rng, [&](const ToyLM& m) { return position_loss(m, s, j); });
  }
}

TEST_CASE("finite differences on the default shape") {
  Rng rng(7);
  ToyLM model = ToyLM::initialize(ModelShape{}, 7);
  const ToySample s = testing::random_sample(rng, 64, 3, 6, 5);
  check_against_fd(model, sample_gradient(model, s), rng, [&](const ToyLM& m) { return sample_loss(m, s); });
}

TEST_CASE("sample gradient is the mean of token gradients") {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const ToyLM model = ToyLM::initialize(testing::small_shape(), trial);
    const ToySample s = testing::random_sample(rng, 12, trial);
    const auto g = sample_gradient(model, s);
    const auto tokens = token_gradients(model, s);
    REQUIRE(tokens.size() == s.generation.size());
    for (std::size_t i = 0; i < g.values.size(); ++i) {
      double mean = 0.0;
      for (const auto& t : tokens) mean += t.values[i];
      mean /= static_cast<double>(tokens.size());
      REQUIRE(testing::close_rel(g.values[i], mean, 1e-10, 1e-300));
    }
  }
}

TEST_CASE("single-token generation: token gradient equals sample gradient") {
  const ToyLM model = ToyLM::initialize(testing::small_shape(), 3);
  const ToySample s{5, {1, 2}, {7}};
  CHECK(token_gradient(model, s, 0).values == sample_gradient(model, s).values);
}

TEST_CASE("zero output weights give the uniform-softmax bias gradient") {
  ToyLM init = ToyLM::initialize(testing::small_shape(), 9);
  std::vector<double> params(init.parameters().begin(), init.parameters().end());
  const auto& layers = init.layers();
  for (const char* name : {kOutputWeight, kOutputBias}) {
    const auto& e = layers.at(name);
    std::fill(params.begin() + static_cast<std::ptrdiff_t>(e.offset),
              params.begin() + static_cast<std::ptrdiff_t>(e.offset + e.length), 0.0);
  }
  const ToyLM model(init.shape(), params, 0, 0.1);
  const ToySample s{1, {3}, {4, 4, 9}};
  const auto g = sample_gradient(model, s);
  const auto bias = g.layer(layers.at(kOutputBias));
  const double V = 12.0;
  for (std::size_t v = 0; v < bias.size(); ++v) {
    double expect = 1.0 / V;
    if (v == 4) expect -= 2.0 / 3.0;
    if (v == 9) expect -= 1.0 / 3.0;
    CHECK(bias[v] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("gradient errors") {
  const ToyLM model = ToyLM::initialize(testing::small_shape(), 1);
  CHECK_THROWS_AS(sample_gradient(model, ToySample{1, {1}, {12}}), InputError);
  CHECK_THROWS_AS(sample_gradient(model, ToySample{1, {99}, {1}}), InputError);
  CHECK_THROWS_AS(sample_gradient(model, ToySample{1, {1}, {}}), InputError);
  CHECK_THROWS_AS(token_gradient(model, ToySample{1, {1}, {2, 3}}, 2), InputError);
}

TEST_CASE("layerwise normalization examples") {
  SUBCASE("3-4-5") {
    FlatGradient g{{3, 4}, LayerMap({{"a", 2}}), {}};
    const auto n = layerwise_normalize(g);
    CHECK(n.gradient.values[0] == doctest::Approx(0.6));
    CHECK(n.gradient.values[1] == doctest::Approx(0.8));
    CHECK(n.report.zero_layer_count() == 0);
  }
  SUBCASE("zero layer is left alone and flagged") {
    FlatGradient g{{0, 0, 0, 5}, LayerMap({{"a", 3}, {"b", 1}}), {}};
    const auto n = layerwise_normalize(g);
    CHECK(n.gradient.values == std::vector<double>{0, 0, 0, 1});
    CHECK(n.report.zero_layer == std::vector<bool>{true, false});
  }
  SUBCASE("axis-aligned layers") {
    FlatGradient g{{1, 0, 0, 2}, LayerMap({{"a", 2}, {"b", 2}}), {}};
    CHECK(layerwise_normalize(g).gradient.values == std::vector<double>{1, 0, 0, 1});
  }
  SUBCASE("non-finite input") {
    FlatGradient g{{1, NAN}, LayerMap({{"a", 2}}), {}};
    CHECK_THROWS_AS(layerwise_normalize(g), InputError);
  }
}

TEST_CASE("layerwise normalization gives unit layers and is idempotent bitwise") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const ToyLM model = ToyLM::initialize(ModelShape{}, trial);
    const auto g = sample_gradient(model, testing::random_sample(rng, 64, trial, 5, 4));
    const auto once = layerwise_normalize(g);
    for (std::size_t li = 0; li < g.layers.size(); ++li) {
      const auto& e = g.layers.entries()[li];
      double sq = 0.0;
      for (double x : once.gradient.layer(e)) sq += x * x;
      if (once.report.zero_layer[li]) {
        CHECK(sq == 0.0);
      } else {
        CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-6);
      }
    }
    const auto twice = layerwise_normalize(once.gradient);
    REQUIRE(twice.gradient.values.size() == once.gradient.values.size());
    CHECK(std::memcmp(twice.gradient.values.data(), once.gradient.values.data(),
                      once.gradient.values.size() * sizeof(double)) == 0);
  }
}

TEST_CASE("flatten and unflatten round-trip bitwise") {
  Rng rng(2);
  const ToyLM model = ToyLM::initialize(ModelShape{}, 2);
  const auto g = sample_gradient(model, testing::random_sample(rng, 64, 0));
  const auto tensors = unflatten(g.values, g.layers);
  CHECK(tensors.size() == 5);
  CHECK(tensors.at(kHiddenBias).size() == 48);
  const auto back = flatten(tensors, g.layers);
  CHECK(std::memcmp(back.data(), g.values.data(), back.size() * sizeof(double)) == 0);
}

TEST_CASE("zero epochs returns the seeded initialization byte for byte") {
  TrainConfig tc;
  tc.seed = 13;
  tc.epochs = 0;
  const auto r = train_toy({ToySample{0, {1, 2}, {3}}}, tc);
  const auto init = ToyLM::initialize(tc.shape, 13);
  REQUIRE(r.model.parameter_count() == init.parameter_count());
  CHECK(std::memcmp(r.model.parameters().data(), init.parameters().data(),
                    init.parameter_count() * sizeof(double)) == 0);
  CHECK(r.model.epochs() == 0);
  CHECK(r.epoch_losses.size() == 1);
}

TEST_CASE("training regression fixture: 50 samples, seed 7, e=5, eta=0.1") {
  TrainConfig tc;
  tc.seed = 7;
  tc.epochs = 5;
  tc.learning_rate = 0.1;
  const auto r = train_toy(counting_corpus(50, 7), tc);
  REQUIRE(r.epoch_losses.size() == 6);
  // frozen from the reference run
  CHECK(r.epoch_losses.front() == doctest::Approx(4.4387999907960936).epsilon(1e-12));
  CHECK(r.epoch_losses.back() == doctest::Approx(4.0726230374886416).epsilon(1e-12));
  CHECK(r.epoch_losses.back() < r.epoch_losses.front());
  for (std::size_t i = 1; i < r.epoch_losses.size(); ++i) {
    CHECK(r.epoch_losses[i] <= r.epoch_losses[i - 1] * 1.01);
  }
  CHECK(r.model.epochs() == 5);
  CHECK(r.model.learning_rate() == 0.1);
}

TEST_CASE("mini-batch training is seeded and reduces the loss") {
  TrainConfig tc;
  tc.seed = 3;
  tc.epochs = 3;
  tc.learning_rate = 0.5;
  tc.batch_size = 8;
  const auto data = counting_corpus(100, 3);
  const auto a = train_toy(data, tc), b = train_toy(data, tc);
  CHECK(encode_checkpoint(a.model) == encode_checkpoint(b.model));
  CHECK(a.epoch_losses.back() < a.epoch_losses.front());
}

TEST_CASE("training configuration and divergence errors") {
  TrainConfig tc;
  CHECK_THROWS_AS(train_toy({}, tc), ConfigError);
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(train_toy(counting_corpus(5, 1), tc), ConfigError);
  tc.learning_rate = 5e-5;
  tc.epochs = 5;
  const auto r = train_toy(counting_corpus(5, 1), tc);
  CHECK(r.model.learning_rate() == 5e-5);
  CHECK(r.model.epochs() == 5);
  tc.learning_rate = 1e300;
  try {
    train_toy(counting_corpus(20, 1), tc);
    FAIL("expected divergence");
  } catch (const TrainingError& e) {
    CHECK(std::string(e.what()).find("epoch 1") != std::string::npos);
  }
}

TEST_CASE("greedy generation is deterministic and in vocabulary") {
  const ToyLM model = ToyLM::initialize(ModelShape{}, 4);
  const std::vector<TokenId> prompt{1, 2, 3};
  const auto a = greedy_generate(model, prompt, 6);
  CHECK(a.size() == 6);
  CHECK(a == greedy_generate(model, prompt, 6));
  for (auto t : a) CHECK(t < 64);
}

TEST_CASE("gradients are safe to compute concurrently") {
  const ToyLM model = ToyLM::initialize(ModelShape{}, 4);
  const auto data = counting_corpus(40, 2);
  std::vector<std::vector<double>> serial, parallel(data.size());
  for (const auto& s : data) serial.push_back(sample_gradient(model, s).values);
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t i = static_cast<std::size_t>(t); i < data.size(); i += 4) {
        parallel[i] = sample_gradient(model, data[i]).values;
      }
    });
  }
  for (auto& th : pool) th.join();
  CHECK(serial == parallel);
}
