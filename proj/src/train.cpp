#include "gradtrace/train.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "gradtrace/error.hpp"
#include "gradtrace/rng.hpp"

namespace gradtrace {

TrainResult train_toy(const Dataset& data, const TrainConfig& config) {
  if (data.empty()) throw ConfigError("training dataset is empty");
  if (!(config.learning_rate > 0.0) || !std::isfinite(config.learning_rate)) {
    throw ConfigError("learning rate must be positive and finite");
  }
  for (const auto& s : data) validate_sample(s, config.shape.vocab_size);

  ToyLM model = ToyLM::initialize(config.shape, config.seed);
  TrainResult result;
  result.epoch_losses.push_back(dataset_loss(model, data));

  const std::size_t n = data.size();
  const std::size_t batch = (config.batch_size == 0 || config.batch_size >= n) ? n : config.batch_size;
  std::vector<double> grad(model.parameter_count());
  std::vector<std::size_t> positions;
  std::vector<std::uint64_t> order(n);
  std::iota(order.begin(), order.end(), std::uint64_t{0});

  for (std::uint64_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (batch < n) order = fisher_yates_permutation(n, derive_seed(config.seed, StreamDomain::batch_order, epoch));
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      std::size_t tokens = 0;
      for (std::size_t i = start; i < stop; ++i) tokens += data[order[i]].generation.size();
      const double scale = 1.0 / static_cast<double>(tokens);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = start; i < stop; ++i) {
        const auto& s = data[order[i]];
        positions.resize(s.generation.size());
        std::iota(positions.begin(), positions.end(), std::size_t{0});
        accumulate_gradient(model, s, positions, scale, grad);
      }
      auto params = model.mutable_parameters();
      for (std::size_t i = 0; i < params.size(); ++i) params[i] -= config.learning_rate * grad[i];
    }
    const double loss = dataset_loss(model, data);
    if (!std::isfinite(loss)) {
      throw TrainingError("training diverged at epoch " + std::to_string(epoch) +
                          ": loss is not finite");
    }
    result.epoch_losses.push_back(loss);
  }
  model.set_training_constants(config.epochs, config.learning_rate);
  result.model = std::move(model);
  return result;
}

}  // namespace gradtrace
