#pragma once

#include <cstdint>
#include <vector>

#include "gradtrace/toy_lm.hpp"

namespace gradtrace {

struct TrainConfig {
  ModelShape shape;
  std::uint64_t seed = 0;
  std::uint64_t epochs = 5;
  double learning_rate = 0.1;
  // 0 means full batch.
  std::size_t batch_size = 0;
};

struct TrainResult {
  ToyLM model;
  // Mean per-token training loss before training and after each epoch
  // (epoch_losses.size() == epochs + 1).
  std::vector<double> epoch_losses;
};

// Plain (mini-)batch gradient descent on the mean per-token cross-entropy
// over generation tokens. The returned model records (epochs, learning_rate)
// exactly as configured.
TrainResult train_toy(const Dataset& data, const TrainConfig& config);

}  // namespace gradtrace
