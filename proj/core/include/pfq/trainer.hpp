#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "pfq/data.hpp"
#include "pfq/executor.hpp"
#include "pfq/graph.hpp"

namespace pfq {

// lr(e) = base * e / w while e < w, then base * (1 + cos((e - w) / period * pi)).
// The peak at e == w is 2 * base.
struct LRSchedule {
  double base_lr = 0.001;
  std::size_t warmup_epochs = 0;
  double period = 100.0;

  void validate() const;
};

double lr_at(const LRSchedule& schedule, double epoch);

struct OptimizerState {
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::vector<Tensor> velocity;  // lazily shaped on the first step
  std::uint64_t iteration = 0;

  void validate() const;
};

// v <- momentum * v + g + wd * p (decay only where ParamRef::decays), p <- p - lr * v.
void sgd_step(std::span<const ParamRef> params, std::span<const Tensor> grads,
              OptimizerState& state, double lr);

enum class StopMode { fixed_epochs, accuracy_drop };

std::string to_string(StopMode m);
StopMode stop_mode_from_string(const std::string& s);

// Accuracies are percentages.
struct EarlyStopPolicy {
  StopMode mode = StopMode::fixed_epochs;
  double drop_threshold = 0.5;
  double reference_accuracy = 0.0;

  void validate() const;
};

struct TrainConfig {
  std::size_t epochs = 1;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  LRSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  EarlyStopPolicy stop;
  // BN uses batch statistics (and updates its running statistics).
  bool bn_training = true;
  // Activation quant ranges follow the EMA for this many epochs and are
  // frozen afterwards.
  std::size_t act_range_update_epochs = std::numeric_limits<std::size_t>::max();
  std::function<void(std::size_t layer, const BatchStats&)> on_batch_stats;

  void validate() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_acc = std::numeric_limits<double>::quiet_NaN();
  double test_acc = std::numeric_limits<double>::quiet_NaN();
};

struct TrainResult {
  ModelGraph graph;
  std::vector<EpochMetrics> metrics;
  OptimizerState optimizer;
  bool stopped_early = false;
};

// Empty validation / test sets are skipped in the metrics (NaN).
TrainResult train_epochs(const ModelGraph& graph, const Dataset& train, const Dataset& validation,
                         const Dataset& test, const TrainConfig& config);

// Top-1 accuracy in percent with inference-mode BN and frozen quant ranges.
double evaluate_accuracy(const ModelGraph& graph, const Dataset& data, std::size_t batch_size = 128);

void write_metrics_csv(std::ostream& os, std::span<const EpochMetrics> metrics);

}  // namespace pfq
