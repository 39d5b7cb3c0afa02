#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pfq/data.hpp"
#include "pfq/pfq.hpp"
#include "pfq/quantizer.hpp"
#include "pfq/reports.hpp"
#include "pfq/trainer.hpp"

namespace pfq {

struct StageConfig {
  std::size_t epochs = 0;
  std::size_t batch_size = 32;
  LRSchedule schedule;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  EarlyStopPolicy stop;
};

struct WorkflowConfig {
  int act_bits = 4;
  int weight_bits = 4;
  double epsilon = 1e-5;
  bool enable_pfq = true;
  bool quantize_act_of_beta = true;
  bool skip_padded_consumers = false;
  double ema_momentum = kDefaultEmaMomentum;
  SteMode ste = SteMode::clipped;
  StageConfig act_stage;     // e_A epochs: activations quantized, BN live
  StageConfig weight_stage;  // e_W epochs: activations and weights, BN folded
  // Activation ranges keep following the EMA for this many epochs of the
  // weight stage, then freeze.
  std::size_t weight_stage_range_epochs = 1;
  // Reference for accuracy_drop stops; the pretrained model's validation
  // accuracy when unset.
  std::optional<double> reference_accuracy;
  std::uint64_t seed = 0;
  // When set, every stage's model and reports are written below it.
  std::optional<std::filesystem::path> run_dir;

  void validate() const;
};

struct WorkflowResult {
  ModelGraph graph;
  PruneReport first_pfq;
  PruneReport second_pfq;
  std::vector<RangeRow> folded_ranges;
  std::vector<EpochMetrics> act_metrics;
  std::vector<EpochMetrics> weight_metrics;
  std::vector<std::string> trace;
};

// PfQ, activation-quantized fine-tuning with BN, PfQ again with quantized
// Act(beta), BN folding, then activation- and weight-quantized fine-tuning.
WorkflowResult run_workflow(const ModelGraph& pretrained, const Dataset& train,
                            const Dataset& validation, const Dataset& test,
                            const WorkflowConfig& config);

// One PfQ pass, fold, then e_A + e_W epochs with everything quantized. Uses
// the weight stage's optimizer settings.
WorkflowResult run_single_stage_baseline(const ModelGraph& pretrained, const Dataset& train,
                                         const Dataset& validation, const Dataset& test,
                                         const WorkflowConfig& config);

}  // namespace pfq
