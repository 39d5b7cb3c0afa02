#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "pfq/batchnorm.hpp"
#include "pfq/graph.hpp"
#include "pfq/tensor.hpp"

namespace pfq {

struct ForwardOptions {
  // Batch statistics in BN (and running-stat updates written back to the
  // graph). Otherwise BN uses running statistics.
  bool training = false;
  // EMA-update unfrozen activation quant ranges from this batch.
  bool update_act_ranges = false;
  // Replace every active quantizer by a clamp to its range. Used to check the
  // straight-through gradient contract.
  bool clamp_instead_of_quantize = false;
  // Called with each training-mode BN layer's batch statistics.
  std::function<void(std::size_t layer, const BatchStats&)> on_batch_stats;
};

// Everything backward() needs from one forward pass.
struct Tape {
  Tensor input;
  std::vector<Tensor> outputs;
  std::vector<std::optional<BnCache>> bn_caches;
  // Weights actually used in the forward (quantized when the site is active).
  std::vector<std::optional<Tensor>> effective_weights;
  std::vector<std::optional<QuantConfig>> quant_used;
  bool training = false;
};

// Runs the graph on an N x C x H x W batch. In training mode BN running
// statistics are written back into `graph`; with update_act_ranges the
// activation ranges are as well.
Tape forward(ModelGraph& graph, const Tensor& input, const ForwardOptions& options);

// Inference: BN running statistics, frozen quant ranges, no mutation.
Tensor predict(const ModelGraph& graph, const Tensor& input);

struct Gradients {
  std::vector<Tensor> params;  // aligned with parameters(graph)
  Tensor input;
};

Gradients backward(const ModelGraph& graph, const Tape& tape, const Tensor& grad_output);

}  // namespace pfq
