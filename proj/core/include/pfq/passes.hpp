#pragma once

#include "pfq/graph.hpp"
#include "pfq/quantizer.hpp"

namespace pfq {

// Folds every conv/depthwise/affine -> BN pair using the running statistics.
// The folded layer keeps the producer's name; add junctions that referenced
// the BN are re-pointed at it.
ModelGraph fold_all_bn(const ModelGraph& graph);

struct QuantInsertOptions {
  int act_bits = 4;
  int weight_bits = 4;
  double ema_momentum = kDefaultEmaMomentum;
  SteMode ste = SteMode::clipped;
  bool enable_activations = true;
  bool enable_weights = true;
};

// Activation quant points go after every relu, relu6 and global-average-pool
// output except the graph's final layer (add junction outputs are never
// quantized). Every conv, depthwise conv and affine gets a weight quant point,
// first and last layers included. Existing points are kept.
ModelGraph insert_quant_points(const ModelGraph& graph, const QuantInsertOptions& options);

void set_weight_quant_enabled(ModelGraph& graph, bool enabled);
void set_act_quant_enabled(ModelGraph& graph, bool enabled);
void set_act_ranges_frozen(ModelGraph& graph, bool frozen);

std::size_t count_act_quant_points(const ModelGraph& graph);
std::size_t count_weight_quant_points(const ModelGraph& graph);

// Throws StageOrderError if a layer with enabled weight quantization is still
// followed by BN (weights must be quantized after folding).
void check_weight_quant_order(const ModelGraph& graph);

}  // namespace pfq
