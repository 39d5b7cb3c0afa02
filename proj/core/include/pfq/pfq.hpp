#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pfq/graph.hpp"

namespace pfq {

// A BN channel whose running variance is strictly below epsilon.
struct PruneCandidate {
  std::string bn_layer;
  std::size_t bn_index = 0;
  std::size_t channel = 0;       // current position in the layer
  std::int64_t channel_id = 0;   // index in the layer as originally built
  double running_var = 0.0;
  double beta = 0.0;
  double act_of_beta = 0.0;      // beta pushed through the activations after the BN
};

std::vector<PruneCandidate> scan_candidates(const ModelGraph& graph, double epsilon,
                                            bool quantize_act_of_beta = true);

// U_o = act_of_beta * sum_{u,v} w[o, channel, u, v] for a rank-4 conv weight,
// or U_k = act_of_beta * W[channel, k] for a rank-2 affine weight.
std::vector<double> compute_bias_correction(const Tensor& consumer_weight, std::size_t channel,
                                            double act_of_beta);

struct PfqOptions {
  double epsilon = 1e-5;
  // Run Act(beta) through the active activation quantizer, if any.
  bool quantize_act_of_beta = true;
  // When false, channels are removed without compensating the consumer.
  bool correct = true;
  // A constant channel entering a zero-padded conv is only constant in the
  // interior of the output; with this set such channels are skipped
  // (reason "padded") instead of corrected approximately at the border.
  bool skip_padded_consumers = false;
};

// One row per candidate channel (and per channel removed by a depthwise
// cascade). `kind` is one of: bias, beta, none-ReLU-zero, uncorrected,
// cascade (applied), or residual, would-empty, no-consumer, graph-input,
// padded (skipped).
struct PruneEntry {
  std::string layer;
  std::int64_t channel = 0;
  std::string kind;
  double running_var = 0.0;
  double beta = 0.0;
  double u_norm = 0.0;
  bool removed = false;
};

struct LayerPruneSummary {
  std::string layer;
  std::vector<std::int64_t> removed;
  std::size_t weights_removed = 0;
};

struct PruneReport {
  std::vector<PruneEntry> entries;
  std::vector<LayerPruneSummary> layers;
  std::size_t params_before = 0;
  std::size_t params_after = 0;
  std::uint64_t macs_before = 0;
  std::uint64_t macs_after = 0;

  std::size_t weights_removed() const { return params_before - params_after; }
  double percent_removed() const;
  std::size_t channels_removed() const;
  bool empty() const { return entries.empty(); }

  // CSV: layer,channel,kind,Vt,beta,U_norm
  void write_csv(std::ostream& os) const;
  std::string summary() const;
};

struct PfqResult {
  ModelGraph graph;
  PruneReport report;
};

// Removes every BN channel with running variance < epsilon, together with the
// producing filter and the consumer's input slice, and folds the constant
// the channel contributed into the consumer's bias (or the following BN's
// beta). Depthwise consumers cascade the constant to the next layer;
// depthwise producers release the upstream filter feeding them.
PfqResult apply_pfq(const ModelGraph& graph, const PfqOptions& options);

struct ConstancyRow {
  std::string layer;
  std::int64_t channel = 0;
  double running_var = 0.0;
  double spread = 0.0;  // max - min of the BN output over batch and space
};

// Inference-mode BN outputs on `batch`, one row per BN channel.
std::vector<ConstancyRow> channel_constancy_report(const ModelGraph& graph, const Tensor& batch);
void write_constancy_csv(std::ostream& os, const std::vector<ConstancyRow>& rows);

}  // namespace pfq
