#pragma once

#include <cstdint>
#include <vector>

#include "pfq/ops.hpp"
#include "pfq/tensor.hpp"

namespace pfq {

inline constexpr double kDefaultBnEpsilon = 1e-5;
inline constexpr double kDefaultBnRho = 0.9;

// Per-channel batch-norm state. Running statistics start at mean 0 and
// variance 1. `channel_ids` tracks each channel's index in the layer as
// originally built, so reports stay stable after channels are pruned.
struct BNParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double epsilon = kDefaultBnEpsilon;
  double rho = kDefaultBnRho;
  std::vector<std::int64_t> channel_ids;

  static BNParams identity(std::size_t channels, double epsilon = kDefaultBnEpsilon,
                           double rho = kDefaultBnRho);
  std::size_t channels() const { return gamma.size(); }
  void validate() const;
};

struct BatchStats {
  std::vector<double> mu;
  std::vector<double> sigma2;  // biased (1/N) variance
  std::size_t count = 0;       // elements per channel
};

// What the backward pass needs from a training-mode forward.
struct BnCache {
  Tensor x_hat;
  std::vector<double> inv_std;
};

struct BnTrainResult {
  Tensor output;
  BatchStats stats;
  BNParams updated;
  BnCache cache;
};

// Input is N x C or N x C x H x W; statistics are per channel over all other
// axes. The output uses the biased variance; the running variance update
// applies the N/(N-1) correction.
BnTrainResult bn_forward_train(const Tensor& input, const BNParams& params);

// Running-stat recurrences, exposed for replay and tests.
void bn_update_running_stats(BNParams& params, const BatchStats& stats);

Tensor bn_forward_infer(const Tensor& input, const BNParams& params);

struct BnGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

// Exact gradient through the batch mean and variance.
BnGrads bn_backward(const Tensor& grad_out, const BnCache& cache, const BNParams& params);

// Per-channel multiplier gamma / sqrt(V + eps).
std::vector<double> bn_scale(const BNParams& params);

// Fold running statistics into the preceding layer. The result always has a
// bias.
ConvParams fold_bn(const ConvParams& conv, const BNParams& bn);
DepthwiseConvParams fold_bn(const DepthwiseConvParams& conv, const BNParams& bn);
AffineParams fold_bn(const AffineParams& affine, const BNParams& bn);

}  // namespace pfq
