#pragma once

#include <string>

#include "pfq/tensor.hpp"

namespace pfq {

enum class RangePolicy { weight_minmax_per_tensor, activation_ema };
enum class SteMode { clipped, plain };

std::string to_string(RangePolicy p);
std::string to_string(SteMode m);
RangePolicy range_policy_from_string(const std::string& s);
SteMode ste_mode_from_string(const std::string& s);

inline constexpr double kDefaultEmaMomentum = 0.99;

// Uniform min/max quantizer over [lower, upper] with step (upper - lower) / 2^bits,
// i.e. 2^bits + 1 grid points including both ends.
struct QuantConfig {
  int bits = 8;
  double lower = 0.0;
  double upper = 1.0;
  RangePolicy policy = RangePolicy::activation_ema;
  double ema_momentum = kDefaultEmaMomentum;
  SteMode ste = SteMode::clipped;

  double scale() const;
  void validate() const;
  friend bool operator==(const QuantConfig&, const QuantConfig&) = default;
};

// A fake-quantization site. For activations the range is tracked by EMA
// while `frozen` is false; `initialized` flips on the first observation.
// Weight sites recompute min/max from the live weights on every forward.
struct QuantPoint {
  QuantConfig config;
  bool enabled = true;
  bool initialized = false;
  bool frozen = false;

  friend bool operator==(const QuantPoint&, const QuantPoint&) = default;
};

double quantize_value(double x, const QuantConfig& cfg);
Tensor quantize(const Tensor& x, const QuantConfig& cfg);

// Straight-through gradient: clipped mode passes grad where lower <= x <= upper.
Tensor quantize_backward(const Tensor& grad_out, const Tensor& x, const QuantConfig& cfg);

// Element-wise clamp to [lower, upper]; the differentiable stand-in used to
// check the straight-through contract.
Tensor clamp_to_range(const Tensor& x, const QuantConfig& cfg);

// EMA min/max tracking; the first observation sets the range outright.
QuantPoint update_activation_range(const Tensor& observed, const QuantPoint& point);

// Per-tensor min/max config for a weight tensor. Returns false when the tensor
// holds a single distinct value (the grid would be degenerate; such a tensor is
// already exactly representable).
bool weight_range(const Tensor& w, const QuantConfig& base, QuantConfig& out);

}  // namespace pfq
