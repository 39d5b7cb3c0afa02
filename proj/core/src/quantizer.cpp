#include "pfq/quantizer.hpp"

#include <algorithm>
#include <cmath>

#include "pfq/errors.hpp"

namespace pfq {

std::string to_string(RangePolicy p) {
  return p == RangePolicy::weight_minmax_per_tensor ? "weight_minmax_per_tensor"
                                                    : "activation_ema";
}

std::string to_string(SteMode m) { return m == SteMode::clipped ? "clipped" : "plain"; }

RangePolicy range_policy_from_string(const std::string& s) {
  if (s == "weight_minmax_per_tensor") return RangePolicy::weight_minmax_per_tensor;
  if (s == "activation_ema") return RangePolicy::activation_ema;
  throw FormatError("unknown range policy '" + s + "'");
}

SteMode ste_mode_from_string(const std::string& s) {
  if (s == "clipped") return SteMode::clipped;
  if (s == "plain") return SteMode::plain;
  throw FormatError("unknown STE mode '" + s + "'");
}

double QuantConfig::scale() const { return (upper - lower) / std::ldexp(1.0, bits); }

void QuantConfig::validate() const {
  if (bits < 1 || bits > 30) throw ValidationError("quantizer bit width must be in [1, 30]");
  if (!std::isfinite(lower) || !std::isfinite(upper)) {
    throw ValidationError("quantizer range must be finite");
  }
  if (!(upper > lower)) throw ValidationError("quantizer range is degenerate (upper <= lower)");
  if (!(ema_momentum > 0.0 && ema_momentum < 1.0)) {
    throw ValidationError("EMA momentum must lie in (0, 1)");
  }
}

double quantize_value(double x, const QuantConfig& cfg) {
  const double s = cfg.scale();
  const double levels = std::ldexp(1.0, cfg.bits);
  const double clamped = std::clamp(x, cfg.lower, cfg.upper);
  // std::round rounds half away from zero.
  const double k = std::min(std::round((clamped - cfg.lower) / s), levels);
  if (k == levels) return cfg.upper;
  return std::min(k * s + cfg.lower, cfg.upper);
}

Tensor quantize(const Tensor& x, const QuantConfig& cfg) {
  cfg.validate();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = quantize_value(x[i], cfg);
  return out;
}

Tensor quantize_backward(const Tensor& grad_out, const Tensor& x, const QuantConfig& cfg) {
  if (grad_out.shape() != x.shape()) throw ShapeError("quantize_backward shape mismatch");
  if (cfg.ste == SteMode::plain) return grad_out;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] >= cfg.lower && x[i] <= cfg.upper) ? grad_out[i] : 0.0;
  }
  return out;
}

Tensor clamp_to_range(const Tensor& x, const QuantConfig& cfg) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::clamp(x[i], cfg.lower, cfg.upper);
  return out;
}

QuantPoint update_activation_range(const Tensor& observed, const QuantPoint& point) {
  if (point.config.policy != RangePolicy::activation_ema) {
    throw ValidationError("EMA range update on a non-activation quant point");
  }
  if (observed.empty()) return point;
  QuantPoint next = point;
  const double lo = observed.min();
  const double hi = observed.max();
  if (!point.initialized) {
    next.config.lower = lo;
    next.config.upper = hi;
    next.initialized = true;
  } else {
    const double mom = point.config.ema_momentum;
    next.config.lower = point.config.lower * mom + lo * (1.0 - mom);
    next.config.upper = point.config.upper * mom + hi * (1.0 - mom);
  }
  return next;
}

bool weight_range(const Tensor& w, const QuantConfig& base, QuantConfig& out) {
  out = base;
  out.lower = w.min();
  out.upper = w.max();
  return out.upper > out.lower;
}

}  // namespace pfq
