#include "pfq/batchnorm.hpp"

#include <cmath>
#include <numeric>
#include <string>

#include "pfq/errors.hpp"

namespace pfq {

namespace {

struct ChannelLayout {
  std::size_t n;
  std::size_t c;
  std::size_t plane;
};

ChannelLayout layout_of(const Tensor& input, const BNParams& params) {
  if (input.rank() != 2 && input.rank() != 4) {
    throw ShapeError("batch norm expects N x C or N x C x H x W input, got " +
                     shape_to_string(input.shape()));
  }
  ChannelLayout l{input.dim(0), input.dim(1), input.rank() == 4 ? input.dim(2) * input.dim(3) : 1};
  if (l.c != params.channels()) {
    throw ShapeError("batch norm has " + std::to_string(params.channels()) +
                     " channels, input has " + std::to_string(l.c));
  }
  return l;
}

template <typename Fn>
void for_channel(const ChannelLayout& l, std::size_t c, Fn&& fn) {
  for (std::size_t n = 0; n < l.n; ++n) {
    const std::size_t base = (n * l.c + c) * l.plane;
    for (std::size_t p = 0; p < l.plane; ++p) fn(base + p);
  }
}

template <typename P>
P fold_rows(const P& layer, const BNParams& bn, std::size_t rows, std::size_t row_len) {
  bn.validate();
  if (rows != bn.channels()) {
    throw ShapeError("cannot fold batch norm with " + std::to_string(bn.channels()) +
                     " channels into layer with " + std::to_string(rows) + " outputs");
  }
  const std::vector<double> scale = bn_scale(bn);
  P out = layer;
  for (std::size_t o = 0; o < rows; ++o) {
    double* w = out.weight.data().data() + o * row_len;
    for (std::size_t j = 0; j < row_len; ++j) w[j] *= scale[o];
  }
  Tensor bias({rows});
  for (std::size_t o = 0; o < rows; ++o) {
    const double b = layer.bias ? (*layer.bias)[o] : 0.0;
    bias[o] = scale[o] * b + bn.beta[o] - scale[o] * bn.running_mean[o];
  }
  out.bias = std::move(bias);
  return out;
}

}  // namespace

BNParams BNParams::identity(std::size_t channels, double epsilon, double rho) {
  BNParams p;
  p.gamma = Tensor({channels}, 1.0);
  p.beta = Tensor({channels}, 0.0);
  p.running_mean = Tensor({channels}, 0.0);
  p.running_var = Tensor({channels}, 1.0);
  p.epsilon = epsilon;
  p.rho = rho;
  p.channel_ids.resize(channels);
  std::iota(p.channel_ids.begin(), p.channel_ids.end(), 0);
  return p;
}

void BNParams::validate() const {
  const std::size_t c = gamma.size();
  if (c == 0) throw ValidationError("batch norm must have at least one channel");
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c ||
      channel_ids.size() != c) {
    throw ShapeError("batch norm parameter vectors disagree on channel count");
  }
  if (!(epsilon > 0.0)) throw ValidationError("batch norm epsilon must be positive");
  if (!(rho > 0.0 && rho < 1.0)) throw ValidationError("batch norm rho must lie in (0, 1)");
  for (double v : running_var.data()) {
    if (!(v >= 0.0)) throw ValidationError("batch norm running variance must be non-negative");
  }
}

BnTrainResult bn_forward_train(const Tensor& input, const BNParams& params) {
  params.validate();
  const ChannelLayout l = layout_of(input, params);
  const std::size_t count = l.n * l.plane;
  if (count < 2) {
    throw ValidationError("training-mode batch norm needs at least 2 elements per channel, got " +
                          std::to_string(count));
  }
  require_finite(input, "batch norm input");
  BnTrainResult r{Tensor(input.shape()), BatchStats{}, params, BnCache{Tensor(input.shape()), {}}};
  r.stats.mu.resize(l.c);
  r.stats.sigma2.resize(l.c);
  r.stats.count = count;
  r.cache.inv_std.resize(l.c);
  const double inv_count = 1.0 / static_cast<double>(count);
  for (std::size_t c = 0; c < l.c; ++c) {
    double sum = 0.0;
    const double first = input[c * l.plane];
    bool constant = true;
    for_channel(l, c, [&](std::size_t i) {
      sum += input[i];
      constant = constant && input[i] == first;
    });
    // A batch-constant channel must give mu == value and sigma2 == 0 exactly.
    const double mu = constant ? first : sum * inv_count;
    double sq = 0.0;
    for_channel(l, c, [&](std::size_t i) {
      const double d = input[i] - mu;
      sq += d * d;
    });
    const double sigma2 = sq * inv_count;
    const double inv_std = 1.0 / std::sqrt(sigma2 + params.epsilon);
    const double g = params.gamma[c], b = params.beta[c];
    for_channel(l, c, [&](std::size_t i) {
      const double xh = (input[i] - mu) * inv_std;
      r.cache.x_hat[i] = xh;
      r.output[i] = xh * g + b;
    });
    r.stats.mu[c] = mu;
    r.stats.sigma2[c] = sigma2;
    r.cache.inv_std[c] = inv_std;
  }
  bn_update_running_stats(r.updated, r.stats);
  return r;
}

void bn_update_running_stats(BNParams& params, const BatchStats& stats) {
  if (stats.mu.size() != params.channels() || stats.sigma2.size() != params.channels()) {
    throw ShapeError("batch statistics do not match batch norm channel count");
  }
  if (stats.count < 2) throw ValidationError("running variance update needs count >= 2");
  const double rho = params.rho;
  const double n = static_cast<double>(stats.count);
  const double bessel = n / (n - 1.0);
  for (std::size_t c = 0; c < params.channels(); ++c) {
    params.running_mean[c] = params.running_mean[c] * rho + stats.mu[c] * (1.0 - rho);
    params.running_var[c] = params.running_var[c] * rho + stats.sigma2[c] * (1.0 - rho) * bessel;
  }
}

Tensor bn_forward_infer(const Tensor& input, const BNParams& params) {
  params.validate();
  const ChannelLayout l = layout_of(input, params);
  Tensor out(input.shape());
  for (std::size_t c = 0; c < l.c; ++c) {
    const double inv_std = 1.0 / std::sqrt(params.running_var[c] + params.epsilon);
    const double m = params.running_mean[c], g = params.gamma[c], b = params.beta[c];
    for_channel(l, c, [&](std::size_t i) { out[i] = (input[i] - m) * inv_std * g + b; });
  }
  return out;
}

BnGrads bn_backward(const Tensor& grad_out, const BnCache& cache, const BNParams& params) {
  if (cache.x_hat.empty()) throw ValidationError("bn_backward: missing forward cache");
  if (grad_out.shape() != cache.x_hat.shape()) throw ShapeError("bn_backward grad shape mismatch");
  const ChannelLayout l = layout_of(grad_out, params);
  const double count = static_cast<double>(l.n * l.plane);
  BnGrads g{Tensor(grad_out.shape()), Tensor({l.c}), Tensor({l.c})};
  for (std::size_t c = 0; c < l.c; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for_channel(l, c, [&](std::size_t i) {
      sum_g += grad_out[i];
      sum_gx += grad_out[i] * cache.x_hat[i];
    });
    g.beta[c] = sum_g;
    g.gamma[c] = sum_gx;
    const double k = params.gamma[c] * cache.inv_std[c] / count;
    for_channel(l, c, [&](std::size_t i) {
      g.input[i] = k * (count * grad_out[i] - sum_g - cache.x_hat[i] * sum_gx);
    });
  }
  return g;
}

std::vector<double> bn_scale(const BNParams& params) {
  std::vector<double> s(params.channels());
  for (std::size_t c = 0; c < s.size(); ++c) {
    s[c] = params.gamma[c] / std::sqrt(params.running_var[c] + params.epsilon);
  }
  return s;
}

ConvParams fold_bn(const ConvParams& conv, const BNParams& bn) {
  conv.validate();
  const Shape& s = conv.weight.shape();
  return fold_rows(conv, bn, s[0], s[1] * s[2] * s[3]);
}

DepthwiseConvParams fold_bn(const DepthwiseConvParams& conv, const BNParams& bn) {
  conv.validate();
  const Shape& s = conv.weight.shape();
  return fold_rows(conv, bn, s[0], s[2] * s[3]);
}

AffineParams fold_bn(const AffineParams& affine, const BNParams& bn) {
  affine.validate();
  bn.validate();
  const std::size_t d = affine.in_features(), k = affine.out_features();
  if (k != bn.channels()) throw ShapeError("cannot fold batch norm into affine: width mismatch");
  const std::vector<double> scale = bn_scale(bn);
  AffineParams out = affine;
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t c = 0; c < k; ++c) out.weight[j * k + c] *= scale[c];
  }
  Tensor bias({k});
  for (std::size_t c = 0; c < k; ++c) {
    const double b = affine.bias ? (*affine.bias)[c] : 0.0;
    bias[c] = scale[c] * b + bn.beta[c] - scale[c] * bn.running_mean[c];
  }
  out.bias = std::move(bias);
  return out;
}

}  // namespace pfq
