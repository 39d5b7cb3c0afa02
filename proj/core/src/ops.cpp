#include "pfq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pfq/errors.hpp"
#include "pfq/parallel.hpp"

namespace pfq {

namespace {

void check_bias(const std::optional<Tensor>& bias, std::size_t expected, const char* what) {
  if (bias && (bias->rank() != 1 || bias->dim(0) != expected)) {
    throw ShapeError(std::string(what) + " bias shape " + shape_to_string(bias->shape()) +
                     " does not match " + std::to_string(expected) + " channels");
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " expects rank " + std::to_string(rank) + ", got " +
                     shape_to_string(t.shape()));
  }
}

// Range of output indices [lo, hi) whose input coordinate o*stride + k - pad
// lands inside [0, in).
struct ValidRange {
  std::size_t lo;
  std::size_t hi;
};

ValidRange valid_outputs(std::size_t out, std::size_t in, std::size_t k, std::size_t stride,
                         std::size_t pad) {
  const long long lo_num = static_cast<long long>(pad) - static_cast<long long>(k);
  long long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long long>(stride) - 1) / stride;
  const long long hi_num = static_cast<long long>(in) - 1 + static_cast<long long>(pad) -
                           static_cast<long long>(k);
  long long hi = hi_num < 0 ? 0 : hi_num / static_cast<long long>(stride) + 1;
  hi = std::min<long long>(hi, static_cast<long long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

struct ConvShape {
  std::size_t n, in_c, in_h, in_w, out_c, out_h, out_w, kh, kw;
};

ConvShape conv_shape(const Tensor& input, const Tensor& weight, const ConvGeometry& g,
                     bool depthwise) {
  require_rank(input, 4, depthwise ? "depthwise_conv2d" : "conv2d");
  ConvShape s{};
  s.n = input.dim(0);
  s.in_c = input.dim(1);
  s.in_h = input.dim(2);
  s.in_w = input.dim(3);
  s.out_c = weight.dim(0);
  s.kh = weight.dim(2);
  s.kw = weight.dim(3);
  const std::size_t expected_in = depthwise ? s.out_c : weight.dim(1);
  if (s.in_c != expected_in) {
    throw ShapeError("conv input has " + std::to_string(s.in_c) + " channels, weights expect " +
                     std::to_string(expected_in));
  }
  if (g.stride_h == 0 || g.stride_w == 0) throw ShapeError("conv stride must be positive");
  s.out_h = conv_output_extent(s.in_h, s.kh, g.stride_h, g.pad_h);
  s.out_w = conv_output_extent(s.in_w, s.kw, g.stride_w, g.pad_w);
  return s;
}

// out_plane += w * shifted(in_plane) over the valid window for kernel tap (u, v).
inline void accumulate_tap(double* out_plane, const double* in_plane, double w, std::size_t u,
                           std::size_t v, const ConvShape& s, const ConvGeometry& g) {
  const ValidRange ry = valid_outputs(s.out_h, s.in_h, u, g.stride_h, g.pad_h);
  const ValidRange rx = valid_outputs(s.out_w, s.in_w, v, g.stride_w, g.pad_w);
  for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
    const std::size_t iy = oy * g.stride_h + u - g.pad_h;
    const double* in_row = in_plane + iy * s.in_w;
    double* out_row = out_plane + oy * s.out_w;
    if (g.stride_w == 1) {
      const double* src = in_row + v - g.pad_w;
      for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) out_row[ox] += w * src[ox];
    } else {
      for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
        out_row[ox] += w * in_row[ox * g.stride_w + v - g.pad_w];
      }
    }
  }
}

// in_plane += w * scatter(grad_plane) for kernel tap (u, v).
inline void scatter_tap(double* in_plane, const double* grad_plane, double w, std::size_t u,
                        std::size_t v, const ConvShape& s, const ConvGeometry& g) {
  const ValidRange ry = valid_outputs(s.out_h, s.in_h, u, g.stride_h, g.pad_h);
  const ValidRange rx = valid_outputs(s.out_w, s.in_w, v, g.stride_w, g.pad_w);
  for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
    const std::size_t iy = oy * g.stride_h + u - g.pad_h;
    double* in_row = in_plane + iy * s.in_w;
    const double* g_row = grad_plane + oy * s.out_w;
    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
      in_row[ox * g.stride_w + v - g.pad_w] += w * g_row[ox];
    }
  }
}

// sum over the valid window of grad * shifted(input) for kernel tap (u, v).
inline double correlate_tap(const double* in_plane, const double* grad_plane, std::size_t u,
                            std::size_t v, const ConvShape& s, const ConvGeometry& g) {
  const ValidRange ry = valid_outputs(s.out_h, s.in_h, u, g.stride_h, g.pad_h);
  const ValidRange rx = valid_outputs(s.out_w, s.in_w, v, g.stride_w, g.pad_w);
  double acc = 0.0;
  for (std::size_t oy = ry.lo; oy < ry.hi; ++oy) {
    const std::size_t iy = oy * g.stride_h + u - g.pad_h;
    const double* in_row = in_plane + iy * s.in_w;
    const double* g_row = grad_plane + oy * s.out_w;
    for (std::size_t ox = rx.lo; ox < rx.hi; ++ox) {
      acc += g_row[ox] * in_row[ox * g.stride_w + v - g.pad_w];
    }
  }
  return acc;
}

}  // namespace

void ConvParams::validate() const {
  require_rank(weight, 4, "conv weight");
  if (weight.dim(0) == 0 || weight.dim(1) == 0 || weight.dim(2) == 0 || weight.dim(3) == 0) {
    throw ShapeError("conv weight extents must be positive, got " +
                     shape_to_string(weight.shape()));
  }
  check_bias(bias, weight.dim(0), "conv");
}

void DepthwiseConvParams::validate() const {
  require_rank(weight, 4, "depthwise weight");
  if (weight.dim(1) != 1) throw ShapeError("depthwise weight must have channel multiplier 1");
  if (weight.dim(0) == 0 || weight.dim(2) == 0 || weight.dim(3) == 0) {
    throw ShapeError("depthwise weight extents must be positive");
  }
  check_bias(bias, weight.dim(0), "depthwise");
}

void AffineParams::validate() const {
  require_rank(weight, 2, "affine weight");
  if (weight.dim(0) == 0 || weight.dim(1) == 0) throw ShapeError("affine extents must be positive");
  check_bias(bias, weight.dim(1), "affine");
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad) {
  if (stride == 0) throw ShapeError("stride must be positive");
  if (in + 2 * pad < kernel) {
    throw ShapeError("kernel " + std::to_string(kernel) + " larger than padded input " +
                     std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - kernel) / stride + 1;
}

Tensor conv2d_forward(const Tensor& input, const ConvParams& params, const ConvGeometry& geom) {
  params.validate();
  const ConvShape s = conv_shape(input, params.weight, geom, false);
  require_finite(input, "conv2d input");
  Tensor out({s.n, s.out_c, s.out_h, s.out_w});
  const std::size_t in_plane = s.in_h * s.in_w;
  const std::size_t out_plane = s.out_h * s.out_w;
  const double* x = input.data().data();
  const double* w = params.weight.data().data();
  double* y = out.data().data();
  parallel_for(s.n, [&](std::size_t n) {
    for (std::size_t o = 0; o < s.out_c; ++o) {
      double* yp = y + (n * s.out_c + o) * out_plane;
      if (params.bias) std::fill(yp, yp + out_plane, (*params.bias)[o]);
      for (std::size_t i = 0; i < s.in_c; ++i) {
        const double* xp = x + (n * s.in_c + i) * in_plane;
        const double* wk = w + (o * s.in_c + i) * s.kh * s.kw;
        for (std::size_t u = 0; u < s.kh; ++u) {
          for (std::size_t v = 0; v < s.kw; ++v) {
            accumulate_tap(yp, xp, wk[u * s.kw + v], u, v, s, geom);
          }
        }
      }
    }
  });
  return out;
}

ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const ConvParams& params,
                          const ConvGeometry& geom) {
  if (input.empty()) throw ValidationError("conv2d_backward: missing forward cache");
  params.validate();
  const ConvShape s = conv_shape(input, params.weight, geom, false);
  if (grad_out.shape() != Shape{s.n, s.out_c, s.out_h, s.out_w}) {
    throw ShapeError("conv2d_backward grad shape " + shape_to_string(grad_out.shape()) +
                     " does not match forward output");
  }
  ConvGrads grads{Tensor(input.shape()), Tensor(params.weight.shape()), std::nullopt};
  const std::size_t in_plane = s.in_h * s.in_w;
  const std::size_t out_plane = s.out_h * s.out_w;
  const double* x = input.data().data();
  const double* w = params.weight.data().data();
  const double* g = grad_out.data().data();
  double* gx = grads.input.data().data();
  double* gw = grads.weight.data().data();

  parallel_for(s.n, [&](std::size_t n) {
    for (std::size_t o = 0; o < s.out_c; ++o) {
      const double* gp = g + (n * s.out_c + o) * out_plane;
      for (std::size_t i = 0; i < s.in_c; ++i) {
        double* gxp = gx + (n * s.in_c + i) * in_plane;
        const double* wk = w + (o * s.in_c + i) * s.kh * s.kw;
        for (std::size_t u = 0; u < s.kh; ++u) {
          for (std::size_t v = 0; v < s.kw; ++v) {
            scatter_tap(gxp, gp, wk[u * s.kw + v], u, v, s, geom);
          }
        }
      }
    }
  });

  parallel_for(s.out_c, [&](std::size_t o) {
    for (std::size_t n = 0; n < s.n; ++n) {
      const double* gp = g + (n * s.out_c + o) * out_plane;
      for (std::size_t i = 0; i < s.in_c; ++i) {
        const double* xp = x + (n * s.in_c + i) * in_plane;
        double* gwk = gw + (o * s.in_c + i) * s.kh * s.kw;
        for (std::size_t u = 0; u < s.kh; ++u) {
          for (std::size_t v = 0; v < s.kw; ++v) {
            gwk[u * s.kw + v] += correlate_tap(xp, gp, u, v, s, geom);
          }
        }
      }
    }
  });

  if (params.bias) {
    Tensor gb({s.out_c});
    for (std::size_t o = 0; o < s.out_c; ++o) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const double* gp = g + (n * s.out_c + o) * out_plane;
        for (std::size_t p = 0; p < out_plane; ++p) acc += gp[p];
      }
      gb[o] = acc;
    }
    grads.bias = std::move(gb);
  }
  return grads;
}

Tensor depthwise_conv2d_forward(const Tensor& input, const DepthwiseConvParams& params,
                                const ConvGeometry& geom) {
  params.validate();
  const ConvShape s = conv_shape(input, params.weight, geom, true);
  require_finite(input, "depthwise_conv2d input");
  Tensor out({s.n, s.out_c, s.out_h, s.out_w});
  const std::size_t in_plane = s.in_h * s.in_w;
  const std::size_t out_plane = s.out_h * s.out_w;
  const double* x = input.data().data();
  const double* w = params.weight.data().data();
  double* y = out.data().data();
  parallel_for(s.n, [&](std::size_t n) {
    for (std::size_t c = 0; c < s.out_c; ++c) {
      double* yp = y + (n * s.out_c + c) * out_plane;
      if (params.bias) std::fill(yp, yp + out_plane, (*params.bias)[c]);
      const double* xp = x + (n * s.in_c + c) * in_plane;
      const double* wk = w + c * s.kh * s.kw;
      for (std::size_t u = 0; u < s.kh; ++u) {
        for (std::size_t v = 0; v < s.kw; ++v) {
          accumulate_tap(yp, xp, wk[u * s.kw + v], u, v, s, geom);
        }
      }
    }
  });
  return out;
}

ConvGrads depthwise_conv2d_backward(const Tensor& grad_out, const Tensor& input,
                                    const DepthwiseConvParams& params, const ConvGeometry& geom) {
  if (input.empty()) throw ValidationError("depthwise_conv2d_backward: missing forward cache");
  params.validate();
  const ConvShape s = conv_shape(input, params.weight, geom, true);
  if (grad_out.shape() != Shape{s.n, s.out_c, s.out_h, s.out_w}) {
    throw ShapeError("depthwise_conv2d_backward grad shape " + shape_to_string(grad_out.shape()) +
                     " does not match forward output");
  }
  ConvGrads grads{Tensor(input.shape()), Tensor(params.weight.shape()), std::nullopt};
  const std::size_t in_plane = s.in_h * s.in_w;
  const std::size_t out_plane = s.out_h * s.out_w;
  const double* x = input.data().data();
  const double* w = params.weight.data().data();
  const double* g = grad_out.data().data();
  double* gx = grads.input.data().data();
  double* gw = grads.weight.data().data();

  parallel_for(s.n, [&](std::size_t n) {
    for (std::size_t c = 0; c < s.out_c; ++c) {
      const double* gp = g + (n * s.out_c + c) * out_plane;
      double* gxp = gx + (n * s.in_c + c) * in_plane;
      const double* wk = w + c * s.kh * s.kw;
      for (std::size_t u = 0; u < s.kh; ++u) {
        for (std::size_t v = 0; v < s.kw; ++v) {
          scatter_tap(gxp, gp, wk[u * s.kw + v], u, v, s, geom);
        }
      }
    }
  });

  parallel_for(s.out_c, [&](std::size_t c) {
    double* gwk = gw + c * s.kh * s.kw;
    for (std::size_t n = 0; n < s.n; ++n) {
      const double* gp = g + (n * s.out_c + c) * out_plane;
      const double* xp = x + (n * s.in_c + c) * in_plane;
      for (std::size_t u = 0; u < s.kh; ++u) {
        for (std::size_t v = 0; v < s.kw; ++v) {
          gwk[u * s.kw + v] += correlate_tap(xp, gp, u, v, s, geom);
        }
      }
    }
  });

  if (params.bias) {
    Tensor gb({s.out_c});
    for (std::size_t c = 0; c < s.out_c; ++c) {
      double acc = 0.0;
      for (std::size_t n = 0; n < s.n; ++n) {
        const double* gp = g + (n * s.out_c + c) * out_plane;
        for (std::size_t p = 0; p < out_plane; ++p) acc += gp[p];
      }
      gb[c] = acc;
    }
    grads.bias = std::move(gb);
  }
  return grads;
}

Tensor affine_forward(const Tensor& input, const AffineParams& params) {
  params.validate();
  if (input.rank() < 2) throw ShapeError("affine input must have a batch axis");
  const std::size_t n = input.dim(0);
  const std::size_t d = params.in_features();
  const std::size_t k = params.out_features();
  if (input.size() != n * d) {
    throw ShapeError("affine input " + shape_to_string(input.shape()) + " does not flatten to " +
                     std::to_string(d) + " features");
  }
  require_finite(input, "affine input");
  Tensor out({n, k});
  const double* w = params.weight.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    double* y = out.data().data() + r * k;
    if (params.bias) std::copy(params.bias->data().begin(), params.bias->data().end(), y);
    const double* x = input.data().data() + r * d;
    for (std::size_t j = 0; j < d; ++j) {
      const double xv = x[j];
      const double* wr = w + j * k;
      for (std::size_t c = 0; c < k; ++c) y[c] += xv * wr[c];
    }
  }
  return out;
}

ConvGrads affine_backward(const Tensor& grad_out, const Tensor& input, const AffineParams& params) {
  if (input.empty()) throw ValidationError("affine_backward: missing forward cache");
  params.validate();
  const std::size_t n = input.dim(0);
  const std::size_t d = params.in_features();
  const std::size_t k = params.out_features();
  if (grad_out.shape() != Shape{n, k}) {
    throw ShapeError("affine_backward grad shape " + shape_to_string(grad_out.shape()) +
                     " does not match forward output");
  }
  ConvGrads grads{Tensor(input.shape()), Tensor(params.weight.shape()), std::nullopt};
  const double* w = params.weight.data().data();
  const double* x = input.data().data();
  const double* g = grad_out.data().data();
  double* gx = grads.input.data().data();
  double* gw = grads.weight.data().data();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      const double* wr = w + j * k;
      const double* gr = g + r * k;
      double acc = 0.0;
      for (std::size_t c = 0; c < k; ++c) acc += gr[c] * wr[c];
      gx[r * d + j] = acc;
    }
  }
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      const double xv = x[r * d + j];
      double* gwr = gw + j * k;
      const double* gr = g + r * k;
      for (std::size_t c = 0; c < k; ++c) gwr[c] += xv * gr[c];
    }
  }
  if (params.bias) {
    Tensor gb({k});
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < k; ++c) gb[c] += g[r * k + c];
    }
    grads.bias = std::move(gb);
  }
  return grads;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& grad_out, const Tensor& input) {
  if (grad_out.shape() != input.shape()) throw ShapeError("relu_backward shape mismatch");
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? grad_out[i] : 0.0;
  return out;
}

Tensor relu6_forward(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = std::clamp(input[i], 0.0, 6.0);
  return out;
}

Tensor relu6_backward(const Tensor& grad_out, const Tensor& input) {
  if (grad_out.shape() != input.shape()) throw ShapeError("relu6_backward shape mismatch");
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    out[i] = (input[i] > 0.0 && input[i] < 6.0) ? grad_out[i] : 0.0;
  }
  return out;
}

Tensor global_average_pool_forward(const Tensor& input) {
  require_rank(input, 4, "global_average_pool");
  const std::size_t n = input.dim(0), c = input.dim(1), plane = input.dim(2) * input.dim(3);
  Tensor out({n, c});
  for (std::size_t r = 0; r < n * c; ++r) {
    const double* p = input.data().data() + r * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    // A constant plane must average to exactly that constant.
    bool constant = true;
    for (std::size_t i = 1; i < plane && constant; ++i) constant = p[i] == p[0];
    out[r] = constant ? p[0] : acc / static_cast<double>(plane);
  }
  return out;
}

Tensor global_average_pool_backward(const Tensor& grad_out, const Shape& input_shape) {
  if (input_shape.size() != 4 || grad_out.shape() != Shape{input_shape[0], input_shape[1]}) {
    throw ShapeError("global_average_pool_backward shape mismatch");
  }
  const std::size_t plane = input_shape[2] * input_shape[3];
  Tensor out(input_shape);
  const double inv = 1.0 / static_cast<double>(plane);
  for (std::size_t r = 0; r < grad_out.size(); ++r) {
    double* p = out.data().data() + r * plane;
    std::fill(p, p + plane, grad_out[r] * inv);
  }
  return out;
}

Tensor elementwise_add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("elementwise_add shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw ShapeError("label count does not match batch size");
  if (n == 0) throw ShapeError("softmax_cross_entropy on empty batch");
  LossAndGrad r{0.0, Tensor(logits.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ValidationError("label " + std::to_string(label) + " out of range");
    }
    const double* z = logits.data().data() + i * k;
    const double zmax = *std::max_element(z, z + k);
    double denom = 0.0;
    for (std::size_t c = 0; c < k; ++c) denom += std::exp(z[c] - zmax);
    const double log_denom = std::log(denom);
    r.loss += -(z[label] - zmax - log_denom);
    double* gr = r.grad.data().data() + i * k;
    for (std::size_t c = 0; c < k; ++c) {
      gr[c] = std::exp(z[c] - zmax - log_denom) / static_cast<double>(n);
    }
    gr[label] -= 1.0 / static_cast<double>(n);
  }
  r.loss /= static_cast<double>(n);
  return r;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  require_rank(logits, 2, "argmax_rows");
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* z = logits.data().data() + i * k;
    out[i] = static_cast<int>(std::max_element(z, z + k) - z);
  }
  return out;
}

}  // namespace pfq
