#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "pfq/tensor.hpp"

namespace pfq {

// Dense convolution parameters. weight is (out_ch, in_ch, kh, kw); bias, when
// present, has out_ch entries.
struct ConvParams {
  Tensor weight;
  std::optional<Tensor> bias;

  std::size_t out_channels() const { return weight.dim(0); }
  std::size_t in_channels() const { return weight.dim(1); }
  void validate() const;
};

// Depthwise convolution with channel multiplier 1. weight is (ch, 1, kh, kw).
struct DepthwiseConvParams {
  Tensor weight;
  std::optional<Tensor> bias;

  std::size_t channels() const { return weight.dim(0); }
  void validate() const;
};

// Fully connected layer: y = x W + b with W of shape (D, K).
struct AffineParams {
  Tensor weight;
  std::optional<Tensor> bias;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  void validate() const;
};

// Zero padding only.
struct ConvGeometry {
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;
  std::size_t pad_h = 0;
  std::size_t pad_w = 0;

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

// Output spatial extent; throws ShapeError when the window does not fit.
std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                               std::size_t pad);

struct ConvGrads {
  Tensor input;
  Tensor weight;
  std::optional<Tensor> bias;
};

Tensor conv2d_forward(const Tensor& input, const ConvParams& params, const ConvGeometry& geom);
ConvGrads conv2d_backward(const Tensor& grad_out, const Tensor& input, const ConvParams& params,
                          const ConvGeometry& geom);

Tensor depthwise_conv2d_forward(const Tensor& input, const DepthwiseConvParams& params,
                                const ConvGeometry& geom);
ConvGrads depthwise_conv2d_backward(const Tensor& grad_out, const Tensor& input,
                                    const DepthwiseConvParams& params, const ConvGeometry& geom);

Tensor affine_forward(const Tensor& input, const AffineParams& params);
ConvGrads affine_backward(const Tensor& grad_out, const Tensor& input, const AffineParams& params);

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& grad_out, const Tensor& input);
Tensor relu6_forward(const Tensor& input);
Tensor relu6_backward(const Tensor& grad_out, const Tensor& input);

// N x C x H x W -> N x C
Tensor global_average_pool_forward(const Tensor& input);
Tensor global_average_pool_backward(const Tensor& grad_out, const Shape& input_shape);

Tensor elementwise_add(const Tensor& a, const Tensor& b);

struct LossAndGrad {
  double loss = 0.0;  // mean over the batch
  Tensor grad;        // d loss / d logits
};

LossAndGrad softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// Index of the largest logit per row.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace pfq
