#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "pfq/batchnorm.hpp"
#include "pfq/ops.hpp"
#include "pfq/quantizer.hpp"
#include "pfq/tensor.hpp"

namespace pfq {

enum class LayerKind {
  conv,
  depthwise_conv,
  affine,
  bn,
  relu,
  relu6,
  global_avg_pool,
  add_junction,
  quant_point,
};

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

struct ConvLayer {
  ConvParams params;
  ConvGeometry geometry;
  std::optional<QuantPoint> weight_quant;
};

struct DepthwiseConvLayer {
  DepthwiseConvParams params;
  ConvGeometry geometry;
  std::optional<QuantPoint> weight_quant;
};

struct AffineLayer {
  AffineParams params;
  std::optional<QuantPoint> weight_quant;
};

struct BatchNormLayer {
  BNParams params;
};

struct ReluLayer {};
struct Relu6Layer {};
struct GlobalAvgPoolLayer {};

// Sums the outputs of two earlier layers. "input" names the graph input.
struct AddJunctionLayer {
  std::string lhs;
  std::string rhs;
};

// Activation fake-quantization applied to the previous layer's output.
struct ActQuantLayer {
  QuantPoint point;
};

using LayerParams = std::variant<ConvLayer, DepthwiseConvLayer, AffineLayer, BatchNormLayer,
                                 ReluLayer, Relu6Layer, GlobalAvgPoolLayer, AddJunctionLayer,
                                 ActQuantLayer>;

inline constexpr const char* kGraphInputName = "input";

struct LayerSpec {
  std::string name;
  LayerParams params;

  LayerKind kind() const { return static_cast<LayerKind>(params.index()); }

  template <typename T>
  T& as() { return std::get<T>(params); }
  template <typename T>
  const T& as() const { return std::get<T>(params); }
  template <typename T>
  bool is() const { return std::holds_alternative<T>(params); }

  // Weight quant site of a conv/depthwise/affine layer, null otherwise.
  std::optional<QuantPoint>* weight_quant();
  const std::optional<QuantPoint>* weight_quant() const;
  const Tensor* weight() const;
  const std::optional<Tensor>* bias() const;
};

// A topologically ordered layer list. Each layer consumes the previous
// layer's output (the graph input for the first layer) except add
// junctions, which name both producers. `input_shape` is C x H x W; the
// batch extent is supplied at run time.
struct ModelGraph {
  Shape input_shape;
  std::vector<LayerSpec> layers;

  // Index of the layer with `name`, or nullopt. "input" is not a layer.
  std::optional<std::size_t> find(const std::string& name) const;
  // Throws ValidationError when the graph violates its structural invariants.
  void validate() const;
  bool has_batch_norm() const;
};

// Per-layer output shapes for a batch of one (leading extent 1).
std::vector<Shape> infer_shapes(const ModelGraph& graph);
Shape output_shape(const ModelGraph& graph);

// Learnable tensors, in a stable order (layer order, then weight, bias,
// gamma, beta).
enum class ParamRole { weight, bias, gamma, beta };

struct ParamRef {
  std::size_t layer;
  ParamRole role;
  Tensor* tensor;
  // Weight decay applies to conv/depthwise/affine weights only.
  bool decays;
};

std::vector<ParamRef> parameters(ModelGraph& graph);
std::size_t parameter_count(const ModelGraph& graph);

struct LayerMacs {
  std::string layer;
  std::uint64_t macs;
};

// Multiply-accumulates per sample.
std::vector<LayerMacs> count_layer_macs(const ModelGraph& graph);
std::uint64_t count_macs(const ModelGraph& graph);

// Layer-wise structural equality including every tensor bit.
bool operator==(const ModelGraph& a, const ModelGraph& b);

}  // namespace pfq
