#include "pfq/graph.hpp"

#include <array>
#include <set>

#include "pfq/errors.hpp"

namespace pfq {

namespace {

constexpr std::array<const char*, 9> kKindNames = {
    "conv", "depthwise_conv", "affine", "bn", "relu", "relu6", "global_avg_pool",
    "add_junction", "quant_point"};

bool same(const BNParams& a, const BNParams& b) {
  return a.gamma == b.gamma && a.beta == b.beta && a.running_mean == b.running_mean &&
         a.running_var == b.running_var && a.epsilon == b.epsilon && a.rho == b.rho &&
         a.channel_ids == b.channel_ids;
}

bool same_layer(const LayerParams& a, const LayerParams& b) {
  if (a.index() != b.index()) return false;
  return std::visit(
      [&](const auto& la) -> bool {
        using T = std::decay_t<decltype(la)>;
        const T& lb = std::get<T>(b);
        if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer>) {
          return la.params.weight == lb.params.weight && la.params.bias == lb.params.bias &&
                 la.geometry == lb.geometry && la.weight_quant == lb.weight_quant;
        } else if constexpr (std::is_same_v<T, AffineLayer>) {
          return la.params.weight == lb.params.weight && la.params.bias == lb.params.bias &&
                 la.weight_quant == lb.weight_quant;
        } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
          return same(la.params, lb.params);
        } else if constexpr (std::is_same_v<T, AddJunctionLayer>) {
          return la.lhs == lb.lhs && la.rhs == lb.rhs;
        } else if constexpr (std::is_same_v<T, ActQuantLayer>) {
          return la.point == lb.point;
        } else {
          return true;
        }
      },
      a);
}

bool is_weighted(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::depthwise_conv || k == LayerKind::affine;
}

}  // namespace

std::string to_string(LayerKind kind) { return kKindNames[static_cast<std::size_t>(kind)]; }

LayerKind layer_kind_from_string(const std::string& s) {
  for (std::size_t i = 0; i < kKindNames.size(); ++i) {
    if (s == kKindNames[i]) return static_cast<LayerKind>(i);
  }
  throw FormatError("unknown layer kind '" + s + "'");
}

std::optional<QuantPoint>* LayerSpec::weight_quant() {
  if (auto* c = std::get_if<ConvLayer>(&params)) return &c->weight_quant;
  if (auto* d = std::get_if<DepthwiseConvLayer>(&params)) return &d->weight_quant;
  if (auto* a = std::get_if<AffineLayer>(&params)) return &a->weight_quant;
  return nullptr;
}

const std::optional<QuantPoint>* LayerSpec::weight_quant() const {
  return const_cast<LayerSpec*>(this)->weight_quant();
}

const Tensor* LayerSpec::weight() const {
  if (auto* c = std::get_if<ConvLayer>(&params)) return &c->params.weight;
  if (auto* d = std::get_if<DepthwiseConvLayer>(&params)) return &d->params.weight;
  if (auto* a = std::get_if<AffineLayer>(&params)) return &a->params.weight;
  return nullptr;
}

const std::optional<Tensor>* LayerSpec::bias() const {
  if (auto* c = std::get_if<ConvLayer>(&params)) return &c->params.bias;
  if (auto* d = std::get_if<DepthwiseConvLayer>(&params)) return &d->params.bias;
  if (auto* a = std::get_if<AffineLayer>(&params)) return &a->params.bias;
  return nullptr;
}

std::optional<std::size_t> ModelGraph::find(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].name == name) return i;
  }
  return std::nullopt;
}

bool ModelGraph::has_batch_norm() const {
  for (const auto& l : layers) {
    if (l.kind() == LayerKind::bn) return true;
  }
  return false;
}

void ModelGraph::validate() const {
  if (input_shape.size() != 3 || shape_numel(input_shape) == 0) {
    throw ValidationError("graph input shape must be C x H x W with positive extents");
  }
  std::set<std::string> names;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    if (l.name.empty() || l.name == kGraphInputName) {
      throw ValidationError("layer " + std::to_string(i) + " has a reserved or empty name");
    }
    if (!names.insert(l.name).second) throw ValidationError("duplicate layer name '" + l.name + "'");
    if (l.kind() == LayerKind::bn) {
      if (i == 0 || !is_weighted(layers[i - 1].kind())) {
        throw ValidationError("batch norm '" + l.name +
                              "' must directly follow a conv, depthwise conv or affine layer");
      }
      l.as<BatchNormLayer>().params.validate();
    }
    if (const auto* add = std::get_if<AddJunctionLayer>(&l.params)) {
      for (const auto& ref : {add->lhs, add->rhs}) {
        if (ref != kGraphInputName && !names.count(ref)) {
          throw ValidationError("add junction '" + l.name + "' references unknown or later layer '" +
                                ref + "'");
        }
      }
      if (add->lhs == l.name || add->rhs == l.name) {
        throw ValidationError("add junction '" + l.name + "' references itself");
      }
    }
    if (const auto* q = std::get_if<ActQuantLayer>(&l.params)) {
      if (q->point.config.policy != RangePolicy::activation_ema) {
        throw ValidationError("activation quant point '" + l.name + "' must use activation_ema");
      }
    }
    std::visit(
        [](const auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer> ||
                        std::is_same_v<T, AffineLayer>) {
            p.params.validate();
          }
        },
        l.params);
  }
  infer_shapes(*this);
}

std::vector<Shape> infer_shapes(const ModelGraph& graph) {
  Shape in{1};
  in.insert(in.end(), graph.input_shape.begin(), graph.input_shape.end());
  std::vector<Shape> shapes;
  shapes.reserve(graph.layers.size());
  auto lookup = [&](const std::string& name) -> const Shape& {
    if (name == kGraphInputName) return in;
    for (std::size_t i = 0; i < shapes.size(); ++i) {
      if (graph.layers[i].name == name) return shapes[i];
    }
    throw ValidationError("unknown producer '" + name + "'");
  };
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    const Shape& prev = i == 0 ? in : shapes.back();
    auto fail = [&](const std::string& why) {
      throw ShapeError("layer '" + l.name + "' (" + to_string(l.kind()) + "): " + why +
                       ", input " + shape_to_string(prev));
    };
    Shape out;
    switch (l.kind()) {
      case LayerKind::conv: {
        const auto& c = l.as<ConvLayer>();
        if (prev.size() != 4 || prev[1] != c.params.in_channels()) fail("channel mismatch");
        out = {1, c.params.out_channels(),
               conv_output_extent(prev[2], c.params.weight.dim(2), c.geometry.stride_h,
                                  c.geometry.pad_h),
               conv_output_extent(prev[3], c.params.weight.dim(3), c.geometry.stride_w,
                                  c.geometry.pad_w)};
        break;
      }
      case LayerKind::depthwise_conv: {
        const auto& c = l.as<DepthwiseConvLayer>();
        if (prev.size() != 4 || prev[1] != c.params.channels()) fail("channel mismatch");
        out = {1, c.params.channels(),
               conv_output_extent(prev[2], c.params.weight.dim(2), c.geometry.stride_h,
                                  c.geometry.pad_h),
               conv_output_extent(prev[3], c.params.weight.dim(3), c.geometry.stride_w,
                                  c.geometry.pad_w)};
        break;
      }
      case LayerKind::affine: {
        const auto& a = l.as<AffineLayer>();
        if (prev.size() < 2 || shape_numel(prev) != a.params.in_features()) {
          fail("feature count mismatch");
        }
        out = {1, a.params.out_features()};
        break;
      }
      case LayerKind::bn: {
        const auto& b = l.as<BatchNormLayer>();
        if ((prev.size() != 2 && prev.size() != 4) || prev[1] != b.params.channels()) {
          fail("channel mismatch");
        }
        out = prev;
        break;
      }
      case LayerKind::global_avg_pool:
        if (prev.size() != 4) fail("expects N x C x H x W");
        out = {1, prev[1]};
        break;
      case LayerKind::add_junction: {
        const auto& a = l.as<AddJunctionLayer>();
        const Shape& lhs = lookup(a.lhs);
        const Shape& rhs = lookup(a.rhs);
        if (lhs != rhs) {
          throw ShapeError("add junction '" + l.name + "' mixes shapes " + shape_to_string(lhs) +
                           " and " + shape_to_string(rhs));
        }
        out = lhs;
        break;
      }
      case LayerKind::relu:
      case LayerKind::relu6:
      case LayerKind::quant_point:
        out = prev;
        break;
    }
    shapes.push_back(std::move(out));
  }
  return shapes;
}

Shape output_shape(const ModelGraph& graph) {
  if (graph.layers.empty()) {
    Shape in{1};
    in.insert(in.end(), graph.input_shape.begin(), graph.input_shape.end());
    return in;
  }
  return infer_shapes(graph).back();
}

std::vector<ParamRef> parameters(ModelGraph& graph) {
  std::vector<ParamRef> out;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    std::visit(
        [&](auto& p) {
          using T = std::decay_t<decltype(p)>;
          if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer> ||
                        std::is_same_v<T, AffineLayer>) {
            out.push_back({i, ParamRole::weight, &p.params.weight, true});
            if (p.params.bias) out.push_back({i, ParamRole::bias, &*p.params.bias, false});
          } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
            out.push_back({i, ParamRole::gamma, &p.params.gamma, false});
            out.push_back({i, ParamRole::beta, &p.params.beta, false});
          }
        },
        graph.layers[i].params);
  }
  return out;
}

std::size_t parameter_count(const ModelGraph& graph) {
  ModelGraph& g = const_cast<ModelGraph&>(graph);
  std::size_t n = 0;
  for (const auto& p : parameters(g)) n += p.tensor->size();
  return n;
}

std::vector<LayerMacs> count_layer_macs(const ModelGraph& graph) {
  const std::vector<Shape> shapes = infer_shapes(graph);
  std::vector<LayerMacs> out;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    std::uint64_t macs = 0;
    const Shape& s = shapes[i];
    if (const auto* c = std::get_if<ConvLayer>(&l.params)) {
      const Shape& w = c->params.weight.shape();
      macs = std::uint64_t{w[0]} * w[1] * w[2] * w[3] * s[2] * s[3];
    } else if (const auto* d = std::get_if<DepthwiseConvLayer>(&l.params)) {
      const Shape& w = d->params.weight.shape();
      macs = std::uint64_t{w[0]} * w[2] * w[3] * s[2] * s[3];
    } else if (const auto* a = std::get_if<AffineLayer>(&l.params)) {
      macs = std::uint64_t{a->params.in_features()} * a->params.out_features();
    }
    out.push_back({l.name, macs});
  }
  return out;
}

std::uint64_t count_macs(const ModelGraph& graph) {
  std::uint64_t total = 0;
  for (const auto& l : count_layer_macs(graph)) total += l.macs;
  return total;
}

bool operator==(const ModelGraph& a, const ModelGraph& b) {
  if (a.input_shape != b.input_shape || a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].name != b.layers[i].name) return false;
    if (!same_layer(a.layers[i].params, b.layers[i].params)) return false;
  }
  return true;
}

}  // namespace pfq
