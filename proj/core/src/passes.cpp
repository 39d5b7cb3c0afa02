#include "pfq/passes.hpp"

#include <map>

#include "pfq/errors.hpp"

namespace pfq {

namespace {

bool is_weighted(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::depthwise_conv || k == LayerKind::affine;
}

}  // namespace

ModelGraph fold_all_bn(const ModelGraph& graph) {
  graph.validate();
  ModelGraph out;
  out.input_shape = graph.input_shape;
  std::map<std::string, std::string> renamed;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    const bool followed_by_bn =
        i + 1 < graph.layers.size() && graph.layers[i + 1].kind() == LayerKind::bn;
    if (is_weighted(l.kind()) && followed_by_bn) {
      const BNParams& bn = graph.layers[i + 1].as<BatchNormLayer>().params;
      LayerSpec folded = l;
      std::visit(
          [&](auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer> ||
                          std::is_same_v<T, AffineLayer>) {
              p.params = fold_bn(p.params, bn);
            }
          },
          folded.params);
      renamed[graph.layers[i + 1].name] = l.name;
      out.layers.push_back(std::move(folded));
      ++i;
      continue;
    }
    LayerSpec copy = l;
    if (auto* add = std::get_if<AddJunctionLayer>(&copy.params)) {
      if (auto it = renamed.find(add->lhs); it != renamed.end()) add->lhs = it->second;
      if (auto it = renamed.find(add->rhs); it != renamed.end()) add->rhs = it->second;
    }
    out.layers.push_back(std::move(copy));
  }
  return out;
}

ModelGraph insert_quant_points(const ModelGraph& graph, const QuantInsertOptions& options) {
  graph.validate();
  QuantConfig act_cfg;
  act_cfg.bits = options.act_bits;
  act_cfg.policy = RangePolicy::activation_ema;
  act_cfg.ema_momentum = options.ema_momentum;
  act_cfg.ste = options.ste;
  QuantConfig weight_cfg = act_cfg;
  weight_cfg.bits = options.weight_bits;
  weight_cfg.policy = RangePolicy::weight_minmax_per_tensor;
  if (options.act_bits < 1 || options.weight_bits < 1) {
    throw ValidationError("quantization bit widths must be positive");
  }

  ModelGraph out;
  out.input_shape = graph.input_shape;
  const std::size_t n = graph.layers.size();
  for (std::size_t i = 0; i < n; ++i) {
    LayerSpec l = graph.layers[i];
    if (auto* wq = l.weight_quant(); wq && !wq->has_value()) {
      QuantPoint p;
      p.config = weight_cfg;
      weight_range(*l.weight(), weight_cfg, p.config);
      p.enabled = options.enable_weights;
      p.initialized = true;
      *wq = p;
    }
    const LayerKind k = l.kind();
    out.layers.push_back(std::move(l));
    const bool activation_like =
        k == LayerKind::relu || k == LayerKind::relu6 || k == LayerKind::global_avg_pool;
    const bool last = i + 1 == n;
    const bool already = !last && graph.layers[i + 1].kind() == LayerKind::quant_point;
    if (activation_like && !last && !already) {
      LayerSpec q;
      q.name = graph.layers[i].name + ".aq";
      QuantPoint p;
      p.config = act_cfg;
      p.enabled = options.enable_activations;
      q.params = ActQuantLayer{p};
      out.layers.push_back(std::move(q));
    }
  }
  out.validate();
  return out;
}

void set_weight_quant_enabled(ModelGraph& graph, bool enabled) {
  for (auto& l : graph.layers) {
    if (auto* wq = l.weight_quant(); wq && wq->has_value()) (*wq)->enabled = enabled;
  }
}

void set_act_quant_enabled(ModelGraph& graph, bool enabled) {
  for (auto& l : graph.layers) {
    if (auto* q = std::get_if<ActQuantLayer>(&l.params)) q->point.enabled = enabled;
  }
}

void set_act_ranges_frozen(ModelGraph& graph, bool frozen) {
  for (auto& l : graph.layers) {
    if (auto* q = std::get_if<ActQuantLayer>(&l.params)) q->point.frozen = frozen;
  }
}

std::size_t count_act_quant_points(const ModelGraph& graph) {
  std::size_t n = 0;
  for (const auto& l : graph.layers) n += l.kind() == LayerKind::quant_point;
  return n;
}

std::size_t count_weight_quant_points(const ModelGraph& graph) {
  std::size_t n = 0;
  for (const auto& l : graph.layers) {
    if (const auto* wq = l.weight_quant(); wq && wq->has_value()) ++n;
  }
  return n;
}

void check_weight_quant_order(const ModelGraph& graph) {
  for (std::size_t i = 0; i + 1 < graph.layers.size(); ++i) {
    const auto* wq = graph.layers[i].weight_quant();
    if (wq && wq->has_value() && (*wq)->enabled &&
        graph.layers[i + 1].kind() == LayerKind::bn) {
      throw StageOrderError("layer '" + graph.layers[i].name +
                            "' has weight quantization enabled but is not folded with '" +
                            graph.layers[i + 1].name + "'; fold BN first");
    }
  }
}

}  // namespace pfq
