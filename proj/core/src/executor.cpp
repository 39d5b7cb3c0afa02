#include "pfq/executor.hpp"

#include <cmath>

#include "pfq/errors.hpp"
#include "pfq/ops.hpp"
#include "pfq/quantizer.hpp"

namespace pfq {

namespace {

const Tensor& producer_output(const ModelGraph& graph, const Tape& tape, const std::string& name) {
  if (name == kGraphInputName) return tape.input;
  const auto idx = graph.find(name);
  if (!idx) throw ValidationError("unknown producer '" + name + "'");
  return tape.outputs[*idx];
}

// Weight tensor to run with: quantized per-tensor min/max when the site is on.
template <typename P>
P effective_params(const P& params, const std::optional<QuantPoint>& wq, bool clamp_only,
                   std::optional<Tensor>& effective, std::optional<QuantConfig>& used) {
  if (!wq || !wq->enabled) return params;
  QuantConfig cfg;
  if (!weight_range(params.weight, wq->config, cfg)) return params;
  P out = params;
  out.weight = clamp_only ? clamp_to_range(params.weight, cfg) : quantize(params.weight, cfg);
  effective = out.weight;
  used = cfg;
  return out;
}

template <typename P>
P with_weight(const P& params, const std::optional<Tensor>& effective) {
  if (!effective) return params;
  P out = params;
  out.weight = *effective;
  return out;
}

void accumulate(Tensor& into, const Tensor& g) {
  if (into.empty()) {
    into = g;
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) into[i] += g[i];
}

}  // namespace

Tape forward(ModelGraph& graph, const Tensor& input, const ForwardOptions& options) {
  Shape expected{input.rank() > 0 ? input.dim(0) : 0};
  expected.insert(expected.end(), graph.input_shape.begin(), graph.input_shape.end());
  if (input.shape() != expected) {
    throw ShapeError("graph input " + shape_to_string(input.shape()) + " does not match " +
                     shape_to_string(graph.input_shape));
  }
  require_finite(input, "graph input");
  const std::size_t n = graph.layers.size();
  Tape tape;
  tape.input = input;
  tape.training = options.training;
  tape.outputs.resize(n);
  tape.bn_caches.resize(n);
  tape.effective_weights.resize(n);
  tape.quant_used.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    LayerSpec& layer = graph.layers[i];
    const Tensor& x = i == 0 ? tape.input : tape.outputs[i - 1];
    Tensor y;
    switch (layer.kind()) {
      case LayerKind::conv: {
        auto& l = layer.as<ConvLayer>();
        const ConvParams p = effective_params(l.params, l.weight_quant,
                                              options.clamp_instead_of_quantize,
                                              tape.effective_weights[i], tape.quant_used[i]);
        y = conv2d_forward(x, p, l.geometry);
        break;
      }
      case LayerKind::depthwise_conv: {
        auto& l = layer.as<DepthwiseConvLayer>();
        const DepthwiseConvParams p = effective_params(l.params, l.weight_quant,
                                                       options.clamp_instead_of_quantize,
                                                       tape.effective_weights[i],
                                                       tape.quant_used[i]);
        y = depthwise_conv2d_forward(x, p, l.geometry);
        break;
      }
      case LayerKind::affine: {
        auto& l = layer.as<AffineLayer>();
        const AffineParams p = effective_params(l.params, l.weight_quant,
                                                options.clamp_instead_of_quantize,
                                                tape.effective_weights[i], tape.quant_used[i]);
        y = affine_forward(x, p);
        break;
      }
      case LayerKind::bn: {
        auto& l = layer.as<BatchNormLayer>();
        if (options.training) {
          BnTrainResult r = bn_forward_train(x, l.params);
          if (options.on_batch_stats) options.on_batch_stats(i, r.stats);
          l.params = std::move(r.updated);
          tape.bn_caches[i] = std::move(r.cache);
          y = std::move(r.output);
        } else {
          y = bn_forward_infer(x, l.params);
        }
        break;
      }
      case LayerKind::relu:
        y = relu_forward(x);
        break;
      case LayerKind::relu6:
        y = relu6_forward(x);
        break;
      case LayerKind::global_avg_pool:
        y = global_average_pool_forward(x);
        break;
      case LayerKind::add_junction: {
        const auto& l = layer.as<AddJunctionLayer>();
        y = elementwise_add(producer_output(graph, tape, l.lhs),
                            producer_output(graph, tape, l.rhs));
        break;
      }
      case LayerKind::quant_point: {
        auto& point = layer.as<ActQuantLayer>().point;
        if (point.enabled && options.update_act_ranges && !point.frozen) {
          point = update_activation_range(x, point);
        }
        if (point.enabled && point.initialized && point.config.upper > point.config.lower) {
          y = options.clamp_instead_of_quantize ? clamp_to_range(x, point.config)
                                                : quantize(x, point.config);
          tape.quant_used[i] = point.config;
        } else {
          y = x;
        }
        break;
      }
    }
    tape.outputs[i] = std::move(y);
  }
  return tape;
}

Tensor predict(const ModelGraph& graph, const Tensor& input) {
  ModelGraph copy = graph;
  Tape tape = forward(copy, input, ForwardOptions{});
  if (tape.outputs.empty()) return input;
  return std::move(tape.outputs.back());
}

Gradients backward(const ModelGraph& graph, const Tape& tape, const Tensor& grad_output) {
  const std::size_t n = graph.layers.size();
  if (tape.outputs.size() != n) throw ValidationError("backward: tape does not match graph");
  Gradients grads;
  // Parameter slots per layer, matching parameters() order.
  std::vector<std::size_t> first_slot(n, 0);
  std::size_t slots = 0;
  for (std::size_t i = 0; i < n; ++i) {
    first_slot[i] = slots;
    const LayerSpec& l = graph.layers[i];
    if (l.weight() != nullptr) {
      ++slots;
      if (l.bias()->has_value()) ++slots;
    } else if (l.kind() == LayerKind::bn) {
      slots += 2;
    }
  }
  grads.params.resize(slots);

  if (n == 0) {
    grads.input = grad_output;
    return grads;
  }
  if (grad_output.shape() != tape.outputs.back().shape()) {
    throw ShapeError("backward: output gradient shape mismatch");
  }
  std::vector<Tensor> grad_out(n);
  grad_out[n - 1] = grad_output;
  Tensor grad_input;

  auto send = [&](std::size_t i, const std::string* name, Tensor g) {
    // Route the gradient to layer i's input (name == nullptr) or to a named producer.
    if (name == nullptr) {
      if (i == 0) {
        accumulate(grad_input, g);
      } else {
        accumulate(grad_out[i - 1], g);
      }
      return;
    }
    if (*name == kGraphInputName) {
      accumulate(grad_input, g);
      return;
    }
    accumulate(grad_out[*graph.find(*name)], g);
  };

  for (std::size_t idx = n; idx-- > 0;) {
    const Tensor& g = grad_out[idx];
    if (g.empty()) continue;
    const LayerSpec& layer = graph.layers[idx];
    const Tensor& x = idx == 0 ? tape.input : tape.outputs[idx - 1];
    const std::size_t slot = first_slot[idx];
    switch (layer.kind()) {
      case LayerKind::conv:
      case LayerKind::depthwise_conv:
      case LayerKind::affine: {
        ConvGrads cg;
        const std::optional<QuantPoint>* wq = layer.weight_quant();
        if (const auto* l = std::get_if<ConvLayer>(&layer.params)) {
          cg = conv2d_backward(g, x, with_weight(l->params, tape.effective_weights[idx]),
                               l->geometry);
        } else if (const auto* d = std::get_if<DepthwiseConvLayer>(&layer.params)) {
          cg = depthwise_conv2d_backward(g, x, with_weight(d->params, tape.effective_weights[idx]),
                                         d->geometry);
        } else {
          const auto& a = layer.as<AffineLayer>();
          cg = affine_backward(g, x, with_weight(a.params, tape.effective_weights[idx]));
        }
        if (tape.quant_used[idx] && wq && wq->has_value()) {
          cg.weight = quantize_backward(cg.weight, *layer.weight(), *tape.quant_used[idx]);
        }
        grads.params[slot] = std::move(cg.weight);
        if (cg.bias) grads.params[slot + 1] = std::move(*cg.bias);
        send(idx, nullptr, std::move(cg.input));
        break;
      }
      case LayerKind::bn: {
        const auto& p = layer.as<BatchNormLayer>().params;
        if (tape.training) {
          if (!tape.bn_caches[idx]) throw ValidationError("backward: missing BN cache");
          BnGrads bg = bn_backward(g, *tape.bn_caches[idx], p);
          grads.params[slot] = std::move(bg.gamma);
          grads.params[slot + 1] = std::move(bg.beta);
          send(idx, nullptr, std::move(bg.input));
        } else {
          const std::size_t c = p.channels();
          const std::size_t plane = x.size() / (x.dim(0) * c);
          Tensor gx(x.shape()), gg({c}), gb({c});
          for (std::size_t b = 0; b < x.dim(0); ++b) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double inv = 1.0 / std::sqrt(p.running_var[ch] + p.epsilon);
              for (std::size_t q = 0; q < plane; ++q) {
                const std::size_t e = (b * c + ch) * plane + q;
                gx[e] = g[e] * inv * p.gamma[ch];
                gg[ch] += g[e] * (x[e] - p.running_mean[ch]) * inv;
                gb[ch] += g[e];
              }
            }
          }
          grads.params[slot] = std::move(gg);
          grads.params[slot + 1] = std::move(gb);
          send(idx, nullptr, std::move(gx));
        }
        break;
      }
      case LayerKind::relu:
        send(idx, nullptr, relu_backward(g, x));
        break;
      case LayerKind::relu6:
        send(idx, nullptr, relu6_backward(g, x));
        break;
      case LayerKind::global_avg_pool:
        send(idx, nullptr, global_average_pool_backward(g, x.shape()));
        break;
      case LayerKind::add_junction: {
        const auto& a = layer.as<AddJunctionLayer>();
        send(idx, &a.lhs, g);
        send(idx, &a.rhs, g);
        break;
      }
      case LayerKind::quant_point:
        if (tape.quant_used[idx]) {
          send(idx, nullptr, quantize_backward(g, x, *tape.quant_used[idx]));
        } else {
          send(idx, nullptr, g);
        }
        break;
    }
  }
  // Parameters whose layer received no gradient get zeros.
  ModelGraph& mutable_graph = const_cast<ModelGraph&>(graph);
  const auto refs = parameters(mutable_graph);
  for (std::size_t s = 0; s < refs.size(); ++s) {
    if (grads.params[s].empty()) grads.params[s] = Tensor(refs[s].tensor->shape());
  }
  grads.input = grad_input.empty() ? Tensor(tape.input.shape()) : std::move(grad_input);
  return grads;
}

}  // namespace pfq
