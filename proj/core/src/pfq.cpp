#include "pfq/pfq.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <variant>

#include "pfq/errors.hpp"
#include "pfq/executor.hpp"

namespace pfq {

namespace {

bool is_weighted(LayerKind k) {
  return k == LayerKind::conv || k == LayerKind::depthwise_conv || k == LayerKind::affine;
}

bool is_chain(LayerKind k) {
  return k == LayerKind::relu || k == LayerKind::relu6 || k == LayerKind::quant_point ||
         k == LayerKind::global_avg_pool;
}

// Channels flowing from a weighted producer, through an optional BN and a
// chain of channel-wise layers, into a weighted consumer.
struct Segment {
  std::size_t producer = 0;
  std::optional<std::size_t> bn;
  std::vector<std::size_t> chain;
  std::size_t consumer = 0;
};

using SegmentOrReason = std::variant<Segment, std::string>;

bool referenced_by_junction(const ModelGraph& g, const std::string& name) {
  for (const auto& l : g.layers) {
    if (const auto* add = std::get_if<AddJunctionLayer>(&l.params)) {
      if (add->lhs == name || add->rhs == name) return true;
    }
  }
  return false;
}

SegmentOrReason segment_after(const ModelGraph& g, std::size_t producer) {
  Segment s;
  s.producer = producer;
  std::size_t j = producer + 1;
  const std::size_t n = g.layers.size();
  if (j < n && g.layers[j].kind() == LayerKind::bn) s.bn = j++;
  while (j < n && is_chain(g.layers[j].kind())) s.chain.push_back(j++);
  std::vector<std::size_t> members{producer};
  if (s.bn) members.push_back(*s.bn);
  members.insert(members.end(), s.chain.begin(), s.chain.end());
  for (std::size_t m : members) {
    if (referenced_by_junction(g, g.layers[m].name)) return std::string("residual");
  }
  if (j == n) return std::string("no-consumer");
  if (g.layers[j].kind() == LayerKind::add_junction) return std::string("residual");
  if (!is_weighted(g.layers[j].kind())) return std::string("no-consumer");
  s.consumer = j;
  return s;
}

// Segment whose consumer is layer `consumer`.
SegmentOrReason segment_before(const ModelGraph& g, std::size_t consumer) {
  std::size_t j = consumer;
  while (j > 0) {
    const LayerKind k = g.layers[j - 1].kind();
    if (k == LayerKind::add_junction) return std::string("residual");
    if (is_weighted(k)) {
      SegmentOrReason s = segment_after(g, j - 1);
      if (auto* seg = std::get_if<Segment>(&s); seg && seg->consumer != consumer) {
        return std::string("residual");
      }
      return s;
    }
    if (k != LayerKind::bn && !is_chain(k)) return std::string("graph-input");
    --j;
  }
  return std::string("graph-input");
}

double run_chain(const ModelGraph& g, const std::vector<std::size_t>& chain, double v,
                 bool quantize_act) {
  for (std::size_t idx : chain) {
    const LayerSpec& l = g.layers[idx];
    switch (l.kind()) {
      case LayerKind::relu:
        v = std::max(v, 0.0);
        break;
      case LayerKind::relu6:
        v = std::clamp(v, 0.0, 6.0);
        break;
      case LayerKind::quant_point: {
        const QuantPoint& p = l.as<ActQuantLayer>().point;
        if (quantize_act && p.enabled && p.initialized && p.config.upper > p.config.lower) {
          v = quantize_value(v, p.config);
        }
        break;
      }
      default:
        break;  // global average pool of a constant is that constant
    }
  }
  return v;
}

double bn_infer_scalar(const BNParams& p, std::size_t c, double v) {
  return (v - p.running_mean[c]) / std::sqrt(p.running_var[c] + p.epsilon) * p.gamma[c] +
         p.beta[c];
}

std::vector<bool> mask_of(std::size_t size, const std::vector<std::size_t>& drop) {
  std::vector<bool> m(size, false);
  for (std::size_t c : drop) m[c] = true;
  return m;
}

// Removes the entries of `axis` flagged in `drop`.
Tensor erase_axis(const Tensor& t, std::size_t axis, const std::vector<bool>& drop) {
  const Shape& s = t.shape();
  if (drop.size() != s[axis]) throw ShapeError("erase_axis mask size mismatch");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t kept = static_cast<std::size_t>(std::count(drop.begin(), drop.end(), false));
  Shape ns = s;
  ns[axis] = kept;
  std::vector<double> data;
  data.reserve(outer * kept * inner);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t a = 0; a < s[axis]; ++a) {
      if (drop[a]) continue;
      const double* src = t.data().data() + (o * s[axis] + a) * inner;
      data.insert(data.end(), src, src + inner);
    }
  }
  return Tensor(std::move(ns), std::move(data));
}

void erase_output_channels(LayerSpec& l, const std::vector<bool>& drop) {
  std::visit(
      [&](auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer>) {
          p.params.weight = erase_axis(p.params.weight, 0, drop);
          if (p.params.bias) p.params.bias = erase_axis(*p.params.bias, 0, drop);
        } else if constexpr (std::is_same_v<T, AffineLayer>) {
          p.params.weight = erase_axis(p.params.weight, 1, drop);
          if (p.params.bias) p.params.bias = erase_axis(*p.params.bias, 0, drop);
        } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
          BNParams& b = p.params;
          b.gamma = erase_axis(b.gamma, 0, drop);
          b.beta = erase_axis(b.beta, 0, drop);
          b.running_mean = erase_axis(b.running_mean, 0, drop);
          b.running_var = erase_axis(b.running_var, 0, drop);
          std::vector<std::int64_t> ids;
          for (std::size_t c = 0; c < drop.size(); ++c) {
            if (!drop[c]) ids.push_back(b.channel_ids[c]);
          }
          b.channel_ids = std::move(ids);
        } else {
          throw ValidationError("cannot remove output channels of a parameterless layer");
        }
      },
      l.params);
}

std::size_t output_channels(const LayerSpec& l) {
  if (const auto* c = std::get_if<ConvLayer>(&l.params)) return c->params.out_channels();
  if (const auto* d = std::get_if<DepthwiseConvLayer>(&l.params)) return d->params.channels();
  if (const auto* a = std::get_if<AffineLayer>(&l.params)) return a->params.out_features();
  throw ValidationError("layer '" + l.name + "' has no output channels");
}

// Columns of the consumer's input that belong to each channel: one for conv,
// D / C for an affine that reads a flattened C x H x W map.
std::size_t features_per_channel(const LayerSpec& consumer, std::size_t channels) {
  if (const auto* a = std::get_if<AffineLayer>(&consumer.params)) {
    return a->params.in_features() / channels;
  }
  return 1;
}

bool is_padded(const LayerSpec& l) {
  if (const auto* c = std::get_if<ConvLayer>(&l.params)) {
    return c->geometry.pad_h > 0 || c->geometry.pad_w > 0;
  }
  if (const auto* d = std::get_if<DepthwiseConvLayer>(&l.params)) {
    return d->geometry.pad_h > 0 || d->geometry.pad_w > 0;
  }
  return false;
}

double kernel_sum(const Tensor& dw_weight, std::size_t c) {
  const std::size_t k = dw_weight.dim(2) * dw_weight.dim(3);
  double s = 0.0;
  for (std::size_t i = 0; i < k; ++i) s += dw_weight[c * k + i];
  return s;
}

// U for one channel of an arbitrary consumer.
std::vector<double> correction_for(const LayerSpec& consumer, std::size_t channel,
                                   std::size_t per_channel, double a) {
  if (const auto* c = std::get_if<ConvLayer>(&consumer.params)) {
    return compute_bias_correction(c->params.weight, channel, a);
  }
  const auto& w = consumer.as<AffineLayer>().params.weight;
  const std::size_t k = w.dim(1);
  std::vector<double> u(k, 0.0);
  if (a == 0.0) return u;
  for (std::size_t f = channel * per_channel; f < (channel + 1) * per_channel; ++f) {
    for (std::size_t o = 0; o < k; ++o) u[o] += w[f * k + o] * a;
  }
  return u;
}

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

class Pruner {
 public:
  Pruner(ModelGraph& g, const PfqOptions& opt, PruneReport& report)
      : g_(g), opt_(opt), report_(report) {}

  void process_bn(std::size_t bn_idx) {
    const BNParams& bn = g_.layers[bn_idx].as<BatchNormLayer>().params;
    std::vector<std::size_t> cand;
    for (std::size_t c = 0; c < bn.channels(); ++c) {
      if (bn.running_var[c] < opt_.epsilon) cand.push_back(c);
    }
    if (cand.empty()) return;

    SegmentOrReason sr = segment_after(g_, bn_idx - 1);
    std::string reason;
    if (auto* r = std::get_if<std::string>(&sr)) reason = *r;
    if (reason.empty() && cand.size() == bn.channels()) reason = "would-empty";
    if (reason.empty()) reason = check_upstream(std::get<Segment>(sr).producer);
    if (!reason.empty()) {
      for (std::size_t c : cand) skip(bn_idx, c, reason);
      return;
    }
    const Segment seg = std::get<Segment>(sr);

    // Per-channel constant and a dry run of the downstream cascade.
    std::vector<std::size_t> keep_going;
    std::vector<double> constants;
    for (std::size_t c : cand) {
      const double a = run_chain(g_, seg.chain, bn.beta[c], opt_.quantize_act_of_beta);
      const std::string why = check_downstream(seg, c, a);
      if (!why.empty()) {
        skip(bn_idx, c, why);
        continue;
      }
      keep_going.push_back(c);
      constants.push_back(a);
    }
    if (keep_going.empty()) return;

    const std::size_t before = parameter_count(g_);
    std::vector<PruneEntry> rows;
    for (std::size_t i = 0; i < keep_going.size(); ++i) {
      const std::size_t c = keep_going[i];
      rows.push_back({g_.layers[bn_idx].name, bn.channel_ids[c], "", bn.running_var[c], bn.beta[c],
                      0.0, true});
    }
    const std::vector<bool> drop = mask_of(bn.channels(), keep_going);
    LayerPruneSummary summary{g_.layers[bn_idx].name, {}, 0};
    for (const auto& r : rows) summary.removed.push_back(r.channel);

    FinalCorrection fc = apply_downstream(seg, keep_going, constants, drop);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      rows[i].kind = fc.kinds[i];
      rows[i].u_norm = fc.u_norms[i];
    }
    erase_upstream(seg.producer, drop);
    erase_output_channels(g_.layers[bn_idx], drop);

    report_.entries.insert(report_.entries.end(), rows.begin(), rows.end());
    report_.entries.insert(report_.entries.end(), fc.cascaded.begin(), fc.cascaded.end());
    const std::size_t after = parameter_count(g_);
    summary.weights_removed = before >= after ? before - after : 0;
    report_.layers.push_back(std::move(summary));
  }

 private:
  struct FinalCorrection {
    std::vector<std::string> kinds;
    std::vector<double> u_norms;
    std::vector<PruneEntry> cascaded;
  };

  void skip(std::size_t bn_idx, std::size_t c, const std::string& reason) {
    const BNParams& bn = g_.layers[bn_idx].as<BatchNormLayer>().params;
    report_.entries.push_back({g_.layers[bn_idx].name, bn.channel_ids[c], reason,
                               bn.running_var[c], bn.beta[c], 0.0, false});
  }

  // Depthwise producers take their input channel with them; walk up until a
  // layer whose output channels can be dropped freely.
  std::string check_upstream(std::size_t producer) const {
    while (g_.layers[producer].kind() == LayerKind::depthwise_conv) {
      SegmentOrReason up = segment_before(g_, producer);
      if (auto* r = std::get_if<std::string>(&up)) return *r;
      producer = std::get<Segment>(up).producer;
    }
    return {};
  }

  std::string check_downstream(const Segment& seg, std::size_t c, double a) const {
    Segment s = seg;
    for (;;) {
      const LayerSpec& consumer = g_.layers[s.consumer];
      if (opt_.skip_padded_consumers && a != 0.0 && is_padded(consumer)) return "padded";
      if (consumer.kind() != LayerKind::depthwise_conv) return {};
      const auto& dw = consumer.as<DepthwiseConvLayer>().params;
      SegmentOrReason next = segment_after(g_, s.consumer);
      if (auto* r = std::get_if<std::string>(&next)) return *r;
      s = std::get<Segment>(next);
      double k = a * kernel_sum(dw.weight, c) + (dw.bias ? (*dw.bias)[c] : 0.0);
      if (s.bn) k = bn_infer_scalar(g_.layers[*s.bn].as<BatchNormLayer>().params, c, k);
      a = run_chain(g_, s.chain, k, opt_.quantize_act_of_beta);
    }
  }

  void erase_upstream(std::size_t producer, const std::vector<bool>& drop) {
    for (;;) {
      const bool depthwise = g_.layers[producer].kind() == LayerKind::depthwise_conv;
      std::optional<Segment> up;
      if (depthwise) up = std::get<Segment>(segment_before(g_, producer));
      erase_output_channels(g_.layers[producer], drop);
      if (!depthwise) return;
      if (up->bn) erase_output_channels(g_.layers[*up->bn], drop);
      producer = up->producer;
    }
  }

  FinalCorrection apply_downstream(const Segment& seg, const std::vector<std::size_t>& channels,
                                   std::vector<double> constants, const std::vector<bool>& drop) {
    FinalCorrection fc;
    Segment s = seg;
    bool cascaded = false;
    while (g_.layers[s.consumer].kind() == LayerKind::depthwise_conv) {
      cascaded = true;
      const std::size_t dw_idx = s.consumer;
      const Segment next = std::get<Segment>(segment_after(g_, dw_idx));
      const auto& dw = g_.layers[dw_idx].as<DepthwiseConvLayer>().params;
      for (std::size_t i = 0; i < channels.size(); ++i) {
        const std::size_t c = channels[i];
        double k = constants[i] * kernel_sum(dw.weight, c) + (dw.bias ? (*dw.bias)[c] : 0.0);
        if (next.bn) {
          const BNParams& nb = g_.layers[*next.bn].as<BatchNormLayer>().params;
          fc.cascaded.push_back({g_.layers[*next.bn].name, nb.channel_ids[c], "cascade",
                                 nb.running_var[c], nb.beta[c], 0.0, true});
          k = bn_infer_scalar(nb, c, k);
        }
        constants[i] = run_chain(g_, next.chain, k, opt_.quantize_act_of_beta);
      }
      erase_output_channels(g_.layers[dw_idx], drop);
      if (next.bn) erase_output_channels(g_.layers[*next.bn], drop);
      s = next;
    }

    LayerSpec& consumer = g_.layers[s.consumer];
    const std::size_t channels_in = drop.size();
    const std::size_t per_channel = features_per_channel(consumer, channels_in);
    const std::size_t outs = output_channels(consumer);
    std::vector<double> total(outs, 0.0);
    for (std::size_t i = 0; i < channels.size(); ++i) {
      const std::vector<double> u = correction_for(consumer, channels[i], per_channel, constants[i]);
      for (std::size_t o = 0; o < outs; ++o) total[o] += u[o];
      fc.u_norms.push_back(l2(u));
    }

    std::string kind;
    const bool next_is_bn =
        s.consumer + 1 < g_.layers.size() && g_.layers[s.consumer + 1].kind() == LayerKind::bn;
    auto& bias = const_cast<std::optional<Tensor>&>(*consumer.bias());
    if (!opt_.correct) {
      kind = "uncorrected";
    } else if (bias.has_value()) {
      for (std::size_t o = 0; o < outs; ++o) (*bias)[o] += total[o];
      kind = "bias";
    } else if (next_is_bn) {
      BNParams& nb = g_.layers[s.consumer + 1].as<BatchNormLayer>().params;
      const std::vector<double> scale = bn_scale(nb);
      for (std::size_t o = 0; o < outs; ++o) nb.beta[o] += scale[o] * total[o];
      kind = "beta";
    } else {
      Tensor b({outs});
      for (std::size_t o = 0; o < outs; ++o) b[o] = total[o];
      bias = std::move(b);
      kind = "bias";
    }

    std::vector<bool> feature_drop(drop.size() * per_channel, false);
    for (std::size_t c = 0; c < drop.size(); ++c) {
      for (std::size_t f = 0; f < per_channel; ++f) feature_drop[c * per_channel + f] = drop[c];
    }
    if (auto* cv = std::get_if<ConvLayer>(&consumer.params)) {
      cv->params.weight = erase_axis(cv->params.weight, 1, feature_drop);
    } else {
      auto& af = consumer.as<AffineLayer>();
      af.params.weight = erase_axis(af.params.weight, 0, feature_drop);
    }

    for (std::size_t i = 0; i < channels.size(); ++i) {
      if (cascaded) {
        fc.kinds.push_back("cascade");
      } else if (opt_.correct && constants[i] == 0.0) {
        fc.kinds.push_back("none-ReLU-zero");
      } else {
        fc.kinds.push_back(kind);
      }
    }
    if (cascaded) {
      for (std::size_t i = 0; i < fc.cascaded.size(); ++i) {
        const std::size_t ch = i % channels.size();
        fc.cascaded[i].u_norm = fc.u_norms[ch];
        if (i + channels.size() >= fc.cascaded.size()) {
          fc.cascaded[i].kind = opt_.correct && constants[ch] == 0.0 ? "none-ReLU-zero" : kind;
        }
      }
    }
    return fc;
  }

  ModelGraph& g_;
  const PfqOptions& opt_;
  PruneReport& report_;
};

}  // namespace

std::vector<PruneCandidate> scan_candidates(const ModelGraph& graph, double epsilon,
                                            bool quantize_act_of_beta) {
  std::vector<PruneCandidate> out;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    if (l.kind() != LayerKind::bn) continue;
    const BNParams& bn = l.as<BatchNormLayer>().params;
    std::vector<std::size_t> chain;
    for (std::size_t j = i + 1; j < graph.layers.size() && is_chain(graph.layers[j].kind()); ++j) {
      chain.push_back(j);
    }
    for (std::size_t c = 0; c < bn.channels(); ++c) {
      if (!(bn.running_var[c] < epsilon)) continue;
      out.push_back({l.name, i, c, bn.channel_ids[c], bn.running_var[c], bn.beta[c],
                     run_chain(graph, chain, bn.beta[c], quantize_act_of_beta)});
    }
  }
  return out;
}

std::vector<double> compute_bias_correction(const Tensor& consumer_weight, std::size_t channel,
                                            double act_of_beta) {
  if (consumer_weight.rank() == 4) {
    const std::size_t outs = consumer_weight.dim(0), ins = consumer_weight.dim(1);
    const std::size_t k = consumer_weight.dim(2) * consumer_weight.dim(3);
    if (channel >= ins) throw ShapeError("correction channel out of range");
    std::vector<double> u(outs, 0.0);
    for (std::size_t o = 0; o < outs; ++o) {
      const double* w = consumer_weight.data().data() + (o * ins + channel) * k;
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += w[i];
      u[o] = s * act_of_beta;
    }
    return u;
  }
  if (consumer_weight.rank() == 2) {
    const std::size_t d = consumer_weight.dim(0), outs = consumer_weight.dim(1);
    if (channel >= d) throw ShapeError("correction channel out of range");
    std::vector<double> u(outs);
    for (std::size_t o = 0; o < outs; ++o) u[o] = consumer_weight[channel * outs + o] * act_of_beta;
    return u;
  }
  throw ShapeError("bias correction expects a conv or affine weight, got " +
                   shape_to_string(consumer_weight.shape()));
}

double PruneReport::percent_removed() const {
  if (params_before == 0) return 0.0;
  return 100.0 * static_cast<double>(weights_removed()) / static_cast<double>(params_before);
}

std::size_t PruneReport::channels_removed() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.removed.size();
  return n;
}

void PruneReport::write_csv(std::ostream& os) const {
  os << "layer,channel,kind,Vt,beta,U_norm\n";
  os << std::setprecision(17);
  for (const auto& e : entries) {
    os << e.layer << ',' << e.channel << ',' << e.kind << ',' << e.running_var << ',' << e.beta
       << ',' << e.u_norm << '\n';
  }
}

std::string PruneReport::summary() const {
  std::ostringstream os;
  std::size_t skipped = 0;
  for (const auto& e : entries) skipped += !e.removed;
  os << "pruned channels: " << channels_removed() << " in " << layers.size() << " BN layers\n";
  os << "skipped candidates: " << skipped << '\n';
  os << "parameters: " << params_before << " -> " << params_after << " (" << std::fixed
     << std::setprecision(2) << percent_removed() << "% removed)\n";
  os << "MACs: " << macs_before << " -> " << macs_after << '\n';
  for (const auto& l : layers) {
    os << "  " << l.layer << ": removed " << l.removed.size() << " channel(s), "
       << l.weights_removed << " weights\n";
  }
  return os.str();
}

PfqResult apply_pfq(const ModelGraph& graph, const PfqOptions& options) {
  graph.validate();
  if (!(options.epsilon > 0.0)) throw ValidationError("PfQ epsilon must be positive");
  PfqResult r{graph, {}};
  r.report.params_before = parameter_count(graph);
  r.report.macs_before = count_macs(graph);
  Pruner pruner(r.graph, options, r.report);
  for (std::size_t i = 0; i < r.graph.layers.size(); ++i) {
    if (r.graph.layers[i].kind() == LayerKind::bn) pruner.process_bn(i);
  }
  r.graph.validate();
  r.report.params_after = parameter_count(r.graph);
  r.report.macs_after = count_macs(r.graph);
  return r;
}

std::vector<ConstancyRow> channel_constancy_report(const ModelGraph& graph, const Tensor& batch) {
  ModelGraph copy = graph;
  const Tape tape = forward(copy, batch, ForwardOptions{});
  std::vector<ConstancyRow> rows;
  for (std::size_t i = 0; i < graph.layers.size(); ++i) {
    const LayerSpec& l = graph.layers[i];
    if (l.kind() != LayerKind::bn) continue;
    const BNParams& bn = l.as<BatchNormLayer>().params;
    const Tensor& y = tape.outputs[i];
    const std::size_t n = y.dim(0), c = y.dim(1), plane = y.size() / (n * c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double lo = y[ch * plane], hi = lo;
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t p = 0; p < plane; ++p) {
          const double v = y[(b * c + ch) * plane + p];
          lo = std::min(lo, v);
          hi = std::max(hi, v);
        }
      }
      rows.push_back({l.name, bn.channel_ids[ch], bn.running_var[ch], hi - lo});
    }
  }
  return rows;
}

void write_constancy_csv(std::ostream& os, const std::vector<ConstancyRow>& rows) {
  os << "layer,channel,Vt,spread\n" << std::setprecision(17);
  for (const auto& r : rows) {
    os << r.layer << ',' << r.channel << ',' << r.running_var << ',' << r.spread << '\n';
  }
}

}  // namespace pfq
