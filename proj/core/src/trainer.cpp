#include "pfq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>

#include "pfq/errors.hpp"
#include "pfq/ops.hpp"
#include "pfq/passes.hpp"

namespace pfq {

void LRSchedule::validate() const {
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) throw ConfigError("base_lr must be positive");
  if (!(period > 0.0) || !std::isfinite(period)) throw ConfigError("lr period must be positive");
}

double lr_at(const LRSchedule& s, double e) {
  if (e < 0.0) throw ConfigError("epoch must be non-negative");
  const double w = static_cast<double>(s.warmup_epochs);
  if (e < w) return s.base_lr * e / w;
  return s.base_lr * (1.0 + std::cos((e - w) / s.period * std::numbers::pi));
}

void OptimizerState::validate() const {
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
}

void sgd_step(std::span<const ParamRef> params, std::span<const Tensor> grads,
              OptimizerState& state, double lr) {
  if (params.size() != grads.size()) {
    throw ShapeError("sgd_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.velocity.empty()) {
    for (const auto& p : params) state.velocity.emplace_back(p.tensor->shape());
  }
  if (state.velocity.size() != params.size()) throw ShapeError("sgd_step: velocity count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i].tensor;
    const Tensor& g = grads[i];
    Tensor& v = state.velocity[i];
    if (g.shape() != p.shape() || v.shape() != p.shape()) {
      throw ShapeError("sgd_step: shape mismatch at parameter " + std::to_string(i) + ": " +
                       shape_to_string(p.shape()) + " vs " + shape_to_string(g.shape()));
    }
    const double wd = params[i].decays ? state.weight_decay : 0.0;
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = state.momentum * v[k] + g[k] + wd * p[k];
      p[k] -= lr * v[k];
    }
  }
  ++state.iteration;
}

std::string to_string(StopMode m) {
  return m == StopMode::fixed_epochs ? "fixed_epochs" : "accuracy_drop";
}

StopMode stop_mode_from_string(const std::string& s) {
  if (s == "fixed_epochs") return StopMode::fixed_epochs;
  if (s == "accuracy_drop") return StopMode::accuracy_drop;
  throw FormatError("unknown stop mode '" + s + "'");
}

void EarlyStopPolicy::validate() const {
  if (!(drop_threshold >= 0.0)) throw ConfigError("drop_threshold must be non-negative");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  schedule.validate();
  OptimizerState{momentum, weight_decay, {}, 0}.validate();
  stop.validate();
}

double evaluate_accuracy(const ModelGraph& graph, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw ValidationError("cannot evaluate on an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t end = std::min(data.size(), start + batch_size);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const std::vector<int> pred = argmax_rows(predict(graph, data.gather(idx)));
    for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == data.labels[idx[i]];
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(data.size());
}

TrainResult train_epochs(const ModelGraph& graph, const Dataset& train, const Dataset& validation,
                         const Dataset& test, const TrainConfig& config) {
  config.validate();
  graph.validate();
  check_weight_quant_order(graph);
  if (train.empty()) throw ValidationError("training set is empty");
  if (config.stop.mode == StopMode::accuracy_drop && validation.empty()) {
    throw ValidationError("accuracy_drop early stop needs a validation set");
  }

  TrainResult r{graph, {}, {config.momentum, config.weight_decay, {}, 0}, false};
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = lr_at(config.schedule, static_cast<double>(epoch));
    std::shuffle(order.begin(), order.end(), rng);
    ForwardOptions fopt;
    fopt.training = config.bn_training;
    fopt.update_act_ranges = epoch < config.act_range_update_epochs;
    fopt.on_batch_stats = config.on_batch_stats;

    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      // BN batch statistics need two samples.
      if (end - start < 2 && seen > 0) break;
      const std::span<const std::size_t> idx(order.data() + start, end - start);
      const std::vector<int> labels = train.gather_labels(idx);
      const Tape tape = forward(r.graph, train.gather(idx), fopt);
      const LossAndGrad lg = softmax_cross_entropy(tape.outputs.back(), labels);
      if (!std::isfinite(lg.loss)) {
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                           ", iteration " + std::to_string(r.optimizer.iteration));
      }
      const Gradients grads = backward(r.graph, tape, lg.grad);
      const std::vector<ParamRef> params = parameters(r.graph);
      sgd_step(params, grads.params, r.optimizer, lr);
      loss_sum += lg.loss * static_cast<double>(idx.size());
      seen += idx.size();
    }
    if (epoch + 1 == config.act_range_update_epochs) set_act_ranges_frozen(r.graph, true);

    EpochMetrics m{epoch, lr, loss_sum / static_cast<double>(seen)};
    if (!validation.empty()) m.val_acc = evaluate_accuracy(r.graph, validation);
    if (!test.empty()) m.test_acc = evaluate_accuracy(r.graph, test);
    r.metrics.push_back(m);
    if (config.stop.mode == StopMode::accuracy_drop &&
        m.val_acc >= config.stop.reference_accuracy - config.stop.drop_threshold) {
      r.stopped_early = epoch + 1 < config.epochs;
      break;
    }
  }
  return r;
}

void write_metrics_csv(std::ostream& os, std::span<const EpochMetrics> metrics) {
  os << "epoch,lr,train_loss,val_acc,test_acc\n" << std::setprecision(10);
  for (const auto& m : metrics) {
    os << m.epoch << ',' << m.lr << ',' << m.train_loss << ',';
    if (!std::isnan(m.val_acc)) os << m.val_acc;
    os << ',';
    if (!std::isnan(m.test_acc)) os << m.test_acc;
    os << '\n';
  }
}

}  // namespace pfq
