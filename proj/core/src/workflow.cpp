#include "pfq/workflow.hpp"

#include <fstream>

#include "pfq/errors.hpp"
#include "pfq/passes.hpp"
#include "pfq/serialize.hpp"

namespace pfq {

namespace {

class RunLog {
 public:
  RunLog(const WorkflowConfig& cfg, std::vector<std::string>& trace) : cfg_(cfg), trace_(trace) {
    if (cfg_.run_dir) {
      std::filesystem::create_directories(*cfg_.run_dir);
      log_.open(*cfg_.run_dir / "workflow.log");
      if (!log_) throw IoError("cannot write " + (*cfg_.run_dir / "workflow.log").string());
    }
  }

  void step(const std::string& line) {
    trace_.push_back(line);
    if (log_) log_ << line << '\n' << std::flush;
  }

  // Directory of stage `i`, created on demand; nullopt without a run dir.
  std::optional<std::filesystem::path> stage_dir(int i) const {
    if (!cfg_.run_dir) return std::nullopt;
    auto dir = *cfg_.run_dir / ("stage" + std::to_string(i));
    std::filesystem::create_directories(dir);
    return dir;
  }

  void save(int stage, const ModelGraph& g, const PruneReport* report,
            const std::vector<EpochMetrics>* metrics, const std::vector<RangeRow>* ranges) const {
    const auto dir = stage_dir(stage);
    if (!dir) return;
    save_model(g, *dir / "model.json");
    if (report) {
      std::ofstream os(*dir / "prune_report.csv");
      report->write_csv(os);
    }
    if (metrics) {
      std::ofstream os(*dir / "metrics.csv");
      write_metrics_csv(os, *metrics);
    }
    if (ranges) {
      std::ofstream os(*dir / "ranges.csv");
      write_range_csv(os, *ranges);
    }
  }

 private:
  const WorkflowConfig& cfg_;
  std::vector<std::string>& trace_;
  std::ofstream log_;
};

PfqOptions pfq_options(const WorkflowConfig& cfg, bool quantize_act_of_beta) {
  PfqOptions o;
  o.epsilon = cfg.epsilon;
  o.quantize_act_of_beta = quantize_act_of_beta;
  o.skip_padded_consumers = cfg.skip_padded_consumers;
  return o;
}

TrainConfig train_config(const StageConfig& s, std::size_t epochs, std::uint64_t seed,
                         double reference) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = s.batch_size;
  t.seed = seed;
  t.schedule = s.schedule;
  t.momentum = s.momentum;
  t.weight_decay = s.weight_decay;
  t.stop = s.stop;
  if (t.stop.mode == StopMode::accuracy_drop) t.stop.reference_accuracy = reference;
  return t;
}

double reference_accuracy(const ModelGraph& g, const Dataset& validation,
                          const WorkflowConfig& cfg) {
  if (cfg.reference_accuracy) return *cfg.reference_accuracy;
  const bool needed = cfg.act_stage.stop.mode == StopMode::accuracy_drop ||
                      cfg.weight_stage.stop.mode == StopMode::accuracy_drop;
  if (!needed) return 0.0;
  if (validation.empty()) throw ValidationError("accuracy_drop early stop needs a validation set");
  return evaluate_accuracy(g, validation);
}

std::string pfq_line(const std::string& tag, const PruneReport& r) {
  return tag + ": removed " + std::to_string(r.channels_removed()) + " channel(s), params " +
         std::to_string(r.params_before) + " -> " + std::to_string(r.params_after);
}

}  // namespace

void WorkflowConfig::validate() const {
  if (act_bits < 1 || weight_bits < 1) throw ConfigError("bit widths must be positive");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
  if (!(ema_momentum > 0.0 && ema_momentum < 1.0)) throw ConfigError("ema_momentum must be in (0, 1)");
  for (const StageConfig* s : {&act_stage, &weight_stage}) {
    if (s->batch_size == 0) throw ConfigError("batch_size must be positive");
    s->schedule.validate();
    s->stop.validate();
  }
}

WorkflowResult run_workflow(const ModelGraph& pretrained, const Dataset& train,
                            const Dataset& validation, const Dataset& test,
                            const WorkflowConfig& cfg) {
  cfg.validate();
  pretrained.validate();
  if (!pretrained.has_batch_norm()) throw ValidationError("workflow needs a graph with BN layers");
  WorkflowResult r;
  RunLog log(cfg, r.trace);
  const double reference = reference_accuracy(pretrained, validation, cfg);

  ModelGraph g = pretrained;
  if (cfg.enable_pfq) {
    PfqResult p = apply_pfq(g, pfq_options(cfg, false));
    g = std::move(p.graph);
    r.first_pfq = std::move(p.report);
    log.step("1 " + pfq_line("pfq", r.first_pfq));
  } else {
    log.step("1 pfq: disabled");
  }
  log.save(0, g, cfg.enable_pfq ? &r.first_pfq : nullptr, nullptr, nullptr);

  QuantInsertOptions q;
  q.act_bits = cfg.act_bits;
  q.weight_bits = cfg.weight_bits;
  q.ema_momentum = cfg.ema_momentum;
  q.ste = cfg.ste;
  q.enable_weights = false;
  g = insert_quant_points(g, q);
  {
    TrainConfig t = train_config(cfg.act_stage, cfg.act_stage.epochs, cfg.seed, reference);
    t.bn_training = true;
    TrainResult tr = train_epochs(g, train, validation, test, t);
    g = std::move(tr.graph);
    r.act_metrics = std::move(tr.metrics);
  }
  log.step("2 finetune activations: " + std::to_string(r.act_metrics.size()) + " epoch(s), " +
           std::to_string(count_act_quant_points(g)) + " activation quant points, BN live");
  log.save(1, g, nullptr, &r.act_metrics, nullptr);

  if (!g.has_batch_norm()) throw ValidationError("second PfQ pass needs BN layers");
  if (cfg.enable_pfq) {
    PfqResult p = apply_pfq(g, pfq_options(cfg, cfg.quantize_act_of_beta));
    g = std::move(p.graph);
    r.second_pfq = std::move(p.report);
    log.step("3 " + pfq_line("pfq (quantized Act(beta))", r.second_pfq));
  } else {
    log.step("3 pfq: disabled");
  }
  log.save(2, g, cfg.enable_pfq ? &r.second_pfq : nullptr, nullptr, nullptr);

  g = fold_all_bn(g);
  r.folded_ranges = dynamic_range_report(g);
  log.step("4 fold bn: " + std::to_string(g.layers.size()) + " layers remain");
  log.save(3, g, nullptr, nullptr, &r.folded_ranges);

  set_weight_quant_enabled(g, true);
  set_act_ranges_frozen(g, false);
  {
    TrainConfig t = train_config(cfg.weight_stage, cfg.weight_stage.epochs, cfg.seed + 1, reference);
    t.act_range_update_epochs = cfg.weight_stage_range_epochs;
    TrainResult tr = train_epochs(g, train, validation, test, t);
    g = std::move(tr.graph);
    r.weight_metrics = std::move(tr.metrics);
  }
  log.step("5 finetune activations+weights: " + std::to_string(r.weight_metrics.size()) +
           " epoch(s), " + std::to_string(count_weight_quant_points(g)) + " weight quant points");
  log.save(4, g, nullptr, &r.weight_metrics, nullptr);
  r.graph = std::move(g);
  return r;
}

WorkflowResult run_single_stage_baseline(const ModelGraph& pretrained, const Dataset& train,
                                         const Dataset& validation, const Dataset& test,
                                         const WorkflowConfig& cfg) {
  cfg.validate();
  pretrained.validate();
  if (!pretrained.has_batch_norm()) throw ValidationError("baseline needs a graph with BN layers");
  WorkflowResult r;
  RunLog log(cfg, r.trace);
  const double reference = reference_accuracy(pretrained, validation, cfg);

  ModelGraph g = pretrained;
  if (cfg.enable_pfq) {
    PfqResult p = apply_pfq(g, pfq_options(cfg, false));
    g = std::move(p.graph);
    r.first_pfq = std::move(p.report);
    log.step("1 " + pfq_line("pfq", r.first_pfq));
  } else {
    log.step("1 pfq: disabled");
  }
  log.save(0, g, cfg.enable_pfq ? &r.first_pfq : nullptr, nullptr, nullptr);

  g = fold_all_bn(g);
  r.folded_ranges = dynamic_range_report(g);
  log.step("2 fold bn: " + std::to_string(g.layers.size()) + " layers remain");
  log.save(1, g, nullptr, nullptr, &r.folded_ranges);

  QuantInsertOptions q;
  q.act_bits = cfg.act_bits;
  q.weight_bits = cfg.weight_bits;
  q.ema_momentum = cfg.ema_momentum;
  q.ste = cfg.ste;
  g = insert_quant_points(g, q);
  {
    TrainConfig t = train_config(cfg.weight_stage, cfg.act_stage.epochs + cfg.weight_stage.epochs,
                                 cfg.seed, reference);
    t.act_range_update_epochs = cfg.weight_stage_range_epochs;
    TrainResult tr = train_epochs(g, train, validation, test, t);
    g = std::move(tr.graph);
    r.weight_metrics = std::move(tr.metrics);
  }
  log.step("3 finetune activations+weights: " + std::to_string(r.weight_metrics.size()) +
           " epoch(s)");
  log.save(2, g, nullptr, &r.weight_metrics, nullptr);
  r.graph = std::move(g);
  return r;
}

}  // namespace pfq
