#include "commands.hpp"

#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>

#include <CLI11.hpp>

#include "config.hpp"
#include "pfq/errors.hpp"
#include "pfq/parallel.hpp"
#include "pfq/reports.hpp"
#include "pfq/serialize.hpp"

namespace pfq::cli {

namespace {

struct Context {
  RunConfig cfg;
  std::string model_path;
  std::ostream& out;

  ModelGraph model() const {
    if (model_path.empty()) throw ConfigError("this command needs --model");
    return load_model(model_path);
  }

  std::filesystem::path dir() const {
    std::filesystem::create_directories(cfg.out);
    return cfg.out;
  }

  DataBundle data() const { return load_data(cfg.data, cfg.seed); }

  template <typename Fn>
  void write(const std::string& file, Fn&& fn) const {
    const auto path = dir() / file;
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    fn(os);
  }

  void save(const ModelGraph& g) const {
    save_model(g, dir() / "model.json");
    out << "wrote " << (dir() / "model.json").string() << '\n';
  }
};

Shape image_shape(const Dataset& d) {
  const Shape& s = d.images.shape();
  return {s[1], s[2], s[3]};
}

TrainConfig to_train_config(const StageConfig& s, std::uint64_t seed) {
  TrainConfig t;
  t.epochs = s.epochs;
  t.batch_size = s.batch_size;
  t.seed = seed;
  t.schedule = s.schedule;
  t.momentum = s.momentum;
  t.weight_decay = s.weight_decay;
  t.stop = s.stop;
  return t;
}

void print_metrics(std::ostream& out, const std::vector<EpochMetrics>& metrics) {
  write_metrics_csv(out, metrics);
}

void cmd_train(const Context& ctx) {
  const DataBundle data = ctx.data();
  ModelGraph g = ctx.model_path.empty()
                     ? build_model(ctx.cfg, image_shape(data.train), data.train.class_count)
                     : ctx.model();
  TrainConfig t = to_train_config(ctx.cfg.train, ctx.cfg.seed);
  TrainResult r = train_epochs(g, data.train, data.validation, data.test, t);
  ctx.save(r.graph);
  ctx.write("metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, r.metrics); });
  print_metrics(ctx.out, r.metrics);
}

void cmd_pfq(const Context& ctx) {
  const PfqResult r = apply_pfq(ctx.model(), ctx.cfg.pfq);
  ctx.save(r.graph);
  ctx.write("prune_report.csv", [&](std::ostream& os) { r.report.write_csv(os); });
  ctx.out << r.report.summary();
}

void cmd_fold(const Context& ctx) { ctx.save(fold_all_bn(ctx.model())); }

void cmd_annotate(const Context& ctx) {
  const ModelGraph g = insert_quant_points(ctx.model(), ctx.cfg.quant);
  ctx.out << count_act_quant_points(g) << " activation and " << count_weight_quant_points(g)
          << " weight quant points\n";
  ctx.save(g);
}

void cmd_finetune(const Context& ctx) {
  const ModelGraph g = ctx.model();
  check_weight_quant_order(g);
  const DataBundle data = ctx.data();
  TrainConfig t = to_train_config(ctx.cfg.finetune.stage, ctx.cfg.seed);
  t.bn_training = ctx.cfg.finetune.bn_training;
  t.act_range_update_epochs = ctx.cfg.finetune.act_range_update_epochs;
  TrainResult r = train_epochs(g, data.train, data.validation, data.test, t);
  ctx.save(r.graph);
  ctx.write("metrics.csv", [&](std::ostream& os) { write_metrics_csv(os, r.metrics); });
  print_metrics(ctx.out, r.metrics);
}

void report_workflow(const Context& ctx, const WorkflowResult& r) {
  for (const auto& line : r.trace) ctx.out << line << '\n';
  ctx.out << "parameters " << parameter_count(r.graph) << ", MACs " << count_macs(r.graph) << '\n';
  if (!r.weight_metrics.empty() && !std::isnan(r.weight_metrics.back().test_acc)) {
    ctx.out << "test accuracy " << r.weight_metrics.back().test_acc << '\n';
  }
}

void cmd_workflow(const Context& ctx, bool single_stage) {
  const ModelGraph g = ctx.model();
  const DataBundle data = ctx.data();
  WorkflowConfig wc = ctx.cfg.workflow;
  wc.run_dir = ctx.dir();
  const WorkflowResult r = single_stage
                               ? run_single_stage_baseline(g, data.train, data.validation, data.test, wc)
                               : run_workflow(g, data.train, data.validation, data.test, wc);
  report_workflow(ctx, r);
  ctx.save(r.graph);
}

void cmd_eval(const Context& ctx) {
  const ModelGraph g = ctx.model();
  const DataBundle data = ctx.data();
  std::map<std::string, double> acc;
  if (!data.validation.empty()) acc["validation"] = evaluate_accuracy(g, data.validation);
  if (!data.test.empty()) acc["test"] = evaluate_accuracy(g, data.test);
  ctx.write("eval.csv", [&](std::ostream& os) {
    os << "split,accuracy\n";
    for (const auto& [k, v] : acc) os << k << ',' << v << '\n';
  });
  for (const auto& [k, v] : acc) ctx.out << k << " accuracy " << v << '\n';
}

void cmd_range(const Context& ctx) {
  ModelGraph g = ctx.model();
  if (g.has_batch_norm()) g = fold_all_bn(g);
  const auto rows = dynamic_range_report(g);
  ctx.write("ranges.csv", [&](std::ostream& os) { write_range_csv(os, rows); });
  write_range_csv(ctx.out, rows);
}

void cmd_constancy(const Context& ctx) {
  const ModelGraph g = ctx.model();
  const DataBundle data = ctx.data();
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < std::min(ctx.cfg.report_batch, data.train.size()); ++i) idx.push_back(i);
  const auto rows = channel_constancy_report(g, data.train.gather(idx));
  ctx.write("constancy.csv", [&](std::ostream& os) { write_constancy_csv(os, rows); });
  write_constancy_csv(ctx.out, rows);
}

void cmd_macs(const Context& ctx, bool per_layer) {
  const ModelGraph g = ctx.model();
  const auto rows = count_layer_macs(g);
  ctx.write("macs.csv", [&](std::ostream& os) { write_macs_csv(os, rows); });
  if (per_layer) write_macs_csv(ctx.out, rows);
  ctx.out << count_macs(g) << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Pruning-for-quantization toolkit", "pfq"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, model_path, out_dir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  bool per_layer = false;
  app.add_option("--config", config_path, "JSON run config (unknown keys are rejected)");
  app.add_option("--set", overrides, "Override a config key, e.g. --set train.epochs=3")
      ->take_all()
      ->allow_extra_args(false);
  app.add_option("--model", model_path, "Input model manifest (.json)");
  app.add_option("--out", out_dir, "Output directory (config key 'out')");
  app.add_option("--seed", seed, "Random seed (config key 'seed')");
  app.add_option("--threads", threads, "Intra-op worker threads (config key 'threads')");

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "Train a model from scratch (or continue --model) in float"},
      {"pfq", "Remove BN channels with running variance below epsilon, correcting consumers"},
      {"fold-bn", "Fold every BN into its preceding layer"},
      {"quantize-annotate", "Insert activation and weight quant points"},
      {"finetune", "Fine-tune a model with its current quant points"},
      {"workflow", "Run the full prune / fine-tune / prune / fold / fine-tune pipeline"},
      {"baseline-once", "Prune once, fold, then fine-tune everything quantized at once"},
      {"eval", "Report validation and test accuracy"},
      {"report-range", "Per-layer weight dynamic range after folding BN"},
      {"report-constancy", "Per-channel BN running variance and output spread on a batch"},
      {"count-macs", "Multiply-accumulates per sample"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) subs[name] = app.add_subcommand(name, help);
  subs["count-macs"]->add_flag("--per-layer", per_layer, "Also print the per-layer table");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: usage: " << msg << '\n';
    return 2;
  }

  try {
    nlohmann::ordered_json user = nlohmann::ordered_json::object();
    if (!config_path.empty()) user = load_config_file(config_path);
    if (seed) overrides.push_back("seed=" + std::to_string(*seed));
    if (threads) overrides.push_back("threads=" + std::to_string(*threads));
    if (!out_dir.empty()) overrides.push_back("out=" + nlohmann::json(out_dir).dump());
    Context ctx{parse_run_config(resolve_config(user, overrides)), model_path, out};
    set_num_threads(ctx.cfg.threads);

    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "train") cmd_train(ctx);
    else if (name == "pfq") cmd_pfq(ctx);
    else if (name == "fold-bn") cmd_fold(ctx);
    else if (name == "quantize-annotate") cmd_annotate(ctx);
    else if (name == "finetune") cmd_finetune(ctx);
    else if (name == "workflow") cmd_workflow(ctx, false);
    else if (name == "baseline-once") cmd_workflow(ctx, true);
    else if (name == "eval") cmd_eval(ctx);
    else if (name == "report-range") cmd_range(ctx);
    else if (name == "report-constancy") cmd_constancy(ctx);
    else if (name == "count-macs") cmd_macs(ctx, per_layer);
    return 0;
  } catch (const Error& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << e.code() << ": " << msg << '\n';
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: internal: " << msg << '\n';
  }
  return 1;
}

}  // namespace pfq::cli
