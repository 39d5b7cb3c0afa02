#include "config.hpp"

#include <fstream>
#include <numeric>

#include "pfq/errors.hpp"

namespace pfq::cli {

using json = nlohmann::ordered_json;

namespace {

json stage_json(std::size_t epochs, double lr, double period, double weight_decay) {
  return {{"epochs", epochs},
          {"batch_size", 32},
          {"lr", lr},
          {"warmup_epochs", 0},
          {"lr_period", period},
          {"momentum", 0.9},
          {"weight_decay", weight_decay},
          {"stop", "fixed_epochs"},
          {"drop_threshold", 0.5}};
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) {
    // An integer default rejects fractional values.
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

void check_against(const json& schema, const json& value, const std::string& path) {
  if (!same_kind(schema, value)) {
    throw ConfigError("key '" + path + "' expects " + std::string(schema.type_name()) + ", got " +
                      value.type_name());
  }
  if (!schema.is_object()) return;
  for (const auto& [k, v] : value.items()) {
    const std::string sub = path.empty() ? k : path + "." + k;
    if (!schema.contains(k)) throw ConfigError("unknown key '" + sub + "'");
    // Null defaults accept anything of the right shape later on.
    if (!schema[k].is_null()) check_against(schema[k], v, sub);
  }
}

void merge(json& base, const json& over) {
  for (const auto& [k, v] : over.items()) {
    if (v.is_object() && base[k].is_object()) {
      merge(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

template <typename T>
T get(const json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("key '" + path + "." + key + "': " + e.what());
  }
}

std::size_t get_count(const json& j, const char* key, const std::string& path) {
  const auto v = get<std::int64_t>(j, key, path);
  if (v < 0) throw ConfigError("key '" + path + "." + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

StageConfig parse_stage(const json& j, const std::string& path) {
  StageConfig s;
  s.epochs = get_count(j, "epochs", path);
  s.batch_size = get_count(j, "batch_size", path);
  s.schedule.base_lr = get<double>(j, "lr", path);
  s.schedule.warmup_epochs = get_count(j, "warmup_epochs", path);
  s.schedule.period = get<double>(j, "lr_period", path);
  s.momentum = get<double>(j, "momentum", path);
  s.weight_decay = get<double>(j, "weight_decay", path);
  s.stop.mode = stop_mode_from_string(get<std::string>(j, "stop", path));
  s.stop.drop_threshold = get<double>(j, "drop_threshold", path);
  if (s.batch_size == 0) throw ConfigError("key '" + path + ".batch_size' must be positive");
  s.schedule.validate();
  s.stop.validate();
  return s;
}

}  // namespace

json default_config() {
  json blocks = json::array();
  for (const auto& b : DwSepNetSpec{}.blocks) blocks.push_back({b.out_channels, b.stride});
  return {
      {"seed", 0},
      {"threads", 1},
      {"out", "run"},
      {"data",
       {{"kind", "synthetic"},
        {"classes", 4},
        {"per_class", 250},
        {"test_per_class", 50},
        {"channels", 3},
        {"height", 16},
        {"width", 16},
        {"signal", 0.25},
        {"noise", 0.2},
        {"train_path", ""},
        {"test_path", ""},
        {"variant", 10},
        {"limit", 0},
        {"validation_per_class", 50}}},
      {"model",
       {{"arch", "dwsep"},
        {"stem_channels", 16},
        {"blocks", blocks},
        {"dead_channels_per_block", 0},
        {"use_relu6", false},
        {"tiny_channels", 8},
        {"bn_epsilon", 1e-5},
        {"bn_rho", 0.9}}},
      {"train", stage_json(6, 0.05, 6, 1e-4)},
      {"pfq",
       {{"epsilon", 1e-5},
        {"quantize_act_of_beta", true},
        {"correct", true},
        {"skip_padded_consumers", false}}},
      {"quant",
       {{"act_bits", 4},
        {"weight_bits", 4},
        {"ema_momentum", kDefaultEmaMomentum},
        {"ste", "clipped"},
        {"activations", true},
        {"weights", true}}},
      {"finetune",
       {{"stage", stage_json(4, 0.005, 4, 1e-4)},
        {"bn_training", true},
        {"act_range_update_epochs", 1}}},
      {"workflow",
       {{"act_bits", 4},
        {"weight_bits", 4},
        {"epsilon", 1e-5},
        {"enable_pfq", true},
        {"quantize_act_of_beta", true},
        {"skip_padded_consumers", false},
        {"ema_momentum", kDefaultEmaMomentum},
        {"ste", "clipped"},
        {"act_stage", stage_json(3, 0.005, 3, 1e-4)},
        {"weight_stage", stage_json(4, 0.005, 4, 1e-4)},
        {"weight_stage_range_epochs", 1},
        {"reference_accuracy", nullptr}}},
      {"report", {{"batch", 64}}},
  };
}

json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json resolve_config(const json& user, const std::vector<std::string>& overrides) {
  const json schema = default_config();
  if (!user.is_object()) throw ConfigError("config must be a JSON object");
  check_against(schema, user, "");
  json cfg = schema;
  merge(cfg, user);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + o + "' is not key=value");
    }
    const std::string key = o.substr(0, eq), raw = o.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    // Wrap the value into a nested object so it goes through the same checks.
    json patch = value;
    std::string rest = key;
    std::vector<std::string> parts;
    for (std::size_t dot; (dot = rest.find('.')) != std::string::npos; rest = rest.substr(dot + 1)) {
      parts.push_back(rest.substr(0, dot));
    }
    parts.push_back(rest);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
    check_against(schema, patch, "");
    merge(cfg, patch);
  }
  return cfg;
}

RunConfig parse_run_config(const json& c) {
  RunConfig r;
  r.seed = get<std::uint64_t>(c, "seed", "");
  const auto threads = get<std::int64_t>(c, "threads", "");
  if (threads < 1) throw ConfigError("key 'threads' must be at least 1");
  r.threads = static_cast<unsigned>(threads);
  r.out = get<std::string>(c, "out", "");

  const json& d = c.at("data");
  r.data.kind = get<std::string>(d, "kind", "data");
  if (r.data.kind != "synthetic" && r.data.kind != "cifar") {
    throw ConfigError("key 'data.kind' must be synthetic or cifar");
  }
  r.data.synthetic.class_count = get_count(d, "classes", "data");
  r.data.synthetic.per_class = get_count(d, "per_class", "data");
  r.data.synthetic.channels = get_count(d, "channels", "data");
  r.data.synthetic.height = get_count(d, "height", "data");
  r.data.synthetic.width = get_count(d, "width", "data");
  r.data.synthetic.signal = get<double>(d, "signal", "data");
  r.data.synthetic.noise = get<double>(d, "noise", "data");
  r.data.synthetic.seed = r.seed;
  r.data.test_per_class = get_count(d, "test_per_class", "data");
  r.data.train_path = get<std::string>(d, "train_path", "data");
  r.data.test_path = get<std::string>(d, "test_path", "data");
  r.data.variant = get<int>(d, "variant", "data");
  r.data.limit = get_count(d, "limit", "data");
  r.data.split.per_class_validation_count = get_count(d, "validation_per_class", "data");
  r.data.split.seed = r.seed;

  const json& m = c.at("model");
  r.arch = get<std::string>(m, "arch", "model");
  if (r.arch != "dwsep" && r.arch != "tiny") throw ConfigError("key 'model.arch' must be dwsep or tiny");
  r.dwsep.stem_channels = get_count(m, "stem_channels", "model");
  r.dwsep.blocks.clear();
  for (const auto& b : m.at("blocks")) {
    if (!b.is_array() || b.size() != 2 || !b[0].is_number_unsigned() || !b[1].is_number_unsigned()) {
      throw ConfigError("key 'model.blocks' entries must be [channels, stride]");
    }
    r.dwsep.blocks.push_back({b[0].get<std::size_t>(), b[1].get<std::size_t>()});
  }
  r.dwsep.dead_channels_per_block = get_count(m, "dead_channels_per_block", "model");
  r.dwsep.use_relu6 = get<bool>(m, "use_relu6", "model");
  r.dwsep.bn_epsilon = get<double>(m, "bn_epsilon", "model");
  r.dwsep.bn_rho = get<double>(m, "bn_rho", "model");
  r.tiny_channels = get_count(m, "tiny_channels", "model");

  r.train = parse_stage(c.at("train"), "train");

  const json& p = c.at("pfq");
  r.pfq.epsilon = get<double>(p, "epsilon", "pfq");
  r.pfq.quantize_act_of_beta = get<bool>(p, "quantize_act_of_beta", "pfq");
  r.pfq.correct = get<bool>(p, "correct", "pfq");
  r.pfq.skip_padded_consumers = get<bool>(p, "skip_padded_consumers", "pfq");
  if (!(r.pfq.epsilon > 0.0)) throw ConfigError("key 'pfq.epsilon' must be positive");

  const json& q = c.at("quant");
  r.quant.act_bits = get<int>(q, "act_bits", "quant");
  r.quant.weight_bits = get<int>(q, "weight_bits", "quant");
  r.quant.ema_momentum = get<double>(q, "ema_momentum", "quant");
  r.quant.ste = ste_mode_from_string(get<std::string>(q, "ste", "quant"));
  r.quant.enable_activations = get<bool>(q, "activations", "quant");
  r.quant.enable_weights = get<bool>(q, "weights", "quant");

  const json& f = c.at("finetune");
  r.finetune.stage = parse_stage(f.at("stage"), "finetune.stage");
  r.finetune.bn_training = get<bool>(f, "bn_training", "finetune");
  r.finetune.act_range_update_epochs = get_count(f, "act_range_update_epochs", "finetune");

  const json& w = c.at("workflow");
  WorkflowConfig& wc = r.workflow;
  wc.act_bits = get<int>(w, "act_bits", "workflow");
  wc.weight_bits = get<int>(w, "weight_bits", "workflow");
  wc.epsilon = get<double>(w, "epsilon", "workflow");
  wc.enable_pfq = get<bool>(w, "enable_pfq", "workflow");
  wc.quantize_act_of_beta = get<bool>(w, "quantize_act_of_beta", "workflow");
  wc.skip_padded_consumers = get<bool>(w, "skip_padded_consumers", "workflow");
  wc.ema_momentum = get<double>(w, "ema_momentum", "workflow");
  wc.ste = ste_mode_from_string(get<std::string>(w, "ste", "workflow"));
  wc.act_stage = parse_stage(w.at("act_stage"), "workflow.act_stage");
  wc.weight_stage = parse_stage(w.at("weight_stage"), "workflow.weight_stage");
  wc.weight_stage_range_epochs = get_count(w, "weight_stage_range_epochs", "workflow");
  if (!w.at("reference_accuracy").is_null()) {
    wc.reference_accuracy = get<double>(w, "reference_accuracy", "workflow");
  }
  wc.seed = r.seed;
  wc.validate();

  r.report_batch = get_count(c.at("report"), "batch", "report");
  if (r.report_batch < 2) throw ConfigError("key 'report.batch' must be at least 2");
  return r;
}

DataBundle load_data(const DataSettings& s, std::uint64_t seed) {
  Dataset train, test;
  if (s.kind == "synthetic") {
    SyntheticSpec spec = s.synthetic;
    spec.per_class = s.synthetic.per_class + s.test_per_class;
    spec.seed = seed;
    const Dataset all = make_synthetic(spec);
    // Samples are interleaved by class, so a prefix is class balanced.
    std::vector<std::size_t> head(s.synthetic.per_class * spec.class_count);
    std::vector<std::size_t> tail(all.size() - head.size());
    std::iota(head.begin(), head.end(), std::size_t{0});
    std::iota(tail.begin(), tail.end(), head.size());
    train = all.subset(head);
    test = all.subset(tail);
  } else {
    if (s.train_path.empty()) throw ConfigError("key 'data.train_path' is required for cifar");
    train = load_cifar_binary(s.train_path, s.variant);
    if (!s.test_path.empty()) test = load_cifar_binary(s.test_path, s.variant);
    auto trim = [&](Dataset& d) {
      if (s.limit == 0 || d.size() <= s.limit) return;
      std::vector<std::size_t> idx(s.limit);
      std::iota(idx.begin(), idx.end(), std::size_t{0});
      d = d.subset(idx);
    };
    trim(train);
    trim(test);
  }
  Split split = split_validation(train, s.split);
  return {std::move(split.train), std::move(split.validation), std::move(test)};
}

ModelGraph build_model(const RunConfig& cfg, const Shape& input_shape, std::size_t classes) {
  if (input_shape.size() != 3) throw ConfigError("dataset images must be C x H x W");
  if (cfg.arch == "tiny") {
    return make_tiny_cnn(input_shape[0], input_shape[1], input_shape[2], cfg.tiny_channels, classes,
                         cfg.seed);
  }
  DwSepNetSpec spec = cfg.dwsep;
  spec.in_channels = input_shape[0];
  spec.height = input_shape[1];
  spec.width = input_shape[2];
  spec.classes = classes;
  return make_dwsep_net(spec, cfg.seed);
}

}  // namespace pfq::cli
