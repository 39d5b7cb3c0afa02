#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pfq/data.hpp"
#include "pfq/pfq.hpp"
#include "pfq/passes.hpp"
#include "pfq/trainer.hpp"
#include "pfq/workflow.hpp"
#include "pfq/zoo.hpp"

namespace pfq::cli {

// The full configuration with every key at its default. A user config may
// only contain keys that appear here, with matching JSON types.
nlohmann::ordered_json default_config();

// Merges `user` over the defaults, then applies "a.b.c=value" overrides.
// Values parse as JSON when possible and as strings otherwise.
nlohmann::ordered_json resolve_config(const nlohmann::ordered_json& user,
                                      const std::vector<std::string>& overrides);
nlohmann::ordered_json load_config_file(const std::filesystem::path& path);

struct FinetuneSettings {
  StageConfig stage;
  bool bn_training = true;
  std::size_t act_range_update_epochs = 1;
};

struct DataSettings {
  std::string kind;  // synthetic | cifar
  SyntheticSpec synthetic;
  std::size_t test_per_class = 50;
  std::filesystem::path train_path;
  std::filesystem::path test_path;
  int variant = 10;
  std::size_t limit = 0;  // 0 keeps every record
  SplitSpec split;
};

struct DataBundle {
  Dataset train;
  Dataset validation;
  Dataset test;
};

struct RunConfig {
  std::uint64_t seed = 0;
  unsigned threads = 1;
  std::filesystem::path out;
  DataSettings data;
  std::string arch;
  DwSepNetSpec dwsep;
  std::size_t tiny_channels = 8;
  StageConfig train;
  PfqOptions pfq;
  QuantInsertOptions quant;
  FinetuneSettings finetune;
  WorkflowConfig workflow;
  std::size_t report_batch = 64;
};

// Throws ConfigError with the offending key.
RunConfig parse_run_config(const nlohmann::ordered_json& resolved);

DataBundle load_data(const DataSettings& settings, std::uint64_t seed);
ModelGraph build_model(const RunConfig& cfg, const Shape& input_shape, std::size_t classes);

}  // namespace pfq::cli
