#include "pfq/serialize.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "pfq/errors.hpp"

namespace pfq {

namespace {

using json = nlohmann::ordered_json;

constexpr const char* kFormatName = "pfq-model";
constexpr const char* kDtype = "float64-le";

std::uint32_t crc_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

void append_le(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
}

double read_le(const char* p) {
  std::uint64_t bits = 0;
  for (int b = 0; b < 8; ++b) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[b])) << (8 * b);
  }
  return std::bit_cast<double>(bits);
}

class BlobWriter {
 public:
  std::string add(const std::string& name, const Tensor& t) {
    std::string bytes;
    bytes.reserve(t.size() * 8);
    for (double v : t.data()) append_le(bytes, v);
    table_.push_back({{"name", name},
                      {"shape", t.shape()},
                      {"offset", blob_.size()},
                      {"bytes", bytes.size()},
                      {"crc32", crc_of(bytes)}});
    blob_ += bytes;
    return name;
  }
  const std::string& blob() const { return blob_; }
  const json& table() const { return table_; }

 private:
  std::string blob_;
  json table_ = json::array();
};

class BlobReader {
 public:
  BlobReader(const json& table, std::string blob) : blob_(std::move(blob)) {
    for (const auto& e : table) {
      Entry entry{e.at("shape").get<Shape>(), e.at("offset").get<std::size_t>(),
                  e.at("bytes").get<std::size_t>(), e.at("crc32").get<std::uint32_t>()};
      entries_[e.at("name").get<std::string>()] = std::move(entry);
    }
  }

  Tensor get(const std::string& name) const {
    const auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("manifest references missing tensor '" + name + "'");
    const Entry& e = it->second;
    if (e.bytes != shape_numel(e.shape) * 8) {
      throw FormatError("tensor '" + name + "' byte length does not match its shape");
    }
    if (e.offset + e.bytes > blob_.size()) {
      throw FormatError("checksum failure: tensor '" + name + "' extends past end of blob");
    }
    const std::string bytes = blob_.substr(e.offset, e.bytes);
    if (crc_of(bytes) != e.crc) throw FormatError("checksum failure for tensor '" + name + "'");
    std::vector<double> data(e.bytes / 8);
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = read_le(bytes.data() + 8 * i);
    return Tensor(e.shape, std::move(data));
  }

 private:
  struct Entry {
    Shape shape;
    std::size_t offset = 0;
    std::size_t bytes = 0;
    std::uint32_t crc = 0;
  };
  std::string blob_;
  std::map<std::string, Entry> entries_;
};

json quant_to_json(const QuantPoint& p) {
  return {{"bits", p.config.bits},
          {"lower", p.config.lower},
          {"upper", p.config.upper},
          {"policy", to_string(p.config.policy)},
          {"ema_momentum", p.config.ema_momentum},
          {"ste", to_string(p.config.ste)},
          {"enabled", p.enabled},
          {"initialized", p.initialized},
          {"frozen", p.frozen}};
}

QuantPoint quant_from_json(const json& j) {
  QuantPoint p;
  p.config.bits = j.at("bits").get<int>();
  p.config.lower = j.at("lower").get<double>();
  p.config.upper = j.at("upper").get<double>();
  p.config.policy = range_policy_from_string(j.at("policy").get<std::string>());
  p.config.ema_momentum = j.at("ema_momentum").get<double>();
  p.config.ste = ste_mode_from_string(j.at("ste").get<std::string>());
  p.enabled = j.at("enabled").get<bool>();
  p.initialized = j.at("initialized").get<bool>();
  p.frozen = j.at("frozen").get<bool>();
  return p;
}

json optional_quant(const std::optional<QuantPoint>& q) {
  return q ? quant_to_json(*q) : json(nullptr);
}

std::optional<QuantPoint> optional_quant(const json& j) {
  if (j.is_null()) return std::nullopt;
  return quant_from_json(j);
}

json geometry_to_json(const ConvGeometry& g) {
  return {{"stride", {g.stride_h, g.stride_w}}, {"pad", {g.pad_h, g.pad_w}}};
}

ConvGeometry geometry_from_json(const json& j) {
  const auto stride = j.at("stride").get<std::vector<std::size_t>>();
  const auto pad = j.at("pad").get<std::vector<std::size_t>>();
  if (stride.size() != 2 || pad.size() != 2) throw FormatError("stride/pad must have 2 entries");
  return {stride[0], stride[1], pad[0], pad[1]};
}

template <typename P>
void weights_to_json(json& j, const std::string& name, const P& params, BlobWriter& blob) {
  j["weight"] = blob.add(name + "/weight", params.weight);
  j["bias"] = params.bias ? json(blob.add(name + "/bias", *params.bias)) : json(nullptr);
}

template <typename P>
P weights_from_json(const json& j, const BlobReader& blob) {
  P p;
  p.weight = blob.get(j.at("weight").get<std::string>());
  if (!j.at("bias").is_null()) p.bias = blob.get(j.at("bias").get<std::string>());
  return p;
}

json layer_to_json(const LayerSpec& l, BlobWriter& blob) {
  json j = {{"name", l.name}, {"kind", to_string(l.kind())}};
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer>) {
          weights_to_json(j, l.name, p.params, blob);
          j["geometry"] = geometry_to_json(p.geometry);
          j["weight_quant"] = optional_quant(p.weight_quant);
        } else if constexpr (std::is_same_v<T, AffineLayer>) {
          weights_to_json(j, l.name, p.params, blob);
          j["weight_quant"] = optional_quant(p.weight_quant);
        } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
          const BNParams& b = p.params;
          j["gamma"] = blob.add(l.name + "/gamma", b.gamma);
          j["beta"] = blob.add(l.name + "/beta", b.beta);
          j["running_mean"] = blob.add(l.name + "/running_mean", b.running_mean);
          j["running_var"] = blob.add(l.name + "/running_var", b.running_var);
          j["epsilon"] = b.epsilon;
          j["rho"] = b.rho;
          j["channel_ids"] = b.channel_ids;
        } else if constexpr (std::is_same_v<T, AddJunctionLayer>) {
          j["lhs"] = p.lhs;
          j["rhs"] = p.rhs;
        } else if constexpr (std::is_same_v<T, ActQuantLayer>) {
          j["quant"] = quant_to_json(p.point);
        }
      },
      l.params);
  return j;
}

LayerSpec layer_from_json(const json& j, const BlobReader& blob) {
  LayerSpec l;
  l.name = j.at("name").get<std::string>();
  switch (layer_kind_from_string(j.at("kind").get<std::string>())) {
    case LayerKind::conv:
      l.params = ConvLayer{weights_from_json<ConvParams>(j, blob),
                           geometry_from_json(j.at("geometry")),
                           optional_quant(j.at("weight_quant"))};
      break;
    case LayerKind::depthwise_conv:
      l.params = DepthwiseConvLayer{weights_from_json<DepthwiseConvParams>(j, blob),
                                    geometry_from_json(j.at("geometry")),
                                    optional_quant(j.at("weight_quant"))};
      break;
    case LayerKind::affine:
      l.params = AffineLayer{weights_from_json<AffineParams>(j, blob),
                             optional_quant(j.at("weight_quant"))};
      break;
    case LayerKind::bn: {
      BNParams b;
      b.gamma = blob.get(j.at("gamma").get<std::string>());
      b.beta = blob.get(j.at("beta").get<std::string>());
      b.running_mean = blob.get(j.at("running_mean").get<std::string>());
      b.running_var = blob.get(j.at("running_var").get<std::string>());
      b.epsilon = j.at("epsilon").get<double>();
      b.rho = j.at("rho").get<double>();
      b.channel_ids = j.at("channel_ids").get<std::vector<std::int64_t>>();
      l.params = BatchNormLayer{std::move(b)};
      break;
    }
    case LayerKind::relu:
      l.params = ReluLayer{};
      break;
    case LayerKind::relu6:
      l.params = Relu6Layer{};
      break;
    case LayerKind::global_avg_pool:
      l.params = GlobalAvgPoolLayer{};
      break;
    case LayerKind::add_junction:
      l.params = AddJunctionLayer{j.at("lhs").get<std::string>(), j.at("rhs").get<std::string>()};
      break;
    case LayerKind::quant_point:
      l.params = ActQuantLayer{quant_from_json(j.at("quant"))};
      break;
  }
  return l;
}

std::filesystem::path blob_path_for(const std::filesystem::path& manifest_path) {
  if (manifest_path.extension() != ".json") {
    throw IoError("model manifest path must end in .json: " + manifest_path.string());
  }
  std::filesystem::path p = manifest_path;
  p.replace_extension(".bin");
  return p;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

void save_model(const ModelGraph& graph, const std::filesystem::path& manifest_path) {
  graph.validate();
  const std::filesystem::path blob_path = blob_path_for(manifest_path);
  BlobWriter blob;
  json layers = json::array();
  for (const auto& l : graph.layers) layers.push_back(layer_to_json(l, blob));
  json manifest = {{"format", kFormatName},
                   {"version", kModelFormatVersion},
                   {"dtype", kDtype},
                   {"blob", blob_path.filename().string()},
                   {"blob_bytes", blob.blob().size()},
                   {"blob_crc32", crc_of(blob.blob())},
                   {"input_shape", graph.input_shape},
                   {"layers", std::move(layers)},
                   {"tensors", blob.table()}};

  if (manifest_path.has_parent_path()) std::filesystem::create_directories(manifest_path.parent_path());
  std::ofstream bin(blob_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + blob_path.string());
  bin.write(blob.blob().data(), static_cast<std::streamsize>(blob.blob().size()));
  std::ofstream man(manifest_path, std::ios::trunc);
  if (!man) throw IoError("cannot write " + manifest_path.string());
  man << manifest.dump(2) << '\n';
  if (!bin || !man) throw IoError("write failed for model " + manifest_path.string());
}

ModelGraph load_model(const std::filesystem::path& manifest_path) {
  const std::string text = read_file(manifest_path);
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format").get<std::string>() != kFormatName) {
      throw FormatError("not a pfq model manifest: " + manifest_path.string());
    }
    const int version = manifest.at("version").get<int>();
    if (version != kModelFormatVersion) {
      throw FormatError("model format version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kModelFormatVersion) + ")");
    }
    if (manifest.at("dtype").get<std::string>() != kDtype) {
      throw FormatError("unsupported tensor dtype " + manifest.at("dtype").get<std::string>());
    }
    const std::filesystem::path blob_path =
        manifest_path.parent_path() / manifest.at("blob").get<std::string>();
    std::string blob = read_file(blob_path);
    if (blob.size() != manifest.at("blob_bytes").get<std::size_t>() ||
        crc_of(blob) != manifest.at("blob_crc32").get<std::uint32_t>()) {
      throw FormatError("checksum failure: blob " + blob_path.string() +
                        " is truncated or corrupted");
    }
    const BlobReader reader(manifest.at("tensors"), std::move(blob));
    ModelGraph g;
    g.input_shape = manifest.at("input_shape").get<Shape>();
    for (const auto& lj : manifest.at("layers")) g.layers.push_back(layer_from_json(lj, reader));
    g.validate();
    return g;
  } catch (const json::exception& e) {
    throw FormatError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
}

}  // namespace pfq
