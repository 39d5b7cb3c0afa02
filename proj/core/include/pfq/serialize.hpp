#pragma once

#include <filesystem>

#include "pfq/graph.hpp"

namespace pfq {

inline constexpr int kModelFormatVersion = 1;

// Writes `<stem>.json` (manifest: layers, shapes, scalars, tensor table with
// byte offsets and CRC-32 checksums) and `<stem>.bin` (little-endian float64
// tensor data in manifest order). `manifest_path` must end in ".json".
void save_model(const ModelGraph& graph, const std::filesystem::path& manifest_path);

// Throws FormatError on version mismatch, checksum failure, truncated blob or a
// malformed manifest; IoError when files cannot be read.
ModelGraph load_model(const std::filesystem::path& manifest_path);

}  // namespace pfq
