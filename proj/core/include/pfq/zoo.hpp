#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pfq/graph.hpp"

namespace pfq {

struct DwSepBlock {
  std::size_t out_channels;
  std::size_t stride;
};

// MobileNetV1-style stack: 3x3 stem conv, then depthwise-separable blocks
// (3x3 depthwise + 1x1 pointwise, each followed by BN and ReLU), global
// average pool and a linear classifier.
struct DwSepNetSpec {
  std::size_t in_channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t stem_channels = 16;
  std::vector<DwSepBlock> blocks = {{16, 1}, {24, 2}, {24, 1}, {32, 2}, {32, 1}, {32, 1}};
  std::size_t classes = 4;
  // Pointwise BN channels (per block except the last) initialized so that
  // their ReLU never fires. The next depthwise layer then sees an all-zero
  // input on that channel, and its BN running variance decays towards zero.
  std::size_t dead_channels_per_block = 0;
  bool use_relu6 = false;
  double bn_epsilon = 1e-5;
  double bn_rho = 0.9;
};

ModelGraph make_dwsep_net(const DwSepNetSpec& spec, std::uint64_t seed);

// conv(3x3, pad 1) -> BN -> ReLU -> global average pool -> affine.
ModelGraph make_tiny_cnn(std::size_t in_channels, std::size_t height, std::size_t width,
                         std::size_t channels, std::size_t classes, std::uint64_t seed);

}  // namespace pfq
