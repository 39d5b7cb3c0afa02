#include "pfq/zoo.hpp"

#include <cmath>
#include <random>
#include <string>

#include "pfq/errors.hpp"

namespace pfq {

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = dist(rng);
  return t;
}

LayerSpec bn_layer(const std::string& name, std::size_t channels, const DwSepNetSpec& spec) {
  return {name, BatchNormLayer{BNParams::identity(channels, spec.bn_epsilon, spec.bn_rho)}};
}

LayerSpec act_layer(const std::string& name, bool relu6) {
  if (relu6) return {name, Relu6Layer{}};
  return {name, ReluLayer{}};
}

}  // namespace

ModelGraph make_dwsep_net(const DwSepNetSpec& spec, std::uint64_t seed) {
  if (spec.blocks.empty() || spec.classes == 0 || spec.stem_channels == 0) {
    throw ValidationError("depthwise-separable net needs blocks, classes and a stem width");
  }
  std::mt19937_64 rng(seed);
  ModelGraph g;
  g.input_shape = {spec.in_channels, spec.height, spec.width};

  const ConvGeometry same3{1, 1, 1, 1};
  g.layers.push_back({"stem.conv",
                      ConvLayer{{he_normal({spec.stem_channels, spec.in_channels, 3, 3},
                                           spec.in_channels * 9, rng),
                                 std::nullopt},
                                same3,
                                std::nullopt}});
  g.layers.push_back(bn_layer("stem.bn", spec.stem_channels, spec));
  g.layers.push_back(act_layer("stem.act", spec.use_relu6));

  std::size_t channels = spec.stem_channels;
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const DwSepBlock& blk = spec.blocks[b];
    const std::string p = "b" + std::to_string(b) + ".";
    const ConvGeometry dw_geom{blk.stride, blk.stride, 1, 1};
    g.layers.push_back(
        {p + "dw", DepthwiseConvLayer{{he_normal({channels, 1, 3, 3}, 9, rng), std::nullopt},
                                      dw_geom,
                                      std::nullopt}});
    g.layers.push_back(bn_layer(p + "dw_bn", channels, spec));
    g.layers.push_back(act_layer(p + "dw_act", spec.use_relu6));
    g.layers.push_back(
        {p + "pw",
         ConvLayer{{he_normal({blk.out_channels, channels, 1, 1}, channels, rng), std::nullopt},
                   ConvGeometry{},
                   std::nullopt}});
    LayerSpec pw_bn = bn_layer(p + "pw_bn", blk.out_channels, spec);
    if (b + 1 < spec.blocks.size()) {
      auto& bn = pw_bn.as<BatchNormLayer>().params;
      const std::size_t dead = std::min(spec.dead_channels_per_block, blk.out_channels - 1);
      for (std::size_t k = 0; k < dead; ++k) {
        // Spread dead channels over the layer: gamma * x_hat + beta < 0 for
        // any realistic |x_hat|.
        const std::size_t c = (k * blk.out_channels) / std::max<std::size_t>(dead, 1);
        bn.gamma[c] = 0.05;
        bn.beta[c] = -1.0;
      }
    }
    g.layers.push_back(std::move(pw_bn));
    g.layers.push_back(act_layer(p + "pw_act", spec.use_relu6));
    channels = blk.out_channels;
  }

  g.layers.push_back({"pool", GlobalAvgPoolLayer{}});
  Tensor fc_w = he_normal({channels, spec.classes}, channels, rng);
  for (double& v : fc_w.data()) v *= std::sqrt(0.5);
  g.layers.push_back({"fc", AffineLayer{{std::move(fc_w), Tensor({spec.classes})}, std::nullopt}});
  g.validate();
  return g;
}

ModelGraph make_tiny_cnn(std::size_t in_channels, std::size_t height, std::size_t width,
                         std::size_t channels, std::size_t classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelGraph g;
  g.input_shape = {in_channels, height, width};
  g.layers.push_back(
      {"conv", ConvLayer{{he_normal({channels, in_channels, 3, 3}, in_channels * 9, rng),
                          std::nullopt},
                         ConvGeometry{1, 1, 1, 1},
                         std::nullopt}});
  g.layers.push_back({"bn", BatchNormLayer{BNParams::identity(channels)}});
  g.layers.push_back({"relu", ReluLayer{}});
  g.layers.push_back({"pool", GlobalAvgPoolLayer{}});
  g.layers.push_back(
      {"fc", AffineLayer{{he_normal({channels, classes}, channels, rng), Tensor({classes})},
                         std::nullopt}});
  g.validate();
  return g;
}

}  // namespace pfq
