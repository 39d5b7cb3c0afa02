#include <gtest/gtest.h>

#include <sstream>

#include "pfq/errors.hpp"
#include "pfq/executor.hpp"
#include "pfq/passes.hpp"
#include "pfq/pfq.hpp"
#include "pfq/reports.hpp"
#include "pfq/zoo.hpp"
#include "test_support.hpp"

using namespace pfq;
using pfq::testing::random_tensor;

namespace {

constexpr double kEps = 1e-5;

LayerSpec conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k,
               std::size_t pad, bool bias, std::mt19937_64& rng) {
  std::optional<Tensor> b;
  if (bias) b = random_tensor({out}, rng);
  return {name, ConvLayer{{random_tensor({out, in, k, k}, rng), b}, {1, 1, pad, pad}, {}}};
}

LayerSpec dw(const std::string& name, std::size_t ch, std::size_t pad, std::mt19937_64& rng) {
  return {name, DepthwiseConvLayer{{random_tensor({ch, 1, 3, 3}, rng), std::nullopt}, {1, 1, pad, pad}, {}}};
}

LayerSpec bn(const std::string& name, std::size_t ch, std::mt19937_64& rng) {
  BNParams p = BNParams::identity(ch);
  p.gamma = random_tensor({ch}, rng, 0.5, 1.5);
  p.beta = random_tensor({ch}, rng, -0.5, 0.5);
  p.running_mean = random_tensor({ch}, rng, -0.3, 0.3);
  p.running_var = random_tensor({ch}, rng, 0.5, 1.5);
  return {name, BatchNormLayer{p}};
}

// Makes channel `c` of BN `bn_name` exactly constant beta at inference: the
// producing filter is zeroed, running mean and variance are zero.
void make_constant(ModelGraph& g, const std::string& bn_name, std::size_t c, double beta) {
  const std::size_t i = *g.find(bn_name);
  std::visit(
      [&](auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, ConvLayer> || std::is_same_v<T, DepthwiseConvLayer>) {
          const std::size_t k = p.params.weight.size() / p.params.weight.dim(0);
          for (std::size_t j = 0; j < k; ++j) p.params.weight[c * k + j] = 0.0;
          if (p.params.bias) (*p.params.bias)[c] = 0.0;
        }
      },
      g.layers[i - 1].params);
  BNParams& b = g.layers[i].as<BatchNormLayer>().params;
  b.running_mean[c] = 0.0;
  b.running_var[c] = 0.0;
  b.beta[c] = beta;
}

double max_deviation(const ModelGraph& a, const ModelGraph& b, std::size_t probes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Shape& s = a.input_shape;
  const Tensor x = random_tensor({probes, s[0], s[1], s[2]}, rng, -1.0, 1.0);
  return max_abs_diff(predict(a, x), predict(b, x));
}

ModelGraph head(ModelGraph g, std::size_t ch, std::mt19937_64& rng) {
  g.layers.push_back({"pool", GlobalAvgPoolLayer{}});
  g.layers.push_back({"fc", AffineLayer{{random_tensor({ch, 3}, rng), random_tensor({3}, rng)}, {}}});
  g.validate();
  return g;
}

}  // namespace

TEST(Scan, StrictThresholdAndOrder) {
  std::mt19937_64 rng(1);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c", 3, 2, 1, 0, false, rng));
  g.layers.push_back(bn("bn", 3, rng));
  g = head(g, 3, rng);
  auto& b = g.layers[1].as<BatchNormLayer>().params;
  b.running_var = Tensor::vector({2 * kEps, kEps / 2, kEps / 10});
  auto c = scan_candidates(g, kEps);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[0].channel, 1u);
  EXPECT_EQ(c[1].channel, 2u);

  b.running_var = Tensor::vector({kEps, 0.0, 1.0});
  c = scan_candidates(g, kEps);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].channel, 1u);
  EXPECT_EQ(c[0].act_of_beta, b.beta[1]);  // no activation between BN and pool
}

TEST(Correction, HandValues) {
  // Kernel slice for input channel 0 sums to 0.8 for output 0.
  Tensor w({2, 2, 2, 2});
  const double slice[4] = {0.1, 0.2, 0.3, 0.2};
  for (int i = 0; i < 4; ++i) w[i] = slice[i];
  const auto u = compute_bias_correction(w, 0, std::max(0.5, 0.0));
  EXPECT_NEAR(u[0], 0.4, 1e-15);
  EXPECT_EQ(u[1], 0.0);  // zero kernel slice
  const auto z = compute_bias_correction(w, 0, std::max(-1.0, 0.0));
  EXPECT_EQ(z[0], 0.0);
  const Tensor fc({3, 2}, std::vector<double>{1, 2, 3, 4, 5, 6});
  EXPECT_EQ(compute_bias_correction(fc, 1, 2.0), (std::vector<double>{6.0, 8.0}));
  EXPECT_THROW(compute_bias_correction(fc, 3, 1.0), ShapeError);
}

TEST(Pfq, ConsumerWithBias) {
  std::mt19937_64 rng(2);
  ModelGraph g;
  g.input_shape = {2, 6, 6};
  g.layers.push_back(conv("c1", 4, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 4, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back(conv("c2", 5, 4, 3, 0, true, rng));
  g = head(g, 5, rng);
  make_constant(g, "bn1", 2, 0.7);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.report.channels_removed(), 1u);
  EXPECT_EQ(r.report.entries[0].kind, "bias");
  EXPECT_EQ(r.graph.layers[0].as<ConvLayer>().params.out_channels(), 3u);
  EXPECT_EQ(r.graph.layers[3].as<ConvLayer>().params.in_channels(), 3u);
  EXPECT_LT(max_deviation(g, r.graph, 50, 3), 1e-6);
}

TEST(Pfq, ConsumerWithoutBiasFollowedByBn) {
  std::mt19937_64 rng(4);
  ModelGraph g;
  g.input_shape = {2, 5, 5};
  g.layers.push_back(conv("c1", 4, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 4, rng));
  g.layers.push_back({"r1", Relu6Layer{}});
  g.layers.push_back(conv("c2", 3, 4, 1, 0, false, rng));
  g.layers.push_back(bn("bn2", 3, rng));
  g.layers.push_back({"r2", ReluLayer{}});
  g = head(g, 3, rng);
  make_constant(g, "bn1", 0, 0.9);
  make_constant(g, "bn1", 3, 0.4);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.report.channels_removed(), 2u);
  EXPECT_EQ(r.report.entries[0].kind, "beta");
  EXPECT_FALSE(r.graph.layers[3].as<ConvLayer>().params.bias.has_value());
  EXPECT_LT(max_deviation(g, r.graph, 50, 5), 1e-6);
}

TEST(Pfq, DepthwiseCascade) {
  std::mt19937_64 rng(6);
  ModelGraph g;
  g.input_shape = {2, 7, 7};
  g.layers.push_back(conv("c1", 4, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 4, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back(dw("dw", 4, 0, rng));
  g.layers.push_back(bn("bn2", 4, rng));
  g.layers.push_back({"r2", ReluLayer{}});
  g.layers.push_back(conv("pw", 3, 4, 1, 0, false, rng));
  g.layers.push_back(bn("bn3", 3, rng));
  g.layers.push_back({"r3", ReluLayer{}});
  g = head(g, 3, rng);
  make_constant(g, "bn1", 1, 0.6);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.graph.layers[3].as<DepthwiseConvLayer>().params.channels(), 3u);
  EXPECT_EQ(r.graph.layers[4].as<BatchNormLayer>().params.channels(), 3u);
  EXPECT_EQ(r.graph.layers[6].as<ConvLayer>().params.in_channels(), 3u);
  bool cascade = false;
  for (const auto& e : r.report.entries) cascade |= e.kind == "cascade";
  EXPECT_TRUE(cascade);
  EXPECT_LT(max_deviation(g, r.graph, 50, 7), 1e-6);
}

TEST(Pfq, FinalAffine) {
  std::mt19937_64 rng(8);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c1", 4, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 4, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g = head(g, 4, rng);
  make_constant(g, "bn1", 3, 0.8);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.report.entries.at(0).kind, "bias");
  EXPECT_EQ(r.graph.layers.back().as<AffineLayer>().params.in_features(), 3u);
  EXPECT_LT(max_deviation(g, r.graph, 50, 9), 1e-6);
}

TEST(Pfq, AffineWithoutBiasGetsOne) {
  std::mt19937_64 rng(9);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c1", 3, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 3, rng));
  g.layers.push_back({"pool", GlobalAvgPoolLayer{}});
  g.layers.push_back({"fc", AffineLayer{{random_tensor({3, 2}, rng), std::nullopt}, {}}});
  make_constant(g, "bn1", 0, -0.3);
  const PfqResult r = apply_pfq(g, {});
  ASSERT_TRUE(r.graph.layers.back().as<AffineLayer>().params.bias.has_value());
  EXPECT_LT(max_deviation(g, r.graph, 20, 10), 1e-6);
}

TEST(Pfq, DeadBranchIntoDepthwiseProducer) {
  // A pointwise channel whose ReLU never fires leaves the next depthwise
  // channel constant; removing it also removes the pointwise filter.
  std::mt19937_64 rng(11);
  ModelGraph g;
  g.input_shape = {3, 6, 6};
  g.layers.push_back(conv("pw1", 4, 3, 1, 0, false, rng));
  g.layers.push_back(bn("pw1_bn", 4, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back(dw("dw", 4, 1, rng));
  g.layers.push_back(bn("dw_bn", 4, rng));
  g.layers.push_back({"r2", ReluLayer{}});
  g.layers.push_back(conv("pw2", 5, 4, 1, 0, false, rng));
  g.layers.push_back(bn("pw2_bn", 5, rng));
  g.layers.push_back({"r3", ReluLayer{}});
  g = head(g, 5, rng);
  auto& b1 = g.layers[1].as<BatchNormLayer>().params;
  b1.gamma[2] = 1e-3;
  b1.beta[2] = -5.0;
  auto& b2 = g.layers[4].as<BatchNormLayer>().params;
  b2.running_mean[2] = 0.0;
  b2.running_var[2] = 0.0;
  const std::size_t before = parameter_count(g);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.graph.layers[0].as<ConvLayer>().params.out_channels(), 3u);
  EXPECT_EQ(r.graph.layers[1].as<BatchNormLayer>().params.channels(), 3u);
  EXPECT_EQ(r.graph.layers[3].as<DepthwiseConvLayer>().params.channels(), 3u);
  EXPECT_EQ(r.report.weights_removed(), before - parameter_count(r.graph));
  EXPECT_LT(max_deviation(g, r.graph, 50, 12), 1e-6);
}

TEST(Pfq, NoCandidatesIsNoOp) {
  const ModelGraph g = make_dwsep_net({}, 1);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.graph, g);
  EXPECT_TRUE(r.report.empty());
  EXPECT_EQ(r.report.weights_removed(), 0u);
}

TEST(Pfq, ResidualConsumerIsSkipped) {
  std::mt19937_64 rng(13);
  ModelGraph g;
  g.input_shape = {3, 4, 4};
  g.layers.push_back(conv("c1", 3, 3, 1, 0, false, rng));
  g.layers.push_back(bn("bn1", 3, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back({"add", AddJunctionLayer{"r1", "input"}});
  g = head(g, 3, rng);
  make_constant(g, "bn1", 1, 0.5);
  const PfqResult r = apply_pfq(g, {});
  ASSERT_EQ(r.report.entries.size(), 1u);
  EXPECT_EQ(r.report.entries[0].kind, "residual");
  EXPECT_FALSE(r.report.entries[0].removed);
  EXPECT_EQ(r.graph, g);
}

TEST(Pfq, WouldEmptyIsRefused) {
  std::mt19937_64 rng(14);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c1", 2, 2, 1, 0, false, rng));
  g.layers.push_back(bn("bn1", 2, rng));
  g = head(g, 2, rng);
  make_constant(g, "bn1", 0, 0.1);
  make_constant(g, "bn1", 1, 0.2);
  const PfqResult r = apply_pfq(g, {});
  ASSERT_EQ(r.report.entries.size(), 2u);
  EXPECT_EQ(r.report.entries[0].kind, "would-empty");
  EXPECT_EQ(r.graph, g);
}

TEST(Pfq, NoConsumerIsSkipped) {
  std::mt19937_64 rng(15);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c1", 3, 2, 1, 0, false, rng));
  g.layers.push_back(bn("bn1", 3, rng));
  make_constant(g, "bn1", 0, 0.1);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.report.entries.at(0).kind, "no-consumer");
}

TEST(Pfq, ReluZeroNeedsNoCorrection) {
  std::mt19937_64 rng(16);
  ModelGraph g;
  g.input_shape = {2, 5, 5};
  g.layers.push_back(conv("c1", 3, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 3, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back(conv("c2", 3, 3, 3, 1, true, rng));  // padded, but the constant is zero
  g = head(g, 3, rng);
  make_constant(g, "bn1", 1, -0.4);
  const PfqResult r = apply_pfq(g, {});
  EXPECT_EQ(r.report.entries.at(0).kind, "none-ReLU-zero");
  EXPECT_EQ(r.report.entries.at(0).u_norm, 0.0);
  EXPECT_LT(max_deviation(g, r.graph, 20, 17), 1e-12);
}

TEST(Pfq, PaddedConsumerOption) {
  std::mt19937_64 rng(18);
  ModelGraph g;
  g.input_shape = {2, 5, 5};
  g.layers.push_back(conv("c1", 3, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 3, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back(conv("c2", 3, 3, 3, 1, true, rng));
  g = head(g, 3, rng);
  make_constant(g, "bn1", 1, 0.4);
  PfqOptions opt;
  opt.skip_padded_consumers = true;
  const PfqResult skipped = apply_pfq(g, opt);
  EXPECT_EQ(skipped.report.entries.at(0).kind, "padded");
  EXPECT_EQ(skipped.graph, g);
  const PfqResult applied = apply_pfq(g, {});
  EXPECT_EQ(applied.report.channels_removed(), 1u);
}

TEST(Pfq, UncorrectedAblationChangesOutput) {
  std::mt19937_64 rng(19);
  ModelGraph g;
  g.input_shape = {2, 6, 6};
  g.layers.push_back(conv("c1", 4, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 4, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back(conv("c2", 5, 4, 1, 0, true, rng));
  g = head(g, 5, rng);
  make_constant(g, "bn1", 2, 0.7);
  PfqOptions opt;
  opt.correct = false;
  const PfqResult r = apply_pfq(g, opt);
  EXPECT_EQ(r.report.entries.at(0).kind, "uncorrected");
  EXPECT_GT(max_deviation(g, r.graph, 10, 20), 1e-3);
}

TEST(Pfq, QuantizedActOfBeta) {
  std::mt19937_64 rng(21);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c1", 3, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 3, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g = head(g, 3, rng);
  make_constant(g, "bn1", 0, 0.3);
  QuantInsertOptions qo;
  qo.act_bits = 2;
  qo.enable_weights = false;
  g = insert_quant_points(g, qo);
  auto& q = g.layers[*g.find("r1.aq")].as<ActQuantLayer>().point;
  q.config.lower = 0.0;
  q.config.upper = 1.0;
  q.initialized = true;

  const auto c = scan_candidates(g, kEps, true);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].act_of_beta, 0.25);
  EXPECT_EQ(scan_candidates(g, kEps, false)[0].act_of_beta, 0.3);

  // With the quantizer active, only the quantized constant keeps the
  // network function unchanged.
  PfqOptions exact;
  EXPECT_LT(max_deviation(g, apply_pfq(g, exact).graph, 20, 22), 1e-6);
  PfqOptions raw;
  raw.quantize_act_of_beta = false;
  EXPECT_GT(max_deviation(g, apply_pfq(g, raw).graph, 20, 22), 1e-4);
}

TEST(Pfq, IdempotentAndBookkeeping) {
  DwSepNetSpec spec;
  spec.dead_channels_per_block = 2;
  ModelGraph g = make_dwsep_net(spec, 3);
  // Stand-in for training: every dead branch has driven the depthwise BN
  // variance to zero.
  std::mt19937_64 rng(23);
  const Tensor x = random_tensor({8, 3, 16, 16}, rng, 0.0, 1.0);
  ForwardOptions opt;
  opt.training = true;
  for (int i = 0; i < 200; ++i) forward(g, x, opt);
  const PfqResult once = apply_pfq(g, {});
  EXPECT_EQ(once.report.channels_removed(), 2u * (spec.blocks.size() - 1));
  EXPECT_EQ(once.report.weights_removed(), parameter_count(g) - parameter_count(once.graph));
  EXPECT_LT(once.report.macs_after, once.report.macs_before);
  EXPECT_EQ(once.report.macs_after, count_macs(once.graph));
  std::size_t per_layer = 0;
  for (const auto& l : once.report.layers) per_layer += l.weights_removed;
  EXPECT_EQ(per_layer, once.report.weights_removed());

  const PfqResult twice = apply_pfq(once.graph, {});
  EXPECT_EQ(twice.report.channels_removed(), 0u);
  EXPECT_EQ(twice.graph, once.graph);

  // The report keeps the channel indices the layer was built with.
  std::ostringstream os;
  once.report.write_csv(os);
  EXPECT_EQ(os.str().rfind("layer,channel,kind,Vt,beta,U_norm\n", 0), 0u);
  EXPECT_NE(once.report.summary().find("removed"), std::string::npos);
}

TEST(Pfq, FoldedRangeShrinks) {
  std::mt19937_64 rng(24);
  ModelGraph g;
  g.input_shape = {2, 6, 6};
  g.layers.push_back(conv("c1", 4, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 4, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g.layers.push_back(conv("c2", 3, 4, 1, 0, true, rng));
  g = head(g, 3, rng);
  // Tiny variance with a non-zero filter: folding blows this filter up.
  auto& w = g.layers[0].as<ConvLayer>().params.weight;
  for (std::size_t j = 0; j < 18; ++j) w[18 + j] = 0.5;
  g.layers[1].as<BatchNormLayer>().params.running_var[1] = 1e-9;
  const double before = max_weight_range(fold_all_bn(g), LayerKind::conv);
  const PfqResult r = apply_pfq(g, {});
  const auto a = dynamic_range_report(fold_all_bn(g));
  const auto b = dynamic_range_report(fold_all_bn(r.graph));
  EXPECT_LT(b[0].range(), a[0].range());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(b[i].range(), a[i].range() + 1e-12);
  EXPECT_GT(before, 100.0);
}

TEST(Constancy, SpreadMatchesVariance) {
  std::mt19937_64 rng(25);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c1", 3, 2, 3, 1, false, rng));
  g.layers.push_back(bn("bn1", 3, rng));
  g.layers.push_back({"r1", ReluLayer{}});
  g = head(g, 3, rng);
  make_constant(g, "bn1", 0, 0.3);
  const auto rows = channel_constancy_report(g, random_tensor({6, 2, 4, 4}, rng));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].spread, 0.0);
  EXPECT_GT(rows[1].spread, 0.0);
  std::ostringstream os;
  write_constancy_csv(os, rows);
  EXPECT_EQ(os.str().rfind("layer,channel,Vt,spread\n", 0), 0u);
}
