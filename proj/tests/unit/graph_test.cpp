#include <gtest/gtest.h>

#include <sstream>

#include "pfq/errors.hpp"
#include "pfq/executor.hpp"
#include "pfq/graph.hpp"
#include "pfq/passes.hpp"
#include "pfq/reports.hpp"
#include "pfq/zoo.hpp"
#include "test_support.hpp"

using namespace pfq;
using pfq::testing::random_tensor;

namespace {

LayerSpec conv(const std::string& name, std::size_t out, std::size_t in, std::size_t k,
               ConvGeometry geom, std::mt19937_64& rng) {
  return {name, ConvLayer{{random_tensor({out, in, k, k}, rng), std::nullopt}, geom, {}}};
}

}  // namespace

TEST(Shapes, StridedPaddedConv) {
  std::mt19937_64 rng(1);
  ModelGraph g;
  g.input_shape = {3, 32, 32};
  g.layers.push_back(conv("c", 8, 3, 3, {2, 2, 1, 1}, rng));
  EXPECT_EQ(output_shape(g), (Shape{1, 8, 16, 16}));
}

TEST(Shapes, EmptyGraphIsInput) {
  ModelGraph g;
  g.input_shape = {3, 5, 7};
  EXPECT_EQ(output_shape(g), (Shape{1, 3, 5, 7}));
}

TEST(Shapes, MismatchedAddIsAnError) {
  std::mt19937_64 rng(2);
  ModelGraph g;
  g.input_shape = {2, 8, 8};
  g.layers.push_back(conv("c", 2, 2, 3, {2, 2, 1, 1}, rng));
  g.layers.push_back({"add", AddJunctionLayer{"c", "input"}});
  EXPECT_THROW(g.validate(), ShapeError);
}

TEST(Validate, StructuralRules) {
  std::mt19937_64 rng(3);
  ModelGraph g;
  g.input_shape = {2, 4, 4};
  g.layers.push_back(conv("c", 2, 2, 1, {1, 1, 0, 0}, rng));
  g.layers.push_back({"c", ReluLayer{}});
  EXPECT_THROW(g.validate(), ValidationError);

  g.layers[1] = {"input", ReluLayer{}};
  EXPECT_THROW(g.validate(), ValidationError);

  g.layers[1] = {"r", ReluLayer{}};
  g.layers.push_back({"bn", BatchNormLayer{BNParams::identity(2)}});
  EXPECT_THROW(g.validate(), ValidationError);

  g.layers.pop_back();
  g.layers.push_back({"add", AddJunctionLayer{"r", "later"}});
  EXPECT_THROW(g.validate(), ValidationError);

  g.layers.back() = {"add", AddJunctionLayer{"r", "input"}};
  EXPECT_NO_THROW(g.validate());
}

TEST(Macs, HandCounts) {
  std::mt19937_64 rng(4);
  ModelGraph g;
  g.input_shape = {1, 6, 6};
  g.layers.push_back(conv("c", 1, 1, 3, {1, 1, 0, 0}, rng));
  EXPECT_EQ(count_macs(g), 144u);

  g.input_shape = {1, 1, 1};
  g.layers[0] = conv("c", 1, 1, 1, {1, 1, 0, 0}, rng);
  EXPECT_EQ(count_macs(g), 1u);

  g.input_shape = {8, 10, 10};
  g.layers[0] = {"dw", DepthwiseConvLayer{{random_tensor({8, 1, 3, 3}, rng), std::nullopt}, {1, 1, 1, 1}, {}}};
  EXPECT_EQ(count_macs(g), 7200u);

  g.layers.push_back({"pool", GlobalAvgPoolLayer{}});
  g.layers.push_back({"fc", AffineLayer{{random_tensor({8, 5}, rng), std::nullopt}, {}}});
  EXPECT_EQ(count_macs(g), 7200u + 40u);
  const auto rows = count_layer_macs(g);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[2].layer, "fc");
  EXPECT_EQ(rows[2].macs, 40u);
}

TEST(Parameters, CountAndDecayFlags) {
  ModelGraph g = make_tiny_cnn(3, 6, 6, 4, 5, 1);
  // conv 4*3*3*3, bn gamma+beta 8, fc 4*5 + 5
  EXPECT_EQ(parameter_count(g), 108u + 8u + 25u);
  for (const auto& p : parameters(g)) {
    EXPECT_EQ(p.decays, p.role == ParamRole::weight);
  }
}

TEST(RangeReport, ConstantAndHandRanges) {
  ModelGraph g;
  g.input_shape = {1, 2, 2};
  g.layers.push_back({"c", ConvLayer{{Tensor({1, 1, 1, 1}, 0.5), std::nullopt}, {1, 1, 0, 0}, {}}});
  g.layers.push_back({"d", ConvLayer{{Tensor({2, 1, 1, 1}, std::vector<double>{-1.0, 3.0}), std::nullopt}, {1, 1, 0, 0}, {}}});
  const auto rows = dynamic_range_report(g);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].range(), 0.0);
  EXPECT_EQ(rows[1].range(), 4.0);
  std::ostringstream os;
  write_range_csv(os, rows);
  EXPECT_EQ(os.str().substr(0, 20), "layer,min,max,range\n");
}

TEST(RangeReport, RowsFollowLayerOrderAndAreNonNegative) {
  const ModelGraph g = fold_all_bn(make_dwsep_net({}, 3));
  const auto rows = dynamic_range_report(g);
  std::size_t last = 0;
  for (const auto& r : rows) {
    EXPECT_GE(r.range(), 0.0);
    const std::size_t at = *g.find(r.layer);
    EXPECT_GE(at, last);
    last = at;
  }
}

TEST(Fold, RemovesEveryBnAndPreservesFunction) {
  std::mt19937_64 rng(5);
  ModelGraph g = make_dwsep_net({}, 2);
  for (auto& l : g.layers) {
    if (auto* bn = std::get_if<BatchNormLayer>(&l.params)) {
      const std::size_t c = bn->params.channels();
      bn->params.running_mean = random_tensor({c}, rng);
      bn->params.running_var = random_tensor({c}, rng, 0.1, 2.0);
      bn->params.beta = random_tensor({c}, rng);
    }
  }
  const ModelGraph f = fold_all_bn(g);
  EXPECT_FALSE(f.has_batch_norm());
  const Tensor x = random_tensor({3, 3, 16, 16}, rng, 0.0, 1.0);
  const Tensor a = predict(g, x), b = predict(f, x);
  EXPECT_LT(pfq::testing::relative_error(b, a), 1e-10);
}
