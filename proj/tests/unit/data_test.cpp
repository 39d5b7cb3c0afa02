#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "pfq/data.hpp"
#include "pfq/errors.hpp"
#include "pfq/trainer.hpp"
#include "test_support.hpp"

using namespace pfq;
namespace fs = std::filesystem;

namespace {

fs::path write_records(const std::string& name, const std::vector<std::vector<unsigned char>>& recs) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream os(p, std::ios::binary);
  for (const auto& r : recs) os.write(reinterpret_cast<const char*>(r.data()), static_cast<std::streamsize>(r.size()));
  return p;
}

std::vector<unsigned char> record(std::vector<unsigned char> labels, unsigned char fill) {
  labels.resize(labels.size() + 3072, fill);
  return labels;
}

}  // namespace

TEST(Cifar, TwoRecords) {
  auto r0 = record({3}, 0);
  r0[1] = 255;           // R plane, first pixel
  r0[1 + 1024] = 51;     // G plane, first pixel
  const fs::path p = write_records("pfq_c10.bin", {r0, record({9}, 255)});
  const Dataset d = load_cifar_binary(p, 10);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.images.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(d.labels, (std::vector<int>{3, 9}));
  EXPECT_EQ(d.images[0], 1.0);
  EXPECT_EQ(d.images[1], 0.0);
  EXPECT_EQ(d.images[1024], 0.2);
  EXPECT_EQ(d.images[3072], 1.0);
  EXPECT_EQ(load_cifar_binary(p, 10).images, d.images);
  fs::remove(p);
}

TEST(Cifar, HundredUsesFineLabel) {
  const fs::path p = write_records("pfq_c100.bin", {record({7, 88}, 10)});
  const Dataset d = load_cifar_binary(p, 100);
  EXPECT_EQ(d.labels, (std::vector<int>{88}));
  EXPECT_EQ(d.class_count, 100u);
  fs::remove(p);
}

TEST(Cifar, Errors) {
  auto r = record({1}, 0);
  r.pop_back();
  const fs::path p = write_records("pfq_trunc.bin", {record({1}, 0), r});
  EXPECT_THROW(load_cifar_binary(p, 10), FormatError);
  const fs::path q = write_records("pfq_label.bin", {record({10}, 0)});
  EXPECT_THROW(load_cifar_binary(q, 10), FormatError);
  EXPECT_THROW(load_cifar_binary(q, 20), ConfigError);
  EXPECT_THROW(load_cifar_binary("/nonexistent/x.bin", 10), IoError);
  fs::remove(p);
  fs::remove(q);
}

TEST(Split, CountsDisjointExhaustive) {
  SyntheticSpec s;
  s.class_count = 2;
  s.per_class = 100;
  s.height = s.width = 2;
  const Dataset d = make_synthetic(s);
  const Split sp = split_validation(d, {50, 3});
  EXPECT_EQ(sp.validation.size(), 100u);
  EXPECT_EQ(sp.train.size(), 100u);
  std::vector<int> per(2, 0);
  for (int l : sp.validation.labels) ++per[l];
  EXPECT_EQ(per, (std::vector<int>{50, 50}));

  // Every image appears exactly once across the two sides.
  std::multiset<std::vector<double>> all, parts;
  const std::size_t sz = 3 * 2 * 2;
  for (std::size_t i = 0; i < d.size(); ++i) {
    all.insert({d.images.storage().begin() + i * sz, d.images.storage().begin() + (i + 1) * sz});
  }
  for (const Dataset* side : {&sp.train, &sp.validation})
    for (std::size_t i = 0; i < side->size(); ++i) {
      parts.insert({side->images.storage().begin() + i * sz, side->images.storage().begin() + (i + 1) * sz});
    }
  EXPECT_EQ(all, parts);

  const Split again = split_validation(d, {50, 3});
  EXPECT_EQ(again.validation.images, sp.validation.images);
  EXPECT_EQ(split_validation(d, {0, 3}).validation.size(), 0u);
  EXPECT_THROW(split_validation(d, {101, 3}), ValidationError);
}

TEST(Synthetic, ReproducibleAndBounded) {
  SyntheticSpec s;
  s.per_class = 5;
  const Dataset a = make_synthetic(s), b = make_synthetic(s);
  EXPECT_EQ(a.images, b.images);
  EXPECT_GE(a.images.min(), 0.0);
  EXPECT_LE(a.images.max(), 1.0);
  EXPECT_NO_THROW(a.validate());
  s.per_class = 0;
  EXPECT_TRUE(make_synthetic(s).empty());
}

TEST(Synthetic, LinearProbeSeparatesTwoClasses) {
  SyntheticSpec s;
  s.class_count = 2;
  s.per_class = 50;
  s.height = s.width = 8;
  s.signal = 0.3;
  s.noise = 0.05;
  const Dataset d = make_synthetic(s);
  ModelGraph g;
  g.input_shape = {3, 8, 8};
  g.layers.push_back({"fc", AffineLayer{{Tensor({192, 2}), Tensor({2})}, {}}});
  TrainConfig c;
  c.epochs = 20;
  c.batch_size = 10;
  c.schedule = {0.01, 0, 1000.0};
  const TrainResult r = train_epochs(g, d, {}, {}, c);
  EXPECT_EQ(evaluate_accuracy(r.graph, d), 100.0);
}
