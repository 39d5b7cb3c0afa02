#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <utility>
#include <vector>

#include "pfq/tensor.hpp"

namespace pfq {

// Images are N x C x H x W in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::size_t class_count = 0;

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }
  // Throws ValidationError if labels and images disagree.
  void validate() const;
  Dataset subset(std::span<const std::size_t> indices) const;
  // Images of `indices` stacked into one batch.
  Tensor gather(std::span<const std::size_t> indices) const;
  std::vector<int> gather_labels(std::span<const std::size_t> indices) const;
};

// CIFAR-10 (variant 10, 3073-byte records) or CIFAR-100 (variant 100,
// 3074-byte records, fine label). Pixels are divided by 255.
Dataset load_cifar_binary(const std::filesystem::path& path, int variant);

struct SplitSpec {
  std::size_t per_class_validation_count = 50;
  std::uint64_t seed = 0;
};

struct Split {
  Dataset train;
  Dataset validation;
};

// Draws exactly `per_class_validation_count` samples of every class into the
// validation set; the rest (in original order) form the training set.
Split split_validation(const Dataset& dataset, const SplitSpec& spec);

struct SyntheticSpec {
  std::size_t class_count = 4;
  std::size_t per_class = 100;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  // Distance of the class means from 0.5 relative to the pixel noise.
  double signal = 0.25;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

// Each class has a random smooth mean image; samples add Gaussian pixel noise
// and are clamped to [0, 1]. Samples are interleaved by class.
Dataset make_synthetic(const SyntheticSpec& spec);

}  // namespace pfq
