#include "pfq/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "pfq/errors.hpp"

namespace pfq {

namespace {

constexpr std::size_t kCifarPixels = 3 * 32 * 32;

}  // namespace

void Dataset::validate() const {
  if (images.rank() != 4) throw ValidationError("dataset images must be N x C x H x W");
  if (images.dim(0) != labels.size()) {
    throw ValidationError("dataset has " + std::to_string(images.dim(0)) + " images but " +
                          std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= class_count) {
      throw ValidationError("label " + std::to_string(l) + " outside [0, " +
                            std::to_string(class_count) + ")");
    }
  }
}

Tensor Dataset::gather(std::span<const std::size_t> indices) const {
  const std::size_t per = images.size() / std::max<std::size_t>(images.dim(0), 1);
  Shape s = images.shape();
  s[0] = indices.size();
  std::vector<double> data(indices.size() * per);
  auto src = images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= labels.size()) throw ShapeError("sample index out of range");
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(indices[i] * per), per,
                data.begin() + static_cast<std::ptrdiff_t>(i * per));
  }
  return Tensor(std::move(s), std::move(data));
}

std::vector<int> Dataset::gather_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  return {gather(indices), gather_labels(indices), class_count};
}

Dataset load_cifar_binary(const std::filesystem::path& path, int variant) {
  if (variant != 10 && variant != 100) {
    throw ConfigError("CIFAR variant must be 10 or 100, got " + std::to_string(variant));
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                         std::istreambuf_iterator<char>()};
  const std::size_t label_bytes = variant == 10 ? 1 : 2;
  const std::size_t record = label_bytes + kCifarPixels;
  if (bytes.size() % record != 0) {
    throw FormatError(path.string() + ": length " + std::to_string(bytes.size()) +
                      " is not a multiple of the " + std::to_string(record) + "-byte record");
  }
  const std::size_t n = bytes.size() / record;
  Dataset d{Tensor({n, 3, 32, 32}), std::vector<int>(n), static_cast<std::size_t>(variant)};
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* r = bytes.data() + i * record;
    const int label = r[label_bytes - 1];
    if (label >= variant) {
      throw FormatError(path.string() + ": record " + std::to_string(i) + " has label " +
                        std::to_string(label));
    }
    d.labels[i] = label;
    for (std::size_t p = 0; p < kCifarPixels; ++p) {
      d.images[i * kCifarPixels + p] = r[label_bytes + p] / 255.0;
    }
  }
  return d;
}

Split split_validation(const Dataset& dataset, const SplitSpec& spec) {
  std::vector<std::vector<std::size_t>> by_class(dataset.class_count);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    by_class.at(static_cast<std::size_t>(dataset.labels[i])).push_back(i);
  }
  std::mt19937_64 rng(spec.seed);
  std::vector<bool> in_val(dataset.size(), false);
  std::vector<std::size_t> val;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    if (idx.size() < spec.per_class_validation_count) {
      throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                            " samples, fewer than the " +
                            std::to_string(spec.per_class_validation_count) + " requested");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < spec.per_class_validation_count; ++k) in_val[idx[k]] = true;
  }
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < dataset.size(); ++i) (in_val[i] ? val : train).push_back(i);
  return {dataset.subset(train), dataset.subset(val)};
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  const std::size_t plane = spec.height * spec.width;
  const std::size_t per = spec.channels * plane;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Class means: a few random low-frequency waves per channel.
  std::vector<std::vector<double>> means(spec.class_count, std::vector<double>(per));
  std::uniform_real_distribution<double> freq(0.5, 2.5), phase(0.0, 2.0 * M_PI);
  for (auto& m : means) {
    for (std::size_t c = 0; c < spec.channels; ++c) {
      const double fy = freq(rng), fx = freq(rng), py = phase(rng), px = phase(rng);
      const double amp = gauss(rng) >= 0 ? 1.0 : -1.0;
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t x = 0; x < spec.width; ++x) {
          const double u = static_cast<double>(y) / spec.height * 2.0 * M_PI;
          const double v = static_cast<double>(x) / spec.width * 2.0 * M_PI;
          m[c * plane + y * spec.width + x] =
              0.5 + spec.signal * amp * std::sin(fy * u + py) * std::cos(fx * v + px);
        }
      }
    }
  }

  const std::size_t n = spec.class_count * spec.per_class;
  Dataset d{Tensor({n, spec.channels, spec.height, spec.width}), std::vector<int>(n),
            spec.class_count};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % spec.class_count;
    d.labels[i] = static_cast<int>(cls);
    for (std::size_t p = 0; p < per; ++p) {
      d.images[i * per + p] = std::clamp(means[cls][p] + spec.noise * gauss(rng), 0.0, 1.0);
    }
  }
  return d;
}

}  // namespace pfq
