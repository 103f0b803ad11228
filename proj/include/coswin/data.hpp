#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "coswin/rng.hpp"
#include "coswin/tensor.hpp"

namespace coswin::data {

struct DataConfig {
  std::string name = "synthetic";  // mnist | cifar10 | synthetic
  std::string dir;
  std::vector<double> mean, stddev;  // per channel; empty -> dataset defaults
  bool augment_flip = false;
  std::size_t augment_crop_pad = 0;
  // synthetic generator knobs
  std::uint64_t synthetic_seed = 7;
  std::size_t synthetic_n = 512;
  std::size_t synthetic_h = 32, synthetic_w = 32, synthetic_c = 3;
  std::size_t synthetic_classes = 10;
};

struct Dataset {
  std::string name;
  std::string split;  // train | test
  std::size_t h = 0, w = 0, c = 0;
  std::size_t num_classes = 0;
  std::vector<float> images;  // n * h * w * c, row-major, values in [0, 1]
  std::vector<int> labels;
  std::vector<double> mean, stddev;  // per-channel normalization
  bool allow_flip = false;           // digit datasets never flip
  std::size_t crop_pad = 0;          // zero-pad for random crops; 0 disables

  std::size_t size() const { return labels.size(); }
  std::span<const float> image(std::size_t i) const {
    const std::size_t px = h * w * c;
    return {images.data() + i * px, px};
  }
  Dataset subset(std::size_t n) const;
};

// IDX readers: big-endian magics 0x00000803 (images) / 0x00000801 (labels).
Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path);

// CIFAR-10 binary: 3073-byte records, 1 label byte + 1024 R + 1024 G + 1024 B.
Dataset load_cifar10_bin(const std::string& dir, const std::string& split);

// Class-dependent bright square on a noisy background; balanced within +/-1.
Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t h, std::size_t w,
                          std::size_t c, std::size_t k);

struct Rect {
  std::size_t y0 = 0, x0 = 0, h = 0, w = 0;
};
// Where synthetic_dataset paints the pattern for a class.
Rect synthetic_pattern_rect(std::size_t h, std::size_t w, std::size_t k, int label);

// Loads the dataset a config describes (dir-based or synthetic) and applies
// normalization constants and augmentation flags from the config.
Dataset load_dataset(const DataConfig& cfg, const std::string& split);

// Population mean/std per channel.
std::pair<std::vector<double>, std::vector<double>> channel_stats(const Dataset& ds);

struct Batch {
  Tensor<float> images;  // [B, h, w, c], normalized
  std::vector<int> labels;
};

// One epoch of batches. Shuffling is a seeded full permutation; the last
// partial batch is emitted. Augmentations (flip where allowed, pad-crop) run
// before per-channel normalization, which is applied last.
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                std::uint64_t epoch, bool shuffle, bool augment);
  std::optional<Batch> next();
  std::size_t num_batches() const;

 private:
  const Dataset& ds_;
  std::size_t batch_size_;
  bool augment_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng aug_rng_;
};

}  // namespace coswin::data
