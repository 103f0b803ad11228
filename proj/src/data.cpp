#include "coswin/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "coswin/errors.hpp"

namespace coswin::data {
namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const auto len = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<unsigned char> buf(static_cast<std::size_t>(len));
  in.read(reinterpret_cast<char*>(buf.data()), len);
  if (!in) throw DataError("short read on " + path);
  return buf;
}

std::uint32_t read_be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) |
         (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

}  // namespace

Dataset Dataset::subset(std::size_t n) const {
  if (n > size()) n = size();
  Dataset out = *this;
  out.images.assign(images.begin(),
                    images.begin() + static_cast<std::ptrdiff_t>(n * h * w * c));
  out.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

Dataset load_mnist_idx(const std::string& images_path, const std::string& labels_path) {
  const auto img = read_file(images_path);
  const auto lab = read_file(labels_path);
  if (img.size() < 16) throw DataError("image file too short: " + images_path);
  if (lab.size() < 8) throw DataError("label file too short: " + labels_path);

  const std::uint32_t img_magic = read_be32(img.data());
  if (img_magic != 0x00000803u) {
    throw DataError("bad image magic " + hex32(img_magic) + " in " + images_path +
                    " (want 0x00000803)");
  }
  const std::uint32_t lab_magic = read_be32(lab.data());
  if (lab_magic != 0x00000801u) {
    throw DataError("bad label magic " + hex32(lab_magic) + " in " + labels_path +
                    " (want 0x00000801)");
  }
  const std::size_t n = read_be32(img.data() + 4);
  const std::size_t rows = read_be32(img.data() + 8);
  const std::size_t cols = read_be32(img.data() + 12);
  const std::size_t n_lab = read_be32(lab.data() + 4);
  if (n != n_lab) {
    throw DataError("count mismatch: " + std::to_string(n) + " images vs " +
                    std::to_string(n_lab) + " labels");
  }
  if (img.size() != 16 + n * rows * cols) {
    throw DataError("image file length " + std::to_string(img.size()) + " != expected " +
                    std::to_string(16 + n * rows * cols) + " for " + images_path);
  }
  if (lab.size() != 8 + n) {
    throw DataError("label file length " + std::to_string(lab.size()) + " != expected " +
                    std::to_string(8 + n) + " for " + labels_path);
  }

  Dataset ds;
  ds.name = "mnist";
  ds.h = rows;
  ds.w = cols;
  ds.c = 1;
  ds.num_classes = 10;
  ds.allow_flip = false;
  ds.images.resize(n * rows * cols);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n * rows * cols; ++i) {
    ds.images[i] = static_cast<float>(img[16 + i]) / 255.0f;
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int y = lab[8 + i];
    if (y >= 10) throw DataError("label " + std::to_string(y) + " out of range at " +
                                 std::to_string(i));
    ds.labels[i] = y;
  }
  return ds;
}

Dataset load_cifar10_bin(const std::string& dir, const std::string& split) {
  std::vector<std::string> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) {
      files.push_back(dir + "/data_batch_" + std::to_string(i) + ".bin");
    }
  } else if (split == "test") {
    files.push_back(dir + "/test_batch.bin");
  } else {
    throw ContractError("load_cifar10_bin: split must be train or test, got " + split);
  }

  constexpr std::size_t kRecord = 3073;
  constexpr std::size_t kPlane = 1024;
  Dataset ds;
  ds.name = "cifar10";
  ds.split = split;
  ds.h = 32;
  ds.w = 32;
  ds.c = 3;
  ds.num_classes = 10;
  ds.allow_flip = true;

  for (const auto& path : files) {
    const auto buf = read_file(path);
    if (buf.size() == 0 || buf.size() % kRecord != 0) {
      throw DataError("file length " + std::to_string(buf.size()) +
                      " is not a multiple of 3073: " + path);
    }
    const std::size_t n = buf.size() / kRecord;
    const std::size_t base = ds.labels.size();
    ds.labels.resize(base + n);
    ds.images.resize((base + n) * 32 * 32 * 3);
    for (std::size_t r = 0; r < n; ++r) {
      const unsigned char* rec = buf.data() + r * kRecord;
      const int y = rec[0];
      if (y >= 10) {
        throw DataError("label " + std::to_string(y) + " out of range in " + path);
      }
      ds.labels[base + r] = y;
      float* img = ds.images.data() + (base + r) * 32 * 32 * 3;
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const unsigned char* plane = rec + 1 + ch * kPlane;
        for (std::size_t p = 0; p < kPlane; ++p) {
          img[p * 3 + ch] = static_cast<float>(plane[p]) / 255.0f;
        }
      }
    }
  }
  return ds;
}

Rect synthetic_pattern_rect(std::size_t h, std::size_t w, std::size_t k, int label) {
  const std::size_t g = static_cast<std::size_t>(
      std::ceil(std::sqrt(static_cast<double>(k))));
  const std::size_t cell_h = h / g, cell_w = w / g;
  const std::size_t gy = static_cast<std::size_t>(label) / g;
  const std::size_t gx = static_cast<std::size_t>(label) % g;
  Rect r;
  r.h = std::max<std::size_t>(3, cell_h > 2 ? cell_h - 2 : cell_h);
  r.w = std::max<std::size_t>(3, cell_w > 2 ? cell_w - 2 : cell_w);
  r.y0 = gy * cell_h + (cell_h - std::min(r.h, cell_h)) / 2;
  r.x0 = gx * cell_w + (cell_w - std::min(r.w, cell_w)) / 2;
  return r;
}

Dataset synthetic_dataset(std::uint64_t seed, std::size_t n, std::size_t h, std::size_t w,
                          std::size_t c, std::size_t k) {
  if (k == 0 || n < k) {
    throw ContractError("synthetic_dataset: need n >= k > 0, got n=" + std::to_string(n) +
                        " k=" + std::to_string(k));
  }
  Dataset ds;
  ds.name = "synthetic";
  ds.h = h;
  ds.w = w;
  ds.c = c;
  ds.num_classes = k;
  ds.allow_flip = false;
  ds.images.resize(n * h * w * c);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % k);
    ds.labels[i] = label;
    Rng rng = Rng::for_stream(seed, "synthetic-sample-" + std::to_string(i));
    float* img = ds.images.data() + i * h * w * c;
    for (std::size_t p = 0; p < h * w * c; ++p) {
      img[p] = static_cast<float>(rng.uniform(0.0, 0.25));
    }
    const Rect r = synthetic_pattern_rect(h, w, k, label);
    for (std::size_t y = r.y0; y < std::min(h, r.y0 + r.h); ++y) {
      for (std::size_t x = r.x0; x < std::min(w, r.x0 + r.w); ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          img[(y * w + x) * c + ch] = static_cast<float>(rng.uniform(0.7, 1.0));
        }
      }
    }
  }
  return ds;
}

std::pair<std::vector<double>, std::vector<double>> channel_stats(const Dataset& ds) {
  std::vector<double> mean(ds.c, 0.0), var(ds.c, 0.0);
  const std::size_t px = ds.size() * ds.h * ds.w;
  for (std::size_t i = 0; i < px; ++i) {
    for (std::size_t ch = 0; ch < ds.c; ++ch) mean[ch] += ds.images[i * ds.c + ch];
  }
  for (auto& m : mean) m /= static_cast<double>(px);
  for (std::size_t i = 0; i < px; ++i) {
    for (std::size_t ch = 0; ch < ds.c; ++ch) {
      const double d = ds.images[i * ds.c + ch] - mean[ch];
      var[ch] += d * d;
    }
  }
  std::vector<double> stddev(ds.c);
  for (std::size_t ch = 0; ch < ds.c; ++ch) {
    stddev[ch] = std::sqrt(var[ch] / static_cast<double>(px));
  }
  return {mean, stddev};
}

Dataset load_dataset(const DataConfig& cfg, const std::string& split) {
  Dataset ds;
  if (cfg.name == "mnist") {
    const std::string prefix = split == "train" ? "train" : "t10k";
    ds = load_mnist_idx(cfg.dir + "/" + prefix + "-images-idx3-ubyte",
                        cfg.dir + "/" + prefix + "-labels-idx1-ubyte");
    ds.split = split;
    ds.mean = {0.1307};
    ds.stddev = {0.3081};
  } else if (cfg.name == "cifar10") {
    ds = load_cifar10_bin(cfg.dir, split);
    ds.mean = {0.4914, 0.4822, 0.4465};
    ds.stddev = {0.2470, 0.2435, 0.2616};
  } else if (cfg.name == "synthetic") {
    // Independent streams per split so test samples differ from train.
    const std::uint64_t seed = cfg.synthetic_seed + (split == "test" ? 0x517cc1b7ull : 0);
    ds = synthetic_dataset(seed, cfg.synthetic_n, cfg.synthetic_h, cfg.synthetic_w,
                           cfg.synthetic_c, cfg.synthetic_classes);
    ds.split = split;
    ds.mean.assign(ds.c, 0.5);
    ds.stddev.assign(ds.c, 0.25);
  } else {
    throw ConfigError("unknown dataset name: " + cfg.name);
  }
  if (!cfg.mean.empty()) {
    if (cfg.mean.size() != ds.c || cfg.stddev.size() != ds.c) {
      throw ConfigError("normalization stats must have " + std::to_string(ds.c) +
                        " channels");
    }
    ds.mean = cfg.mean;
    ds.stddev = cfg.stddev;
  }
  for (double s : ds.stddev) {
    if (!(s > 0)) throw ConfigError("normalization std must be positive");
  }
  ds.crop_pad = cfg.augment_crop_pad;
  if (!cfg.augment_flip) ds.allow_flip = false;
  return ds;
}

BatchIterator::BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                             std::uint64_t epoch, bool shuffle, bool augment)
    : ds_(ds),
      batch_size_(batch_size),
      augment_(augment),
      aug_rng_(Rng::for_stream(seed, "augment-epoch-" + std::to_string(epoch))) {
  if (ds.size() == 0) throw ContractError("batch_iter: empty dataset");
  if (batch_size == 0) throw ContractError("batch_iter: batch_size must be >= 1");
  order_.resize(ds.size());
  for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  if (shuffle) {
    Rng rng = Rng::for_stream(seed, "shuffle-epoch-" + std::to_string(epoch));
    rng.shuffle(order_.begin(), order_.end());
  }
}

std::size_t BatchIterator::num_batches() const {
  return (ds_.size() + batch_size_ - 1) / batch_size_;
}

std::optional<Batch> BatchIterator::next() {
  if (cursor_ >= order_.size()) return std::nullopt;
  const std::size_t bsz = std::min(batch_size_, order_.size() - cursor_);
  const std::size_t h = ds_.h, w = ds_.w, c = ds_.c;
  Batch batch;
  batch.images = Tensor<float>::zeros({bsz, h, w, c});
  batch.labels.resize(bsz);
  auto out = batch.images.mutable_data();
  std::vector<float> work(h * w * c);
  for (std::size_t bi = 0; bi < bsz; ++bi) {
    const std::size_t si = order_[cursor_ + bi];
    batch.labels[bi] = ds_.labels[si];
    auto src = ds_.image(si);
    std::copy(src.begin(), src.end(), work.begin());

    if (augment_ && ds_.allow_flip && aug_rng_.bernoulli(0.5)) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w / 2; ++x) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            std::swap(work[(y * w + x) * c + ch], work[(y * w + (w - 1 - x)) * c + ch]);
          }
        }
      }
    }
    if (augment_ && ds_.crop_pad > 0) {
      const std::size_t pad = ds_.crop_pad;
      const auto dy = static_cast<std::int64_t>(aug_rng_.below(2 * pad + 1)) -
                      static_cast<std::int64_t>(pad);
      const auto dx = static_cast<std::int64_t>(aug_rng_.below(2 * pad + 1)) -
                      static_cast<std::int64_t>(pad);
      std::vector<float> shifted(h * w * c, 0.0f);
      for (std::size_t y = 0; y < h; ++y) {
        const std::int64_t sy = static_cast<std::int64_t>(y) + dy;
        if (sy < 0 || sy >= static_cast<std::int64_t>(h)) continue;
        for (std::size_t x = 0; x < w; ++x) {
          const std::int64_t sx = static_cast<std::int64_t>(x) + dx;
          if (sx < 0 || sx >= static_cast<std::int64_t>(w)) continue;
          std::memcpy(&shifted[(y * w + x) * c],
                      &work[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c],
                      c * sizeof(float));
        }
      }
      work.swap(shifted);
    }
    // normalization applied last
    float* dst = out.data() + bi * h * w * c;
    for (std::size_t p = 0; p < h * w; ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        dst[p * c + ch] = static_cast<float>(
            (work[p * c + ch] - ds_.mean[ch]) / ds_.stddev[ch]);
      }
    }
  }
  cursor_ += bsz;
  return batch;
}

}  // namespace coswin::data
