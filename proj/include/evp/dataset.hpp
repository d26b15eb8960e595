#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "evp/tensor.hpp"

namespace evp {

/// Images stored as 8-bit planes (N x C x H x W) with integer labels. Pixel
/// value v maps to v / 255 in the model's input domain.
struct Dataset {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t classes = 10;
  std::string split;
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return channels * height * width; }
  Shape image_shape() const { return {channels, height, width}; }

  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> out(classes, 0);
    for (int l : labels) ++out[static_cast<std::size_t>(l)];
    return out;
  }

  void validate() const {
    if (pixels.size() != labels.size() * image_bytes()) throw DimensionError("dataset pixel buffer size mismatch");
    for (int l : labels)
      if (l < 0 || static_cast<std::size_t>(l) >= classes) throw DimensionError("label out of range");
  }

  bool operator==(const Dataset&) const = default;
};

inline constexpr std::size_t kCifarRecordBytes = 3073;

/// Reads CIFAR-10 binary batches: each record is one label byte followed by
/// 3072 pixel bytes (R, G, B planes of 32x32, row-major).
inline Dataset load_cifar10(const std::vector<std::filesystem::path>& paths, std::string split = "") {
  Dataset ds;
  ds.split = std::move(split);
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() % kCifarRecordBytes != 0) {
      throw FormatError(path.string() + ": truncated record at offset " +
                        std::to_string(buf.size() - buf.size() % kCifarRecordBytes) + " (file size " +
                        std::to_string(buf.size()) + " is not a multiple of 3073)");
    }
    const std::size_t n = buf.size() / kCifarRecordBytes;
    ds.pixels.reserve(ds.pixels.size() + n * 3072);
    for (std::size_t r = 0; r < n; ++r) {
      const std::size_t off = r * kCifarRecordBytes;
      const auto label = static_cast<std::uint8_t>(buf[off]);
      if (label > 9) {
        throw FormatError(path.string() + ": label byte " + std::to_string(label) + " > 9 at offset " +
                          std::to_string(off));
      }
      ds.labels.push_back(label);
      const auto* p = reinterpret_cast<const std::uint8_t*>(buf.data() + off + 1);
      ds.pixels.insert(ds.pixels.end(), p, p + 3072);
    }
  }
  return ds;
}

inline std::vector<std::filesystem::path> cifar10_files(const std::filesystem::path& dir, bool train) {
  std::vector<std::filesystem::path> out;
  if (train) {
    for (int i = 1; i <= 5; ++i) out.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  } else {
    out.push_back(dir / "test_batch.bin");
  }
  return out;
}

/// Writes a dataset in the same record layout (label byte + planes). Labels
/// must fit in one byte.
inline void write_records(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] > 255) throw FormatError("label does not fit in a record byte");
    const char l = static_cast<char>(ds.labels[i]);
    out.write(&l, 1);
    out.write(reinterpret_cast<const char*>(ds.image(i).data()), static_cast<std::streamsize>(ds.image_bytes()));
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

/// Reads a record file with arbitrary geometry and class count.
inline Dataset read_records(const std::filesystem::path& path, std::size_t channels, std::size_t height,
                            std::size_t width, std::size_t classes) {
  Dataset ds;
  ds.channels = channels;
  ds.height = height;
  ds.width = width;
  ds.classes = classes;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::size_t rec = 1 + ds.image_bytes();
  if (buf.size() % rec != 0) throw FormatError(path.string() + ": truncated record file");
  for (std::size_t off = 0; off < buf.size(); off += rec) {
    const auto label = static_cast<std::uint8_t>(buf[off]);
    if (label >= classes) throw FormatError(path.string() + ": label out of range at offset " + std::to_string(off));
    ds.labels.push_back(label);
    const auto* p = reinterpret_cast<const std::uint8_t*>(buf.data() + off + 1);
    ds.pixels.insert(ds.pixels.end(), p, p + ds.image_bytes());
  }
  return ds;
}

/// Two-class synthetic set: filled rectangles (label 0) versus filled
/// ellipses (label 1) at random position, size and rotation, over a textured
/// background with per-pixel noise of amplitude `noise`.
inline Dataset synth_shapes(std::size_t n, std::uint64_t seed, double noise, std::size_t size = 32) {
  if (n < 2) throw std::invalid_argument("synth_shapes needs n >= 2");
  Dataset ds;
  ds.classes = 2;
  ds.height = ds.width = size;
  ds.split = "synth";
  ds.pixels.resize(n * ds.image_bytes());
  ds.labels.resize(n);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double s = static_cast<double>(size);
  std::vector<double> fg(3), bg(3);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % 2);
    ds.labels[i] = label;
    const double cx = s * (0.4 + 0.2 * u(rng)), cy = s * (0.4 + 0.2 * u(rng));
    const double a = s * (0.22 + 0.12 * u(rng)), b = s * (0.22 + 0.12 * u(rng));
    const double angle = (u(rng) - 0.5) * 0.6;
    const double ca = std::cos(angle), sa = std::sin(angle);
    for (std::size_t c = 0; c < 3; ++c) {
      fg[c] = 0.65 + 0.35 * u(rng);
      bg[c] = 0.25 * u(rng);
    }
    std::uint8_t* img = ds.pixels.data() + i * ds.image_bytes();
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        const double rx = (ca * dx + sa * dy) / a, ry = (-sa * dx + ca * dy) / b;
        const bool inside = label == 0 ? (std::abs(rx) <= 1.0 && std::abs(ry) <= 1.0) : (rx * rx + ry * ry <= 1.0);
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = (inside ? fg[c] : bg[c]) + noise * (2.0 * u(rng) - 1.0);
          img[(c * size + y) * size + x] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
        }
      }
  }
  return ds;
}

inline Dataset select(const Dataset& ds, std::span<const std::size_t> indices) {
  Dataset out = ds;
  out.pixels.clear();
  out.labels.clear();
  out.pixels.reserve(indices.size() * ds.image_bytes());
  for (std::size_t i : indices) {
    if (i >= ds.size()) throw std::out_of_range("dataset index out of range");
    auto img = ds.image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(ds.labels[i]);
  }
  return out;
}

/// Class-balanced seeded subsample: n / classes per class, the remainder
/// spread over the lowest class indices. Order is shuffled.
inline Dataset subset(const Dataset& ds, std::size_t n, std::uint64_t seed) {
  if (n > ds.size()) throw std::invalid_argument("subset of " + std::to_string(n) + " exceeds dataset size " +
                                                 std::to_string(ds.size()));
  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[static_cast<std::size_t>(ds.labels[i])].push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> picked;
  for (std::size_t c = 0; c < ds.classes; ++c) {
    const std::size_t want = n / ds.classes + (c < n % ds.classes ? 1 : 0);
    if (want > by_class[c].size()) {
      throw std::invalid_argument("subset: class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                                  " examples, " + std::to_string(want) + " requested");
    }
    std::shuffle(by_class[c].begin(), by_class[c].end(), rng);
    picked.insert(picked.end(), by_class[c].begin(), by_class[c].begin() + static_cast<long>(want));
  }
  std::shuffle(picked.begin(), picked.end(), rng);
  return select(ds, picked);
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;
};

/// Per-channel mean and population standard deviation over [0,1] pixels.
inline ChannelStats normalize_stats(const Dataset& ds) {
  ChannelStats s{std::vector<double>(ds.channels, 0.0), std::vector<double>(ds.channels, 0.0)};
  const std::size_t plane = ds.height * ds.width;
  const double count = static_cast<double>(ds.size() * plane);
  if (count == 0) throw std::invalid_argument("normalize_stats on an empty dataset");
  std::vector<std::uint64_t> sums(ds.channels, 0);
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t c = 0; c < ds.channels; ++c) {
      const std::uint8_t* p = ds.pixels.data() + i * ds.image_bytes() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) sums[c] += p[j];
    }
  for (std::size_t c = 0; c < ds.channels; ++c) s.mean[c] = static_cast<double>(sums[c]) / count / 255.0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t c = 0; c < ds.channels; ++c) {
      const std::uint8_t* p = ds.pixels.data() + i * ds.image_bytes() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double d = p[j] / 255.0 - s.mean[c];
        s.stddev[c] += d * d;
      }
    }
  for (auto& v : s.stddev) v = std::sqrt(v / count);
  return s;
}

template <typename T>
Tensor<T> images_to_tensor(const Dataset& ds, std::span<const std::size_t> indices) {
  Tensor<T> out({indices.size(), ds.channels, ds.height, ds.width});
  auto o = out.data();
  const std::size_t ib = ds.image_bytes();
  for (std::size_t k = 0; k < indices.size(); ++k) {
    auto img = ds.image(indices[k]);
    for (std::size_t j = 0; j < ib; ++j) o[k * ib + j] = static_cast<T>(img[j]) / T(255);
  }
  return out;
}

template <typename T>
struct Batch {
  Tensor<T> images;
  std::vector<int> labels;
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  Batch<T> b{images_to_tensor<T>(ds, indices), {}};
  for (std::size_t i : indices) b.labels.push_back(ds.labels[i]);
  return b;
}

template <typename T>
Batch<T> make_batch(const Dataset& ds, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> idx(std::min(count, ds.size() - begin));
  std::iota(idx.begin(), idx.end(), begin);
  return make_batch<T>(ds, idx);
}

/// Standard CIFAR augmentation in place: random horizontal flip and a random
/// crop from the image zero-padded by `pad` pixels.
template <typename T>
void augment(Tensor<T>& images, std::mt19937_64& rng, bool flip = true, std::size_t pad = 4) {
  const auto& s = images.shape();
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  std::uniform_int_distribution<int> coin(0, 1);
  std::uniform_int_distribution<long> shift(-static_cast<long>(pad), static_cast<long>(pad));
  std::vector<T> tmp(c * h * w);
  auto d = images.data();
  for (std::size_t i = 0; i < n; ++i) {
    const bool f = flip && coin(rng);
    const long dy = pad ? shift(rng) : 0, dx = pad ? shift(rng) : 0;
    T* img = d.data() + i * c * h * w;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const long sy = static_cast<long>(y) + dy;
          long sx = static_cast<long>(x) + dx;
          if (f) sx = static_cast<long>(w) - 1 - sx;
          const bool in = sy >= 0 && sx >= 0 && sy < static_cast<long>(h) && sx < static_cast<long>(w);
          tmp[(ch * h + y) * w + x] = in ? img[(ch * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)] : T(0);
        }
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

}  // namespace evp
