// Datasets: synthetic class-template images and the CIFAR-10 binary format.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cml/tensor.hpp"

namespace cml::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images stored contiguously as (N, C, H, W) float.
struct Dataset {
  std::string name;
  std::size_t channels = 0, height = 0, width = 0, n_classes = 0;
  std::vector<float> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }

  /// Gathers the given samples into a (1, B, C, H, W) tensor.
  template <typename S>
  Tensor5<S> batch(std::span<const std::size_t> idx) const {
    Tensor5<S> t({1, idx.size(), channels, height, width});
    const std::size_t n = image_size();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const float* src = pixels.data() + idx[b] * n;
      std::copy(src, src + n, t.data() + b * n);
    }
    return t;
  }
  std::vector<int> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) out[b] = labels[idx[b]];
    return out;
  }
};

struct Split {
  Dataset train;
  Dataset test;
};

// ---------------------------------------------------------------------------
// Synthetic

struct SynthSpec {
  std::size_t n_classes = 4;
  std::size_t channels = 1;
  std::size_t image_size = 8;
  std::size_t samples_per_class = 32;
  std::size_t test_per_class = 16;
  double noise = 0.0;
  std::uint64_t seed = 0;

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

struct SynthData {
  Split split;
  /// One template per class, (C·H·W) each.
  std::vector<std::vector<float>> templates;
};

/// Class templates drawn from N(0,1); samples are template + noise·N(0,1).
/// Samples are interleaved by class.
inline SynthData gen_synthetic(const SynthSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const std::size_t n = spec.channels * spec.image_size * spec.image_size;
  SynthData out;
  out.templates.assign(spec.n_classes, std::vector<float>(n));
  for (auto& tpl : out.templates)
    for (auto& v : tpl) v = static_cast<float>(nd(rng));

  auto fill = [&](Dataset& d, std::size_t per_class, const char* name) {
    d.name = name;
    d.channels = spec.channels;
    d.height = d.width = spec.image_size;
    d.n_classes = spec.n_classes;
    d.pixels.reserve(per_class * spec.n_classes * n);
    for (std::size_t s = 0; s < per_class; ++s)
      for (std::size_t c = 0; c < spec.n_classes; ++c) {
        for (std::size_t i = 0; i < n; ++i)
          d.pixels.push_back(static_cast<float>(out.templates[c][i] + spec.noise * nd(rng)));
        d.labels.push_back(static_cast<int>(c));
      }
  };
  fill(out.split.train, spec.samples_per_class, "synth-train");
  fill(out.split.test, spec.test_per_class, "synth-test");
  return out;
}

/// Accuracy of assigning each sample to its nearest class template
/// (Euclidean); the Bayes-style difficulty reference for a synthetic set.
inline double nearest_template_accuracy(const Dataset& d, const std::vector<std::vector<float>>& templates) {
  if (d.size() == 0) return 0.0;
  std::size_t correct = 0;
  const std::size_t n = d.image_size();
  for (std::size_t s = 0; s < d.size(); ++s) {
    const float* img = d.pixels.data() + s * n;
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < templates.size(); ++c) {
      double dist = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const double diff = img[i] - templates[c][i];
        dist += diff * diff;
      }
      if (dist < best_d) {
        best_d = dist;
        best = c;
      }
    }
    if (static_cast<int>(best) == d.labels[s]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: records of 1 label byte + 3072 pixel bytes (CHW).

inline constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarImageBytes;
inline constexpr std::size_t kCifarRecordsPerFile = 10000;
inline constexpr std::array<const char*, 5> kCifarTrainFiles = {"data_batch_1.bin", "data_batch_2.bin",
                                                                "data_batch_3.bin", "data_batch_4.bin",
                                                                "data_batch_5.bin"};
inline constexpr const char* kCifarTestFile = "test_batch.bin";
inline constexpr std::array<float, 3> kCifarMean = {0.4914f, 0.4822f, 0.4465f};
inline constexpr std::array<float, 3> kCifarStd = {0.2470f, 0.2435f, 0.2616f};

struct CifarRecords {
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // kCifarImageBytes per record

  std::size_t size() const { return labels.size(); }
};

/// Reads one batch file, validating size and labels.
inline void read_cifar_file(const std::filesystem::path& file, CifarRecords& out) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cifar10: cannot open " + file.string());
  in.seekg(0, std::ios::end);
  const auto bytes = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  if (bytes % kCifarRecordBytes != 0) {
    throw DataError("cifar10: " + file.string() + " is truncated or corrupt (" + std::to_string(bytes) +
                    " bytes is not a multiple of " + std::to_string(kCifarRecordBytes) + ")");
  }
  const std::size_t n = bytes / kCifarRecordBytes;
  if (n != kCifarRecordsPerFile) {
    throw DataError("cifar10: " + file.string() + " holds " + std::to_string(n) + " records, expected " +
                    std::to_string(kCifarRecordsPerFile));
  }
  std::vector<std::uint8_t> buf(bytes);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes))) {
    throw DataError("cifar10: short read on " + file.string());
  }
  const std::size_t base = out.labels.size();
  out.labels.resize(base + n);
  out.pixels.resize((base + n) * kCifarImageBytes);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = buf.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw DataError("cifar10: " + file.string() + " record " + std::to_string(r) + " has label " +
                      std::to_string(rec[0]) + " outside [0,9]");
    }
    out.labels[base + r] = rec[0];
    std::copy(rec + 1, rec + kCifarRecordBytes, out.pixels.begin() + (base + r) * kCifarImageBytes);
  }
}

inline CifarRecords read_cifar10_raw(const std::filesystem::path& dir, bool train) {
  CifarRecords rec;
  if (train) {
    for (const char* f : kCifarTrainFiles) read_cifar_file(dir / f, rec);
  } else {
    read_cifar_file(dir / kCifarTestFile, rec);
  }
  return rec;
}

/// First `per_class` records of each class in file order (all if 0),
/// normalized per channel.
inline Dataset cifar_subset(const CifarRecords& rec, std::size_t per_class, std::string name) {
  Dataset d;
  d.name = std::move(name);
  d.channels = 3;
  d.height = d.width = 32;
  d.n_classes = 10;
  std::array<std::size_t, 10> taken{};
  for (std::size_t r = 0; r < rec.size(); ++r) {
    const int y = rec.labels[r];
    if (per_class != 0 && taken[y] >= per_class) continue;
    ++taken[y];
    d.labels.push_back(y);
    const std::uint8_t* px = rec.pixels.data() + r * kCifarImageBytes;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 1024; ++i)
        d.pixels.push_back((px[c * 1024 + i] / 255.0f - kCifarMean[c]) / kCifarStd[c]);
  }
  return d;
}

inline Split load_cifar10(const std::filesystem::path& dir, std::size_t train_per_class, std::size_t test_per_class) {
  Split s;
  s.train = cifar_subset(read_cifar10_raw(dir, true), train_per_class, "cifar10-train");
  s.test = cifar_subset(read_cifar10_raw(dir, false), test_per_class, "cifar10-test");
  return s;
}

}  // namespace cml::data
