#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "adpr/dataset.hpp"
#include "adpr/model.hpp"
#include "adpr/rng.hpp"

namespace adpr::test {

/// Same graph as the default model at a size that trains in milliseconds.
inline ArchConfig tiny_arch(std::size_t classes = 4, std::size_t attributes = 2) {
  ArchConfig a;
  a.height = 16;
  a.width = 16;
  a.backbone = {{4, 3, true}, {8, 3, true}};
  a.pr_fc1_size = 32;
  a.pr_fc2_size = 16;
  a.sb_fc1_size = 16;
  a.sb_fc2_size = 8;
  a.jpr_fc_size = 16;
  a.classes = classes;
  a.attributes = attributes;
  return a;
}

inline SynthSpec tiny_synth(std::size_t classes = 4, std::size_t per_identity = 8, std::size_t attributes = 2) {
  SynthSpec s;
  s.classes = classes;
  s.images_per_identity = per_identity;
  s.height = 16;
  s.width = 16;
  s.attributes = attributes;
  return s;
}

inline PreparedSet tiny_prepared(std::size_t classes = 4, std::size_t per_identity = 8, std::uint64_t seed = 1) {
  const LabeledDataset ds = generate_synthetic(tiny_synth(classes, per_identity), seed);
  return prepare(ds, normalization_stats(ds));
}

/// Values in [-1, 1] spaced at least 2/(n-1) apart, in random order.
template <typename T>
Tensor<T> spaced_values(const Shape& shape, std::uint64_t seed) {
  Tensor<T> t(shape);
  const std::size_t n = t.size();
  Rng rng(seed);
  const auto order = rng.permutation(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[order[i]] = n == 1 ? T(0.5) : static_cast<T>(-1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1));
  }
  return t;
}

template <typename T>
Tensor<T> uniform_values(const Shape& shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(shape);
  Rng rng(seed);
  for (T& v : t.values()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("adpr_test_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& p) const { return path_ / p; }

 private:
  std::filesystem::path path_;
};

}  // namespace adpr::test
