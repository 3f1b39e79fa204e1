#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpr/rng.hpp"
#include "adpr/tensor.hpp"

namespace adpr {

/// One image [3,H,W] in [0,1] with its identity and k binary attributes.
struct Sample {
  Tensor<float> image;
  std::size_t identity = 0;
  std::vector<std::uint8_t> attributes;
};

struct LabeledDataset {
  std::vector<Sample> samples;
  std::size_t classes = 0;
  std::size_t attributes = 0;
  std::string provenance;
  /// source_identity[c] is the identity label of class c in the dataset it came from.
  std::vector<std::size_t> source_identity;

  std::size_t size() const noexcept { return samples.size(); }
  std::size_t height() const { return samples.empty() ? 0 : samples.front().image.dim(1); }
  std::size_t width() const { return samples.empty() ? 0 : samples.front().image.dim(2); }

  std::set<std::size_t> source_identities() const {
    return {source_identity.begin(), source_identity.end()};
  }

  /// Checks the dataset invariants; throws std::invalid_argument naming the first violation.
  void validate() const {
    if (samples.empty()) throw std::invalid_argument("dataset has no samples");
    std::vector<bool> seen(classes, false);
    const Shape shape = samples.front().image.shape();
    if (shape.size() != 3 || shape[0] != 3) throw ShapeError("images must be [3,H,W], got " + to_string(shape));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const Sample& s = samples[i];
      if (s.identity >= classes) throw std::invalid_argument("sample " + std::to_string(i) + ": identity out of range");
      if (s.attributes.size() != attributes) {
        throw std::invalid_argument("sample " + std::to_string(i) + ": attribute count differs from k");
      }
      for (std::uint8_t a : s.attributes) {
        if (a > 1) throw std::invalid_argument("sample " + std::to_string(i) + ": attribute is not binary");
      }
      if (s.image.shape() != shape) throw ShapeError("sample " + std::to_string(i) + ": image shape differs");
      for (float v : s.image.values()) {
        if (!(v >= 0.0f && v <= 1.0f)) throw std::invalid_argument("sample " + std::to_string(i) + ": pixel outside [0,1]");
      }
      seen[s.identity] = true;
    }
    for (std::size_t c = 0; c < classes; ++c) {
      if (!seen[c]) throw std::invalid_argument("identity " + std::to_string(c) + " has no samples");
    }
    if (source_identity.size() != classes) throw std::invalid_argument("source identity map has wrong length");
  }
};

enum class SplitMode { closed, open };

inline std::string to_string(SplitMode m) { return m == SplitMode::closed ? "closed" : "open"; }

struct DatasetSplit {
  LabeledDataset train;
  LabeledDataset eval;
  SplitMode mode = SplitMode::closed;
  std::vector<std::size_t> train_indices;  // into the source dataset
  std::vector<std::size_t> eval_indices;
};

/// c == 0 for a genuine pair, 1 for an impostor pair.
struct Pair {
  std::size_t i = 0;
  std::size_t j = 0;
  int c = 0;
};
using PairBatch = std::vector<Pair>;

struct SynthSpec {
  std::size_t classes = 16;
  std::size_t images_per_identity = 20;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t attributes = 2;
  /// classes rows of `attributes` bits. Empty means "derive": attribute t of
  /// identity c is bit t of c.
  std::vector<std::vector<std::uint8_t>> attribute_assignment;
  double noise_std = 0.5;
  double attribute_signal = 0.5;
  double identity_signal = 0.3;

  void validate() const {
    if (classes * images_per_identity == 0) throw std::invalid_argument("synth: C * images_per_identity must be > 0");
    if (height < 4 || width < 4) throw std::invalid_argument("synth: H and W must be >= 4");
    if (!(noise_std >= 0.0)) throw std::invalid_argument("synth: noise_std must be >= 0");
    if (!(attribute_signal >= 0.0 && attribute_signal <= 1.0)) {
      throw std::invalid_argument("synth: attribute_signal must lie in [0,1]");
    }
    if (!(identity_signal >= 0.0 && identity_signal <= 1.0)) {
      throw std::invalid_argument("synth: identity_signal must lie in [0,1]");
    }
    if (!attribute_assignment.empty()) {
      if (attribute_assignment.size() != classes) {
        throw std::invalid_argument("synth: attribute_assignment must have C rows");
      }
      for (std::size_t c = 0; c < classes; ++c) {
        if (attribute_assignment[c].size() != attributes) {
          throw std::invalid_argument("synth: attribute_assignment row " + std::to_string(c) + " must have k bits");
        }
        for (auto b : attribute_assignment[c]) {
          if (b > 1) throw std::invalid_argument("synth: attribute_assignment row " + std::to_string(c) + " is not binary");
        }
      }
    }
  }

  /// The per-identity attribute rows actually used.
  std::vector<std::vector<std::uint8_t>> resolved_assignment() const {
    if (!attribute_assignment.empty()) return attribute_assignment;
    std::vector<std::vector<std::uint8_t>> rows(classes, std::vector<std::uint8_t>(attributes));
    for (std::size_t c = 0; c < classes; ++c) {
      for (std::size_t t = 0; t < attributes; ++t) rows[c][t] = static_cast<std::uint8_t>((c >> t) & 1U);
    }
    return rows;
  }
};

inline void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = nlohmann::json{{"C", s.classes},
                     {"images_per_identity", s.images_per_identity},
                     {"H", s.height},
                     {"W", s.width},
                     {"k", s.attributes},
                     {"attribute_assignment", s.resolved_assignment()},
                     {"noise_std", s.noise_std},
                     {"attribute_signal", s.attribute_signal},
                     {"identity_signal", s.identity_signal}};
}

namespace detail {

// Smooth pattern: a coarse grid of values per channel, bilinearly upsampled.
inline Tensor<float> low_frequency_pattern(Rng& rng, std::size_t h, std::size_t w, std::size_t grid, double lo,
                                           double hi) {
  std::vector<double> coarse(3 * grid * grid);
  for (double& v : coarse) v = rng.uniform(lo, hi);
  Tensor<float> out({3, h, w});
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      const double gy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * static_cast<double>(grid - 1);
      const std::size_t y0 = std::min(static_cast<std::size_t>(gy), grid - 2);
      const double fy = gy - static_cast<double>(y0);
      for (std::size_t x = 0; x < w; ++x) {
        const double gx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * static_cast<double>(grid - 1);
        const std::size_t x0 = std::min(static_cast<std::size_t>(gx), grid - 2);
        const double fx = gx - static_cast<double>(x0);
        const double* g = coarse.data() + c * grid * grid;
        const double v = (1 - fy) * ((1 - fx) * g[y0 * grid + x0] + fx * g[y0 * grid + x0 + 1]) +
                         fy * ((1 - fx) * g[(y0 + 1) * grid + x0] + fx * g[(y0 + 1) * grid + x0 + 1]);
        out[(c * h + y) * w + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

inline constexpr std::size_t kTemplateGrid = 5;
inline constexpr std::uint64_t kMotifStream = 0x4d4f544946ULL;
inline constexpr std::uint64_t kIdentityStream = 0x4944000000ULL;
inline constexpr std::uint64_t kSampleStream = 0x53414d0000000ULL;

}  // namespace detail

/// Synthetic identities: pixel = 0.5 + identity_signal*(template - 0.5)
///   + attribute_signal * sum_t a_t * motif_t + noise_std * N(0,1), clipped to [0,1].
/// Templates are per identity, motifs are shared by all identities, and every
/// random stream is derived from (seed, role, index).
inline LabeledDataset generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t h = spec.height, w = spec.width, k = spec.attributes;
  const auto assignment = spec.resolved_assignment();

  std::vector<Tensor<float>> motifs;
  for (std::size_t t = 0; t < k; ++t) {
    Rng rng(derive_seed(seed, detail::kMotifStream + t));
    motifs.push_back(detail::low_frequency_pattern(rng, h, w, detail::kTemplateGrid, -0.5, 0.5));
  }

  LabeledDataset ds;
  ds.classes = spec.classes;
  ds.attributes = k;
  ds.provenance = "synthetic:" + nlohmann::json(spec).dump() + ";seed=" + std::to_string(seed);
  ds.source_identity.resize(spec.classes);
  ds.samples.reserve(spec.classes * spec.images_per_identity);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    ds.source_identity[c] = c;
    Rng id_rng(derive_seed(seed, detail::kIdentityStream + c));
    Tensor<float> base = detail::low_frequency_pattern(id_rng, h, w, detail::kTemplateGrid, 0.0, 1.0);
    for (float& v : base.values()) v = static_cast<float>(0.5 + spec.identity_signal * (v - 0.5));
    for (std::size_t t = 0; t < k; ++t) {
      if (!assignment[c][t]) continue;
      for (std::size_t p = 0; p < base.size(); ++p) {
        base[p] += static_cast<float>(spec.attribute_signal) * motifs[t][p];
      }
    }
    for (std::size_t n = 0; n < spec.images_per_identity; ++n) {
      const std::size_t index = c * spec.images_per_identity + n;
      Rng rng(derive_seed(seed, detail::kSampleStream + index));
      Sample s;
      s.image = base;
      for (float& v : s.image.values()) {
        const double noisy = static_cast<double>(v) + spec.noise_std * rng.normal();
        v = static_cast<float>(std::clamp(noisy, 0.0, 1.0));
      }
      s.identity = c;
      s.attributes = assignment[c];
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

namespace detail {

// Subset with classes re-indexed densely in order of first appearance in `indices`
// sorted by original class.
inline LabeledDataset subset(const LabeledDataset& ds, const std::vector<std::size_t>& indices,
                             const std::string& tag) {
  std::set<std::size_t> classes;
  for (std::size_t i : indices) classes.insert(ds.samples.at(i).identity);
  std::map<std::size_t, std::size_t> remap;
  LabeledDataset out;
  for (std::size_t c : classes) {
    remap[c] = out.source_identity.size();
    out.source_identity.push_back(ds.source_identity.at(c));
  }
  out.classes = classes.size();
  out.attributes = ds.attributes;
  out.provenance = ds.provenance + ";" + tag;
  out.samples.reserve(indices.size());
  for (std::size_t i : indices) {
    Sample s = ds.samples[i];
    s.identity = remap[s.identity];
    out.samples.push_back(std::move(s));
  }
  return out;
}

// Closed-world subsets keep the full class index space so labels stay aligned with the softmax.
inline LabeledDataset subset_same_classes(const LabeledDataset& ds, const std::vector<std::size_t>& indices,
                                          const std::string& tag) {
  LabeledDataset out;
  out.classes = ds.classes;
  out.attributes = ds.attributes;
  out.source_identity = ds.source_identity;
  out.provenance = ds.provenance + ";" + tag;
  for (std::size_t i : indices) out.samples.push_back(ds.samples.at(i));
  return out;
}

inline std::vector<std::vector<std::size_t>> indices_by_identity(const LabeledDataset& ds) {
  std::vector<std::vector<std::size_t>> by(ds.classes);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) by.at(ds.samples[i].identity).push_back(i);
  return by;
}

}  // namespace detail

/// Per-identity stratified split; every identity keeps at least one training sample.
inline DatasetSplit split_closed_world(const LabeledDataset& ds, double eval_fraction, std::uint64_t seed) {
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) {
    throw std::invalid_argument("split_closed_world: eval_fraction must lie in (0,1)");
  }
  const auto by = detail::indices_by_identity(ds);
  DatasetSplit split;
  split.mode = SplitMode::closed;
  Rng rng(derive_seed(seed, 0x636c6f736564ULL));
  for (std::size_t c = 0; c < by.size(); ++c) {
    std::vector<std::size_t> idx = by[c];
    if (idx.size() < 2) {
      throw std::invalid_argument("split_closed_world: identity " + std::to_string(c) + " has fewer than 2 samples");
    }
    rng.shuffle(idx.begin(), idx.end());
    const auto wanted = static_cast<std::size_t>(std::llround(static_cast<double>(idx.size()) * eval_fraction));
    const std::size_t n_eval = std::min(wanted, idx.size() - 1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      (i < n_eval ? split.eval_indices : split.train_indices).push_back(idx[i]);
    }
  }
  std::sort(split.train_indices.begin(), split.train_indices.end());
  std::sort(split.eval_indices.begin(), split.eval_indices.end());
  if (split.eval_indices.empty()) throw std::invalid_argument("split_closed_world: evaluation side is empty");
  split.train = detail::subset_same_classes(ds, split.train_indices, "closed-train");
  split.eval = detail::subset_same_classes(ds, split.eval_indices, "closed-eval");
  return split;
}

/// Identity-disjoint split with an explicit list of evaluation identities (class indices of `ds`).
inline DatasetSplit split_by_identity(const LabeledDataset& ds, const std::set<std::size_t>& eval_classes) {
  DatasetSplit split;
  split.mode = SplitMode::open;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    (eval_classes.contains(ds.samples[i].identity) ? split.eval_indices : split.train_indices).push_back(i);
  }
  if (split.train_indices.empty() || split.eval_indices.empty()) {
    throw std::invalid_argument("open-world split leaves one side empty");
  }
  split.train = detail::subset(ds, split.train_indices, "open-train");
  split.eval = detail::subset(ds, split.eval_indices, "open-eval");
  return split;
}

/// The samples of the given identities (class indices of `ds`), re-indexed densely.
inline LabeledDataset select_identities(const LabeledDataset& ds, const std::set<std::size_t>& classes,
                                        const std::string& tag) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    if (classes.contains(ds.samples[i].identity)) idx.push_back(i);
  }
  if (idx.empty()) throw std::invalid_argument("select_identities: no samples for the requested identities");
  return detail::subset(ds, idx, tag);
}

/// Partitions identities at random; round(C * fraction) go to evaluation.
inline DatasetSplit split_open_world(const LabeledDataset& ds, double eval_subject_fraction, std::uint64_t seed) {
  if (!(eval_subject_fraction > 0.0 && eval_subject_fraction < 1.0)) {
    throw std::invalid_argument("split_open_world: eval_subject_fraction must lie in (0,1)");
  }
  if (ds.classes < 2) throw std::invalid_argument("split_open_world: needs at least 2 identities");
  Rng rng(derive_seed(seed, 0x6f70656eULL));
  const auto order = rng.permutation(ds.classes);
  const auto n_eval = static_cast<std::size_t>(std::llround(static_cast<double>(ds.classes) * eval_subject_fraction));
  if (n_eval == 0 || n_eval == ds.classes) throw std::invalid_argument("split_open_world: resulting side is empty");
  return split_by_identity(ds, std::set<std::size_t>(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_eval)));
}

inline void to_json(nlohmann::json& j, const DatasetSplit& s) {
  j = nlohmann::json{{"mode", to_string(s.mode)},
                     {"train_indices", s.train_indices},
                     {"eval_indices", s.eval_indices},
                     {"train_identities", s.train.source_identity},
                     {"eval_identities", s.eval.source_identity}};
}

/// round(n * genuine_fraction) genuine pairs, the rest impostor, in shuffled order.
/// `identities[i]` is the class of sample i.
inline PairBatch sample_pairs(std::span<const std::size_t> identities, std::size_t n_pairs, double genuine_fraction,
                              std::uint64_t seed) {
  if (!(genuine_fraction >= 0.0 && genuine_fraction <= 1.0)) {
    throw std::invalid_argument("sample_pairs: genuine_fraction must lie in [0,1]");
  }
  const auto n_gen = static_cast<std::size_t>(std::llround(static_cast<double>(n_pairs) * genuine_fraction));
  const std::size_t n_imp = n_pairs - n_gen;
  std::map<std::size_t, std::vector<std::size_t>> by;
  for (std::size_t i = 0; i < identities.size(); ++i) by[identities[i]].push_back(i);
  std::vector<std::size_t> eligible;  // samples whose identity has a second sample
  for (const auto& [id, idx] : by) {
    if (idx.size() >= 2) eligible.insert(eligible.end(), idx.begin(), idx.end());
  }
  std::sort(eligible.begin(), eligible.end());
  if (n_gen > 0 && eligible.empty()) throw std::invalid_argument("sample_pairs: no identity has two samples");
  if (n_imp > 0 && by.size() < 2) throw std::invalid_argument("sample_pairs: impostor pairs need two identities");

  Rng rng(derive_seed(seed, 0x7061697273ULL));
  PairBatch out;
  out.reserve(n_pairs);
  for (std::size_t p = 0; p < n_gen; ++p) {
    const std::size_t i = eligible[rng.below(eligible.size())];
    const auto& same = by.at(identities[i]);
    std::size_t j = i;
    while (j == i) j = same[rng.below(same.size())];
    out.push_back({i, j, 0});
  }
  for (std::size_t p = 0; p < n_imp; ++p) {
    const std::size_t i = rng.below(identities.size());
    std::size_t j = i;
    while (identities[j] == identities[i]) j = rng.below(identities.size());
    out.push_back({i, j, 1});
  }
  rng.shuffle(out.begin(), out.end());
  return out;
}

inline std::vector<std::size_t> identities_of(const LabeledDataset& ds) {
  std::vector<std::size_t> ids;
  ids.reserve(ds.samples.size());
  for (const Sample& s : ds.samples) ids.push_back(s.identity);
  return ids;
}

inline PairBatch sample_pairs(const LabeledDataset& ds, std::size_t n_pairs, double genuine_fraction,
                              std::uint64_t seed) {
  return sample_pairs(identities_of(ds), n_pairs, genuine_fraction, seed);
}

/// Every unordered pair i < j, labelled from identities.
inline PairBatch all_pairs(std::span<const std::size_t> identities) {
  PairBatch out;
  const std::size_t n = identities.size();
  out.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) out.push_back({i, j, identities[i] == identities[j] ? 0 : 1});
  }
  return out;
}

inline PairBatch all_pairs(const LabeledDataset& ds) { return all_pairs(identities_of(ds)); }

struct NormalizationStats {
  std::array<double, 3> mean{0, 0, 0};
  std::array<double, 3> std{1, 1, 1};
};

inline constexpr double kStdFloor = 1e-6;

inline void to_json(nlohmann::json& j, const NormalizationStats& s) { j = {{"mean", s.mean}, {"std", s.std}}; }
inline void from_json(const nlohmann::json& j, NormalizationStats& s) {
  s.mean = j.at("mean").get<std::array<double, 3>>();
  s.std = j.at("std").get<std::array<double, 3>>();
}

/// Per-channel mean and (population) std over every training pixel; std floored at 1e-6.
inline NormalizationStats normalization_stats(const LabeledDataset& train) {
  if (train.samples.empty()) throw std::invalid_argument("normalization_stats: empty training set");
  NormalizationStats st;
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  std::size_t per_channel = 0;
  for (const Sample& s : train.samples) {
    const std::size_t plane = s.image.dim(1) * s.image.dim(2);
    for (std::size_t c = 0; c < 3; ++c) {
      const float* p = s.image.data() + c * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum[c] += p[i];
        sq[c] += static_cast<double>(p[i]) * p[i];
      }
    }
    per_channel += plane;
  }
  for (std::size_t c = 0; c < 3; ++c) {
    st.mean[c] = sum[c] / static_cast<double>(per_channel);
    const double var = std::max(0.0, sq[c] / static_cast<double>(per_channel) - st.mean[c] * st.mean[c]);
    st.std[c] = std::max(kStdFloor, std::sqrt(var));
  }
  return st;
}

/// (x - mean) / std per channel. Not idempotent: applying twice shifts again.
inline Tensor<float> apply_normalization(const Tensor<float>& image, const NormalizationStats& stats) {
  Tensor<float> out = image;
  const std::size_t plane = image.dim(1) * image.dim(2);
  for (std::size_t c = 0; c < 3; ++c) {
    float* p = out.data() + c * plane;
    const auto mean = static_cast<float>(stats.mean[c]);
    const auto inv = static_cast<float>(1.0 / stats.std[c]);
    for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean) * inv;
  }
  return out;
}

/// Normalized, stacked view of a dataset that the trainer consumes.
struct PreparedSet {
  Tensor<float> images;        // [N,3,H,W]
  std::vector<std::size_t> labels;
  Tensor<float> attributes;    // [N,k]
  std::size_t classes = 0;
  std::vector<std::size_t> source_identity;  // class -> identity in the generating dataset

  std::size_t size() const noexcept { return labels.size(); }

  Tensor<float> batch_images(std::span<const std::size_t> idx) const {
    const std::size_t per = images.size() / std::max<std::size_t>(1, labels.size());
    Shape s = images.shape();
    s[0] = idx.size();
    Tensor<float> out(s);
    for (std::size_t b = 0; b < idx.size(); ++b) std::copy_n(images.data() + idx[b] * per, per, out.data() + b * per);
    return out;
  }
  std::vector<std::size_t> batch_labels(std::span<const std::size_t> idx) const {
    std::vector<std::size_t> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(labels[i]);
    return out;
  }
  Tensor<float> batch_attributes(std::span<const std::size_t> idx) const {
    const std::size_t k = attributes.rank() == 2 ? attributes.dim(1) : 0;
    Tensor<float> out({idx.size(), k});
    for (std::size_t b = 0; b < idx.size(); ++b) std::copy_n(attributes.data() + idx[b] * k, k, out.data() + b * k);
    return out;
  }
};

/// Throws if the two sets share any source identity.
inline void require_identity_disjoint(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  const std::set<std::size_t> sa(a.begin(), a.end());
  for (std::size_t id : b) {
    if (sa.contains(id)) throw std::invalid_argument("identity " + std::to_string(id) + " appears in both sets");
  }
}

inline PreparedSet prepare(const LabeledDataset& ds, const NormalizationStats& stats) {
  if (ds.samples.empty()) throw std::invalid_argument("prepare: empty dataset");
  PreparedSet p;
  const Shape s = ds.samples.front().image.shape();
  const std::size_t per = element_count(s);
  p.images = Tensor<float>({ds.samples.size(), s[0], s[1], s[2]});
  p.attributes = Tensor<float>({ds.samples.size(), ds.attributes});
  p.classes = ds.classes;
  p.source_identity = ds.source_identity;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& smp = ds.samples[i];
    if (smp.image.shape() != s) throw ShapeError("prepare: sample " + std::to_string(i) + " has a different image shape");
    const Tensor<float> norm = apply_normalization(smp.image, stats);
    std::copy_n(norm.data(), per, p.images.data() + i * per);
    p.labels.push_back(smp.identity);
    for (std::size_t t = 0; t < ds.attributes; ++t) p.attributes[i * ds.attributes + t] = smp.attributes[t];
  }
  return p;
}

}  // namespace adpr
