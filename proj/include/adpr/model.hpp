#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "adpr/autodiff.hpp"
#include "adpr/rng.hpp"

namespace adpr {

/// One backbone stage: same-padded stride-1 convolution, ReLU, optional 2x2 max-pool.
struct ConvStage {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  bool pool = true;

  friend bool operator==(const ConvStage&, const ConvStage&) = default;
};

struct ArchConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t channels = 3;
  std::vector<ConvStage> backbone = {{16, 3, true}, {32, 3, true}, {64, 3, true}, {64, 3, true}};
  std::size_t pr_fc1_size = 2048;
  std::size_t pr_fc2_size = 1024;
  std::size_t sb_fc1_size = 512;
  std::size_t sb_fc2_size = 256;
  std::size_t jpr_fc_size = 512;
  std::size_t classes = 16;
  std::size_t attributes = 2;
  /// Weights start as U(-sqrt(init_scale/fan_in), sqrt(init_scale/fan_in)).
  double init_scale = 3.0;

  friend bool operator==(const ArchConfig&, const ArchConfig&) = default;

  std::size_t fusion_size() const { return sb_fc2_size + pr_fc2_size; }

  /// Backbone output as [channels, height, width].
  std::array<std::size_t, 3> backbone_output() const {
    std::size_t c = channels, h = height, w = width;
    for (const ConvStage& s : backbone) {
      c = s.out_channels;
      if (s.pool) {
        h /= 2;
        w /= 2;
      }
    }
    return {c, h, w};
  }

  std::size_t backbone_flat_dim() const {
    const auto o = backbone_output();
    return o[0] * o[1] * o[2];
  }

  void validate() const {
    auto positive = [](std::size_t v, const char* field) {
      if (v == 0) throw std::invalid_argument(std::string("arch.") + field + " must be >= 1");
    };
    positive(height, "height");
    positive(width, "width");
    positive(channels, "channels");
    if (!(init_scale > 0.0 && std::isfinite(init_scale))) throw std::invalid_argument("arch.init_scale must be positive");
    positive(pr_fc1_size, "pr_fc1_size");
    positive(pr_fc2_size, "pr_fc2_size");
    positive(sb_fc1_size, "sb_fc1_size");
    positive(sb_fc2_size, "sb_fc2_size");
    positive(jpr_fc_size, "jpr_fc_size");
    positive(classes, "classes");
    positive(attributes, "attributes");
    std::size_t h = height, w = width;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
      const ConvStage& s = backbone[i];
      const std::string field = "arch.backbone[" + std::to_string(i) + "]";
      if (s.out_channels == 0) throw std::invalid_argument(field + ".out_channels must be >= 1");
      if (s.kernel == 0 || s.kernel % 2 == 0) throw std::invalid_argument(field + ".kernel must be odd");
      if (s.pool) {
        if (h < 2 || w < 2) throw std::invalid_argument(field + ".pool: spatial size already below 2");
        h /= 2;
        w /= 2;
      }
    }
  }
};

/// Freezing units. Every parameter belongs to exactly one block.
inline constexpr std::array<std::string_view, 7> kBlocks = {"backbone", "pr_fc",    "pr_softmax", "sb_fc",
                                                            "sb_heads", "jpr_fc", "jpr_softmax"};

inline bool is_block_name(std::string_view name) {
  return std::find(kBlocks.begin(), kBlocks.end(), name) != kBlocks.end();
}

template <typename T>
struct Parameter {
  std::string name;
  std::string block;
  Tensor<T> value;
};

/// All trainable tensors, in a fixed construction order.
template <typename T>
class ParamStore {
 public:
  ParamStore() = default;
  explicit ParamStore(ArchConfig config) : config_(std::move(config)) {}

  const ArchConfig& config() const noexcept { return config_; }

  void add(std::string name, std::string block, Tensor<T> value) {
    if (!is_block_name(block)) throw std::invalid_argument("unknown block '" + block + "'");
    if (index_of(name) != npos) throw std::invalid_argument("duplicate parameter '" + name + "'");
    entries_.push_back({std::move(name), std::move(block), std::move(value)});
  }

  std::size_t size() const noexcept { return entries_.size(); }
  Parameter<T>& operator[](std::size_t i) { return entries_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return entries_[i]; }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name == name) return i;
    }
    return npos;
  }

  const Tensor<T>& at(std::string_view name) const {
    const std::size_t i = index_of(name);
    if (i == npos) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return entries_[i].value;
  }
  Tensor<T>& at(std::string_view name) {
    const std::size_t i = index_of(name);
    if (i == npos) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
    return entries_[i].value;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out(config_);
    for (const auto& e : entries_) out.add(e.name, e.block, e.value.template cast<U>());
    return out;
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (!(a.config_ == b.config_) || a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.block != y.block || !bitwise_equal(x.value, y.value)) return false;
    }
    return true;
  }

 private:
  ArchConfig config_;
  std::vector<Parameter<T>> entries_;
};

/// Number of scalars build() allocates for `c`:
///   sum over conv stages of (F*Cin*K*K + F)
///   + (B*P1 + P1) + (P1*P2 + P2) + (P2*C + C)          recognition branch
///   + (P1*S1 + S1) + (S1*S2 + S2) + k*(S2 + 1)         attribute branch
///   + ((S2+P2)*J + J) + (J*C + C)                      fused branch
/// with B the flattened backbone size.
inline std::size_t parameter_count(const ArchConfig& c) {
  std::size_t n = 0, cin = c.channels;
  for (const ConvStage& s : c.backbone) {
    n += s.out_channels * cin * s.kernel * s.kernel + s.out_channels;
    cin = s.out_channels;
  }
  const std::size_t b = c.backbone_flat_dim();
  n += b * c.pr_fc1_size + c.pr_fc1_size;
  n += c.pr_fc1_size * c.pr_fc2_size + c.pr_fc2_size;
  n += c.pr_fc2_size * c.classes + c.classes;
  n += c.pr_fc1_size * c.sb_fc1_size + c.sb_fc1_size;
  n += c.sb_fc1_size * c.sb_fc2_size + c.sb_fc2_size;
  n += c.attributes * (c.sb_fc2_size + 1);
  n += c.fusion_size() * c.jpr_fc_size + c.jpr_fc_size;
  n += c.jpr_fc_size * c.classes + c.classes;
  return n;
}

/// Fan-in scaled uniform weights (see ArchConfig::init_scale); zero biases.
template <typename T = float>
ParamStore<T> build(const ArchConfig& config, std::uint64_t seed) {
  config.validate();
  ParamStore<T> store(config);
  Rng rng(derive_seed(seed, 0x6d6f64656cULL));
  auto weight = [&](Shape shape, std::size_t fan_in) {
    const double bound = std::sqrt(config.init_scale / static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape));
    for (T& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  };
  auto dense = [&](const std::string& prefix, const std::string& block, std::size_t in, std::size_t out) {
    store.add(prefix + ".weight", block, weight({in, out}, in));
    store.add(prefix + ".bias", block, Tensor<T>::zeros({out}));
  };

  std::size_t cin = config.channels;
  for (std::size_t i = 0; i < config.backbone.size(); ++i) {
    const ConvStage& s = config.backbone[i];
    const std::string prefix = "backbone.conv" + std::to_string(i);
    store.add(prefix + ".weight", "backbone",
              weight({s.out_channels, cin, s.kernel, s.kernel}, cin * s.kernel * s.kernel));
    store.add(prefix + ".bias", "backbone", Tensor<T>::zeros({s.out_channels}));
    cin = s.out_channels;
  }
  dense("pr_fc.fc1", "pr_fc", config.backbone_flat_dim(), config.pr_fc1_size);
  dense("pr_fc.fc2", "pr_fc", config.pr_fc1_size, config.pr_fc2_size);
  dense("pr_softmax", "pr_softmax", config.pr_fc2_size, config.classes);
  dense("sb_fc.fc1", "sb_fc", config.pr_fc1_size, config.sb_fc1_size);
  dense("sb_fc.fc2", "sb_fc", config.sb_fc1_size, config.sb_fc2_size);
  for (std::size_t t = 0; t < config.attributes; ++t) {
    dense("sb_heads.attr" + std::to_string(t), "sb_heads", config.sb_fc2_size, 1);
  }
  dense("jpr_fc.fc", "jpr_fc", config.fusion_size(), config.jpr_fc_size);
  dense("jpr_softmax", "jpr_softmax", config.jpr_fc_size, config.classes);
  return store;
}

/// Every named activation of one forward pass.
template <typename X>
struct ForwardTaps {
  X backbone;    // flattened [N, B]
  X pr_fc1;      // [N, 2048]
  X pr_fc2;      // [N, 1024]
  X pr_logits;   // [N, C]
  X sb_fc1;      // [N, 512]
  X sb_fc2;      // [N, 256]
  X sb_logits;   // [N, k]
  X fused;       // [N, 1280] = sb_fc2 | pr_fc2
  X jpr_feat;    // [N, 512], the verification embedding
  X jpr_logits;  // [N, C]
};

struct ForwardOptions {
  /// Ablation hook: feed zeros in place of sb_fc2 into the fusion layer.
  bool zero_sb_features = false;
};

/// Puts every parameter on the tape. Parameters in `frozen` blocks get no gradient.
template <typename T>
std::vector<Var> bind_parameters(Tape<T>& tape, const ParamStore<T>& params, const std::set<std::string>& frozen = {}) {
  std::vector<Var> vars;
  vars.reserve(params.size());
  for (const auto& p : params) vars.push_back(tape.parameter(p.value, !frozen.contains(p.block)));
  return vars;
}

template <typename T>
ForwardTaps<Var> forward(Tape<T>& tape, const ParamStore<T>& params, const std::vector<Var>& bound, Var images,
                         const ForwardOptions& options = {}) {
  const ArchConfig& cfg = params.config();
  const Tensor<T>& x = tape.value(images);
  const Shape expected{x.rank() == 4 ? x.dim(0) : 0, cfg.channels, cfg.height, cfg.width};
  require_shape(x.rank() == 4 && x.shape() == expected, "forward input vs architecture", x.shape(), expected);
  if (bound.size() != params.size()) throw std::invalid_argument("forward: bound parameter list is stale");

  auto p = [&](const std::string& name) {
    const std::size_t i = params.index_of(name);
    if (i == ParamStore<T>::npos) throw std::out_of_range("missing parameter '" + name + "'");
    return bound[i];
  };
  auto dense = [&](Var in, const std::string& prefix) {
    return linear(tape, in, p(prefix + ".weight"), p(prefix + ".bias"));
  };

  Var h = images;
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    const ConvStage& s = cfg.backbone[i];
    const std::string prefix = "backbone.conv" + std::to_string(i);
    h = relu(tape, conv2d(tape, h, p(prefix + ".weight"), p(prefix + ".bias"), 1, s.kernel / 2));
    if (s.pool) h = max_pool2d(tape, h, 2);
  }

  ForwardTaps<Var> taps;
  taps.backbone = flatten(tape, h);
  taps.pr_fc1 = relu(tape, dense(taps.backbone, "pr_fc.fc1"));
  taps.pr_fc2 = relu(tape, dense(taps.pr_fc1, "pr_fc.fc2"));
  taps.pr_logits = dense(taps.pr_fc2, "pr_softmax");

  taps.sb_fc1 = relu(tape, dense(taps.pr_fc1, "sb_fc.fc1"));
  taps.sb_fc2 = relu(tape, dense(taps.sb_fc1, "sb_fc.fc2"));
  Var heads = dense(taps.sb_fc2, "sb_heads.attr0");
  for (std::size_t t = 1; t < cfg.attributes; ++t) {
    heads = concat(tape, heads, dense(taps.sb_fc2, "sb_heads.attr" + std::to_string(t)), 1);
  }
  taps.sb_logits = heads;

  Var sb_for_fusion = taps.sb_fc2;
  if (options.zero_sb_features) sb_for_fusion = tape.constant(Tensor<T>::zeros(tape.value(taps.sb_fc2).shape()));
  taps.fused = concat(tape, sb_for_fusion, taps.pr_fc2, 1);
  taps.jpr_feat = relu(tape, dense(taps.fused, "jpr_fc.fc"));
  taps.jpr_logits = dense(taps.jpr_feat, "jpr_softmax");
  return taps;
}

/// Evaluation-mode forward: no gradients are recorded.
template <typename T>
ForwardTaps<Tensor<T>> forward(const ParamStore<T>& params, const Tensor<T>& images, const ForwardOptions& options = {}) {
  Tape<T> tape;
  tape.set_grad_enabled(false);
  const auto bound = bind_parameters(tape, params);
  const ForwardTaps<Var> v = forward(tape, params, bound, tape.constant(images), options);
  ForwardTaps<Tensor<T>> out;
  out.backbone = tape.value(v.backbone);
  out.pr_fc1 = tape.value(v.pr_fc1);
  out.pr_fc2 = tape.value(v.pr_fc2);
  out.pr_logits = tape.value(v.pr_logits);
  out.sb_fc1 = tape.value(v.sb_fc1);
  out.sb_fc2 = tape.value(v.sb_fc2);
  out.sb_logits = tape.value(v.sb_logits);
  out.fused = tape.value(v.fused);
  out.jpr_feat = tape.value(v.jpr_feat);
  out.jpr_logits = tape.value(v.jpr_logits);
  return out;
}

/// The 512-d verification embedding (jpr_feat) for a batch of images.
template <typename T>
Tensor<T> extract_embedding(const ParamStore<T>& params, const Tensor<T>& images) {
  return forward(params, images).jpr_feat;
}

/// Applies `fn(batch_taps, first_row)` to consecutive chunks of at most `chunk` images.
template <typename T, typename Fn>
void forward_chunked(const ParamStore<T>& params, const Tensor<T>& images, std::size_t chunk, Fn&& fn,
                     const ForwardOptions& options = {}) {
  const std::size_t n = images.rank() ? images.dim(0) : 0;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t end = std::min(n, start + chunk);
    fn(forward(params, images.rows(start, end), options), start);
  }
}

}  // namespace adpr
