#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpr/dataset.hpp"
#include "adpr/losses.hpp"
#include "adpr/model.hpp"

namespace adpr {

/// Blocks held fixed in each of the three training stages.
///   1: only the recognition branch (pr_fc, pr_softmax) learns.
///   2: only the attribute branch (sb_fc, sb_heads) learns.
///   3: everything except pr_softmax learns.
inline std::set<std::string> frozen_blocks_for_stage(int stage) {
  switch (stage) {
    case 1: return {"backbone", "sb_fc", "sb_heads", "jpr_fc", "jpr_softmax"};
    case 2: return {"backbone", "pr_fc", "pr_softmax", "jpr_fc", "jpr_softmax"};
    case 3: return {"pr_softmax"};
    default: throw std::invalid_argument("stage must be 1, 2 or 3, got " + std::to_string(stage));
  }
}

struct StageConfig {
  int stage = 1;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  std::set<std::string> frozen_blocks = frozen_blocks_for_stage(1);
  std::uint64_t seed = 0;
  /// Weight on the attribute term in the stage-3 objective.
  double e2_weight = 1.0;
  /// Per-attribute loss weights; empty means every attribute at weight 1.
  std::vector<double> attribute_weights;

  static StageConfig for_stage(int stage, std::size_t epochs, std::uint64_t seed) {
    StageConfig c;
    c.stage = stage;
    c.epochs = epochs;
    c.frozen_blocks = frozen_blocks_for_stage(stage);
    c.seed = seed;
    return c;
  }

  void validate() const {
    if (stage < 1 || stage > 3) throw std::invalid_argument("stage must be 1, 2 or 3");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
    for (const auto& b : frozen_blocks) {
      if (!is_block_name(b)) throw std::invalid_argument("frozen_blocks: unknown block '" + b + "'");
    }
  }
};

inline std::size_t default_epochs(int stage) { return stage == 2 ? 30 : 50; }

/// Momentum buffers, one per parameter, aligned with the ParamStore order.
struct OptimizerState {
  std::vector<Tensor<float>> velocity;

  static OptimizerState zeros_like(const ParamStore<float>& params) {
    OptimizerState s;
    for (const auto& p : params) s.velocity.push_back(Tensor<float>::zeros(p.value.shape()));
    return s;
  }
};

class NonFiniteLossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// v <- momentum*v - lr*(g + wd*w); w <- w + v, for parameters outside frozen blocks.
/// An empty gradient tensor counts as zero.
inline void sgd_step(ParamStore<float>& params, const std::vector<Tensor<float>>& grads, OptimizerState& state,
                     const StageConfig& cfg) {
  if (grads.size() != params.size() || state.velocity.size() != params.size()) {
    throw std::invalid_argument("sgd_step: gradient/state count does not match parameter count");
  }
  const auto lr = static_cast<float>(cfg.learning_rate);
  const auto mu = static_cast<float>(cfg.momentum);
  const auto wd = static_cast<float>(cfg.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (cfg.frozen_blocks.contains(p.block)) continue;
    const Tensor<float>& g = grads[i];
    Tensor<float>& v = state.velocity[i];
    if (!g.empty() && g.shape() != p.value.shape()) {
      throw ShapeError("sgd_step: gradient for '" + p.name + "' has shape " + to_string(g.shape()));
    }
    if (!g.empty() && !g.all_finite()) throw NonFiniteLossError("non-finite gradient in parameter '" + p.name + "'");
    float* w = p.value.data();
    float* vel = v.data();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const float gj = g.empty() ? 0.0f : g[j];
      vel[j] = mu * vel[j] - lr * (gj + wd * w[j]);
      w[j] += vel[j];
    }
  }
}

struct EpochLog {
  int stage = 0;
  std::size_t epoch = 0;
  double loss = 0.0;
  double ce = 0.0;
  double attr = 0.0;
  double train_acc = 0.0;
  std::optional<double> attr_acc;
  double wall_ms = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochLog& e) {
  j = nlohmann::json{{"stage", e.stage}, {"epoch", e.epoch}, {"loss", e.loss},           {"ce", e.ce},
                     {"attr", e.attr},   {"train_acc", e.train_acc}, {"attr_acc", nullptr}, {"wall_ms", e.wall_ms}};
  if (e.attr_acc) j["attr_acc"] = *e.attr_acc;
}

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

inline std::size_t argmax_row(const Tensor<float>& m, std::size_t row) {
  const std::size_t c = m.dim(1);
  const float* r = m.data() + row * c;
  return static_cast<std::size_t>(std::max_element(r, r + c) - r);
}

inline std::vector<float> to_float(const std::vector<double>& v) { return {v.begin(), v.end()}; }

}  // namespace detail

/// Trains one stage. Batches are drawn from a per-epoch permutation seeded by
/// (cfg.seed, epoch); the trailing partial batch is dropped. Momentum starts at
/// zero; the final buffers are stored in `final_state` when given.
inline std::vector<EpochLog> run_stage(const StageConfig& cfg, ParamStore<float>& params, const PreparedSet& train,
                                       const EpochCallback& on_epoch = {}, OptimizerState* final_state = nullptr) {
  cfg.validate();
  const ArchConfig& arch = params.config();
  if (train.size() < cfg.batch_size) {
    throw std::invalid_argument("training set (" + std::to_string(train.size()) + " samples) is smaller than batch_size " +
                                std::to_string(cfg.batch_size));
  }
  if (train.classes != arch.classes) {
    throw std::invalid_argument("training set has " + std::to_string(train.classes) + " identities, model has " +
                                std::to_string(arch.classes));
  }
  if (train.attributes.dim(1) != arch.attributes) {
    throw std::invalid_argument("training set has k=" + std::to_string(train.attributes.dim(1)) + ", model has k=" +
                                std::to_string(arch.attributes));
  }
  if (!cfg.attribute_weights.empty() && cfg.attribute_weights.size() != arch.attributes) {
    throw std::invalid_argument("attribute_weights must have k entries");
  }
  const std::vector<float> attr_w = detail::to_float(cfg.attribute_weights);
  OptimizerState state = OptimizerState::zeros_like(params);
  std::vector<EpochLog> logs;
  const std::size_t batches = train.size() / cfg.batch_size;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(derive_seed(cfg.seed, 0x65706f6368ULL + epoch));
    const auto order = rng.permutation(train.size());
    EpochLog log;
    log.stage = cfg.stage;
    log.epoch = epoch;
    std::size_t correct = 0, attr_correct = 0, attr_total = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::span<const std::size_t> idx(order.data() + b * cfg.batch_size, cfg.batch_size);
      const Tensor<float> images = train.batch_images(idx);
      const std::vector<std::size_t> labels = train.batch_labels(idx);
      const Tensor<float> attrs = train.batch_attributes(idx);

      Tape<float> tape;
      const auto bound = bind_parameters(tape, params, cfg.frozen_blocks);
      const ForwardTaps<Var> taps = forward(tape, params, bound, tape.constant(images));
      TapeLoss<float> loss;
      Var id_logits = taps.pr_logits;
      switch (cfg.stage) {
        case 1: loss = e1(tape, taps.pr_logits, labels); break;
        case 2: loss = e2(tape, taps.sb_logits, attrs, std::span<const float>(attr_w)); break;
        default:
          loss = e3(tape, taps.jpr_logits, labels, taps.sb_logits, attrs, static_cast<float>(cfg.e2_weight),
                    std::span<const float>(attr_w));
          id_logits = taps.jpr_logits;
      }
      if (!std::isfinite(loss.value.scalar)) {
        throw NonFiniteLossError("stage " + std::to_string(cfg.stage) + ": non-finite loss at epoch " +
                                 std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      log.loss += loss.value.scalar;
      log.ce += loss.value.components.contains("ce") ? loss.value.components.at("ce") : 0.0;
      log.attr += loss.value.components.contains("attr") ? loss.value.components.at("attr") : 0.0;

      const Tensor<float>& logits = tape.value(id_logits);
      for (std::size_t i = 0; i < labels.size(); ++i) correct += detail::argmax_row(logits, i) == labels[i];
      const Tensor<float>& sb = tape.value(taps.sb_logits);
      for (std::size_t i = 0; i < sb.size(); ++i) attr_correct += (sb[i] > 0.0f) == (attrs[i] > 0.5f);
      attr_total += sb.size();

      tape.backward(loss.var);
      std::vector<Tensor<float>> grads(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (tape.has_grad(bound[i])) grads[i] = tape.grad(bound[i]);
      }
      sgd_step(params, grads, state, cfg);
    }
    log.loss /= static_cast<double>(batches);
    log.ce /= static_cast<double>(batches);
    log.attr /= static_cast<double>(batches);
    log.train_acc = static_cast<double>(correct) / static_cast<double>(batches * cfg.batch_size);
    if (cfg.stage != 1) log.attr_acc = static_cast<double>(attr_correct) / static_cast<double>(attr_total);
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(log);
    logs.push_back(log);
  }
  if (final_state) *final_state = std::move(state);
  return logs;
}

struct PipelineConfig {
  std::array<StageConfig, 3> stages = {StageConfig::for_stage(1, default_epochs(1), 1),
                                       StageConfig::for_stage(2, default_epochs(2), 2),
                                       StageConfig::for_stage(3, default_epochs(3), 3)};
};

/// Called after each stage with the stage number and the trained parameters.
using StageCallback = std::function<void(int, const ParamStore<float>&)>;

/// Stages 1 -> 2 -> 3 on the same parameter store.
inline std::vector<EpochLog> run_full_pipeline(const PipelineConfig& cfg, ParamStore<float>& params,
                                               const PreparedSet& train, const StageCallback& on_stage = {},
                                               const EpochCallback& on_epoch = {}) {
  for (int s = 0; s < 3; ++s) {
    if (cfg.stages[static_cast<std::size_t>(s)].stage != s + 1) {
      throw std::invalid_argument("pipeline stage " + std::to_string(s + 1) + " is configured as stage " +
                                  std::to_string(cfg.stages[static_cast<std::size_t>(s)].stage));
    }
  }
  std::vector<EpochLog> all;
  for (const StageConfig& sc : cfg.stages) {
    auto logs = run_stage(sc, params, train, on_epoch);
    all.insert(all.end(), logs.begin(), logs.end());
    if (on_stage) on_stage(sc.stage, params);
  }
  return all;
}

/// Which logits score identities.
enum class IdentityHead { pr, jpr };

/// Fraction of samples whose arg-max identity logit is the true label.
inline double identity_accuracy(const ParamStore<float>& params, const PreparedSet& data, IdentityHead head,
                                std::size_t chunk = 64) {
  std::size_t correct = 0;
  forward_chunked(params, data.images, chunk, [&](const ForwardTaps<Tensor<float>>& t, std::size_t start) {
    const Tensor<float>& logits = head == IdentityHead::pr ? t.pr_logits : t.jpr_logits;
    for (std::size_t i = 0; i < logits.dim(0); ++i) correct += detail::argmax_row(logits, i) == data.labels[start + i];
  });
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

/// Per-attribute accuracy of sign(sb_logit) against the labels.
inline std::vector<double> attribute_accuracy(const ParamStore<float>& params, const PreparedSet& data,
                                              std::size_t chunk = 64) {
  const std::size_t k = params.config().attributes;
  std::vector<std::size_t> correct(k, 0);
  forward_chunked(params, data.images, chunk, [&](const ForwardTaps<Tensor<float>>& t, std::size_t start) {
    for (std::size_t i = 0; i < t.sb_logits.dim(0); ++i) {
      for (std::size_t a = 0; a < k; ++a) {
        correct[a] += (t.sb_logits[i * k + a] > 0.0f) == (data.attributes[(start + i) * k + a] > 0.5f);
      }
    }
  });
  std::vector<double> acc(k);
  for (std::size_t a = 0; a < k; ++a) acc[a] = static_cast<double>(correct[a]) / static_cast<double>(data.size());
  return acc;
}

}  // namespace adpr
