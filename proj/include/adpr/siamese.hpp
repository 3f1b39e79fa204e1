#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpr/dataset.hpp"
#include "adpr/losses.hpp"
#include "adpr/metrics.hpp"
#include "adpr/model.hpp"
#include "adpr/trainer.hpp"

namespace adpr {

struct SiameseConfig {
  double margin = 1.0;
  std::vector<double> sweep = {0.5, 1.0, 2.0, 3.0, 4.0, 5.0};
  std::size_t pair_batch_size = 32;
  /// 0 selects ceil(N / (2 * pair_batch_size)) batches per epoch.
  std::size_t batches_per_epoch = 0;
  std::size_t epochs = 10;
  double genuine_fraction = 0.5;
  std::uint64_t seed = 0;
  double learning_rate = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  ContrastiveForm contrastive_form = ContrastiveForm::paper;
  /// L2-normalize embeddings before distances, in training and scoring.
  bool normalize_embeddings = false;
  /// Adds the joint identity + attribute objective to the contrastive loss.
  bool add_e3 = false;
  double e2_weight = 1.0;

  void validate() const {
    if (!(margin > 0.0)) throw std::invalid_argument("siamese.margin must be positive");
    if (sweep.empty()) throw std::invalid_argument("siamese.sweep must be nonempty");
    for (double m : sweep) {
      if (!(m > 0.0)) throw std::invalid_argument("siamese.sweep margins must be positive");
    }
    if (pair_batch_size == 0) throw std::invalid_argument("siamese.pair_batch_size must be >= 1");
    if (!(genuine_fraction >= 0.0 && genuine_fraction <= 1.0)) {
      throw std::invalid_argument("siamese.genuine_fraction must lie in [0,1]");
    }
    if (!(learning_rate > 0.0)) throw std::invalid_argument("siamese.learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("siamese.momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("siamese.weight_decay must be >= 0");
  }

  /// pr_softmax is always held; without the E3 term the heads off the embedding path are held too.
  std::set<std::string> frozen_blocks() const {
    if (add_e3) return {"pr_softmax"};
    return {"pr_softmax", "sb_heads", "jpr_softmax"};
  }

  StageConfig optimizer() const {
    StageConfig s = StageConfig::for_stage(3, epochs, seed);
    s.learning_rate = learning_rate;
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    s.frozen_blocks = frozen_blocks();
    s.e2_weight = e2_weight;
    return s;
  }
};

struct SiameseEpochLog {
  std::size_t epoch = 0;
  double loss = 0.0;
  double first_batch_loss = 0.0;
  double last_batch_loss = 0.0;
  double genuine_sq_dist = 0.0;   // mean over the epoch's sampled genuine pairs
  double impostor_sq_dist = 0.0;  // mean over the epoch's sampled impostor pairs
  double wall_ms = 0.0;
};

inline void to_json(nlohmann::json& j, const SiameseEpochLog& e) {
  j = nlohmann::json{{"phase", "siamese"},
                     {"epoch", e.epoch},
                     {"loss", e.loss},
                     {"first_batch_loss", e.first_batch_loss},
                     {"last_batch_loss", e.last_batch_loss},
                     {"genuine_sq_dist", e.genuine_sq_dist},
                     {"impostor_sq_dist", e.impostor_sq_dist},
                     {"wall_ms", e.wall_ms}};
}

using SiameseCallback = std::function<void(const SiameseEpochLog&)>;

namespace detail {

inline double row_sq_dist(const Tensor<float>& z, std::size_t a, std::size_t b) { return -embedding_score(z, a, b); }

}  // namespace detail

/// Fine-tunes `params` in place with the coupled contrastive loss. Both twin
/// branches are the same parameter store. Each batch embeds the distinct images
/// of `pair_batch_size` sampled pairs and applies coupled_loss over them.
inline std::vector<SiameseEpochLog> train_siamese(ParamStore<float>& params, const PreparedSet& train,
                                                  const SiameseConfig& cfg, const SiameseCallback& on_epoch = {}) {
  cfg.validate();
  std::set<std::size_t> ids(train.labels.begin(), train.labels.end());
  if (ids.size() < 2) throw std::invalid_argument("train_siamese: training set needs at least 2 identities");
  if (train.classes != params.config().classes && cfg.add_e3) {
    throw std::invalid_argument("train_siamese: add_e3 needs the training classes to match the model");
  }
  const StageConfig opt = cfg.optimizer();
  OptimizerState state = OptimizerState::zeros_like(params);
  const std::size_t batches = cfg.batches_per_epoch
                                  ? cfg.batches_per_epoch
                                  : std::max<std::size_t>(1, (train.size() + 2 * cfg.pair_batch_size - 1) /
                                                                 (2 * cfg.pair_batch_size));
  const auto margin = static_cast<float>(cfg.margin);
  std::vector<SiameseEpochLog> logs;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    SiameseEpochLog log;
    log.epoch = epoch;
    double gen_sum = 0.0, imp_sum = 0.0;
    std::size_t gen_n = 0, imp_n = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      const PairBatch pairs = sample_pairs(train.labels, cfg.pair_batch_size, cfg.genuine_fraction,
                                           derive_seed(cfg.seed, (epoch << 24) + b));
      std::vector<std::size_t> members;
      for (const Pair& p : pairs) {
        members.push_back(p.i);
        members.push_back(p.j);
      }
      std::sort(members.begin(), members.end());
      members.erase(std::unique(members.begin(), members.end()), members.end());
      const Tensor<float> images = train.batch_images(members);
      const std::vector<std::size_t> labels = train.batch_labels(members);

      Tape<float> tape;
      const auto bound = bind_parameters(tape, params, opt.frozen_blocks);
      const ForwardTaps<Var> taps = forward(tape, params, bound, tape.constant(images));
      Var z = taps.jpr_feat;
      if (cfg.normalize_embeddings) z = l2_normalize_rows(tape, z);
      TapeLoss<float> loss = coupled_loss(tape, z, labels, margin, cfg.contrastive_form);
      if (cfg.add_e3) {
        const Tensor<float> attrs = train.batch_attributes(members);
        const TapeLoss<float> joint = e3(tape, taps.jpr_logits, labels, taps.sb_logits, attrs,
                                         static_cast<float>(cfg.e2_weight));
        loss.var = add(tape, loss.var, joint.var);
        loss.value.scalar += joint.value.scalar;
      }
      if (!std::isfinite(loss.value.scalar)) {
        throw NonFiniteLossError("siamese: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(b));
      }
      if (b == 0) log.first_batch_loss = loss.value.scalar;
      log.last_batch_loss = loss.value.scalar;
      log.loss += loss.value.scalar;

      const Tensor<float>& zv = tape.value(z);
      for (const Pair& p : pairs) {
        const auto a = static_cast<std::size_t>(std::lower_bound(members.begin(), members.end(), p.i) - members.begin());
        const auto c = static_cast<std::size_t>(std::lower_bound(members.begin(), members.end(), p.j) - members.begin());
        const double d = detail::row_sq_dist(zv, a, c);
        if (p.c == 0) {
          gen_sum += d;
          ++gen_n;
        } else {
          imp_sum += d;
          ++imp_n;
        }
      }

      tape.backward(loss.var);
      std::vector<Tensor<float>> grads(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (tape.has_grad(bound[i])) grads[i] = tape.grad(bound[i]);
      }
      sgd_step(params, grads, state, opt);
    }
    log.loss /= static_cast<double>(batches);
    log.genuine_sq_dist = gen_n ? gen_sum / static_cast<double>(gen_n) : 0.0;
    log.impostor_sq_dist = imp_n ? imp_sum / static_cast<double>(imp_n) : 0.0;
    log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (on_epoch) on_epoch(log);
    logs.push_back(log);
  }
  return logs;
}

/// Embeddings used for verification under this configuration.
inline Tensor<float> siamese_embeddings(const ParamStore<float>& params, const PreparedSet& data,
                                        bool normalize) {
  Tensor<float> z = embed_all(params, data);
  return normalize ? l2_normalize_rows(z) : z;
}

/// Scores every unordered pair of `data`.
inline ScoreSet all_pair_scores(const ParamStore<float>& params, const PreparedSet& data, bool normalize = false) {
  return scores_from_embeddings(siamese_embeddings(params, data, normalize), all_pairs(data.labels));
}

/// -||z(a) - z(b)||^2 for two normalized [3,H,W] images.
inline double verify_pair(const ParamStore<float>& params, const Tensor<float>& image_a, const Tensor<float>& image_b,
                          bool normalize = false) {
  auto embed = [&](const Tensor<float>& img) {
    if (img.rank() != 3) throw ShapeError("verify_pair: expected a [3,H,W] image, got " + to_string(img.shape()));
    Tensor<float> z = extract_embedding(params, img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}));
    return normalize ? l2_normalize_rows(z) : z;
  };
  const Tensor<float> za = embed(image_a), zb = embed(image_b);
  double s = 0.0;
  for (std::size_t q = 0; q < za.size(); ++q) {
    const double d = static_cast<double>(za[q]) - static_cast<double>(zb[q]);
    s += d * d;
  }
  return -s;
}

struct MarginRow {
  double margin = 0.0;
  double eer = 0.0;
  double auc = 0.0;
};

struct MarginSweepResult {
  double best_margin = 0.0;
  std::vector<MarginRow> table;  // in sweep order
  ParamStore<float> best_params;
  std::vector<SiameseEpochLog> best_logs;
};

inline void write_margin_csv(const std::string& path, const std::vector<MarginRow>& rows) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "margin,eer,auc\n";
  for (const MarginRow& r : rows) f << format_double(r.margin) << ',' << format_double(r.eer) << ',' << format_double(r.auc) << '\n';
  if (!f) throw std::runtime_error("write failed: " + path);
}

/// Trains one copy of `initial` per margin (same seed) and keeps the one with
/// the lowest validation EER, ties going to the smaller margin.
inline MarginSweepResult margin_sweep(const ParamStore<float>& initial, const PreparedSet& train,
                                      const PreparedSet& val, const SiameseConfig& cfg,
                                      const SiameseCallback& on_epoch = {}) {
  cfg.validate();
  require_identity_disjoint(train.source_identity, val.source_identity);
  MarginSweepResult out;
  double best_eer = std::numeric_limits<double>::infinity();
  for (double m : cfg.sweep) {
    SiameseConfig c = cfg;
    c.margin = m;
    ParamStore<float> params = initial;
    auto logs = train_siamese(params, train, c, on_epoch);
    const VerificationSummary s = summarize(all_pair_scores(params, val, cfg.normalize_embeddings));
    out.table.push_back({m, s.eer, s.auc});
    if (s.eer < best_eer || (s.eer == best_eer && m < out.best_margin)) {
      best_eer = s.eer;
      out.best_margin = m;
      out.best_params = std::move(params);
      out.best_logs = std::move(logs);
    }
  }
  return out;
}

}  // namespace adpr
