#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "adpr/autodiff.hpp"

namespace adpr {

inline constexpr double kProbabilityFloor = 1e-7;

/// Scalar objective plus its named parts, for logging.
struct LossValue {
  double scalar = 0.0;
  std::map<std::string, double> components;
};

template <typename T>
struct TapeLoss {
  Var var;
  LossValue value;
};

/// How the impostor branch of the contrastive loss is hinged.
///   paper:        0.5 * max(0, m - d^2)
///   conventional: 0.5 * max(0, m - d)^2
enum class ContrastiveForm { paper, conventional };

inline ContrastiveForm parse_contrastive_form(const std::string& s) {
  if (s == "paper") return ContrastiveForm::paper;
  if (s == "conventional") return ContrastiveForm::conventional;
  throw std::invalid_argument("contrastive_form must be 'paper' or 'conventional', got '" + s + "'");
}

inline std::string to_string(ContrastiveForm f) {
  return f == ContrastiveForm::paper ? "paper" : "conventional";
}

namespace detail {

inline void check_labels(std::span<const std::size_t> labels, std::size_t n, std::size_t classes) {
  if (labels.size() != n) {
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch size " +
                     std::to_string(n));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= classes) {
      throw std::out_of_range("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                              " is not below class count " + std::to_string(classes));
    }
  }
}

template <typename T>
void check_binary(const Tensor<T>& attrs, const Shape& logits_shape) {
  require_shape(attrs.shape() == logits_shape, "attribute labels", attrs.shape(), logits_shape);
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    if (attrs[i] != T(0) && attrs[i] != T(1)) {
      throw std::invalid_argument("attribute label at flat index " + std::to_string(i) + " is not 0 or 1");
    }
  }
}

// Per-pair contrastive term and its derivative w.r.t. the squared distance
// (paper form) or w.r.t. the distance (conventional form, returned as a factor on d).
template <typename T>
T contrastive_term(T sq_dist, bool impostor, T margin, ContrastiveForm form) {
  if (!impostor) return T(0.5) * sq_dist;
  if (form == ContrastiveForm::paper) return T(0.5) * std::max(T(0), margin - sq_dist);
  const T gap = std::max(T(0), margin - std::sqrt(sq_dist));
  return T(0.5) * gap * gap;
}

// d(term)/d(diff) = coeff * diff
template <typename T>
T contrastive_coeff(T sq_dist, bool impostor, T margin, ContrastiveForm form) {
  if (!impostor) return T(1);
  if (form == ContrastiveForm::paper) return sq_dist < margin ? T(-1) : T(0);
  const T d = std::sqrt(sq_dist);
  if (d >= margin || d == T(0)) return T(0);
  return -(margin - d) / d;
}

}  // namespace detail

/// Mean over rows of -ln(clamp(p[i, label_i])).
template <typename T>
T cross_entropy(const Tensor<T>& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2) throw ShapeError("cross_entropy expects [N,C], got " + to_string(probs.shape()));
  const std::size_t n = probs.dim(0), c = probs.dim(1);
  detail::check_labels(labels, n, c);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T p = std::clamp(probs[i * c + labels[i]], T(kProbabilityFloor), T(1));
    total -= std::log(p);
  }
  return n ? total / static_cast<T>(n) : T(0);
}

template <typename T>
Var cross_entropy(Tape<T>& tape, Var probs, std::span<const std::size_t> labels) {
  const Tensor<T>& p = tape.value(probs);
  const T value = cross_entropy(p, labels);
  const std::size_t n = p.dim(0), c = p.dim(1);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  Var result{tape.size()};
  return tape.record(Tensor<T>({1}, value), tape.requires_grad(probs), [=](Tape<T>& t) {
    const T g = t.grad_slot(result)[0];
    const Tensor<T>& pv = t.value(probs);
    Tensor<T>& dp = t.grad_slot(probs);
    for (std::size_t i = 0; i < n; ++i) {
      const T pi = pv[i * c + lab[i]];
      if (pi >= T(kProbabilityFloor) && pi <= T(1)) dp[i * c + lab[i]] -= g / (static_cast<T>(n) * pi);
    }
  });
}

/// Classification loss: softmax over logits, then mean cross-entropy.
/// The weight penalty is applied by the optimizer as weight decay, not here.
template <typename T>
TapeLoss<T> e1(Tape<T>& tape, Var logits, std::span<const std::size_t> labels) {
  Var probs = softmax(tape, logits);
  Var loss = cross_entropy(tape, probs, labels);
  const double v = static_cast<double>(tape.value(loss)[0]);
  return {loss, {v, {{"ce", v}}}};
}

template <typename T>
LossValue e1(const Tensor<T>& logits, std::span<const std::size_t> labels) {
  const double v = static_cast<double>(cross_entropy(softmax_rows(logits), labels));
  return {v, {{"ce", v}}};
}

/// Soft-biometric loss: per-attribute binary cross-entropy on sigmoid(logit),
/// summed over attributes and averaged over the batch. `attribute_weights`
/// (empty = all ones) masks or reweights individual attribute terms.
template <typename T>
T attribute_bce(const Tensor<T>& logits, const Tensor<T>& attrs, std::span<const T> attribute_weights = {}) {
  if (logits.rank() != 2) throw ShapeError("attribute loss expects [N,k], got " + to_string(logits.shape()));
  detail::check_binary(attrs, logits.shape());
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (!attribute_weights.empty() && attribute_weights.size() != k) {
    throw ShapeError("attribute weight count " + std::to_string(attribute_weights.size()) +
                     " does not match k=" + std::to_string(k));
  }
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < k; ++t) {
      const T x = logits[i * k + t];
      const T a = attrs[i * k + t];
      const T w = attribute_weights.empty() ? T(1) : attribute_weights[t];
      // -[a ln s(x) + (1-a) ln(1-s(x))] written without forming s(x).
      total += w * (std::max(x, T(0)) - x * a + std::log1p(std::exp(-std::abs(x))));
    }
  }
  return n ? total / static_cast<T>(n) : T(0);
}

template <typename T>
TapeLoss<T> e2(Tape<T>& tape, Var sb_logits, const Tensor<T>& attrs, std::span<const T> attribute_weights = {}) {
  const Tensor<T>& x = tape.value(sb_logits);
  const T value = attribute_bce(x, attrs, attribute_weights);
  const std::size_t n = x.dim(0), k = x.dim(1);
  std::vector<T> weights(attribute_weights.begin(), attribute_weights.end());
  if (weights.empty()) weights.assign(k, T(1));
  Var result{tape.size()};
  Var loss = tape.record(Tensor<T>({1}, value), tape.requires_grad(sb_logits), [=](Tape<T>& t) {
    const T g = t.grad_slot(result)[0];
    const Tensor<T>& lv = t.value(sb_logits);
    Tensor<T>& dx = t.grad_slot(sb_logits);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < k; ++a) {
        const T s = T(1) / (T(1) + std::exp(-lv[i * k + a]));
        dx[i * k + a] += g * weights[a] * (s - attrs[i * k + a]) / static_cast<T>(n);
      }
    }
  });
  const double v = static_cast<double>(value);
  return {loss, {v, {{"attr", v}}}};
}

template <typename T>
LossValue e2(const Tensor<T>& sb_logits, const Tensor<T>& attrs, std::span<const T> attribute_weights = {}) {
  const double v = static_cast<double>(attribute_bce(sb_logits, attrs, attribute_weights));
  return {v, {{"attr", v}}};
}

/// Joint objective: identity loss on the fused head plus attribute loss.
template <typename T>
TapeLoss<T> e3(Tape<T>& tape, Var jpr_logits, std::span<const std::size_t> labels, Var sb_logits,
               const Tensor<T>& attrs, T e2_weight = T(1), std::span<const T> attribute_weights = {}) {
  TapeLoss<T> a = e1(tape, jpr_logits, labels);
  TapeLoss<T> b = e2(tape, sb_logits, attrs, attribute_weights);
  Var weighted = e2_weight == T(1) ? b.var : scale(tape, b.var, e2_weight);
  Var total = add(tape, a.var, weighted);
  LossValue lv;
  lv.scalar = static_cast<double>(tape.value(total)[0]);
  lv.components = {{"ce", a.value.scalar}, {"attr", b.value.scalar}};
  return {total, lv};
}

template <typename T>
LossValue e3(const Tensor<T>& jpr_logits, std::span<const std::size_t> labels, const Tensor<T>& sb_logits,
             const Tensor<T>& attrs, T e2_weight = T(1)) {
  const LossValue a = e1(jpr_logits, labels);
  const LossValue b = e2(sb_logits, attrs);
  return {static_cast<double>(static_cast<T>(a.scalar) + e2_weight * static_cast<T>(b.scalar)),
          {{"ce", a.scalar}, {"attr", b.scalar}}};
}

/// Pair loss. c == 0 marks a genuine pair, c == 1 an impostor pair.
template <typename T>
T contrastive(std::span<const T> z1, std::span<const T> z2, int c, T margin,
              ContrastiveForm form = ContrastiveForm::paper) {
  if (z1.size() != z2.size()) {
    throw ShapeError("contrastive: embedding lengths " + std::to_string(z1.size()) + " and " +
                     std::to_string(z2.size()) + " differ");
  }
  if (c != 0 && c != 1) throw std::invalid_argument("contrastive: pair label must be 0 or 1");
  if (!(margin > T(0))) throw std::invalid_argument("contrastive: margin must be positive");
  T sq = 0;
  for (std::size_t i = 0; i < z1.size(); ++i) sq += (z1[i] - z2[i]) * (z1[i] - z2[i]);
  return detail::contrastive_term(sq, c == 1, margin, form);
}

namespace detail {

template <typename T>
std::vector<T> pairwise_sq_distances(const Tensor<T>& z) {
  const std::size_t n = z.dim(0), d = z.dim(1);
  std::vector<T> out(n * n, T(0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      T s = 0;
      for (std::size_t q = 0; q < d; ++q) {
        const T diff = z[i * d + q] - z[j * d + q];
        s += diff * diff;
      }
      out[i * n + j] = s;
      out[j * n + i] = s;
    }
  }
  return out;
}

}  // namespace detail

/// Coupled loss: (1/N^2) * sum over all ordered pairs (i, j), self pairs
/// included, of the contrastive term with c(i,j) = [identity_i != identity_j].
template <typename T>
T coupled_loss(const Tensor<T>& embeddings, std::span<const std::size_t> identities, T margin,
               ContrastiveForm form = ContrastiveForm::paper) {
  if (embeddings.rank() != 2) throw ShapeError("coupled_loss expects [N,D], got " + to_string(embeddings.shape()));
  const std::size_t n = embeddings.dim(0);
  if (identities.size() != n) throw ShapeError("coupled_loss: identity count does not match batch size");
  if (!(margin > T(0))) throw std::invalid_argument("coupled_loss: margin must be positive");
  if (n == 0) return T(0);
  const std::vector<T> sq = detail::pairwise_sq_distances(embeddings);
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      total += detail::contrastive_term(sq[i * n + j], identities[i] != identities[j], margin, form);
    }
  }
  return total / static_cast<T>(n * n);
}

template <typename T>
TapeLoss<T> coupled_loss(Tape<T>& tape, Var embeddings, std::span<const std::size_t> identities, T margin,
                         ContrastiveForm form = ContrastiveForm::paper) {
  const Tensor<T>& z = tape.value(embeddings);
  const T value = coupled_loss(z, identities, margin, form);
  const std::size_t n = z.dim(0), d = z.dim(1);
  std::vector<std::size_t> ids(identities.begin(), identities.end());
  Var result{tape.size()};
  Var loss = tape.record(Tensor<T>({1}, value), tape.requires_grad(embeddings), [=](Tape<T>& t) {
    const T g = t.grad_slot(result)[0];
    const Tensor<T>& zv = t.value(embeddings);
    Tensor<T>& dz = t.grad_slot(embeddings);
    const std::vector<T> sq = detail::pairwise_sq_distances(zv);
    const T norm = g / static_cast<T>(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (i == j) continue;
        const T coeff = detail::contrastive_coeff(sq[i * n + j], ids[i] != ids[j], margin, form);
        if (coeff == T(0)) continue;
        // Term (i,j) depends on z_i - z_j; its gradient is coeff*(z_i - z_j) on z_i and the negation on z_j.
        const T s = norm * coeff;
        for (std::size_t q = 0; q < d; ++q) {
          const T diff = zv[i * d + q] - zv[j * d + q];
          dz[i * d + q] += s * diff;
          dz[j * d + q] -= s * diff;
        }
      }
    }
  });
  const double v = static_cast<double>(value);
  return {loss, {v, {{"contrastive", v}}}};
}

}  // namespace adpr
