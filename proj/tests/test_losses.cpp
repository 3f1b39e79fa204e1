#include <cmath>
#include <numeric>

#include <gtest/gtest.h>

#include "adpr/grad_check.hpp"
#include "adpr/losses.hpp"
#include "support.hpp"

namespace adpr {
namespace {

using test::uniform_values;

std::vector<std::size_t> idx(std::initializer_list<std::size_t> v) { return v; }

TEST(CrossEntropy, Oracles) {
  EXPECT_NEAR(cross_entropy(Tensor<double>::from({1, 2}, {1, 0}), idx({0})), 0.0, 1e-6);
  EXPECT_NEAR(cross_entropy(Tensor<double>::from({1, 2}, {0.5, 0.5}), idx({0})), 0.693147, 1e-6);
  EXPECT_NEAR(cross_entropy(Tensor<double>::from({1, 3}, {0.2, 0.7, 0.1}), idx({1})), 0.356675, 1e-6);
}

TEST(CrossEntropy, ZeroProbabilityIsClamped) {
  const double v = cross_entropy(Tensor<double>::from({1, 2}, {0.0, 1.0}), idx({0}));
  EXPECT_NEAR(v, -std::log(kProbabilityFloor), 1e-9);
}

TEST(CrossEntropy, RejectsOutOfRangeLabel) {
  EXPECT_THROW(cross_entropy(Tensor<double>::from({1, 2}, {0.5, 0.5}), idx({2})), std::out_of_range);
}

TEST(E1, Oracles) {
  EXPECT_NEAR(e1(Tensor<double>({1, 4}, 0.0), idx({2})).scalar, 1.386294, 1e-6);
  EXPECT_LT(e1(Tensor<double>::from({1, 3}, {20, 0, 0}), idx({0})).scalar, 1e-6);
  EXPECT_LT(e1(Tensor<double>::from({1, 2}, {25, 0}), idx({0})).scalar, 1e-6);
}

TEST(E1, BatchIsMeanOfSamples) {
  const Tensor<double> logits = uniform_values<double>({2, 3}, 1, -3, 3);
  const double both = e1(logits, idx({1, 2})).scalar;
  const double a = e1(logits.rows(0, 1), idx({1})).scalar;
  const double b = e1(logits.rows(1, 2), idx({2})).scalar;
  EXPECT_NEAR(both, 0.5 * (a + b), 1e-12);
}

TEST(E2, Oracles) {
  EXPECT_NEAR(e2(Tensor<double>({1, 1}, 0.0), Tensor<double>({1, 1}, 1.0)).scalar, std::log(2.0), 1e-6);
  EXPECT_NEAR(e2(Tensor<double>({1, 1}, 20.0), Tensor<double>({1, 1}, 1.0)).scalar, 0.0, 1e-6);
  EXPECT_NEAR(e2(Tensor<double>({1, 2}, 0.0), Tensor<double>({1, 2}, 1.0)).scalar, 1.386294, 1e-6);
}

TEST(E2, RejectsNonBinaryLabels) {
  EXPECT_THROW(e2(Tensor<double>({1, 2}, 0.0), Tensor<double>::from({1, 2}, {1.0, 0.5})), std::invalid_argument);
}

TEST(E2, AttributeWeightsMaskTerms) {
  const std::vector<double> w = {1.0, 0.0};
  EXPECT_NEAR(e2(Tensor<double>({1, 2}, 0.0), Tensor<double>({1, 2}, 1.0), std::span<const double>(w)).scalar, std::log(2.0), 1e-12);
}

TEST(E3, IsUnweightedSumOfComponents) {
  const Tensor<double> jl = uniform_values<double>({3, 4}, 2, -2, 2), sl = uniform_values<double>({3, 2}, 3, -2, 2);
  const Tensor<double> at = Tensor<double>::from({3, 2}, {1, 0, 0, 1, 1, 1});
  const auto labels = idx({0, 3, 1});
  const LossValue v = e3(jl, labels, sl, at);
  const double a = e1(jl, labels).scalar, b = e2(sl, at).scalar;
  EXPECT_NEAR(v.scalar, a + b, 1e-12);
  EXPECT_DOUBLE_EQ(v.components.at("ce"), a);
  EXPECT_DOUBLE_EQ(v.components.at("attr"), b);
}

TEST(E3, GradientIsSumOfComponentGradients) {
  const Tensor<double> jl = uniform_values<double>({2, 4}, 4, -2, 2), sl = uniform_values<double>({2, 3}, 5, -2, 2);
  const Tensor<double> at = Tensor<double>::from({2, 3}, {1, 0, 1, 0, 0, 1});
  const auto labels = idx({1, 2});
  auto grads = [&](int which) {
    Tape<double> t;
    const Var j = t.parameter(jl), s = t.parameter(sl);
    Var loss = which == 0 ? e3(t, j, labels, s, at).var : which == 1 ? e1(t, j, labels).var : e2(t, s, at).var;
    t.backward(loss);
    return std::pair{t.grad(j), t.grad(s)};
  };
  const auto [gj, gs] = grads(0);
  const auto [g1j, g1s] = grads(1);
  const auto [g2j, g2s] = grads(2);
  for (std::size_t i = 0; i < gj.size(); ++i) EXPECT_NEAR(gj[i], g1j[i] + g2j[i], 1e-12);
  for (std::size_t i = 0; i < gs.size(); ++i) EXPECT_NEAR(gs[i], g1s[i] + g2s[i], 1e-12);
  // The attribute term never reaches the identity logits.
  for (double v : g2j.values()) EXPECT_EQ(v, 0.0);

  const auto rj = grad_check<double>([&](Tape<double>& t, Var v) { return e3(t, v, labels, t.constant(sl), at).var; },
                                     jl, 1e-5);
  const auto rs = grad_check<double>([&](Tape<double>& t, Var v) { return e3(t, t.constant(jl), labels, v, at).var; },
                                     sl, 1e-5);
  EXPECT_LT(rj.max_relative_error, 1e-6);
  EXPECT_LT(rs.max_relative_error, 1e-6);
}

TEST(Losses, TapeAndTensorFormsAgree) {
  const Tensor<float> logits = uniform_values<float>({3, 5}, 6, -4, 4);
  const auto labels = idx({4, 0, 2});
  Tape<float> t;
  const auto lv = e1(t, t.constant(logits), labels);
  EXPECT_FLOAT_EQ(static_cast<float>(lv.value.scalar), static_cast<float>(e1(logits, labels).scalar));
}

TEST(Contrastive, Oracles) {
  const std::vector<double> o = {0, 0}, a = {1, 0}, h = {0.5, 0.5}, far = {1, 1};
  EXPECT_EQ(contrastive<double>(o, o, 0, 1.0), 0.0);
  EXPECT_EQ(contrastive<double>(o, far, 1, 1.0), 0.0);
  EXPECT_NEAR(contrastive<double>(o, a, 0, 1.0), 0.5, 1e-12);
  EXPECT_NEAR(contrastive<double>(o, h, 1, 2.0), 0.75, 1e-12);
}

TEST(Contrastive, ConventionalForm) {
  const std::vector<double> o = {0}, a = {0.5};
  // 0.5 * max(0, 2 - 0.5)^2
  EXPECT_NEAR(contrastive<double>(o, a, 1, 2.0, ContrastiveForm::conventional), 0.5 * 1.5 * 1.5, 1e-12);
  EXPECT_EQ(parse_contrastive_form("conventional"), ContrastiveForm::conventional);
  EXPECT_EQ(to_string(ContrastiveForm::paper), "paper");
  EXPECT_THROW(parse_contrastive_form("hadsell"), std::invalid_argument);
}

TEST(Contrastive, Rejections) {
  const std::vector<double> a = {0, 0}, b = {0};
  EXPECT_THROW(contrastive<double>(a, b, 0, 1.0), ShapeError);
  EXPECT_THROW(contrastive<double>(a, a, 2, 1.0), std::invalid_argument);
  EXPECT_THROW(contrastive<double>(a, a, 0, 0.0), std::invalid_argument);
}

TEST(Contrastive, SymmetricAndNonNegativeProperty) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + rng.below(8);
    const Tensor<double> z = uniform_values<double>({2, d}, 1000 + trial, -2, 2);
    const std::span<const double> z1(z.data(), d), z2(z.data() + d, d);
    const double m = rng.uniform(0.1, 5.0);
    for (int c : {0, 1}) {
      for (auto form : {ContrastiveForm::paper, ContrastiveForm::conventional}) {
        const double l = contrastive(z1, z2, c, m, form);
        EXPECT_GE(l, 0.0);
        EXPECT_EQ(l, contrastive(z2, z1, c, m, form));
      }
    }
  }
}

TEST(Contrastive, MonotoneInSquaredDistance) {
  const double m = 2.0;
  double prev_gen = -1.0, prev_imp = 1e9;
  for (int k = 0; k <= 40; ++k) {
    const std::vector<double> o = {0.0}, p = {0.05 * k};
    const double sq = p[0] * p[0];
    const double gen = contrastive<double>(o, p, 0, m), imp = contrastive<double>(o, p, 1, m);
    if (k > 0) {
      EXPECT_GT(gen, prev_gen);
    }
    EXPECT_LE(imp, prev_imp);
    if (sq >= m) {
      EXPECT_EQ(imp, 0.0);
    }
    prev_gen = gen;
    prev_imp = imp;
  }
}

TEST(CoupledLoss, Oracles) {
  EXPECT_EQ(coupled_loss(Tensor<double>({3, 4}, 0.7), idx({1, 1, 1}), 1.0), 0.0);
  EXPECT_NEAR(coupled_loss(Tensor<double>({2, 4}, 0.7), idx({0, 1}), 1.0), 0.25, 1e-12);
  const Tensor<double> z = Tensor<double>::from({2, 2}, {0, 0, 0.6, 0.8});  // squared distance 1
  EXPECT_NEAR(coupled_loss(z, idx({5, 5}), 1.0), 1.0 / 4.0, 1e-12);
}

TEST(CoupledLoss, GeneralIdenticalEmbeddingsFormula) {
  for (std::size_t n = 2; n <= 6; ++n) {
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    const double m = 1.3;
    const double expect = static_cast<double>(n * n - n) / static_cast<double>(n * n) * (m / 2.0);
    EXPECT_NEAR(coupled_loss(Tensor<double>({n, 3}, -0.2), ids, m), expect, 1e-12);
  }
}

TEST(CoupledLoss, PermutationInvariantProperty) {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(6), d = 1 + rng.below(5);
    const Tensor<double> z = uniform_values<double>({n, d}, 2000 + trial);
    std::vector<std::size_t> ids(n);
    for (auto& v : ids) v = rng.below(3);
    const auto perm = rng.permutation(n);
    Tensor<double> zp({n, d});
    std::vector<std::size_t> ip(n);
    for (std::size_t i = 0; i < n; ++i) {
      ip[i] = ids[perm[i]];
      for (std::size_t q = 0; q < d; ++q) zp[i * d + q] = z[perm[i] * d + q];
    }
    EXPECT_NEAR(coupled_loss(z, ids, 1.0), coupled_loss(zp, ip, 1.0), 1e-12);
    EXPECT_GE(coupled_loss(z, ids, 1.0), 0.0);
  }
}

TEST(CoupledLoss, GradientMatchesFiniteDifferences) {
  const Tensor<double> z = uniform_values<double>({5, 3}, 9);
  const auto ids = idx({0, 0, 1, 2, 1});
  for (auto form : {ContrastiveForm::paper, ContrastiveForm::conventional}) {
    // Squared distances in [-1,1]^3 stay below 12, so margin 20 keeps every hinge active.
    const auto r = grad_check<double>([&](Tape<double>& t, Var v) { return coupled_loss(t, v, ids, 20.0, form).var; },
                                      z, 1e-5);
    EXPECT_LT(r.max_relative_error, 1e-6);
  }
}

TEST(CoupledLoss, RejectsBadInput) {
  EXPECT_THROW(coupled_loss(Tensor<double>({2, 2}), idx({0}), 1.0), ShapeError);
  EXPECT_THROW(coupled_loss(Tensor<double>({2, 2}), idx({0, 1}), -1.0), std::invalid_argument);
}

TEST(Losses, NonNegativeOnRandomInputsProperty) {
  Rng rng(10);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(4), c = 2 + rng.below(4), k = 1 + rng.below(4);
    const Tensor<double> logits = uniform_values<double>({n, c}, 3000 + trial, -30, 30);
    const Tensor<double> sb = uniform_values<double>({n, k}, 4000 + trial, -30, 30);
    Tensor<double> at({n, k});
    std::vector<std::size_t> labels(n);
    for (auto& v : at.values()) v = static_cast<double>(rng.below(2));
    for (auto& v : labels) v = rng.below(c);
    EXPECT_GE(e1(logits, labels).scalar, 0.0);
    EXPECT_GE(e2(sb, at).scalar, 0.0);
    EXPECT_GE(e3(logits, labels, sb, at).scalar, 0.0);
  }
}

}  // namespace
}  // namespace adpr
