#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "adpr/autodiff.hpp"

namespace adpr {

/// Raised when the checked function is not finite at a probed point.
class NonFiniteError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Builds a scalar loss on the tape from the variable bound to the probed point.
template <typename T>
using TapeFunction = std::function<Var(Tape<T>&, Var)>;

/// Central-difference check of the tape gradient of `f` at `point`.
/// `coordinates` restricts the probe set; empty means every coordinate.
template <typename T>
GradCheckResult grad_check(const TapeFunction<T>& f, const Tensor<T>& point, T eps,
                           std::span<const std::size_t> coordinates = {}) {
  Tensor<T> x = point;
  Tensor<T> analytic;
  {
    Tape<T> tape;
    Var v = tape.parameter(x);
    Var loss = f(tape, v);
    const T value = tape.value(loss)[0];
    if (!std::isfinite(value)) throw NonFiniteError("grad_check: f is not finite at the base point");
    tape.backward(loss);
    analytic = tape.grad(v);
  }
  auto evaluate = [&](std::size_t idx) {
    Tape<T> tape;
    tape.set_grad_enabled(false);
    Var loss = f(tape, tape.parameter(x, false));
    const T value = tape.value(loss)[0];
    if (!std::isfinite(value)) {
      throw NonFiniteError("grad_check: f is not finite near coordinate " + std::to_string(idx));
    }
    return static_cast<double>(value);
  };

  GradCheckResult result;
  auto probe = [&](std::size_t idx) {
    const T saved = x[idx];
    x[idx] = saved + eps;
    const double up = evaluate(idx);
    x[idx] = saved - eps;
    const double down = evaluate(idx);
    x[idx] = saved;
    const double numeric = (up - down) / (2.0 * static_cast<double>(eps));
    const double err = relative_error(static_cast<double>(analytic[idx]), numeric);
    if (result.checked == 0 || err > result.max_relative_error) {
      result.max_relative_error = err;
      result.worst_index = idx;
      result.worst_analytic = static_cast<double>(analytic[idx]);
      result.worst_numeric = numeric;
    }
    ++result.checked;
  };
  if (coordinates.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) probe(i);
  } else {
    for (std::size_t i : coordinates) probe(i);
  }
  return result;
}

/// Convenience overload for plain scalar functions of a single tensor.
template <typename T>
GradCheckResult grad_check(const TapeFunction<T>& f, T point, T eps) {
  return grad_check<T>(f, Tensor<T>({1}, point), eps);
}

}  // namespace adpr
