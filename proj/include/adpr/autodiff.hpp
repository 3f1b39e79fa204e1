#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "adpr/tensor.hpp"

namespace adpr {

/// Handle to a node on a Tape.
struct Var {
  std::size_t id = std::numeric_limits<std::size_t>::max();
  bool valid() const noexcept { return id != std::numeric_limits<std::size_t>::max(); }
};

/// Reverse-mode tape. Nodes are appended in execution order, so reverse
/// creation order is a valid reverse topological order.
///
/// Parameters are bound by reference: the referenced tensors must outlive the
/// tape and must not be mutated while it is alive.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor<T> value) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    return Var{nodes_.size() - 1};
  }

  Var parameter(const Tensor<T>& ref, bool requires_grad = true) {
    Node& n = nodes_.emplace_back();
    n.external = &ref;
    n.requires_grad = requires_grad && grad_enabled_;
    return Var{nodes_.size() - 1};
  }

  /// Appends an op output. `backward` is dropped when no input needs a gradient.
  Var record(Tensor<T> value, bool requires_grad, BackwardFn backward) {
    Node& n = nodes_.emplace_back();
    n.owned = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    if (n.requires_grad) n.backward = std::move(backward);
    return Var{nodes_.size() - 1};
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = node(v);
    return n.external ? *n.external : n.owned;
  }

  bool requires_grad(Var v) const { return node(v).requires_grad; }

  /// Accumulation slot for a node's gradient, zero-initialized on first use.
  Tensor<T>& grad_slot(Var v) {
    Node& n = node(v);
    if (!n.has_grad) {
      n.grad = Tensor<T>::zeros(value(v).shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient of the last backward() target w.r.t. v; zeros when v is off-path.
  Tensor<T> grad(Var v) const {
    const Node& n = node(v);
    if (n.has_grad) return n.grad;
    return Tensor<T>::zeros(value(v).shape());
  }

  bool has_grad(Var v) const { return node(v).has_grad; }

  void backward(Var loss) {
    if (value(loss).size() != 1) {
      throw ShapeError("backward needs a scalar loss, got shape " + to_string(value(loss).shape()));
    }
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor<T>();
    }
    grad_slot(loss)[0] = T(1);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this);
    }
  }

  /// Turns off gradient recording for everything appended afterwards.
  void set_grad_enabled(bool enabled) noexcept { grad_enabled_ = enabled; }
  bool grad_enabled() const noexcept { return grad_enabled_; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// When enabled, relu and max_pool2d fold their branch decisions (active
  /// mask, argmax) into a running hash. Equal hashes mean the same linear piece.
  void set_branch_tracking(bool enabled) noexcept { track_branches_ = enabled; }
  bool branch_tracking() const noexcept { return track_branches_; }
  void mix_branch(std::uint64_t v) noexcept { branch_hash_ = (branch_hash_ ^ v) * 0x100000001b3ULL; }
  std::uint64_t branch_signature() const noexcept { return branch_hash_; }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  Node& node(Var v) {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape: invalid variable");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    if (v.id >= nodes_.size()) throw std::out_of_range("tape: invalid variable");
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;
  bool grad_enabled_ = true;
  bool track_branches_ = false;
  std::uint64_t branch_hash_ = 0xcbf29ce484222325ULL;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
MatrixMap<T> as_matrix(T* data, std::size_t rows, std::size_t cols) {
  return MatrixMap<T>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <typename T>
ConstMatrixMap<T> as_matrix(const T* data, std::size_t rows, std::size_t cols) {
  return ConstMatrixMap<T>(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

struct ConvGeometry {
  std::size_t n, c, h, w, f, kh, kw, stride, pad, oh, ow;
  std::size_t patch() const { return c * kh * kw; }
  std::size_t columns() const { return n * oh * ow; }
};

// col has shape [C*kh*kw, N*OH*OW].
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  const std::size_t cols = g.columns();
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* xin = x + (n * g.c + c) * g.h * g.w;
          T* out = row + n * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            T* o = out + oy * g.ow;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(o, o + g.ow, T(0));
              continue;
            }
            const T* xr = xin + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              o[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? T(0)
                                                                         : xr[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* dx) {
  const std::size_t cols = g.columns();
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.kh; ++ki) {
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = col + ((c * g.kh + ki) * g.kw + kj) * cols;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* din = dx + (n * g.c + c) * g.h * g.w;
          const T* in = row + n * plane;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                                      static_cast<std::ptrdiff_t>(g.pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            T* dr = din + static_cast<std::size_t>(iy) * g.w;
            const T* o = in + oy * g.ow;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                                        static_cast<std::ptrdiff_t>(g.pad);
              if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dr[static_cast<std::size_t>(ix)] += o[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// 2-D convolution (cross-correlation). input [N,C,H,W], kernel [F,C,kh,kw], bias [F].
template <typename T>
Var conv2d(Tape<T>& tape, Var input, Var kernel, Var bias, std::size_t stride = 1, std::size_t pad = 0) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& k = tape.value(kernel);
  const Tensor<T>& b = tape.value(bias);
  require_shape(x.rank() == 4 && k.rank() == 4, "conv2d", x.shape(), k.shape());
  require_shape(x.dim(1) == k.dim(1), "conv2d channel count", x.shape(), k.shape());
  require_shape(b.rank() == 1 && b.dim(0) == k.dim(0), "conv2d bias", k.shape(), b.shape());
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  require_shape(k.dim(2) <= x.dim(2) + 2 * pad && k.dim(3) <= x.dim(3) + 2 * pad, "conv2d kernel extent",
                x.shape(), k.shape());

  detail::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(2), k.dim(3), stride, pad, 0, 0};
  g.oh = detail::conv_out_size(g.h, g.kh, stride, pad);
  g.ow = detail::conv_out_size(g.w, g.kw, stride, pad);
  const std::size_t plane = g.oh * g.ow;

  auto col = std::make_shared<std::vector<T>>(g.patch() * g.columns());
  detail::im2col(x.data(), g, col->data());

  std::vector<T> out2(g.f * g.columns());
  auto out_m = detail::as_matrix(out2.data(), g.f, g.columns());
  out_m.noalias() = detail::as_matrix(k.data(), g.f, g.patch()) * detail::as_matrix(col->data(), g.patch(), g.columns());

  Tensor<T> out({g.n, g.f, g.oh, g.ow});
  for (std::size_t n = 0; n < g.n; ++n) {
    for (std::size_t f = 0; f < g.f; ++f) {
      const T* src = out2.data() + f * g.columns() + n * plane;
      T* dst = out.data() + (n * g.f + f) * plane;
      const T bf = b[f];
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] + bf;
    }
  }

  const bool need_x = tape.requires_grad(input);
  const bool need_k = tape.requires_grad(kernel);
  const bool need_b = tape.requires_grad(bias);
  if (!need_k) col.reset();
  Var result{tape.size()};
  return tape.record(std::move(out), need_x || need_k || need_b,
                     [=](Tape<T>& t) {
                       const Tensor<T>& gy = t.grad_slot(result);
                       std::vector<T> g2(g.f * g.columns());
                       for (std::size_t n = 0; n < g.n; ++n) {
                         for (std::size_t f = 0; f < g.f; ++f) {
                           const T* src = gy.data() + (n * g.f + f) * plane;
                           std::copy(src, src + plane, g2.data() + f * g.columns() + n * plane);
                         }
                       }
                       auto g2m = detail::as_matrix(static_cast<const T*>(g2.data()), g.f, g.columns());
                       if (need_b) {
                         Tensor<T>& db = t.grad_slot(bias);
                         // Plain loop: Eigen's vectorized sum order depends on buffer alignment.
                         for (std::size_t f = 0; f < g.f; ++f) {
                           const T* row = g2.data() + f * g.columns();
                           T acc = T(0);
                           for (std::size_t c = 0; c < g.columns(); ++c) acc += row[c];
                           db[f] += acc;
                         }
                       }
                       if (need_k) {
                         Tensor<T>& dk = t.grad_slot(kernel);
                         detail::as_matrix(dk.data(), g.f, g.patch()).noalias() +=
                             g2m * detail::as_matrix(static_cast<const T*>(col->data()), g.patch(), g.columns()).transpose();
                       }
                       if (need_x) {
                         std::vector<T> dcol(g.patch() * g.columns());
                         detail::as_matrix(dcol.data(), g.patch(), g.columns()).noalias() =
                             detail::as_matrix(t.value(kernel).data(), g.f, g.patch()).transpose() * g2m;
                         detail::col2im_add(dcol.data(), g, t.grad_slot(input).data());
                       }
                     });
}

/// Non-overlapping max pooling with a square window (window == stride).
/// Ties resolve to the first maximal element in row-major window order.
template <typename T>
Var max_pool2d(Tape<T>& tape, Var input, std::size_t window = 2) {
  const Tensor<T>& x = tape.value(input);
  if (x.rank() != 4) throw ShapeError("max_pool2d expects [N,C,H,W], got " + to_string(x.shape()));
  if (window == 0 || x.dim(2) < window || x.dim(3) < window) {
    throw ShapeError("max_pool2d window " + std::to_string(window) + " does not fit " + to_string(x.shape()));
  }
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / window, ow = w / window;
  Tensor<T> out({x.dim(0), x.dim(1), oh, ow});
  const bool need = tape.requires_grad(input);
  auto arg = std::make_shared<std::vector<std::uint32_t>>(need ? out.size() : 0);
  for (std::size_t p = 0; p < nc; ++p) {
    const T* xp = x.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * window) * w + ox * window;
        for (std::size_t dy = 0; dy < window; ++dy) {
          for (std::size_t dx = 0; dx < window; ++dx) {
            const std::size_t idx = (oy * window + dy) * w + ox * window + dx;
            if (xp[idx] > xp[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = xp[best];
        if (need) (*arg)[o] = static_cast<std::uint32_t>(p * h * w + best);
        if (tape.branch_tracking()) tape.mix_branch(best);
      }
    }
  }
  Var result{tape.size()};
  return tape.record(std::move(out), need, [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    Tensor<T>& dx = t.grad_slot(input);
    for (std::size_t o = 0; o < gy.size(); ++o) dx[(*arg)[o]] += gy[o];
  });
}

template <typename T>
Var relu(Tape<T>& tape, Var input) {
  Tensor<T> out = tape.value(input);
  for (T& v : out.values()) v = v > T(0) ? v : T(0);
  if (tape.branch_tracking()) {
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < out.size(); ++i) {
      word = (word << 1) | (out[i] > T(0) ? 1u : 0u);
      if (i % 64 == 63 || i + 1 == out.size()) tape.mix_branch(word);
    }
  }
  Var result{tape.size()};
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    const Tensor<T>& y = t.value(result);
    Tensor<T>& dx = t.grad_slot(input);
    for (std::size_t i = 0; i < y.size(); ++i) {
      if (y[i] > T(0)) dx[i] += gy[i];
    }
  });
}

template <typename T>
Var sigmoid(Tape<T>& tape, Var input) {
  Tensor<T> out = tape.value(input);
  for (T& v : out.values()) v = T(1) / (T(1) + std::exp(-v));
  Var result{tape.size()};
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    const Tensor<T>& y = t.value(result);
    Tensor<T>& dx = t.grad_slot(input);
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] += gy[i] * y[i] * (T(1) - y[i]);
  });
}

/// Row-wise softmax over the last axis of a [N,M] tensor, max-subtracted.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax expects [N,M], got " + to_string(x.shape()));
  Tensor<T> out = x;
  const std::size_t n = x.dim(0), m = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    T* row = out.data() + i * m;
    const T mx = *std::max_element(row, row + m);
    T sum = 0;
    for (std::size_t j = 0; j < m; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < m; ++j) row[j] /= sum;
  }
  return out;
}

template <typename T>
Var softmax(Tape<T>& tape, Var input) {
  Tensor<T> out = softmax_rows(tape.value(input));
  Var result{tape.size()};
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    const Tensor<T>& y = t.value(result);
    Tensor<T>& dx = t.grad_slot(input);
    const std::size_t n = y.dim(0), m = y.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += gy[i * m + j] * y[i * m + j];
      for (std::size_t j = 0; j < m; ++j) dx[i * m + j] += y[i * m + j] * (gy[i * m + j] - dot);
    }
  });
}

/// out = input · weight + bias, input [N,D], weight [D,M], bias [M].
template <typename T>
Var linear(Tape<T>& tape, Var input, Var weight, Var bias) {
  const Tensor<T>& x = tape.value(input);
  const Tensor<T>& w = tape.value(weight);
  const Tensor<T>& b = tape.value(bias);
  require_shape(x.rank() == 2 && w.rank() == 2 && x.dim(1) == w.dim(0), "linear", x.shape(), w.shape());
  require_shape(b.rank() == 1 && b.dim(0) == w.dim(1), "linear bias", w.shape(), b.shape());
  const std::size_t n = x.dim(0), d = x.dim(1), m = w.dim(1);
  Tensor<T> out({n, m});
  auto om = detail::as_matrix(out.data(), n, m);
  om.noalias() = detail::as_matrix(x.data(), n, d) * detail::as_matrix(w.data(), d, m);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] += b[j];
  }
  const bool need_x = tape.requires_grad(input);
  const bool need_w = tape.requires_grad(weight);
  const bool need_b = tape.requires_grad(bias);
  Var result{tape.size()};
  return tape.record(std::move(out), need_x || need_w || need_b, [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    auto gm = detail::as_matrix(gy.data(), n, m);
    if (need_b) {
      Tensor<T>& db = t.grad_slot(bias);
      // Fixed summation order, independent of buffer alignment.
      for (std::size_t i = 0; i < n; ++i) {
        const T* row = gy.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) db[j] += row[j];
      }
    }
    if (need_w) {
      Tensor<T>& dw = t.grad_slot(weight);
      detail::as_matrix(dw.data(), d, m).noalias() += detail::as_matrix(t.value(input).data(), n, d).transpose() * gm;
    }
    if (need_x) {
      Tensor<T>& dx = t.grad_slot(input);
      detail::as_matrix(dx.data(), n, d).noalias() += gm * detail::as_matrix(t.value(weight).data(), d, m).transpose();
    }
  });
}

/// Concatenates along `axis`; all other axes must agree.
template <typename T>
Var concat(Tape<T>& tape, Var a, Var b, std::size_t axis = 1) {
  const Tensor<T>& x = tape.value(a);
  const Tensor<T>& y = tape.value(b);
  bool ok = x.rank() == y.rank() && axis < x.rank();
  for (std::size_t i = 0; ok && i < x.rank(); ++i) ok = (i == axis) || x.dim(i) == y.dim(i);
  require_shape(ok, "concat on axis " + std::to_string(axis), x.shape(), y.shape());
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t xa = x.dim(axis) * inner, ya = y.dim(axis) * inner;
  Shape s = x.shape();
  s[axis] += y.dim(axis);
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data() + o * xa, xa, out.data() + o * (xa + ya));
    std::copy_n(y.data() + o * ya, ya, out.data() + o * (xa + ya) + xa);
  }
  const bool need_a = tape.requires_grad(a), need_b = tape.requires_grad(b);
  Var result{tape.size()};
  return tape.record(std::move(out), need_a || need_b, [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    if (need_a) {
      Tensor<T>& da = t.grad_slot(a);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < xa; ++i) da[o * xa + i] += gy[o * (xa + ya) + i];
    }
    if (need_b) {
      Tensor<T>& db = t.grad_slot(b);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < ya; ++i) db[o * ya + i] += gy[o * (xa + ya) + xa + i];
    }
  });
}

/// Slice [begin, end) of `axis` as a plain tensor copy.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw ShapeError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " out of range for " + to_string(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape s = x.shape();
  s[axis] = end - begin;
  Tensor<T> out(s);
  const std::size_t width = (end - begin) * inner, stride = x.dim(axis) * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data() + o * stride + begin * inner, width, out.data() + o * width);
  }
  return out;
}

/// [N, ...] -> [N, prod(...)]
template <typename T>
Var flatten(Tape<T>& tape, Var input) {
  const Tensor<T>& x = tape.value(input);
  if (x.rank() < 1) throw ShapeError("flatten of a scalar");
  const std::size_t n = x.dim(0);
  Tensor<T> out = x.reshaped({n, n ? x.size() / n : 0});
  Var result{tape.size()};
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    Tensor<T>& dx = t.grad_slot(input);
    for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += gy[i];
  });
}

template <typename T>
Var add(Tape<T>& tape, Var a, Var b) {
  const Tensor<T>& x = tape.value(a);
  const Tensor<T>& y = tape.value(b);
  require_shape(x.shape() == y.shape(), "add", x.shape(), y.shape());
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  const bool need_a = tape.requires_grad(a), need_b = tape.requires_grad(b);
  Var result{tape.size()};
  return tape.record(std::move(out), need_a || need_b, [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    if (need_a) {
      Tensor<T>& da = t.grad_slot(a);
      for (std::size_t i = 0; i < gy.size(); ++i) da[i] += gy[i];
    }
    if (need_b) {
      Tensor<T>& db = t.grad_slot(b);
      for (std::size_t i = 0; i < gy.size(); ++i) db[i] += gy[i];
    }
  });
}

template <typename T>
Var scale(Tape<T>& tape, Var a, T factor) {
  Tensor<T> out = tape.value(a);
  for (T& v : out.values()) v *= factor;
  Var result{tape.size()};
  return tape.record(std::move(out), tape.requires_grad(a), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    Tensor<T>& dx = t.grad_slot(a);
    for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += factor * gy[i];
  });
}

/// Sum of all elements, as a [1] tensor.
template <typename T>
Var sum(Tape<T>& tape, Var a) {
  const Tensor<T>& x = tape.value(a);
  T s = 0;
  for (T v : x.values()) s += v;
  Var result{tape.size()};
  return tape.record(Tensor<T>({1}, s), tape.requires_grad(a), [=](Tape<T>& t) {
    const T g = t.grad_slot(result)[0];
    Tensor<T>& dx = t.grad_slot(a);
    for (T& v : dx.values()) v += g;
  });
}

/// Elementwise product with a constant tensor (e.g. a random projection for checks).
template <typename T>
Var multiply_constant(Tape<T>& tape, Var a, const Tensor<T>& c) {
  const Tensor<T>& x = tape.value(a);
  require_shape(x.shape() == c.shape(), "multiply_constant", x.shape(), c.shape());
  Tensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  Var result{tape.size()};
  return tape.record(std::move(out), tape.requires_grad(a), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    Tensor<T>& dx = t.grad_slot(a);
    for (std::size_t i = 0; i < gy.size(); ++i) dx[i] += c[i] * gy[i];
  });
}

/// Row-wise x / sqrt(||x||^2 + 1e-12) of a [N,D] tensor.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("l2_normalize_rows: expected rank 2, got " + to_string(x.shape()));
  Tensor<T> out = x;
  const std::size_t n = x.dim(0), d = x.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    T ss = T(0);
    for (std::size_t q = 0; q < d; ++q) ss += x[i * d + q] * x[i * d + q];
    const T inv = T(1) / std::sqrt(ss + T(1e-12));
    for (std::size_t q = 0; q < d; ++q) out[i * d + q] *= inv;
  }
  return out;
}

template <typename T>
Var l2_normalize_rows(Tape<T>& tape, Var input) {
  Tensor<T> out = l2_normalize_rows(tape.value(input));
  Var result{tape.size()};
  return tape.record(std::move(out), tape.requires_grad(input), [=](Tape<T>& t) {
    const Tensor<T>& gy = t.grad_slot(result);
    const Tensor<T>& y = t.value(result);
    const Tensor<T>& x = t.value(input);
    Tensor<T>& dx = t.grad_slot(input);
    const std::size_t n = y.dim(0), d = y.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      T ss = T(0), dot = T(0);
      for (std::size_t q = 0; q < d; ++q) {
        ss += x[i * d + q] * x[i * d + q];
        dot += gy[i * d + q] * y[i * d + q];
      }
      const T inv = T(1) / std::sqrt(ss + T(1e-12));
      for (std::size_t q = 0; q < d; ++q) dx[i * d + q] += (gy[i * d + q] - y[i * d + q] * dot) * inv;
    }
  });
}

}  // namespace adpr
