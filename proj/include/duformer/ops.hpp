#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

#include "duformer/tensor.hpp"

namespace duformer {

// ---------------------------------------------------------------------------
// Broadcasting for pointwise binary ops. Supported pairs:
//   - identical shapes
//   - one operand scalar (numel 1)
//   - [N,C,1,1] against [N,C,H,W]   (per-channel gate)
//   - [N,1,H,W] against [N,C,H,W]   (per-pixel gate)
//   - [D] against [...,D]           (trailing-dim vector, e.g. linear bias)
// ---------------------------------------------------------------------------

namespace detail {

enum class BKind { same, scalar, channel, spatial, lastdim };

struct OperandIndex {
  BKind kind = BKind::same;
  int64_t C = 0, HW = 0, CHW = 0, D = 0;

  int64_t operator()(int64_t i) const {
    switch (kind) {
      case BKind::same: return i;
      case BKind::scalar: return 0;
      case BKind::channel: return (i / CHW) * C + (i / HW) % C;
      case BKind::spatial: return (i / CHW) * HW + i % HW;
      case BKind::lastdim: return i % D;
    }
    return 0;
  }
};

inline bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

// Fills `small` with the mapping of the broadcast operand; `out` is the full
// shape. Returns false when the pair is not broadcastable.
inline bool resolve_broadcast(const Shape& small_s, const Shape& big_s, OperandIndex& small) {
  if (shape_numel(small_s) == 1) {
    small.kind = BKind::scalar;
    return true;
  }
  if (small_s.size() == 4 && big_s.size() == 4 && small_s[0] == big_s[0]) {
    if (small_s[1] == big_s[1] && small_s[2] == 1 && small_s[3] == 1) {
      small.kind = BKind::channel;
      small.C = big_s[1];
      small.HW = big_s[2] * big_s[3];
      small.CHW = big_s[1] * small.HW;
      return true;
    }
    if (small_s[1] == 1 && small_s[2] == big_s[2] && small_s[3] == big_s[3]) {
      small.kind = BKind::spatial;
      small.HW = big_s[2] * big_s[3];
      small.CHW = big_s[1] * small.HW;
      return true;
    }
  }
  if (small_s.size() == 1 && !big_s.empty() && big_s.back() == small_s[0]) {
    small.kind = BKind::lastdim;
    small.D = small_s[0];
    return true;
  }
  return false;
}

template <typename T, class F, class DA, class DB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, F f, DA dfda,
                    DB dfdb) {
  OperandIndex ia, ib;
  Shape out_shape;
  if (shape_eq(a.shape(), b.shape())) {
    out_shape = a.shape();
  } else if (resolve_broadcast(b.shape(), a.shape(), ib)) {
    out_shape = a.shape();
  } else if (resolve_broadcast(a.shape(), b.shape(), ia)) {
    out_shape = b.shape();
  } else {
    throw std::invalid_argument(std::string(name) + ": shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " are not broadcastable");
  }

  const int64_t n = shape_numel(out_shape);
  Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
  const auto& av = a.data();
  const auto& bv = b.data();
  auto& ov = out.mutable_data();
  for (int64_t i = 0; i < n; ++i) ov[i] = f(av[ia(i)], bv[ib(i)]);

  if (Tape<T>* tape = recording_tape<T>({&a, &b})) {
    mark_output(tape, out);
    auto an = a.node(), bn = b.node(), on = out.node();
    const bool need_a = a.tracked(), need_b = b.tracked();
    tape->record([=]() {
      if (on->grad.empty()) return;
      if (need_a) an->ensure_grad();
      if (need_b) bn->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const T g = on->grad[i];
        if (g == T(0)) continue;
        const int64_t ja = ia(i), jb = ib(i);
        if (need_a) an->grad[ja] += g * dfda(an->data[ja], bn->data[jb], on->data[i]);
        if (need_b) bn->grad[jb] += g * dfdb(an->data[ja], bn->data[jb], on->data[i]);
      }
    });
  }
  return out;
}

template <typename T, class F, class DF>
Tensor<T> unary_op(const Tensor<T>& x, F f, DF dfdx) {
  const int64_t n = x.numel();
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const auto& xv = x.data();
  auto& ov = out.mutable_data();
  for (int64_t i = 0; i < n; ++i) ov[i] = f(xv[i]);

  if (Tape<T>* tape = recording_tape<T>({&x})) {
    mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        xn->grad[i] += on->grad[i] * dfdx(xn->data[i], on->data[i]);
    });
  }
  return out;
}

}  // namespace detail

// --------------------------------- pointwise -------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T x, T y, T) { return -x / (y * y); });
}

// Elementwise maximum; ties route gradient to the first operand.
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      "maximum", a, b, [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y, T) { return x >= y ? T(1) : T(0); },
      [](T x, T y, T) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary_op(
      x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return detail::unary_op(x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary_op(x, [s](T v) { return s * v; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
  return detail::unary_op(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

// max(x, lo); the boundary point passes gradient through.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
  return detail::unary_op(
      x, [lo](T v) { return v < lo ? lo : v; },
      [lo](T v, T) { return v >= lo ? T(1) : T(0); });
}

template <typename T>
Tensor<T> log_op(const Tensor<T>& x) {
  for (T v : x.data())
    if (!(v > T(0)))
      throw std::invalid_argument("log: non-positive input " + std::to_string(double(v)) +
                                  "; clamp first");
  return detail::unary_op(x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& x, T p) {
  if (p != std::floor(p))
    for (T v : x.data())
      if (v < T(0))
        throw std::invalid_argument("pow: negative base with non-integer exponent");
  return detail::unary_op(
      x, [p](T v) { return std::pow(v, p); },
      [p](T v, T) { return p * std::pow(v, p - T(1)); });
}

template <typename T>
Tensor<T> sqrt_op(const Tensor<T>& x) {
  for (T v : x.data())
    if (v < T(0)) throw std::invalid_argument("sqrt: negative input");
  return detail::unary_op(
      x, [](T v) { return std::sqrt(v); },
      [](T, T y) { return T(0.5) / y; });
}

// --------------------------------- reductions ------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      const T g = on->grad[0];
      for (auto& gv : xn->grad) gv += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// --------------------------------- matmul ----------------------------------

// Batched contraction over the last two axes. Leading batch axes must match
// exactly, or one operand may be rank-2 and is broadcast across the other's
// batch.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw std::invalid_argument("matmul: operands must have rank >= 2");
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const int64_t m = as[as.size() - 2], k = as[as.size() - 1];
  const int64_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner extents differ, " + shape_str(as) + " x " +
                                shape_str(bs));

  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  Shape batch;
  bool a_bcast = false, b_bcast = false;
  if (abatch == bbatch) {
    batch = abatch;
  } else if (abatch.empty()) {
    batch = bbatch;
    a_bcast = true;
  } else if (bbatch.empty()) {
    batch = abatch;
    b_bcast = true;
  } else {
    throw std::invalid_argument("matmul: batch extents differ, " + shape_str(as) + " x " +
                                shape_str(bs));
  }
  const int64_t nb = shape_numel(batch);

  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out = Tensor<T>::zeros(std::move(out_shape));
  const T* A = a.data().data();
  const T* B = b.data().data();
  T* C = out.mutable_data().data();
  for (int64_t bi = 0; bi < nb; ++bi) {
    const T* Ab = A + (a_bcast ? 0 : bi * m * k);
    const T* Bb = B + (b_bcast ? 0 : bi * k * n);
    T* Cb = C + bi * m * n;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t l = 0; l < k; ++l) {
        const T av = Ab[i * k + l];
        if (av == T(0)) continue;
        const T* brow = Bb + l * n;
        T* crow = Cb + i * n;
        for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&a, &b})) {
    detail::mark_output(tape, out);
    auto an = a.node(), bn = b.node(), on = out.node();
    const bool need_a = a.tracked(), need_b = b.tracked();
    tape->record([=]() {
      if (on->grad.empty()) return;
      if (need_a) an->ensure_grad();
      if (need_b) bn->ensure_grad();
      for (int64_t bi = 0; bi < nb; ++bi) {
        const T* Ab = an->data.data() + (a_bcast ? 0 : bi * m * k);
        const T* Bb = bn->data.data() + (b_bcast ? 0 : bi * k * n);
        const T* Gb = on->grad.data() + bi * m * n;
        if (need_a) {
          T* dAb = an->grad.data() + (a_bcast ? 0 : bi * m * k);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j) {
              const T g = Gb[i * n + j];
              if (g == T(0)) continue;
              const T* brow = Bb + j;
              T* arow = dAb + i * k;
              for (int64_t l = 0; l < k; ++l) arow[l] += g * brow[l * n];
            }
        }
        if (need_b) {
          T* dBb = bn->grad.data() + (b_bcast ? 0 : bi * k * n);
          for (int64_t i = 0; i < m; ++i)
            for (int64_t l = 0; l < k; ++l) {
              const T av = Ab[i * k + l];
              if (av == T(0)) continue;
              const T* grow = Gb + i * n;
              T* brow = dBb + l * n;
              for (int64_t j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
        }
      }
    });
  }
  return out;
}

// --------------------------------- softmax ---------------------------------

// Row softmax over the last axis, computed with max subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  if (x.rank() < 1 || x.dim(x.rank() - 1) < 1)
    throw std::invalid_argument("softmax: needs a non-empty last axis");
  for (T v : x.data())
    if (!std::isfinite(double(v))) throw std::invalid_argument("softmax: non-finite input");

  const int64_t d = x.dim(x.rank() - 1);
  const int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* xv = x.data().data();
  T* ov = out.mutable_data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T* orow = ov + r * d;
    T mx = row[0];
    for (int64_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
    T s = T(0);
    for (int64_t i = 0; i < d; ++i) {
      orow[i] = std::exp(row[i] - mx);
      s += orow[i];
    }
    for (int64_t i = 0; i < d; ++i) orow[i] /= s;
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* y = on->data.data() + r * d;
        const T* gy = on->grad.data() + r * d;
        T* gx = xn->grad.data() + r * d;
        T dot = T(0);
        for (int64_t i = 0; i < d; ++i) dot += gy[i] * y[i];
        for (int64_t i = 0; i < d; ++i) gx[i] += y[i] * (gy[i] - dot);
      }
    });
  }
  return out;
}

// -------------------------------- layer norm -------------------------------

// Per-row normalization over the last axis followed by an affine map.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
  const int64_t d = x.dim(x.rank() - 1);
  if (d < 1) throw std::invalid_argument("layer_norm: empty last axis");
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw std::invalid_argument("layer_norm: gain/bias must have shape [" + std::to_string(d) +
                                "]");
  const int64_t rows = x.numel() / d;

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<size_t>(rows));
  const T* xv = x.data().data();
  const T* g = gain.data().data();
  const T* b = bias.data().data();
  T* ov = out.mutable_data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = xv + r * d;
    T mu = T(0);
    for (int64_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    const T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t i = 0; i < d; ++i) {
      const T xh = (row[i] - mu) * is;
      xhat[static_cast<size_t>(r * d + i)] = xh;
      ov[r * d + i] = g[i] * xh + b[i];
    }
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&x, &gain, &bias})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
    const bool need_x = x.tracked(), need_g = gain.tracked(), need_b = bias.tracked();
    tape->record([=, xh = std::move(xhat), is = std::move(inv_std)]() {
      if (on->grad.empty()) return;
      if (need_x) xn->ensure_grad();
      if (need_g) gn->ensure_grad();
      if (need_b) bn->ensure_grad();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gy = on->grad.data() + r * d;
        const T* xhr = xh.data() + r * d;
        if (need_g || need_b) {
          for (int64_t i = 0; i < d; ++i) {
            if (need_g) gn->grad[i] += gy[i] * xhr[i];
            if (need_b) bn->grad[i] += gy[i];
          }
        }
        if (need_x) {
          T m1 = T(0), m2 = T(0);
          for (int64_t i = 0; i < d; ++i) {
            const T t = gy[i] * gn->data[i];
            m1 += t;
            m2 += t * xhr[i];
          }
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          T* gx = xn->grad.data() + r * d;
          const T isr = is[static_cast<size_t>(r)];
          for (int64_t i = 0; i < d; ++i)
            gx[i] += isr * (gy[i] * gn->data[i] - m1 - xhr[i] * m2);
        }
      }
    });
  }
  return out;
}

// -------------------------------- convolution ------------------------------

struct ConvGeom {
  int sh = 1, sw = 1;  // stride
  int ph = 0, pw = 0;  // zero padding
  int dh = 1, dw = 1;  // dilation
};

inline int64_t conv_out_extent(int64_t in, int pad, int dil, int64_t k, int stride) {
  return (in + 2 * pad - dil * (k - 1) - 1) / stride + 1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                 ConvGeom g = {}) {
  if (input.rank() != 4 || weight.rank() != 4)
    throw std::invalid_argument("conv2d: input and weight must be rank 4");
  const int64_t N = input.dim(0), Ci = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int64_t Co = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != Ci)
    throw std::invalid_argument("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                " input channels, input has " + std::to_string(Ci));
  if (kh < 1 || kw < 1 || g.dh < 1 || g.dw < 1 || g.sh < 1 || g.sw < 1 || g.ph < 0 || g.pw < 0)
    throw std::invalid_argument("conv2d: kernel/stride/dilation must be positive");
  if (H + 2 * g.ph < g.dh * (kh - 1) + 1 || W + 2 * g.pw < g.dw * (kw - 1) + 1)
    throw std::invalid_argument("conv2d: padded extent smaller than effective kernel extent");
  if (bias && bias->shape() != Shape{Co})
    throw std::invalid_argument("conv2d: bias must have shape [" + std::to_string(Co) + "]");
  const int64_t Ho = conv_out_extent(H, g.ph, g.dh, kh, g.sh);
  const int64_t Wo = conv_out_extent(W, g.pw, g.dw, kw, g.sw);
  if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: non-positive output extent");

  Tensor<T> out = Tensor<T>::zeros({N, Co, Ho, Wo});
  const T* X = input.data().data();
  const T* Wt = weight.data().data();
  T* Y = out.mutable_data().data();

  for (int64_t n = 0; n < N; ++n) {
    const T* Xn = X + n * Ci * H * W;
    T* Yn = Y + n * Co * Ho * Wo;
    for (int64_t co = 0; co < Co; ++co) {
      const T bv = bias ? bias->data()[static_cast<size_t>(co)] : T(0);
      T* Yc = Yn + co * Ho * Wo;
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) Yc[oh * Wo + ow] = bv;
      for (int64_t ci = 0; ci < Ci; ++ci) {
        const T* Xc = Xn + ci * H * W;
        const T* Wc = Wt + (co * Ci + ci) * kh * kw;
        for (int64_t fh = 0; fh < kh; ++fh)
          for (int64_t fw = 0; fw < kw; ++fw) {
            const T wv = Wc[fh * kw + fw];
            if (wv == T(0)) continue;
            for (int64_t oh = 0; oh < Ho; ++oh) {
              const int64_t ih = oh * g.sh - g.ph + fh * g.dh;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = Xc + ih * W;
              T* yrow = Yc + oh * Wo;
              for (int64_t ow = 0; ow < Wo; ++ow) {
                const int64_t iw = ow * g.sw - g.pw + fw * g.dw;
                if (iw < 0 || iw >= W) continue;
                yrow[ow] += wv * xrow[iw];
              }
            }
          }
      }
    }
  }

  const Tensor<T> bias_t = bias ? *bias : Tensor<T>();
  Tape<T>* tape = Tape<T>::active();
  const bool track = input.tracked() || weight.tracked() || (bias && bias_t.tracked());
  if (tape && !tape->consumed() && track) {
    detail::mark_output(tape, out);
    auto xn = input.node(), wn = weight.node(), on = out.node();
    std::shared_ptr<detail::TensorNode<T>> bn = bias ? bias_t.node() : nullptr;
    const bool need_x = input.tracked(), need_w = weight.tracked();
    const bool need_b = bias && bias_t.tracked();
    tape->record([=]() {
      if (on->grad.empty()) return;
      if (need_x) xn->ensure_grad();
      if (need_w) wn->ensure_grad();
      if (need_b) bn->ensure_grad();
      for (int64_t n = 0; n < N; ++n) {
        const T* Xn = xn->data.data() + n * Ci * H * W;
        T* dXn = need_x ? xn->grad.data() + n * Ci * H * W : nullptr;
        const T* Gn = on->grad.data() + n * Co * Ho * Wo;
        for (int64_t co = 0; co < Co; ++co) {
          const T* Gc = Gn + co * Ho * Wo;
          if (need_b) {
            T acc = T(0);
            for (int64_t i = 0; i < Ho * Wo; ++i) acc += Gc[i];
            bn->grad[static_cast<size_t>(co)] += acc;
          }
          for (int64_t ci = 0; ci < Ci; ++ci) {
            const T* Xc = Xn + ci * H * W;
            T* dXc = need_x ? dXn + ci * H * W : nullptr;
            const T* Wc = wn->data.data() + (co * Ci + ci) * kh * kw;
            T* dWc = need_w ? wn->grad.data() + (co * Ci + ci) * kh * kw : nullptr;
            for (int64_t fh = 0; fh < kh; ++fh)
              for (int64_t fw = 0; fw < kw; ++fw) {
                const T wv = Wc[fh * kw + fw];
                T wacc = T(0);
                for (int64_t oh = 0; oh < Ho; ++oh) {
                  const int64_t ih = oh * g.sh - g.ph + fh * g.dh;
                  if (ih < 0 || ih >= H) continue;
                  const T* grow = Gc + oh * Wo;
                  const T* xrow = Xc + ih * W;
                  T* dxrow = need_x ? dXc + ih * W : nullptr;
                  for (int64_t ow = 0; ow < Wo; ++ow) {
                    const int64_t iw = ow * g.sw - g.pw + fw * g.dw;
                    if (iw < 0 || iw >= W) continue;
                    const T gv = grow[ow];
                    if (gv == T(0)) continue;
                    if (need_x) dxrow[iw] += gv * wv;
                    wacc += gv * xrow[iw];
                  }
                }
                if (need_w) dWc[fh * kw + fw] += wacc;
              }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------- pooling --------------------------------

namespace detail {
inline void check_pool_args(const char* name, int64_t H, int64_t W, int kh, int kw, int sh,
                            int sw) {
  if (kh < 1 || kw < 1 || sh < 1 || sw < 1)
    throw std::invalid_argument(std::string(name) + ": kernel and stride must be positive");
  if (kh > H || kw > W)
    throw std::invalid_argument(std::string(name) + ": window " + std::to_string(kh) + "x" +
                                std::to_string(kw) + " larger than input " + std::to_string(H) +
                                "x" + std::to_string(W));
}
}  // namespace detail

// Max pooling; backward routes gradient to the first (row-major) maximum of
// each window.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int kh, int kw, int sh, int sw) {
  if (x.rank() != 4) throw std::invalid_argument("max_pool2d: input must be rank 4");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::check_pool_args("max_pool2d", H, W, kh, kw, sh, sw);
  const int64_t Ho = (H - kh) / sh + 1, Wo = (W - kw) / sw + 1;

  Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
  std::vector<int64_t> arg(static_cast<size_t>(out.numel()));
  const T* X = x.data().data();
  T* Y = out.mutable_data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* Xc = X + nc * H * W;
    T* Yc = Y + nc * Ho * Wo;
    int64_t* Ac = arg.data() + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        T best = Xc[(oh * sh) * W + ow * sw];
        int64_t besti = (oh * sh) * W + ow * sw;
        for (int64_t fh = 0; fh < kh; ++fh)
          for (int64_t fw = 0; fw < kw; ++fw) {
            const int64_t i = (oh * sh + fh) * W + ow * sw + fw;
            if (Xc[i] > best) {
              best = Xc[i];
              besti = i;
            }
          }
        Yc[oh * Wo + ow] = best;
        Ac[oh * Wo + ow] = nc * H * W + besti;
      }
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=, a = std::move(arg)]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < a.size(); ++i) xn->grad[static_cast<size_t>(a[i])] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, int kh, int kw, int sh, int sw) {
  if (x.rank() != 4) throw std::invalid_argument("avg_pool2d: input must be rank 4");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  detail::check_pool_args("avg_pool2d", H, W, kh, kw, sh, sw);
  const int64_t Ho = (H - kh) / sh + 1, Wo = (W - kw) / sw + 1;
  const T inv = T(1) / static_cast<T>(kh * kw);

  Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
  const T* X = x.data().data();
  T* Y = out.mutable_data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* Xc = X + nc * H * W;
    T* Yc = Y + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh)
      for (int64_t ow = 0; ow < Wo; ++ow) {
        T acc = T(0);
        for (int64_t fh = 0; fh < kh; ++fh)
          for (int64_t fw = 0; fw < kw; ++fw) acc += Xc[(oh * sh + fh) * W + ow * sw + fw];
        Yc[oh * Wo + ow] = acc * inv;
      }
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        T* gX = xn->grad.data() + nc * H * W;
        const T* gY = on->grad.data() + nc * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh)
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const T g = gY[oh * Wo + ow] * inv;
            if (g == T(0)) continue;
            for (int64_t fh = 0; fh < kh; ++fh)
              for (int64_t fw = 0; fw < kw; ++fw) gX[(oh * sh + fh) * W + ow * sw + fw] += g;
          }
      }
    });
  }
  return out;
}

// Output bin (i,j) averages input rows [floor(i*H/ht), ceil((i+1)*H/ht)).
template <typename T>
Tensor<T> adaptive_avg_pool2d(const Tensor<T>& x, int64_t ht, int64_t wt) {
  if (x.rank() != 4) throw std::invalid_argument("adaptive_avg_pool2d: input must be rank 4");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (ht < 1 || wt < 1) throw std::invalid_argument("adaptive_avg_pool2d: zero target extent");
  if (ht > H || wt > W)
    throw std::invalid_argument("adaptive_avg_pool2d: target " + std::to_string(ht) + "x" +
                                std::to_string(wt) + " exceeds input " + std::to_string(H) + "x" +
                                std::to_string(W));

  auto bin_lo = [](int64_t i, int64_t in, int64_t out) { return (i * in) / out; };
  auto bin_hi = [](int64_t i, int64_t in, int64_t out) {
    return ((i + 1) * in + out - 1) / out;
  };

  Tensor<T> out = Tensor<T>::zeros({N, C, ht, wt});
  const T* X = x.data().data();
  T* Y = out.mutable_data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* Xc = X + nc * H * W;
    T* Yc = Y + nc * ht * wt;
    for (int64_t i = 0; i < ht; ++i) {
      const int64_t h0 = bin_lo(i, H, ht), h1 = bin_hi(i, H, ht);
      for (int64_t j = 0; j < wt; ++j) {
        const int64_t w0 = bin_lo(j, W, wt), w1 = bin_hi(j, W, wt);
        T acc = T(0);
        for (int64_t h = h0; h < h1; ++h)
          for (int64_t w = w0; w < w1; ++w) acc += Xc[h * W + w];
        Yc[i * wt + j] = acc / static_cast<T>((h1 - h0) * (w1 - w0));
      }
    }
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        T* gX = xn->grad.data() + nc * H * W;
        const T* gY = on->grad.data() + nc * ht * wt;
        for (int64_t i = 0; i < ht; ++i) {
          const int64_t h0 = bin_lo(i, H, ht), h1 = bin_hi(i, H, ht);
          for (int64_t j = 0; j < wt; ++j) {
            const int64_t w0 = bin_lo(j, W, wt), w1 = bin_hi(j, W, wt);
            const T g = gY[i * wt + j] / static_cast<T>((h1 - h0) * (w1 - w0));
            if (g == T(0)) continue;
            for (int64_t h = h0; h < h1; ++h)
              for (int64_t w = w0; w < w1; ++w) gX[h * W + w] += g;
          }
        }
      }
    });
  }
  return out;
}

// ------------------------------ bilinear resize ----------------------------

// Upsampling with the align-corners-false convention: source coordinate is
// (dst + 0.5) * (in/out) - 0.5, clamped to the valid range.
template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int64_t Ho, int64_t Wo) {
  if (x.rank() != 4) throw std::invalid_argument("bilinear_upsample: input must be rank 4");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (Ho < H || Wo < W)
    throw std::invalid_argument("bilinear_upsample: target extent smaller than input");

  struct Lerp {
    int64_t i0, i1;
    T f;
  };
  auto make = [](int64_t out, int64_t in) {
    std::vector<Lerp> v(static_cast<size_t>(out));
    const double s = static_cast<double>(in) / static_cast<double>(out);
    for (int64_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * s - 0.5;
      if (src < 0) src = 0;
      if (src > static_cast<double>(in - 1)) src = static_cast<double>(in - 1);
      const int64_t i0 = static_cast<int64_t>(src);
      v[static_cast<size_t>(o)] = {i0, std::min(i0 + 1, in - 1), static_cast<T>(src - double(i0))};
    }
    return v;
  };
  const auto hl = make(Ho, H), wl = make(Wo, W);

  Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
  const T* X = x.data().data();
  T* Y = out.mutable_data().data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* Xc = X + nc * H * W;
    T* Yc = Y + nc * Ho * Wo;
    for (int64_t oh = 0; oh < Ho; ++oh) {
      const auto& lh = hl[static_cast<size_t>(oh)];
      for (int64_t ow = 0; ow < Wo; ++ow) {
        const auto& lw = wl[static_cast<size_t>(ow)];
        const T v00 = Xc[lh.i0 * W + lw.i0], v01 = Xc[lh.i0 * W + lw.i1];
        const T v10 = Xc[lh.i1 * W + lw.i0], v11 = Xc[lh.i1 * W + lw.i1];
        const T top = v00 + (v01 - v00) * lw.f;
        const T bot = v10 + (v11 - v10) * lw.f;
        Yc[oh * Wo + ow] = top + (bot - top) * lh.f;
      }
    }
  }

  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        T* gX = xn->grad.data() + nc * H * W;
        const T* gY = on->grad.data() + nc * Ho * Wo;
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const auto& lh = hl[static_cast<size_t>(oh)];
          for (int64_t ow = 0; ow < Wo; ++ow) {
            const T g = gY[oh * Wo + ow];
            if (g == T(0)) continue;
            const auto& lw = wl[static_cast<size_t>(ow)];
            gX[lh.i0 * W + lw.i0] += g * (T(1) - lh.f) * (T(1) - lw.f);
            gX[lh.i0 * W + lw.i1] += g * (T(1) - lh.f) * lw.f;
            gX[lh.i1 * W + lw.i0] += g * lh.f * (T(1) - lw.f);
            gX[lh.i1 * W + lw.i1] += g * lh.f * lw.f;
          }
        }
      }
    });
  }
  return out;
}

// ------------------------------ shape plumbing -----------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw std::invalid_argument("reshape: " + shape_str(x.shape()) + " to " +
                                shape_str(new_shape) + " changes element count");
  Tensor<T> out = Tensor<T>::from(std::move(new_shape), x.data());
  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < on->grad.size(); ++i) xn->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int64_t>& perm) {
  const int64_t r = x.rank();
  if (static_cast<int64_t>(perm.size()) != r)
    throw std::invalid_argument("permute: axis list length mismatch");
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape out_shape(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const int64_t p = perm[static_cast<size_t>(i)];
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)])
      throw std::invalid_argument("permute: invalid axis permutation");
    seen[static_cast<size_t>(p)] = true;
    out_shape[static_cast<size_t>(i)] = x.dim(p);
  }

  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
  for (int64_t i = r - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.dim(i + 1);

  // source linear index as a function of the output multi-index
  std::vector<int64_t> src_stride(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i)
    src_stride[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  const int64_t n = x.numel();
  std::vector<int64_t> src_index(static_cast<size_t>(n));
  {
    std::vector<int64_t> idx(static_cast<size_t>(r), 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
      src_index[static_cast<size_t>(i)] = src;
      for (int64_t a = r - 1; a >= 0; --a) {
        idx[static_cast<size_t>(a)]++;
        src += src_stride[static_cast<size_t>(a)];
        if (idx[static_cast<size_t>(a)] < out_shape[static_cast<size_t>(a)]) break;
        src -= src_stride[static_cast<size_t>(a)] * out_shape[static_cast<size_t>(a)];
        idx[static_cast<size_t>(a)] = 0;
      }
    }
  }

  Tensor<T> out = Tensor<T>::zeros(out_shape);
  auto& ov = out.mutable_data();
  const auto& xv = x.data();
  for (int64_t i = 0; i < n; ++i) ov[static_cast<size_t>(i)] = xv[static_cast<size_t>(src_index[static_cast<size_t>(i)])];

  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=, map = std::move(src_index)]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (size_t i = 0; i < map.size(); ++i)
        xn->grad[static_cast<size_t>(map[i])] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int64_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  const Shape& s0 = parts[0].shape();
  const int64_t r = static_cast<int64_t>(s0.size());
  if (axis < 0 || axis >= r) throw std::invalid_argument("concat: axis out of range");
  int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw std::invalid_argument("concat: rank mismatch");
    for (int64_t i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != s0[static_cast<size_t>(i)])
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                    shape_str(s0));
    axis_total += p.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s0[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= s0[static_cast<size_t>(i)];

  Tensor<T> out = Tensor<T>::zeros(out_shape);
  T* O = out.mutable_data().data();
  const int64_t out_row = axis_total * inner;
  int64_t offset = 0;
  for (const auto& p : parts) {
    const int64_t rows = p.dim(axis) * inner;
    const T* P = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::copy(P + o * rows, P + (o + 1) * rows, O + o * out_row + offset);
    offset += rows;
  }

  std::vector<const Tensor<T>*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tape<T>* tape = Tape<T>::active();
  bool any_tracked = false;
  for (const auto& p : parts) any_tracked = any_tracked || p.tracked();
  if (tape && !tape->consumed() && any_tracked) {
    detail::mark_output(tape, out);
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    std::vector<int64_t> rows_of;
    for (const auto& p : parts) {
      nodes.push_back(p.node());
      rows_of.push_back(p.dim(axis) * inner);
    }
    auto on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      int64_t off = 0;
      for (size_t pi = 0; pi < nodes.size(); ++pi) {
        auto& nd = nodes[pi];
        const int64_t rows = rows_of[pi];
        if (nd->requires_grad || nd->tracked) {
          nd->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const T* g = on->grad.data() + o * out_row + off;
            T* dst = nd->grad.data() + o * rows;
            for (int64_t i = 0; i < rows; ++i) dst[i] += g[i];
          }
        }
        off += rows;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& x, int64_t axis, int64_t start, int64_t len) {
  const int64_t r = x.rank();
  if (axis < 0 || axis >= r) throw std::invalid_argument("narrow: axis out of range");
  if (start < 0 || len < 1 || start + len > x.dim(axis))
    throw std::invalid_argument("narrow: range [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of bounds for extent " +
                                std::to_string(x.dim(axis)));
  int64_t outer = 1, inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int64_t i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const int64_t in_row = x.dim(axis) * inner;
  const int64_t out_row = len * inner;

  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* X = x.data().data();
  T* O = out.mutable_data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::copy(X + o * in_row + start * inner, X + o * in_row + (start + len) * inner,
              O + o * out_row);

  if (Tape<T>* tape = detail::recording_tape<T>({&x})) {
    detail::mark_output(tape, out);
    auto xn = x.node(), on = out.node();
    tape->record([=]() {
      if (on->grad.empty()) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < outer; ++o) {
        const T* g = on->grad.data() + o * out_row;
        T* dst = xn->grad.data() + o * in_row + start * inner;
        for (int64_t i = 0; i < out_row; ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

}  // namespace duformer
