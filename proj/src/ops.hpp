#pragma once

#include <tuple>

#include "kernels.hpp"
#include "tensor.hpp"

namespace unext {

template <typename T>
bool grad_wanted(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::current()) return false;
  for (const Tensor<T>* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> finite_checked(Tensor<T> t, const char* op) {
  if (finite_checks_enabled()) {
    for (const T v : t.vec()) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError(std::string(op) + " produced a non-finite value");
      }
    }
  }
  return t;
}

// -------------------------------------------------------------------------
// Elementwise

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "add");
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* pa = a.data();
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  Tensor<T> y = Tensor<T>::from_data(a.shape(), std::move(out));
  if (grad_wanted<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::add, yi, {ai, bi}, [ai, bi, yi] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i];
      }
    });
  }
  return finite_checked(std::move(y), "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "sub");
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* pa = a.data();
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  Tensor<T> y = Tensor<T>::from_data(a.shape(), std::move(out));
  if (grad_wanted<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::sub, yi, {ai, bi}, [ai, bi, yi] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (size_t i = 0; i < g.size(); ++i) bi->grad[i] -= g[i];
      }
    });
  }
  return finite_checked(std::move(y), "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "mul");
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* pa = a.data();
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  Tensor<T> y = Tensor<T>::from_data(a.shape(), std::move(out));
  if (grad_wanted<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::mul, yi, {ai, bi}, [ai, bi, yi] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (size_t i = 0; i < g.size(); ++i) bi->grad[i] += g[i] * ai->data[i];
      }
    });
  }
  return finite_checked(std::move(y), "mul");
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  check_same_shape(a, b, "div");
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* pa = a.data();
  const T* pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] / pb[i];
  Tensor<T> y = Tensor<T>::from_data(a.shape(), std::move(out));
  if (grad_wanted<T>({&a, &b})) {
    auto ai = a.impl(), bi = b.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::div, yi, {ai, bi}, [ai, bi, yi] {
      const auto& g = yi->grad;
      if (ai->requires_grad) {
        ensure_grad(*ai);
        for (size_t i = 0; i < g.size(); ++i) ai->grad[i] += g[i] / bi->data[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (size_t i = 0; i < g.size(); ++i) {
          bi->grad[i] -= g[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
        }
      }
    });
  }
  return finite_checked(std::move(y), "div");
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = -pa[i];
  Tensor<T> y = Tensor<T>::from_data(a.shape(), std::move(out));
  if (grad_wanted<T>({&a})) {
    auto ai = a.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::neg, yi, {ai}, [ai, yi] {
      if (!ai->requires_grad) return;
      ensure_grad(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] -= yi->grad[i];
    });
  }
  return finite_checked(std::move(y), "neg");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * factor;
  Tensor<T> y = Tensor<T>::from_data(a.shape(), std::move(out));
  if (grad_wanted<T>({&a})) {
    auto ai = a.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::scale, yi, {ai}, [ai, yi, factor] {
      if (!ai->requires_grad) return;
      ensure_grad(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i] * factor;
    });
  }
  return finite_checked(std::move(y), "scale");
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  std::vector<T> out(static_cast<size_t>(a.numel()));
  const T* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + value;
  Tensor<T> y = Tensor<T>::from_data(a.shape(), std::move(out));
  if (grad_wanted<T>({&a})) {
    auto ai = a.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::add_scalar, yi, {ai}, [ai, yi] {
      if (!ai->requires_grad) return;
      ensure_grad(*ai);
      for (size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
    });
  }
  return finite_checked(std::move(y), "add_scalar");
}

// x[n,c,h,w] + bias[c], broadcast over batch and spatial extents
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw ShapeError("add_channel_bias: expected x[n,c,h,w] and bias[c], got " +
                     shape_str(x.shape()) + " and " + shape_str(bias.shape()));
  }
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  const T* pb = bias.data();
  size_t i = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T bv = pb[ch];
      for (int64_t k = 0; k < hw; ++k, ++i) out[i] = px[i] + bv;
    }
  }
  Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
  if (grad_wanted<T>({&x, &bias})) {
    auto xi = x.impl(), bi = bias.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::add_channel_bias, yi, {xi, bi}, [xi, bi, yi, n, c, hw] {
      const auto& g = yi->grad;
      if (xi->requires_grad) {
        ensure_grad(*xi);
        for (size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i];
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        size_t i = 0;
        for (int64_t b = 0; b < n; ++b) {
          for (int64_t ch = 0; ch < c; ++ch) {
            T s = 0;
            for (int64_t k = 0; k < hw; ++k, ++i) s += g[i];
            bi->grad[static_cast<size_t>(ch)] += s;
          }
        }
      }
    });
  }
  return finite_checked(std::move(y), "add_channel_bias");
}

// -------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (const T v : a.vec()) s += v;
  Tensor<T> y = Tensor<T>::scalar(s);
  if (grad_wanted<T>({&a})) {
    auto ai = a.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::sum, yi, {ai}, [ai, yi] {
      if (!ai->requires_grad) return;
      ensure_grad(*ai);
      const T g = yi->grad[0];
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
    });
  }
  return finite_checked(std::move(y), "sum");
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  T s = 0;
  for (const T v : a.vec()) s += v;
  const T inv = T(1) / static_cast<T>(a.numel());
  Tensor<T> y = Tensor<T>::scalar(s * inv);
  if (grad_wanted<T>({&a})) {
    auto ai = a.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::mean, yi, {ai}, [ai, yi, inv] {
      if (!ai->requires_grad) return;
      ensure_grad(*ai);
      const T g = yi->grad[0] * inv;
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += g;
    });
  }
  return finite_checked(std::move(y), "mean");
}

// -------------------------------------------------------------------------
// Matrix product. Supports [m,k]x[k,n] plus a leading batch extent broadcast
// on either operand.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const bool a_batched = a.rank() == 3;
  const bool b_batched = b.rank() == 3;
  if ((a.rank() != 2 && a.rank() != 3) || (b.rank() != 2 && b.rank() != 3)) {
    throw ShapeError("matmul: operands must be rank 2 or 3, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  }
  const int64_t m = a.dim(a_batched ? 1 : 0);
  const int64_t ka = a.dim(a_batched ? 2 : 1);
  const int64_t kb = b.dim(b_batched ? 1 : 0);
  const int64_t n = b.dim(b_batched ? 2 : 1);
  if (ka != kb) {
    throw ShapeError("matmul: inner extents disagree, " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  int64_t batch = 1;
  if (a_batched && b_batched) {
    if (a.dim(0) != b.dim(0)) throw ShapeError("matmul: batch extents disagree");
    batch = a.dim(0);
  } else if (a_batched) {
    batch = a.dim(0);
  } else if (b_batched) {
    batch = b.dim(0);
  }
  const int64_t k = ka;
  Shape out_shape = (a_batched || b_batched) ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(static_cast<size_t>(batch * m * n));
  for (int64_t bi = 0; bi < batch; ++bi) {
    const T* pa = a.data() + (a_batched ? bi * m * k : 0);
    const T* pb = b.data() + (b_batched ? bi * k * n : 0);
    gemm_nn(pa, pb, out.data() + bi * m * n, m, k, n, false);
  }
  Tensor<T> y = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  if (grad_wanted<T>({&a, &b})) {
    auto ai = a.impl(), bimp = b.impl(), yi = y.impl();
    Tape<T>::current()->record(
        OpKind::matmul, yi, {ai, bimp}, [ai, bimp, yi, m, k, n, batch, a_batched, b_batched] {
          const T* g = yi->grad.data();
          if (ai->requires_grad) {
            ensure_grad(*ai);
            for (int64_t bi = 0; bi < batch; ++bi) {
              const T* gb = g + bi * m * n;
              const T* pb = bimp->data.data() + (b_batched ? bi * k * n : 0);
              T* da = ai->grad.data() + (a_batched ? bi * m * k : 0);
              // dA = g . B^T
              gemm_nt(gb, pb, da, m, n, k, true);
            }
          }
          if (bimp->requires_grad) {
            ensure_grad(*bimp);
            for (int64_t bi = 0; bi < batch; ++bi) {
              const T* gb = g + bi * m * n;
              const T* pa = ai->data.data() + (a_batched ? bi * m * k : 0);
              T* db = bimp->grad.data() + (b_batched ? bi * k * n : 0);
              // dB = A^T . g
              gemm_tn(pa, gb, db, k, m, n, true);
            }
          }
        });
  }
  return finite_checked(std::move(y), "matmul");
}

// -------------------------------------------------------------------------
// Activations

enum class ActKind { relu, gelu, sigmoid };

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = px[i] > T(0) ? px[i] : T(0);
  Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
  if (grad_wanted<T>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::relu, yi, {xi}, [xi, yi] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        if (xi->data[i] > T(0)) xi->grad[i] += yi->grad[i];
      }
    });
  }
  return finite_checked(std::move(y), "relu");
}

inline double gaussian_cdf(double v) { return 0.5 * std::erfc(-v * 0.70710678118654752440); }
inline double gaussian_pdf(double v) { return std::exp(-0.5 * v * v) * 0.39894228040143267794; }

// exact form x * Phi(x), not the tanh approximation
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) {
    const double v = static_cast<double>(px[i]);
    out[i] = static_cast<T>(v * gaussian_cdf(v));
  }
  Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
  if (grad_wanted<T>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::gelu, yi, {xi}, [xi, yi] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        const double v = static_cast<double>(xi->data[i]);
        xi->grad[i] += yi->grad[i] * static_cast<T>(gaussian_cdf(v) + v * gaussian_pdf(v));
      }
    });
  }
  return finite_checked(std::move(y), "gelu");
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) {
    const T e = std::exp(-v);
    return T(1) / (T(1) + e);
  }
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(px[i]);
  Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
  if (grad_wanted<T>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::sigmoid, yi, {xi}, [xi, yi] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        const T s = yi->data[i];
        xi->grad[i] += yi->grad[i] * s * (T(1) - s);
      }
    });
  }
  return finite_checked(std::move(y), "sigmoid");
}

template <typename T>
Tensor<T> activation(ActKind kind, const Tensor<T>& x) {
  switch (kind) {
    case ActKind::relu: return relu(x);
    case ActKind::gelu: return gelu(x);
    case ActKind::sigmoid: return sigmoid(x);
  }
  throw ContractError("activation: unknown kind");
}

// -------------------------------------------------------------------------
// Convolutions

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int64_t stride, int64_t pad) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be [n,c,h,w], got " + shape_str(x.shape()));
  if (weight.rank() != 4) {
    throw ShapeError("conv2d: weight must be [out,in,kh,kw], got " + shape_str(weight.shape()));
  }
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oc = weight.dim(0), wc = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (c != wc) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but weight expects " +
                     std::to_string(wc));
  }
  if (bias.rank() != 1 || bias.dim(0) != oc) {
    throw ShapeError("conv2d: bias must be [out_channels]");
  }
  if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be >= 1 and padding >= 0");
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (w + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) {
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " does not fit input " + shape_str(x.shape()));
  }
  const int64_t ckk = c * kh * kw;
  const int64_t ohw = oh * ow;
  std::vector<T> out(static_cast<size_t>(n * oc * ohw));
  std::vector<T> cols(static_cast<size_t>(ckk * ohw));
  for (int64_t b = 0; b < n; ++b) {
    im2col(x.data() + b * c * h * w, c, h, w, kh, kw, stride, pad, oh, ow, cols.data());
    T* yb = out.data() + b * oc * ohw;
    gemm_nn(weight.data(), cols.data(), yb, oc, ckk, ohw, false);
    for (int64_t o = 0; o < oc; ++o) {
      const T bv = bias.data()[o];
      T* row = yb + o * ohw;
      for (int64_t i = 0; i < ohw; ++i) row[i] += bv;
    }
  }
  Tensor<T> y = Tensor<T>::from_data({n, oc, oh, ow}, std::move(out));
  if (grad_wanted<T>({&x, &weight, &bias})) {
    auto xi = x.impl(), wi = weight.impl(), bi = bias.impl(), yi = y.impl();
    Tape<T>::current()->record(
        OpKind::conv2d, yi, {xi, wi, bi},
        [xi, wi, bi, yi, n, c, h, w, oc, kh, kw, stride, pad, oh, ow, ckk, ohw] {
          const T* g = yi->grad.data();
          std::vector<T> cols(static_cast<size_t>(ckk * ohw));
          std::vector<T> dcols;
          if (xi->requires_grad) {
            ensure_grad(*xi);
            dcols.resize(static_cast<size_t>(ckk * ohw));
          }
          if (wi->requires_grad) ensure_grad(*wi);
          if (bi->requires_grad) ensure_grad(*bi);
          for (int64_t b = 0; b < n; ++b) {
            const T* gb = g + b * oc * ohw;
            if (wi->requires_grad) {
              im2col(xi->data.data() + b * c * h * w, c, h, w, kh, kw, stride, pad, oh, ow,
                     cols.data());
              // dW += g_b . cols^T
              gemm_nt(gb, cols.data(), wi->grad.data(), oc, ohw, ckk, true);
            }
            if (bi->requires_grad) {
              for (int64_t o = 0; o < oc; ++o) {
                T s = 0;
                const T* row = gb + o * ohw;
                for (int64_t i = 0; i < ohw; ++i) s += row[i];
                bi->grad[static_cast<size_t>(o)] += s;
              }
            }
            if (xi->requires_grad) {
              // dcols = W^T . g_b, then scatter back through the patch map
              gemm_tn(wi->data.data(), gb, dcols.data(), ckk, oc, ohw, false);
              col2im_add(dcols.data(), c, h, w, kh, kw, stride, pad, oh, ow,
                         xi->grad.data() + b * c * h * w);
            }
          }
        });
  }
  return finite_checked(std::move(y), "conv2d");
}

// 3x3, stride 1, pad 1; channel i of the output depends only on channel i of
// the input.  weight is [c,1,3,3].
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 4) throw ShapeError("depthwise_conv2d: input must be [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (weight.rank() != 4 || weight.dim(0) != c || weight.dim(1) != 1 || weight.dim(2) != 3 ||
      weight.dim(3) != 3) {
    throw ShapeError("depthwise_conv2d: weight must be [c,1,3,3] with c=" + std::to_string(c) +
                     ", got " + shape_str(weight.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != c) throw ShapeError("depthwise_conv2d: bias must be [c]");
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  const T* pw = weight.data();
  const T* pb = bias.data();
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* src = px + (b * c + ch) * h * w;
      const T* k = pw + ch * 9;
      T* dst = out.data() + (b * c + ch) * h * w;
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t x2 = 0; x2 < w; ++x2) {
          T acc = pb[ch];
          for (int64_t ky = 0; ky < 3; ++ky) {
            const int64_t iy = y + ky - 1;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t ix = x2 + kx - 1;
              if (ix < 0 || ix >= w) continue;
              acc += k[ky * 3 + kx] * src[iy * w + ix];
            }
          }
          dst[y * w + x2] = acc;
        }
      }
    }
  }
  Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
  if (grad_wanted<T>({&x, &weight, &bias})) {
    auto xi = x.impl(), wi = weight.impl(), bi = bias.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::depthwise_conv2d, yi, {xi, wi, bi},
                               [xi, wi, bi, yi, n, c, h, w] {
      const T* g = yi->grad.data();
      if (xi->requires_grad) ensure_grad(*xi);
      if (wi->requires_grad) ensure_grad(*wi);
      if (bi->requires_grad) ensure_grad(*bi);
      for (int64_t b = 0; b < n; ++b) {
        for (int64_t ch = 0; ch < c; ++ch) {
          const T* gch = g + (b * c + ch) * h * w;
          const T* src = xi->data.data() + (b * c + ch) * h * w;
          const T* k = wi->data.data() + ch * 9;
          for (int64_t y2 = 0; y2 < h; ++y2) {
            for (int64_t x2 = 0; x2 < w; ++x2) {
              const T gv = gch[y2 * w + x2];
              if (bi->requires_grad) bi->grad[static_cast<size_t>(ch)] += gv;
              for (int64_t ky = 0; ky < 3; ++ky) {
                const int64_t iy = y2 + ky - 1;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < 3; ++kx) {
                  const int64_t ix = x2 + kx - 1;
                  if (ix < 0 || ix >= w) continue;
                  if (wi->requires_grad) {
                    wi->grad[static_cast<size_t>(ch * 9 + ky * 3 + kx)] += gv * src[iy * w + ix];
                  }
                  if (xi->requires_grad) {
                    xi->grad[static_cast<size_t>((b * c + ch) * h * w + iy * w + ix)] +=
                        gv * k[ky * 3 + kx];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return finite_checked(std::move(y), "depthwise_conv2d");
}

// -------------------------------------------------------------------------
// Resampling

// 2x2 window max; ties resolve to the first element in row-major window
// order so the backward routing is deterministic.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("maxpool2: input must be [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2: odd spatial extent " + shape_str(x.shape()));
  }
  const int64_t oh = h / 2, ow = w / 2;
  std::vector<T> out(static_cast<size_t>(n * c * oh * ow));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const T* px = x.data();
  size_t oi = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* plane = px + (b * c + ch) * h * w;
      const int64_t base = (b * c + ch) * h * w;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox, ++oi) {
          T best = plane[(2 * oy) * w + 2 * ox];
          int64_t best_idx = (2 * oy) * w + 2 * ox;
          const int64_t cand[3] = {(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox,
                                   (2 * oy + 1) * w + 2 * ox + 1};
          for (int64_t idx : cand) {
            if (plane[idx] > best) {
              best = plane[idx];
              best_idx = idx;
            }
          }
          out[oi] = best;
          (*argmax)[oi] = base + best_idx;
        }
      }
    }
  }
  Tensor<T> y = Tensor<T>::from_data({n, c, oh, ow}, std::move(out));
  if (grad_wanted<T>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::maxpool2, yi, {xi}, [xi, yi, argmax] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      for (size_t i = 0; i < yi->grad.size(); ++i) {
        xi->grad[static_cast<size_t>((*argmax)[i])] += yi->grad[i];
      }
    });
  }
  return finite_checked(std::move(y), "maxpool2");
}

// parameter-free x2 upsampling, half-pixel alignment with border clamping
template <typename T>
Tensor<T> bilinear_up2(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("bilinear_up2: input must be [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = 2 * h, ow = 2 * w;
  const auto ymap = bilinear_axis(h, oh);
  const auto xmap = bilinear_axis(w, ow);
  std::vector<T> out(static_cast<size_t>(n * c * oh * ow));
  const T* px = x.data();
  for (int64_t p = 0; p < n * c; ++p) {
    const T* plane = px + p * h * w;
    T* dst = out.data() + p * oh * ow;
    for (int64_t oy = 0; oy < oh; ++oy) {
      const auto& ys = ymap[static_cast<size_t>(oy)];
      const T wy1 = static_cast<T>(ys.frac), wy0 = T(1) - wy1;
      const T* r0 = plane + ys.i0 * w;
      const T* r1 = plane + ys.i1 * w;
      for (int64_t ox = 0; ox < ow; ++ox) {
        const auto& xs = xmap[static_cast<size_t>(ox)];
        const T wx1 = static_cast<T>(xs.frac), wx0 = T(1) - wx1;
        dst[oy * ow + ox] =
            wy0 * (wx0 * r0[xs.i0] + wx1 * r0[xs.i1]) + wy1 * (wx0 * r1[xs.i0] + wx1 * r1[xs.i1]);
      }
    }
  }
  Tensor<T> y = Tensor<T>::from_data({n, c, oh, ow}, std::move(out));
  if (grad_wanted<T>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::bilinear_up2, yi, {xi}, [xi, yi, ymap, xmap, n, c, h, w] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      const int64_t oh = 2 * h, ow = 2 * w;
      const T* g = yi->grad.data();
      for (int64_t p = 0; p < n * c; ++p) {
        T* dplane = xi->grad.data() + p * h * w;
        const T* gplane = g + p * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
          const auto& ys = ymap[static_cast<size_t>(oy)];
          const T wy1 = static_cast<T>(ys.frac), wy0 = T(1) - wy1;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const auto& xs = xmap[static_cast<size_t>(ox)];
            const T wx1 = static_cast<T>(xs.frac), wx0 = T(1) - wx1;
            const T gv = gplane[oy * ow + ox];
            dplane[ys.i0 * w + xs.i0] += gv * wy0 * wx0;
            dplane[ys.i0 * w + xs.i1] += gv * wy0 * wx1;
            dplane[ys.i1 * w + xs.i0] += gv * wy1 * wx0;
            dplane[ys.i1 * w + xs.i1] += gv * wy1 * wx1;
          }
        }
      }
    });
  }
  return finite_checked(std::move(y), "bilinear_up2");
}

// -------------------------------------------------------------------------
// Normalization

enum class NormMode { train, eval };

// Per-channel batch normalization over [n,h,w]. Normalizes with population
// statistics; running stats are updated in place with the usual
// running = (1 - momentum) * running + momentum * batch rule (unbiased
// variance goes into the running buffer).
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, T momentum, T eps,
                      NormMode mode) {
  if (x.rank() != 4) throw ShapeError("batchnorm2d: input must be [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (gamma.dim(0) != c || beta.dim(0) != c || running_mean.dim(0) != c ||
      running_var.dim(0) != c) {
    throw ShapeError("batchnorm2d: parameter extents must equal the channel count");
  }
  const int64_t plane = h * w;
  const int64_t count = n * plane;
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();

  if (mode == NormMode::eval) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const T inv = T(1) / std::sqrt(running_var.data()[ch] + eps);
      const T m = running_mean.data()[ch];
      const T a = pg[ch] * inv;
      const T b2 = pb[ch] - a * m;
      for (int64_t b = 0; b < n; ++b) {
        const T* src = px + (b * c + ch) * plane;
        T* dst = out.data() + (b * c + ch) * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] = a * src[i] + b2;
      }
    }
    Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
    if (grad_wanted<T>({&x, &gamma, &beta})) {
      auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
      std::vector<T> inv_std(static_cast<size_t>(c)), rm(static_cast<size_t>(c));
      for (int64_t ch = 0; ch < c; ++ch) {
        inv_std[static_cast<size_t>(ch)] = T(1) / std::sqrt(running_var.data()[ch] + eps);
        rm[static_cast<size_t>(ch)] = running_mean.data()[ch];
      }
      Tape<T>::current()->record(OpKind::batchnorm2d, yi, {xi, gi, bi},
                                 [xi, gi, bi, yi, inv_std, rm, n, c, plane] {
        const T* g = yi->grad.data();
        if (xi->requires_grad) ensure_grad(*xi);
        if (gi->requires_grad) ensure_grad(*gi);
        if (bi->requires_grad) ensure_grad(*bi);
        for (int64_t ch = 0; ch < c; ++ch) {
          const T inv = inv_std[static_cast<size_t>(ch)];
          const T m = rm[static_cast<size_t>(ch)];
          const T gam = gi->data[static_cast<size_t>(ch)];
          for (int64_t b = 0; b < n; ++b) {
            const int64_t off = (b * c + ch) * plane;
            for (int64_t i = 0; i < plane; ++i) {
              const T gv = g[off + i];
              if (xi->requires_grad) xi->grad[static_cast<size_t>(off + i)] += gv * gam * inv;
              if (gi->requires_grad) {
                gi->grad[static_cast<size_t>(ch)] +=
                    gv * (xi->data[static_cast<size_t>(off + i)] - m) * inv;
              }
              if (bi->requires_grad) bi->grad[static_cast<size_t>(ch)] += gv;
            }
          }
        }
      });
    }
    return finite_checked(std::move(y), "batchnorm2d");
  }

  if (count < 2) {
    throw ContractError("batchnorm2d: train mode needs at least 2 values per channel, got " +
                        std::to_string(count));
  }
  std::vector<T> mean_v(static_cast<size_t>(c)), inv_std(static_cast<size_t>(c));
  for (int64_t ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int64_t b = 0; b < n; ++b) {
      const T* src = px + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) s += static_cast<double>(src[i]);
    }
    const double m = s / static_cast<double>(count);
    double sq = 0.0;
    for (int64_t b = 0; b < n; ++b) {
      const T* src = px + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(src[i]) - m;
        sq += d * d;
      }
    }
    const double var = sq / static_cast<double>(count);
    mean_v[static_cast<size_t>(ch)] = static_cast<T>(m);
    inv_std[static_cast<size_t>(ch)] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
    running_mean.data()[ch] =
        (T(1) - momentum) * running_mean.data()[ch] + momentum * static_cast<T>(m);
    const double unbiased = sq / static_cast<double>(count - 1);
    running_var.data()[ch] =
        (T(1) - momentum) * running_var.data()[ch] + momentum * static_cast<T>(unbiased);
    const T a = pg[ch] * inv_std[static_cast<size_t>(ch)];
    const T b2 = pb[ch] - a * static_cast<T>(m);
    for (int64_t b = 0; b < n; ++b) {
      const T* src = px + (b * c + ch) * plane;
      T* dst = out.data() + (b * c + ch) * plane;
      for (int64_t i = 0; i < plane; ++i) dst[i] = a * src[i] + b2;
    }
  }
  Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
  if (grad_wanted<T>({&x, &gamma, &beta})) {
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
    Tape<T>::current()->record(
        OpKind::batchnorm2d, yi, {xi, gi, bi}, [xi, gi, bi, yi, mean_v, inv_std, n, c, plane] {
          const T* g = yi->grad.data();
          const int64_t count = n * plane;
          if (xi->requires_grad) ensure_grad(*xi);
          if (gi->requires_grad) ensure_grad(*gi);
          if (bi->requires_grad) ensure_grad(*bi);
          for (int64_t ch = 0; ch < c; ++ch) {
            const T m = mean_v[static_cast<size_t>(ch)];
            const T inv = inv_std[static_cast<size_t>(ch)];
            const T gam = gi->data[static_cast<size_t>(ch)];
            double sum_g = 0.0, sum_gx = 0.0;
            for (int64_t b = 0; b < n; ++b) {
              const int64_t off = (b * c + ch) * plane;
              for (int64_t i = 0; i < plane; ++i) {
                const T gv = g[off + i];
                const T xh = (xi->data[static_cast<size_t>(off + i)] - m) * inv;
                sum_g += static_cast<double>(gv);
                sum_gx += static_cast<double>(gv * xh);
              }
            }
            if (gi->requires_grad) gi->grad[static_cast<size_t>(ch)] += static_cast<T>(sum_gx);
            if (bi->requires_grad) bi->grad[static_cast<size_t>(ch)] += static_cast<T>(sum_g);
            if (xi->requires_grad) {
              const T mg = static_cast<T>(sum_g / static_cast<double>(count));
              const T mgx = static_cast<T>(sum_gx / static_cast<double>(count));
              for (int64_t b = 0; b < n; ++b) {
                const int64_t off = (b * c + ch) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                  const T xh = (xi->data[static_cast<size_t>(off + i)] - m) * inv;
                  xi->grad[static_cast<size_t>(off + i)] +=
                      gam * inv * (g[off + i] - mg - xh * mgx);
                }
              }
            }
          }
        });
  }
  return finite_checked(std::move(y), "batchnorm2d");
}

// Layer normalization over the trailing (embedding) axis of [n,tokens,e];
// statistics are per (sample, token).
template <typename T>
Tensor<T> layernorm_tokens(const Tensor<T>& t, const Tensor<T>& gamma, const Tensor<T>& beta,
                           T eps) {
  if (t.rank() < 2) throw ShapeError("layernorm_tokens: input rank must be >= 2");
  const int64_t e = t.dim(t.rank() - 1);
  if (gamma.dim(0) != e || beta.dim(0) != e) {
    throw ShapeError("layernorm_tokens: gamma/beta must have the embedding extent " +
                     std::to_string(e));
  }
  const int64_t rows = t.numel() / e;
  std::vector<T> out(static_cast<size_t>(t.numel()));
  std::vector<T> mean_v(static_cast<size_t>(rows)), inv_std(static_cast<size_t>(rows));
  const T* px = t.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* src = px + r * e;
    double s = 0.0;
    for (int64_t i = 0; i < e; ++i) s += static_cast<double>(src[i]);
    const double m = s / static_cast<double>(e);
    double sq = 0.0;
    for (int64_t i = 0; i < e; ++i) {
      const double d = static_cast<double>(src[i]) - m;
      sq += d * d;
    }
    const double inv = 1.0 / std::sqrt(sq / static_cast<double>(e) + static_cast<double>(eps));
    mean_v[static_cast<size_t>(r)] = static_cast<T>(m);
    inv_std[static_cast<size_t>(r)] = static_cast<T>(inv);
    T* dst = out.data() + r * e;
    for (int64_t i = 0; i < e; ++i) {
      dst[i] = pg[i] * static_cast<T>((static_cast<double>(src[i]) - m) * inv) + pb[i];
    }
  }
  Tensor<T> y = Tensor<T>::from_data(t.shape(), std::move(out));
  if (grad_wanted<T>({&t, &gamma, &beta})) {
    auto xi = t.impl(), gi = gamma.impl(), bi = beta.impl(), yi = y.impl();
    Tape<T>::current()->record(
        OpKind::layernorm, yi, {xi, gi, bi}, [xi, gi, bi, yi, mean_v, inv_std, rows, e] {
          const T* g = yi->grad.data();
          if (xi->requires_grad) ensure_grad(*xi);
          if (gi->requires_grad) ensure_grad(*gi);
          if (bi->requires_grad) ensure_grad(*bi);
          for (int64_t r = 0; r < rows; ++r) {
            const T m = mean_v[static_cast<size_t>(r)];
            const T inv = inv_std[static_cast<size_t>(r)];
            const T* grow = g + r * e;
            const T* xrow = xi->data.data() + r * e;
            double sum_dxh = 0.0, sum_dxh_xh = 0.0;
            for (int64_t i = 0; i < e; ++i) {
              const T xh = (xrow[i] - m) * inv;
              const T dxh = grow[i] * gi->data[static_cast<size_t>(i)];
              sum_dxh += static_cast<double>(dxh);
              sum_dxh_xh += static_cast<double>(dxh * xh);
              if (gi->requires_grad) gi->grad[static_cast<size_t>(i)] += grow[i] * xh;
              if (bi->requires_grad) bi->grad[static_cast<size_t>(i)] += grow[i];
            }
            if (xi->requires_grad) {
              const T mdxh = static_cast<T>(sum_dxh / static_cast<double>(e));
              const T mdxh_xh = static_cast<T>(sum_dxh_xh / static_cast<double>(e));
              T* dxrow = xi->grad.data() + r * e;
              for (int64_t i = 0; i < e; ++i) {
                const T xh = (xrow[i] - m) * inv;
                const T dxh = grow[i] * gi->data[static_cast<size_t>(i)];
                dxrow[i] += inv * (dxh - mdxh - xh * mdxh_xh);
              }
            }
          }
        });
  }
  return finite_checked(std::move(y), "layernorm_tokens");
}

// -------------------------------------------------------------------------
// Axial channel shift: contiguous channel groups translate along one spatial
// axis, zero fill at vacated positions, shifted-out values truncated.  Pure
// data movement, no parameters, no multiply-adds.

enum class ShiftAxis { height, width };

template <typename T>
void shift_planes(const T* src, T* dst, int64_t planes, int64_t h, int64_t w, ShiftAxis axis,
                  int64_t offset) {
  // dst(., y, x) = src(., y - oy, x - ox) where (oy, ox) is the axis offset
  const int64_t oy = axis == ShiftAxis::height ? offset : 0;
  const int64_t ox = axis == ShiftAxis::width ? offset : 0;
  for (int64_t p = 0; p < planes; ++p) {
    const T* s = src + p * h * w;
    T* d = dst + p * h * w;
    for (int64_t y = 0; y < h; ++y) {
      const int64_t sy = y - oy;
      if (sy < 0 || sy >= h) continue;
      const int64_t x_lo = std::max<int64_t>(0, ox);
      const int64_t x_hi = std::min<int64_t>(w, w + ox);
      if (x_lo < x_hi) {
        std::copy(s + sy * w + (x_lo - ox), s + sy * w + (x_hi - ox), d + y * w + x_lo);
      }
    }
  }
}

template <typename T>
Tensor<T> shift_channels(const Tensor<T>& x, ShiftAxis axis, int64_t partitions,
                         const std::vector<int64_t>& offsets) {
  if (x.rank() != 4) throw ShapeError("shift_channels: input must be [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (partitions < 1 || partitions > c) {
    throw ContractError("shift_channels: partitions must be in [1, channels]");
  }
  if (static_cast<int64_t>(offsets.size()) != partitions) {
    throw ContractError("shift_channels: need one offset per partition, got " +
                        std::to_string(offsets.size()) + " for " + std::to_string(partitions));
  }
  const int64_t extent = axis == ShiftAxis::height ? h : w;
  for (int64_t o : offsets) {
    if (std::abs(o) >= extent) {
      throw ContractError("shift_channels: offset " + std::to_string(o) +
                          " exceeds spatial extent " + std::to_string(extent));
    }
  }
  const int64_t base = c / partitions;  // last partition absorbs the remainder
  std::vector<T> out(static_cast<size_t>(x.numel()), T(0));
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t k = 0; k < partitions; ++k) {
      const int64_t lo = k * base;
      const int64_t hi = (k == partitions - 1) ? c : (k + 1) * base;
      const int64_t off = (b * c + lo) * h * w;
      shift_planes(x.data() + off, out.data() + off, hi - lo, h, w, axis, offsets[static_cast<size_t>(k)]);
    }
  }
  Tensor<T> y = Tensor<T>::from_data(x.shape(), std::move(out));
  if (grad_wanted<T>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::shift_channels, yi, {xi},
                               [xi, yi, axis, partitions, offsets, n, c, h, w, base] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      std::vector<T> tmp(static_cast<size_t>(c * h * w));
      for (int64_t b = 0; b < n; ++b) {
        std::fill(tmp.begin(), tmp.end(), T(0));
        for (int64_t k = 0; k < partitions; ++k) {
          const int64_t lo = k * base;
          const int64_t hi = (k == partitions - 1) ? c : (k + 1) * base;
          // adjoint of a zero-fill shift is the opposite shift
          shift_planes(yi->grad.data() + (b * c + lo) * h * w, tmp.data() + lo * h * w, hi - lo, h,
                       w, axis, -offsets[static_cast<size_t>(k)]);
        }
        T* dst = xi->grad.data() + b * c * h * w;
        for (size_t i = 0; i < tmp.size(); ++i) dst[i] += tmp[i];
      }
    });
  }
  return finite_checked(std::move(y), "shift_channels");
}

// -------------------------------------------------------------------------
// Token-wise affine map: the same [in,out] weight applied to every token of
// [n,tokens,in].

template <typename T>
Tensor<T> linear_tokens(const Tensor<T>& t, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (t.rank() < 2) throw ShapeError("linear_tokens: input rank must be >= 2");
  if (weight.rank() != 2) throw ShapeError("linear_tokens: weight must be [in,out]");
  const int64_t in = t.dim(t.rank() - 1);
  if (weight.dim(0) != in) {
    throw ShapeError("linear_tokens: token width " + std::to_string(in) +
                     " does not match weight " + shape_str(weight.shape()));
  }
  const int64_t out_w = weight.dim(1);
  if (bias.rank() != 1 || bias.dim(0) != out_w) throw ShapeError("linear_tokens: bias must be [out]");
  const int64_t rows = t.numel() / in;
  Shape out_shape = t.shape();
  out_shape.back() = out_w;
  std::vector<T> out(static_cast<size_t>(rows * out_w));
  gemm_nn(t.data(), weight.data(), out.data(), rows, in, out_w, false);
  const T* pb = bias.data();
  for (int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * out_w;
    for (int64_t j = 0; j < out_w; ++j) row[j] += pb[j];
  }
  Tensor<T> y = Tensor<T>::from_data(std::move(out_shape), std::move(out));
  if (grad_wanted<T>({&t, &weight, &bias})) {
    auto xi = t.impl(), wi = weight.impl(), bi = bias.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::linear_tokens, yi, {xi, wi, bi},
                               [xi, wi, bi, yi, rows, in, out_w] {
      const T* g = yi->grad.data();
      if (xi->requires_grad) {
        ensure_grad(*xi);
        // dX = g . W^T
        gemm_nt(g, wi->data.data(), xi->grad.data(), rows, out_w, in, true);
      }
      if (wi->requires_grad) {
        ensure_grad(*wi);
        // dW = X^T . g
        gemm_tn(xi->data.data(), g, wi->grad.data(), in, rows, out_w, true);
      }
      if (bi->requires_grad) {
        ensure_grad(*bi);
        for (int64_t r = 0; r < rows; ++r) {
          const T* row = g + r * out_w;
          for (int64_t j = 0; j < out_w; ++j) bi->grad[static_cast<size_t>(j)] += row[j];
        }
      }
    });
  }
  return finite_checked(std::move(y), "linear_tokens");
}

// -------------------------------------------------------------------------
// Token layout: [n,c,h,w] <-> [n, h*w, c] with row-major token order.

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("to_tokens: input must be [n,c,h,w]");
  const int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<T> out(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  for (int64_t b = 0; b < n; ++b) {
    const T* sb = px + b * c * hw;
    T* db = out.data() + b * hw * c;
    for (int64_t ch = 0; ch < c; ++ch) {
      for (int64_t p = 0; p < hw; ++p) db[p * c + ch] = sb[ch * hw + p];
    }
  }
  Tensor<T> y = Tensor<T>::from_data({n, hw, c}, std::move(out));
  if (grad_wanted<T>({&x})) {
    auto xi = x.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::to_tokens, yi, {xi}, [xi, yi, n, c, hw] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      for (int64_t b = 0; b < n; ++b) {
        const T* gb = yi->grad.data() + b * hw * c;
        T* db = xi->grad.data() + b * c * hw;
        for (int64_t ch = 0; ch < c; ++ch) {
          for (int64_t p = 0; p < hw; ++p) db[ch * hw + p] += gb[p * c + ch];
        }
      }
    });
  }
  return finite_checked(std::move(y), "to_tokens");
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& t, int64_t h, int64_t w) {
  if (t.rank() != 3) throw ShapeError("from_tokens: input must be [n,tokens,e]");
  const int64_t n = t.dim(0), hw = t.dim(1), c = t.dim(2);
  if (hw != h * w) {
    throw ShapeError("from_tokens: token count " + std::to_string(hw) + " != " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  std::vector<T> out(static_cast<size_t>(t.numel()));
  const T* px = t.data();
  for (int64_t b = 0; b < n; ++b) {
    const T* sb = px + b * hw * c;
    T* db = out.data() + b * c * hw;
    for (int64_t p = 0; p < hw; ++p) {
      for (int64_t ch = 0; ch < c; ++ch) db[ch * hw + p] = sb[p * c + ch];
    }
  }
  Tensor<T> y = Tensor<T>::from_data({n, c, h, w}, std::move(out));
  if (grad_wanted<T>({&t})) {
    auto xi = t.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::from_tokens, yi, {xi}, [xi, yi, n, c, hw] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      for (int64_t b = 0; b < n; ++b) {
        const T* gb = yi->grad.data() + b * c * hw;
        T* db = xi->grad.data() + b * hw * c;
        for (int64_t p = 0; p < hw; ++p) {
          for (int64_t ch = 0; ch < c; ++ch) db[p * c + ch] += gb[ch * hw + p];
        }
      }
    });
  }
  return finite_checked(std::move(y), "from_tokens");
}

// -------------------------------------------------------------------------
// Fused mean binary cross-entropy on logits; stable for |logit| well past 80.

template <typename T>
void check_binary_target(const Tensor<T>& target, const char* op) {
  for (const T v : target.vec()) {
    if (v != T(0) && v != T(1)) {
      throw ContractError(std::string(op) + ": target values must be exactly 0 or 1");
    }
  }
}

template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& target) {
  check_same_shape(logits, target, "bce_with_logits_mean");
  check_binary_target(target, "bce_with_logits_mean");
  const T* px = logits.data();
  const T* pt = target.data();
  const int64_t n = logits.numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(px[i]);
    const double y = static_cast<double>(pt[i]);
    acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  Tensor<T> y = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  if (grad_wanted<T>({&logits, &target})) {
    auto xi = logits.impl(), ti = target.impl(), yi = y.impl();
    Tape<T>::current()->record(OpKind::bce_with_logits, yi, {xi, ti}, [xi, ti, yi, n] {
      if (!xi->requires_grad) return;
      ensure_grad(*xi);
      const T g = yi->grad[0] / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) {
        xi->grad[static_cast<size_t>(i)] +=
            g * (stable_sigmoid(xi->data[static_cast<size_t>(i)]) - ti->data[static_cast<size_t>(i)]);
      }
    });
  }
  return finite_checked(std::move(y), "bce_with_logits_mean");
}

}  // namespace unext
