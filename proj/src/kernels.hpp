#pragma once

#include "common.hpp"

namespace unext {

// c[m,n] = a[m,k] * b[k,n]  (+= when accumulate)
//
// Tiled over columns and the inner extent so the B panel stays cache
// resident.  Workers own whole column blocks and every element accumulates
// in ascending-k order, so results are bitwise identical for any thread
// count.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  constexpr int64_t kJBlock = 512;
  constexpr int64_t kKBlock = 128;
  const int64_t j_blocks = (n + kJBlock - 1) / kJBlock;
  parallel_for(j_blocks, [&](int64_t jb) {
    const int64_t j0 = jb * kJBlock;
    const int64_t j1 = std::min(n, j0 + kJBlock);
    if (!accumulate) {
      for (int64_t i = 0; i < m; ++i) std::fill(c + i * n + j0, c + i * n + j1, T(0));
    }
    for (int64_t k0 = 0; k0 < k; k0 += kKBlock) {
      const int64_t k1 = std::min(k, k0 + kKBlock);
      for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t kk = k0; kk < k1; ++kk) {
          const T aik = arow[kk];
          const T* brow = b + kk * n;
          for (int64_t j = j0; j < j1; ++j) crow[j] += aik * brow[j];
        }
      }
    }
  });
}

// c[m,n] = a[m,k] * b[n,k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T s = 0;
      for (int64_t kk = 0; kk < k; ++kk) s += arow[kk] * brow[kk];
      crow[j] = accumulate ? crow[j] + s : s;
    }
  }
}

// c[m,n] = a[k,m]^T * b[k,n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (int64_t kk = 0; kk < k; ++kk) {
    const T* arow = a + kk * m;
    const T* brow = b + kk * n;
    for (int64_t i = 0; i < m; ++i) {
      const T aik = arow[i];
      if (aik == T(0)) continue;
      T* crow = c + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// x[c,h,w] -> cols[c*kh*kw, oh*ow], zero padded
template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, T* cols) {
  int64_t row = 0;
  for (int64_t ch = 0; ch < c; ++ch) {
    const T* src = x + ch * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx, ++row) {
        T* dst = cols + row * (oh * ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            dst += ow;
            continue;
          }
          const T* srow = src + iy * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            *dst++ = (ix >= 0 && ix < w) ? srow[ix] : T(0);
          }
        }
      }
    }
  }
}

// adjoint of im2col: scatter-add cols back into x[c,h,w]
template <typename T>
void col2im_add(const T* cols, int64_t c, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, T* x) {
  int64_t row = 0;
  for (int64_t ch = 0; ch < c; ++ch) {
    T* dst = x + ch * h * w;
    for (int64_t ky = 0; ky < kh; ++ky) {
      for (int64_t kx = 0; kx < kw; ++kx, ++row) {
        const T* src = cols + row * (oh * ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const T* srow = src + oy * ow;
          T* drow = dst + iy * w;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) drow[ix] += srow[ox];
          }
        }
      }
    }
  }
}

// Half-pixel bilinear sampling: output center o maps to input coordinate
// (o + 0.5) * in/out - 0.5, clamped at the borders.
struct AxisSample {
  int64_t i0, i1;
  double frac;  // weight of i1
};

inline std::vector<AxisSample> bilinear_axis(int64_t in_extent, int64_t out_extent) {
  std::vector<AxisSample> map(static_cast<size_t>(out_extent));
  const double scale = static_cast<double>(in_extent) / static_cast<double>(out_extent);
  for (int64_t o = 0; o < out_extent; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    const double hi = static_cast<double>(in_extent - 1);
    if (src > hi) src = hi;
    const int64_t i0 = static_cast<int64_t>(src);
    const int64_t i1 = std::min<int64_t>(i0 + 1, in_extent - 1);
    map[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return map;
}

// plane resize used by both the differentiable x2 upsampler and ingestion
template <typename T>
void bilinear_resize_plane(const T* in, int64_t h, int64_t w, T* out, int64_t oh, int64_t ow) {
  const auto ymap = bilinear_axis(h, oh);
  const auto xmap = bilinear_axis(w, ow);
  for (int64_t oy = 0; oy < oh; ++oy) {
    const auto& ys = ymap[static_cast<size_t>(oy)];
    const T wy1 = static_cast<T>(ys.frac);
    const T wy0 = T(1) - wy1;
    const T* r0 = in + ys.i0 * w;
    const T* r1 = in + ys.i1 * w;
    T* drow = out + oy * ow;
    for (int64_t ox = 0; ox < ow; ++ox) {
      const auto& xs = xmap[static_cast<size_t>(ox)];
      const T wx1 = static_cast<T>(xs.frac);
      const T wx0 = T(1) - wx1;
      drow[ox] = wy0 * (wx0 * r0[xs.i0] + wx1 * r0[xs.i1]) +
                 wy1 * (wx0 * r1[xs.i0] + wx1 * r1[xs.i1]);
    }
  }
}

}  // namespace unext
