// Test-only reference implementations: direct loops, independent of the
// library's kernels and layout tricks.  Each takes plain buffers so it can
// never share code with the path it checks.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

namespace oracle {

// c[m,n] = a[m,k] * b[k,n], naive triple loop
template <typename T>
std::vector<T> matmul(const std::vector<T>& a, const std::vector<T>& b, int64_t m, int64_t k,
                      int64_t n) {
  std::vector<T> c(static_cast<size_t>(m * n), T(0));
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j)
      for (int64_t kk = 0; kk < k; ++kk) c[i * n + j] += a[i * k + kk] * b[kk * n + j];
  return c;
}

// direct 7-loop convolution, zero padding
template <typename T>
std::vector<T> conv2d(const std::vector<T>& x, const std::vector<T>& w, const std::vector<T>& bias,
                      int64_t n, int64_t c, int64_t h, int64_t wd, int64_t oc, int64_t kh,
                      int64_t kw, int64_t stride, int64_t pad) {
  const int64_t oh = (h + 2 * pad - kh) / stride + 1;
  const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
  std::vector<T> y(static_cast<size_t>(n * oc * oh * ow), T(0));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t o = 0; o < oc; ++o)
      for (int64_t oy = 0; oy < oh; ++oy)
        for (int64_t ox = 0; ox < ow; ++ox) {
          T acc = bias[o];
          for (int64_t ci = 0; ci < c; ++ci)
            for (int64_t ky = 0; ky < kh; ++ky)
              for (int64_t kx = 0; kx < kw; ++kx) {
                const int64_t iy = oy * stride - pad + ky;
                const int64_t ix = ox * stride - pad + kx;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += w[((o * c + ci) * kh + ky) * kw + kx] * x[((b * c + ci) * h + iy) * wd + ix];
              }
          y[((b * oc + o) * oh + oy) * ow + ox] = acc;
        }
  return y;
}

// grouped direct convolution with one 3x3 slice per channel
template <typename T>
std::vector<T> depthwise3x3(const std::vector<T>& x, const std::vector<T>& w,
                            const std::vector<T>& bias, int64_t n, int64_t c, int64_t h,
                            int64_t wd) {
  std::vector<T> y(static_cast<size_t>(n * c * h * wd), T(0));
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ci = 0; ci < c; ++ci)
      for (int64_t oy = 0; oy < h; ++oy)
        for (int64_t ox = 0; ox < wd; ++ox) {
          T acc = bias[ci];
          for (int64_t ky = 0; ky < 3; ++ky)
            for (int64_t kx = 0; kx < 3; ++kx) {
              const int64_t iy = oy + ky - 1;
              const int64_t ix = ox + kx - 1;
              if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
              acc += w[(ci * 3 + ky) * 3 + kx] * x[((b * c + ci) * h + iy) * wd + ix];
            }
          y[((b * c + ci) * h + oy) * wd + ox] = acc;
        }
  return y;
}

// window scan, 2x2 stride 2
template <typename T>
std::vector<T> maxpool2(const std::vector<T>& x, int64_t n, int64_t c, int64_t h, int64_t w) {
  const int64_t oh = h / 2, ow = w / 2;
  std::vector<T> y(static_cast<size_t>(n * c * oh * ow));
  for (int64_t p = 0; p < n * c; ++p)
    for (int64_t oy = 0; oy < oh; ++oy)
      for (int64_t ox = 0; ox < ow; ++ox) {
        T best = x[p * h * w + (2 * oy) * w + 2 * ox];
        for (int64_t dy = 0; dy < 2; ++dy)
          for (int64_t dx = 0; dx < 2; ++dx)
            best = std::max(best, x[p * h * w + (2 * oy + dy) * w + 2 * ox + dx]);
        y[p * oh * ow + oy * ow + ox] = best;
      }
  return y;
}

// per-pixel closed-form bilinear with half-pixel mapping and border clamp,
// evaluated independently per output coordinate
template <typename T>
std::vector<T> bilinear_resize(const std::vector<T>& x, int64_t h, int64_t w, int64_t oh,
                               int64_t ow) {
  std::vector<T> y(static_cast<size_t>(oh * ow));
  for (int64_t oy = 0; oy < oh; ++oy)
    for (int64_t ox = 0; ox < ow; ++ox) {
      double sy = (oy + 0.5) * static_cast<double>(h) / oh - 0.5;
      double sx = (ox + 0.5) * static_cast<double>(w) / ow - 0.5;
      sy = std::min(std::max(sy, 0.0), static_cast<double>(h - 1));
      sx = std::min(std::max(sx, 0.0), static_cast<double>(w - 1));
      const int64_t y0 = static_cast<int64_t>(sy), x0 = static_cast<int64_t>(sx);
      const int64_t y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double fy = sy - y0, fx = sx - x0;
      y[oy * ow + ox] = static_cast<T>((1 - fy) * ((1 - fx) * x[y0 * w + x0] + fx * x[y0 * w + x1]) +
                                       fy * ((1 - fx) * x[y1 * w + x0] + fx * x[y1 * w + x1]));
    }
  return y;
}

// two-pass per-channel mean/population-variance statistics
template <typename T>
void batch_stats(const std::vector<T>& x, int64_t n, int64_t c, int64_t hw, int64_t ch, double* mean,
                 double* var) {
  double s = 0.0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < hw; ++i) s += x[(b * c + ch) * hw + i];
  *mean = s / static_cast<double>(n * hw);
  double sq = 0.0;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t i = 0; i < hw; ++i) {
      const double d = x[(b * c + ch) * hw + i] - *mean;
      sq += d * d;
    }
  *var = sq / static_cast<double>(n * hw);
}

// per-token layer norm over the trailing axis
template <typename T>
std::vector<T> layernorm(const std::vector<T>& x, int64_t rows, int64_t e,
                         const std::vector<T>& gamma, const std::vector<T>& beta, double eps) {
  std::vector<T> y(x.size());
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int64_t i = 0; i < e; ++i) s += x[r * e + i];
    const double m = s / e;
    double sq = 0.0;
    for (int64_t i = 0; i < e; ++i) sq += (x[r * e + i] - m) * (x[r * e + i] - m);
    const double inv = 1.0 / std::sqrt(sq / e + eps);
    for (int64_t i = 0; i < e; ++i) {
      y[r * e + i] = static_cast<T>(gamma[i] * ((x[r * e + i] - m) * inv) + beta[i]);
    }
  }
  return y;
}

// per-element index remap for the axial shift, zero fill
template <typename T>
std::vector<T> shift_channels(const std::vector<T>& x, int64_t n, int64_t c, int64_t h, int64_t w,
                              bool width_axis, int64_t partitions,
                              const std::vector<int64_t>& offsets) {
  std::vector<T> y(x.size(), T(0));
  const int64_t base = c / partitions;
  for (int64_t b = 0; b < n; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      int64_t part = std::min(ch / base, partitions - 1);
      const int64_t off = offsets[part];
      for (int64_t yy = 0; yy < h; ++yy)
        for (int64_t xx = 0; xx < w; ++xx) {
          const int64_t sy = width_axis ? yy : yy - off;
          const int64_t sx = width_axis ? xx - off : xx;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          y[((b * c + ch) * h + yy) * w + xx] = x[((b * c + ch) * h + sy) * w + sx];
        }
    }
  return y;
}

// scalar-loop combined loss: 0.5 * mean BCE on probabilities + smoothed dice
inline double bce_dice(const std::vector<double>& logits, const std::vector<double>& target) {
  const double n = static_cast<double>(logits.size());
  double bce = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0;
  for (size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    bce += -(target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p));
    inter += p * target[i];
    psum += p;
    tsum += target[i];
  }
  const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + tsum + 1.0);
  return 0.5 * bce / n + dice;
}

// reference scalar Adam, bias-corrected
struct ScalarAdam {
  double lr, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double m = 0.0, v = 0.0;
  int64_t t = 0;
  double step(double param, double grad) {
    t += 1;
    m = beta1 * m + (1 - beta1) * grad;
    v = beta2 * v + (1 - beta2) * grad * grad;
    const double mh = m / (1 - std::pow(beta1, t));
    const double vh = v / (1 - std::pow(beta2, t));
    return param - lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace oracle
