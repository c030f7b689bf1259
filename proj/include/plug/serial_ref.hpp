#pragma once

// Straight-line serial reference kernels. These are the oracles the unit
// tests compare plug::kern against, and the baseline for bench_kernels.
// Keep them obvious; never optimize this file.

#include <algorithm>
#include <cstdint>
#include <vector>

namespace plug::ref {

template <typename T>
void matmul(const T* a, const T* b, int m, int n, int k, T* c) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += (double)a[i * k + p] * (double)b[p * n + j];
      c[i * n + j] = (T)acc;
    }
}

// channels-last [H,W,C], 3x3 stride 1 pad 1, weight [ky][kx][ci][co]
template <typename T>
void conv3x3(const T* in, int h, int w, int ci, const T* weight, const T* bias,
             int co, T* out) {
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int j = 0; j < co; ++j) {
        double acc = bias ? (double)bias[j] : 0.0;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            int sy = y + ky - 1, sx = x + kx - 1;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            for (int i = 0; i < ci; ++i)
              acc += (double)in[((int64_t)sy * w + sx) * ci + i] *
                     (double)weight[(((int64_t)ky * 3 + kx) * ci + i) * co + j];
          }
        out[((int64_t)y * w + x) * co + j] = (T)acc;
      }
}

// weight [ci][dy][dx][co]
template <typename T>
void conv_transpose2x2(const T* in, int h, int w, int ci, const T* weight,
                       const T* bias, int co, T* out) {
  int h2 = 2 * h, w2 = 2 * w;
  for (int y = 0; y < h2; ++y)
    for (int x = 0; x < w2; ++x)
      for (int j = 0; j < co; ++j) {
        int sy = y / 2, sx = x / 2, dy = y % 2, dx = x % 2;
        double acc = bias ? (double)bias[j] : 0.0;
        for (int i = 0; i < ci; ++i)
          acc += (double)in[((int64_t)sy * w + sx) * ci + i] *
                 (double)weight[(((int64_t)i * 2 + dy) * 2 + dx) * co + j];
        out[((int64_t)y * w2 + x) * co + j] = (T)acc;
      }
}

template <typename T>
void box_mean(const T* in, int h, int w, int eps, T* out) {
  int r = eps - 1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      int n = 0;
      for (int sy = y - r; sy <= y + r; ++sy)
        for (int sx = x - r; sx <= x + r; ++sx) {
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          acc += (double)in[(int64_t)sy * w + sx];
          ++n;
        }
      out[(int64_t)y * w + x] = (T)(acc / n);
    }
}

template <typename T>
void bilinear_up2(const T* in, int h, int w, int c, T* out) {
  int h2 = 2 * h, w2 = 2 * w;
  for (int y = 0; y < h2; ++y)
    for (int x = 0; x < w2; ++x)
      for (int j = 0; j < c; ++j) {
        double sy = (y + 0.5) / 2.0 - 0.5;
        double sx = (x + 0.5) / 2.0 - 0.5;
        int y0 = (int)std::floor(sy), x0 = (int)std::floor(sx);
        double fy = sy - y0, fx = sx - x0;
        auto px = [&](int yy, int xx) {
          yy = std::clamp(yy, 0, h - 1);
          xx = std::clamp(xx, 0, w - 1);
          return (double)in[((int64_t)yy * w + xx) * c + j];
        };
        double v = px(y0, x0) * (1 - fy) * (1 - fx) + px(y0, x0 + 1) * (1 - fy) * fx +
                   px(y0 + 1, x0) * fy * (1 - fx) + px(y0 + 1, x0 + 1) * fy * fx;
        out[((int64_t)y * w2 + x) * c + j] = (T)v;
      }
}

}  // namespace plug::ref
