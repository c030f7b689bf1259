#pragma once

// Compute kernels behind the tape ops. GEMMs go through Eigen; the pixel-loop
// kernels carry OpenMP pragmas. tests/ check all of these against the naive
// serial versions in serial_ref.hpp, and tools/bench_kernels.cpp times the two.
//
// Feature-map layout is channels-last [H, W, C] throughout.

#include "plug/tensor.hpp"

#include <cmath>
#include <cstring>
#include <vector>

namespace plug::kern {

// C = alpha * op(A) * op(B) + beta * C, row-major raw pointers.
template <typename T>
void gemm(bool trans_a, bool trans_b, int m, int n, int k, T alpha, const T* a,
          int lda, const T* b, int ldb, T beta, T* c, int ldc) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Stride = Eigen::OuterStride<Eigen::Dynamic>;
  Eigen::Map<Mat, 0, Stride> C(c, m, n, Stride(ldc));
  auto term = [&](auto&& A, auto&& B) {
    if (beta == T(0)) {
      C.noalias() = alpha * (A * B);
    } else {
      if (beta != T(1)) C *= beta;
      C.noalias() += alpha * (A * B);
    }
  };
  if (!trans_a && !trans_b) {
    Eigen::Map<const Mat, 0, Stride> A(a, m, k, Stride(lda));
    Eigen::Map<const Mat, 0, Stride> B(b, k, n, Stride(ldb));
    term(A, B);
  } else if (trans_a && !trans_b) {
    Eigen::Map<const Mat, 0, Stride> A(a, k, m, Stride(lda));
    Eigen::Map<const Mat, 0, Stride> B(b, k, n, Stride(ldb));
    term(A.transpose(), B);
  } else if (!trans_a && trans_b) {
    Eigen::Map<const Mat, 0, Stride> A(a, m, k, Stride(lda));
    Eigen::Map<const Mat, 0, Stride> B(b, n, k, Stride(ldb));
    term(A, B.transpose());
  } else {
    Eigen::Map<const Mat, 0, Stride> A(a, k, m, Stride(lda));
    Eigen::Map<const Mat, 0, Stride> B(b, n, k, Stride(ldb));
    term(A.transpose(), B.transpose());
  }
}

// 3x3, stride 1, zero pad 1. col is (H*W) x (9*C), column block order (ky,kx,c).
template <typename T>
void im2col_3x3(const T* in, int h, int w, int c, T* col) {
  const int row_len = 9 * c;
#pragma omp parallel for
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      T* dst = col + ((int64_t)y * w + x) * row_len;
      for (int ky = 0; ky < 3; ++ky) {
        int sy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          int sx = x + kx - 1;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) {
            std::memset(dst, 0, sizeof(T) * c);
          } else {
            std::memcpy(dst, in + ((int64_t)sy * w + sx) * c, sizeof(T) * c);
          }
          dst += c;
        }
      }
    }
  }
}

template <typename T>
void col2im_3x3(const T* col, int h, int w, int c, T* in_grad) {
  // accumulate; caller zeroes in_grad
  const int row_len = 9 * c;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const T* src = col + ((int64_t)y * w + x) * row_len;
      for (int ky = 0; ky < 3; ++ky) {
        int sy = y + ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          int sx = x + kx - 1;
          if (sy >= 0 && sy < h && sx >= 0 && sx < w) {
            T* dst = in_grad + ((int64_t)sy * w + sx) * c;
            for (int i = 0; i < c; ++i) dst[i] += src[i];
          }
          src += c;
        }
      }
    }
  }
}

// in [H,W,Ci] -> out [H,W,Co]; weight [9*Ci, Co]; bias [Co] or null.
template <typename T>
void conv3x3(const T* in, int h, int w, int ci, const T* weight, const T* bias,
             int co, T* out, std::vector<T>& col_scratch) {
  col_scratch.resize((size_t)h * w * 9 * ci);
  im2col_3x3(in, h, w, ci, col_scratch.data());
  gemm<T>(false, false, h * w, co, 9 * ci, T(1), col_scratch.data(), 9 * ci,
          weight, co, T(0), out, co);
  if (bias) {
#pragma omp parallel for
    for (int p = 0; p < h * w; ++p)
      for (int j = 0; j < co; ++j) out[(int64_t)p * co + j] += bias[j];
  }
}

// Backward of conv3x3. grad_* accumulated (callers zero them once per step).
template <typename T>
void conv3x3_backward(const T* in, const T* gout, int h, int w, int ci, int co,
                      const T* weight, T* gin, T* gweight, T* gbias,
                      std::vector<T>& col_scratch, std::vector<T>& col2_scratch) {
  const int row_len = 9 * ci;
  col_scratch.resize((size_t)h * w * row_len);
  im2col_3x3(in, h, w, ci, col_scratch.data());
  // gweight += col^T * gout
  gemm<T>(true, false, row_len, co, h * w, T(1), col_scratch.data(), row_len,
          gout, co, T(1), gweight, co);
  if (gbias) {
    for (int p = 0; p < h * w; ++p)
      for (int j = 0; j < co; ++j) gbias[j] += gout[(int64_t)p * co + j];
  }
  if (gin) {
    // gcol = gout * weight^T, then scatter
    col2_scratch.resize((size_t)h * w * row_len);
    gemm<T>(false, true, h * w, row_len, co, T(1), gout, co, weight, co, T(0),
            col2_scratch.data(), row_len);
    col2im_3x3(col2_scratch.data(), h, w, ci, gin);
  }
}

// Transposed conv, kernel 2x2 stride 2: [H,W,Ci] -> [2H,2W,Co].
// weight [Ci, 4*Co] with column block order (dy,dx,co); bias [Co] or null.
template <typename T>
void conv_transpose2x2(const T* in, int h, int w, int ci, const T* weight,
                       const T* bias, int co, T* out, std::vector<T>& scratch) {
  scratch.resize((size_t)h * w * 4 * co);
  gemm<T>(false, false, h * w, 4 * co, ci, T(1), in, ci, weight, 4 * co, T(0),
          scratch.data(), 4 * co);
  const int w2 = 2 * w;
#pragma omp parallel for
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const T* src = scratch.data() + ((int64_t)y * w + x) * 4 * co;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          T* dst = out + ((int64_t)(2 * y + dy) * w2 + (2 * x + dx)) * co;
          const T* s = src + (dy * 2 + dx) * co;
          for (int j = 0; j < co; ++j) dst[j] = s[j] + (bias ? bias[j] : T(0));
        }
    }
  }
}

template <typename T>
void conv_transpose2x2_backward(const T* in, const T* gout, int h, int w,
                                int ci, int co, const T* weight, T* gin,
                                T* gweight, T* gbias,
                                std::vector<T>& scratch) {
  const int w2 = 2 * w;
  scratch.resize((size_t)h * w * 4 * co);
  // gather gout into the (HW) x (4*Co) layout
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T* dst = scratch.data() + ((int64_t)y * w + x) * 4 * co;
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          const T* src = gout + ((int64_t)(2 * y + dy) * w2 + (2 * x + dx)) * co;
          std::memcpy(dst + (dy * 2 + dx) * co, src, sizeof(T) * co);
        }
    }
  if (gbias) {
    for (int p = 0; p < 4 * h * w; ++p)
      for (int j = 0; j < co; ++j) gbias[j] += gout[(int64_t)p * co + j];
  }
  gemm<T>(true, false, ci, 4 * co, h * w, T(1), in, ci, scratch.data(), 4 * co,
          T(1), gweight, 4 * co);
  if (gin)
    gemm<T>(false, true, h * w, ci, 4 * co, T(1), scratch.data(), 4 * co,
            weight, 4 * co, T(1), gin, ci);
}

// Bilinear 2x upsample, half-pixel convention: [H,W,C] -> [2H,2W,C].
template <typename T>
void bilinear_up2(const T* in, int h, int w, int c, T* out) {
  const int h2 = 2 * h, w2 = 2 * w;
#pragma omp parallel for
  for (int y = 0; y < h2; ++y) {
    T sy = (T)((y + 0.5) / 2.0 - 0.5);
    int y0 = (int)std::floor(sy);
    T fy = sy - (T)y0;
    int y0c = std::min(std::max(y0, 0), h - 1);
    int y1c = std::min(std::max(y0 + 1, 0), h - 1);
    for (int x = 0; x < w2; ++x) {
      T sx = (T)((x + 0.5) / 2.0 - 0.5);
      int x0 = (int)std::floor(sx);
      T fx = sx - (T)x0;
      int x0c = std::min(std::max(x0, 0), w - 1);
      int x1c = std::min(std::max(x0 + 1, 0), w - 1);
      const T* p00 = in + ((int64_t)y0c * w + x0c) * c;
      const T* p01 = in + ((int64_t)y0c * w + x1c) * c;
      const T* p10 = in + ((int64_t)y1c * w + x0c) * c;
      const T* p11 = in + ((int64_t)y1c * w + x1c) * c;
      T* dst = out + ((int64_t)y * w2 + x) * c;
      for (int j = 0; j < c; ++j) {
        T top = p00[j] * (1 - fx) + p01[j] * fx;
        T bot = p10[j] * (1 - fx) + p11[j] * fx;
        dst[j] = top * (1 - fy) + bot * fy;
      }
    }
  }
}

template <typename T>
void bilinear_up2_backward(const T* gout, int h, int w, int c, T* gin) {
  const int h2 = 2 * h, w2 = 2 * w;
  for (int y = 0; y < h2; ++y) {
    T sy = (T)((y + 0.5) / 2.0 - 0.5);
    int y0 = (int)std::floor(sy);
    T fy = sy - (T)y0;
    int y0c = std::min(std::max(y0, 0), h - 1);
    int y1c = std::min(std::max(y0 + 1, 0), h - 1);
    for (int x = 0; x < w2; ++x) {
      T sx = (T)((x + 0.5) / 2.0 - 0.5);
      int x0 = (int)std::floor(sx);
      T fx = sx - (T)x0;
      int x0c = std::min(std::max(x0, 0), w - 1);
      int x1c = std::min(std::max(x0 + 1, 0), w - 1);
      const T* g = gout + ((int64_t)y * w2 + x) * c;
      for (int j = 0; j < c; ++j) {
        gin[((int64_t)y0c * w + x0c) * c + j] += g[j] * (1 - fy) * (1 - fx);
        gin[((int64_t)y0c * w + x1c) * c + j] += g[j] * (1 - fy) * fx;
        gin[((int64_t)y1c * w + x0c) * c + j] += g[j] * fy * (1 - fx);
        gin[((int64_t)y1c * w + x1c) * c + j] += g[j] * fy * fx;
      }
    }
  }
}

// Mean over the (2*eps-1)^2 window centered at each pixel, clipped to the
// grid; border windows average over in-bounds pixels only. Prefix-sum based.
template <typename T>
void box_mean(const T* in, int h, int w, int eps, T* out) {
  const int r = eps - 1;
  std::vector<double> ps((size_t)(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += (double)in[(int64_t)y * w + x];
      ps[(size_t)(y + 1) * (w + 1) + (x + 1)] =
          ps[(size_t)y * (w + 1) + (x + 1)] + row;
    }
  }
#pragma omp parallel for
  for (int y = 0; y < h; ++y) {
    int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
    for (int x = 0; x < w; ++x) {
      int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
      double s = ps[(size_t)(y1 + 1) * (w + 1) + (x1 + 1)] -
                 ps[(size_t)y0 * (w + 1) + (x1 + 1)] -
                 ps[(size_t)(y1 + 1) * (w + 1) + x0] +
                 ps[(size_t)y0 * (w + 1) + x0];
      int n = (y1 - y0 + 1) * (x1 - x0 + 1);
      out[(int64_t)y * w + x] = (T)(s / n);
    }
  }
}

// d in / d out of box_mean: scatter g(x)/n(x) back over each window, which is
// itself a clipped box sum of the normalized grad field.
template <typename T>
void box_mean_backward(const T* gout, int h, int w, int eps, T* gin) {
  const int r = eps - 1;
  std::vector<double> norm((size_t)h * w);
  for (int y = 0; y < h; ++y) {
    int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
    for (int x = 0; x < w; ++x) {
      int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
      norm[(size_t)y * w + x] =
          (double)gout[(int64_t)y * w + x] / ((y1 - y0 + 1) * (x1 - x0 + 1));
    }
  }
  std::vector<double> ps((size_t)(h + 1) * (w + 1), 0.0);
  for (int y = 0; y < h; ++y) {
    double row = 0.0;
    for (int x = 0; x < w; ++x) {
      row += norm[(size_t)y * w + x];
      ps[(size_t)(y + 1) * (w + 1) + (x + 1)] =
          ps[(size_t)y * (w + 1) + (x + 1)] + row;
    }
  }
  for (int y = 0; y < h; ++y) {
    int y0 = std::max(0, y - r), y1 = std::min(h - 1, y + r);
    for (int x = 0; x < w; ++x) {
      int x0 = std::max(0, x - r), x1 = std::min(w - 1, x + r);
      double s = ps[(size_t)(y1 + 1) * (w + 1) + (x1 + 1)] -
                 ps[(size_t)y0 * (w + 1) + (x1 + 1)] -
                 ps[(size_t)(y1 + 1) * (w + 1) + x0] +
                 ps[(size_t)y0 * (w + 1) + x0];
      gin[(int64_t)y * w + x] += (T)s;
    }
  }
}

}  // namespace plug::kern
