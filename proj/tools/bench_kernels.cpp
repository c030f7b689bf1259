// Times plug::kern against the serial reference kernels on training-shaped
// inputs and checks they agree while at it.

#include "plug/kernels.hpp"
#include "plug/rng.hpp"
#include "plug/serial_ref.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

using namespace plug;

namespace {

double time_ms(const std::function<void()>& fn, int reps) {
  fn();  // warm up
  auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) fn();
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, (double)std::fabs(a[i] - b[i]));
  return m;
}

std::vector<float> randv(size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = (float)rng.normal();
  return v;
}

void report(const char* name, double flops, double ref_ms, double kern_ms,
            double diff) {
  std::printf("%-22s ref %8.3f ms  kern %8.3f ms  speedup %5.2fx", name, ref_ms,
              kern_ms, ref_ms / kern_ms);
  if (flops > 0) std::printf("  %7.2f GF/s", flops / (kern_ms * 1e6));
  std::printf("  max|diff| %.2e\n", diff);
}

}  // namespace

int main() {
  Rng rng(12345);
  int reps = 20;

  {
    // the dominant training GEMM: [B*tokens, D] x [D, D]
    int m = 512, k = 128, n = 128;
    auto a = randv((size_t)m * k, rng), b = randv((size_t)k * n, rng);
    std::vector<float> c1((size_t)m * n), c2((size_t)m * n);
    double rms = time_ms([&] { ref::matmul(a.data(), b.data(), m, n, k, c1.data()); }, reps);
    double kms = time_ms(
        [&] {
          kern::gemm<float>(false, false, m, n, k, 1.0f, a.data(), k, b.data(), n,
                            0.0f, c2.data(), n);
        },
        reps);
    report("gemm 512x128x128", 2.0 * m * n * k, rms, kms, max_abs_diff(c1, c2));
  }
  {
    int m = 512, k = 128, n = 512;  // mlp expansion
    auto a = randv((size_t)m * k, rng), b = randv((size_t)k * n, rng);
    std::vector<float> c1((size_t)m * n), c2((size_t)m * n);
    double rms = time_ms([&] { ref::matmul(a.data(), b.data(), m, n, k, c1.data()); }, reps);
    double kms = time_ms(
        [&] {
          kern::gemm<float>(false, false, m, n, k, 1.0f, a.data(), k, b.data(), n,
                            0.0f, c2.data(), n);
        },
        reps);
    report("gemm 512x128x512", 2.0 * m * n * k, rms, kms, max_abs_diff(c1, c2));
  }
  {
    int h = 64, w = 64, ci = 16, co = 16;  // refine trunk conv
    auto in = randv((size_t)h * w * ci, rng), wt = randv((size_t)9 * ci * co, rng),
         bias = randv(co, rng);
    std::vector<float> o1((size_t)h * w * co), o2((size_t)h * w * co), scratch;
    double rms = time_ms(
        [&] { ref::conv3x3(in.data(), h, w, ci, wt.data(), bias.data(), co, o1.data()); },
        reps);
    double kms = time_ms(
        [&] {
          kern::conv3x3(in.data(), h, w, ci, wt.data(), bias.data(), co, o2.data(),
                        scratch);
        },
        reps);
    report("conv3x3 64x64x16", 2.0 * h * w * 9 * ci * co, rms, kms,
           max_abs_diff(o1, o2));
  }
  {
    int h = 8, w = 8, ci = 128, co = 64;  // decoder upscale stage
    auto in = randv((size_t)h * w * ci, rng), wt = randv((size_t)ci * 4 * co, rng),
         bias = randv(co, rng);
    std::vector<float> o1((size_t)4 * h * w * co), o2((size_t)4 * h * w * co), scratch;
    double rms = time_ms(
        [&] {
          ref::conv_transpose2x2(in.data(), h, w, ci, wt.data(), bias.data(), co,
                                 o1.data());
        },
        reps);
    double kms = time_ms(
        [&] {
          kern::conv_transpose2x2(in.data(), h, w, ci, wt.data(), bias.data(), co,
                                  o2.data(), scratch);
        },
        reps);
    report("convT2x2 8x8 128->64", 2.0 * 4 * h * w * ci * co, rms, kms,
           max_abs_diff(o1, o2));
  }
  {
    int h = 32, w = 32, c = 32;
    auto in = randv((size_t)h * w * c, rng);
    std::vector<float> o1((size_t)4 * h * w * c), o2((size_t)4 * h * w * c);
    double rms = time_ms([&] { ref::bilinear_up2(in.data(), h, w, c, o1.data()); }, reps);
    double kms = time_ms([&] { kern::bilinear_up2(in.data(), h, w, c, o2.data()); }, reps);
    report("bilinear_up2 32x32x32", 0, rms, kms, max_abs_diff(o1, o2));
  }
  {
    int h = 64, w = 64, eps = 3;
    auto in = randv((size_t)h * w, rng);
    std::vector<float> o1((size_t)h * w), o2((size_t)h * w);
    double rms = time_ms([&] { ref::box_mean(in.data(), h, w, eps, o1.data()); }, reps);
    double kms = time_ms([&] { kern::box_mean(in.data(), h, w, eps, o2.data()); }, reps);
    report("box_mean 64x64 eps=3", 0, rms, kms, max_abs_diff(o1, o2));
  }
  return 0;
}
