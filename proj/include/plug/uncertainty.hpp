#pragma once

// Per-pixel uncertainty from self cross-entropy, high-uncertainty point
// sampling, and the point loss term.

#include "plug/config.hpp"
#include "plug/image_io.hpp"
#include "plug/kernels.hpp"
#include "plug/rng.hpp"
#include "plug/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace plug {

constexpr double kProbClampLo = 1e-6;

template <typename T>
T clamp_prob(T p) {
  return std::min(std::max(p, (T)kProbClampLo), (T)(1.0 - kProbClampLo));
}

template <typename T>
T bce_self_scalar(T p) {
  double q = (double)clamp_prob(p);
  return (T)(-(q * std::log(q) + (1.0 - q) * std::log(1.0 - q)));
}

// u(x) = mean of self-BCE over the (2eps-1)^2 window clipped to the grid
template <typename T>
Tensor<T> uncertainty_map(const Tensor<T>& prob, int eps) {
  if (eps < 1) throw std::runtime_error("eps must be >= 1");
  int h = prob.shape[0], w = prob.shape[1];
  Tensor<T> ce({h, w});
  for (int64_t i = 0; i < prob.numel(); ++i) ce[i] = bce_self_scalar(prob[i]);
  Tensor<T> out({h, w});
  kern::box_mean<T>(ce.ptr(), h, w, eps, out.ptr());
  return out;
}

// scaled by 255/ln2, clipped; for visualization
template <typename T>
Image8 uncertainty_to_image(const Tensor<T>& u) {
  Image8 img(u.shape[0], u.shape[1], 1);
  for (int64_t i = 0; i < u.numel(); ++i) {
    double v = (double)u[i] * 255.0 / M_LN2;
    img.v[i] = (uint8_t)std::min(255.0, std::max(0.0, std::round(v)));
  }
  return img;
}

struct PointSample {
  std::vector<int> selected;  // exactly K distinct flat indices
  std::vector<int> top;       // cK highest-uncertainty candidates
  std::vector<int> fill;      // (1-c)K random from the remainder
  std::vector<int> rejected;  // candidates that were not selected
};

// Draw nK distinct candidates, keep the cK most uncertain, fill the rest
// uniformly from the remaining candidates. Candidates are shuffled before the
// stable sort, so equal uncertainties resolve by the seeded random order.
template <typename T>
PointSample sample_points(const Tensor<T>& u, const PointLossParams& prm, Rng& rng) {
  int h = u.shape[0], w = u.shape[1];
  int64_t npix = (int64_t)h * w;
  int64_t nk = (int64_t)prm.n * prm.K;
  if (nk > npix) throw std::runtime_error("nK exceeds pixel count");
  int ck = (int)std::lround(prm.c * prm.K);

  auto cand64 = rng.sample_distinct(npix, nk);
  std::vector<int> cand(cand64.begin(), cand64.end());
  rng.shuffle(cand);
  std::stable_sort(cand.begin(), cand.end(),
                   [&](int a, int b) { return u[a] > u[b]; });

  PointSample out;
  out.top.assign(cand.begin(), cand.begin() + ck);
  std::vector<int> rest(cand.begin() + ck, cand.end());
  auto pick = rng.sample_distinct((int64_t)rest.size(), prm.K - ck);
  std::vector<char> taken(rest.size(), 0);
  for (int64_t i : pick) {
    out.fill.push_back(rest[(size_t)i]);
    taken[(size_t)i] = 1;
  }
  for (size_t i = 0; i < rest.size(); ++i)
    if (!taken[i]) out.rejected.push_back(rest[i]);
  out.selected = out.top;
  out.selected.insert(out.selected.end(), out.fill.begin(), out.fill.end());
  return out;
}

// probs and window-mean uncertainty from raw logits, on the tape
template <typename T>
std::pair<typename Tape<T>::Var, typename Tape<T>::Var> prob_and_uncertainty(
    Tape<T>& tp, typename Tape<T>::Var logits, int h, int w, int eps) {
  auto p = tp.sigmoid_clamp(logits, (T)kProbClampLo);
  auto u = tp.box_mean(tp.self_bce(p), h, w, eps);
  return {p, u};
}

// mean over points of alpha*l_e + beta*u; gt is [B,H,W,1] binary, idx holds
// per-sample flat pixel indices. With uncertainty_grad off, u is detached.
template <typename T>
typename Tape<T>::Var point_loss(Tape<T>& tp, typename Tape<T>::Var p,
                                 typename Tape<T>::Var u, const Tensor<T>& gt,
                                 const std::vector<std::vector<int>>& idx,
                                 const PointLossParams& prm) {
  int B = (int)idx.size();
  int K = (int)idx[0].size();
  int64_t hw = gt.numel() / B;
  Tensor<T> gt_pts({B, K});
  for (int b = 0; b < B; ++b)
    for (int k = 0; k < K; ++k) gt_pts[(int64_t)b * K + k] = gt[b * hw + idx[b][k]];
  auto le = tp.bce(tp.gather_points(p, idx), gt_pts);
  auto up = tp.gather_points(prm.uncertainty_grad ? u : tp.detach(u), idx);
  return tp.mean_all(tp.add(tp.scale(le, (T)prm.alpha), tp.scale(up, (T)prm.beta)));
}

}  // namespace plug
