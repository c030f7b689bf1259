#pragma once

// Loss assembly, pretrain/finetune loops, evaluation, and gradient checking.

#include "plug/dataset_io.hpp"
#include "plug/metrics.hpp"
#include "plug/model.hpp"
#include "plug/optim.hpp"
#include "plug/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace plug {

struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// one object: the double-magnified crop around its prompt box
template <typename T>
struct PreparedSample {
  Tensor<T> image;        // [S,S,3], [0,1]
  Tensor<T> gt_v, gt_a;   // [S,S,1], 0/1
  Mask gt_v_mask, gt_a_mask;
  BoxF prompt;
  CropTransform transform;
  int scene_idx = 0;
  double occlusion_ratio = 0.0;
};

template <typename T>
PreparedSample<T> prepare_sample(const Scene& sc, int scene_idx, int out_size,
                                 bool amodal_prompt) {
  const ObjectAnnotation& o = sc.objects.at(0);
  BBox box = amodal_prompt ? o.amodal_bbox : o.visible_bbox;
  CropResult cr = crop_double(sc.image, box, out_size);
  PreparedSample<T> s;
  s.transform = cr.transform;
  s.scene_idx = scene_idx;
  s.occlusion_ratio = o.occlusion_ratio;
  s.image = Tensor<T>({out_size, out_size, 3});
  for (size_t i = 0; i < cr.image.size(); ++i) s.image[i] = (T)cr.image[i];
  s.gt_v_mask = crop_mask(o.visible_mask, cr.transform);
  s.gt_a_mask = crop_mask(o.amodal_mask, cr.transform);
  s.gt_v = Tensor<T>({out_size, out_size, 1});
  s.gt_a = Tensor<T>({out_size, out_size, 1});
  for (size_t i = 0; i < s.gt_v_mask.v.size(); ++i) {
    s.gt_v[i] = (T)s.gt_v_mask.v[i];
    s.gt_a[i] = (T)s.gt_a_mask.v[i];
  }
  s.prompt = bbox_to_crop(box, cr.transform);
  return s;
}

template <typename T>
std::vector<PreparedSample<T>> prepare_dataset(const LoadedDataset& ds,
                                               int out_size, bool amodal_prompt) {
  std::vector<PreparedSample<T>> out;
  out.reserve(ds.scenes.size());
  for (size_t i = 0; i < ds.scenes.size(); ++i)
    out.push_back(prepare_sample<T>(ds.scenes[i], (int)i, out_size, amodal_prompt));
  return out;
}

template <typename T>
struct Batch {
  Tensor<T> images;       // [B,S,S,3]
  Tensor<T> gt_v, gt_a;   // [B,S,S,1]
  std::vector<BoxF> prompts;
  std::vector<int> sample_ids;
};

template <typename T>
Batch<T> make_batch(const std::vector<PreparedSample<T>>& data,
                    const std::vector<int>& order, int start, int count) {
  int S = data[0].image.shape[0];
  Batch<T> b;
  b.images = Tensor<T>({count, S, S, 3});
  b.gt_v = Tensor<T>({count, S, S, 1});
  b.gt_a = Tensor<T>({count, S, S, 1});
  int64_t npix = (int64_t)S * S;
  for (int i = 0; i < count; ++i) {
    const auto& s = data[order[start + i]];
    std::copy(s.image.data.begin(), s.image.data.end(),
              b.images.data.begin() + (int64_t)i * npix * 3);
    std::copy(s.gt_v.data.begin(), s.gt_v.data.end(),
              b.gt_v.data.begin() + i * npix);
    std::copy(s.gt_a.data.begin(), s.gt_a.data.end(),
              b.gt_a.data.begin() + i * npix);
    b.prompts.push_back(s.prompt);
    b.sample_ids.push_back(order[start + i]);
  }
  return b;
}

// per-sample point indices drawn from the current uncertainty values
template <typename T>
std::vector<std::vector<int>> draw_points(Tape<T>& tp, typename Tape<T>::Var u,
                                          const PointLossParams& pp,
                                          uint64_t seed, uint64_t branch_tag) {
  const Tensor<T>& uv = tp.val(u);
  int B = uv.shape[0], S = uv.shape[1];
  std::vector<std::vector<int>> idx(B);
  for (int b = 0; b < B; ++b) {
    Tensor<T> ub({S, S});
    std::copy(uv.data.begin() + (int64_t)b * S * S,
              uv.data.begin() + (int64_t)(b + 1) * S * S, ub.data.begin());
    Rng rng(hash_seed(seed, branch_tag, (uint64_t)b));
    idx[b] = sample_points(ub, pp, rng).selected;
  }
  return idx;
}

template <typename T>
struct LossBuild {
  typename Tape<T>::Var loss;
  std::vector<std::vector<int>> idx_v, idx_a;
  double loss_value = 0.0;
};

// L = sum over branches of (BCE + point loss) + refine BCE, per flags.
// fixed_idx_* pin the sampled points (used by gradcheck for a smooth loss).
template <typename T>
LossBuild<T> finetune_loss(PlugModel<T>& model, Tape<T>& tp, const Batch<T>& b,
                           const TrainConfig& tc, const PointLossParams& pp,
                           uint64_t step_seed,
                           const std::vector<std::vector<int>>* fixed_idx_v = nullptr,
                           const std::vector<std::vector<int>>* fixed_idx_a = nullptr) {
  using Var = typename Tape<T>::Var;
  int S = model.cfg.image_size;
  LossBuild<T> out;

  Var Ep = model.encode_prompt(tp, b.prompts);
  Var Ea = model.encode(tp, b.images, model.use_lora ? Branch::amodal : Branch::base);
  Var ma = model.decode(tp, Ea, Ep, Branch::amodal);
  auto [pa, ua] = prob_and_uncertainty(tp, ma, S, S, pp.eps);
  Var loss = tp.mean_all(tp.bce(pa, b.gt_a));
  if (tc.pt) {
    out.idx_a = fixed_idx_a ? *fixed_idx_a : draw_points(tp, ua, pp, step_seed, 0xa);
    loss = tp.add(loss, point_loss(tp, pa, ua, b.gt_a, out.idx_a, pp));
  }

  Var pv = pa, uv = ua;
  if (model.dual_branch) {
    Var Ev = model.encode(tp, b.images, Branch::inmodal);
    Var mv = model.decode(tp, Ev, Ep, Branch::inmodal);
    auto [pv2, uv2] = prob_and_uncertainty(tp, mv, S, S, pp.eps);
    pv = pv2;
    uv = uv2;
    loss = tp.add(loss, tp.mean_all(tp.bce(pv, b.gt_v)));
    if (tc.pt) {
      out.idx_v = fixed_idx_v ? *fixed_idx_v : draw_points(tp, uv, pp, step_seed, 0xb);
      loss = tp.add(loss, point_loss(tp, pv, uv, b.gt_v, out.idx_v, pp));
    }
  }

  if (model.use_refine) {
    Var img = tp.input(b.images);
    Var refined = model.refine(tp, img, ma, pv, pa, uv, ua);
    Var rp = tp.sigmoid_clamp(refined, (T)kProbClampLo);
    loss = tp.add(loss, tp.mean_all(tp.bce(rp, b.gt_a)));
  }

  out.loss = loss;
  out.loss_value = (double)tp.val(loss)[0];
  return out;
}

// pretrain: frozen-base-to-be encoder + prompt + one decoder on visible BCE
template <typename T>
LossBuild<T> pretrain_loss(PlugModel<T>& model, Tape<T>& tp, const Batch<T>& b) {
  int S = model.cfg.image_size;
  auto Ep = model.encode_prompt(tp, b.prompts);
  auto E = model.encode(tp, b.images, Branch::base);
  auto m = model.decode(tp, E, Ep, Branch::amodal);
  auto p = tp.sigmoid_clamp(m, (T)kProbClampLo);
  LossBuild<T> out;
  out.loss = tp.mean_all(tp.bce(p, b.gt_v));
  out.loss_value = (double)tp.val(out.loss)[0];
  return out;
}

struct TrainLog {
  std::vector<double> epoch_loss;
  std::vector<double> lr_trace;  // one entry per optimizer step
  int64_t trainable_params = 0;
  int total_steps = 0;

  nlohmann::json to_json() const {
    return nlohmann::json{{"epoch_loss", epoch_loss},
                          {"lr_trace", lr_trace},
                          {"trainable_params", trainable_params},
                          {"total_steps", total_steps}};
  }
};

template <typename T, typename LossFn>
TrainLog run_training(PlugModel<T>& model,
                      const std::vector<PreparedSample<T>>& data,
                      const TrainConfig& tc, int epochs, LossFn make_loss) {
  if (data.empty()) throw std::runtime_error("empty training set");
  int N = (int)data.size(), B = std::min(tc.batch, N);
  int steps_per_epoch = (N + B - 1) / B;
  int total = epochs * steps_per_epoch;
  AdamW<T> opt(model.params, tc);
  TrainLog log;
  log.trainable_params = model.params.count_trainable();
  log.total_steps = total;
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  int step = 0;
  for (int e = 0; e < epochs; ++e) {
    Rng(hash_seed(tc.seed, 0x0e9, (uint64_t)e)).shuffle(order);
    double acc = 0.0;
    for (int s0 = 0; s0 < N; s0 += B) {
      ++step;
      Batch<T> batch = make_batch(data, order, s0, std::min(B, N - s0));
      Tape<T> tp(&model.params);
      model.params.zero_grad();
      auto built = make_loss(tp, batch, hash_seed(tc.seed, 0x57e9, (uint64_t)step));
      if (!std::isfinite(built.loss_value))
        throw DivergenceError("non-finite loss at step " + std::to_string(step));
      acc += built.loss_value;
      tp.backward(built.loss);
      double lr = lr_at(step, total, tc);
      log.lr_trace.push_back(lr);
      opt.step(lr);
    }
    log.epoch_loss.push_back(acc / steps_per_epoch);
  }
  return log;
}

template <typename T>
TrainLog run_pretrain(PlugModel<T>& model, const std::vector<PreparedSample<T>>& data,
                      const RunConfig& cfg) {
  TrainConfig tc = cfg.train;
  tc.lr_peak = cfg.train.pretrain_lr_peak;
  return run_training(model, data, tc, cfg.train.pretrain_epochs,
                      [&](Tape<T>& tp, const Batch<T>& b, uint64_t) {
                        return pretrain_loss(model, tp, b);
                      });
}

template <typename T>
TrainLog run_finetune(PlugModel<T>& model, const std::vector<PreparedSample<T>>& data,
                      const RunConfig& cfg) {
  model.freeze_for_finetune();
  return run_training(model, data, cfg.train, cfg.train.epochs,
                      [&](Tape<T>& tp, const Batch<T>& b, uint64_t seed) {
                        return finetune_loss(model, tp, b, cfg.train, cfg.point, seed);
                      });
}

// all maps a predict/eval consumer needs, host-side, [S,S]
template <typename T>
struct Prediction {
  Tensor<T> prob_v, prob_a, u_v, u_a, prob_final;
};

template <typename T>
std::vector<Prediction<T>> predict_batch(PlugModel<T>& model, const Batch<T>& b,
                                         const PointLossParams& pp) {
  using Var = typename Tape<T>::Var;
  int S = model.cfg.image_size, B = (int)b.prompts.size();
  Tape<T> tp(&model.params);
  Var Ep = model.encode_prompt(tp, b.prompts);
  Var Ea = model.encode(tp, b.images, model.use_lora ? Branch::amodal : Branch::base);
  Var ma = model.decode(tp, Ea, Ep, Branch::amodal);
  auto [pa, ua] = prob_and_uncertainty(tp, ma, S, S, pp.eps);
  Var pv = pa, uv = ua;
  if (model.dual_branch) {
    Var Ev = model.encode(tp, b.images, Branch::inmodal);
    Var mv = model.decode(tp, Ev, Ep, Branch::inmodal);
    auto [pv2, uv2] = prob_and_uncertainty(tp, mv, S, S, pp.eps);
    pv = pv2;
    uv = uv2;
  }
  Var pfin = pa;
  if (model.use_refine) {
    Var img = tp.input(b.images);
    Var refined = model.refine(tp, img, ma, pv, pa, uv, ua);
    pfin = tp.sigmoid_clamp(refined, (T)kProbClampLo);
  }
  auto slice = [&](Var v, int i) {
    Tensor<T> out({S, S});
    const auto& full = tp.val(v);
    std::copy(full.data.begin() + (int64_t)i * S * S,
              full.data.begin() + (int64_t)(i + 1) * S * S, out.data.begin());
    return out;
  };
  std::vector<Prediction<T>> preds((size_t)B);
  for (int i = 0; i < B; ++i) {
    preds[i].prob_v = slice(pv, i);
    preds[i].prob_a = slice(pa, i);
    preds[i].u_v = slice(uv, i);
    preds[i].u_a = slice(ua, i);
    preds[i].prob_final = slice(pfin, i);
  }
  return preds;
}

template <typename T>
MetricsReport evaluate_model(PlugModel<T>& model,
                             const std::vector<PreparedSample<T>>& data,
                             const TrainConfig& tc, const PointLossParams& pp) {
  if (data.empty()) throw std::runtime_error("empty evaluation set");
  MetricsReport rep;
  int N = (int)data.size(), B = std::min(tc.batch, N);
  std::vector<int> order(N);
  std::iota(order.begin(), order.end(), 0);
  for (int s0 = 0; s0 < N; s0 += B) {
    int count = std::min(B, N - s0);
    Batch<T> batch = make_batch(data, order, s0, count);
    auto preds = predict_batch(model, batch, pp);
    for (int i = 0; i < count; ++i) {
      const auto& s = data[order[s0 + i]];
      Mask pred = binarize(preds[i].prob_final, tc.threshold, tc.threshold_space);
      ObjectMetrics om;
      om.scene = s.scene_idx;
      om.object = 0;
      om.occlusion_ratio = s.occlusion_ratio;
      om.iou_full = iou(pred, s.gt_a_mask);
      Mask gt_occ(s.gt_a_mask.h, s.gt_a_mask.w);
      Mask pred_occ(pred.h, pred.w);
      for (size_t j = 0; j < gt_occ.v.size(); ++j) {
        gt_occ.v[j] = s.gt_a_mask.v[j] && !s.gt_v_mask.v[j];
        pred_occ.v[j] = pred.v[j] && !s.gt_v_mask.v[j];
      }
      if (gt_occ.count() > 0) {
        om.has_occ = true;
        om.iou_occ = pred_occ.count() + gt_occ.count() > 0 ? iou(pred_occ, gt_occ) : 0.0;
      }
      rep.per_object.push_back(om);
    }
  }
  rep.finalize();
  return rep;
}

// ---- gradient checking ----

struct GradcheckGroup {
  std::string name;
  double max_rel_err = 0.0;
  int probes = 0;
};

struct GradcheckReport {
  std::vector<GradcheckGroup> groups;
  bool frozen_base_zero = false;
  bool adapter_a_zero_at_init = false;
  bool pass = false;

  nlohmann::json to_json() const {
    nlohmann::json gs = nlohmann::json::array();
    for (const auto& g : groups)
      gs.push_back({{"group", g.name}, {"max_rel_err", g.max_rel_err}, {"probes", g.probes}});
    return nlohmann::json{{"groups", gs},
                          {"frozen_base_zero", frozen_base_zero},
                          {"adapter_a_zero_at_init", adapter_a_zero_at_init},
                          {"pass", pass}};
  }
};

// central differences (h = 1e-5, 64-bit) on a dim-16 toy config
inline GradcheckReport gradcheck(uint64_t seed, int probes_per_group = 24,
                                 double tol = 1e-3) {
  using T = double;
  EncoderConfig ec;
  ec.image_size = 16;
  ec.patch_size = 8;
  ec.embed_dim = 16;
  ec.heads = 2;
  ec.blocks = 1;
  ec.rank = 2;
  PlugModel<T> model = PlugModel<T>::finetune_model(ec, true, true, 1, 8, seed);
  model.freeze_for_finetune();

  TrainConfig tc;
  tc.pt = true;
  PointLossParams pp;
  pp.eps = 2;
  pp.n = 2;
  pp.c = 0.5;
  pp.K = 8;

  int S = ec.image_size, B = 2;
  Rng rng(hash_seed(seed, 0x9cc));
  Batch<T> batch;
  batch.images = Tensor<T>({B, S, S, 3});
  for (auto& v : batch.images.data) v = (T)rng.uniform();
  batch.gt_v = Tensor<T>({B, S, S, 1});
  batch.gt_a = Tensor<T>({B, S, S, 1});
  for (int64_t i = 0; i < batch.gt_a.numel(); ++i) {
    batch.gt_a[i] = (T)(rng.uniform() < 0.5 ? 1 : 0);
    batch.gt_v[i] = batch.gt_a[i] * (T)(rng.uniform() < 0.7 ? 1 : 0);
  }
  batch.prompts = {BoxF{2, 3, 11, 12}, BoxF{1, 1, 14, 9}};

  GradcheckReport rep;

  // at init: frozen base and adapter-A gradients must be exactly zero
  {
    Tape<T> tp(&model.params);
    model.params.zero_grad();
    auto built = finetune_loss(model, tp, batch, tc, pp, hash_seed(seed, 1));
    tp.backward(built.loss);
    rep.frozen_base_zero = true;
    rep.adapter_a_zero_at_init = true;
    for (const auto& p : model.params.all()) {
      bool enc_base = p.name.rfind("enc.", 0) == 0;
      bool lora_a_mat = p.name.rfind("lora.", 0) == 0 && p.name.back() == 'A';
      if (!enc_base && !lora_a_mat) continue;
      for (int64_t i = 0; i < p.grad.numel(); ++i)
        if (p.grad[i] != 0.0) {
          if (enc_base) rep.frozen_base_zero = false;
          else rep.adapter_a_zero_at_init = false;
        }
    }
  }

  // jitter trainables (B leaves zero otherwise kills most adapter paths),
  // pin the sampled points, then probe every group with central differences
  Rng jit(hash_seed(seed, 0x71e));
  for (auto& p : model.params.all())
    if (p.trainable)
      for (auto& v : p.value.data) v += 0.02 * jit.normal();

  std::vector<std::vector<int>> idx_v, idx_a;
  {
    Tape<T> tp(&model.params);
    auto built = finetune_loss(model, tp, batch, tc, pp, hash_seed(seed, 2));
    idx_v = built.idx_v;
    idx_a = built.idx_a;
  }
  auto eval_loss = [&]() {
    Tape<T> tp(&model.params);
    return finetune_loss(model, tp, batch, tc, pp, hash_seed(seed, 2), &idx_v, &idx_a)
        .loss_value;
  };
  {
    Tape<T> tp(&model.params);
    model.params.zero_grad();
    auto built = finetune_loss(model, tp, batch, tc, pp, hash_seed(seed, 2), &idx_v, &idx_a);
    tp.backward(built.loss);
  }

  const double h = 1e-5;
  Rng probe(hash_seed(seed, 0xfd));
  rep.pass = rep.frozen_base_zero && rep.adapter_a_zero_at_init;
  for (const std::string& prefix :
       {std::string("lora."), std::string("prompt."), std::string("dec.v."),
        std::string("dec.a."), std::string("refine.")}) {
    std::vector<std::pair<int, int64_t>> coords;
    for (int pi = 0; pi < model.params.size(); ++pi) {
      const auto& p = model.params.at(pi);
      if (p.trainable && p.name.rfind(prefix, 0) == 0)
        for (int64_t i = 0; i < p.value.numel(); ++i) coords.push_back({pi, i});
    }
    GradcheckGroup g;
    g.name = prefix;
    int np = std::min<int>(probes_per_group, (int)coords.size());
    auto chosen = probe.sample_distinct((int64_t)coords.size(), np);
    for (int64_t ci : chosen) {
      auto [pi, i] = coords[(size_t)ci];
      auto& p = model.params.at(pi);
      double orig = p.value[i];
      p.value[i] = orig + h;
      double lp = eval_loss();
      p.value[i] = orig - h;
      double lm = eval_loss();
      p.value[i] = orig;
      double fd = (lp - lm) / (2.0 * h);
      double an = p.grad[i];
      double rel = std::abs(fd - an) / std::max({1e-6, std::abs(fd), std::abs(an)});
      g.max_rel_err = std::max(g.max_rel_err, rel);
      ++g.probes;
    }
    if (g.max_rel_err > tol) rep.pass = false;
    rep.groups.push_back(g);
  }
  return rep;
}

}  // namespace plug
