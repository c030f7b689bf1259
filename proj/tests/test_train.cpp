#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "plug/trainer.hpp"

#include <cmath>
#include <cstring>

using namespace plug;

TEST_CASE("adamw matches a hand-computed two-step trace on one scalar") {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>({1}, {1.0}));
  TrainConfig tc;  // betas 0.9/0.999, wd 0.1
  AdamW<double> opt(ps, tc);
  double lr = 0.1;

  ps.get("w").grad[0] = 0.5;
  opt.step(lr);
  // step 1: m=0.05, v=0.00025/..., mhat=0.5, vhat=0.25
  double m = 0.1 * 0.5, v = 0.001 * 0.25;
  double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
  double w = 1.0 - lr * (mhat / (std::sqrt(vhat) + 1e-8) + 0.1 * 1.0);
  CHECK(ps.get("w").value[0] == doctest::Approx(w).epsilon(1e-12));

  ps.get("w").grad[0] = -0.25;
  opt.step(lr);
  m = 0.9 * m + 0.1 * (-0.25);
  v = 0.999 * v + 0.001 * 0.0625;
  mhat = m / (1 - 0.9 * 0.9);
  vhat = v / (1 - 0.999 * 0.999);
  double w2 = w - lr * (mhat / (std::sqrt(vhat) + 1e-8) + 0.1 * w);
  CHECK(ps.get("w").value[0] == doctest::Approx(w2).epsilon(1e-12));
}

TEST_CASE("adamw skips frozen parameters entirely") {
  ParamStore<double> ps;
  ps.add("frozen", Tensor<double>({1}, {2.0}), false);
  ps.add("live", Tensor<double>({1}, {2.0}));
  ps.get("frozen").grad[0] = 1.0;
  ps.get("live").grad[0] = 1.0;
  TrainConfig tc;
  AdamW<double> opt(ps, tc);
  opt.step(0.1);
  CHECK(ps.get("frozen").value[0] == 2.0);
  CHECK(ps.get("live").value[0] != 2.0);
}

TEST_CASE("learning-rate schedule: warmup peak, midpoint, and final zero") {
  TrainConfig tc;  // lr_peak 1e-3, warmup 250
  int total = 31250;
  CHECK(lr_at(250, total, tc) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(125, total, tc) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(total, total, tc) == 0.0);
  CHECK(lr_at((250 + total) / 2, total, tc) ==
        doctest::Approx(1e-3 * (total - (250 + total) / 2) / (double)(total - 250)));
  CHECK_THROWS(lr_at(total + 1, total, tc));
}

TEST_CASE("binarize uses a strict threshold on probabilities") {
  Tensor<double> p({1, 3});
  p[0] = 0.3;
  p[1] = 0.31;
  p[2] = 0.29;
  Mask m = binarize(p, 0.3);
  CHECK(m.v[0] == 0);  // exactly at the threshold -> background
  CHECK(m.v[1] == 1);
  CHECK(m.v[2] == 0);

  Rng rng(3);
  Tensor<double> q({16, 16});
  for (auto& v : q.data) v = rng.uniform();
  Mask got = binarize(q, 0.3);
  for (int64_t i = 0; i < q.numel(); ++i) CHECK(got.v[i] == (q[i] > 0.3 ? 1 : 0));

  // logit-space switch: tau is a raw logit, compared via sigmoid
  Tensor<double> r({1, 2});
  r[0] = 0.57;  // sigmoid(0.3) = 0.5744
  r[1] = 0.58;
  Mask ml = binarize(r, 0.3, "logit");
  CHECK(ml.v[0] == 0);
  CHECK(ml.v[1] == 1);
  CHECK_THROWS(binarize(r, 0.3, "bogus"));
}

TEST_CASE("iou worked examples") {
  Mask a(4, 4), b(4, 4);
  // |a| = 6, |b| = 4, overlap 3 -> 3/7
  for (int i = 0; i < 6; ++i) a.v[i] = 1;
  for (int i = 3; i < 7; ++i) b.v[i] = 1;
  CHECK(iou(a, b) == doctest::Approx(3.0 / 7.0).epsilon(1e-12));
  CHECK(iou(a, a) == 1.0);
  Mask c(4, 4);
  c.v[15] = 1;
  CHECK(iou(a, c) == 0.0);
  Mask e(4, 4);
  CHECK_THROWS(iou(e, e));
}

TEST_CASE("metrics means match a flat recomputation over 50 mask pairs") {
  Rng rng(8);
  MetricsReport rep;
  double sum_full = 0, sum_occ = 0;
  int n_occ = 0;
  for (int t = 0; t < 50; ++t) {
    Mask pred(8, 8), gt(8, 8), vis(8, 8);
    for (int i = 0; i < 64; ++i) {
      gt.v[i] = rng.uniform() < 0.4;
      pred.v[i] = rng.uniform() < 0.4;
      vis.v[i] = gt.v[i] && rng.uniform() < 0.6;
    }
    if (gt.count() == 0) gt.v[0] = 1;
    if (pred.count() == 0) pred.v[1] = 1;
    ObjectMetrics om;
    om.scene = t;
    om.iou_full = iou(pred, gt);
    sum_full += om.iou_full;
    Mask gt_occ(8, 8), pred_occ(8, 8);
    for (int i = 0; i < 64; ++i) {
      gt_occ.v[i] = gt.v[i] && !vis.v[i];
      pred_occ.v[i] = pred.v[i] && !vis.v[i];
    }
    if (gt_occ.count() > 0) {
      om.has_occ = true;
      om.iou_occ = iou(pred_occ, gt_occ);
      sum_occ += om.iou_occ;
      ++n_occ;
    }
    rep.per_object.push_back(om);
  }
  rep.finalize();
  CHECK(rep.n_objects == 50);
  CHECK(rep.n_objects - rep.n_skipped_occ == n_occ);
  CHECK(rep.miou_full == doctest::Approx(sum_full / 50).epsilon(1e-12));
  CHECK(rep.miou_occ == doctest::Approx(sum_occ / n_occ).epsilon(1e-12));
  auto j = rep.to_json();
  CHECK(j.contains("miou_full"));
  CHECK(j.contains("miou_occ"));
  CHECK(j.contains("n_objects"));
  CHECK(j.contains("n_skipped_occ"));
  CHECK(j.at("per_object").size() == 50);
}

TEST_CASE("empty visible mask makes occluded iou equal full iou") {
  // evaluate_model path: gt_v empty -> occluded region is the full mask
  Mask pred(8, 8), gt(8, 8), vis(8, 8);
  for (int i = 8; i < 20; ++i) gt.v[i] = 1;
  for (int i = 10; i < 22; ++i) pred.v[i] = 1;
  Mask gt_occ(8, 8), pred_occ(8, 8);
  for (int i = 0; i < 64; ++i) {
    gt_occ.v[i] = gt.v[i] && !vis.v[i];
    pred_occ.v[i] = pred.v[i] && !vis.v[i];
  }
  CHECK(iou(pred_occ, gt_occ) == iou(pred, gt));
}

TEST_CASE("disabling the point term reduces branch loss to plain bce") {
  EncoderConfig ec;
  ec.image_size = 16;
  ec.patch_size = 8;
  ec.embed_dim = 16;
  ec.heads = 2;
  ec.blocks = 1;
  ec.rank = 2;
  PlugModel<double> m = PlugModel<double>::finetune_model(ec, true, false, 1, 8, 51);
  Rng rng(52);
  Batch<double> b;
  b.images = Tensor<double>({1, 16, 16, 3});
  for (auto& v : b.images.data) v = rng.uniform();
  b.gt_v = Tensor<double>({1, 16, 16, 1});
  b.gt_a = Tensor<double>({1, 16, 16, 1});
  for (int64_t i = 0; i < b.gt_a.numel(); ++i) {
    b.gt_a[i] = rng.uniform() < 0.5;
    b.gt_v[i] = b.gt_a[i];
  }
  b.prompts = {BoxF{2, 2, 12, 12}};
  TrainConfig tc;
  tc.pt = false;
  PointLossParams pp;
  Tape<double> tp(&m.params);
  auto built = finetune_loss(m, tp, b, tc, pp, 1);

  // independent: sum over both branches of mean BCE of sigmoid(logits)
  Tape<double> tp2(&m.params);
  auto Ep = m.encode_prompt(tp2, b.prompts);
  double expect = 0;
  for (auto br : {Branch::inmodal, Branch::amodal}) {
    auto E = m.encode(tp2, b.images, br);
    auto logits = m.decode(tp2, E, Ep, br);
    const auto& lv = tp2.val(logits);
    const Tensor<double>& gt = br == Branch::inmodal ? b.gt_v : b.gt_a;
    double acc = 0;
    for (int64_t i = 0; i < lv.numel(); ++i) {
      double p = clamp_prob(1.0 / (1.0 + std::exp(-lv[i])));
      acc += -(gt[i] * std::log(p) + (1 - gt[i]) * std::log(1 - p));
    }
    expect += acc / lv.numel();
  }
  CHECK(built.loss_value == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("gradcheck passes on the dim-16 toy config") {
  GradcheckReport rep = gradcheck(5);
  CHECK(rep.frozen_base_zero);
  CHECK(rep.adapter_a_zero_at_init);
  REQUIRE(rep.groups.size() == 5);
  for (const auto& g : rep.groups) {
    INFO("group " << g.name << " max_rel_err " << g.max_rel_err);
    CHECK(g.max_rel_err <= 1e-3);
    CHECK(g.probes > 0);
  }
  CHECK(rep.pass);
}

TEST_CASE("pretrain loop runs, logs, and is deterministic") {
  GeneratorConfig gc = GeneratorConfig::pretrain();
  LoadedDataset ds;
  for (uint64_t s = 0; s < 16; ++s) ds.scenes.push_back(gen_scene(hash_seed(61, s), gc));
  auto data = prepare_dataset<float>(ds, 64, false);
  RunConfig cfg;
  cfg.train.pretrain_epochs = 5;
  cfg.train.seed = 9;

  auto run_once = [&]() {
    PlugModel<float> m = PlugModel<float>::pretrain_model(cfg.encoder, cfg.train.seed);
    TrainLog log = run_pretrain(m, data, cfg);
    return std::pair{m.params.get("enc.block0.wq").value, log};
  };
  auto [w1, log1] = run_once();
  auto [w2, log2] = run_once();
  CHECK(w1.data == w2.data);
  CHECK(log1.epoch_loss == log2.epoch_loss);
  CHECK(log1.epoch_loss.size() == 5);
  CHECK((int)log1.lr_trace.size() == log1.total_steps);
  CHECK(log1.epoch_loss.back() < log1.epoch_loss.front());
  for (double l : log1.epoch_loss) CHECK(std::isfinite(l));
}

TEST_CASE("finetune freezes the encoder base byte-for-byte") {
  GeneratorConfig gc;
  LoadedDataset ds;
  for (uint64_t s = 0; s < 8; ++s) ds.scenes.push_back(gen_scene(hash_seed(62, s), gc));
  auto data = prepare_dataset<float>(ds, 64, false);
  RunConfig cfg;
  cfg.train.epochs = 1;
  cfg.train.seed = 10;
  PlugModel<float> m = PlugModel<float>::finetune_model(
      cfg.encoder, true, true, cfg.train.refine_blocks, cfg.train.refine_channels, 10);

  std::vector<std::vector<float>> before;
  for (const auto& p : m.params.all())
    if (p.name.rfind("enc.", 0) == 0) before.push_back(p.value.data);
  int64_t trainable_before = 0;

  TrainLog log = run_finetune(m, data, cfg);
  trainable_before = log.trainable_params;

  size_t k = 0;
  for (const auto& p : m.params.all())
    if (p.name.rfind("enc.", 0) == 0) {
      CHECK(std::memcmp(p.value.data.data(), before[k].data(),
                        p.value.data.size() * sizeof(float)) == 0);
      ++k;
    }

  // trainable set is exactly adapters + prompt corners + decoders + refine
  int64_t expect = 0;
  for (const auto& p : m.params.all())
    if (p.name.rfind("lora.", 0) == 0 || p.name == "prompt.corner" ||
        p.name.rfind("dec.", 0) == 0 || p.name.rfind("refine.", 0) == 0)
      expect += p.value.numel();
  CHECK(trainable_before == expect);
  CHECK(m.adapter_param_count() ==
        (int64_t)cfg.encoder.blocks * 2 * 2 * 2 * cfg.encoder.rank * cfg.encoder.embed_dim);
}

TEST_CASE("a poisoned parameter aborts training with a divergence error") {
  GeneratorConfig gc;
  LoadedDataset ds;
  ds.scenes.push_back(gen_scene(63, gc));
  auto data = prepare_dataset<float>(ds, 64, false);
  RunConfig cfg;
  cfg.train.epochs = 1;
  PlugModel<float> m = PlugModel<float>::finetune_model(cfg.encoder, true, true, 1, 16, 11);
  m.params.get("dec.a.mask_token").value[0] = std::nanf("");
  CHECK_THROWS_AS(run_finetune(m, data, cfg), DivergenceError);
}

TEST_CASE("without the refine module the final probabilities are the coarse amodal ones") {
  GeneratorConfig gc;
  LoadedDataset ds;
  ds.scenes.push_back(gen_scene(64, gc));
  auto data = prepare_dataset<float>(ds, 64, false);
  RunConfig cfg;
  PlugModel<float> m = PlugModel<float>::finetune_model(cfg.encoder, true, false, 1, 16, 12);
  std::vector<int> order = {0};
  Batch<float> b = make_batch(data, order, 0, 1);
  auto preds = predict_batch(m, b, cfg.point);
  for (int64_t i = 0; i < preds[0].prob_final.numel(); ++i)
    CHECK(preds[0].prob_final[i] == preds[0].prob_a[i]);
  MetricsReport rep = evaluate_model(m, data, cfg.train, cfg.point);
  CHECK(rep.n_objects == 1);
  CHECK(rep.per_object[0].iou_full >= 0.0);
  CHECK(rep.per_object[0].iou_full <= 1.0);
}
