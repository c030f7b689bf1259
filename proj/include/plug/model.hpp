#pragma once

// Encoder with parallel low-rank adapter branches, box prompt encoder, dual
// mask decoders, and the residual refine head. All forwards run on a Tape so
// one code path serves training, gradcheck, and inference.

#include "plug/config.hpp"
#include "plug/syndata.hpp"
#include "plug/tape.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace plug {

enum class Branch { base, inmodal, amodal };

// [B,S,S,3] -> [B,tokens,patch_dim], patch pixels row-major, channel fastest
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, int patch) {
  int B = images.shape[0], S = images.shape[1], C = images.shape[3];
  int g = S / patch, pd = patch * patch * C;
  Tensor<T> out({B, g * g, pd});
  for (int b = 0; b < B; ++b)
    for (int ty = 0; ty < g; ++ty)
      for (int tx = 0; tx < g; ++tx) {
        T* dst = out.ptr() + (((int64_t)b * g * g) + ty * g + tx) * pd;
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px) {
            const T* src = images.ptr() +
                (((int64_t)b * S + ty * patch + py) * S + tx * patch + px) * C;
            for (int c = 0; c < C; ++c) *dst++ = src[c];
          }
      }
  return out;
}

template <typename T>
class PlugModel {
 public:
  using Var = typename Tape<T>::Var;

  EncoderConfig cfg;
  bool use_lora = false;
  bool dual_branch = false;
  bool use_refine = false;
  int refine_blocks = 1;
  int refine_channels = 16;
  ParamStore<T> params;

  static constexpr T kProbClamp = T(1e-6);

  // Pretrain shape: no adapters, single decoder, no refine.
  static PlugModel pretrain_model(const EncoderConfig& cfg, uint64_t seed) {
    return PlugModel(cfg, false, false, false, 1, 16, seed);
  }

  static PlugModel finetune_model(const EncoderConfig& cfg, bool dual,
                                  bool refine, int refine_blocks,
                                  int refine_channels, uint64_t seed) {
    return PlugModel(cfg, true, dual, refine, refine_blocks, refine_channels, seed);
  }

  PlugModel(const EncoderConfig& c, bool lora, bool dual, bool refine,
            int rblocks, int rchan, uint64_t seed)
      : cfg(c), use_lora(lora), dual_branch(dual), use_refine(refine),
        refine_blocks(rblocks), refine_channels(rchan) {
    cfg.validate();
    register_params(seed);
  }

  std::vector<std::string> decoder_prefixes() const {
    if (dual_branch) return {"dec.v.", "dec.a."};
    return {"dec.a."};
  }

  std::vector<std::string> lora_branches() const {
    if (!use_lora) return {};
    if (dual_branch) return {"lora.v.", "lora.a."};
    return {"lora.a."};
  }

  // ---- forwards ----

  // images [B,S,S,3] in [0,1] -> tokens [B,T,D]
  Var encode(Tape<T>& tp, const Tensor<T>& images, Branch br) const {
    Var x = tp.input(patchify(images, cfg.patch_size));
    x = tp.linear(x, tp.param("enc.patch.w"), tp.param("enc.patch.b"));
    x = tp.add_rows_broadcast(x, tp.param("enc.pos"));
    std::string lb = lora_prefix(br);
    for (int i = 0; i < cfg.blocks; ++i) {
      std::string pre = "enc.block" + std::to_string(i);
      std::string lp = lb.empty() ? "" : lb + "block" + std::to_string(i);
      Var h = ln(tp, x, pre + ".ln1");
      x = tp.add(x, attn(tp, h, h, pre, lp));
      Var h2 = ln(tp, x, pre + ".ln2");
      x = tp.add(x, mlp(tp, h2, pre + ".mlp"));
    }
    return ln(tp, x, "enc.ln_f");
  }

  // per-sample boxes in crop pixel coordinates -> [B,2,D] prompt tokens
  Var encode_prompt(Tape<T>& tp, const std::vector<BoxF>& boxes) const {
    int B = (int)boxes.size(), D = cfg.embed_dim, S = cfg.image_size;
    const Tensor<T>& F = params.get("prompt.fourier").value;  // [D/2, 2]
    Tensor<T> feats({B, 2, D});
    for (int b = 0; b < B; ++b) {
      const BoxF& bx = boxes[b];
      if (!(bx.x0 < bx.x1) || !(bx.y0 < bx.y1) || bx.x0 < 0 || bx.y0 < 0 ||
          bx.x1 > S || bx.y1 > S)
        throw std::runtime_error("degenerate or out-of-range prompt box");
      double cs[2][2] = {{bx.x0 / S, bx.y0 / S}, {bx.x1 / S, bx.y1 / S}};
      for (int c = 0; c < 2; ++c) {
        T* dst = feats.ptr() + (((int64_t)b * 2) + c) * D;
        for (int f = 0; f < D / 2; ++f) {
          double t = 2.0 * M_PI *
              ((double)F[f * 2] * cs[c][0] + (double)F[f * 2 + 1] * cs[c][1]);
          dst[f] = (T)std::sin(t);
          dst[D / 2 + f] = (T)std::cos(t);
        }
      }
    }
    Var e = tp.input(std::move(feats));
    return tp.add_rows_broadcast(e, tp.param("prompt.corner"));
  }

  // E [B,T,D], Ep [B,2,D] -> coarse logits [B,S,S,1]
  Var decode(Tape<T>& tp, Var E, Var Ep, Branch br) const {
    std::string pre = decoder_prefix(br);
    int B = tp.val(E).shape[0], D = cfg.embed_dim, g = cfg.grid();
    Var tok = tp.concat_tokens(tp.broadcast_rows(tp.param(pre + "mask_token"), B), Ep);
    Var img = tp.add_rows_broadcast(E, tp.param(pre + "img_pos"));
    for (int j = 0; j < 2; ++j) {
      std::string bp = pre + "block" + std::to_string(j);
      Var h = ln(tp, tok, bp + ".ln1");
      tok = tp.add(tok, attn(tp, h, h, bp + ".self", ""));
      tok = tp.add(tok, attn(tp, ln(tp, tok, bp + ".ln2"), img, bp + ".t2i", ""));
      tok = tp.add(tok, mlp(tp, ln(tp, tok, bp + ".ln3"), bp + ".mlp"));
      img = tp.add(img, attn(tp, ln(tp, img, bp + ".ln4"), tok, bp + ".i2t", ""));
    }
    Var x = tp.reshape(img, {B, g, g, D});
    x = tp.gelu(tp.conv_transpose2x2(x, tp.param(pre + "up1.w"), tp.param(pre + "up1.b")));
    x = tp.gelu(tp.conv_transpose2x2(x, tp.param(pre + "up2.w"), tp.param(pre + "up2.b")));
    Var mt = tp.reshape(tp.slice_tokens(tok, 0, 1), {B, D});
    mt = tp.linear(mt, tp.param(pre + "tokmlp.fc1.w"), tp.param(pre + "tokmlp.fc1.b"));
    mt = tp.gelu(mt);
    mt = tp.linear(mt, tp.param(pre + "tokmlp.fc2.w"), tp.param(pre + "tokmlp.fc2.b"));
    return tp.bilinear_up2(tp.channel_dot(x, mt));
  }

  // img [B,S,S,3], probabilities pv/pa and uncertainty maps uv/ua [B,S,S,1],
  // coarse amodal logits ma; returns refined logits with the global skip.
  Var refine(Tape<T>& tp, Var img, Var ma, Var pv, Var pa, Var uv, Var ua) const {
    Var x = tp.concat_lastdim({img, pv, pa, uv, ua});
    Var h = tp.relu(tp.conv3x3(x, tp.param("refine.conv_in.w"),
                               tp.param("refine.conv_in.b")));
    for (int k = 0; k < refine_blocks; ++k) {
      std::string bp = "refine.block" + std::to_string(k);
      Var r = tp.relu(tp.conv3x3(h, tp.param(bp + ".conv1.w"), tp.param(bp + ".conv1.b")));
      r = tp.conv3x3(r, tp.param(bp + ".conv2.w"), tp.param(bp + ".conv2.b"));
      h = tp.relu(tp.add(h, r));
    }
    // 1x1 exit conv; zero-initialized so this is a passthrough at init
    Var out = tp.linear(h, tp.param("refine.conv_out.w"), tp.param("refine.conv_out.b"));
    return tp.add(ma, out);
  }

  // During finetuning only adapters, prompt, decoders and refine train.
  void freeze_for_finetune() {
    params.set_trainable_by_prefix("enc.", false);
    params.set_trainable_by_prefix("lora.", true);
    params.set_trainable_by_prefix("prompt.corner", true);
    params.set_trainable_by_prefix("dec.", true);
    params.set_trainable_by_prefix("refine.", true);
  }

  int64_t adapter_param_count() const {
    int64_t n = 0;
    for (const auto& p : params.all())
      if (p.name.rfind("lora.", 0) == 0) n += p.value.numel();
    return n;
  }

 private:
  std::string lora_prefix(Branch br) const {
    if (!use_lora || br == Branch::base) return "";
    if (br == Branch::inmodal) {
      if (!dual_branch) throw std::runtime_error("no inmodal adapters in single-branch model");
      return "lora.v.";
    }
    return "lora.a.";
  }

  std::string decoder_prefix(Branch br) const {
    if (br == Branch::inmodal) {
      if (!dual_branch) throw std::runtime_error("no inmodal decoder in single-branch model");
      return "dec.v.";
    }
    return "dec.a.";
  }

  Var ln(Tape<T>& tp, Var x, const std::string& pre) const {
    return tp.layernorm(x, tp.param(pre + ".g"), tp.param(pre + ".b"));
  }

  Var mlp(Tape<T>& tp, Var x, const std::string& pre) const {
    Var f = tp.linear(x, tp.param(pre + ".fc1.w"), tp.param(pre + ".fc1.b"));
    f = tp.gelu(f);
    return tp.linear(f, tp.param(pre + ".fc2.w"), tp.param(pre + ".fc2.b"));
  }

  // Multi-head attention; lora_pre selects adapters on the Q and V
  // projections (empty = none). q_in/kv_in are already normalized.
  Var attn(Tape<T>& tp, Var q_in, Var kv_in, const std::string& pre,
           const std::string& lora_pre) const {
    Var q = tp.linear(q_in, tp.param(pre + ".wq"), tp.param(pre + ".bq"));
    Var k = tp.linear(kv_in, tp.param(pre + ".wk"), tp.param(pre + ".bk"));
    Var v = tp.linear(kv_in, tp.param(pre + ".wv"), tp.param(pre + ".bv"));
    if (!lora_pre.empty()) {
      q = tp.add(q, lora_delta(tp, q_in, lora_pre + ".q"));
      v = tp.add(v, lora_delta(tp, kv_in, lora_pre + ".v"));
    }
    int h = cfg.heads;
    q = tp.split_heads(q, h);
    k = tp.split_heads(k, h);
    v = tp.split_heads(v, h);
    Var scores = tp.bmm(q, k, false, true, (T)(1.0 / std::sqrt((double)cfg.head_dim())));
    Var o = tp.merge_heads(tp.bmm(tp.softmax_lastdim(scores), v), h);
    return tp.linear(o, tp.param(pre + ".wo"), tp.param(pre + ".bo"));
  }

  // delta = x A^T B^T, i.e. (B A) x in column convention
  Var lora_delta(Tape<T>& tp, Var x, const std::string& pre) const {
    return tp.linear(tp.linear(x, tp.param(pre + ".A")), tp.param(pre + ".B"));
  }

  void register_params(uint64_t seed) {
    const int D = cfg.embed_dim, pd = cfg.patch_dim(), Tk = cfg.tokens();
    const int hid = cfg.mlp_ratio * D, r = cfg.rank;
    Rng rng(hash_seed(seed, 0xe11c));

    auto add = [&](const std::string& n, Tensor<T> t, bool train = true) {
      params.add(n, std::move(t), train);
    };
    auto randn = [&](std::vector<int> s, double sd, Rng& g) {
      return randn_tensor<T>(std::move(s), g, sd);
    };
    auto add_attn = [&](const std::string& pre, Rng& g) {
      double sd = 1.0 / std::sqrt((double)D);
      for (const char* w : {".wq", ".wk", ".wv", ".wo"}) add(pre + w, randn({D, D}, sd, g));
      for (const char* b : {".bq", ".bk", ".bv", ".bo"}) add(pre + b, zeros_tensor<T>({D}));
    };
    auto add_ln = [&](const std::string& pre) {
      add(pre + ".g", ones_tensor<T>({D}));
      add(pre + ".b", zeros_tensor<T>({D}));
    };
    auto add_mlp = [&](const std::string& pre, Rng& g) {
      add(pre + ".fc1.w", randn({hid, D}, 1.0 / std::sqrt((double)D), g));
      add(pre + ".fc1.b", zeros_tensor<T>({hid}));
      add(pre + ".fc2.w", randn({D, hid}, 1.0 / std::sqrt((double)hid), g));
      add(pre + ".fc2.b", zeros_tensor<T>({D}));
    };

    add("enc.patch.w", randn({D, pd}, 1.0 / std::sqrt((double)pd), rng));
    add("enc.patch.b", zeros_tensor<T>({D}));
    add("enc.pos", randn({Tk, D}, 0.02, rng));
    for (int i = 0; i < cfg.blocks; ++i) {
      std::string pre = "enc.block" + std::to_string(i);
      add_ln(pre + ".ln1");
      add_attn(pre, rng);
      add_ln(pre + ".ln2");
      add_mlp(pre + ".mlp", rng);
    }
    add_ln("enc.ln_f");

    for (const std::string& lb : lora_branches()) {
      Rng lrng(hash_seed(seed, 0x10aa, lb == "lora.v." ? 1 : 2));
      for (int i = 0; i < cfg.blocks; ++i)
        for (const char* proj : {"q", "v"}) {
          std::string pre = lb + "block" + std::to_string(i) + "." + proj;
          add(pre + ".A", randn({r, D}, 1.0 / std::sqrt((double)r), lrng));
          add(pre + ".B", zeros_tensor<T>({D, r}));
        }
    }

    Rng prng(hash_seed(seed, 0xf00d));
    add("prompt.fourier", randn({D / 2, 2}, 1.0, prng), false);
    add("prompt.corner", randn({2, D}, 0.02, prng));

    // both decoders draw from identically seeded streams: equal bytes at init
    for (const std::string& pre : decoder_prefixes()) {
      Rng drng(hash_seed(seed, 0xdec0));
      add(pre + "mask_token", randn({1, D}, 0.02, drng));
      add(pre + "img_pos", randn({Tk, D}, 0.02, drng));
      for (int j = 0; j < 2; ++j) {
        std::string bp = pre + "block" + std::to_string(j);
        add_ln(bp + ".ln1");
        add_attn(bp + ".self", drng);
        add_ln(bp + ".ln2");
        add_attn(bp + ".t2i", drng);
        add_ln(bp + ".ln3");
        add_mlp(bp + ".mlp", drng);
        add_ln(bp + ".ln4");
        add_attn(bp + ".i2t", drng);
      }
      int c1 = D / 2, c2 = D / 4;
      add(pre + "up1.w", randn({D, 4 * c1}, 1.0 / std::sqrt((double)D), drng));
      add(pre + "up1.b", zeros_tensor<T>({c1}));
      add(pre + "up2.w", randn({c1, 4 * c2}, 1.0 / std::sqrt((double)c1), drng));
      add(pre + "up2.b", zeros_tensor<T>({c2}));
      add(pre + "tokmlp.fc1.w", randn({D, D}, 1.0 / std::sqrt((double)D), drng));
      add(pre + "tokmlp.fc1.b", zeros_tensor<T>({D}));
      add(pre + "tokmlp.fc2.w", randn({c2, D}, 1.0 / std::sqrt((double)D), drng));
      add(pre + "tokmlp.fc2.b", zeros_tensor<T>({c2}));
    }

    if (use_refine) {
      Rng rrng(hash_seed(seed, 0x2ef1));
      int C = refine_channels;
      add("refine.conv_in.w", randn({9 * 7, C}, std::sqrt(2.0 / (9 * 7)), rrng));
      add("refine.conv_in.b", zeros_tensor<T>({C}));
      for (int k = 0; k < refine_blocks; ++k) {
        std::string bp = "refine.block" + std::to_string(k);
        for (const char* cv : {".conv1", ".conv2"}) {
          add(bp + cv + ".w", randn({9 * C, C}, std::sqrt(2.0 / (9 * C)), rrng));
          add(bp + cv + ".b", zeros_tensor<T>({C}));
        }
      }
      add("refine.conv_out.w", zeros_tensor<T>({1, C}));
      add("refine.conv_out.b", zeros_tensor<T>({1}));
    }
  }
};

}  // namespace plug
