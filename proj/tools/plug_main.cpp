#include "CLI11.hpp"

#include "plug/checkpoint.hpp"
#include "plug/trainer.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

using namespace plug;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitArgs = 2;
constexpr int kExitGenFailure = 3;
constexpr int kExitDivergence = 4;
constexpr int kExitMismatch = 5;

struct ExitError : std::runtime_error {
  int code;
  ExitError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void apply_jobs(int jobs) {
  if (const char* env = std::getenv("PLUG_JOBS")) jobs = std::atoi(env);
#ifdef _OPENMP
  if (jobs > 0) omp_set_num_threads(jobs);
#else
  (void)jobs;
#endif
}

RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return RunConfig{};
  try {
    return run_config_from_file(path);
  } catch (const std::exception& e) {
    throw ExitError(kExitArgs, std::string("bad config: ") + e.what());
  }
}

void write_text(const std::string& path, const std::string& text) {
  if (fs::path(path).has_parent_path())
    fs::create_directories(fs::path(path).parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text << "\n";
}

LoadedDataset read_dataset_checked(const std::string& dir, int image_size) {
  LoadedDataset ds;
  try {
    ds = read_dataset(dir);
  } catch (const std::exception& e) {
    throw ExitError(kExitArgs, std::string("bad dataset: ") + e.what());
  }
  if (ds.manifest.canvas_h != image_size || ds.manifest.canvas_w != image_size)
    throw ExitError(kExitMismatch, "dataset canvas does not match encoder image size");
  return ds;
}

LoadedCheckpoint load_checkpoint_checked(const std::string& path) {
  try {
    return load_checkpoint(path);
  } catch (const std::exception& e) {
    throw ExitError(kExitMismatch, std::string("bad checkpoint: ") + e.what());
  }
}

void require_same_encoder(const EncoderConfig& a, const EncoderConfig& b) {
  if (a.image_size != b.image_size || a.patch_size != b.patch_size ||
      a.embed_dim != b.embed_dim || a.blocks != b.blocks || a.heads != b.heads ||
      a.mlp_ratio != b.mlp_ratio)
    throw ExitError(kExitMismatch, "checkpoint encoder config does not match");
}

// reconstruct the exact model a checkpoint was saved from
PlugModel<float> model_from_checkpoint(const LoadedCheckpoint& ck) {
  const RunConfig& cfg = ck.meta.config;
  PlugModel<float> m(cfg.encoder, ck.meta.lora, ck.meta.dual_branch, ck.meta.refine,
                     cfg.train.refine_blocks, cfg.train.refine_channels,
                     cfg.train.seed);
  for (auto& p : m.params.all()) {
    if (!ck.params.has(p.name))
      throw ExitError(kExitMismatch, "checkpoint missing tensor " + p.name);
    const auto& src = ck.params.get(p.name).value;
    if (src.shape != p.value.shape)
      throw ExitError(kExitMismatch, "checkpoint shape mismatch for " + p.name);
    p.value = src;
  }
  return m;
}

// seed a finetune model from a checkpoint: encoder base and prompt are copied
// verbatim; a pretrain decoder seeds both branch decoders
void seed_finetune_model(PlugModel<float>& m, const LoadedCheckpoint& ck) {
  for (auto& p : m.params.all()) {
    std::string src_name = p.name;
    if (ck.meta.stage == "pretrain") {
      if (p.name.rfind("lora.", 0) == 0 || p.name.rfind("refine.", 0) == 0)
        continue;  // fresh init, not present in a pretrain checkpoint
      if (p.name.rfind("dec.v.", 0) == 0) src_name = "dec.a." + p.name.substr(6);
    }
    if (!ck.params.has(src_name))
      throw ExitError(kExitMismatch, "checkpoint missing tensor " + src_name);
    const auto& src = ck.params.get(src_name).value;
    if (src.shape != p.value.shape)
      throw ExitError(kExitMismatch, "checkpoint shape mismatch for " + src_name);
    p.value = src;
  }
}

bool eval_uses_amodal_prompt(const CheckpointMeta& meta) {
  return meta.stage == "pretrain" || !meta.config.train.ft;
}

// ---- commands ----

int cmd_gen(const std::string& out, int num, uint64_t seed, const std::string& split) {
  if (num <= 0) throw ExitError(kExitArgs, "--num must be positive");
  GeneratorConfig gc =
      split == "pretrain" ? GeneratorConfig::pretrain() : GeneratorConfig{};
  std::vector<Scene> scenes;
  scenes.reserve((size_t)num);
  try {
    for (int i = 0; i < num; ++i)
      scenes.push_back(gen_scene(hash_seed(seed, (uint64_t)i), gc));
  } catch (const std::exception& e) {
    throw ExitError(kExitGenFailure, std::string("generation failed: ") + e.what());
  }
  write_dataset(scenes, out, split, seed, gc);
  std::cout << out << "/manifest.json\n";
  return 0;
}

int cmd_pretrain(const std::string& data, const std::string& config_path,
                 const std::string& out, uint64_t seed_override, int epochs_override) {
  RunConfig cfg = load_config_or_default(config_path);
  if (seed_override) cfg.train.seed = seed_override;
  if (epochs_override > 0) cfg.train.pretrain_epochs = epochs_override;
  LoadedDataset ds = read_dataset_checked(data, cfg.encoder.image_size);
  auto samples = prepare_dataset<float>(ds, cfg.encoder.image_size, false);

  PlugModel<float> m = PlugModel<float>::pretrain_model(cfg.encoder, cfg.train.seed);
  std::cout << "trainable parameters: " << m.params.count_trainable() << "\n";
  TrainLog log;
  try {
    log = run_pretrain(m, samples, cfg);
  } catch (const DivergenceError& e) {
    throw ExitError(kExitDivergence, e.what());
  }
  CheckpointMeta meta;
  meta.config = cfg;
  meta.stage = "pretrain";
  save_checkpoint(out, m.params, meta);
  write_text(out + ".log.json", log.to_json().dump(1));
  std::cout << "final epoch loss: " << log.epoch_loss.back() << "\n" << out << "\n";
  return 0;
}

int cmd_train(const std::string& data, const std::string& init_path,
              const std::string& config_path, const std::string& out,
              bool no_ft, bool no_pt, bool no_rm, bool no_pl,
              uint64_t seed_override, int epochs_override, int rank_override) {
  RunConfig cfg = load_config_or_default(config_path);
  if (seed_override) cfg.train.seed = seed_override;
  if (epochs_override > 0) cfg.train.epochs = epochs_override;
  if (rank_override > 0) cfg.encoder.rank = rank_override;
  cfg.train.ft = !no_ft;
  cfg.train.pt = !no_pt;
  cfg.train.rm = !no_rm;
  cfg.train.pl = !no_pl;

  LoadedCheckpoint init = load_checkpoint_checked(init_path);
  require_same_encoder(init.meta.config.encoder, cfg.encoder);

  if (!cfg.train.ft) {
    // frozen baseline: no updates; re-emit the init weights with new metadata
    CheckpointMeta meta;
    meta.config = cfg;
    meta.stage = "finetune";
    meta.lora = init.meta.lora;
    meta.dual_branch = init.meta.dual_branch;
    meta.refine = init.meta.refine;
    save_checkpoint(out, init.params, meta);
    write_text(out + ".log.json", TrainLog{}.to_json().dump(1));
    std::cout << "no fine-tuning requested; checkpoint copied\n" << out << "\n";
    return 0;
  }

  LoadedDataset ds = read_dataset_checked(data, cfg.encoder.image_size);
  auto samples = prepare_dataset<float>(ds, cfg.encoder.image_size, false);

  PlugModel<float> m = PlugModel<float>::finetune_model(
      cfg.encoder, cfg.train.pl, cfg.train.rm, cfg.train.refine_blocks,
      cfg.train.refine_channels, cfg.train.seed);
  seed_finetune_model(m, init);
  m.freeze_for_finetune();
  std::cout << "trainable parameters: " << m.params.count_trainable()
            << " (adapters: " << m.adapter_param_count() << ")\n";

  std::string hash_before = frozen_base_hash(m.params);
  TrainLog log;
  try {
    log = run_finetune(m, samples, cfg);
  } catch (const DivergenceError& e) {
    throw ExitError(kExitDivergence, e.what());
  }
  if (frozen_base_hash(m.params) != hash_before)
    throw ExitError(kExitMismatch, "frozen base changed during finetune");

  CheckpointMeta meta;
  meta.config = cfg;
  meta.stage = "finetune";
  meta.lora = true;
  meta.dual_branch = cfg.train.pl;
  meta.refine = cfg.train.rm;
  save_checkpoint(out, m.params, meta);
  write_text(out + ".log.json", log.to_json().dump(1));
  std::cout << "final epoch loss: " << log.epoch_loss.back() << "\n" << out << "\n";
  return 0;
}

MetricsReport evaluate_checkpoint(const LoadedCheckpoint& ck, const LoadedDataset& ds) {
  PlugModel<float> m = model_from_checkpoint(ck);
  auto samples =
      prepare_dataset<float>(ds, m.cfg.image_size, eval_uses_amodal_prompt(ck.meta));
  return evaluate_model(m, samples, ck.meta.config.train, ck.meta.config.point);
}

int cmd_eval(const std::string& data, const std::string& ckpt_path,
             const std::string& report, bool ablation,
             const std::string& train_data, const std::string& config_path,
             const std::string& work_dir) {
  LoadedCheckpoint ck = load_checkpoint_checked(ckpt_path);
  LoadedDataset ds = read_dataset_checked(data, ck.meta.config.encoder.image_size);

  if (!ablation) {
    MetricsReport rep = evaluate_checkpoint(ck, ds);
    write_text(report, rep.to_json().dump(1));
    std::cout << "miou_full " << rep.miou_full << " miou_occ " << rep.miou_occ << "\n";
    return 0;
  }

  if (ck.meta.stage != "pretrain")
    throw ExitError(kExitMismatch, "--ablation needs a pretrain checkpoint");
  if (train_data.empty())
    throw ExitError(kExitArgs, "--ablation needs --train-data");
  RunConfig cfg = load_config_or_default(config_path);
  std::string work = work_dir.empty() ? fs::path(report).parent_path().string() : work_dir;
  if (work.empty()) work = ".";
  fs::create_directories(work);

  struct Row {
    bool ft, pt, rm, pl;
  };
  const std::vector<Row> rows = {{false, false, false, false},
                                 {true, false, false, false},
                                 {true, true, false, false},
                                 {true, true, true, false},
                                 {true, true, true, true}};
  json table = json::array();
  for (size_t i = 0; i < rows.size(); ++i) {
    const Row& r = rows[i];
    MetricsReport rep;
    int64_t adapters = 0;
    if (!r.ft) {
      rep = evaluate_checkpoint(ck, ds);
    } else {
      std::string row_ckpt = work + "/row" + std::to_string(i + 1) + "_seed" +
                             std::to_string(cfg.train.seed) + "_r" +
                             std::to_string(cfg.encoder.rank) + ".ckpt";
      if (!fs::exists(row_ckpt)) {
        int rc = cmd_train(train_data, ckpt_path, config_path, row_ckpt, !r.ft,
                           !r.pt, !r.rm, !r.pl, 0, 0, 0);
        if (rc != 0) return rc;
      }
      LoadedCheckpoint rck = load_checkpoint_checked(row_ckpt);
      PlugModel<float> m = model_from_checkpoint(rck);
      adapters = m.adapter_param_count();
      rep = evaluate_checkpoint(rck, ds);
    }
    json jr{{"row", i + 1},
            {"ft", r.ft},
            {"pt", r.pt},
            {"rm", r.rm},
            {"pl", r.pl},
            {"adapter_params", adapters},
            {"miou_full", rep.miou_full},
            {"miou_occ", rep.miou_occ},
            {"n_objects", rep.n_objects},
            {"n_skipped_occ", rep.n_skipped_occ}};
    table.push_back(jr);
    std::cout << "row " << (i + 1) << " miou_full " << rep.miou_full << " miou_occ "
              << rep.miou_occ << "\n";
  }
  write_text(report, table.dump(1));
  return 0;
}

Image8 gray_to_rgb(const Image8& g) {
  Image8 out(g.h, g.w, 3);
  for (int i = 0; i < g.h * g.w; ++i)
    out.v[i * 3] = out.v[i * 3 + 1] = out.v[i * 3 + 2] = g.v[i];
  return out;
}

Image8 mask_to_gray(const Mask& m) {
  Image8 out(m.h, m.w, 1);
  for (size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] ? 255 : 0;
  return out;
}

template <typename T>
Image8 prob_to_gray(const Tensor<T>& p) {
  Image8 out(p.shape[0], p.shape[1], 1);
  for (int64_t i = 0; i < p.numel(); ++i)
    out.v[i] = (uint8_t)std::lround(255.0 * std::min(1.0, std::max(0.0, (double)p[i])));
  return out;
}

Image8 hcat(const std::vector<Image8>& tiles) {
  int h = tiles[0].h, w = 0;
  for (const auto& t : tiles) w += t.w;
  Image8 out(h, w, 3);
  int x0 = 0;
  for (const auto& t : tiles) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < t.w; ++x)
        for (int c = 0; c < 3; ++c)
          out.v[((size_t)y * w + x0 + x) * 3 + c] = t.v[((size_t)y * t.w + x) * 3 + c];
    x0 += t.w;
  }
  return out;
}

int cmd_predict(const std::string& image_path, const std::string& bbox_str,
                const std::string& ckpt_path, const std::string& out_dir) {
  int x0, y0, x1, y1;
  if (std::sscanf(bbox_str.c_str(), "%d,%d,%d,%d", &x0, &y0, &x1, &y1) != 4)
    throw ExitError(kExitArgs, "malformed --bbox, expected x0,y0,x1,y1");
  Image8 img;
  try {
    img = read_png(image_path);
  } catch (const std::exception& e) {
    throw ExitError(kExitArgs, std::string("cannot read image: ") + e.what());
  }
  if (x0 < 0 || y0 < 0 || x1 > img.w || y1 > img.h || x0 >= x1 || y0 >= y1)
    throw ExitError(kExitArgs, "bbox outside image or degenerate");

  LoadedCheckpoint ck = load_checkpoint_checked(ckpt_path);
  PlugModel<float> m = model_from_checkpoint(ck);
  int S = m.cfg.image_size;
  if (img.c != 3) throw ExitError(kExitArgs, "image must be RGB");

  BBox box{x0, y0, x1, y1};
  CropResult cr = crop_double(img, box, S);
  Batch<float> b;
  b.images = Tensor<float>({1, S, S, 3});
  std::copy(cr.image.begin(), cr.image.end(), b.images.data.begin());
  b.prompts = {bbox_to_crop(box, cr.transform)};
  auto pred = predict_batch(m, b, ck.meta.config.point)[0];

  const TrainConfig& tc = ck.meta.config.train;
  fs::create_directories(out_dir);
  write_png(out_dir + "/amodal.png",
            mask_to_gray(binarize(pred.prob_final, tc.threshold, tc.threshold_space)));
  write_png(out_dir + "/visible.png",
            mask_to_gray(binarize(pred.prob_v, tc.threshold, tc.threshold_space)));
  write_png(out_dir + "/uncertainty_v.png", uncertainty_to_image(pred.u_v));
  write_png(out_dir + "/uncertainty_a.png", uncertainty_to_image(pred.u_a));

  Image8 crop_img(S, S, 3);
  for (size_t i = 0; i < cr.image.size(); ++i)
    crop_img.v[i] = (uint8_t)std::lround(255.0f * cr.image[i]);
  Image8 panel = hcat({crop_img, gray_to_rgb(prob_to_gray(pred.prob_v)),
                       gray_to_rgb(prob_to_gray(pred.prob_a)),
                       gray_to_rgb(uncertainty_to_image(pred.u_a)),
                       gray_to_rgb(prob_to_gray(pred.prob_final))});
  write_png(out_dir + "/panel.png", panel);
  std::cout << out_dir << "/panel.png\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed, const std::string& report) {
  GradcheckReport rep = gradcheck(seed);
  std::string text = rep.to_json().dump(1);
  std::cout << text << "\n";
  if (!report.empty()) write_text(report, text);
  return rep.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parallel low-rank adapters for amodal segmentation"};
  app.require_subcommand(1);
  int jobs = 0;
  app.add_option("--jobs", jobs, "worker threads (PLUG_JOBS overrides)");

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  std::string gen_out, gen_split = "train";
  int gen_num = 0;
  uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--num", gen_num)->required();
  gen->add_option("--seed", gen_seed);
  gen->add_option("--split", gen_split)
      ->check(CLI::IsMember({"pretrain", "train", "val", "test"}));

  auto* pre = app.add_subcommand("pretrain", "pretrain the base model");
  std::string pre_data, pre_config, pre_out;
  uint64_t pre_seed = 0;
  int pre_epochs = 0;
  pre->add_option("--data", pre_data)->required();
  pre->add_option("--config", pre_config);
  pre->add_option("--out", pre_out)->required();
  pre->add_option("--seed", pre_seed);
  pre->add_option("--epochs", pre_epochs);

  auto* tr = app.add_subcommand("train", "finetune from a checkpoint");
  std::string tr_data, tr_init, tr_config, tr_out;
  bool no_ft = false, no_pt = false, no_rm = false, no_pl = false;
  uint64_t tr_seed = 0;
  int tr_epochs = 0, tr_rank = 0;
  tr->add_option("--data", tr_data)->required();
  tr->add_option("--init", tr_init)->required();
  tr->add_option("--config", tr_config);
  tr->add_option("--out", tr_out)->required();
  tr->add_flag("--no-ft", no_ft);
  tr->add_flag("--no-pt", no_pt);
  tr->add_flag("--no-rm", no_rm);
  tr->add_flag("--no-pl", no_pl);
  tr->add_option("--seed", tr_seed);
  tr->add_option("--epochs", tr_epochs);
  tr->add_option("--rank", tr_rank);

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_data, ev_ckpt, ev_report, ev_train_data, ev_config, ev_work;
  bool ev_ablation = false;
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--ckpt", ev_ckpt)->required();
  ev->add_option("--report", ev_report)->required();
  ev->add_flag("--ablation", ev_ablation);
  ev->add_option("--train-data", ev_train_data);
  ev->add_option("--config", ev_config);
  ev->add_option("--work-dir", ev_work);

  auto* pd = app.add_subcommand("predict", "predict masks for one image");
  std::string pd_image, pd_bbox, pd_ckpt, pd_out;
  pd->add_option("--image", pd_image)->required();
  pd->add_option("--bbox", pd_bbox)->required();
  pd->add_option("--ckpt", pd_ckpt)->required();
  pd->add_option("--out", pd_out)->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient check");
  uint64_t gc_seed = 1;
  std::string gc_report;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--report", gc_report);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitArgs;
  }
  apply_jobs(jobs);

  try {
    if (*gen) return cmd_gen(gen_out, gen_num, gen_seed, gen_split);
    if (*pre) return cmd_pretrain(pre_data, pre_config, pre_out, pre_seed, pre_epochs);
    if (*tr)
      return cmd_train(tr_data, tr_init, tr_config, tr_out, no_ft, no_pt, no_rm,
                       no_pl, tr_seed, tr_epochs, tr_rank);
    if (*ev)
      return cmd_eval(ev_data, ev_ckpt, ev_report, ev_ablation, ev_train_data,
                      ev_config, ev_work);
    if (*pd) return cmd_predict(pd_image, pd_bbox, pd_ckpt, pd_out);
    if (*gc) return cmd_gradcheck(gc_seed, gc_report);
  } catch (const ExitError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
