#include "plug/config.hpp"

#include "json.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

using json = nlohmann::json;

namespace plug {

void EncoderConfig::validate() const {
  if (embed_dim % heads != 0)
    throw std::runtime_error("encoder: embed_dim must be divisible by heads");
  if (image_size % patch_size != 0)
    throw std::runtime_error("encoder: image_size must be divisible by patch_size");
  if (rank < 1) throw std::runtime_error("encoder: rank must be >= 1");
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::runtime_error("unknown config key: " + where + "." + it.key());
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

RunConfig run_config_from_json_text(const std::string& text) {
  json j = json::parse(text);
  check_keys(j, {"encoder", "train", "point", "generator"}, "");
  RunConfig cfg;
  if (j.contains("encoder")) {
    const json& e = j["encoder"];
    check_keys(e, {"image_size", "patch_size", "embed_dim", "blocks", "heads",
                   "mlp_ratio", "rank"}, "encoder");
    get_to(e, "image_size", cfg.encoder.image_size);
    get_to(e, "patch_size", cfg.encoder.patch_size);
    get_to(e, "embed_dim", cfg.encoder.embed_dim);
    get_to(e, "blocks", cfg.encoder.blocks);
    get_to(e, "heads", cfg.encoder.heads);
    get_to(e, "mlp_ratio", cfg.encoder.mlp_ratio);
    get_to(e, "rank", cfg.encoder.rank);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t,
               {"lr_peak", "warmup_iters", "epochs", "pretrain_epochs",
                "pretrain_lr_peak", "batch",
                "adam_beta1", "adam_beta2", "weight_decay", "threshold",
                "threshold_space", "seed", "ft", "pt", "rm", "pl",
                "refine_blocks", "refine_channels"},
               "train");
    get_to(t, "lr_peak", cfg.train.lr_peak);
    get_to(t, "warmup_iters", cfg.train.warmup_iters);
    get_to(t, "epochs", cfg.train.epochs);
    get_to(t, "pretrain_epochs", cfg.train.pretrain_epochs);
    get_to(t, "pretrain_lr_peak", cfg.train.pretrain_lr_peak);
    get_to(t, "batch", cfg.train.batch);
    get_to(t, "adam_beta1", cfg.train.adam_beta1);
    get_to(t, "adam_beta2", cfg.train.adam_beta2);
    get_to(t, "weight_decay", cfg.train.weight_decay);
    get_to(t, "threshold", cfg.train.threshold);
    get_to(t, "threshold_space", cfg.train.threshold_space);
    get_to(t, "seed", cfg.train.seed);
    get_to(t, "ft", cfg.train.ft);
    get_to(t, "pt", cfg.train.pt);
    get_to(t, "rm", cfg.train.rm);
    get_to(t, "pl", cfg.train.pl);
    get_to(t, "refine_blocks", cfg.train.refine_blocks);
    get_to(t, "refine_channels", cfg.train.refine_channels);
  }
  if (j.contains("point")) {
    const json& p = j["point"];
    check_keys(p, {"eps", "n", "c", "K", "alpha", "beta", "uncertainty_grad"},
               "point");
    get_to(p, "eps", cfg.point.eps);
    get_to(p, "n", cfg.point.n);
    get_to(p, "c", cfg.point.c);
    get_to(p, "K", cfg.point.K);
    get_to(p, "alpha", cfg.point.alpha);
    get_to(p, "beta", cfg.point.beta);
    get_to(p, "uncertainty_grad", cfg.point.uncertainty_grad);
  }
  if (j.contains("generator")) {
    const json& g = j["generator"];
    check_keys(g, {"canvas", "min_objects", "max_objects", "occl_lo", "occl_hi",
                   "attempts", "noise_amp"}, "generator");
    get_to(g, "canvas", cfg.generator.canvas);
    get_to(g, "min_objects", cfg.generator.min_objects);
    get_to(g, "max_objects", cfg.generator.max_objects);
    get_to(g, "occl_lo", cfg.generator.occl_lo);
    get_to(g, "occl_hi", cfg.generator.occl_hi);
    get_to(g, "attempts", cfg.generator.attempts);
    get_to(g, "noise_amp", cfg.generator.noise_amp);
  }
  cfg.encoder.validate();
  if (cfg.train.lr_peak <= 0 || cfg.train.pretrain_lr_peak <= 0)
    throw std::runtime_error("train: learning rate peaks must be positive");
  if (cfg.point.n <= 1) throw std::runtime_error("point.n must be > 1");
  if (cfg.point.c <= 0.0 || cfg.point.c >= 1.0)
    throw std::runtime_error("point.c must be in (0,1)");
  if (cfg.point.eps < 1) throw std::runtime_error("point.eps must be >= 1");
  if (cfg.train.threshold_space != "prob" && cfg.train.threshold_space != "logit")
    throw std::runtime_error("train.threshold_space must be prob or logit");
  return cfg;
}

std::string run_config_to_json_text(const RunConfig& cfg) {
  json j{
      {"encoder",
       {{"image_size", cfg.encoder.image_size},
        {"patch_size", cfg.encoder.patch_size},
        {"embed_dim", cfg.encoder.embed_dim},
        {"blocks", cfg.encoder.blocks},
        {"heads", cfg.encoder.heads},
        {"mlp_ratio", cfg.encoder.mlp_ratio},
        {"rank", cfg.encoder.rank}}},
      {"train",
       {{"lr_peak", cfg.train.lr_peak},
        {"warmup_iters", cfg.train.warmup_iters},
        {"epochs", cfg.train.epochs},
        {"pretrain_epochs", cfg.train.pretrain_epochs},
        {"pretrain_lr_peak", cfg.train.pretrain_lr_peak},
        {"batch", cfg.train.batch},
        {"adam_beta1", cfg.train.adam_beta1},
        {"adam_beta2", cfg.train.adam_beta2},
        {"weight_decay", cfg.train.weight_decay},
        {"threshold", cfg.train.threshold},
        {"threshold_space", cfg.train.threshold_space},
        {"seed", cfg.train.seed},
        {"ft", cfg.train.ft},
        {"pt", cfg.train.pt},
        {"rm", cfg.train.rm},
        {"pl", cfg.train.pl},
        {"refine_blocks", cfg.train.refine_blocks},
        {"refine_channels", cfg.train.refine_channels}}},
      {"point",
       {{"eps", cfg.point.eps},
        {"n", cfg.point.n},
        {"c", cfg.point.c},
        {"K", cfg.point.K},
        {"alpha", cfg.point.alpha},
        {"beta", cfg.point.beta},
        {"uncertainty_grad", cfg.point.uncertainty_grad}}},
      {"generator",
       {{"canvas", cfg.generator.canvas},
        {"min_objects", cfg.generator.min_objects},
        {"max_objects", cfg.generator.max_objects},
        {"occl_lo", cfg.generator.occl_lo},
        {"occl_hi", cfg.generator.occl_hi},
        {"attempts", cfg.generator.attempts},
        {"noise_amp", cfg.generator.noise_amp}}}};
  return j.dump(1);
}

RunConfig run_config_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return run_config_from_json_text(text);
}

}  // namespace plug
