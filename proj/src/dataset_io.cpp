#include "plug/dataset_io.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace plug {

namespace {

std::string scene_name(int idx) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "scene_%06d", idx);
  return buf;
}

Image8 mask_to_image(const Mask& m) {
  Image8 img(m.h, m.w, 1);
  for (size_t i = 0; i < m.v.size(); ++i) img.v[i] = m.v[i] ? 255 : 0;
  return img;
}

Mask image_to_mask(const Image8& img, const std::string& path) {
  if (img.c != 1) throw std::runtime_error("mask is not grayscale: " + path);
  Mask m(img.h, img.w);
  for (size_t i = 0; i < m.v.size(); ++i) {
    if (img.v[i] != 0 && img.v[i] != 255)
      throw std::runtime_error("mask not binary: " + path);
    m.v[i] = img.v[i] ? 1 : 0;
  }
  return m;
}

json generator_to_json(const GeneratorConfig& g) {
  return json{{"canvas", g.canvas},     {"min_objects", g.min_objects},
              {"max_objects", g.max_objects}, {"occl_lo", g.occl_lo},
              {"occl_hi", g.occl_hi},   {"attempts", g.attempts},
              {"noise_amp", g.noise_amp}};
}

GeneratorConfig generator_from_json(const json& j) {
  GeneratorConfig g;
  g.canvas = j.at("canvas");
  g.min_objects = j.at("min_objects");
  g.max_objects = j.at("max_objects");
  g.occl_lo = j.at("occl_lo");
  g.occl_hi = j.at("occl_hi");
  g.attempts = j.at("attempts");
  g.noise_amp = j.at("noise_amp");
  return g;
}

}  // namespace

DatasetManifest write_dataset(const std::vector<Scene>& scenes,
                              const std::string& dir, const std::string& split,
                              uint64_t seed, const GeneratorConfig& cfg) {
  fs::create_directories(dir);
  json samples = json::array();
  for (size_t i = 0; i < scenes.size(); ++i) {
    const Scene& sc = scenes[i];
    std::string base = scene_name((int)i);
    write_png(dir + "/" + base + ".png", sc.image);
    json objs = json::array();
    for (const auto& o : sc.objects) {
      write_png(dir + "/" + base + "_obj" + std::to_string(o.id) + "_amodal.png",
                mask_to_image(o.amodal_mask));
      write_png(dir + "/" + base + "_obj" + std::to_string(o.id) + "_visible.png",
                mask_to_image(o.visible_mask));
      objs.push_back(json{
          {"id", o.id},
          {"visible_bbox", {o.visible_bbox.x0, o.visible_bbox.y0, o.visible_bbox.x1, o.visible_bbox.y1}},
          {"amodal_bbox", {o.amodal_bbox.x0, o.amodal_bbox.y0, o.amodal_bbox.x1, o.amodal_bbox.y1}},
          {"occlusion_ratio", o.occlusion_ratio},
          {"depth", o.depth}});
    }
    samples.push_back(json{{"scene", base + ".png"}, {"objects", objs}});
  }
  int h = scenes.empty() ? 0 : scenes[0].image.h;
  int w = scenes.empty() ? 0 : scenes[0].image.w;
  json manifest{{"version", "1"},
                {"split", split},
                {"seed", seed},
                {"canvas", {h, w}},
                {"generator", generator_to_json(cfg)},
                {"samples", samples}};
  std::ofstream out(dir + "/manifest.json");
  out << manifest.dump(1) << "\n";

  DatasetManifest m;
  m.split = split;
  m.seed = seed;
  m.canvas_h = h;
  m.canvas_w = w;
  m.generator = cfg;
  m.num_samples = (int)scenes.size();
  return m;
}

LoadedDataset read_dataset(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("missing manifest: " + dir + "/manifest.json");
  json manifest = json::parse(in);
  if (manifest.at("version") != "1")
    throw std::runtime_error("unsupported dataset version");

  LoadedDataset ds;
  ds.manifest.split = manifest.at("split");
  ds.manifest.seed = manifest.at("seed");
  ds.manifest.canvas_h = manifest.at("canvas")[0];
  ds.manifest.canvas_w = manifest.at("canvas")[1];
  ds.manifest.generator = generator_from_json(manifest.at("generator"));
  ds.manifest.num_samples = (int)manifest.at("samples").size();

  for (const auto& sample : manifest.at("samples")) {
    Scene sc;
    std::string scene_file = dir + "/" + (std::string)sample.at("scene");
    if (!fs::exists(scene_file))
      throw std::runtime_error("missing scene file: " + scene_file);
    sc.image = read_png(scene_file);
    if (sc.image.h != ds.manifest.canvas_h || sc.image.w != ds.manifest.canvas_w)
      throw std::runtime_error("scene shape mismatch: " + scene_file);
    std::string base = scene_file.substr(0, scene_file.size() - 4);
    for (const auto& jo : sample.at("objects")) {
      ObjectAnnotation o;
      o.id = jo.at("id");
      o.depth = jo.at("depth");
      o.occlusion_ratio = jo.at("occlusion_ratio");
      auto vb = jo.at("visible_bbox");
      o.visible_bbox = BBox{vb[0], vb[1], vb[2], vb[3]};
      auto ab = jo.at("amodal_bbox");
      o.amodal_bbox = BBox{ab[0], ab[1], ab[2], ab[3]};
      std::string am = base + "_obj" + std::to_string(o.id) + "_amodal.png";
      std::string vi = base + "_obj" + std::to_string(o.id) + "_visible.png";
      if (!fs::exists(am)) throw std::runtime_error("missing mask file: " + am);
      if (!fs::exists(vi)) throw std::runtime_error("missing mask file: " + vi);
      o.amodal_mask = image_to_mask(read_png(am), am);
      o.visible_mask = image_to_mask(read_png(vi), vi);
      if (o.amodal_mask.h != ds.manifest.canvas_h || o.amodal_mask.w != ds.manifest.canvas_w)
        throw std::runtime_error("mask shape mismatch: " + am);
      sc.objects.push_back(std::move(o));
    }
    ds.scenes.push_back(std::move(sc));
  }
  return ds;
}

}  // namespace plug
