#pragma once

#include "plug/syndata.hpp"

#include <string>
#include <vector>

namespace plug {

struct DatasetManifest {
  std::string split;
  uint64_t seed = 0;
  int canvas_h = 0, canvas_w = 0;
  GeneratorConfig generator;
  int num_samples = 0;
};

// Layout: manifest.json; scene_{idx:06}.png (RGB8);
// scene_{idx:06}_obj{k}_amodal.png / _visible.png (gray8, 0 or 255).
DatasetManifest write_dataset(const std::vector<Scene>& scenes,
                              const std::string& dir, const std::string& split,
                              uint64_t seed, const GeneratorConfig& cfg);

struct LoadedDataset {
  DatasetManifest manifest;
  std::vector<Scene> scenes;  // occlusion ratios / bboxes from the manifest
};

LoadedDataset read_dataset(const std::string& dir);

}  // namespace plug
