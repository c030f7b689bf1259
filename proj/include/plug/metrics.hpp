#pragma once

#include "plug/syndata.hpp"
#include "plug/tensor.hpp"

#include "json.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace plug {

// strict >; tau applies to probabilities or raw logits per `space`
template <typename T>
Mask binarize(const Tensor<T>& map, double tau, const std::string& space = "prob") {
  double thr = tau;
  if (space == "logit") {
    // map holds probabilities; compare in logit space
    thr = 1.0 / (1.0 + std::exp(-tau));
  } else if (space != "prob") {
    throw std::runtime_error("bad threshold space: " + space);
  }
  Mask m(map.shape[0], map.shape[1]);
  for (int64_t i = 0; i < map.numel(); ++i) m.v[i] = (double)map[i] > thr ? 1 : 0;
  return m;
}

inline double iou(const Mask& a, const Mask& b) {
  if (a.h != b.h || a.w != b.w) throw std::runtime_error("iou shape mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    inter += a.v[i] && b.v[i];
    uni += a.v[i] || b.v[i];
  }
  if (uni == 0) throw std::runtime_error("iou of two empty masks");
  return (double)inter / (double)uni;
}

struct ObjectMetrics {
  int scene = 0;
  int object = 0;
  double iou_full = 0.0;
  bool has_occ = false;
  double iou_occ = 0.0;
  double occlusion_ratio = 0.0;
};

struct MetricsReport {
  double miou_full = 0.0;
  double miou_occ = 0.0;
  int n_objects = 0;
  int n_skipped_occ = 0;
  std::vector<ObjectMetrics> per_object;

  void finalize() {
    double sf = 0.0, so = 0.0;
    int no = 0;
    for (const auto& o : per_object) {
      sf += o.iou_full;
      if (o.has_occ) {
        so += o.iou_occ;
        ++no;
      }
    }
    n_objects = (int)per_object.size();
    n_skipped_occ = n_objects - no;
    miou_full = n_objects ? sf / n_objects : 0.0;
    miou_occ = no ? so / no : 0.0;
  }

  nlohmann::json to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& o : per_object) {
      nlohmann::json row{{"scene", o.scene},
                         {"object", o.object},
                         {"iou_full", o.iou_full},
                         {"occlusion_ratio", o.occlusion_ratio}};
      if (o.has_occ) row["iou_occ"] = o.iou_occ;
      per.push_back(row);
    }
    return nlohmann::json{{"miou_full", miou_full},
                          {"miou_occ", miou_occ},
                          {"n_objects", n_objects},
                          {"n_skipped_occ", n_skipped_occ},
                          {"per_object", per}};
  }
};

}  // namespace plug
