#pragma once

// Procedural occluded-shapes scenes with exact amodal/visible ground truth.

#include "plug/image_io.hpp"
#include "plug/rng.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace plug {

struct Mask {
  int h = 0, w = 0;
  std::vector<uint8_t> v;  // 0/1

  Mask() = default;
  Mask(int h_, int w_) : h(h_), w(w_), v((size_t)h_ * w_, 0) {}
  uint8_t& at(int y, int x) { return v[(size_t)y * w + x]; }
  uint8_t at(int y, int x) const { return v[(size_t)y * w + x]; }
  int64_t count() const {
    int64_t n = 0;
    for (uint8_t b : v) n += b;
    return n;
  }
  bool operator==(const Mask&) const = default;
};

// half-open pixel box, (x,y) ordering
struct BBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  bool empty() const { return x1 <= x0 || y1 <= y0; }
  bool operator==(const BBox&) const = default;
};

enum class ShapeKind { ellipse, rectangle, triangle, convex_polygon, capsule };

struct Shape {
  ShapeKind kind = ShapeKind::ellipse;
  // ellipse: cx, cy, a, b, theta
  // rectangle: cx, cy, half_w, half_h, theta
  // triangle / convex_polygon: x0,y0, x1,y1, ... (polygon counterclockwise)
  // capsule: x0,y0, x1,y1, radius
  std::vector<double> params;
  std::array<double, 3> fill{0.5, 0.5, 0.5};
  int depth = 0;  // lower = in front
};

struct ObjectAnnotation {
  int id = 0;
  Mask amodal_mask;
  Mask visible_mask;
  BBox visible_bbox;
  BBox amodal_bbox;
  double occlusion_ratio = 0.0;
  int depth = 0;
};

struct Scene {
  Image8 image;  // H x W x 3
  std::vector<ObjectAnnotation> objects;  // objects[0] is the target object
  uint64_t seed = 0;
};

struct GeneratorConfig {
  int canvas = 64;
  int min_objects = 2;
  int max_objects = 4;
  double occl_lo = 0.1;   // target-object occlusion window (inclusive)
  double occl_hi = 0.7;
  int attempts = 1000;
  double noise_amp = 0.05;

  static GeneratorConfig pretrain() {
    GeneratorConfig cfg;
    cfg.occl_lo = 0.0;
    cfg.occl_hi = 0.0;
    return cfg;
  }
};

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// pixel (y,x) is set iff the pixel center (x+0.5, y+0.5) lies inside
bool shape_contains(const Shape& s, double px, double py);
Mask rasterize_shape(const Shape& s, int h, int w);

std::vector<ObjectAnnotation> compose_occlusion(const std::vector<Shape>& shapes,
                                                int h, int w);

BBox visible_bbox(const Mask& mask);

Scene gen_scene(uint64_t seed, const GeneratorConfig& cfg);

// ---- crop ----

// Affine map between the crop's out_size x out_size pixel grid and the
// clipped source window [x0,x1) x [y0,y1) in original image coordinates.
struct CropTransform {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // clipped window, half-open
  int out_size = 0;

  double sx() const { return (double)(x1 - x0) / out_size; }
  double sy() const { return (double)(y1 - y0) / out_size; }
  // continuous coordinates (box-corner convention)
  double crop_to_orig_x(double xc) const { return x0 + xc * sx(); }
  double crop_to_orig_y(double yc) const { return y0 + yc * sy(); }
  double orig_to_crop_x(double xo) const { return (xo - x0) / sx(); }
  double orig_to_crop_y(double yo) const { return (yo - y0) / sy(); }
};

struct CropResult {
  std::vector<float> image;  // out x out x 3, [0,1], bilinear
  CropTransform transform;
};

// The box scaled 2x about its center, clipped to the image, cropped and
// resampled to out_size x out_size.
CropResult crop_double(const Image8& image, const BBox& bbox, int out_size);

// nearest-neighbor mask resample through the same transform
Mask crop_mask(const Mask& m, const CropTransform& t);

// continuous bbox mapped into crop coordinates, clamped to the crop
struct BoxF {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
};
BoxF bbox_to_crop(const BBox& b, const CropTransform& t);

}  // namespace plug
