#include "plug/syndata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace plug {

namespace {

bool point_in_convex_poly(const std::vector<double>& pts, double px, double py) {
  // pts: x0,y0,...; counterclockwise winding
  size_t n = pts.size() / 2;
  for (size_t i = 0; i < n; ++i) {
    size_t j = (i + 1) % n;
    double ex = pts[2 * j] - pts[2 * i];
    double ey = pts[2 * j + 1] - pts[2 * i + 1];
    double cx = px - pts[2 * i];
    double cy = py - pts[2 * i + 1];
    if (ex * cy - ey * cx < 0) return false;
  }
  return true;
}

double dist2_point_segment(double px, double py, double ax, double ay, double bx,
                           double by) {
  double dx = bx - ax, dy = by - ay;
  double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double qx = ax + t * dx, qy = ay + t * dy;
  return (px - qx) * (px - qx) + (py - qy) * (py - qy);
}

void ensure_ccw(std::vector<double>& pts) {
  double area2 = 0;
  size_t n = pts.size() / 2;
  for (size_t i = 0; i < n; ++i) {
    size_t j = (i + 1) % n;
    area2 += pts[2 * i] * pts[2 * j + 1] - pts[2 * j] * pts[2 * i + 1];
  }
  if (area2 < 0) {
    std::vector<double> rev;
    for (size_t i = n; i-- > 0;) {
      rev.push_back(pts[2 * i]);
      rev.push_back(pts[2 * i + 1]);
    }
    pts = rev;
  }
}

}  // namespace

bool shape_contains(const Shape& s, double px, double py) {
  switch (s.kind) {
    case ShapeKind::ellipse: {
      double cx = s.params[0], cy = s.params[1], a = s.params[2], b = s.params[3];
      double th = s.params.size() > 4 ? s.params[4] : 0.0;
      double dx = px - cx, dy = py - cy;
      double rx = dx * std::cos(th) + dy * std::sin(th);
      double ry = -dx * std::sin(th) + dy * std::cos(th);
      return (rx * rx) / (a * a) + (ry * ry) / (b * b) <= 1.0;
    }
    case ShapeKind::rectangle: {
      double cx = s.params[0], cy = s.params[1], hw = s.params[2], hh = s.params[3];
      double th = s.params.size() > 4 ? s.params[4] : 0.0;
      double dx = px - cx, dy = py - cy;
      double rx = dx * std::cos(th) + dy * std::sin(th);
      double ry = -dx * std::sin(th) + dy * std::cos(th);
      return std::abs(rx) <= hw && std::abs(ry) <= hh;
    }
    case ShapeKind::triangle:
    case ShapeKind::convex_polygon:
      return point_in_convex_poly(s.params, px, py);
    case ShapeKind::capsule: {
      double r = s.params[4];
      return dist2_point_segment(px, py, s.params[0], s.params[1], s.params[2],
                                 s.params[3]) <= r * r;
    }
  }
  return false;
}

Mask rasterize_shape(const Shape& s, int h, int w) {
  if (h < 8 || w < 8) throw std::runtime_error("rasterize_shape: canvas too small");
  for (double p : s.params)
    if (!std::isfinite(p)) throw DegenerateShapeError("non-finite shape parameter");
  Mask m(h, w);
  int64_t n = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (shape_contains(s, x + 0.5, y + 0.5)) {
        m.at(y, x) = 1;
        ++n;
      }
  if (n == 0) throw DegenerateShapeError("shape rasterizes to zero area");
  return m;
}

std::vector<ObjectAnnotation> compose_occlusion(const std::vector<Shape>& shapes,
                                                int h, int w) {
  for (size_t i = 0; i < shapes.size(); ++i)
    for (size_t j = i + 1; j < shapes.size(); ++j)
      if (shapes[i].depth == shapes[j].depth)
        throw std::runtime_error("compose_occlusion: duplicate depth");
  std::vector<Mask> amodal;
  amodal.reserve(shapes.size());
  for (const auto& s : shapes) amodal.push_back(rasterize_shape(s, h, w));

  std::vector<ObjectAnnotation> out(shapes.size());
  for (size_t i = 0; i < shapes.size(); ++i) {
    ObjectAnnotation& ann = out[i];
    ann.id = (int)i;
    ann.depth = shapes[i].depth;
    ann.amodal_mask = amodal[i];
    ann.visible_mask = amodal[i];
    for (size_t j = 0; j < shapes.size(); ++j) {
      if (shapes[j].depth >= shapes[i].depth) continue;
      for (size_t p = 0; p < ann.visible_mask.v.size(); ++p)
        if (amodal[j].v[p]) ann.visible_mask.v[p] = 0;
    }
    int64_t na = ann.amodal_mask.count();
    int64_t nv = ann.visible_mask.count();
    ann.occlusion_ratio = (double)(na - nv) / (double)na;
    ann.amodal_bbox = visible_bbox(ann.amodal_mask);
    if (nv > 0) ann.visible_bbox = visible_bbox(ann.visible_mask);
  }
  return out;
}

BBox visible_bbox(const Mask& mask) {
  BBox b{mask.w, mask.h, 0, 0};
  bool any = false;
  for (int y = 0; y < mask.h; ++y)
    for (int x = 0; x < mask.w; ++x)
      if (mask.at(y, x)) {
        any = true;
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  if (!any) throw std::runtime_error("visible_bbox: empty mask");
  return b;
}

namespace {

Shape random_shape(Rng& rng, int canvas) {
  Shape s;
  double margin = 4.0;
  double lo = margin, hi = canvas - margin;
  double cx = rng.uniform(lo, hi), cy = rng.uniform(lo, hi);
  double smin = canvas * 0.10, smax = canvas * 0.28;
  int kind = rng.uniform_int(0, 4);
  s.kind = (ShapeKind)kind;
  switch (s.kind) {
    case ShapeKind::ellipse:
      s.params = {cx, cy, rng.uniform(smin, smax), rng.uniform(smin, smax),
                  rng.uniform(0, M_PI)};
      break;
    case ShapeKind::rectangle:
      s.params = {cx, cy, rng.uniform(smin, smax), rng.uniform(smin, smax),
                  rng.uniform(0, M_PI)};
      break;
    case ShapeKind::triangle: {
      s.params.clear();
      double r = rng.uniform(smin, smax);
      double base = rng.uniform(0, 2 * M_PI);
      for (int k = 0; k < 3; ++k) {
        double ang = base + k * 2 * M_PI / 3 + rng.uniform(-0.5, 0.5);
        double rr = r * rng.uniform(0.7, 1.3);
        s.params.push_back(cx + rr * std::cos(ang));
        s.params.push_back(cy + rr * std::sin(ang));
      }
      ensure_ccw(s.params);
      break;
    }
    case ShapeKind::convex_polygon: {
      s.params.clear();
      int k = rng.uniform_int(5, 7);
      double r = rng.uniform(smin, smax);
      std::vector<double> angs(k);
      for (auto& a : angs) a = rng.uniform(0, 2 * M_PI);
      std::sort(angs.begin(), angs.end());
      for (double a : angs) {
        s.params.push_back(cx + r * std::cos(a));
        s.params.push_back(cy + r * std::sin(a));
      }
      ensure_ccw(s.params);
      break;
    }
    case ShapeKind::capsule: {
      double len = rng.uniform(smin, smax * 1.4);
      double ang = rng.uniform(0, M_PI);
      double r = rng.uniform(smin * 0.5, smax * 0.5);
      s.params = {cx - 0.5 * len * std::cos(ang), cy - 0.5 * len * std::sin(ang),
                  cx + 0.5 * len * std::cos(ang), cy + 0.5 * len * std::sin(ang), r};
      break;
    }
  }
  for (int c = 0; c < 3; ++c) s.fill[c] = rng.uniform(0.1, 1.0);
  return s;
}

// flat background color plus smooth value noise from a coarse seeded grid
Image8 render_background(Rng& rng, int canvas, double amp) {
  std::array<double, 3> base;
  for (auto& b : base) b = rng.uniform(0.25, 0.75);
  const int g = 9;  // coarse grid (8 cells)
  std::vector<double> grid((size_t)g * g);
  for (auto& v : grid) v = rng.uniform(-amp, amp);
  Image8 img(canvas, canvas, 3);
  for (int y = 0; y < canvas; ++y)
    for (int x = 0; x < canvas; ++x) {
      double gy = (double)y / canvas * (g - 1);
      double gx = (double)x / canvas * (g - 1);
      int y0 = (int)gy, x0 = (int)gx;
      double fy = gy - y0, fx = gx - x0;
      int y1 = std::min(y0 + 1, g - 1), x1 = std::min(x0 + 1, g - 1);
      double n = grid[y0 * g + x0] * (1 - fy) * (1 - fx) +
                 grid[y0 * g + x1] * (1 - fy) * fx +
                 grid[y1 * g + x0] * fy * (1 - fx) + grid[y1 * g + x1] * fy * fx;
      for (int c = 0; c < 3; ++c) {
        double v = std::clamp(base[c] + n, 0.0, 1.0);
        img.at(y, x, c) = (uint8_t)std::lround(v * 255.0);
      }
    }
  return img;
}

}  // namespace

Scene gen_scene(uint64_t seed, const GeneratorConfig& cfg) {
  Rng rng(seed);
  const int canvas = cfg.canvas;
  for (int attempt = 0; attempt < cfg.attempts; ++attempt) {
    int n = rng.uniform_int(cfg.min_objects, cfg.max_objects);
    std::vector<Shape> shapes;
    bool bad_geom = false;
    for (int i = 0; i < n; ++i) shapes.push_back(random_shape(rng, canvas));
    std::vector<int> depths(n);
    std::iota(depths.begin(), depths.end(), 0);
    rng.shuffle(depths);
    for (int i = 0; i < n; ++i) shapes[i].depth = depths[i];
    int target = rng.uniform_int(0, n - 1);

    std::vector<ObjectAnnotation> anns;
    try {
      anns = compose_occlusion(shapes, canvas, canvas);
    } catch (const DegenerateShapeError&) {
      bad_geom = true;
    }
    if (bad_geom) continue;

    bool ok = true;
    for (const auto& a : anns)
      if (a.visible_mask.count() == 0) ok = false;
    if (!ok) continue;
    double r = anns[(size_t)target].occlusion_ratio;
    if (r < cfg.occl_lo || r > cfg.occl_hi) continue;
    if (cfg.occl_hi == 0.0) {
      // an unoccluded split means the whole scene is overlap-free
      bool any_occluded = false;
      for (const auto& a : anns)
        if (a.occlusion_ratio != 0.0) any_occluded = true;
      if (any_occluded) continue;
    }

    Scene scene;
    scene.seed = seed;
    scene.image = render_background(rng, canvas, cfg.noise_amp);
    // painter's algorithm, back to front
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return shapes[(size_t)a].depth > shapes[(size_t)b].depth;
    });
    for (int i : order) {
      const Mask& m = anns[(size_t)i].amodal_mask;
      for (int y = 0; y < canvas; ++y)
        for (int x = 0; x < canvas; ++x)
          if (m.at(y, x))
            for (int c = 0; c < 3; ++c)
              scene.image.at(y, x, c) =
                  (uint8_t)std::lround(shapes[(size_t)i].fill[(size_t)c] * 255.0);
    }
    // target first, ids renumbered in emitted order
    scene.objects.push_back(anns[(size_t)target]);
    for (int i = 0; i < n; ++i)
      if (i != target) scene.objects.push_back(anns[(size_t)i]);
    for (size_t i = 0; i < scene.objects.size(); ++i) scene.objects[i].id = (int)i;
    return scene;
  }
  throw GenerationError("gen_scene: rejection budget exhausted");
}

CropResult crop_double(const Image8& image, const BBox& bbox, int out_size) {
  if (bbox.empty()) throw std::runtime_error("crop_double: empty bbox");
  if (bbox.x0 < 0 || bbox.y0 < 0 || bbox.x1 > image.w || bbox.y1 > image.h)
    throw std::runtime_error("crop_double: bbox outside image");
  double cx = 0.5 * (bbox.x0 + bbox.x1), cy = 0.5 * (bbox.y0 + bbox.y1);
  double w = bbox.x1 - bbox.x0, h = bbox.y1 - bbox.y0;
  int x0 = (int)std::floor(cx - w), x1 = (int)std::ceil(cx + w);
  int y0 = (int)std::floor(cy - h), y1 = (int)std::ceil(cy + h);
  CropTransform t;
  t.x0 = std::max(0, x0);
  t.y0 = std::max(0, y0);
  t.x1 = std::min(image.w, x1);
  t.y1 = std::min(image.h, y1);
  t.out_size = out_size;

  CropResult res;
  res.transform = t;
  res.image.resize((size_t)out_size * out_size * 3);
  for (int y = 0; y < out_size; ++y)
    for (int x = 0; x < out_size; ++x) {
      // half-pixel centers, clamped bilinear
      double sx = t.x0 + (x + 0.5) * t.sx() - 0.5;
      double sy = t.y0 + (y + 0.5) * t.sy() - 0.5;
      int ix = (int)std::floor(sx), iy = (int)std::floor(sy);
      double fx = sx - ix, fy = sy - iy;
      auto px = [&](int yy, int xx, int c) {
        yy = std::clamp(yy, 0, image.h - 1);
        xx = std::clamp(xx, 0, image.w - 1);
        return (double)image.at(yy, xx, c) / 255.0;
      };
      for (int c = 0; c < 3; ++c) {
        double v = px(iy, ix, c) * (1 - fy) * (1 - fx) +
                   px(iy, ix + 1, c) * (1 - fy) * fx +
                   px(iy + 1, ix, c) * fy * (1 - fx) +
                   px(iy + 1, ix + 1, c) * fy * fx;
        res.image[((size_t)y * out_size + x) * 3 + c] = (float)v;
      }
    }
  return res;
}

Mask crop_mask(const Mask& m, const CropTransform& t) {
  Mask out(t.out_size, t.out_size);
  for (int y = 0; y < t.out_size; ++y)
    for (int x = 0; x < t.out_size; ++x) {
      int sx = t.x0 + (int)std::floor((x + 0.5) * t.sx());
      int sy = t.y0 + (int)std::floor((y + 0.5) * t.sy());
      sx = std::clamp(sx, 0, m.w - 1);
      sy = std::clamp(sy, 0, m.h - 1);
      out.at(y, x) = m.at(sy, sx);
    }
  return out;
}

BoxF bbox_to_crop(const BBox& b, const CropTransform& t) {
  BoxF out;
  out.x0 = std::clamp(t.orig_to_crop_x(b.x0), 0.0, (double)t.out_size);
  out.y0 = std::clamp(t.orig_to_crop_y(b.y0), 0.0, (double)t.out_size);
  out.x1 = std::clamp(t.orig_to_crop_x(b.x1), 0.0, (double)t.out_size);
  out.y1 = std::clamp(t.orig_to_crop_y(b.y1), 0.0, (double)t.out_size);
  return out;
}

}  // namespace plug
