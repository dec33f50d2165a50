#pragma once

#include <cmath>

namespace dadapt {

// Axis-aligned box in continuous scene units. x2 >= x1, y2 >= y1.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool operator==(const Box&) const = default;
};

// RCNN-style dimensionless regression targets.
struct Offsets {
  double tx = 0, ty = 0, tw = 0, th = 0;
};

// area(a ∩ b) / area(a ∪ b); 0 when the union has zero area.
double iou(const Box& a, const Box& b);

double intersection_area(const Box& a, const Box& b);

// Requires positive width/height on both boxes.
Offsets encode_offsets(const Box& anchor, const Box& gt);

// Exact inverse of encode_offsets. Requires positive anchor size and
// finite offsets.
Box decode_offsets(const Box& anchor, const Offsets& t);

Box clip_to_scene(const Box& b, double scene_w, double scene_h);

Box decode_offsets(const Box& anchor, const Offsets& t, double scene_w, double scene_h);

// Scales width and height by `factor` about the center, then clips.
Box enlarge(const Box& b, double factor, double scene_w, double scene_h);

}  // namespace dadapt
