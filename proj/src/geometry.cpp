#include "dadapt/geometry.hpp"

#include <algorithm>
#include <stdexcept>

namespace dadapt {

double intersection_area(const Box& a, const Box& b) {
  double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (w <= 0.0 || h <= 0.0) return 0.0;
  return w * h;
}

double iou(const Box& a, const Box& b) {
  double inter = intersection_area(a, b);
  double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return inter / uni;
}

Offsets encode_offsets(const Box& anchor, const Box& gt) {
  if (anchor.width() <= 0.0 || anchor.height() <= 0.0)
    throw std::invalid_argument("encode_offsets: anchor has nonpositive size");
  if (gt.width() <= 0.0 || gt.height() <= 0.0)
    throw std::invalid_argument("encode_offsets: gt has nonpositive size");
  Offsets t;
  t.tx = (gt.cx() - anchor.cx()) / anchor.width();
  t.ty = (gt.cy() - anchor.cy()) / anchor.height();
  t.tw = std::log(gt.width() / anchor.width());
  t.th = std::log(gt.height() / anchor.height());
  return t;
}

Box decode_offsets(const Box& anchor, const Offsets& t) {
  if (anchor.width() <= 0.0 || anchor.height() <= 0.0)
    throw std::invalid_argument("decode_offsets: anchor has nonpositive size");
  if (!std::isfinite(t.tx) || !std::isfinite(t.ty) || !std::isfinite(t.tw) ||
      !std::isfinite(t.th))
    throw std::invalid_argument("decode_offsets: non-finite offsets");
  double cx = anchor.cx() + t.tx * anchor.width();
  double cy = anchor.cy() + t.ty * anchor.height();
  double w = anchor.width() * std::exp(t.tw);
  double h = anchor.height() * std::exp(t.th);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

Box clip_to_scene(const Box& b, double scene_w, double scene_h) {
  Box c;
  c.x1 = std::clamp(b.x1, 0.0, scene_w);
  c.y1 = std::clamp(b.y1, 0.0, scene_h);
  c.x2 = std::clamp(b.x2, 0.0, scene_w);
  c.y2 = std::clamp(b.y2, 0.0, scene_h);
  return c;
}

Box decode_offsets(const Box& anchor, const Offsets& t, double scene_w, double scene_h) {
  return clip_to_scene(decode_offsets(anchor, t), scene_w, scene_h);
}

Box enlarge(const Box& b, double factor, double scene_w, double scene_h) {
  if (factor <= 0.0) throw std::invalid_argument("enlarge: factor must be > 0");
  double w = b.width() * factor;
  double h = b.height() * factor;
  Box e{b.cx() - 0.5 * w, b.cy() - 0.5 * h, b.cx() + 0.5 * w, b.cy() + 0.5 * h};
  return clip_to_scene(e, scene_w, scene_h);
}

}  // namespace dadapt
