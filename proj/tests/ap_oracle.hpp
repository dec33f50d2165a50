#pragma once

#include <algorithm>
#include <map>
#include <vector>

#include "dadapt/eval.hpp"

// Brute-force average-precision oracle. Re-runs the greedy matching from
// scratch for every score prefix, collects the PR staircase, and sums
// envelope rectangles. Kept deliberately separate from the library path.

namespace ap_oracle {

using dadapt::Box;
using dadapt::DetectionResult;
using dadapt::GtBox;

struct PrPoint {
  double precision;
  double recall;
};

inline double brute_force_ap(std::vector<DetectionResult> dets, const std::vector<GtBox>& gts,
                             int cls, double thresh) {
  std::erase_if(dets, [cls](const DetectionResult& d) { return d.cls != cls; });
  std::sort(dets.begin(), dets.end(), [](const DetectionResult& a, const DetectionResult& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    return a.box.y2 < b.box.y2;
  });

  long npos = 0;
  for (const auto& g : gts)
    if (g.cls == cls) ++npos;
  if (npos == 0) return -1.0;

  // matching recomputed from scratch for the k-detection prefix
  auto prefix_tp = [&](std::size_t k) -> long {
    std::map<const GtBox*, bool> used;
    for (const auto& g : gts)
      if (g.cls == cls) used[&g] = false;
    long tp = 0;
    for (std::size_t i = 0; i < k; ++i) {
      const GtBox* best = nullptr;
      double best_iou = thresh;
      for (const auto& g : gts) {
        if (g.cls != cls || g.scene_id != dets[i].scene_id || used[&g]) continue;
        double v = dadapt::iou(dets[i].box, g.box);
        if (v >= best_iou) {
          best_iou = v;
          best = &g;
        }
      }
      if (best) {
        used[best] = true;
        ++tp;
      }
    }
    return tp;
  };

  std::vector<PrPoint> points;
  for (std::size_t k = 1; k <= dets.size(); ++k) {
    long tp = prefix_tp(k);
    points.push_back(PrPoint{static_cast<double>(tp) / static_cast<double>(k),
                             static_cast<double>(tp) / static_cast<double>(npos)});
  }

  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    double r = points[i].recall;
    if (r <= prev_recall) continue;
    double env = 0.0;
    for (std::size_t j = i; j < points.size(); ++j)
      if (points[j].recall >= r) env = std::max(env, points[j].precision);
    ap += (r - prev_recall) * env;
    prev_recall = r;
  }
  return ap;
}

}  // namespace ap_oracle
