#include "dadapt/detector.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "dadapt/errors.hpp"

namespace dadapt {

using ad::Binding;
using ad::Matrix;
using ad::Tape;
using ad::Value;

bool is_foreground(int label, int n_classes) { return label >= 0 && label < n_classes; }

std::vector<Box> make_anchors(double scene_w, double scene_h, const AnchorGridConfig& cfg) {
  std::vector<Box> anchors;
  int nx = static_cast<int>(scene_w / cfg.stride);
  int ny = static_cast<int>(scene_h / cfg.stride);
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i)
      for (double s : cfg.scales) {
        double cx = (i + 0.5) * cfg.stride;
        double cy = (j + 0.5) * cfg.stride;
        Box b{cx - 0.5 * s, cy - 0.5 * s, cx + 0.5 * s, cy + 0.5 * s};
        anchors.push_back(clip_to_scene(b, scene_w, scene_h));
      }
  return anchors;
}

DetectorModel DetectorModel::create(int n_classes, int d_feat, const DetectorConfig& cfg,
                                    std::uint64_t seed) {
  DetectorModel m;
  m.n_classes = n_classes;
  m.d_feat = d_feat;
  m.anchor_cfg = cfg.anchors;
  m.params.hyper.momentum = cfg.momentum;
  m.params.hyper.weight_decay = cfg.weight_decay;
  Rng rng(derive_seed(seed, "detector-init"));
  m.obj_head = ad::Mlp::create(m.params, "det.obj", {d_feat, cfg.hidden, 1}, rng);
  m.cls_head = ad::Mlp::create(m.params, "det.cls", {d_feat, cfg.hidden, n_classes + 1}, rng);
  m.reg_head = ad::Mlp::create(m.params, "det.reg", {d_feat, cfg.hidden, 4 * n_classes}, rng);
  return m;
}

// ---- loss builders -----------------------------------------------------

namespace {

// -mean(y log s + (1-y) log(1-s)) with y supplied as data
Value binary_ce(Tape& tape, Value logits, const std::vector<double>& targets) {
  long n = tape.data(logits).rows();
  Matrix y(n, 1);
  for (long i = 0; i < n; ++i) y(i, 0) = targets[static_cast<std::size_t>(i)];
  Value yv = tape.leaf(y);
  Value ones = tape.leaf(Matrix::Ones(n, 1));
  Value s = ad::sigmoid(logits);
  Value pos = ad::mul(yv, ad::logv(s));
  Value neg = ad::mul(ad::sub(ones, yv), ad::logv(ad::sub(ones, s)));
  return ad::scale(ad::mean(ad::add(pos, neg)), -1.0);
}

Value smooth_l1_rows(Tape& tape, Value pred, const Matrix& targets) {
  Value t = tape.leaf(targets);
  return ad::mean_row_sums(ad::smooth_l1(ad::sub(pred, t)));
}

}  // namespace

SourceLosses build_source_losses(Tape& tape, const Binding& binding, const DetectorModel& model,
                                 const SourceBatch& batch) {
  SourceLosses out;

  if (batch.anchor_feats.rows() > 0) {
    Value z = model.obj_head.forward(tape, binding, tape.leaf(batch.anchor_feats));
    out.rpn_cls = binary_ce(tape, z, batch.anchor_obj);
  } else {
    out.rpn_cls = tape.scalar(0.0);
  }

  if (batch.pos_anchor_feats.rows() > 0) {
    Value t = model.reg_head.forward(tape, binding, tape.leaf(batch.pos_anchor_feats));
    Value sel = ad::select_channels(t, batch.pos_anchor_cls, 4);
    out.rpn_reg = smooth_l1_rows(tape, sel, batch.pos_anchor_targets);
  } else {
    out.rpn_reg = tape.scalar(0.0);
  }

  if (batch.roi_feats.rows() > 0) {
    Value logits = model.cls_head.forward(tape, binding, tape.leaf(batch.roi_feats));
    out.roi_cls = ad::cross_entropy(logits, batch.roi_labels);
  } else {
    out.roi_cls = tape.scalar(0.0);
  }

  if (batch.roi_fg_feats.rows() > 0) {
    Value t = model.reg_head.forward(tape, binding, tape.leaf(batch.roi_fg_feats));
    Value sel = ad::select_channels(t, batch.roi_fg_cls, 4);
    out.roi_reg = smooth_l1_rows(tape, sel, batch.roi_fg_targets);
  } else {
    out.roi_reg = tape.scalar(0.0);
  }

  out.total = ad::add(ad::add(out.rpn_cls, out.rpn_reg), ad::add(out.roi_cls, out.roi_reg));
  return out;
}

TargetLosses build_target_losses(Tape& tape, const Binding& binding, const DetectorModel& model,
                                 const TargetBatch& batch) {
  TargetLosses out;

  if (batch.det_feats.rows() > 0) {
    Value logits = model.cls_head.forward(tape, binding, tape.leaf(batch.det_feats));
    out.cls_det = ad::cross_entropy(logits, batch.labels);
  } else {
    out.cls_det = tape.scalar(0.0);
  }

  if (batch.reg_feats.rows() > 0) {
    Value logits = model.cls_head.forward(tape, binding, tape.leaf(batch.reg_feats));
    out.cls_reg = ad::cross_entropy(logits, batch.fg_labels);
  } else {
    out.cls_reg = tape.scalar(0.0);
  }

  if (batch.fg_det_feats.rows() > 0) {
    Value t = model.reg_head.forward(tape, binding, tape.leaf(batch.fg_det_feats));
    Value sel = ad::select_channels(t, batch.fg_labels, 4);
    out.reg = smooth_l1_rows(tape, sel, batch.fg_targets);
  } else {
    out.reg = tape.scalar(0.0);
  }

  out.total = ad::add(ad::add(out.cls_det, out.cls_reg), out.reg);
  return out;
}

// ---- batch assembly ----------------------------------------------------

namespace {

struct AnchorLabels {
  std::vector<double> obj;          // 0/1
  std::vector<int> best_cls;        // class of max-IoU object
  std::vector<Offsets> best_offsets;
  std::vector<int> positives;       // anchor indices with IoU >= 0.5
  std::vector<int> negatives;
};

AnchorLabels label_anchors(const std::vector<Box>& anchors,
                           const std::vector<ObjectInstance>& objects) {
  AnchorLabels out;
  out.obj.resize(anchors.size(), 0.0);
  out.best_cls.resize(anchors.size(), -1);
  out.best_offsets.resize(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int best_obj = -1;
    for (std::size_t o = 0; o < objects.size(); ++o) {
      double v = iou(anchors[a], objects[o].box);
      if (v > best) {
        best = v;
        best_obj = static_cast<int>(o);
      }
    }
    if (best >= 0.5 && best_obj >= 0) {
      out.obj[a] = 1.0;
      out.best_cls[a] = objects[static_cast<std::size_t>(best_obj)].cls;
      out.best_offsets[a] =
          encode_offsets(anchors[a], objects[static_cast<std::size_t>(best_obj)].box);
      out.positives.push_back(static_cast<int>(a));
    } else {
      out.negatives.push_back(static_cast<int>(a));
    }
  }
  return out;
}

Matrix rows_to_matrix(const std::vector<Eigen::VectorXd>& rows) {
  if (rows.empty()) return Matrix(0, 0);
  Matrix m(static_cast<long>(rows.size()), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<long>(i)) = rows[i];
  return m;
}

Matrix offsets_to_matrix(const std::vector<Offsets>& ts) {
  Matrix m(static_cast<long>(ts.size()), 4);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    m(static_cast<long>(i), 0) = ts[i].tx;
    m(static_cast<long>(i), 1) = ts[i].ty;
    m(static_cast<long>(i), 2) = ts[i].tw;
    m(static_cast<long>(i), 3) = ts[i].th;
  }
  return m;
}

template <typename T>
void sample_up_to(std::vector<T>& items, int limit, Rng& rng) {
  if (static_cast<int>(items.size()) <= limit) return;
  // partial Fisher-Yates
  for (int i = 0; i < limit; ++i) {
    int j = rng.uniform_int(i, static_cast<int>(items.size()) - 1);
    std::swap(items[static_cast<std::size_t>(i)], items[static_cast<std::size_t>(j)]);
  }
  items.resize(static_cast<std::size_t>(limit));
}

}  // namespace

SourceBatch sample_source_batch(const std::vector<Scene>& scenes,
                                const std::vector<std::vector<ObjectInstance>>& annotations,
                                const std::vector<int>& scene_indices,
                                const FeatureOracle& oracle, const DetectorModel& model,
                                const DetectorConfig& cfg, Rng& rng) {
  SourceBatch b;
  std::vector<Eigen::VectorXd> anchor_rows, pos_rows, roi_rows, fg_rows;
  std::vector<Offsets> pos_targets, fg_targets;

  for (int si : scene_indices) {
    const Scene& scene = scenes[static_cast<std::size_t>(si)];
    const auto& objects = annotations[static_cast<std::size_t>(si)];
    auto anchors = make_anchors(scene.width, scene.height, model.anchor_cfg);
    AnchorLabels labels = label_anchors(anchors, objects);

    std::vector<int> pos = labels.positives;
    std::vector<int> neg = labels.negatives;
    sample_up_to(pos, cfg.max_pos_anchors, rng);
    sample_up_to(neg, cfg.max_neg_anchors, rng);
    for (int a : pos) {
      auto f = oracle.crop_feature(scene, anchors[static_cast<std::size_t>(a)]);
      anchor_rows.push_back(f);
      b.anchor_obj.push_back(1.0);
      pos_rows.push_back(f);
      b.pos_anchor_cls.push_back(labels.best_cls[static_cast<std::size_t>(a)]);
      pos_targets.push_back(labels.best_offsets[static_cast<std::size_t>(a)]);
    }
    for (int a : neg) {
      anchor_rows.push_back(oracle.crop_feature(scene, anchors[static_cast<std::size_t>(a)]));
      b.anchor_obj.push_back(0.0);
    }

    // RoIs: jitters around each object plus random background boxes
    std::vector<Box> rois;
    for (const auto& obj : objects) {
      for (int k = 0; k < cfg.roi_jitter_per_object; ++k) {
        double w = obj.box.width() * rng.uniform(0.65, 1.5);
        double h = obj.box.height() * rng.uniform(0.65, 1.5);
        double cx = obj.box.cx() + rng.uniform(-0.35, 0.35) * obj.box.width();
        double cy = obj.box.cy() + rng.uniform(-0.35, 0.35) * obj.box.height();
        Box r = clip_to_scene(Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h},
                              scene.width, scene.height);
        if (r.area() > 1.0) rois.push_back(r);
      }
    }
    for (int k = 0; k < cfg.roi_random; ++k) {
      double w = rng.uniform(6.0, 0.45 * scene.width);
      double h = rng.uniform(6.0, 0.45 * scene.height);
      double cx = rng.uniform(0.5 * w, scene.width - 0.5 * w);
      double cy = rng.uniform(0.5 * h, scene.height - 0.5 * h);
      rois.push_back(Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
    }
    for (const auto& r : rois) {
      double best = 0.0;
      const ObjectInstance* best_obj = nullptr;
      for (const auto& obj : objects) {
        double v = iou(r, obj.box);
        if (v > best) {
          best = v;
          best_obj = &obj;
        }
      }
      auto f = oracle.crop_feature(scene, r);
      roi_rows.push_back(f);
      if (best >= 0.5 && best_obj) {
        b.roi_labels.push_back(best_obj->cls);
        fg_rows.push_back(f);
        b.roi_fg_cls.push_back(best_obj->cls);
        fg_targets.push_back(encode_offsets(r, best_obj->box));
      } else {
        b.roi_labels.push_back(model.background_class());
      }
    }
  }

  b.anchor_feats = rows_to_matrix(anchor_rows);
  b.pos_anchor_feats = rows_to_matrix(pos_rows);
  b.pos_anchor_targets = offsets_to_matrix(pos_targets);
  b.roi_feats = rows_to_matrix(roi_rows);
  b.roi_fg_feats = rows_to_matrix(fg_rows);
  b.roi_fg_targets = offsets_to_matrix(fg_targets);
  return b;
}

// ---- training ----------------------------------------------------------

void train_on_annotations(DetectorModel& model, const std::vector<Scene>& scenes,
                          const std::vector<std::vector<ObjectInstance>>& annotations,
                          const FeatureOracle& oracle, const DetectorConfig& cfg,
                          std::uint64_t seed, TrainCurve* curve) {
  if (scenes.empty()) throw std::invalid_argument("train_on_annotations: empty scene list");
  if (annotations.size() != scenes.size())
    throw std::invalid_argument("train_on_annotations: one annotation list per scene");
  Rng rng(derive_seed(seed, "detector-train"));
  model.params.reset_momentum();
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<int> idx;
    for (int k = 0; k < cfg.scenes_per_step; ++k)
      idx.push_back(rng.uniform_int(0, static_cast<int>(scenes.size()) - 1));
    SourceBatch batch = sample_source_batch(scenes, annotations, idx, oracle, model, cfg, rng);

    Tape tape;
    Binding binding = model.params.bind(tape);
    SourceLosses losses = build_source_losses(tape, binding, model, batch);
    double total = tape.scalar_of(losses.total);
    if (!std::isfinite(total)) throw TrainingDivergence("detector loss diverged", step);
    if (curve) curve->total.push_back(total);
    tape.backward(losses.total);
    try {
      ad::sgd_step(model.params, binding, cfg.lr);
    } catch (const ad::NonFiniteGradient& e) {
      throw TrainingDivergence(std::string("detector: ") + e.what(), step);
    }
  }
}

void train_on_scenes(DetectorModel& model, const std::vector<Scene>& scenes,
                     const FeatureOracle& oracle, const DetectorConfig& cfg,
                     std::uint64_t seed, TrainCurve* curve) {
  std::vector<std::vector<ObjectInstance>> annotations;
  annotations.reserve(scenes.size());
  for (const auto& s : scenes) annotations.push_back(s.objects);
  train_on_annotations(model, scenes, annotations, oracle, cfg, seed, curve);
}

DetectorModel pretrain_source(const std::vector<Scene>& scenes, const FeatureOracle& oracle,
                              int n_classes, const DetectorConfig& cfg, std::uint64_t seed,
                              TrainCurve* curve) {
  if (scenes.empty()) throw std::invalid_argument("pretrain_source: empty scene list");
  DetectorModel model = DetectorModel::create(n_classes, oracle.d_feat(), cfg, seed);
  train_on_scenes(model, scenes, oracle, cfg, seed, curve);
  return model;
}

void train_target(DetectorModel& model, const std::vector<Proposal>& proposals,
                  const std::vector<Scene>& target_scenes, const FeatureOracle& oracle,
                  const TargetTrainConfig& cfg, std::uint64_t seed, TrainCurve* curve) {
  if (proposals.empty()) return;

  std::unordered_map<int, const Scene*> by_id;
  for (const auto& s : target_scenes) by_id[s.id] = &s;

  struct Row {
    Eigen::VectorXd det_feat;
    int label;
    bool fg;
    Eigen::VectorXd reg_feat;
    Offsets target;
  };
  std::vector<Row> rows;
  rows.reserve(proposals.size());
  for (const auto& p : proposals) {
    if (!p.y_cls) throw std::invalid_argument("train_target: proposal lacks y_cls");
    auto it = by_id.find(p.scene_id);
    if (it == by_id.end())
      throw std::invalid_argument("train_target: unknown scene id " + std::to_string(p.scene_id));
    const Scene& scene = *it->second;
    Row r;
    r.det_feat = oracle.crop_feature(scene, p.b_det);
    r.label = *p.y_cls;
    r.fg = !cfg.classification_only && is_foreground(r.label, model.n_classes);
    if (r.fg) {
      if (!p.b_reg) throw std::invalid_argument("train_target: foreground proposal lacks b_reg");
      if (p.b_reg->area() <= 0.0 || p.b_det.area() <= 0.0) continue;
      r.reg_feat = oracle.crop_feature(scene, *p.b_reg);
      r.target = encode_offsets(p.b_det, *p.b_reg);
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) return;

  Rng rng(derive_seed(seed, "target-train"));
  model.params.reset_momentum();
  ad::SgdHyper saved = model.params.hyper;
  model.params.hyper.momentum = cfg.momentum;

  for (int step = 0; step < cfg.steps; ++step) {
    TargetBatch batch;
    std::vector<Eigen::VectorXd> det_rows, reg_rows, fg_det_rows;
    std::vector<Offsets> fg_targets;
    int n = std::min<int>(cfg.batch, static_cast<int>(rows.size()));
    for (int k = 0; k < n; ++k) {
      const Row& r = rows[static_cast<std::size_t>(
          rng.uniform_int(0, static_cast<int>(rows.size()) - 1))];
      det_rows.push_back(r.det_feat);
      batch.labels.push_back(r.label);
      if (r.fg) {
        reg_rows.push_back(r.reg_feat);
        batch.fg_labels.push_back(r.label);
        fg_det_rows.push_back(r.det_feat);
        fg_targets.push_back(r.target);
      }
    }
    batch.det_feats = rows_to_matrix(det_rows);
    batch.reg_feats = rows_to_matrix(reg_rows);
    batch.fg_det_feats = rows_to_matrix(fg_det_rows);
    batch.fg_targets = offsets_to_matrix(fg_targets);

    Tape tape;
    Binding binding = model.params.bind(tape);
    TargetLosses losses = build_target_losses(tape, binding, model, batch);
    double total = tape.scalar_of(losses.total);
    if (!std::isfinite(total)) {
      model.params.hyper = saved;
      throw TrainingDivergence("target training diverged", step);
    }
    if (curve) curve->total.push_back(total);
    tape.backward(losses.total);
    try {
      ad::sgd_step(model.params, binding, cfg.lr);
    } catch (const ad::NonFiniteGradient& e) {
      model.params.hyper = saved;
      throw TrainingDivergence(std::string("target training: ") + e.what(), step);
    }
  }
  model.params.hyper = saved;
}

// ---- inference ---------------------------------------------------------

std::vector<int> nms_keep(const std::vector<Box>& boxes, const std::vector<double>& scores,
                          double iou_thresh) {
  std::vector<int> order(boxes.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] != scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
    return a < b;
  });
  std::vector<int> keep;
  std::vector<bool> removed(boxes.size(), false);
  for (int i : order) {
    if (removed[static_cast<std::size_t>(i)]) continue;
    keep.push_back(i);
    for (int j : order) {
      if (j == i || removed[static_cast<std::size_t>(j)]) continue;
      if (iou(boxes[static_cast<std::size_t>(i)], boxes[static_cast<std::size_t>(j)]) > iou_thresh)
        removed[static_cast<std::size_t>(j)] = true;
    }
  }
  return keep;
}

namespace {

struct ScoredBox {
  Box proposal;  // anchor-stage refined box; what adaptors consume
  Box final_box; // proposal-stage refined box; what detection reports
  int cls;
  double score;
  int anchor_index;
};

// Two-stage scoring. Stage one reads the anchor crop: objectness plus a
// coarse class pick that selects the refinement channel, giving the
// proposal box. Stage two reads the proposal crop: the reported class,
// the confidence (objectness x max class probability) and the final
// regression, matching the crops the pseudo-label losses train on.
std::vector<ScoredBox> score_scene(const DetectorModel& model, const Scene& scene,
                                   const FeatureOracle& oracle) {
  auto anchors = make_anchors(scene.width, scene.height, model.anchor_cfg);
  const long n = static_cast<long>(anchors.size());
  Matrix feats(n, model.d_feat);
  for (long a = 0; a < n; ++a)
    feats.row(a) = oracle.crop_feature(scene, anchors[static_cast<std::size_t>(a)]);

  Tape tape;
  Binding binding = model.params.bind(tape);
  Value x = tape.leaf(feats);
  Matrix obj = tape.data(ad::sigmoid(model.obj_head.forward(tape, binding, x)));
  Matrix coarse = ad::softmax_rows(tape.data(model.cls_head.forward(tape, binding, x)));
  Matrix reg = tape.data(model.reg_head.forward(tape, binding, x));

  std::vector<Box> proposals(anchors.size());
  for (long a = 0; a < n; ++a) {
    int y = 0;
    for (long c = 1; c < coarse.cols(); ++c)
      if (coarse(a, c) > coarse(a, y)) y = static_cast<int>(c);
    Box p = anchors[static_cast<std::size_t>(a)];
    if (is_foreground(y, model.n_classes)) {
      Offsets t{reg(a, 4 * y + 0), reg(a, 4 * y + 1), reg(a, 4 * y + 2), reg(a, 4 * y + 3)};
      Box refined = decode_offsets(p, t, scene.width, scene.height);
      if (refined.area() > 0.0) p = refined;
    }
    proposals[static_cast<std::size_t>(a)] = p;
  }

  Matrix pfeats(n, model.d_feat);
  for (long a = 0; a < n; ++a)
    pfeats.row(a) = oracle.crop_feature(scene, proposals[static_cast<std::size_t>(a)]);
  Value px = tape.leaf(pfeats);
  Matrix probs = ad::softmax_rows(tape.data(model.cls_head.forward(tape, binding, px)));
  Matrix preg = tape.data(model.reg_head.forward(tape, binding, px));

  std::vector<ScoredBox> out;
  out.reserve(anchors.size());
  for (long a = 0; a < n; ++a) {
    int y = 0;
    double best = probs(a, 0);
    for (long c = 1; c < probs.cols(); ++c)
      if (probs(a, c) > best) {
        best = probs(a, c);
        y = static_cast<int>(c);
      }
    ScoredBox sb;
    sb.cls = y;
    sb.score = obj(a, 0) * best;
    sb.anchor_index = static_cast<int>(a);
    sb.proposal = proposals[static_cast<std::size_t>(a)];
    sb.final_box = sb.proposal;
    if (is_foreground(y, model.n_classes)) {
      Offsets t{preg(a, 4 * y + 0), preg(a, 4 * y + 1), preg(a, 4 * y + 2), preg(a, 4 * y + 3)};
      Box refined = decode_offsets(sb.proposal, t, scene.width, scene.height);
      if (refined.area() > 0.0) sb.final_box = refined;
    }
    out.push_back(sb);
  }
  return out;
}

// Class-wise NMS keeping deterministic order (score desc, anchor asc).
template <typename BoxOf>
std::vector<ScoredBox> classwise_nms(const std::vector<ScoredBox>& boxes, double nms_iou,
                                     int n_classes_incl_bg, BoxOf box_of) {
  std::vector<ScoredBox> kept;
  for (int c = 0; c < n_classes_incl_bg; ++c) {
    std::vector<Box> cb;
    std::vector<double> cs;
    std::vector<const ScoredBox*> refs;
    for (const auto& b : boxes)
      if (b.cls == c) {
        cb.push_back(box_of(b));
        cs.push_back(b.score);
        refs.push_back(&b);
      }
    for (int k : nms_keep(cb, cs, nms_iou)) kept.push_back(*refs[static_cast<std::size_t>(k)]);
  }
  std::stable_sort(kept.begin(), kept.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor_index < b.anchor_index;
  });
  return kept;
}

}  // namespace

std::vector<Proposal> propose(const DetectorModel& model, const std::vector<Scene>& scenes,
                              const FeatureOracle& oracle, int top_n, double nms_iou) {
  std::vector<Proposal> props;
  if (top_n <= 0) return props;
  for (const auto& scene : scenes) {
    auto kept = classwise_nms(score_scene(model, scene, oracle), nms_iou, model.n_classes + 1,
                              [](const ScoredBox& b) { return b.proposal; });
    int n = std::min<int>(top_n, static_cast<int>(kept.size()));
    for (int i = 0; i < n; ++i) {
      Proposal p;
      p.scene_id = scene.id;
      p.b_det = kept[static_cast<std::size_t>(i)].proposal;
      p.y_det = kept[static_cast<std::size_t>(i)].cls;
      p.c_det = kept[static_cast<std::size_t>(i)].score;
      props.push_back(p);
    }
  }
  return props;
}

void label_source_proposals(std::vector<Proposal>& proposals,
                            const std::vector<Scene>& scenes, int n_classes) {
  std::unordered_map<int, const Scene*> by_id;
  for (const auto& s : scenes) by_id[s.id] = &s;
  for (auto& p : proposals) {
    auto it = by_id.find(p.scene_id);
    if (it == by_id.end())
      throw std::invalid_argument("label_source_proposals: unknown scene id " +
                                  std::to_string(p.scene_id));
    const Scene& scene = *it->second;
    double best = 0.0;
    const ObjectInstance* best_obj = nullptr;
    for (const auto& obj : scene.objects) {
      double v = iou(p.b_det, obj.box);
      if (v > best) {
        best = v;
        best_obj = &obj;
      }
    }
    p.max_iou = best;
    if (best >= 0.5 && best_obj) {
      p.y_gt = best_obj->cls;
      p.b_gt = best_obj->box;
    } else {
      p.y_gt = n_classes;  // background
      p.b_gt = std::nullopt;
    }
  }
}

std::vector<DetectionResult> detect(const DetectorModel& model,
                                    const std::vector<Scene>& scenes,
                                    const FeatureOracle& oracle, double score_thresh,
                                    double nms_iou) {
  std::vector<DetectionResult> out;
  for (const auto& scene : scenes) {
    auto kept = classwise_nms(score_scene(model, scene, oracle), nms_iou, model.n_classes + 1,
                              [](const ScoredBox& b) { return b.final_box; });
    for (const auto& b : kept) {
      if (!is_foreground(b.cls, model.n_classes)) continue;
      if (b.score < score_thresh) continue;
      out.push_back(DetectionResult{scene.id, b.final_box, b.cls, b.score});
    }
  }
  std::stable_sort(out.begin(), out.end(), [](const DetectionResult& a, const DetectionResult& b) {
    return a.score > b.score;
  });
  return out;
}

// ---- persistence -------------------------------------------------------

namespace {

nlohmann::ordered_json box_to_json(const Box& b) {
  return nlohmann::ordered_json{{"x1", b.x1}, {"y1", b.y1}, {"x2", b.x2}, {"y2", b.y2}};
}

Box box_from_json(const nlohmann::json& j) {
  return Box{j.at("x1").get<double>(), j.at("y1").get<double>(), j.at("x2").get<double>(),
             j.at("y2").get<double>()};
}

}  // namespace

std::string proposal_to_json_line(const Proposal& p) {
  nlohmann::ordered_json j;
  j["scene_id"] = p.scene_id;
  j["box"] = box_to_json(p.b_det);
  j["y_det"] = p.y_det;
  j["c_det"] = p.c_det;
  if (p.y_gt) j["y_gt"] = *p.y_gt;
  if (p.b_gt) j["b_gt"] = box_to_json(*p.b_gt);
  if (p.max_iou) j["max_iou"] = *p.max_iou;
  if (p.y_cls) j["y_cls"] = *p.y_cls;
  if (p.b_reg) j["b_reg"] = box_to_json(*p.b_reg);
  return j.dump();
}

Proposal proposal_from_json_line(const std::string& line) {
  nlohmann::json j = nlohmann::json::parse(line);
  Proposal p;
  p.scene_id = j.at("scene_id").get<int>();
  p.b_det = box_from_json(j.at("box"));
  p.y_det = j.at("y_det").get<int>();
  p.c_det = j.at("c_det").get<double>();
  if (j.contains("y_gt")) p.y_gt = j.at("y_gt").get<int>();
  if (j.contains("b_gt")) p.b_gt = box_from_json(j.at("b_gt"));
  if (j.contains("max_iou")) p.max_iou = j.at("max_iou").get<double>();
  if (j.contains("y_cls")) p.y_cls = j.at("y_cls").get<int>();
  if (j.contains("b_reg")) p.b_reg = box_from_json(j.at("b_reg"));
  return p;
}

void save_proposals(const std::vector<Proposal>& props, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write proposals '" + path + "'");
  for (const auto& p : props) out << proposal_to_json_line(p) << "\n";
}

std::vector<Proposal> load_proposals(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read proposals '" + path + "'");
  std::vector<Proposal> props;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    props.push_back(proposal_from_json_line(line));
  }
  return props;
}

}  // namespace dadapt
