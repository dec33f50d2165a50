#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dadapt/autodiff.hpp"
#include "dadapt/eval.hpp"
#include "dadapt/geometry.hpp"
#include "dadapt/synthworld.hpp"

namespace dadapt {

struct AnchorGridConfig {
  double stride = 8.0;
  std::vector<double> scales = {12.0, 18.0};
};

// Square anchors centered on a regular grid, clipped to the scene.
std::vector<Box> make_anchors(double scene_w, double scene_h, const AnchorGridConfig& cfg);

struct DetectorConfig {
  AnchorGridConfig anchors;
  int hidden = 32;
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 0.0;
  int steps = 2000;
  int scenes_per_step = 2;
  int max_pos_anchors = 16;   // per scene, objectness batch balance
  int max_neg_anchors = 16;
  int roi_jitter_per_object = 3;
  int roi_random = 4;
};

// Three MLP heads over crop features: objectness, classification over
// n_classes+1 (background last), class-specific box regression.
struct DetectorModel {
  int n_classes = 3;
  int d_feat = 16;
  AnchorGridConfig anchor_cfg;
  ad::ParamStore params;
  ad::Mlp obj_head, cls_head, reg_head;

  static DetectorModel create(int n_classes, int d_feat, const DetectorConfig& cfg,
                              std::uint64_t seed);
  int background_class() const { return n_classes; }
};

struct Proposal {
  int scene_id = 0;
  Box b_det;
  int y_det = 0;
  double c_det = 0.0;
  std::optional<int> y_gt;        // source proposals, after labeling
  std::optional<Box> b_gt;        // present iff y_gt is foreground
  std::optional<double> max_iou;  // source proposals, after labeling
  std::optional<int> y_cls;       // category pseudo label
  std::optional<Box> b_reg;       // box pseudo label
};

// ---- Eq-style loss builders (tape graphs, finite-difference checkable) --

struct SourceBatch {
  ad::Matrix anchor_feats;        // [Na x d_feat]
  std::vector<double> anchor_obj; // 0/1 targets, one per row
  ad::Matrix pos_anchor_feats;    // [Np x d_feat]
  std::vector<int> pos_anchor_cls;
  ad::Matrix pos_anchor_targets;  // [Np x 4]
  ad::Matrix roi_feats;           // [Nr x d_feat]
  std::vector<int> roi_labels;    // in [0, n_classes]
  ad::Matrix roi_fg_feats;        // [Nf x d_feat]
  std::vector<int> roi_fg_cls;
  ad::Matrix roi_fg_targets;      // [Nf x 4]
};

struct SourceLosses {
  ad::Value rpn_cls, rpn_reg, roi_cls, roi_reg, total;
};

SourceLosses build_source_losses(ad::Tape& tape, const ad::Binding& binding,
                                 const DetectorModel& model, const SourceBatch& batch);

// Annotations are the boxes/classes to train against; features always
// come from the scene itself. annotations[i] belongs to scenes[i];
// appearance fields are ignored.
SourceBatch sample_source_batch(const std::vector<Scene>& scenes,
                                const std::vector<std::vector<ObjectInstance>>& annotations,
                                const std::vector<int>& scene_indices,
                                const FeatureOracle& oracle, const DetectorModel& model,
                                const DetectorConfig& cfg, Rng& rng);

struct TargetBatch {
  ad::Matrix det_feats;        // [N x d_feat], crops at b_det
  std::vector<int> labels;     // y_cls per row
  ad::Matrix reg_feats;        // [Nf x d_feat], crops at b_reg
  std::vector<int> fg_labels;
  ad::Matrix fg_det_feats;     // [Nf x d_feat], crops at b_det, fg rows
  ad::Matrix fg_targets;       // offsets b_det -> b_reg, [Nf x 4]
};

struct TargetLosses {
  ad::Value cls_det, cls_reg, reg, total;
};

// Classification at the detected and pseudo-box crops plus
// foreground-gated regression toward the pseudo box. Losses touch only
// proposal locations; anchors contribute nothing here.
TargetLosses build_target_losses(ad::Tape& tape, const ad::Binding& binding,
                                 const DetectorModel& model, const TargetBatch& batch);

// ---- training ----------------------------------------------------------

struct TrainCurve {
  std::vector<double> total;
};

// Four-loss training (objectness, anchor regression, crop
// classification, crop regression) against the given annotations.
void train_on_annotations(DetectorModel& model, const std::vector<Scene>& scenes,
                          const std::vector<std::vector<ObjectInstance>>& annotations,
                          const FeatureOracle& oracle, const DetectorConfig& cfg,
                          std::uint64_t seed, TrainCurve* curve = nullptr);

// Same, against the scenes' own ground truth.
void train_on_scenes(DetectorModel& model, const std::vector<Scene>& scenes,
                     const FeatureOracle& oracle, const DetectorConfig& cfg,
                     std::uint64_t seed, TrainCurve* curve = nullptr);

DetectorModel pretrain_source(const std::vector<Scene>& scenes, const FeatureOracle& oracle,
                              int n_classes, const DetectorConfig& cfg, std::uint64_t seed,
                              TrainCurve* curve = nullptr);

struct TargetTrainConfig {
  double lr = 0.005;
  double momentum = 0.9;
  int steps = 1000;
  int batch = 32;
  bool classification_only = false;  // drop both pseudo-box terms
};

// Optimizes the pseudo-label objective over target proposals. Every
// proposal must carry y_cls; foreground ones must carry b_reg. Scenes
// are consulted only through the crop oracle.
void train_target(DetectorModel& model, const std::vector<Proposal>& proposals,
                  const std::vector<Scene>& target_scenes, const FeatureOracle& oracle,
                  const TargetTrainConfig& cfg, std::uint64_t seed,
                  TrainCurve* curve = nullptr);

// ---- inference ---------------------------------------------------------

// Kept indices under greedy score-descending suppression at iou_thresh.
std::vector<int> nms_keep(const std::vector<Box>& boxes, const std::vector<double>& scores,
                          double iou_thresh);

std::vector<Proposal> propose(const DetectorModel& model, const std::vector<Scene>& scenes,
                              const FeatureOracle& oracle, int top_n, double nms_iou);

// Max-IoU assignment against scene ground truth: y_gt (background when
// max_iou < 0.5), b_gt for foreground assignments, and max_iou.
void label_source_proposals(std::vector<Proposal>& proposals,
                            const std::vector<Scene>& scenes, int n_classes);

std::vector<DetectionResult> detect(const DetectorModel& model,
                                    const std::vector<Scene>& scenes,
                                    const FeatureOracle& oracle, double score_thresh,
                                    double nms_iou);

bool is_foreground(int label, int n_classes);

// ---- persistence -------------------------------------------------------

std::string proposal_to_json_line(const Proposal& p);
Proposal proposal_from_json_line(const std::string& line);
void save_proposals(const std::vector<Proposal>& props, const std::string& path);
std::vector<Proposal> load_proposals(const std::string& path);

}  // namespace dadapt
