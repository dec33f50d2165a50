#pragma once

#include <cstdint>
#include <vector>

#include "dadapt/autodiff.hpp"
#include "dadapt/geometry.hpp"

namespace dadapt {

struct BoxAdaptorConfig {
  int hidden = 32;
  double eta_coeff = 0.1;
  bool use_dd = true;   // false: plain source regression
  bool grl_warmup = true;
  double lr = 0.01;
  double momentum = 0.9;
  int steps = 2000;
  int batch_per_domain = 32;
};

// Class-specific offset regressor with an adversarial twin. The twin is
// pushed apart from the main regressor on target proposals and together
// on source ones; the feature net absorbs the reversed disparity signal.
struct BoxAdaptor {
  int n_classes = 3;
  int d_feat = 16;
  int hidden = 32;
  double eta_coeff = 0.1;
  ad::ParamStore params;
  ad::Mlp feature_net;  // d_feat -> h
  ad::Mlp regressor;    // h -> 4 * n_classes
  ad::Mlp adversary;    // h -> 4 * n_classes, same architecture

  static BoxAdaptor create(int n_classes, int d_feat, const BoxAdaptorConfig& cfg,
                           std::uint64_t seed);

  // Copies the main regressor's weights into the adversary so both
  // disparity terms start at exactly zero.
  void sync_adversary_from_regressor();

  // Offsets of the main regressor at each row's class channel.
  ad::Matrix predict_offsets(const ad::Matrix& feats, const std::vector<int>& classes) const;
};

struct BoxBatch {
  ad::Matrix src_feats;  // [Ns x d_feat], crops at the enlarged detected box
  std::vector<int> src_classes;
  ad::Matrix src_targets;  // ground-truth offsets, [Ns x 4]
  ad::Matrix tgt_feats;    // [Nt x d_feat]
  std::vector<int> tgt_classes;
  // Main-regressor predictions at the class channel, computed before the
  // step; disparity is measured against these fixed values.
  ad::Matrix src_main_pred;  // [Ns x 4]
  ad::Matrix tgt_main_pred;  // [Nt x 4]
};

struct BoxLosses {
  ad::Value src_reg;   // smooth-L1 to ground-truth offsets, y_gt channel
  ad::Value disp_src;  // adversary vs main, source
  ad::Value disp_tgt;  // adversary vs main, target
  ad::Value adv;       // disp_tgt - disp_src (to be maximized by the adversary)
  ad::Value total;
};

// wired=true: total = src_reg - adv with the reversal (coefficient eta)
// between the features and the adversary. wired=false: plain
// src_reg + eta * adv for derivative checking.
BoxLosses build_box_losses(ad::Tape& tape, const ad::Binding& binding, const BoxAdaptor& adaptor,
                           const BoxBatch& batch, double eta, bool wired);

struct BoxTrainData {
  int n_classes = 3;
  ad::Matrix src_feats;
  std::vector<int> src_classes;
  ad::Matrix src_targets;
  ad::Matrix tgt_feats;
  std::vector<int> tgt_classes;
};

struct BoxTrainStats {
  std::vector<double> src_reg_curve;
  std::vector<double> disp_src_curve;
  std::vector<double> disp_tgt_curve;
};

BoxAdaptor train_box_adaptor(const BoxTrainData& data, const BoxAdaptorConfig& cfg,
                             std::uint64_t seed, BoxTrainStats* stats = nullptr);

struct PseudoBox {
  Box box;
  bool fell_back = false;  // degenerate decode, b_det kept instead
};

// Decodes the main regressor's offsets (class channel per row) against
// each detected box, clipping to the scene.
std::vector<PseudoBox> pseudo_label_boxes(const BoxAdaptor& adaptor, const ad::Matrix& feats,
                                          const std::vector<int>& classes,
                                          const std::vector<Box>& det_boxes, double scene_w,
                                          double scene_h);

}  // namespace dadapt
