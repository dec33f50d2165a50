#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dadapt/autodiff.hpp"

namespace dadapt {

// w(c): 1 for confidence strictly above the threshold, else 0.
inline int confidence_weight(double c_det, double threshold = 0.5) {
  return c_det > threshold ? 1 : 0;
}

struct CatAdaptorConfig {
  int hidden = 32;
  double lambda_coeff = 1.0;
  bool use_condition = true;  // feed class predictions into the discriminator
  bool grl_warmup = true;     // ramp the reversal coefficient from 0 to lambda
  double lr = 0.01;
  double momentum = 0.9;
  int steps = 2000;
  int batch_per_domain = 32;
};

// 2 / (1 + exp(-10 p)) - 1: the usual reversal warm-up over progress p.
inline double grl_ramp(double progress) {
  return 2.0 / (1.0 + std::exp(-10.0 * progress)) - 1.0;
}

// Classifier trained on source proposal labels with a conditional domain
// discriminator pulling source and target features together. Parameters
// are disjoint from every other model.
struct CatAdaptor {
  int n_classes = 3;
  int d_feat = 16;
  int hidden = 32;
  bool use_condition = true;
  double lambda_coeff = 1.0;
  ad::ParamStore params;
  ad::Mlp feature_net;    // d_feat -> h
  ad::Mlp classifier;     // h -> n_classes + 1
  ad::Mlp discriminator;  // (h + n_classes + 1 | h) -> 1, sigmoid applied by losses

  static CatAdaptor create(int n_classes, int d_feat, const CatAdaptorConfig& cfg,
                           std::uint64_t seed);

  // Row-wise class probabilities of the current classifier.
  ad::Matrix predict_probs(const ad::Matrix& feats) const;
};

struct CatBatch {
  ad::Matrix src_feats;  // [Ns x d_feat]
  ad::Matrix tgt_feats;  // [Nt x d_feat]
  std::vector<int> src_labels;
  Eigen::VectorXd src_weights;
  Eigen::VectorXd tgt_weights;
  // Detached class predictions for the conditional discriminator input,
  // computed from the current parameters before the step.
  ad::Matrix src_probs;
  ad::Matrix tgt_probs;
};

struct CatLosses {
  ad::Value ce;   // source cross-entropy
  ad::Value adv;  // discriminator objective (to be maximized by D)
  ad::Value total;
};

// wired=true builds the single-backward min-max: total = ce - adv with
// the reversal (coefficient lambda) between the features and the
// discriminator. wired=false builds the plain objective ce + lambda*adv
// for derivative checking.
CatLosses build_cat_losses(ad::Tape& tape, const ad::Binding& binding, const CatAdaptor& adaptor,
                           const CatBatch& batch, double lambda, bool wired);

struct CatTrainData {
  int n_classes = 3;
  ad::Matrix src_feats;
  std::vector<int> src_labels;  // in [0, n_classes], background included
  Eigen::VectorXd src_weights;
  ad::Matrix tgt_feats;
  Eigen::VectorXd tgt_weights;
};

struct CatTrainStats {
  std::vector<double> ce_curve;
  std::vector<double> adv_curve;
  int skipped_adv_batches = 0;
};

CatAdaptor train_category_adaptor(const CatTrainData& data, const CatAdaptorConfig& cfg,
                                  std::uint64_t seed, CatTrainStats* stats = nullptr);

// argmax over n_classes+1 outputs per row; ties resolve to the lowest
// class index.
std::vector<int> pseudo_label_categories(const CatAdaptor& adaptor, const ad::Matrix& feats);

}  // namespace dadapt
