#include "dadapt/cat_adaptor.hpp"

#include <cmath>

#include "dadapt/errors.hpp"

namespace dadapt {

using ad::Binding;
using ad::Matrix;
using ad::Tape;
using ad::Value;

CatAdaptor CatAdaptor::create(int n_classes, int d_feat, const CatAdaptorConfig& cfg,
                              std::uint64_t seed) {
  CatAdaptor a;
  a.n_classes = n_classes;
  a.d_feat = d_feat;
  a.hidden = cfg.hidden;
  a.use_condition = cfg.use_condition;
  a.lambda_coeff = cfg.lambda_coeff;
  a.params.hyper.momentum = cfg.momentum;
  Rng rng(derive_seed(seed, "cat-adaptor-init"));
  a.feature_net = ad::Mlp::create(a.params, "cat.F", {d_feat, cfg.hidden, cfg.hidden}, rng);
  a.classifier = ad::Mlp::create(a.params, "cat.G", {cfg.hidden, n_classes + 1}, rng);
  int d_in = cfg.use_condition ? cfg.hidden + n_classes + 1 : cfg.hidden;
  a.discriminator = ad::Mlp::create(a.params, "cat.D", {d_in, cfg.hidden, cfg.hidden, 1}, rng);
  return a;
}

Matrix CatAdaptor::predict_probs(const Matrix& feats) const {
  return ad::softmax_rows(classifier.infer(params, feature_net.infer(params, feats)));
}

CatLosses build_cat_losses(Tape& tape, const Binding& binding, const CatAdaptor& adaptor,
                           const CatBatch& batch, double lambda, bool wired) {
  const long ns = batch.src_feats.rows();
  const long nt = batch.tgt_feats.rows();
  if (ns == 0 || nt == 0)
    throw std::invalid_argument("cat losses: batch must contain both domains");

  // One pass through F over the stacked batch; source rows first.
  Matrix stacked(ns + nt, batch.src_feats.cols());
  stacked << batch.src_feats, batch.tgt_feats;
  Value f = adaptor.feature_net.forward(tape, binding, tape.leaf(stacked));

  Value logits_src =
      adaptor.classifier.forward(tape, binding, ad::slice_rows(f, 0, static_cast<int>(ns)));
  CatLosses out;
  out.ce = ad::cross_entropy(logits_src, batch.src_labels);

  // Conditional discriminator input: features (reversed when wired)
  // joined with the detached class predictions.
  Value f_for_d = wired ? ad::grad_reverse(f, lambda) : f;
  Value d_in = f_for_d;
  if (adaptor.use_condition) {
    Matrix probs(ns + nt, batch.src_probs.cols());
    probs << batch.src_probs, batch.tgt_probs;
    d_in = ad::concat_cols(f_for_d, tape.leaf(probs));
  }
  Value d_out = ad::sigmoid(adaptor.discriminator.forward(tape, binding, d_in));

  std::vector<std::uint8_t> is_source(static_cast<std::size_t>(ns + nt), 0);
  for (long i = 0; i < ns; ++i) is_source[static_cast<std::size_t>(i)] = 1;
  Eigen::VectorXd weights(ns + nt);
  weights << batch.src_weights, batch.tgt_weights;
  out.adv = ad::weighted_bce(d_out, is_source, weights);

  if (wired) {
    out.total = ad::add(out.ce, ad::scale(out.adv, -1.0));
  } else {
    out.total = ad::add(out.ce, ad::scale(out.adv, lambda));
  }
  return out;
}

CatAdaptor train_category_adaptor(const CatTrainData& data, const CatAdaptorConfig& cfg,
                                  std::uint64_t seed, CatTrainStats* stats) {
  if (data.src_feats.rows() == 0 || data.tgt_feats.rows() == 0)
    throw std::invalid_argument("train_category_adaptor: both domains required");
  if (static_cast<long>(data.src_labels.size()) != data.src_feats.rows())
    throw std::invalid_argument("train_category_adaptor: source labels missing");
  if (data.src_weights.size() != data.src_feats.rows() ||
      data.tgt_weights.size() != data.tgt_feats.rows())
    throw std::invalid_argument("train_category_adaptor: weight vectors misaligned");

  CatAdaptor adaptor = CatAdaptor::create(data.n_classes,
                                          static_cast<int>(data.src_feats.cols()), cfg, seed);
  Rng rng(derive_seed(seed, "cat-adaptor-train"));
  const int bs = cfg.batch_per_domain;
  const long ns_all = data.src_feats.rows();
  const long nt_all = data.tgt_feats.rows();

  for (int step = 0; step < cfg.steps; ++step) {
    CatBatch batch;
    batch.src_feats.resize(bs, adaptor.d_feat);
    batch.tgt_feats.resize(bs, adaptor.d_feat);
    batch.src_weights.resize(bs);
    batch.tgt_weights.resize(bs);
    for (int i = 0; i < bs; ++i) {
      long a = rng.uniform_int(0, static_cast<int>(ns_all) - 1);
      long b = rng.uniform_int(0, static_cast<int>(nt_all) - 1);
      batch.src_feats.row(i) = data.src_feats.row(a);
      batch.src_labels.push_back(data.src_labels[static_cast<std::size_t>(a)]);
      batch.src_weights(i) = data.src_weights(a);
      batch.tgt_feats.row(i) = data.tgt_feats.row(b);
      batch.tgt_weights(i) = data.tgt_weights(b);
    }

    bool all_zero = batch.src_weights.isZero(0.0) && batch.tgt_weights.isZero(0.0);
    double progress = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 1.0;
    double lambda = cfg.lambda_coeff * (cfg.grl_warmup ? grl_ramp(progress) : 1.0);

    Tape tape;
    Binding binding = adaptor.params.bind(tape);
    double ce_val, adv_val = 0.0;
    Value total;
    if (all_zero) {
      // adversarial term carries no signal this batch; train on source only
      if (stats) ++stats->skipped_adv_batches;
      Value f = adaptor.feature_net.forward(tape, binding, tape.leaf(batch.src_feats));
      Value logits = adaptor.classifier.forward(tape, binding, f);
      total = ad::cross_entropy(logits, batch.src_labels);
      ce_val = tape.scalar_of(total);
    } else {
      batch.src_probs = adaptor.predict_probs(batch.src_feats);
      batch.tgt_probs = adaptor.predict_probs(batch.tgt_feats);
      CatLosses losses = build_cat_losses(tape, binding, adaptor, batch, lambda, true);
      total = losses.total;
      ce_val = tape.scalar_of(losses.ce);
      adv_val = tape.scalar_of(losses.adv);
    }
    if (!std::isfinite(tape.scalar_of(total)))
      throw TrainingDivergence("category adaptor diverged", step);
    if (stats) {
      stats->ce_curve.push_back(ce_val);
      stats->adv_curve.push_back(adv_val);
    }
    tape.backward(total);
    try {
      ad::sgd_step(adaptor.params, binding, cfg.lr);
    } catch (const ad::NonFiniteGradient& e) {
      throw TrainingDivergence(std::string("category adaptor: ") + e.what(), step);
    }
  }
  return adaptor;
}

std::vector<int> pseudo_label_categories(const CatAdaptor& adaptor, const Matrix& feats) {
  Matrix logits = adaptor.classifier.infer(adaptor.params, adaptor.feature_net.infer(adaptor.params, feats));
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(logits.rows()));
  for (long i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (long c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = static_cast<int>(c);
    labels.push_back(best);
  }
  return labels;
}

}  // namespace dadapt
