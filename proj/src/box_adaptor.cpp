#include "dadapt/box_adaptor.hpp"

#include <cmath>

#include "dadapt/cat_adaptor.hpp"
#include "dadapt/errors.hpp"

namespace dadapt {

using ad::Binding;
using ad::Matrix;
using ad::Tape;
using ad::Value;

BoxAdaptor BoxAdaptor::create(int n_classes, int d_feat, const BoxAdaptorConfig& cfg,
                              std::uint64_t seed) {
  BoxAdaptor a;
  a.n_classes = n_classes;
  a.d_feat = d_feat;
  a.hidden = cfg.hidden;
  a.eta_coeff = cfg.eta_coeff;
  a.params.hyper.momentum = cfg.momentum;
  Rng rng(derive_seed(seed, "box-adaptor-init"));
  a.feature_net = ad::Mlp::create(a.params, "box.F", {d_feat, cfg.hidden, cfg.hidden}, rng);
  a.regressor = ad::Mlp::create(a.params, "box.G", {cfg.hidden, 4 * n_classes}, rng);
  a.adversary = ad::Mlp::create(a.params, "box.Gadv", {cfg.hidden, 4 * n_classes}, rng);
  a.sync_adversary_from_regressor();
  return a;
}

void BoxAdaptor::sync_adversary_from_regressor() {
  for (std::size_t l = 0; l < regressor.w_idx.size(); ++l) {
    params.value(adversary.w_idx[l]) = params.value(regressor.w_idx[l]);
    params.value(adversary.b_idx[l]) = params.value(regressor.b_idx[l]);
  }
}

Matrix BoxAdaptor::predict_offsets(const Matrix& feats, const std::vector<int>& classes) const {
  Matrix all = regressor.infer(params, feature_net.infer(params, feats));
  Matrix out(all.rows(), 4);
  for (long i = 0; i < all.rows(); ++i)
    out.row(i) = all.block(i, 4 * classes[static_cast<std::size_t>(i)], 1, 4);
  return out;
}

namespace {

// Offset disagreements beyond this bound stop rewarding the adversary;
// an unbounded max player otherwise drifts without limit.
constexpr double kDisparityBound = 1.0;

Value disparity_term(Tape& tape, const Binding& binding, const BoxAdaptor& adaptor, Value feats,
                     const std::vector<int>& classes, const Matrix& main_pred) {
  Value adv_out = adaptor.adversary.forward(tape, binding, feats);
  Value sel = ad::select_channels(adv_out, classes, 4);
  Value diff = ad::clamp_sym(ad::sub(sel, tape.leaf(main_pred)), kDisparityBound);
  return ad::mean_row_sums(ad::smooth_l1(diff));
}

}  // namespace

BoxLosses build_box_losses(Tape& tape, const Binding& binding, const BoxAdaptor& adaptor,
                           const BoxBatch& batch, double eta, bool wired) {
  const long ns = batch.src_feats.rows();
  const long nt = batch.tgt_feats.rows();
  if (ns == 0 || nt == 0)
    throw std::invalid_argument("box losses: batch must contain both domains");

  Value f_src = adaptor.feature_net.forward(tape, binding, tape.leaf(batch.src_feats));
  Value f_tgt = adaptor.feature_net.forward(tape, binding, tape.leaf(batch.tgt_feats));

  BoxLosses out;
  Value reg_out = adaptor.regressor.forward(tape, binding, f_src);
  Value reg_sel = ad::select_channels(reg_out, batch.src_classes, 4);
  out.src_reg =
      ad::mean_row_sums(ad::smooth_l1(ad::sub(reg_sel, tape.leaf(batch.src_targets))));

  Value f_src_adv = wired ? ad::grad_reverse(f_src, eta) : f_src;
  Value f_tgt_adv = wired ? ad::grad_reverse(f_tgt, eta) : f_tgt;
  out.disp_src =
      disparity_term(tape, binding, adaptor, f_src_adv, batch.src_classes, batch.src_main_pred);
  out.disp_tgt =
      disparity_term(tape, binding, adaptor, f_tgt_adv, batch.tgt_classes, batch.tgt_main_pred);
  out.adv = ad::sub(out.disp_tgt, out.disp_src);

  if (wired) {
    out.total = ad::add(out.src_reg, ad::scale(out.adv, -1.0));
  } else {
    out.total = ad::add(out.src_reg, ad::scale(out.adv, eta));
  }
  return out;
}

BoxAdaptor train_box_adaptor(const BoxTrainData& data, const BoxAdaptorConfig& cfg,
                             std::uint64_t seed, BoxTrainStats* stats) {
  if (data.src_feats.rows() == 0 || data.tgt_feats.rows() == 0)
    throw std::invalid_argument("train_box_adaptor: both foreground sets required");
  if (static_cast<long>(data.src_classes.size()) != data.src_feats.rows() ||
      data.src_targets.rows() != data.src_feats.rows())
    throw std::invalid_argument("train_box_adaptor: source rows misaligned");
  if (static_cast<long>(data.tgt_classes.size()) != data.tgt_feats.rows())
    throw std::invalid_argument("train_box_adaptor: target rows misaligned");

  BoxAdaptor adaptor =
      BoxAdaptor::create(data.n_classes, static_cast<int>(data.src_feats.cols()), cfg, seed);
  Rng rng(derive_seed(seed, "box-adaptor-train"));
  const int bs = cfg.batch_per_domain;

  for (int step = 0; step < cfg.steps; ++step) {
    BoxBatch batch;
    batch.src_feats.resize(bs, adaptor.d_feat);
    batch.src_targets.resize(bs, 4);
    batch.tgt_feats.resize(bs, adaptor.d_feat);
    for (int i = 0; i < bs; ++i) {
      long a = rng.uniform_int(0, static_cast<int>(data.src_feats.rows()) - 1);
      long b = rng.uniform_int(0, static_cast<int>(data.tgt_feats.rows()) - 1);
      batch.src_feats.row(i) = data.src_feats.row(a);
      batch.src_classes.push_back(data.src_classes[static_cast<std::size_t>(a)]);
      batch.src_targets.row(i) = data.src_targets.row(a);
      batch.tgt_feats.row(i) = data.tgt_feats.row(b);
      batch.tgt_classes.push_back(data.tgt_classes[static_cast<std::size_t>(b)]);
    }

    double progress = cfg.steps > 1 ? static_cast<double>(step) / (cfg.steps - 1) : 1.0;
    double eta = cfg.eta_coeff * (cfg.grl_warmup ? grl_ramp(progress) : 1.0);

    Tape tape;
    Binding binding = adaptor.params.bind(tape);
    Value total;
    double src_val, dsrc_val = 0.0, dtgt_val = 0.0;
    if (cfg.use_dd) {
      batch.src_main_pred = adaptor.predict_offsets(batch.src_feats, batch.src_classes);
      batch.tgt_main_pred = adaptor.predict_offsets(batch.tgt_feats, batch.tgt_classes);
      BoxLosses losses = build_box_losses(tape, binding, adaptor, batch, eta, true);
      total = losses.total;
      src_val = tape.scalar_of(losses.src_reg);
      dsrc_val = tape.scalar_of(losses.disp_src);
      dtgt_val = tape.scalar_of(losses.disp_tgt);
    } else {
      Value f = adaptor.feature_net.forward(tape, binding, tape.leaf(batch.src_feats));
      Value sel =
          ad::select_channels(adaptor.regressor.forward(tape, binding, f), batch.src_classes, 4);
      total = ad::mean_row_sums(ad::smooth_l1(ad::sub(sel, tape.leaf(batch.src_targets))));
      src_val = tape.scalar_of(total);
    }
    if (!std::isfinite(tape.scalar_of(total)))
      throw TrainingDivergence("box adaptor diverged", step);
    if (stats) {
      stats->src_reg_curve.push_back(src_val);
      stats->disp_src_curve.push_back(dsrc_val);
      stats->disp_tgt_curve.push_back(dtgt_val);
    }
    tape.backward(total);
    try {
      ad::sgd_step(adaptor.params, binding, cfg.lr);
    } catch (const ad::NonFiniteGradient& e) {
      throw TrainingDivergence(std::string("box adaptor: ") + e.what(), step);
    }
  }
  return adaptor;
}

std::vector<PseudoBox> pseudo_label_boxes(const BoxAdaptor& adaptor, const Matrix& feats,
                                          const std::vector<int>& classes,
                                          const std::vector<Box>& det_boxes, double scene_w,
                                          double scene_h) {
  if (feats.rows() != static_cast<long>(classes.size()) ||
      feats.rows() != static_cast<long>(det_boxes.size()))
    throw std::invalid_argument("pseudo_label_boxes: row count mismatch");
  Matrix offsets = adaptor.predict_offsets(feats, classes);
  std::vector<PseudoBox> out;
  out.reserve(det_boxes.size());
  for (long i = 0; i < offsets.rows(); ++i) {
    PseudoBox pb;
    const Box& det = det_boxes[static_cast<std::size_t>(i)];
    Offsets t{offsets(i, 0), offsets(i, 1), offsets(i, 2), offsets(i, 3)};
    Box decoded = decode_offsets(det, t, scene_w, scene_h);
    if (decoded.width() <= 0.0 || decoded.height() <= 0.0) {
      pb.box = det;
      pb.fell_back = true;
    } else {
      pb.box = decoded;
    }
    out.push_back(pb);
  }
  return out;
}

}  // namespace dadapt
