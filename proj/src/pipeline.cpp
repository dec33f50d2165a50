#include "dadapt/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

#include "dadapt/checkpoint.hpp"
#include "dadapt/errors.hpp"
#include "dadapt/rng.hpp"

namespace dadapt {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---- config ------------------------------------------------------------

void PipelineConfig::validate() const {
  if (rounds < 1) throw ConfigError("pipeline: rounds must be >= 1");
  if (lambda_coeff < 0 || eta_coeff < 0) throw ConfigError("pipeline: coefficients must be >= 0");
  if (weight_threshold < 0 || weight_threshold > 1)
    throw ConfigError("pipeline: weight_threshold out of [0,1]");
  if (enlarge_factor <= 0) throw ConfigError("pipeline: enlarge_factor must be > 0");
  if (top_n < 0) throw ConfigError("pipeline: top_n must be >= 0");
  if (nms_iou < 0 || nms_iou > 1) throw ConfigError("pipeline: nms_iou out of [0,1]");
  if (score_thresh < 0) throw ConfigError("pipeline: score_thresh must be >= 0");
  if (detector_steps < 1 || adaptor_steps < 1 || finetune_steps < 1)
    throw ConfigError("pipeline: step budgets must be >= 1");
  if (detector_lr <= 0 || adaptor_lr <= 0 || finetune_lr <= 0)
    throw ConfigError("pipeline: learning rates must be > 0");
  if (hidden < 1 || batch_per_domain < 1) throw ConfigError("pipeline: sizes must be >= 1");
  if (source_replay < 0 || source_replay > 1)
    throw ConfigError("pipeline: source_replay out of [0,1]");
  if (spl_conf_threshold < 0 || spl_conf_threshold > 1)
    throw ConfigError("pipeline: spl_conf_threshold out of [0,1]");
}

std::string PipelineConfig::to_json() const {
  ordered_json j;
  j["rounds"] = rounds;
  j["lambda_coeff"] = lambda_coeff;
  j["eta_coeff"] = eta_coeff;
  j["weight_threshold"] = weight_threshold;
  j["enlarge_factor"] = enlarge_factor;
  j["top_n"] = top_n;
  j["nms_iou"] = nms_iou;
  j["score_thresh"] = score_thresh;
  j["detector_steps"] = detector_steps;
  j["adaptor_steps"] = adaptor_steps;
  j["finetune_steps"] = finetune_steps;
  j["detector_lr"] = detector_lr;
  j["adaptor_lr"] = adaptor_lr;
  j["finetune_lr"] = finetune_lr;
  j["hidden"] = hidden;
  j["batch_per_domain"] = batch_per_domain;
  j["source_replay"] = source_replay;
  j["spl_conf_threshold"] = spl_conf_threshold;
  j["seed"] = seed;
  j["no_weight"] = ablation.no_weight;
  j["no_condition"] = ablation.no_condition;
  j["no_bg_source"] = ablation.no_bg_source;
  j["no_bg_target"] = ablation.no_bg_target;
  j["no_dd"] = ablation.no_dd;
  j["no_cat_adaptor"] = ablation.no_cat_adaptor;
  j["no_box_adaptor"] = ablation.no_box_adaptor;
  j["coupled_inputs"] = ablation.coupled_inputs;
  j["standard_pseudo_label"] = ablation.standard_pseudo_label;
  return j.dump(2);
}

std::string PipelineConfig::hash_hex() const {
  std::string text = to_json();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

void PipelineConfig::apply_ablation(const std::string& name) {
  if (name == "no_weight")
    ablation.no_weight = true;
  else if (name == "no_condition")
    ablation.no_condition = true;
  else if (name == "no_bg_source")
    ablation.no_bg_source = true;
  else if (name == "no_bg_target")
    ablation.no_bg_target = true;
  else if (name == "no_dd")
    ablation.no_dd = true;
  else if (name == "no_cat_adaptor")
    ablation.no_cat_adaptor = true;
  else if (name == "no_box_adaptor")
    ablation.no_box_adaptor = true;
  else if (name == "coupled_inputs")
    ablation.coupled_inputs = true;
  else if (name == "standard_pseudo_label")
    ablation.standard_pseudo_label = true;
  else
    throw ConfigError("unknown ablation '" + name + "'");
}

PipelineConfig PipelineConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pipeline config: ") + e.what());
  }
  static const std::vector<std::string> known = {
      "rounds",        "lambda_coeff", "eta_coeff",        "weight_threshold",
      "enlarge_factor", "top_n",       "nms_iou",          "score_thresh",
      "detector_steps", "adaptor_steps", "finetune_steps", "detector_lr",
      "adaptor_lr",    "finetune_lr",  "hidden",           "batch_per_domain",
      "source_replay", "spl_conf_threshold", "seed",       "no_weight",
      "no_condition",  "no_bg_source", "no_bg_target",     "no_dd",
      "no_cat_adaptor", "no_box_adaptor", "coupled_inputs", "standard_pseudo_label"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("pipeline config: unknown key '" + it.key() + "'");

  PipelineConfig c;
  auto get = [&](const char* key, auto& out) {
    if (j.contains(key)) out = j.at(key).get<std::decay_t<decltype(out)>>();
  };
  get("rounds", c.rounds);
  get("lambda_coeff", c.lambda_coeff);
  get("eta_coeff", c.eta_coeff);
  get("weight_threshold", c.weight_threshold);
  get("enlarge_factor", c.enlarge_factor);
  get("top_n", c.top_n);
  get("nms_iou", c.nms_iou);
  get("score_thresh", c.score_thresh);
  get("detector_steps", c.detector_steps);
  get("adaptor_steps", c.adaptor_steps);
  get("finetune_steps", c.finetune_steps);
  get("detector_lr", c.detector_lr);
  get("adaptor_lr", c.adaptor_lr);
  get("finetune_lr", c.finetune_lr);
  get("hidden", c.hidden);
  get("batch_per_domain", c.batch_per_domain);
  get("source_replay", c.source_replay);
  get("spl_conf_threshold", c.spl_conf_threshold);
  get("seed", c.seed);
  get("no_weight", c.ablation.no_weight);
  get("no_condition", c.ablation.no_condition);
  get("no_bg_source", c.ablation.no_bg_source);
  get("no_bg_target", c.ablation.no_bg_target);
  get("no_dd", c.ablation.no_dd);
  get("no_cat_adaptor", c.ablation.no_cat_adaptor);
  get("no_box_adaptor", c.ablation.no_box_adaptor);
  get("coupled_inputs", c.ablation.coupled_inputs);
  get("standard_pseudo_label", c.ablation.standard_pseudo_label);
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read pipeline config '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

// ---- internals -----------------------------------------------------------

namespace {

DetectorConfig detector_config_from(const PipelineConfig& cfg) {
  DetectorConfig d;
  d.hidden = cfg.hidden;
  d.lr = cfg.detector_lr;
  d.steps = cfg.detector_steps;
  return d;
}

std::string round_dir_name(const std::string& out_dir, int round) {
  return out_dir + "/round_" + std::to_string(round);
}

std::unordered_map<int, const Scene*> scene_index(const std::vector<Scene>& scenes) {
  std::unordered_map<int, const Scene*> m;
  for (const auto& s : scenes) m[s.id] = &s;
  return m;
}

ad::Matrix crop_features(const std::vector<Proposal>& props,
                         const std::unordered_map<int, const Scene*>& scenes,
                         const FeatureOracle& oracle, double enlarge_factor) {
  ad::Matrix feats(static_cast<long>(props.size()), oracle.d_feat());
  for (std::size_t i = 0; i < props.size(); ++i) {
    const Scene& scene = *scenes.at(props[i].scene_id);
    Box b = props[i].b_det;
    if (enlarge_factor != 1.0) b = enlarge(b, enlarge_factor, scene.width, scene.height);
    feats.row(static_cast<long>(i)) = oracle.crop_feature(scene, b);
  }
  return feats;
}

struct TruthAssignment {
  int cls;  // background when best IoU < 0.5
  const ObjectInstance* best = nullptr;
  double best_iou = 0.0;
};

TruthAssignment assign_truth(const Proposal& p, const Scene& scene, int n_classes) {
  TruthAssignment t;
  t.cls = n_classes;
  for (const auto& obj : scene.objects) {
    double v = iou(p.b_det, obj.box);
    if (v > t.best_iou) {
      t.best_iou = v;
      t.best = &obj;
    }
  }
  if (t.best && t.best_iou >= 0.5) t.cls = t.best->cls;
  return t;
}

// Round metrics: detector quality on the target domain plus
// pseudo-label quality of the round's proposals. Falls back to the
// detector's own predictions when pseudo labels are absent.
MetricsReport compute_metrics(const DetectorModel& model, const Benchmark& bench,
                              const PipelineConfig& cfg,
                              const std::vector<Proposal>& props_src,
                              const std::vector<Proposal>& props_tgt,
                              const std::string& round_dir) {
  const FeatureOracle oracle = bench.oracle();
  const int k = bench.config.n_classes;

  auto detections = detect(model, bench.target, oracle, cfg.score_thresh, cfg.nms_iou);
  auto gts = gather_gt(bench.target);
  EvalSummary summary = evaluate_detections(detections, gts, k, 0.5);

  MetricsReport m;
  m.per_class_ap = summary.per_class_ap;
  m.map = summary.map;
  m.error_breakdown = error_analysis(detections, gts, 0.5);

  auto tgt_scenes = scene_index(bench.target);
  std::vector<int> truth, pred;
  std::vector<Box> pred_boxes, true_boxes;
  for (const auto& p : props_tgt) {
    const Scene& scene = *tgt_scenes.at(p.scene_id);
    TruthAssignment t = assign_truth(p, scene, k);
    int y = p.y_cls ? *p.y_cls : p.y_det;
    truth.push_back(t.cls);
    pred.push_back(y);
    if (is_foreground(y, k) && t.best && t.best_iou > 0.0) {
      pred_boxes.push_back(p.b_reg ? *p.b_reg : p.b_det);
      true_boxes.push_back(t.best->box);
    }
  }
  if (!truth.empty())
    m.miou_cls = miou_cls(ConfusionCounts::from_pairs(truth, pred, k + 1));
  if (!pred_boxes.empty()) m.miou_reg = miou_reg(pred_boxes, true_boxes);

  std::vector<double> ious, confs;
  for (const auto& p : props_src)
    if (p.max_iou) {
      ious.push_back(*p.max_iou);
      confs.push_back(p.c_det);
    }
  Histogram h = iou_histogram(ious, confs, 20, 0.0);
  write_histogram_csv(h, round_dir + "/iou_hist.csv");
  m.histogram_path = "iou_hist.csv";
  return m;
}

double pick_weight(const Proposal& p, const PipelineConfig& cfg) {
  if (cfg.ablation.no_weight) return 1.0;
  return static_cast<double>(confidence_weight(p.c_det, cfg.weight_threshold));
}

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

bool round_complete(const std::string& out_dir, int round) {
  const std::string dir = round_dir_name(out_dir, round);
  return fs::exists(dir + "/detector.ckpt") && fs::exists(dir + "/metrics.json");
}

}  // namespace

DetectorModel load_detector_checkpoint(const std::string& ckpt_path, const Benchmark& bench,
                                       const PipelineConfig& cfg) {
  DetectorModel model = DetectorModel::create(bench.config.n_classes, bench.config.d_feat,
                                              detector_config_from(cfg), cfg.seed);
  load_params(model.params, ckpt_path);
  return model;
}

DetectorModel load_round_detector(const std::string& run_dir, int round,
                                  const Benchmark& bench, const PipelineConfig& cfg) {
  return load_detector_checkpoint(round_dir_name(run_dir, round) + "/detector.ckpt", bench, cfg);
}

RunResult run_dadapt(const PipelineConfig& cfg, const Benchmark& bench,
                     const std::string& out_dir, bool resume) {
  cfg.validate();
  if (bench.source.empty() || bench.target.empty())
    throw ConfigError("run: both domains must contain scenes");
  fs::create_directories(out_dir);
  const FeatureOracle oracle = bench.oracle();
  const int k = bench.config.n_classes;

  {
    const std::string cfg_path = out_dir + "/config.json";
    if (resume && fs::exists(cfg_path)) {
      std::ifstream in(cfg_path);
      std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
      if (PipelineConfig::from_json_text(text).hash_hex() != cfg.hash_hex())
        throw ConfigError("resume: config does not match the existing run directory");
    } else {
      std::ofstream out(cfg_path, std::ios::binary);
      if (!out) throw IoError("cannot write '" + cfg_path + "'");
      out << cfg.to_json() << "\n";
    }
  }

  RunResult result;
  int start_round = 1;

  auto record = [&](int round, const char* stage, const Timer& t) {
    result.stage_times.push_back(StageTime{round, stage, t.seconds()});
  };

  if (resume && round_complete(out_dir, 0)) {
    int last = 0;
    while (last < cfg.rounds && round_complete(out_dir, last + 1)) ++last;
    for (int r = 0; r <= last; ++r) {
      RoundArtifacts a;
      a.round = r;
      a.dir = round_dir_name(out_dir, r);
      a.detector_ckpt = a.dir + "/detector.ckpt";
      a.metrics_path = a.dir + "/metrics.json";
      a.metrics = load_metrics(a.metrics_path);
      if (r > 0) {
        a.props_src = a.dir + "/props_src.jsonl";
        a.props_tgt = a.dir + "/props_tgt.jsonl";
        if (fs::exists(a.dir + "/cat.ckpt")) a.cat_ckpt = a.dir + "/cat.ckpt";
        if (fs::exists(a.dir + "/box.ckpt")) a.box_ckpt = a.dir + "/box.ckpt";
      }
      result.rounds.push_back(std::move(a));
    }
    result.detector = load_round_detector(out_dir, last, bench, cfg);
    start_round = last + 1;
  } else {
    Timer t_pre;
    result.detector = pretrain_source(bench.source, oracle, k, detector_config_from(cfg),
                                      derive_seed(cfg.seed, "pretrain"));
    record(0, "pretrain", t_pre);

    Timer t_m;
    RoundArtifacts a0;
    a0.round = 0;
    a0.dir = round_dir_name(out_dir, 0);
    fs::create_directories(a0.dir);
    auto props_src = propose(result.detector, bench.source, oracle, cfg.top_n, cfg.nms_iou);
    label_source_proposals(props_src, bench.source, k);
    auto props_tgt = propose(result.detector, bench.target, oracle, cfg.top_n, cfg.nms_iou);
    a0.metrics = compute_metrics(result.detector, bench, cfg, props_src, props_tgt, a0.dir);
    a0.detector_ckpt = a0.dir + "/detector.ckpt";
    save_params(result.detector.params, a0.detector_ckpt);
    a0.metrics_path = a0.dir + "/metrics.json";
    save_metrics(a0.metrics, a0.metrics_path);
    record(0, "metrics", t_m);
    result.rounds.push_back(std::move(a0));
  }

  for (int round = start_round; round <= cfg.rounds; ++round) {
    RoundArtifacts art;
    art.round = round;
    art.dir = round_dir_name(out_dir, round);
    fs::create_directories(art.dir);

    // proposals from the current detector (regenerated every round)
    Timer t_prop;
    auto props_src = propose(result.detector, bench.source, oracle, cfg.top_n, cfg.nms_iou);
    label_source_proposals(props_src, bench.source, k);
    auto props_tgt = propose(result.detector, bench.target, oracle, cfg.top_n, cfg.nms_iou);
    record(round, "propose", t_prop);

    auto src_scenes = scene_index(bench.source);
    auto tgt_scenes = scene_index(bench.target);

    // category adaptation
    Timer t_cat;
    if (!cfg.ablation.no_cat_adaptor) {
      std::vector<const Proposal*> cat_src, cat_tgt;
      for (const auto& p : props_src) {
        if (cfg.ablation.no_bg_source && !is_foreground(*p.y_gt, k)) continue;
        cat_src.push_back(&p);
      }
      for (const auto& p : props_tgt) {
        if (cfg.ablation.no_bg_target && !is_foreground(p.y_det, k)) continue;
        cat_tgt.push_back(&p);
      }
      if (cat_src.empty() || cat_tgt.empty())
        throw TrainingDivergence("category adaptation has an empty domain", round);

      CatTrainData data;
      data.n_classes = k;
      data.src_feats.resize(static_cast<long>(cat_src.size()), oracle.d_feat());
      data.src_weights.resize(static_cast<long>(cat_src.size()));
      for (std::size_t i = 0; i < cat_src.size(); ++i) {
        const Proposal& p = *cat_src[i];
        data.src_feats.row(static_cast<long>(i)) =
            oracle.crop_feature(*src_scenes.at(p.scene_id), p.b_det);
        data.src_labels.push_back(*p.y_gt);
        data.src_weights(static_cast<long>(i)) = pick_weight(p, cfg);
      }
      data.tgt_feats.resize(static_cast<long>(cat_tgt.size()), oracle.d_feat());
      data.tgt_weights.resize(static_cast<long>(cat_tgt.size()));
      for (std::size_t i = 0; i < cat_tgt.size(); ++i) {
        const Proposal& p = *cat_tgt[i];
        data.tgt_feats.row(static_cast<long>(i)) =
            oracle.crop_feature(*tgt_scenes.at(p.scene_id), p.b_det);
        data.tgt_weights(static_cast<long>(i)) = pick_weight(p, cfg);
      }

      CatAdaptorConfig cat_cfg;
      cat_cfg.hidden = cfg.hidden;
      cat_cfg.lambda_coeff = cfg.lambda_coeff;
      cat_cfg.use_condition = !cfg.ablation.no_condition;
      cat_cfg.lr = cfg.adaptor_lr;
      cat_cfg.steps = cfg.adaptor_steps;
      cat_cfg.batch_per_domain = cfg.batch_per_domain;
      CatAdaptor cat = train_category_adaptor(data, cat_cfg,
                                              derive_seed(cfg.seed, "cat-round", round));

      ad::Matrix all_tgt_feats = crop_features(props_tgt, tgt_scenes, oracle, 1.0);
      std::vector<int> labels = pseudo_label_categories(cat, all_tgt_feats);
      for (std::size_t i = 0; i < props_tgt.size(); ++i) props_tgt[i].y_cls = labels[i];

      art.cat_ckpt = art.dir + "/cat.ckpt";
      save_params(cat.params, art.cat_ckpt);
    } else {
      for (auto& p : props_tgt) p.y_cls = p.y_det;
    }
    record(round, "category-adapt", t_cat);

    // foreground selection (cascade: box adaptation sees y_cls only)
    std::vector<int> fg_src_idx, fg_tgt_idx;
    if (cfg.ablation.coupled_inputs) {
      // shared input distribution: confidence-weighted proposals for both
      for (std::size_t i = 0; i < props_src.size(); ++i)
        if (pick_weight(props_src[i], cfg) > 0) fg_src_idx.push_back(static_cast<int>(i));
      for (std::size_t i = 0; i < props_tgt.size(); ++i)
        if (pick_weight(props_tgt[i], cfg) > 0 && is_foreground(*props_tgt[i].y_cls, k))
          fg_tgt_idx.push_back(static_cast<int>(i));
    } else {
      for (std::size_t i = 0; i < props_src.size(); ++i)
        if (is_foreground(*props_src[i].y_gt, k)) fg_src_idx.push_back(static_cast<int>(i));
      for (std::size_t i = 0; i < props_tgt.size(); ++i)
        if (is_foreground(*props_tgt[i].y_cls, k)) fg_tgt_idx.push_back(static_cast<int>(i));
    }

    // box adaptation
    Timer t_box;
    bool box_ran = false;
    if (!cfg.ablation.no_box_adaptor) {
      BoxTrainData data;
      data.n_classes = k;
      std::vector<Eigen::VectorXd> src_rows, tgt_rows;
      std::vector<Offsets> src_targets;
      for (int i : fg_src_idx) {
        const Proposal& p = props_src[static_cast<std::size_t>(i)];
        const Scene& scene = *src_scenes.at(p.scene_id);
        if (p.b_det.width() <= 0 || p.b_det.height() <= 0) continue;
        const ObjectInstance* gt_obj = nullptr;
        int channel;
        if (cfg.ablation.coupled_inputs) {
          TruthAssignment t = assign_truth(p, scene, k);
          if (!t.best || t.best_iou <= 0.0) continue;
          gt_obj = t.best;
          channel = t.best->cls;
        } else {
          channel = *p.y_gt;
        }
        Box gt_box = gt_obj ? gt_obj->box : *p.b_gt;
        src_rows.push_back(
            oracle.crop_feature(scene, enlarge(p.b_det, cfg.enlarge_factor, scene.width,
                                               scene.height)));
        data.src_classes.push_back(channel);
        src_targets.push_back(encode_offsets(p.b_det, gt_box));
      }
      for (int i : fg_tgt_idx) {
        const Proposal& p = props_tgt[static_cast<std::size_t>(i)];
        const Scene& scene = *tgt_scenes.at(p.scene_id);
        if (p.b_det.width() <= 0 || p.b_det.height() <= 0) continue;
        tgt_rows.push_back(oracle.crop_feature(
            scene, enlarge(p.b_det, cfg.enlarge_factor, scene.width, scene.height)));
        data.tgt_classes.push_back(*p.y_cls);
      }

      if (!src_rows.empty() && !tgt_rows.empty()) {
        data.src_feats.resize(static_cast<long>(src_rows.size()), oracle.d_feat());
        for (std::size_t i = 0; i < src_rows.size(); ++i)
          data.src_feats.row(static_cast<long>(i)) = src_rows[i];
        data.src_targets.resize(static_cast<long>(src_targets.size()), 4);
        for (std::size_t i = 0; i < src_targets.size(); ++i) {
          data.src_targets(static_cast<long>(i), 0) = src_targets[i].tx;
          data.src_targets(static_cast<long>(i), 1) = src_targets[i].ty;
          data.src_targets(static_cast<long>(i), 2) = src_targets[i].tw;
          data.src_targets(static_cast<long>(i), 3) = src_targets[i].th;
        }
        data.tgt_feats.resize(static_cast<long>(tgt_rows.size()), oracle.d_feat());
        for (std::size_t i = 0; i < tgt_rows.size(); ++i)
          data.tgt_feats.row(static_cast<long>(i)) = tgt_rows[i];

        BoxAdaptorConfig box_cfg;
        box_cfg.hidden = cfg.hidden;
        box_cfg.eta_coeff = cfg.eta_coeff;
        box_cfg.use_dd = !cfg.ablation.no_dd;
        box_cfg.lr = cfg.adaptor_lr;
        box_cfg.steps = cfg.adaptor_steps;
        box_cfg.batch_per_domain = cfg.batch_per_domain;
        BoxAdaptor box = train_box_adaptor(data, box_cfg,
                                           derive_seed(cfg.seed, "box-round", round));

        // pseudo boxes for the target foreground set, offsets relative
        // to the original detected box
        std::vector<int> tgt_real_idx;
        std::vector<Eigen::VectorXd> feat_rows;
        std::vector<int> classes;
        std::vector<Box> det_boxes;
        for (int i : fg_tgt_idx) {
          const Proposal& p = props_tgt[static_cast<std::size_t>(i)];
          const Scene& scene = *tgt_scenes.at(p.scene_id);
          if (p.b_det.width() <= 0 || p.b_det.height() <= 0) continue;
          tgt_real_idx.push_back(i);
          feat_rows.push_back(oracle.crop_feature(
              scene, enlarge(p.b_det, cfg.enlarge_factor, scene.width, scene.height)));
          classes.push_back(*p.y_cls);
          det_boxes.push_back(p.b_det);
        }
        ad::Matrix feats(static_cast<long>(feat_rows.size()), oracle.d_feat());
        for (std::size_t i = 0; i < feat_rows.size(); ++i)
          feats.row(static_cast<long>(i)) = feat_rows[i];
        auto pseudo = pseudo_label_boxes(box, feats, classes, det_boxes,
                                         bench.config.scene_w, bench.config.scene_h);
        for (std::size_t i = 0; i < tgt_real_idx.size(); ++i)
          props_tgt[static_cast<std::size_t>(tgt_real_idx[i])].b_reg = pseudo[i].box;

        art.box_ckpt = art.dir + "/box.ckpt";
        save_params(box.params, art.box_ckpt);
        box_ran = true;
      }
      // empty foreground set on either side: box adaptation skipped this round
    }
    if (!box_ran) {
      // keep the cascade well-formed for later stages
      for (int i : fg_tgt_idx) {
        auto& p = props_tgt[static_cast<std::size_t>(i)];
        if (!cfg.ablation.no_box_adaptor) p.b_reg = p.b_det;
      }
    }
    record(round, "box-adapt", t_box);

    // detector training on pseudo labels
    Timer t_ft;
    if (cfg.ablation.standard_pseudo_label) {
      std::vector<std::vector<ObjectInstance>> annotations(bench.target.size());
      std::unordered_map<int, std::size_t> scene_pos;
      for (std::size_t i = 0; i < bench.target.size(); ++i)
        scene_pos[bench.target[i].id] = i;
      for (const auto& p : props_tgt) {
        if (!is_foreground(*p.y_cls, k)) continue;
        if (p.c_det < cfg.spl_conf_threshold) continue;
        ObjectInstance obj;
        obj.cls = *p.y_cls;
        obj.box = p.b_reg ? *p.b_reg : p.b_det;
        annotations[scene_pos.at(p.scene_id)].push_back(std::move(obj));
      }
      DetectorConfig ft_cfg = detector_config_from(cfg);
      ft_cfg.steps = cfg.finetune_steps;
      ft_cfg.lr = cfg.finetune_lr;
      train_on_annotations(result.detector, bench.target, annotations, oracle, ft_cfg,
                           derive_seed(cfg.seed, "finetune-round", round));
    } else {
      TargetTrainConfig ft;
      ft.lr = cfg.finetune_lr;
      ft.steps = cfg.finetune_steps;
      ft.batch = 2 * cfg.batch_per_domain;
      ft.classification_only = cfg.ablation.no_box_adaptor || !box_ran;
      train_target(result.detector, props_tgt, bench.target, oracle, ft,
                   derive_seed(cfg.seed, "finetune-round", round));
    }
    if (cfg.source_replay > 0.0) {
      DetectorConfig replay_cfg = detector_config_from(cfg);
      replay_cfg.steps =
          std::max(1, static_cast<int>(std::lround(cfg.source_replay * cfg.finetune_steps)));
      replay_cfg.lr = cfg.finetune_lr;
      train_on_scenes(result.detector, bench.source, oracle, replay_cfg,
                      derive_seed(cfg.seed, "replay-round", round));
    }
    record(round, "finetune", t_ft);

    // metrics + artifacts
    Timer t_m;
    art.metrics = compute_metrics(result.detector, bench, cfg, props_src, props_tgt, art.dir);
    art.detector_ckpt = art.dir + "/detector.ckpt";
    save_params(result.detector.params, art.detector_ckpt);
    art.props_src = art.dir + "/props_src.jsonl";
    save_proposals(props_src, art.props_src);
    art.props_tgt = art.dir + "/props_tgt.jsonl";
    save_proposals(props_tgt, art.props_tgt);
    art.metrics_path = art.dir + "/metrics.json";
    save_metrics(art.metrics, art.metrics_path);
    record(round, "metrics", t_m);

    result.rounds.push_back(std::move(art));
  }

  // the shipped detector holds detector parameters only
  save_params(result.detector.params, out_dir + "/detector_final.ckpt");
  write_run_manifest(cfg, result, out_dir);
  return result;
}

MetricsReport evaluate_checkpoint(const std::string& ckpt_path, const Benchmark& bench,
                                  const PipelineConfig& cfg, const std::string& out_dir) {
  DetectorModel model = load_detector_checkpoint(ckpt_path, bench, cfg);
  fs::create_directories(out_dir);
  const FeatureOracle oracle = bench.oracle();
  auto props_src = propose(model, bench.source, oracle, cfg.top_n, cfg.nms_iou);
  label_source_proposals(props_src, bench.source, bench.config.n_classes);
  auto props_tgt = propose(model, bench.target, oracle, cfg.top_n, cfg.nms_iou);
  MetricsReport m = compute_metrics(model, bench, cfg, props_src, props_tgt, out_dir);
  save_metrics(m, out_dir + "/metrics.json");
  return m;
}

void write_run_manifest(const PipelineConfig& cfg, const RunResult& result,
                        const std::string& out_dir) {
  ordered_json j;
  j["config_hash"] = cfg.hash_hex();
  j["seed"] = cfg.seed;
  j["tool_version"] = tool_version();
  auto times = ordered_json::array();
  for (const auto& t : result.stage_times)
    times.push_back({{"round", t.round}, {"stage", t.stage}, {"seconds", t.seconds}});
  j["stage_wall_times"] = std::move(times);
  auto artifacts = ordered_json::array();
  for (const auto& r : result.rounds) {
    artifacts.push_back(r.detector_ckpt);
    if (!r.cat_ckpt.empty()) artifacts.push_back(r.cat_ckpt);
    if (!r.box_ckpt.empty()) artifacts.push_back(r.box_ckpt);
    if (!r.props_src.empty()) artifacts.push_back(r.props_src);
    if (!r.props_tgt.empty()) artifacts.push_back(r.props_tgt);
    artifacts.push_back(r.metrics_path);
  }
  artifacts.push_back(out_dir + "/detector_final.ckpt");
  j["artifacts"] = std::move(artifacts);
  std::ofstream out(out_dir + "/manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write manifest");
  out << j.dump(2) << "\n";
}

void write_report(const std::string& run_dir) {
  if (!fs::exists(run_dir + "/config.json"))
    throw IoError("'" + run_dir + "' is not a run directory");
  PipelineConfig cfg = PipelineConfig::from_json_file(run_dir + "/config.json");

  std::vector<MetricsReport> rounds;
  for (int r = 0; r <= cfg.rounds; ++r) {
    std::string path = round_dir_name(run_dir, r) + "/metrics.json";
    if (!fs::exists(path)) break;
    rounds.push_back(load_metrics(path));
  }
  if (rounds.empty()) throw IoError("'" + run_dir + "' holds no round metrics");

  {
    std::ofstream out(run_dir + "/summary.csv", std::ios::binary);
    if (!out) throw IoError("cannot write summary.csv");
    out << "round,map,miou_cls,miou_reg,miss,cls,loc,correct\n";
    char buf[256];
    for (std::size_t r = 1; r < rounds.size(); ++r) {
      const MetricsReport& m = rounds[r];
      std::snprintf(buf, sizeof(buf), "%zu,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r, m.map,
                    m.miou_cls.value_or(0.0), m.miou_reg.value_or(0.0), m.error_breakdown.miss,
                    m.error_breakdown.cls, m.error_breakdown.loc, m.error_breakdown.correct);
      out << buf;
    }
  }

  std::vector<double> map_series;
  for (const auto& m : rounds) map_series.push_back(m.map);
  write_series_svg({{"target mAP", map_series}}, run_dir + "/map_by_round.svg",
                   "Target mAP by round (round 0 = source-only)");

  std::string hist_csv = round_dir_name(run_dir, 0) + "/iou_hist.csv";
  if (fs::exists(hist_csv))
    write_histogram_svg(read_histogram_csv(hist_csv), run_dir + "/iou_hist.svg",
                        "Source proposal IoU distribution");
}

}  // namespace dadapt
