#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dadapt/box_adaptor.hpp"
#include "dadapt/cat_adaptor.hpp"
#include "dadapt/detector.hpp"
#include "dadapt/eval.hpp"
#include "dadapt/synthworld.hpp"

namespace dadapt {

inline const char* tool_version() { return "dadapt 0.1.0"; }

struct AblationToggles {
  bool no_weight = false;
  bool no_condition = false;
  bool no_bg_source = false;
  bool no_bg_target = false;
  bool no_dd = false;
  bool no_cat_adaptor = false;
  bool no_box_adaptor = false;
  bool coupled_inputs = false;
  bool standard_pseudo_label = false;
};

struct PipelineConfig {
  int rounds = 3;
  double lambda_coeff = 1.0;
  double eta_coeff = 0.1;
  double weight_threshold = 0.5;
  double enlarge_factor = 2.0;
  int top_n = 32;
  double nms_iou = 0.5;
  double score_thresh = 0.05;
  int detector_steps = 2000;
  int adaptor_steps = 2000;
  int finetune_steps = 1000;
  double detector_lr = 0.02;
  double adaptor_lr = 0.01;
  double finetune_lr = 0.005;
  int hidden = 32;
  int batch_per_domain = 32;
  double source_replay = 0.0;       // fraction of finetune steps replayed on source
  double spl_conf_threshold = 0.5;  // standard_pseudo_label confidence filter
  std::uint64_t seed = 0;
  AblationToggles ablation;

  void validate() const;
  std::string to_json() const;  // canonical, fixed key order
  std::string hash_hex() const;
  void apply_ablation(const std::string& name);  // throws ConfigError on unknown names

  static PipelineConfig from_json_text(const std::string& text);
  static PipelineConfig from_json_file(const std::string& path);
};

struct RoundArtifacts {
  int round = 0;
  std::string dir;
  std::string detector_ckpt;
  std::string cat_ckpt;    // empty when the stage did not run
  std::string box_ckpt;    // empty when the stage did not run
  std::string props_src;   // empty for round 0
  std::string props_tgt;
  std::string metrics_path;
  MetricsReport metrics;
};

struct StageTime {
  int round = 0;
  std::string stage;
  double seconds = 0.0;
};

struct RunResult {
  DetectorModel detector;
  std::vector<RoundArtifacts> rounds;  // index 0 is the source-only baseline
  std::vector<StageTime> stage_times;
};

// Full self-feedback loop: source pretraining, then per round propose ->
// category adaptation -> foreground selection -> box adaptation ->
// pseudo-label training, with artifacts and metrics under out_dir.
// resume=true picks up after the last complete round directory.
RunResult run_dadapt(const PipelineConfig& cfg, const Benchmark& bench,
                     const std::string& out_dir, bool resume = false);

// Reconstructs the detector saved for one round. Throws IntegrityError
// when artifacts are missing or damaged.
DetectorModel load_round_detector(const std::string& run_dir, int round,
                                  const Benchmark& bench, const PipelineConfig& cfg);

DetectorModel load_detector_checkpoint(const std::string& ckpt_path, const Benchmark& bench,
                                       const PipelineConfig& cfg);

// Detector-only evaluation of a checkpoint against a benchmark's target
// domain (pseudo-label metrics use the detector's own predictions).
MetricsReport evaluate_checkpoint(const std::string& ckpt_path, const Benchmark& bench,
                                  const PipelineConfig& cfg, const std::string& out_dir);

// summary.csv (one row per adaptation round) and SVG charts from a
// finished run directory.
void write_report(const std::string& run_dir);

void write_run_manifest(const PipelineConfig& cfg, const RunResult& result,
                        const std::string& out_dir);

}  // namespace dadapt
