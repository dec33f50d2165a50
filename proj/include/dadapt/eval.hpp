#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dadapt/geometry.hpp"
#include "dadapt/synthworld.hpp"

namespace dadapt {

struct DetectionResult {
  int scene_id = 0;
  Box box;
  int cls = 0;
  double score = 0.0;
};

struct GtBox {
  int scene_id = 0;
  int cls = 0;
  Box box;
};

std::vector<GtBox> gather_gt(const std::vector<Scene>& scenes);

// Greedy score-ordered matching at IoU >= iou_thresh, duplicates count
// as false positives; area under the precision envelope (all-point
// interpolation). Returns nullopt when the class has no ground truth.
std::optional<double> average_precision(std::vector<DetectionResult> results,
                                        const std::vector<GtBox>& gts, int cls,
                                        double iou_thresh = 0.5);

struct EvalSummary {
  std::vector<std::optional<double>> per_class_ap;
  double map = 0.0;  // mean over classes that have ground truth
};

EvalSummary evaluate_detections(const std::vector<DetectionResult>& results,
                                const std::vector<GtBox>& gts, int n_classes,
                                double iou_thresh = 0.5);

// n(i, j): items of class i predicted as class j; t(i) row totals.
struct ConfusionCounts {
  Eigen::MatrixXi n;
  Eigen::VectorXi t;

  static ConfusionCounts from_pairs(const std::vector<int>& truth,
                                    const std::vector<int>& predicted, int n_classes);
};

// Mean over classes of n_ii / (t_i + sum_j n_ji - n_ii). Classes with a
// zero denominator contribute 0; their count is reported through
// undefined_classes when non-null.
double miou_cls(const ConfusionCounts& c, int* undefined_classes = nullptr);

// Mean IoU over paired boxes; lists must have equal length.
double miou_reg(const std::vector<Box>& predicted, const std::vector<Box>& truth);

struct ErrorBreakdown {
  double miss = 0.0;     // ground truth with no spatial match at all
  double cls = 0.0;      // matched spatially but classified wrong
  double loc = 0.0;      // right class, IoU in [0.1, 0.5)
  double correct = 0.0;

  bool operator==(const ErrorBreakdown&) const = default;
};

// Fractions over ground-truth objects; categories are exclusive and
// exhaustive, priority correct > cls > loc > miss.
ErrorBreakdown error_analysis(const std::vector<DetectionResult>& results,
                              const std::vector<GtBox>& gts, double iou_thresh = 0.5);

struct Histogram {
  std::vector<double> edges;  // bins + 1 entries
  std::vector<long> counts;
};

// Counts of max_iou values over [0, 1], restricted to entries whose
// confidence is >= conf_threshold. Values at 1.0 land in the last bin.
Histogram iou_histogram(const std::vector<double>& max_ious,
                        const std::vector<double>& confidences, int bins,
                        double conf_threshold);

double histogram_mass(const Histogram& h, double lo, double hi);

struct MetricsReport {
  std::vector<std::optional<double>> per_class_ap;
  double map = 0.0;
  std::optional<double> miou_cls;
  std::optional<double> miou_reg;
  ErrorBreakdown error_breakdown;
  std::string histogram_path;
};

std::string metrics_to_json(const MetricsReport& m);
MetricsReport metrics_from_json(const std::string& text);
void save_metrics(const MetricsReport& m, const std::string& path);
MetricsReport load_metrics(const std::string& path);

void write_histogram_csv(const Histogram& h, const std::string& path);
Histogram read_histogram_csv(const std::string& path);
void write_histogram_svg(const Histogram& h, const std::string& path,
                         const std::string& title);
// One polyline per series over x = 1..n; used by the run report.
void write_series_svg(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                      const std::string& path, const std::string& title);

}  // namespace dadapt
