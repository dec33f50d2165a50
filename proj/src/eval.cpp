#include "dadapt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "dadapt/errors.hpp"

namespace dadapt {

using nlohmann::json;
using nlohmann::ordered_json;

std::vector<GtBox> gather_gt(const std::vector<Scene>& scenes) {
  std::vector<GtBox> gts;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) gts.push_back(GtBox{s.id, o.cls, o.box});
  return gts;
}

namespace {

bool detection_order(const DetectionResult& a, const DetectionResult& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.scene_id != b.scene_id) return a.scene_id < b.scene_id;
  if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
  if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
  if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
  return a.box.y2 < b.box.y2;
}

}  // namespace

std::optional<double> average_precision(std::vector<DetectionResult> results,
                                        const std::vector<GtBox>& gts, int cls,
                                        double iou_thresh) {
  // ground truth of this class, grouped by scene
  std::map<int, std::vector<const GtBox*>> gt_by_scene;
  long npos = 0;
  for (const auto& g : gts)
    if (g.cls == cls) {
      gt_by_scene[g.scene_id].push_back(&g);
      ++npos;
    }
  if (npos == 0) return std::nullopt;

  std::erase_if(results, [cls](const DetectionResult& r) { return r.cls != cls; });
  std::sort(results.begin(), results.end(), detection_order);

  std::map<int, std::vector<bool>> used;
  for (auto& [sid, v] : gt_by_scene) used[sid] = std::vector<bool>(v.size(), false);

  std::vector<int> is_tp;
  is_tp.reserve(results.size());
  for (const auto& r : results) {
    auto it = gt_by_scene.find(r.scene_id);
    int best = -1;
    double best_iou = iou_thresh;
    if (it != gt_by_scene.end()) {
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        if (used[r.scene_id][k]) continue;
        double v = iou(r.box, it->second[k]->box);
        if (v >= best_iou) {
          best_iou = v;
          best = static_cast<int>(k);
        }
      }
    }
    if (best >= 0) {
      used[r.scene_id][static_cast<std::size_t>(best)] = true;
      is_tp.push_back(1);
    } else {
      is_tp.push_back(0);
    }
  }

  // precision envelope over the recall staircase
  std::vector<double> precision, recall;
  long tp = 0, fp = 0;
  for (int v : is_tp) {
    tp += v;
    fp += 1 - v;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
  }
  double ap = 0.0;
  double env = 0.0;
  double prev_recall_at = 1.0;  // walk from the right
  for (long i = static_cast<long>(precision.size()) - 1; i >= 0; --i) {
    env = std::max(env, precision[static_cast<std::size_t>(i)]);
    double r_lo = i > 0 ? recall[static_cast<std::size_t>(i - 1)] : 0.0;
    ap += env * (recall[static_cast<std::size_t>(i)] - r_lo);
  }
  (void)prev_recall_at;
  return ap;
}

EvalSummary evaluate_detections(const std::vector<DetectionResult>& results,
                                const std::vector<GtBox>& gts, int n_classes,
                                double iou_thresh) {
  EvalSummary s;
  double acc = 0.0;
  int counted = 0;
  for (int k = 0; k < n_classes; ++k) {
    auto ap = average_precision(results, gts, k, iou_thresh);
    s.per_class_ap.push_back(ap);
    if (ap) {
      acc += *ap;
      ++counted;
    }
  }
  s.map = counted > 0 ? acc / counted : 0.0;
  return s;
}

ConfusionCounts ConfusionCounts::from_pairs(const std::vector<int>& truth,
                                            const std::vector<int>& predicted,
                                            int n_classes) {
  if (truth.size() != predicted.size())
    throw std::invalid_argument("confusion: truth/prediction length mismatch");
  ConfusionCounts c;
  c.n = Eigen::MatrixXi::Zero(n_classes, n_classes);
  c.t = Eigen::VectorXi::Zero(n_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    int a = truth[i], b = predicted[i];
    if (a < 0 || a >= n_classes || b < 0 || b >= n_classes)
      throw std::invalid_argument("confusion: class index out of range");
    c.n(a, b) += 1;
    c.t(a) += 1;
  }
  return c;
}

double miou_cls(const ConfusionCounts& c, int* undefined_classes) {
  const int n = static_cast<int>(c.n.rows());
  int undefined = 0;
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    long pred_as_i = c.n.col(i).sum();
    long denom = c.t(i) + pred_as_i - c.n(i, i);
    if (denom <= 0) {
      ++undefined;
      continue;  // contributes 0
    }
    acc += static_cast<double>(c.n(i, i)) / static_cast<double>(denom);
  }
  if (undefined_classes) *undefined_classes = undefined;
  return acc / static_cast<double>(n);
}

double miou_reg(const std::vector<Box>& predicted, const std::vector<Box>& truth) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("miou_reg: paired lists must have equal length");
  if (predicted.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) acc += iou(predicted[i], truth[i]);
  return acc / static_cast<double>(predicted.size());
}

ErrorBreakdown error_analysis(const std::vector<DetectionResult>& results,
                              const std::vector<GtBox>& gts, double iou_thresh) {
  ErrorBreakdown e;
  if (gts.empty()) return e;

  long miss = 0, wrong_cls = 0, loc = 0, correct = 0;
  for (const auto& g : gts) {
    bool any_correct = false, any_wrong_cls = false, any_loc = false;
    for (const auto& r : results) {
      if (r.scene_id != g.scene_id) continue;
      double v = iou(r.box, g.box);
      if (v >= iou_thresh) {
        if (r.cls == g.cls)
          any_correct = true;
        else
          any_wrong_cls = true;
      } else if (v >= 0.1 && r.cls == g.cls) {
        any_loc = true;
      }
    }
    if (any_correct)
      ++correct;
    else if (any_wrong_cls)
      ++wrong_cls;
    else if (any_loc)
      ++loc;
    else
      ++miss;
  }
  double n = static_cast<double>(gts.size());
  e.miss = miss / n;
  e.cls = wrong_cls / n;
  e.loc = loc / n;
  e.correct = correct / n;
  return e;
}

Histogram iou_histogram(const std::vector<double>& max_ious,
                        const std::vector<double>& confidences, int bins,
                        double conf_threshold) {
  if (bins < 1) throw std::invalid_argument("iou_histogram: bins must be >= 1");
  if (max_ious.size() != confidences.size())
    throw std::invalid_argument("iou_histogram: length mismatch");
  Histogram h;
  h.counts.assign(static_cast<std::size_t>(bins), 0);
  for (int i = 0; i <= bins; ++i) h.edges.push_back(static_cast<double>(i) / bins);
  for (std::size_t i = 0; i < max_ious.size(); ++i) {
    if (confidences[i] < conf_threshold) continue;
    double v = std::clamp(max_ious[i], 0.0, 1.0);
    int b = std::min(bins - 1, static_cast<int>(v * bins));
    h.counts[static_cast<std::size_t>(b)] += 1;
  }
  return h;
}

double histogram_mass(const Histogram& h, double lo, double hi) {
  double acc = 0.0;
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    double mid = 0.5 * (h.edges[i] + h.edges[i + 1]);
    if (mid > lo && mid < hi) acc += static_cast<double>(h.counts[i]);
  }
  return acc;
}

// ---- serialization -----------------------------------------------------

namespace {

ordered_json optional_to_json(const std::optional<double>& v) {
  if (v) return *v;
  return nullptr;
}

std::optional<double> optional_from_json(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace

std::string metrics_to_json(const MetricsReport& m) {
  ordered_json j;
  auto ap = ordered_json::array();
  for (const auto& v : m.per_class_ap) ap.push_back(optional_to_json(v));
  j["per_class_ap"] = std::move(ap);
  j["map"] = m.map;
  j["miou_cls"] = optional_to_json(m.miou_cls);
  j["miou_reg"] = optional_to_json(m.miou_reg);
  j["error_breakdown"] = {{"miss", m.error_breakdown.miss},
                          {"cls", m.error_breakdown.cls},
                          {"loc", m.error_breakdown.loc},
                          {"correct", m.error_breakdown.correct}};
  j["histogram_path"] = m.histogram_path;
  return j.dump(2);
}

MetricsReport metrics_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("metrics: ") + e.what());
  }
  MetricsReport m;
  for (const auto& v : j.at("per_class_ap")) m.per_class_ap.push_back(optional_from_json(v));
  m.map = j.at("map").get<double>();
  m.miou_cls = optional_from_json(j.at("miou_cls"));
  m.miou_reg = optional_from_json(j.at("miou_reg"));
  const auto& e = j.at("error_breakdown");
  m.error_breakdown.miss = e.at("miss").get<double>();
  m.error_breakdown.cls = e.at("cls").get<double>();
  m.error_breakdown.loc = e.at("loc").get<double>();
  m.error_breakdown.correct = e.at("correct").get<double>();
  m.histogram_path = j.at("histogram_path").get<std::string>();
  return m;
}

void save_metrics(const MetricsReport& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write metrics '" + path + "'");
  out << metrics_to_json(m) << "\n";
}

MetricsReport load_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read metrics '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return metrics_from_json(text);
}

void write_histogram_csv(const Histogram& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << "bin_lo,bin_hi,count\n";
  char buf[96];
  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.6f,%.6f,%ld\n", h.edges[i], h.edges[i + 1], h.counts[i]);
    out << buf;
  }
}

Histogram read_histogram_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read '" + path + "'");
  Histogram h;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    double lo, hi;
    long count;
    if (std::sscanf(line.c_str(), "%lf,%lf,%ld", &lo, &hi, &count) != 3)
      throw IntegrityError("bad histogram row in '" + path + "'");
    if (h.edges.empty()) h.edges.push_back(lo);
    h.edges.push_back(hi);
    h.counts.push_back(count);
  }
  return h;
}

namespace {

constexpr int kSvgW = 640;
constexpr int kSvgH = 400;
constexpr int kMargin = 48;

void svg_header(std::ofstream& out, const std::string& title) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kSvgW << "\" height=\""
      << kSvgH << "\" viewBox=\"0 0 " << kSvgW << " " << kSvgH << "\">\n";
  out << "<rect x=\"0\" y=\"0\" width=\"" << kSvgW << "\" height=\"" << kSvgH
      << "\" fill=\"white\"/>\n";
  out << "<text x=\"" << kSvgW / 2 << "\" y=\"20\" text-anchor=\"middle\" "
      << "font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
}

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

void write_histogram_svg(const Histogram& h, const std::string& path,
                         const std::string& title) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  svg_header(out, title);

  long max_count = 1;
  for (long c : h.counts) max_count = std::max(max_count, c);
  const double plot_w = kSvgW - 2.0 * kMargin;
  const double plot_h = kSvgH - 2.0 * kMargin;
  const double bar_w = plot_w / static_cast<double>(h.counts.size());

  for (std::size_t i = 0; i < h.counts.size(); ++i) {
    double bh = plot_h * static_cast<double>(h.counts[i]) / static_cast<double>(max_count);
    double x = kMargin + bar_w * static_cast<double>(i);
    double y = kSvgH - kMargin - bh;
    out << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(bar_w * 0.9)
        << "\" height=\"" << fmt(bh) << "\" fill=\"steelblue\"/>\n";
  }
  out << "<line x1=\"" << kMargin << "\" y1=\"" << kSvgH - kMargin << "\" x2=\""
      << kSvgW - kMargin << "\" y2=\"" << kSvgH - kMargin << "\" stroke=\"black\"/>\n";
  for (std::size_t i = 0; i < h.edges.size(); i += std::max<std::size_t>(1, h.edges.size() / 6)) {
    double x = kMargin + plot_w * h.edges[i];
    out << "<text x=\"" << fmt(x) << "\" y=\"" << kSvgH - kMargin + 16
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
        << fmt(h.edges[i]) << "</text>\n";
  }
  out << "<text x=\"" << kMargin - 8 << "\" y=\"" << kMargin << "\" text-anchor=\"end\" "
      << "font-family=\"sans-serif\" font-size=\"10\">" << max_count << "</text>\n";
  out << "</svg>\n";
}

void write_series_svg(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                      const std::string& path, const std::string& title) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  svg_header(out, title);

  double vmax = 1e-12;
  std::size_t nmax = 2;
  for (const auto& [name, vals] : series) {
    for (double v : vals) vmax = std::max(vmax, v);
    nmax = std::max(nmax, vals.size());
  }
  const double plot_w = kSvgW - 2.0 * kMargin;
  const double plot_h = kSvgH - 2.0 * kMargin;
  static const char* colors[] = {"steelblue", "firebrick", "seagreen", "darkorange"};

  int ci = 0;
  for (const auto& [name, vals] : series) {
    if (vals.empty()) continue;
    out << "<polyline fill=\"none\" stroke=\"" << colors[ci % 4] << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < vals.size(); ++i) {
      double x = kMargin + plot_w * (nmax > 1 ? static_cast<double>(i) / (nmax - 1) : 0.0);
      double y = kSvgH - kMargin - plot_h * vals[i] / vmax;
      out << fmt(x) << "," << fmt(y) << " ";
    }
    out << "\"/>\n";
    out << "<text x=\"" << kSvgW - kMargin << "\" y=\"" << kMargin + 16 * ci
        << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\" fill=\""
        << colors[ci % 4] << "\">" << name << "</text>\n";
    ++ci;
  }
  out << "<line x1=\"" << kMargin << "\" y1=\"" << kSvgH - kMargin << "\" x2=\""
      << kSvgW - kMargin << "\" y2=\"" << kSvgH - kMargin << "\" stroke=\"black\"/>\n";
  out << "</svg>\n";
}

}  // namespace dadapt
