#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

#include "dadapt/geometry.hpp"

namespace dadapt {

enum class Domain { kSource, kTarget };

inline const char* domain_name(Domain d) { return d == Domain::kSource ? "source" : "target"; }

struct ObjectInstance {
  int cls = 0;
  Box box;
  Eigen::VectorXd appearance;  // dim d_app
};

struct Scene {
  int id = 0;
  Domain domain = Domain::kSource;
  double width = 0, height = 0;
  std::vector<ObjectInstance> objects;
  Eigen::VectorXd background_vec;
  std::uint64_t noise_seed = 0;
};

// Semantic shift between the two domains: target appearances pass
// through an invertible linear map, and priors/sizes/noise may differ.
struct DomainSpec {
  Eigen::MatrixXd appearance_map;  // d_app x d_app
  Eigen::VectorXd appearance_bias;
  double condition_number = 1.0;
  double noise_sigma_source = 0.1;
  double noise_sigma_target = 0.1;
  std::vector<double> prior_source;
  std::vector<double> prior_target;
  double size_min_source = 10, size_max_source = 22;
  double size_min_target = 10, size_max_target = 22;
};

struct WorldConfig {
  std::uint64_t seed = 0;
  int n_classes = 3;  // foreground classes; background is index n_classes
  int d_app = 8;
  int d_feat = 16;
  int n_source = 200;
  int n_target = 200;
  double scene_w = 64, scene_h = 64;
  int min_objects = 1, max_objects = 3;
  double overlap_cap = 0.2;
  double size_min = 10, size_max = 22;
  double target_size_min = 12, target_size_max = 24;  // size prior shift
  double appearance_scale = 2.0;
  double jitter_sigma = 0.25;
  double noise_sigma = 0.1;
  double shift_strength = 0.45;  // prototype drift angle, radians
  double shift_bias = 0.2;
  double iou_exponent = 2.0;            // sharpness of the crop mixing rule
  std::vector<double> prior_source;     // empty = uniform
  std::vector<double> prior_target;     // empty = uniform

  void validate() const;  // throws ConfigError
};

// Stand-in for a backbone: maps (scene, box) to a d_feat vector. Pure
// given the projection and the scene's noise seed.
struct FeatureOracle {
  Eigen::MatrixXd projection;  // d_feat x d_app
  double iou_exponent = 2.0;
  double noise_sigma_source = 0.1;
  double noise_sigma_target = 0.1;

  Eigen::VectorXd crop_feature(const Scene& scene, const Box& box) const;
  int d_feat() const { return static_cast<int>(projection.rows()); }
};

struct Benchmark {
  WorldConfig config;
  DomainSpec domain_spec;
  Eigen::MatrixXd projection;  // shared backbone projection
  std::vector<Scene> source;
  std::vector<Scene> target;

  FeatureOracle oracle() const;
  const Scene& scene_by_id(int id) const;
};

// Deterministic per (cfg, cfg.seed). Source scenes keep raw appearances;
// target scenes pass through the domain map. Ground truth is kept on
// both sides (target labels are for evaluation only).
Benchmark generate_benchmark(const WorldConfig& cfg);

// ---- persistence -----------------------------------------------------

WorldConfig world_config_from_json_file(const std::string& path);
std::string world_config_to_json_text(const WorldConfig& cfg);
void save_benchmark(const Benchmark& b, const std::string& dir);
Benchmark load_benchmark(const std::string& dir);

std::string scene_to_json_line(const Scene& s);
Scene scene_from_json_line(const std::string& line);

}  // namespace dadapt
