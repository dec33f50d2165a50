#include "dadapt/synthworld.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "dadapt/errors.hpp"
#include "dadapt/rng.hpp"

namespace dadapt {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

void WorldConfig::validate() const {
  if (n_classes < 2) throw ConfigError("world: n_classes must be >= 2");
  if (d_app < 2 || d_feat < 4) throw ConfigError("world: bad feature dimensions");
  if (n_source < 1) throw ConfigError("world: n_source must be >= 1");
  if (n_target < 0) throw ConfigError("world: n_target must be >= 0");
  if (scene_w <= 0 || scene_h <= 0) throw ConfigError("world: scene size must be positive");
  if (min_objects < 1 || max_objects < min_objects)
    throw ConfigError("world: object count range invalid");
  if (overlap_cap < 0 || overlap_cap > 1) throw ConfigError("world: overlap_cap out of [0,1]");
  if (size_min <= 0 || size_max < size_min) throw ConfigError("world: size range invalid");
  if (target_size_min < 0 || target_size_max < target_size_min)
    throw ConfigError("world: target size range invalid");
  if (std::max(size_max, target_size_max) > scene_w || std::max(size_max, target_size_max) > scene_h)
    throw ConfigError("world: objects cannot exceed the scene");
  for (const auto* pr : {&prior_source, &prior_target}) {
    if (pr->empty()) continue;
    if (static_cast<int>(pr->size()) != n_classes)
      throw ConfigError("world: class prior must have n_classes entries");
    double s = 0;
    for (double p : *pr) {
      if (p < 0) throw ConfigError("world: negative class prior");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("world: class prior must sum to 1");
  }
}

namespace {

std::vector<double> uniform_prior(int k) {
  return std::vector<double>(static_cast<std::size_t>(k), 1.0 / k);
}

// Rotation by theta inside the plane spanned by the orthonormal pair
// (u, v), identity on the orthogonal complement.
Eigen::MatrixXd plane_rotation(const Eigen::VectorXd& u, const Eigen::VectorXd& v,
                               double theta) {
  long d = u.size();
  Eigen::MatrixXd r = Eigen::MatrixXd::Identity(d, d);
  r += (std::cos(theta) - 1.0) * (u * u.transpose() + v * v.transpose());
  r += std::sin(theta) * (v * u.transpose() - u * v.transpose());
  return r;
}

// Semantic shift: every class prototype drifts toward the next class by
// the same angle, the background direction drifts by a gentler one. The
// geometry is identical across seeds; only the prototype frame is
// seeded. strength is the drift angle in radians.
Eigen::MatrixXd rotation_like_map(const Eigen::MatrixXd& prototype_directions,
                                  int n_classes, double strength) {
  long d = prototype_directions.rows();
  Eigen::MatrixXd map = Eigen::MatrixXd::Identity(d, d);
  for (int i = 0; i < n_classes; ++i) {
    const auto u = prototype_directions.col(i);
    const auto v = prototype_directions.col((i + 1) % n_classes);
    map = plane_rotation(u, v, strength) * map;
  }
  map = plane_rotation(prototype_directions.col(n_classes), prototype_directions.col(0),
                       0.4 * strength) *
        map;
  return map;
}

std::uint64_t crop_noise_seed(std::uint64_t scene_seed, const Box& box) {
  double coords[4] = {box.x1, box.y1, box.x2, box.y2};
  return splitmix64(scene_seed ^ fnv1a64(coords, sizeof(coords)));
}

Scene generate_scene(const WorldConfig& cfg, const DomainSpec& spec, Domain domain, int id,
                     const Eigen::MatrixXd& prototypes, std::uint64_t scene_seed) {
  Rng rng(scene_seed);
  Scene s;
  s.id = id;
  s.domain = domain;
  s.width = cfg.scene_w;
  s.height = cfg.scene_h;
  s.noise_seed = derive_seed(scene_seed, "crop-noise");

  const bool tgt = domain == Domain::kTarget;
  const auto& prior = tgt ? spec.prior_target : spec.prior_source;
  const double smin = tgt ? spec.size_min_target : spec.size_min_source;
  const double smax = tgt ? spec.size_max_target : spec.size_max_source;

  auto shifted = [&](Eigen::VectorXd v) -> Eigen::VectorXd {
    if (!tgt) return v;
    return spec.appearance_map * v + spec.appearance_bias;
  };

  // classes occupy size bands within the domain's range, so appearance
  // carries size information the way real categories do
  auto class_band = [&](int cls) {
    double step = (smax - smin) / cfg.n_classes;
    return std::pair<double, double>{smin + cls * step, smin + (cls + 1) * step};
  };

  // class and size are drawn once per object; placement failures reroll
  // only the position, keeping the realized class prior unbiased
  int n_objects = rng.uniform_int(cfg.min_objects, cfg.max_objects);
  for (int slot = 0; slot < n_objects; ++slot) {
    int cls = rng.categorical(prior.data(), cfg.n_classes);
    auto [lo, hi] = class_band(cls);
    double w = rng.uniform(lo, hi);
    double h = rng.uniform(lo, hi);
    bool placed = false;
    for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
      double cx = rng.uniform(0.5 * w, cfg.scene_w - 0.5 * w);
      double cy = rng.uniform(0.5 * h, cfg.scene_h - 0.5 * h);
      Box b{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
      bool ok = true;
      for (const auto& o : s.objects)
        if (iou(o.box, b) > cfg.overlap_cap) {
          ok = false;
          break;
        }
      if (!ok) continue;
      ObjectInstance obj;
      obj.cls = cls;
      obj.box = b;
      Eigen::VectorXd app = prototypes.col(obj.cls);
      for (long i = 0; i < app.size(); ++i) app(i) += cfg.jitter_sigma * rng.gaussian();
      obj.appearance = shifted(std::move(app));
      s.objects.push_back(std::move(obj));
      placed = true;
    }
    if (!placed)
      throw ConfigError("world: cannot place objects under overlap_cap; scene " +
                        std::to_string(id));
  }

  Eigen::VectorXd bg = prototypes.col(cfg.n_classes);
  for (long i = 0; i < bg.size(); ++i) bg(i) += cfg.jitter_sigma * rng.gaussian();
  s.background_vec = shifted(std::move(bg));
  return s;
}

}  // namespace

Eigen::VectorXd FeatureOracle::crop_feature(const Scene& scene, const Box& box) const {
  if (box.area() <= 0.0) throw std::invalid_argument("crop_feature: zero-area box");

  // Each object contributes its appearance plus a geometric descriptor
  // (offset of the object relative to the crop, log size ratios); the
  // descriptor is what lets a regressor recover direction from a crop.
  // Objects are weighted by the fraction of the object the crop makes
  // visible, raised to the mixing exponent: a half-cut object stays
  // ambiguous while an enlarged crop keeps the full signal.
  const long d_app = projection.cols() - 4;
  Eigen::VectorXd mix = Eigen::VectorXd::Zero(d_app + 4);
  double total_weight = 0.0;
  double covered = 0.0;
  for (const auto& obj : scene.objects) {
    double visible = obj.box.area() > 0.0
                         ? intersection_area(box, obj.box) / obj.box.area()
                         : 0.0;
    if (visible <= 0.0) continue;
    double w = std::pow(visible, iou_exponent);
    mix.head(d_app) += w * obj.appearance;
    mix(d_app + 0) += w * (obj.box.cx() - box.cx()) / box.width();
    mix(d_app + 1) += w * (obj.box.cy() - box.cy()) / box.height();
    mix(d_app + 2) += w * std::log(obj.box.width() / box.width());
    mix(d_app + 3) += w * std::log(obj.box.height() / box.height());
    total_weight += w;
    covered += intersection_area(box, obj.box) / box.area();
  }
  double uncovered = std::max(0.0, 1.0 - covered);
  mix.head(d_app) += uncovered * scene.background_vec;
  total_weight += uncovered;
  if (total_weight <= 0.0) {
    mix.head(d_app) = scene.background_vec;
  } else {
    mix /= total_weight;
  }

  Eigen::VectorXd feat = projection * mix;
  double sigma =
      scene.domain == Domain::kSource ? noise_sigma_source : noise_sigma_target;
  if (sigma > 0.0) {
    Rng noise(crop_noise_seed(scene.noise_seed, box));
    for (long i = 0; i < feat.size(); ++i) feat(i) += sigma * noise.gaussian();
  }
  return feat;
}

FeatureOracle Benchmark::oracle() const {
  FeatureOracle o;
  o.projection = projection;
  o.iou_exponent = config.iou_exponent;
  o.noise_sigma_source = domain_spec.noise_sigma_source;
  o.noise_sigma_target = domain_spec.noise_sigma_target;
  return o;
}

const Scene& Benchmark::scene_by_id(int id) const {
  if (id >= 0 && id < static_cast<int>(source.size()) && source[static_cast<std::size_t>(id)].id == id)
    return source[static_cast<std::size_t>(id)];
  int ti = id - static_cast<int>(source.size());
  if (ti >= 0 && ti < static_cast<int>(target.size()) &&
      target[static_cast<std::size_t>(ti)].id == id)
    return target[static_cast<std::size_t>(ti)];
  for (const auto& s : source)
    if (s.id == id) return s;
  for (const auto& s : target)
    if (s.id == id) return s;
  throw std::invalid_argument("unknown scene id " + std::to_string(id));
}

Benchmark generate_benchmark(const WorldConfig& cfg) {
  cfg.validate();
  Benchmark b;
  b.config = cfg;

  DomainSpec& spec = b.domain_spec;
  spec.noise_sigma_source = cfg.noise_sigma;
  spec.noise_sigma_target = cfg.noise_sigma;
  spec.prior_source = cfg.prior_source.empty() ? uniform_prior(cfg.n_classes) : cfg.prior_source;
  spec.prior_target = cfg.prior_target.empty() ? uniform_prior(cfg.n_classes) : cfg.prior_target;
  spec.size_min_source = cfg.size_min;
  spec.size_max_source = cfg.size_max;
  spec.size_min_target = cfg.target_size_min > 0 ? cfg.target_size_min : cfg.size_min;
  spec.size_max_target = cfg.target_size_max > 0 ? cfg.target_size_max : cfg.size_max;

  // Class prototypes: orthonormal directions scaled to appearance_scale;
  // column n_classes is the background prototype.
  Rng proto_rng(derive_seed(cfg.seed, "prototypes"));
  Eigen::MatrixXd g(cfg.d_app, cfg.n_classes + 1);
  for (long i = 0; i < g.rows(); ++i)
    for (long j = 0; j < g.cols(); ++j) g(i, j) = proto_rng.gaussian();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(cfg.d_app, cfg.n_classes + 1);
  Eigen::MatrixXd prototypes = cfg.appearance_scale * q;

  Rng shift_rng(derive_seed(cfg.seed, "domain-shift"));
  spec.appearance_map = rotation_like_map(q, cfg.n_classes, cfg.shift_strength);
  spec.appearance_bias = Eigen::VectorXd(cfg.d_app);
  for (int i = 0; i < cfg.d_app; ++i) spec.appearance_bias(i) = cfg.shift_bias * shift_rng.gaussian();
  {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(spec.appearance_map);
    spec.condition_number =
        svd.singularValues()(0) / svd.singularValues()(svd.singularValues().size() - 1);
  }

  // Fixed backbone projection over appearance plus the 4 geometric
  // descriptor channels; orthonormal columns (rows when d_feat is
  // smaller) so distances survive into feature space.
  const int d_in = cfg.d_app + 4;
  Rng proj_rng(derive_seed(cfg.seed, "projection"));
  Eigen::MatrixXd pg(cfg.d_feat, d_in);
  for (long i = 0; i < pg.rows(); ++i)
    for (long j = 0; j < pg.cols(); ++j) pg(i, j) = proj_rng.gaussian();
  if (cfg.d_feat >= d_in) {
    Eigen::HouseholderQR<Eigen::MatrixXd> pqr(pg);
    b.projection = pqr.householderQ() * Eigen::MatrixXd::Identity(cfg.d_feat, d_in);
  } else {
    Eigen::HouseholderQR<Eigen::MatrixXd> pqr(pg.transpose());
    b.projection =
        (pqr.householderQ() * Eigen::MatrixXd::Identity(d_in, cfg.d_feat)).transpose();
  }

  for (int i = 0; i < cfg.n_source; ++i)
    b.source.push_back(generate_scene(cfg, spec, Domain::kSource, i, prototypes,
                                      derive_seed(cfg.seed, "scene-source", i)));
  for (int i = 0; i < cfg.n_target; ++i)
    b.target.push_back(generate_scene(cfg, spec, Domain::kTarget, cfg.n_source + i, prototypes,
                                      derive_seed(cfg.seed, "scene-target", i)));
  return b;
}

// ---- persistence -----------------------------------------------------

namespace {

json vec_to_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (long i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXd vec_from_json(const json& a) {
  Eigen::VectorXd v(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<long>(i)) = a[i].get<double>();
  return v;
}

json mat_to_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (long r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (long c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd mat_from_json(const json& rows) {
  long nr = static_cast<long>(rows.size());
  long nc = nr > 0 ? static_cast<long>(rows[0].size()) : 0;
  Eigen::MatrixXd m(nr, nc);
  for (long r = 0; r < nr; ++r)
    for (long c = 0; c < nc; ++c) m(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
  return m;
}

template <typename T>
void read_key(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

std::string scene_to_json_line(const Scene& s) {
  ordered_json j;
  j["id"] = s.id;
  j["domain"] = domain_name(s.domain);
  j["width"] = s.width;
  j["height"] = s.height;
  auto objs = ordered_json::array();
  for (const auto& o : s.objects) {
    ordered_json jo;
    jo["cls"] = o.cls;
    jo["x1"] = o.box.x1;
    jo["y1"] = o.box.y1;
    jo["x2"] = o.box.x2;
    jo["y2"] = o.box.y2;
    jo["appearance"] = vec_to_json(o.appearance);
    objs.push_back(std::move(jo));
  }
  j["objects"] = std::move(objs);
  j["background_vec"] = vec_to_json(s.background_vec);
  j["noise_seed"] = s.noise_seed;
  return j.dump();
}

Scene scene_from_json_line(const std::string& line) {
  json j = json::parse(line);
  Scene s;
  s.id = j.at("id").get<int>();
  std::string d = j.at("domain").get<std::string>();
  if (d != "source" && d != "target") throw IntegrityError("scene: bad domain '" + d + "'");
  s.domain = d == "source" ? Domain::kSource : Domain::kTarget;
  s.width = j.at("width").get<double>();
  s.height = j.at("height").get<double>();
  for (const auto& jo : j.at("objects")) {
    ObjectInstance o;
    o.cls = jo.at("cls").get<int>();
    o.box = Box{jo.at("x1").get<double>(), jo.at("y1").get<double>(), jo.at("x2").get<double>(),
                jo.at("y2").get<double>()};
    o.appearance = vec_from_json(jo.at("appearance"));
    s.objects.push_back(std::move(o));
  }
  s.background_vec = vec_from_json(j.at("background_vec"));
  s.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  return s;
}

namespace {

json world_config_to_json(const WorldConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["n_classes"] = c.n_classes;
  j["d_app"] = c.d_app;
  j["d_feat"] = c.d_feat;
  j["n_source"] = c.n_source;
  j["n_target"] = c.n_target;
  j["scene_w"] = c.scene_w;
  j["scene_h"] = c.scene_h;
  j["min_objects"] = c.min_objects;
  j["max_objects"] = c.max_objects;
  j["overlap_cap"] = c.overlap_cap;
  j["size_min"] = c.size_min;
  j["size_max"] = c.size_max;
  j["target_size_min"] = c.target_size_min;
  j["target_size_max"] = c.target_size_max;
  j["appearance_scale"] = c.appearance_scale;
  j["jitter_sigma"] = c.jitter_sigma;
  j["noise_sigma"] = c.noise_sigma;
  j["shift_strength"] = c.shift_strength;
  j["shift_bias"] = c.shift_bias;
  j["iou_exponent"] = c.iou_exponent;
  j["prior_source"] = c.prior_source;
  j["prior_target"] = c.prior_target;
  return j;
}

WorldConfig world_config_from_json(const json& j) {
  static const std::vector<std::string> known = {
      "seed",       "n_classes",  "d_app",           "d_feat",       "n_source",
      "n_target",   "scene_w",    "scene_h",         "min_objects",  "max_objects",
      "overlap_cap", "size_min",  "size_max",        "target_size_min", "target_size_max",
      "appearance_scale", "jitter_sigma",
      "noise_sigma", "shift_strength", "shift_bias", "iou_exponent", "prior_source",
      "prior_target"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("world config: unknown key '" + it.key() + "'");
  WorldConfig c;
  read_key(j, "seed", c.seed);
  read_key(j, "n_classes", c.n_classes);
  read_key(j, "d_app", c.d_app);
  read_key(j, "d_feat", c.d_feat);
  read_key(j, "n_source", c.n_source);
  read_key(j, "n_target", c.n_target);
  read_key(j, "scene_w", c.scene_w);
  read_key(j, "scene_h", c.scene_h);
  read_key(j, "min_objects", c.min_objects);
  read_key(j, "max_objects", c.max_objects);
  read_key(j, "overlap_cap", c.overlap_cap);
  read_key(j, "size_min", c.size_min);
  read_key(j, "size_max", c.size_max);
  read_key(j, "target_size_min", c.target_size_min);
  read_key(j, "target_size_max", c.target_size_max);
  read_key(j, "appearance_scale", c.appearance_scale);
  read_key(j, "jitter_sigma", c.jitter_sigma);
  read_key(j, "noise_sigma", c.noise_sigma);
  read_key(j, "shift_strength", c.shift_strength);
  read_key(j, "shift_bias", c.shift_bias);
  read_key(j, "iou_exponent", c.iou_exponent);
  read_key(j, "prior_source", c.prior_source);
  read_key(j, "prior_target", c.prior_target);
  c.validate();
  return c;
}

}  // namespace

std::string world_config_to_json_text(const WorldConfig& cfg) {
  return world_config_to_json(cfg).dump(2);
}

WorldConfig world_config_from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read world config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("world config '" + path + "': " + e.what());
  }
  return world_config_from_json(j);
}

void save_benchmark(const Benchmark& b, const std::string& dir) {
  fs::create_directories(dir);
  auto write_scenes = [](const std::vector<Scene>& scenes, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    for (const auto& s : scenes) out << scene_to_json_line(s) << "\n";
  };
  write_scenes(b.source, dir + "/scenes_source.jsonl");
  write_scenes(b.target, dir + "/scenes_target.jsonl");

  ordered_json w;
  w["config"] = world_config_to_json(b.config);
  w["projection"] = mat_to_json(b.projection);
  w["appearance_map"] = mat_to_json(b.domain_spec.appearance_map);
  w["appearance_bias"] = vec_to_json(b.domain_spec.appearance_bias);
  w["condition_number"] = b.domain_spec.condition_number;
  w["noise_sigma_source"] = b.domain_spec.noise_sigma_source;
  w["noise_sigma_target"] = b.domain_spec.noise_sigma_target;
  w["prior_source"] = b.domain_spec.prior_source;
  w["prior_target"] = b.domain_spec.prior_target;
  w["size_range_source"] = {b.domain_spec.size_min_source, b.domain_spec.size_max_source};
  w["size_range_target"] = {b.domain_spec.size_min_target, b.domain_spec.size_max_target};
  std::ofstream out(dir + "/world.json", std::ios::binary);
  if (!out) throw IoError("cannot write '" + dir + "/world.json'");
  out << w.dump(2) << "\n";
}

Benchmark load_benchmark(const std::string& dir) {
  std::ifstream win(dir + "/world.json");
  if (!win) throw IoError("cannot read '" + dir + "/world.json'");
  json w;
  try {
    win >> w;
  } catch (const json::exception& e) {
    throw IntegrityError("world.json: " + std::string(e.what()));
  }
  Benchmark b;
  b.config = world_config_from_json(w.at("config"));
  b.projection = mat_from_json(w.at("projection"));
  b.domain_spec.appearance_map = mat_from_json(w.at("appearance_map"));
  b.domain_spec.appearance_bias = vec_from_json(w.at("appearance_bias"));
  b.domain_spec.condition_number = w.at("condition_number").get<double>();
  b.domain_spec.noise_sigma_source = w.at("noise_sigma_source").get<double>();
  b.domain_spec.noise_sigma_target = w.at("noise_sigma_target").get<double>();
  b.domain_spec.prior_source = w.at("prior_source").get<std::vector<double>>();
  b.domain_spec.prior_target = w.at("prior_target").get<std::vector<double>>();
  b.domain_spec.size_min_source = w.at("size_range_source").at(0).get<double>();
  b.domain_spec.size_max_source = w.at("size_range_source").at(1).get<double>();
  b.domain_spec.size_min_target = w.at("size_range_target").at(0).get<double>();
  b.domain_spec.size_max_target = w.at("size_range_target").at(1).get<double>();

  auto read_scenes = [](const std::string& path, std::vector<Scene>& out) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read '" + path + "'");
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      out.push_back(scene_from_json_line(line));
    }
  };
  read_scenes(dir + "/scenes_source.jsonl", b.source);
  read_scenes(dir + "/scenes_target.jsonl", b.target);
  return b;
}

}  // namespace dadapt
