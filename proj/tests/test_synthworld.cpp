#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "dadapt/autodiff.hpp"
#include "dadapt/errors.hpp"
#include "dadapt/eval.hpp"
#include "dadapt/synthworld.hpp"

using namespace dadapt;
using ad::Matrix;

namespace {

WorldConfig small_config(std::uint64_t seed) {
  WorldConfig cfg;
  cfg.seed = seed;
  cfg.n_source = 24;
  cfg.n_target = 24;
  return cfg;
}

// crops of every ground-truth object, with labels
std::pair<Matrix, std::vector<int>> gt_crops(const Benchmark& b, const std::vector<Scene>& scenes) {
  FeatureOracle oracle = b.oracle();
  std::vector<Eigen::VectorXd> rows;
  std::vector<int> labels;
  for (const auto& s : scenes)
    for (const auto& o : s.objects) {
      rows.push_back(oracle.crop_feature(s, o.box));
      labels.push_back(o.cls);
    }
  Matrix m(static_cast<long>(rows.size()), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<long>(i)) = rows[i];
  return {m, labels};
}

// multinomial logistic probe; returns accuracy on (x_eval, y_eval)
double linear_probe_accuracy(const Matrix& x_train, const std::vector<int>& y_train,
                             const Matrix& x_eval, const std::vector<int>& y_eval, int k) {
  Rng rng(123);
  ad::ParamStore store;
  store.hyper.momentum = 0.9;
  ad::Mlp probe = ad::Mlp::create(store, "probe", {static_cast<int>(x_train.cols()), k}, rng);
  for (int step = 0; step < 400; ++step) {
    ad::Tape tape;
    ad::Binding b = store.bind(tape);
    ad::Value logits = probe.forward(tape, b, tape.leaf(x_train));
    ad::Value loss = ad::cross_entropy(logits, y_train);
    tape.backward(loss);
    ad::sgd_step(store, b, 0.5);
  }
  Matrix logits = probe.infer(store, x_eval);
  int correct = 0;
  for (long i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (long c = 1; c < logits.cols(); ++c)
      if (logits(i, c) > logits(i, best)) best = static_cast<int>(c);
    if (best == y_eval[static_cast<std::size_t>(i)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

}  // namespace

TEST_CASE("generation is deterministic and respects scene invariants") {
  WorldConfig cfg = small_config(5);
  Benchmark a = generate_benchmark(cfg);
  Benchmark b = generate_benchmark(cfg);
  REQUIRE(a.source.size() == 24);
  REQUIRE(a.target.size() == 24);
  for (std::size_t i = 0; i < a.source.size(); ++i)
    CHECK(scene_to_json_line(a.source[i]) == scene_to_json_line(b.source[i]));
  for (std::size_t i = 0; i < a.target.size(); ++i)
    CHECK(scene_to_json_line(a.target[i]) == scene_to_json_line(b.target[i]));

  for (const auto& s : a.source) {
    CHECK(s.objects.size() >= 1);
    CHECK(s.objects.size() <= static_cast<std::size_t>(cfg.max_objects));
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      const Box& box = s.objects[i].box;
      CHECK(box.x1 >= 0);
      CHECK(box.y1 >= 0);
      CHECK(box.x2 <= cfg.scene_w);
      CHECK(box.y2 <= cfg.scene_h);
      for (std::size_t j = i + 1; j < s.objects.size(); ++j)
        CHECK(iou(box, s.objects[j].box) <= cfg.overlap_cap);
    }
  }
}

TEST_CASE("empty target domain and infeasible overlap cap") {
  WorldConfig cfg = small_config(1);
  cfg.n_target = 0;
  Benchmark b = generate_benchmark(cfg);
  CHECK(b.target.empty());

  WorldConfig bad = small_config(1);
  bad.overlap_cap = 0.0;
  bad.min_objects = bad.max_objects = 8;
  bad.size_min = 40;
  bad.size_max = 60;
  CHECK_THROWS_AS(generate_benchmark(bad), ConfigError);

  WorldConfig k1 = small_config(1);
  k1.n_classes = 1;
  CHECK_THROWS_AS(generate_benchmark(k1), ConfigError);
}

TEST_CASE("class priors of the generated set match the config within 3 points") {
  WorldConfig cfg;  // reference-scale generation
  cfg.seed = 42;
  cfg.prior_target = {0.5, 0.3, 0.2};
  Benchmark b = generate_benchmark(cfg);

  auto check_priors = [&](const std::vector<Scene>& scenes, const std::vector<double>& prior) {
    std::vector<double> counts(static_cast<std::size_t>(cfg.n_classes), 0.0);
    double total = 0;
    for (const auto& s : scenes)
      for (const auto& o : s.objects) {
        counts[static_cast<std::size_t>(o.cls)] += 1;
        total += 1;
      }
    for (int k = 0; k < cfg.n_classes; ++k)
      CHECK(std::abs(counts[static_cast<std::size_t>(k)] / total - prior[static_cast<std::size_t>(k)]) <= 0.03);
  };
  check_priors(b.source, {1.0 / 3, 1.0 / 3, 1.0 / 3});
  check_priors(b.target, cfg.prior_target);
}

TEST_CASE("crop features: determinism and noise-free limits") {
  WorldConfig cfg = small_config(9);
  cfg.noise_sigma = 0.0;
  Benchmark b = generate_benchmark(cfg);
  FeatureOracle oracle = b.oracle();

  const Scene& s = b.source.front();
  const ObjectInstance& obj = s.objects.front();

  Eigen::VectorXd f1 = oracle.crop_feature(s, obj.box);
  Eigen::VectorXd f2 = oracle.crop_feature(s, obj.box);
  CHECK(f1 == f2);

  // a crop exactly on an isolated object is (almost) purely its
  // appearance; the geometric channels vanish for an exact hit
  Eigen::VectorXd pure = b.projection.leftCols(cfg.d_app) * obj.appearance;
  CHECK((f1 - pure).norm() < 0.35 * pure.norm());

  // an empty corner sees only background
  Box corner{0.5, 0.5, 2.0, 2.0};
  bool overlaps = false;
  for (const auto& o : s.objects)
    if (iou(corner, o.box) > 0 || intersection_area(corner, o.box) > 0) overlaps = true;
  if (!overlaps) {
    Eigen::VectorXd fc = oracle.crop_feature(s, corner);
    Eigen::VectorXd bg = b.projection.leftCols(cfg.d_app) * s.background_vec;
    CHECK((fc - bg).norm() < 1e-9);
  }

  CHECK_THROWS_AS(oracle.crop_feature(s, Box{3, 3, 3, 5}), std::invalid_argument);

  // with noise on, same (scene, box) still gives identical vectors
  WorldConfig noisy = small_config(9);
  Benchmark bn = generate_benchmark(noisy);
  FeatureOracle on = bn.oracle();
  CHECK(on.crop_feature(bn.source[0], bn.source[0].objects[0].box) ==
        on.crop_feature(bn.source[0], bn.source[0].objects[0].box));
}

TEST_CASE("dataset files round-trip bit-exactly") {
  namespace fs = std::filesystem;
  WorldConfig cfg = small_config(17);
  Benchmark b = generate_benchmark(cfg);
  fs::path dir = fs::temp_directory_path() / "dadapt_world_test";
  fs::remove_all(dir);
  save_benchmark(b, dir.string());
  Benchmark loaded = load_benchmark(dir.string());

  REQUIRE(loaded.source.size() == b.source.size());
  for (std::size_t i = 0; i < b.source.size(); ++i)
    CHECK(scene_to_json_line(loaded.source[i]) == scene_to_json_line(b.source[i]));
  for (std::size_t i = 0; i < b.target.size(); ++i)
    CHECK(scene_to_json_line(loaded.target[i]) == scene_to_json_line(b.target[i]));
  CHECK(loaded.projection == b.projection);
  CHECK(loaded.domain_spec.appearance_map == b.domain_spec.appearance_map);

  // saving the loaded copy reproduces the original bytes
  fs::path dir2 = fs::temp_directory_path() / "dadapt_world_test2";
  fs::remove_all(dir2);
  save_benchmark(loaded, dir2.string());
  for (const char* name : {"scenes_source.jsonl", "scenes_target.jsonl", "world.json"}) {
    std::ifstream f1(dir / name), f2(dir2 / name);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
  }
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("appearance map is near-orthogonal and reported") {
  Benchmark b = generate_benchmark(small_config(3));
  CHECK(b.domain_spec.condition_number == doctest::Approx(1.0).epsilon(1e-6));
  Eigen::MatrixXd should_be_eye =
      b.domain_spec.appearance_map.transpose() * b.domain_spec.appearance_map;
  CHECK((should_be_eye - Eigen::MatrixXd::Identity(8, 8)).norm() < 1e-9);
}

TEST_CASE("probe: source crops are separable, the shift breaks the probe") {
  WorldConfig cfg;  // reference configuration
  cfg.seed = 0;
  Benchmark b = generate_benchmark(cfg);

  auto [x_src, y_src] = gt_crops(b, b.source);
  auto [x_tgt, y_tgt] = gt_crops(b, b.target);
  REQUIRE(x_src.rows() > 100);

  long half = x_src.rows() / 2;
  Matrix x_train = x_src.topRows(half);
  std::vector<int> y_train(y_src.begin(), y_src.begin() + half);
  Matrix x_hold = x_src.bottomRows(x_src.rows() - half);
  std::vector<int> y_hold(y_src.begin() + half, y_src.end());

  double acc_src = linear_probe_accuracy(x_train, y_train, x_hold, y_hold, cfg.n_classes);
  double acc_tgt = linear_probe_accuracy(x_train, y_train, x_tgt, y_tgt, cfg.n_classes);

  CHECK(acc_src > 0.95);
  CHECK(acc_src - acc_tgt >= 0.15);
}
