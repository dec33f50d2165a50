#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dadapt/autodiff.hpp"
#include "dadapt/checkpoint.hpp"
#include "dadapt/errors.hpp"
#include "fd_check.hpp"

using namespace dadapt;
using ad::Matrix;
using ad::Tape;
using ad::Value;
using fdtest::check_gradients;
using fdtest::random_matrix;
using fdtest::random_matrix_off_kinks;

TEST_CASE("elementwise and matmul primitives match finite differences") {
  Rng rng(11);
  auto check = [&](const char* name, std::vector<Matrix> inputs, const fdtest::BuildFn& build) {
    CAPTURE(name);
    auto rep = check_gradients(std::move(inputs), build, 20, rng);
    CHECK(rep.max_rel_err < 1e-5);
  };

  check("add", {random_matrix(3, 4, rng), random_matrix(3, 4, rng)},
        [](Tape& t, const std::vector<Value>& v) { return ad::mean(ad::add(v[0], v[1])); });
  check("sub", {random_matrix(3, 4, rng), random_matrix(3, 4, rng)},
        [](Tape& t, const std::vector<Value>& v) {
          return ad::mean(ad::mul(ad::sub(v[0], v[1]), ad::sub(v[0], v[1])));
        });
  check("mul", {random_matrix(3, 4, rng), random_matrix(3, 4, rng)},
        [](Tape& t, const std::vector<Value>& v) { return ad::mean(ad::mul(v[0], v[1])); });
  check("matmul", {random_matrix(3, 5, rng), random_matrix(5, 2, rng)},
        [](Tape& t, const std::vector<Value>& v) {
          return ad::mean(ad::smooth_l1(ad::matmul(v[0], v[1])));
        });
  check("add_rowvec", {random_matrix(4, 3, rng), random_matrix(1, 3, rng)},
        [](Tape& t, const std::vector<Value>& v) {
          return ad::mean(ad::relu(ad::add_rowvec(v[0], v[1])));
        });
  check("relu", {random_matrix_off_kinks(4, 4, rng)},
        [](Tape& t, const std::vector<Value>& v) { return ad::mean(ad::relu(v[0])); });
  check("sigmoid", {random_matrix(4, 4, rng, 2.0)},
        [](Tape& t, const std::vector<Value>& v) { return ad::mean(ad::sigmoid(v[0])); });
  check("log", {Matrix(random_matrix(4, 4, rng).array().abs() + 0.5)},
        [](Tape& t, const std::vector<Value>& v) { return ad::mean(ad::logv(v[0])); });
  check("mean+scale", {random_matrix(5, 3, rng)},
        [](Tape& t, const std::vector<Value>& v) { return ad::scale(ad::mean(v[0]), 2.5); });
  check("concat_cols", {random_matrix(3, 2, rng), random_matrix(3, 4, rng)},
        [](Tape& t, const std::vector<Value>& v) {
          return ad::mean(ad::smooth_l1(ad::concat_cols(v[0], v[1])));
        });
  check("slice_cols", {random_matrix(3, 6, rng)},
        [](Tape& t, const std::vector<Value>& v) {
          return ad::mean(ad::slice_cols(v[0], 1, 3));
        });
  check("slice_rows", {random_matrix(6, 3, rng)},
        [](Tape& t, const std::vector<Value>& v) {
          return ad::mean(ad::slice_rows(v[0], 2, 3));
        });
  check("smooth_l1", {random_matrix_off_kinks(4, 4, rng)},
        [](Tape& t, const std::vector<Value>& v) { return ad::mean(ad::smooth_l1(v[0])); });
  check("mean_row_sums", {random_matrix(4, 5, rng)},
        [](Tape& t, const std::vector<Value>& v) { return ad::mean_row_sums(v[0]); });

  std::vector<int> labels = {0, 2, 1, 3};
  check("cross_entropy", {random_matrix(4, 4, rng, 2.0)},
        [labels](Tape& t, const std::vector<Value>& v) {
          return ad::cross_entropy(v[0], labels);
        });

  std::vector<std::uint8_t> is_src = {1, 1, 1, 0, 0, 0};
  Eigen::VectorXd w(6);
  w << 1, 0, 0.5, 1, 1, 0;
  check("weighted_bce", {random_matrix(6, 1, rng, 1.5)},
        [is_src, w](Tape& t, const std::vector<Value>& v) {
          return ad::weighted_bce(ad::sigmoid(v[0]), is_src, w);
        });

  std::vector<int> chans = {0, 2, 1, 0};
  check("select_channels", {random_matrix(4, 12, rng)},
        [chans](Tape& t, const std::vector<Value>& v) {
          return ad::mean(ad::smooth_l1(ad::select_channels(v[0], chans, 4)));
        });

  // composite: matmul + relu + cross-entropy, the full classifier path
  std::vector<int> comp_labels = {1, 0, 2, 2, 1};
  check("mlp composite",
        {random_matrix(5, 6, rng), random_matrix(6, 8, rng), random_matrix(1, 8, rng),
         random_matrix(8, 3, rng), random_matrix(1, 3, rng)},
        [comp_labels](Tape& t, const std::vector<Value>& v) {
          Value h = ad::relu(ad::add_rowvec(ad::matmul(v[0], v[1]), v[2]));
          Value logits = ad::add_rowvec(ad::matmul(h, v[3]), v[4]);
          return ad::cross_entropy(logits, comp_labels);
        });
}

TEST_CASE("grad_reverse is identity forward and exactly -lambda backward") {
  for (double lambda : {0.0, 0.1, 1.0}) {
    Tape tape;
    Matrix x(1, 2);
    x << 1.0, -2.0;
    Value xv = tape.leaf(x);
    Value y = ad::grad_reverse(xv, lambda);
    CHECK(tape.data(y) == x);  // bitwise identity

    // root = sum(y * c): incoming gradient to y is exactly c
    Matrix c(1, 2);
    c << 0.5, 2.0;
    Value root = ad::scale(ad::mean(ad::mul(y, tape.leaf(c))), 2.0);  // undo mean's 1/2
    tape.backward(root);
    CHECK(tape.grad(xv)(0, 0) == -lambda * 0.5);
    CHECK(tape.grad(xv)(0, 1) == -lambda * 2.0);
  }
  CHECK_THROWS_AS(([] {
                    Tape t;
                    ad::grad_reverse(t.scalar(1.0), -0.1);
                  })(),
                  std::invalid_argument);
}

TEST_CASE("detach blocks upstream gradient") {
  Rng rng(3);
  Tape tape;
  Value x = tape.leaf(random_matrix(2, 2, rng));
  Value d = ad::detach(x);
  Value root = ad::mean(ad::mul(d, d));
  tape.backward(root);
  CHECK(tape.grad(x).isZero(0.0));
  CHECK(tape.data(d) == tape.data(x));
}

TEST_CASE("smooth_l1 matches the closed form and is C1 at the knee") {
  Tape tape;
  Matrix x(1, 4);
  x << 0.0, 0.5, 2.0, 3.0;
  Value v = ad::smooth_l1(tape.leaf(x));
  CHECK(tape.data(v)(0, 0) == 0.0);
  CHECK(tape.data(v)(0, 1) == doctest::Approx(0.125).epsilon(1e-12));
  CHECK(tape.data(v)(0, 2) == doctest::Approx(1.5).epsilon(1e-12));

  // derivative at x=3 equals 1 within 1e-9 (central differences)
  auto f = [](double xv) { return xv * xv < 1 ? 0.5 * xv * xv : std::abs(xv) - 0.5; };
  double h = 1e-5;
  double fd = (f(3.0 + h) - f(3.0 - h)) / (2 * h);
  Tape t2;
  Value xs = t2.leaf(Matrix::Constant(1, 1, 3.0));
  t2.backward(ad::mean(ad::smooth_l1(xs)));
  CHECK(t2.grad(xs)(0, 0) == doctest::Approx(fd).epsilon(1e-9));
  CHECK(t2.grad(xs)(0, 0) == doctest::Approx(1.0).epsilon(1e-12));

  // value and one-sided derivatives agree at |x| = 1
  CHECK(f(1.0) == doctest::Approx(0.5));
  double left = (f(1.0) - f(1.0 - h)) / h;
  double right = (f(1.0 + h) - f(1.0)) / h;
  CHECK(left == doctest::Approx(right).epsilon(1e-4));
}

TEST_CASE("cross_entropy closed-form cases") {
  Tape tape;
  Matrix uniform = Matrix::Constant(2, 4, 0.7);
  Value ce = ad::cross_entropy(tape.leaf(uniform), {1, 3});
  CHECK(tape.scalar_of(ce) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Matrix sharp(1, 2);
  sharp << 10.0, -10.0;
  Value ce2 = ad::cross_entropy(tape.leaf(sharp), {0});
  CHECK(tape.scalar_of(ce2) == doctest::Approx(std::log1p(std::exp(-20.0))).epsilon(1e-9));
  CHECK(tape.scalar_of(ce2) == doctest::Approx(2.061e-9).epsilon(1e-3));

  CHECK_THROWS_AS(ad::cross_entropy(tape.leaf(sharp), {2}), std::invalid_argument);
}

TEST_CASE("weighted_bce matches a scalar re-implementation") {
  Tape tape;
  Matrix d = Matrix::Constant(4, 1, 0.5);
  std::vector<std::uint8_t> is_src = {1, 1, 0, 0};
  Eigen::VectorXd w = Eigen::VectorXd::Ones(4);
  Value v = ad::weighted_bce(tape.leaf(d), is_src, w);
  CHECK(tape.scalar_of(v) == doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-12));

  Value z = ad::weighted_bce(tape.leaf(d), is_src, Eigen::VectorXd::Zero(4));
  CHECK(tape.scalar_of(z) == 0.0);

  // random batch against a term-by-term loop
  Rng rng(5);
  int n = 9;
  Matrix dr(n, 1);
  std::vector<std::uint8_t> flags;
  Eigen::VectorXd wr(n);
  for (int i = 0; i < n; ++i) {
    dr(i, 0) = rng.uniform(0.05, 0.95);
    flags.push_back(i < 4 ? 1 : 0);
    wr(i) = rng.uniform(0.0, 2.0);
  }
  double expect_src = 0.0, expect_tgt = 0.0;
  for (int i = 0; i < n; ++i) {
    if (flags[static_cast<std::size_t>(i)])
      expect_src += wr(i) * std::log(dr(i, 0));
    else
      expect_tgt += wr(i) * std::log(1.0 - dr(i, 0));
  }
  double expect = expect_src / 4.0 + expect_tgt / 5.0;
  Value vr = ad::weighted_bce(tape.leaf(dr), flags, wr);
  CHECK(std::abs(tape.scalar_of(vr) - expect) < 1e-12);

  std::vector<std::uint8_t> all_src = {1, 1, 1, 1};
  CHECK_THROWS_AS(ad::weighted_bce(tape.leaf(d), all_src, w), std::invalid_argument);
}

TEST_CASE("backward basics: square, reachability, scalar-only roots") {
  Tape tape;
  Value x = tape.leaf(Matrix::Constant(1, 1, 3.0));
  Value y = ad::mul(x, x);
  tape.backward(y);
  CHECK(tape.grad(x)(0, 0) == 6.0);

  // a second, disjoint graph on the same tape keeps zero grads
  Value a = tape.leaf(Matrix::Constant(1, 1, 2.0));
  Value b = ad::mul(a, a);
  CHECK(tape.grad(a).isZero(0.0));
  (void)b;

  CHECK_THROWS_AS(tape.backward(tape.leaf(Matrix::Zero(2, 2))), std::invalid_argument);
}

TEST_CASE("sgd_step: vanilla step, momentum recursion, non-finite guard") {
  ad::ParamStore store;
  store.hyper.momentum = 0.0;
  int p = store.add("w", Matrix::Constant(1, 1, 1.0));

  {
    Tape tape;
    ad::Binding b = store.bind(tape);
    Value root = ad::mean(ad::mul(b.at(p), tape.leaf(Matrix::Constant(1, 1, 0.5))));
    tape.backward(root);
    ad::sgd_step(store, b, 0.1);
    CHECK(store.value(p)(0, 0) == doctest::Approx(0.95).epsilon(1e-12));
  }

  // momentum: v1 = g1, v2 = m v1 + g2; p = p0 - lr (v1 + v2)
  ad::ParamStore s2;
  s2.hyper.momentum = 0.9;
  int q = s2.add("w", Matrix::Constant(1, 1, 1.0));
  double g1 = 0.5, g2 = 0.25, lr = 0.1;
  for (double g : {g1, g2}) {
    Tape tape;
    ad::Binding b = s2.bind(tape);
    Value root = ad::mean(ad::mul(b.at(q), tape.leaf(Matrix::Constant(1, 1, g))));
    tape.backward(root);
    ad::sgd_step(s2, b, lr);
  }
  double v1 = g1;
  double v2 = 0.9 * v1 + g2;
  CHECK(s2.value(q)(0, 0) == doctest::Approx(1.0 - lr * (v1 + v2)).epsilon(1e-12));

  ad::ParamStore s3;
  int r = s3.add("mlp.W0", Matrix::Constant(1, 1, 1.0));
  Tape tape;
  ad::Binding b = s3.bind(tape);
  Value root = ad::mean(ad::mul(b.at(r), tape.leaf(Matrix::Constant(1, 1,
                                                   std::numeric_limits<double>::quiet_NaN()))));
  tape.backward(root);
  try {
    ad::sgd_step(s3, b, 0.1);
    FAIL("expected NonFiniteGradient");
  } catch (const ad::NonFiniteGradient& e) {
    CHECK(e.param_name == "mlp.W0");
  }
}

TEST_CASE("determinism: same seed, same tape order, same bits") {
  auto run = [] {
    Rng rng(77);
    ad::ParamStore store;
    ad::Mlp mlp = ad::Mlp::create(store, "m", {4, 8, 2}, rng);
    Tape tape;
    ad::Binding b = store.bind(tape);
    Matrix x = fdtest::random_matrix(5, 4, rng);
    Value out = mlp.forward(tape, b, tape.leaf(x));
    Value root = ad::cross_entropy(out, {0, 1, 0, 1, 1});
    tape.backward(root);
    return std::make_pair(tape.scalar_of(root), Matrix(tape.grad(b.at(0))));
  };
  auto [v1, g1] = run();
  auto [v2, g2] = run();
  CHECK(v1 == v2);
  CHECK(g1 == g2);
}

TEST_CASE("checkpoints round-trip bit-exactly and detect corruption") {
  namespace fs = std::filesystem;
  Rng rng(13);
  ad::ParamStore store;
  ad::Mlp::create(store, "net", {3, 5, 2}, rng);
  fs::path dir = fs::temp_directory_path() / "dadapt_ckpt_test";
  fs::create_directories(dir);
  std::string path = (dir / "net.ckpt").string();
  save_params(store, path);

  ad::ParamStore loaded;
  Rng rng2(99);  // different init, must be overwritten exactly
  ad::Mlp::create(loaded, "net", {3, 5, 2}, rng2);
  load_params(loaded, path);
  for (int i = 0; i < store.size(); ++i)
    CHECK(loaded.value(i) == store.value(i));

  auto names = checkpoint_param_names(path);
  REQUIRE(names.size() == 4);
  CHECK(names[0] == "net.W0");

  // flip one payload character: checksum must catch it
  std::ifstream in(path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto pos = text.find("\"data\":[");
  REQUIRE(pos != std::string::npos);
  pos += 9;
  text[pos] = text[pos] == '1' ? '2' : '1';
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.close();
  CHECK_THROWS_AS(load_params(loaded, path), IntegrityError);

  CHECK_THROWS_AS(load_params(loaded, (dir / "missing.ckpt").string()), IoError);
  fs::remove_all(dir);
}
