#pragma once

#include <functional>
#include <vector>

#include "dadapt/autodiff.hpp"
#include "dadapt/rng.hpp"

// Central-finite-difference oracle for reverse-mode gradients. The build
// callback reconstructs the graph from scratch for every evaluation, so
// the oracle stays independent of any cached state.

namespace fdtest {

using dadapt::Rng;
using dadapt::ad::Matrix;
using dadapt::ad::Tape;
using dadapt::ad::Value;

using BuildFn = std::function<Value(Tape&, const std::vector<Value>&)>;

struct FdReport {
  int checked = 0;
  double max_rel_err = 0.0;
};

inline double eval_scalar(const std::vector<Matrix>& inputs, const BuildFn& build) {
  Tape tape;
  std::vector<Value> leaves;
  leaves.reserve(inputs.size());
  for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
  return tape.scalar_of(build(tape, leaves));
}

// Compares reverse-mode gradients against central differences at
// n_coords random coordinates spread over all inputs.
inline FdReport check_gradients(std::vector<Matrix> inputs, const BuildFn& build, int n_coords,
                                Rng& rng, double tol = 1e-5, double h = 1e-5) {
  Tape tape;
  std::vector<Value> leaves;
  for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
  Value root = build(tape, leaves);
  tape.backward(root);
  std::vector<Matrix> grads;
  grads.reserve(leaves.size());
  for (Value v : leaves) grads.push_back(tape.grad(v));

  long total = 0;
  for (const auto& m : inputs) total += m.size();

  FdReport report;
  for (int c = 0; c < n_coords; ++c) {
    long flat = static_cast<long>(rng.next_u64() % static_cast<std::uint64_t>(total));
    std::size_t which = 0;
    while (flat >= inputs[which].size()) {
      flat -= inputs[which].size();
      ++which;
    }
    long r = flat % inputs[which].rows();
    long col = flat / inputs[which].rows();

    double saved = inputs[which](r, col);
    inputs[which](r, col) = saved + h;
    double f_plus = eval_scalar(inputs, build);
    inputs[which](r, col) = saved - h;
    double f_minus = eval_scalar(inputs, build);
    inputs[which](r, col) = saved;

    double fd = (f_plus - f_minus) / (2.0 * h);
    double ad = grads[which](r, col);
    double rel = std::abs(ad - fd) / std::max(std::abs(ad) + std::abs(fd), 1e-6);
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.checked;
    if (rel >= tol) return report;  // caller asserts on max_rel_err
  }
  return report;
}

using ParamBuildFn = std::function<dadapt::ad::Value(dadapt::ad::Tape&, const dadapt::ad::Binding&)>;

// Same oracle, but perturbing entries of a parameter store; the build
// callback re-binds the store on every evaluation.
inline FdReport check_param_gradients(dadapt::ad::ParamStore& store, const ParamBuildFn& build,
                                      int n_coords, Rng& rng, double tol = 1e-5,
                                      double h = 1e-5) {
  auto eval = [&]() {
    Tape tape;
    dadapt::ad::Binding b = store.bind(tape);
    return tape.scalar_of(build(tape, b));
  };

  Tape tape;
  dadapt::ad::Binding binding = store.bind(tape);
  Value root = build(tape, binding);
  tape.backward(root);
  std::vector<Matrix> grads;
  for (int i = 0; i < store.size(); ++i) grads.push_back(tape.grad(binding.at(i)));

  long total = 0;
  for (int i = 0; i < store.size(); ++i) total += store.value(i).size();

  FdReport report;
  for (int c = 0; c < n_coords; ++c) {
    long flat = static_cast<long>(rng.next_u64() % static_cast<std::uint64_t>(total));
    int which = 0;
    while (flat >= store.value(which).size()) {
      flat -= store.value(which).size();
      ++which;
    }
    long r = flat % store.value(which).rows();
    long col = flat / store.value(which).rows();

    double saved = store.value(which)(r, col);
    store.value(which)(r, col) = saved + h;
    double f_plus = eval();
    store.value(which)(r, col) = saved - h;
    double f_minus = eval();
    store.value(which)(r, col) = saved;

    double fd = (f_plus - f_minus) / (2.0 * h);
    double ad_g = grads[static_cast<std::size_t>(which)](r, col);
    double rel = std::abs(ad_g - fd) / std::max(std::abs(ad_g) + std::abs(fd), 1e-6);
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.checked;
  }
  return report;
}

inline Matrix random_matrix(long rows, long cols, Rng& rng, double scale = 1.0) {
  Matrix m(rows, cols);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) m(i, j) = scale * rng.gaussian();
  return m;
}

// Gaussian entries nudged away from the kinks of relu and smooth-l1.
inline Matrix random_matrix_off_kinks(long rows, long cols, Rng& rng) {
  Matrix m = random_matrix(rows, cols, rng);
  for (long i = 0; i < rows; ++i)
    for (long j = 0; j < cols; ++j) {
      double v = m(i, j);
      for (double kink : {0.0, 1.0, -1.0})
        if (std::abs(v - kink) < 5e-3) v += v >= kink ? 1e-2 : -1e-2;
      m(i, j) = v;
    }
  return m;
}

}  // namespace fdtest
