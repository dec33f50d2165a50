#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "dadapt/rng.hpp"

namespace dadapt::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

// Handle to a node owned by a Tape. Cheap to copy; invalidated when the
// tape is destroyed.
struct Value {
  Tape* tape = nullptr;
  int id = -1;
};

// One tape entry: forward data, accumulated gradient, provenance.
struct TensorNode {
  Matrix data;
  Matrix grad;  // same shape as data, zero until backward
  const char* op = "leaf";
  std::vector<int> parents;
  std::function<void(Tape&)> pull;  // empty for leaves and detach
};

// Append-only record of one forward computation. Nodes are topologically
// ordered by construction; backward walks ids in decreasing order.
class Tape {
 public:
  Value leaf(Matrix data);
  Value scalar(double v);

  Value push(Matrix data, const char* op, std::vector<int> parents,
             std::function<void(Tape&)> pull);

  const Matrix& data(Value v) const { return node(v).data; }
  Matrix& grad(Value v) { return node(v).grad; }
  const Matrix& grad(Value v) const { return node(v).grad; }
  double scalar_of(Value v) const;

  TensorNode& node(Value v);
  const TensorNode& node(Value v) const;
  TensorNode& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }

  int size() const { return static_cast<int>(nodes_.size()); }

  // Seeds grad(root) with 1 and accumulates exact reverse-mode gradients
  // into every ancestor. root must be 1x1. May be called more than once;
  // gradients accumulate.
  void backward(Value root);

  void zero_grads();

 private:
  std::vector<TensorNode> nodes_;
};

inline void backward(Tape& tape, Value root) { tape.backward(root); }

// ---- primitives ------------------------------------------------------

Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);  // elementwise
Value matmul(Value a, Value b);
Value add_rowvec(Value x, Value bias);  // [N x C] + [1 x C]
Value relu(Value x);
// Output clamped to [1e-7, 1 - 1e-7] so downstream logs stay finite.
Value sigmoid(Value x);
Value logv(Value x);
Value mean(Value x);  // over all elements, -> 1x1
Value scale(Value x, double c);
Value concat_cols(Value a, Value b);
Value slice_cols(Value x, int start, int n);
Value slice_rows(Value x, int start, int n);
Value detach(Value x);
// Identity forward; backward multiplies the incoming gradient by -lambda.
Value grad_reverse(Value x, double lambda_coeff);
// Elementwise 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
Value smooth_l1(Value x);
// Mean over rows of -log softmax(logits)[label]; max-subtraction stabilized.
Value cross_entropy(Value logits, const std::vector<int>& labels);
// Sum of w_i log d_i over source rows plus w_i log(1 - d_i) over target
// rows, each averaged within its domain. d is [N x 1], clamped into
// (0, 1) before the logs. Requires at least one row per domain.
Value weighted_bce(Value d, const std::vector<std::uint8_t>& is_source,
                   const Eigen::VectorXd& weights);
// Per-row gather of a block of `block` columns starting at class_id*block.
Value select_channels(Value x, const std::vector<int>& class_ids, int block);

// mean over rows of the per-row column sums; equals mean(x) * cols
Value mean_row_sums(Value x);

// Elementwise clamp to [-bound, bound], composed from relu; gradient is
// identity inside the interval and zero outside.
Value clamp_sym(Value x, double bound);

// ---- parameters ------------------------------------------------------

struct SgdHyper {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

struct Binding;

// Raised by sgd_step when a gradient is not finite.
struct NonFiniteGradient : std::runtime_error {
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"),
        param_name(param) {}
  std::string param_name;
};

// Named trainable matrices plus per-parameter momentum buffers. Entry
// order is fixed at creation time and defines the checkpoint layout.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix momentum;
  };

  int add(std::string name, Matrix init);
  int index_of(const std::string& name) const;
  bool contains(const std::string& name) const;

  Matrix& value(int idx) { return entries_[static_cast<std::size_t>(idx)].value; }
  const Matrix& value(int idx) const { return entries_[static_cast<std::size_t>(idx)].value; }
  const Matrix& value(const std::string& name) const { return value(index_of(name)); }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }
  int size() const { return static_cast<int>(entries_.size()); }

  void reset_momentum();

  // Emits every parameter as a leaf on the tape.
  Binding bind(Tape& tape) const;

  SgdHyper hyper;

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> by_name_;
};

// Tape-local view of a store: value ids aligned with store entry order.
struct Binding {
  Tape* tape = nullptr;
  std::vector<Value> values;

  Value at(int idx) const { return values[static_cast<std::size_t>(idx)]; }
};

// v <- momentum * v + g + weight_decay * p;  p <- p - lr * v.
// Parameters whose tape gradient is identically zero are left untouched.
// Gradients on the bound leaves are zeroed afterwards.
void sgd_step(ParamStore& store, const Binding& binding, double lr);

// ---- small MLP -------------------------------------------------------

// Fully connected stack with relu between hidden layers and a linear
// output. Weights are Glorot-uniform, biases zero.
struct Mlp {
  std::vector<int> dims;
  std::vector<int> w_idx;
  std::vector<int> b_idx;

  static Mlp create(ParamStore& store, const std::string& prefix,
                    const std::vector<int>& layer_dims, Rng& rng);

  Value forward(Tape& tape, const Binding& binding, Value x) const;

  // Forward on a scratch tape; for inference paths.
  Matrix infer(const ParamStore& store, const Matrix& x) const;
};

// Row-wise softmax computed outside the tape.
Matrix softmax_rows(const Matrix& logits);

}  // namespace dadapt::ad
