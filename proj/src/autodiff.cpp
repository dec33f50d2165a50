#include "dadapt/autodiff.hpp"

#include <cmath>

namespace dadapt::ad {

namespace {

constexpr double kSigmoidClamp = 1e-7;

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

void check_same_tape(Value a, Value b, const char* op) {
  if (a.tape != b.tape) throw std::invalid_argument(std::string(op) + ": values on different tapes");
}

// Pull receives the finished node so it can read its own data and grad.
template <typename Pull>
Value push_op(Tape& t, Matrix out, const char* op, std::vector<int> parents, Pull&& pull) {
  Value v = t.push(std::move(out), op, std::move(parents), nullptr);
  int self = v.id;
  t.node(v).pull = [self, pull = std::forward<Pull>(pull)](Tape& tp) {
    pull(tp, tp.node(self));
  };
  return v;
}

}  // namespace

Value Tape::leaf(Matrix data) { return push(std::move(data), "leaf", {}, nullptr); }

Value Tape::scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return leaf(std::move(m));
}

Value Tape::push(Matrix data, const char* op, std::vector<int> parents,
                 std::function<void(Tape&)> pull) {
  TensorNode n;
  n.grad = Matrix::Zero(data.rows(), data.cols());
  n.data = std::move(data);
  n.op = op;
  n.parents = std::move(parents);
  n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

TensorNode& Tape::node(Value v) {
  if (v.tape != this) throw std::invalid_argument("value does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const TensorNode& Tape::node(Value v) const {
  if (v.tape != this) throw std::invalid_argument("value does not belong to this tape");
  return nodes_[static_cast<std::size_t>(v.id)];
}

double Tape::scalar_of(Value v) const {
  const Matrix& m = node(v).data;
  if (m.size() != 1) throw std::invalid_argument("scalar_of: node is not 1x1");
  return m(0, 0);
}

void Tape::backward(Value root) {
  TensorNode& r = node(root);
  if (r.data.size() != 1) throw std::invalid_argument("backward: root must be scalar");
  r.grad(0, 0) += 1.0;
  for (int id = root.id; id >= 0; --id) {
    TensorNode& n = nodes_[static_cast<std::size_t>(id)];
    if (n.pull && !n.grad.isZero(0.0)) n.pull(*this);
  }
}

void Tape::zero_grads() {
  for (auto& n : nodes_) n.grad.setZero();
}

// ---- primitives ------------------------------------------------------

Value add(Value a, Value b) {
  check_same_tape(a, b, "add");
  Tape& t = *a.tape;
  check_same_shape(t.data(a), t.data(b), "add");
  int ia = a.id, ib = b.id;
  return push_op(t, t.data(a) + t.data(b), "add", {ia, ib},
                 [ia, ib](Tape& tp, const TensorNode& self) {
                   tp.node(ia).grad += self.grad;
                   tp.node(ib).grad += self.grad;
                 });
}

Value sub(Value a, Value b) {
  check_same_tape(a, b, "sub");
  Tape& t = *a.tape;
  check_same_shape(t.data(a), t.data(b), "sub");
  int ia = a.id, ib = b.id;
  return push_op(t, t.data(a) - t.data(b), "sub", {ia, ib},
                 [ia, ib](Tape& tp, const TensorNode& self) {
                   tp.node(ia).grad += self.grad;
                   tp.node(ib).grad -= self.grad;
                 });
}

Value mul(Value a, Value b) {
  check_same_tape(a, b, "mul");
  Tape& t = *a.tape;
  check_same_shape(t.data(a), t.data(b), "mul");
  int ia = a.id, ib = b.id;
  return push_op(t, t.data(a).cwiseProduct(t.data(b)), "mul", {ia, ib},
                 [ia, ib](Tape& tp, const TensorNode& self) {
                   tp.node(ia).grad += self.grad.cwiseProduct(tp.node(ib).data);
                   tp.node(ib).grad += self.grad.cwiseProduct(tp.node(ia).data);
                 });
}

Value matmul(Value a, Value b) {
  check_same_tape(a, b, "matmul");
  Tape& t = *a.tape;
  if (t.data(a).cols() != t.data(b).rows())
    throw std::invalid_argument("matmul: inner dimensions disagree");
  int ia = a.id, ib = b.id;
  return push_op(t, t.data(a) * t.data(b), "matmul", {ia, ib},
                 [ia, ib](Tape& tp, const TensorNode& self) {
                   tp.node(ia).grad += self.grad * tp.node(ib).data.transpose();
                   tp.node(ib).grad += tp.node(ia).data.transpose() * self.grad;
                 });
}

Value add_rowvec(Value x, Value bias) {
  check_same_tape(x, bias, "add_rowvec");
  Tape& t = *x.tape;
  const Matrix& xm = t.data(x);
  const Matrix& bm = t.data(bias);
  if (bm.rows() != 1 || bm.cols() != xm.cols())
    throw std::invalid_argument("add_rowvec: bias must be 1 x cols(x)");
  int ix = x.id, ib = bias.id;
  Matrix out = xm.rowwise() + bm.row(0);
  return push_op(t, std::move(out), "add_rowvec", {ix, ib},
                 [ix, ib](Tape& tp, const TensorNode& self) {
                   tp.node(ix).grad += self.grad;
                   tp.node(ib).grad += self.grad.colwise().sum();
                 });
}

Value relu(Value x) {
  Tape& t = *x.tape;
  int ix = x.id;
  return push_op(t, t.data(x).cwiseMax(0.0), "relu", {ix},
                 [ix](Tape& tp, const TensorNode& self) {
                   const Matrix& xm = tp.node(ix).data;
                   tp.node(ix).grad +=
                       self.grad.cwiseProduct((xm.array() > 0.0).cast<double>().matrix());
                 });
}

Value sigmoid(Value x) {
  Tape& t = *x.tape;
  int ix = x.id;
  Matrix s = (1.0 / (1.0 + (-t.data(x).array()).exp()))
                 .cwiseMax(kSigmoidClamp)
                 .cwiseMin(1.0 - kSigmoidClamp)
                 .matrix();
  return push_op(t, std::move(s), "sigmoid", {ix},
                 [ix](Tape& tp, const TensorNode& self) {
                   const Matrix& sm = self.data;
                   tp.node(ix).grad += self.grad.cwiseProduct(
                       sm.cwiseProduct((1.0 - sm.array()).matrix()));
                 });
}

Value logv(Value x) {
  Tape& t = *x.tape;
  if ((t.data(x).array() <= 0.0).any())
    throw std::invalid_argument("logv: nonpositive input");
  int ix = x.id;
  return push_op(t, t.data(x).array().log().matrix(), "log", {ix},
                 [ix](Tape& tp, const TensorNode& self) {
                   tp.node(ix).grad += self.grad.cwiseQuotient(tp.node(ix).data);
                 });
}

Value mean(Value x) {
  Tape& t = *x.tape;
  const Matrix& xm = t.data(x);
  Matrix out(1, 1);
  out(0, 0) = xm.mean();
  int ix = x.id;
  double inv_n = 1.0 / static_cast<double>(xm.size());
  return push_op(t, std::move(out), "mean", {ix},
                 [ix, inv_n](Tape& tp, const TensorNode& self) {
                   tp.node(ix).grad.array() += self.grad(0, 0) * inv_n;
                 });
}

Value scale(Value x, double c) {
  Tape& t = *x.tape;
  int ix = x.id;
  return push_op(t, (t.data(x).array() * c).matrix(), "scale", {ix},
                 [ix, c](Tape& tp, const TensorNode& self) {
                   tp.node(ix).grad += c * self.grad;
                 });
}

Value concat_cols(Value a, Value b) {
  check_same_tape(a, b, "concat_cols");
  Tape& t = *a.tape;
  const Matrix& am = t.data(a);
  const Matrix& bm = t.data(b);
  if (am.rows() != bm.rows()) throw std::invalid_argument("concat_cols: row count mismatch");
  Matrix out(am.rows(), am.cols() + bm.cols());
  out << am, bm;
  int ia = a.id, ib = b.id;
  long ca = am.cols();
  return push_op(t, std::move(out), "concat_cols", {ia, ib},
                 [ia, ib, ca](Tape& tp, const TensorNode& self) {
                   tp.node(ia).grad += self.grad.leftCols(ca);
                   tp.node(ib).grad += self.grad.rightCols(self.grad.cols() - ca);
                 });
}

Value slice_cols(Value x, int start, int n) {
  Tape& t = *x.tape;
  const Matrix& xm = t.data(x);
  if (start < 0 || n < 0 || start + n > xm.cols())
    throw std::invalid_argument("slice_cols: range out of bounds");
  int ix = x.id;
  return push_op(t, xm.middleCols(start, n), "slice_cols", {ix},
                 [ix, start, n](Tape& tp, const TensorNode& self) {
                   tp.node(ix).grad.middleCols(start, n) += self.grad;
                 });
}

Value slice_rows(Value x, int start, int n) {
  Tape& t = *x.tape;
  const Matrix& xm = t.data(x);
  if (start < 0 || n < 0 || start + n > xm.rows())
    throw std::invalid_argument("slice_rows: range out of bounds");
  int ix = x.id;
  return push_op(t, xm.middleRows(start, n), "slice_rows", {ix},
                 [ix, start, n](Tape& tp, const TensorNode& self) {
                   tp.node(ix).grad.middleRows(start, n) += self.grad;
                 });
}

Value detach(Value x) {
  Tape& t = *x.tape;
  return t.push(t.data(x), "detach", {x.id}, nullptr);
}

Value grad_reverse(Value x, double lambda_coeff) {
  if (lambda_coeff < 0.0) throw std::invalid_argument("grad_reverse: lambda must be >= 0");
  Tape& t = *x.tape;
  int ix = x.id;
  return push_op(t, t.data(x), "grad_reverse", {ix},
                 [ix, lambda_coeff](Tape& tp, const TensorNode& self) {
                   tp.node(ix).grad -= lambda_coeff * self.grad;
                 });
}

Value smooth_l1(Value x) {
  Tape& t = *x.tape;
  Matrix out = t.data(x).unaryExpr([](double v) {
    double a = std::abs(v);
    return a < 1.0 ? 0.5 * v * v : a - 0.5;
  });
  int ix = x.id;
  return push_op(t, std::move(out), "smooth_l1", {ix},
                 [ix](Tape& tp, const TensorNode& self) {
                   const Matrix& xm = tp.node(ix).data;
                   tp.node(ix).grad += self.grad.cwiseProduct(xm.cwiseMax(-1.0).cwiseMin(1.0));
                 });
}

Value cross_entropy(Value logits, const std::vector<int>& labels) {
  Tape& t = *logits.tape;
  const Matrix& lm = t.data(logits);
  const long n = lm.rows();
  const long c = lm.cols();
  if (static_cast<long>(labels.size()) != n)
    throw std::invalid_argument("cross_entropy: one label per row required");
  for (int y : labels)
    if (y < 0 || y >= c) throw std::invalid_argument("cross_entropy: label out of range");

  Matrix probs(n, c);
  double loss = 0.0;
  for (long i = 0; i < n; ++i) {
    double m = lm.row(i).maxCoeff();
    Eigen::ArrayXd e = (lm.row(i).array() - m).exp();
    double z = e.sum();
    probs.row(i) = (e / z).matrix();
    loss += m + std::log(z) - lm(i, labels[static_cast<std::size_t>(i)]);
  }
  Matrix out(1, 1);
  out(0, 0) = loss / static_cast<double>(n);

  int il = logits.id;
  return push_op(t, std::move(out), "cross_entropy", {il},
                 [il, probs, labels](Tape& tp, const TensorNode& self) {
                   Matrix d = probs;
                   for (long i = 0; i < d.rows(); ++i)
                     d(i, labels[static_cast<std::size_t>(i)]) -= 1.0;
                   tp.node(il).grad += (self.grad(0, 0) / static_cast<double>(d.rows())) * d;
                 });
}

Value weighted_bce(Value d, const std::vector<std::uint8_t>& is_source,
                   const Eigen::VectorXd& weights) {
  Tape& t = *d.tape;
  const Matrix& dm = t.data(d);
  const long n = dm.rows();
  if (dm.cols() != 1) throw std::invalid_argument("weighted_bce: d must be N x 1");
  if (static_cast<long>(is_source.size()) != n || weights.size() != n)
    throw std::invalid_argument("weighted_bce: flag/weight length mismatch");
  if ((weights.array() < 0.0).any())
    throw std::invalid_argument("weighted_bce: negative weight");

  long n_src = 0;
  for (auto f : is_source) n_src += f ? 1 : 0;
  long n_tgt = n - n_src;
  if (n_src == 0 || n_tgt == 0)
    throw std::invalid_argument("weighted_bce: batch must contain both domains");

  auto clamp01 = [](double v) {
    return std::min(std::max(v, kSigmoidClamp), 1.0 - kSigmoidClamp);
  };

  double acc_src = 0.0, acc_tgt = 0.0;
  for (long i = 0; i < n; ++i) {
    double dc = clamp01(dm(i, 0));
    if (is_source[static_cast<std::size_t>(i)])
      acc_src += weights(i) * std::log(dc);
    else
      acc_tgt += weights(i) * std::log(1.0 - dc);
  }
  Matrix out(1, 1);
  out(0, 0) = acc_src / static_cast<double>(n_src) + acc_tgt / static_cast<double>(n_tgt);

  int id = d.id;
  return push_op(t, std::move(out), "weighted_bce", {id},
                 [id, is_source, weights, n_src, n_tgt, clamp01](Tape& tp,
                                                                 const TensorNode& self) {
                   const Matrix& dm2 = tp.node(id).data;
                   Matrix& gd = tp.node(id).grad;
                   double g0 = self.grad(0, 0);
                   for (long i = 0; i < dm2.rows(); ++i) {
                     double raw = dm2(i, 0);
                     double dc = clamp01(raw);
                     if (dc != raw) continue;  // clamped: flat region
                     if (is_source[static_cast<std::size_t>(i)])
                       gd(i, 0) += g0 * weights(i) / (dc * static_cast<double>(n_src));
                     else
                       gd(i, 0) -= g0 * weights(i) / ((1.0 - dc) * static_cast<double>(n_tgt));
                   }
                 });
}

Value select_channels(Value x, const std::vector<int>& class_ids, int block) {
  Tape& t = *x.tape;
  const Matrix& xm = t.data(x);
  const long n = xm.rows();
  if (static_cast<long>(class_ids.size()) != n)
    throw std::invalid_argument("select_channels: one class id per row required");
  for (int k : class_ids)
    if (k < 0 || (k + 1) * block > xm.cols())
      throw std::invalid_argument("select_channels: class id out of range");

  Matrix out(n, block);
  for (long i = 0; i < n; ++i)
    out.row(i) = xm.block(i, class_ids[static_cast<std::size_t>(i)] * block, 1, block);

  int ix = x.id;
  return push_op(t, std::move(out), "select_channels", {ix},
                 [ix, class_ids, block](Tape& tp, const TensorNode& self) {
                   Matrix& gx = tp.node(ix).grad;
                   for (long i = 0; i < self.grad.rows(); ++i)
                     gx.block(i, class_ids[static_cast<std::size_t>(i)] * block, 1, block) +=
                         self.grad.row(i);
                 });
}

Value mean_row_sums(Value x) {
  Tape& t = *x.tape;
  return scale(mean(x), static_cast<double>(t.data(x).cols()));
}

Value clamp_sym(Value x, double bound) {
  if (bound <= 0.0) throw std::invalid_argument("clamp_sym: bound must be > 0");
  Tape& t = *x.tape;
  const Matrix& xm = t.data(x);
  Value c = t.leaf(Matrix::Constant(xm.rows(), xm.cols(), bound));
  // x - relu(x - bound) + relu(-x - bound)
  Value over = relu(sub(x, c));
  Value under = relu(sub(scale(x, -1.0), c));
  return add(sub(x, over), under);
}

// ---- parameters ------------------------------------------------------

int ParamStore::add(std::string name, Matrix init) {
  if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Entry e;
  e.name = name;
  e.momentum = Matrix::Zero(init.rows(), init.cols());
  e.value = std::move(init);
  entries_.push_back(std::move(e));
  int idx = static_cast<int>(entries_.size()) - 1;
  by_name_.emplace(std::move(name), idx);
  return idx;
}

int ParamStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return it->second;
}

bool ParamStore::contains(const std::string& name) const { return by_name_.count(name) > 0; }

void ParamStore::reset_momentum() {
  for (auto& e : entries_) e.momentum.setZero();
}

Binding ParamStore::bind(Tape& tape) const {
  Binding b;
  b.tape = &tape;
  b.values.reserve(entries_.size());
  for (const auto& e : entries_) b.values.push_back(tape.leaf(e.value));
  return b;
}

void sgd_step(ParamStore& store, const Binding& binding, double lr) {
  if (lr <= 0.0) throw std::invalid_argument("sgd_step: learning rate must be > 0");
  if (static_cast<int>(binding.values.size()) != store.size())
    throw std::invalid_argument("sgd_step: binding does not match store");
  const SgdHyper& h = store.hyper;
  for (int i = 0; i < store.size(); ++i) {
    auto& e = store.entries()[static_cast<std::size_t>(i)];
    Matrix& g = binding.tape->grad(binding.values[static_cast<std::size_t>(i)]);
    if (!g.allFinite()) throw NonFiniteGradient(e.name);
    if (g.isZero(0.0)) continue;  // parameter not touched by this loss
    e.momentum = h.momentum * e.momentum + g;
    if (h.weight_decay != 0.0) e.momentum += h.weight_decay * e.value;
    e.value -= lr * e.momentum;
    g.setZero();
  }
}

// ---- MLP ---------------------------------------------------------------

Mlp Mlp::create(ParamStore& store, const std::string& prefix,
                const std::vector<int>& layer_dims, Rng& rng) {
  if (layer_dims.size() < 2) throw std::invalid_argument("Mlp: need at least in/out dims");
  Mlp m;
  m.dims = layer_dims;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    int fan_in = layer_dims[l];
    int fan_out = layer_dims[l + 1];
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Matrix w(fan_in, fan_out);
    for (long i = 0; i < w.rows(); ++i)
      for (long j = 0; j < w.cols(); ++j) w(i, j) = rng.uniform(-bound, bound);
    m.w_idx.push_back(store.add(prefix + ".W" + std::to_string(l), std::move(w)));
    m.b_idx.push_back(store.add(prefix + ".b" + std::to_string(l), Matrix::Zero(1, fan_out)));
  }
  return m;
}

Value Mlp::forward(Tape& tape, const Binding& binding, Value x) const {
  (void)tape;  // ops resolve the tape through their operands
  Value h = x;
  for (std::size_t l = 0; l < w_idx.size(); ++l) {
    h = add_rowvec(matmul(h, binding.at(w_idx[l])), binding.at(b_idx[l]));
    if (l + 1 < w_idx.size()) h = relu(h);
  }
  return h;
}

Matrix Mlp::infer(const ParamStore& store, const Matrix& x) const {
  Tape tape;
  Binding b = store.bind(tape);
  Value out = forward(tape, b, tape.leaf(x));
  return tape.data(out);
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (long i = 0; i < logits.rows(); ++i) {
    double m = logits.row(i).maxCoeff();
    Eigen::ArrayXd e = (logits.row(i).array() - m).exp();
    p.row(i) = (e / e.sum()).matrix();
  }
  return p;
}

}  // namespace dadapt::ad
