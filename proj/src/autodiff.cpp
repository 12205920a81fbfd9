#include "diffuq/autodiff.hpp"

#include "diffuq/errors.hpp"
#include "diffuq/nn.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace diffuq::ad {

const Eigen::MatrixXd& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Eigen::MatrixXd value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, true, "leaf"});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Eigen::MatrixXd value) {
  nodes_.push_back(Node{std::move(value), {}, nullptr, false, "constant"});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Eigen::MatrixXd value, bool requires_grad, Backward backward, const char* op) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad ? std::move(backward) : nullptr, requires_grad, op});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

std::string Tape::first_nonfinite() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].value.allFinite()) {
      std::ostringstream os;
      os << "node " << i << " (" << nodes_[i].op << ", " << nodes_[i].value.rows() << "x"
         << nodes_[i].value.cols() << ")";
      return os.str();
    }
  }
  return {};
}

void Tape::backward(const Var& output) {
  if (output.tape() != this) throw std::invalid_argument("backward: variable belongs to another tape");
  const Eigen::MatrixXd& out = value(output.id());
  if (out.rows() != 1 || out.cols() != 1) throw DimensionError("backward: output must be 1x1");
  if (!std::isfinite(out(0, 0))) {
    throw NumericalError("non-finite value in forward pass at " + first_nonfinite());
  }
  for (auto& n : nodes_) n.grad.resize(0, 0);
  Node& root = nodes_[static_cast<std::size_t>(output.id())];
  if (!root.requires_grad) return;
  root.grad = Eigen::MatrixXd::Ones(1, 1);
  for (int id = output.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward && n.grad.size() > 0) n.backward(*this, id);
  }
}

Eigen::MatrixXd Tape::grad(const Var& v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (n.grad.size() == 0) return Eigen::MatrixXd::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

namespace {

Tape& tape_of(const Var& a, const Var& b) {
  if (!a.valid() || a.tape() != b.tape()) throw std::invalid_argument("variables live on different tapes");
  return *a.tape();
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream os;
    os << op << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x" << b.cols();
    throw DimensionError(os.str());
  }
}

}  // namespace

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "add");
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() + b.value(), t.requires_grad(ia) || t.requires_grad(ib),
                  [ia, ib](Tape& tp, int self) {
                    tp.accumulate(ia, tp.grad_ref(self));
                    tp.accumulate(ib, tp.grad_ref(self));
                  },
                  "add");
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "sub");
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() - b.value(), t.requires_grad(ia) || t.requires_grad(ib),
                  [ia, ib](Tape& tp, int self) {
                    tp.accumulate(ia, tp.grad_ref(self));
                    tp.accumulate(ib, -tp.grad_ref(self));
                  },
                  "sub");
}

Var cwise_product(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require_same_shape(a, b, "cwise_product");
  const int ia = a.id(), ib = b.id();
  return t.record(a.value().cwiseProduct(b.value()), t.requires_grad(ia) || t.requires_grad(ib),
                  [ia, ib](Tape& tp, int self) {
                    const auto& g = tp.grad_ref(self);
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                  },
                  "cwise_product");
}

Var scale(const Var& a, double s) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.record(a.value() * s, t.requires_grad(ia),
                  [ia, s](Tape& tp, int self) { tp.accumulate(ia, tp.grad_ref(self) * s); }, "scale");
}

Var add_scalar(const Var& a, double s) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.record(a.value().array() + s, t.requires_grad(ia),
                  [ia](Tape& tp, int self) { tp.accumulate(ia, tp.grad_ref(self)); }, "add_scalar");
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) {
    std::ostringstream os;
    os << "matmul: inner dimensions " << a.cols() << " vs " << b.rows();
    throw DimensionError(os.str());
  }
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), t.requires_grad(ia) || t.requires_grad(ib),
                  [ia, ib](Tape& tp, int self) {
                    const auto& g = tp.grad_ref(self);
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                    if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                  },
                  "matmul");
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("add_row: row must be 1 x cols(a)");
  const int ia = a.id(), ir = row.id();
  Eigen::MatrixXd v = a.value();
  v.rowwise() += row.value().row(0);
  return t.record(std::move(v), t.requires_grad(ia) || t.requires_grad(ir),
                  [ia, ir](Tape& tp, int self) {
                    const auto& g = tp.grad_ref(self);
                    tp.accumulate(ia, g);
                    if (tp.requires_grad(ir)) tp.accumulate(ir, g.colwise().sum());
                  },
                  "add_row");
}

Var mul_row(const Var& a, const Var& row) {
  Tape& t = tape_of(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw DimensionError("mul_row: row must be 1 x cols(a)");
  const int ia = a.id(), ir = row.id();
  Eigen::MatrixXd v = a.value().array().rowwise() * row.value().row(0).array();
  return t.record(std::move(v), t.requires_grad(ia) || t.requires_grad(ir),
                  [ia, ir](Tape& tp, int self) {
                    const auto& g = tp.grad_ref(self);
                    if (tp.requires_grad(ia)) {
                      Eigen::MatrixXd ga = g.array().rowwise() * tp.value(ir).row(0).array();
                      tp.accumulate(ia, ga);
                    }
                    if (tp.requires_grad(ir)) tp.accumulate(ir, g.cwiseProduct(tp.value(ia)).colwise().sum());
                  },
                  "mul_row");
}

Var gelu(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Eigen::MatrixXd v = a.value().unaryExpr([](double x) { return nn::gelu(x); });
  return t.record(std::move(v), t.requires_grad(ia),
                  [ia](Tape& tp, int self) {
                    Eigen::MatrixXd d = tp.value(ia).unaryExpr([](double x) { return nn::gelu_derivative(x); });
                    tp.accumulate(ia, tp.grad_ref(self).cwiseProduct(d));
                  },
                  "gelu");
}

Var affine(const Var& x, const Var& w, const Var& b) {
  Tape& t = tape_of(x, w);
  if (x.cols() != w.rows()) {
    std::ostringstream os;
    os << "affine: inner dimensions " << x.cols() << " vs " << w.rows();
    throw DimensionError(os.str());
  }
  if (b.tape() != &t || b.rows() != 1 || b.cols() != w.cols()) throw DimensionError("affine: bias must be 1 x cols(w)");
  const int ix = x.id(), iw = w.id(), ib = b.id();
  Eigen::MatrixXd v(x.rows(), w.cols());
  v.noalias() = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return t.record(std::move(v), t.requires_grad(ix) || t.requires_grad(iw) || t.requires_grad(ib),
                  [ix, iw, ib](Tape& tp, int self) {
                    const auto& g = tp.grad_ref(self);
                    if (tp.requires_grad(ix)) tp.grad_buffer(ix).noalias() += g * tp.value(iw).transpose();
                    if (tp.requires_grad(iw)) tp.grad_buffer(iw).noalias() += tp.value(ix).transpose() * g;
                    if (tp.requires_grad(ib)) tp.grad_buffer(ib) += g.colwise().sum();
                  },
                  "affine");
}

Var layer_norm_gelu(const Var& a, double eps) {
  Tape& t = *a.tape();
  const int ia = a.id();
  const Eigen::MatrixXd& x = a.value();
  const auto k = static_cast<double>(x.cols());
  const Eigen::VectorXd mu = x.rowwise().sum() / k;
  Eigen::MatrixXd y = x.colwise() - mu;
  Eigen::VectorXd inv_std = ((y.array().square().rowwise().sum() / k) + eps).rsqrt().matrix();
  y = y.array().colwise() * inv_std.array();
  Eigen::MatrixXd out(y.rows(), y.cols()), slope(y.rows(), y.cols());
  constexpr double kPdf = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double v = y(i, j);
      const double cdf = 0.5 * std::erfc(-v / std::numbers::sqrt2);
      out(i, j) = v * cdf;
      slope(i, j) = cdf + v * kPdf * std::exp(-0.5 * v * v);
    }
  }
  return t.record(std::move(out), t.requires_grad(ia),
                  [ia, y = std::move(y), slope = std::move(slope), inv_std = std::move(inv_std)](Tape& tp, int self) {
                    const auto kk = static_cast<double>(y.cols());
                    Eigen::MatrixXd g = tp.grad_ref(self).cwiseProduct(slope);
                    const Eigen::VectorXd g_mean = g.rowwise().sum() / kk;
                    const Eigen::VectorXd gy_mean = g.cwiseProduct(y).rowwise().sum() / kk;
                    g.colwise() -= g_mean;
                    g -= (y.array().colwise() * gy_mean.array()).matrix();
                    g = g.array().colwise() * inv_std.array();
                    tp.accumulate(ia, g);
                  },
                  "layer_norm_gelu");
}

Var exp(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.record(a.value().array().exp().matrix(), t.requires_grad(ia),
                  [ia](Tape& tp, int self) { tp.accumulate(ia, tp.grad_ref(self).cwiseProduct(tp.value(self))); },
                  "exp");
}

Var square(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  return t.record(a.value().array().square().matrix(), t.requires_grad(ia),
                  [ia](Tape& tp, int self) {
                    tp.accumulate(ia, 2.0 * tp.grad_ref(self).cwiseProduct(tp.value(ia)));
                  },
                  "square");
}

Var clamp(const Var& a, double lo, double hi) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Eigen::MatrixXd v = a.value().cwiseMax(lo).cwiseMin(hi);
  return t.record(std::move(v), t.requires_grad(ia),
                  [ia, lo, hi](Tape& tp, int self) {
                    const auto& x = tp.value(ia);
                    Eigen::MatrixXd g = tp.grad_ref(self);
                    for (Eigen::Index j = 0; j < g.cols(); ++j)
                      for (Eigen::Index i = 0; i < g.rows(); ++i)
                        if (x(i, j) < lo || x(i, j) > hi) g(i, j) = 0.0;
                    tp.accumulate(ia, g);
                  },
                  "clamp");
}

Var layer_norm_rows(const Var& a, double eps) {
  Tape& t = *a.tape();
  const int ia = a.id();
  const Eigen::MatrixXd& x = a.value();
  const auto k = static_cast<double>(x.cols());
  Eigen::VectorXd mu = x.rowwise().sum() / k;
  Eigen::MatrixXd centered = x.colwise() - mu;
  Eigen::VectorXd inv_std = ((centered.array().square().rowwise().sum() / k) + eps).rsqrt().matrix();
  Eigen::MatrixXd y = centered.array().colwise() * inv_std.array();
  return t.record(std::move(y), t.requires_grad(ia),
                  [ia, inv_std = std::move(inv_std)](Tape& tp, int self) {
                    const auto& y = tp.value(self);
                    const auto& g = tp.grad_ref(self);
                    const auto kk = static_cast<double>(y.cols());
                    Eigen::VectorXd g_mean = g.rowwise().sum() / kk;
                    Eigen::VectorXd gy_mean = g.cwiseProduct(y).rowwise().sum() / kk;
                    Eigen::MatrixXd dx = g;
                    dx.colwise() -= g_mean;
                    dx -= (y.array().colwise() * gy_mean.array()).matrix();
                    dx = dx.array().colwise() * inv_std.array();
                    tp.accumulate(ia, dx);
                  },
                  "layer_norm");
}

Var concat_cols(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.rows() != b.rows()) throw DimensionError("concat_cols: row counts differ");
  const int ia = a.id(), ib = b.id();
  const Eigen::Index ca = a.cols(), cb = b.cols();
  Eigen::MatrixXd v(a.rows(), ca + cb);
  v << a.value(), b.value();
  return t.record(std::move(v), t.requires_grad(ia) || t.requires_grad(ib),
                  [ia, ib, ca, cb](Tape& tp, int self) {
                    const auto& g = tp.grad_ref(self);
                    if (tp.requires_grad(ia)) tp.accumulate(ia, g.leftCols(ca));
                    if (tp.requires_grad(ib)) tp.accumulate(ib, g.rightCols(cb));
                  },
                  "concat_cols");
}

Var reshape_slice(const Var& a, Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = *a.tape();
  const Eigen::Index total = a.rows() * a.cols();
  if (offset < 0 || offset + rows * cols > total) {
    std::ostringstream os;
    os << "reshape_slice: [" << offset << ", " << offset + rows * cols << ") exceeds " << total << " entries";
    throw DimensionError(os.str());
  }
  const int ia = a.id();
  const Eigen::Index ar = a.rows(), ac = a.cols();
  Eigen::MatrixXd v = Eigen::Map<const Eigen::MatrixXd>(a.value().data() + offset, rows, cols);
  return t.record(std::move(v), t.requires_grad(ia),
                  [ia, offset, ar, ac](Tape& tp, int self) {
                    const auto& g = tp.grad_ref(self);
                    Eigen::MatrixXd full = Eigen::MatrixXd::Zero(ar, ac);
                    Eigen::Map<Eigen::MatrixXd>(full.data() + offset, g.rows(), g.cols()) = g;
                    tp.accumulate(ia, full);
                  },
                  "reshape_slice");
}

Var sum(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  const Eigen::Index r = a.rows(), c = a.cols();
  Eigen::MatrixXd v(1, 1);
  v(0, 0) = a.value().sum();
  return t.record(std::move(v), t.requires_grad(ia),
                  [ia, r, c](Tape& tp, int self) {
                    tp.accumulate(ia, Eigen::MatrixXd::Constant(r, c, tp.grad_ref(self)(0, 0)));
                  },
                  "sum");
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.rows() * a.cols())); }

Var row_squared_norm(const Var& a) {
  Tape& t = *a.tape();
  const int ia = a.id();
  Eigen::MatrixXd v = a.value().rowwise().squaredNorm();
  return t.record(std::move(v), t.requires_grad(ia),
                  [ia](Tape& tp, int self) {
                    Eigen::MatrixXd g = 2.0 * (tp.value(ia).array().colwise() * tp.grad_ref(self).col(0).array());
                    tp.accumulate(ia, g);
                  },
                  "row_squared_norm");
}

Eigen::VectorXd gradient_of(const ScalarFn& fn, const Eigen::VectorXd& at, double* value) {
  Tape tape;
  Var x = tape.leaf(at);
  Var out = fn(tape, x);
  if (out.rows() != 1 || out.cols() != 1) throw DimensionError("gradient_of: function must return a scalar");
  tape.backward(out);
  if (value) *value = out.scalar();
  return tape.grad(x).col(0);
}

}  // namespace diffuq::ad
