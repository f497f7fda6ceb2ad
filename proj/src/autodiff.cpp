#include "tacood/autodiff.hpp"

#include <cmath>
#include <string>

namespace tacood::ad {

namespace {

thread_local std::string g_fault_name;
thread_local double g_fault_scale = 1.0;

double fault(const char* name) {
  if (g_fault_name.empty() || g_fault_name != name) return 1.0;
  return g_fault_scale;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

std::string shape(const Var& v) { return std::to_string(v.rows()) + "x" + std::to_string(v.cols()); }

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw std::logic_error("ad: use of an empty Var");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (&t != &tape_of(b)) throw std::logic_error("ad: operands live on different tapes");
  return t;
}

// Stable log(1 + exp(x)).
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

const Mat& Var::value() const { return tape_of(*this).value(id_); }
bool Var::requires_grad() const { return tape_of(*this).requires_grad(id_); }

Var Tape::constant(Mat value) {
  if (!value.allFinite()) throw std::domain_error("ad: non-finite constant");
  nodes_.push_back(Node{std::move(value), Mat(), false, false, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Mat value) {
  if (!value.allFinite()) throw std::domain_error("ad: non-finite variable");
  nodes_.push_back(Node{std::move(value), Mat(), true, false, nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Mat value, std::initializer_list<Var> parents, Backward backward) {
  return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
}

Var Tape::record(Mat value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || requires_grad(p.id());
  if (!value.allFinite()) throw std::domain_error("ad: non-finite value produced");
  nodes_.push_back(Node{std::move(value), Mat(), needs, false, needs ? std::move(backward) : nullptr});
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::accumulate(const Var& v, const Mat& g) {
  Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.requires_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(const Var& out) {
  if (out.tape() != this) throw std::logic_error("ad: backward target from another tape");
  if (out.rows() != 1 || out.cols() != 1) throw ShapeError("ad: backward needs a 1x1 output, got " + shape(out));
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  accumulate(out, Mat::Ones(1, 1));
  for (int id = out.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.has_grad || !n.backward) continue;
    const Mat g = n.grad;
    n.backward(*this, g);
  }
}

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_[static_cast<std::size_t>(v.id())];
  if (!n.has_grad) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

ScopedFault::ScopedFault(std::string name, double scale)
    : previous_name_(g_fault_name), previous_scale_(g_fault_scale) {
  g_fault_name = std::move(name);
  g_fault_scale = scale;
}

ScopedFault::~ScopedFault() {
  g_fault_name = previous_name_;
  g_fault_scale = previous_scale_;
}

const std::vector<std::string>& fault_names() {
  static const std::vector<std::string> names{
      "matmul.lhs", "matmul.rhs", "matmul_nt.lhs", "matmul_nt.rhs", "add.lhs",     "add.rhs",
      "sub.lhs",    "sub.rhs",    "add_row.mat",   "add_row.row",   "mul.lhs",     "mul.rhs",
      "mul_col.mat", "mul_col.col", "scale",       "add_scalar",    "tanh",        "sigmoid",
      "layer_norm", "softmax",    "concat_rows",   "slice_cols",    "gather_rows", "sum",
      "focal",      "smooth_l1"};
  return names;
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require(a.cols() == b.rows(), "matmul: " + shape(a) + " * " + shape(b));
  return t.record(a.value() * b.value(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (a.requires_grad()) tp.accumulate(a, fault("matmul.lhs") * (g * b.value().transpose()));
    if (b.requires_grad()) tp.accumulate(b, fault("matmul.rhs") * (a.value().transpose() * g));
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require(a.cols() == b.cols(), "matmul_nt: " + shape(a) + " * (" + shape(b) + ")^T");
  return t.record(a.value() * b.value().transpose(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (a.requires_grad()) tp.accumulate(a, fault("matmul_nt.lhs") * (g * b.value()));
    if (b.requires_grad()) tp.accumulate(b, fault("matmul_nt.rhs") * (g.transpose() * a.value()));
  });
}

Var add(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "add: " + shape(a) + " + " + shape(b));
  return t.record(a.value() + b.value(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    tp.accumulate(a, fault("add.lhs") * g);
    tp.accumulate(b, fault("add.rhs") * g);
  });
}

Var sub(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: " + shape(a) + " - " + shape(b));
  return t.record(a.value() - b.value(), {a, b}, [a, b](Tape& tp, const Mat& g) {
    tp.accumulate(a, fault("sub.lhs") * g);
    tp.accumulate(b, -fault("sub.rhs") * g);
  });
}

Var add_row(const Var& a, const Var& row) {
  Tape& t = tape_of(a, row);
  require(row.rows() == 1 && row.cols() == a.cols(), "add_row: " + shape(a) + " + row " + shape(row));
  Mat out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a, row](Tape& tp, const Mat& g) {
    tp.accumulate(a, fault("add_row.mat") * g);
    if (row.requires_grad()) tp.accumulate(row, fault("add_row.row") * g.colwise().sum());
  });
}

Var mul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  require(a.rows() == b.rows() && a.cols() == b.cols(), "mul: " + shape(a) + " .* " + shape(b));
  return t.record(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& tp, const Mat& g) {
    if (a.requires_grad()) tp.accumulate(a, fault("mul.lhs") * g.cwiseProduct(b.value()));
    if (b.requires_grad()) tp.accumulate(b, fault("mul.rhs") * g.cwiseProduct(a.value()));
  });
}

Var mul_col(const Var& a, const Var& col) {
  Tape& t = tape_of(a, col);
  require(col.cols() == 1 && col.rows() == a.rows(), "mul_col: " + shape(a) + " by column " + shape(col));
  Mat out = a.value().array().colwise() * col.value().col(0).array();
  return t.record(std::move(out), {a, col}, [a, col](Tape& tp, const Mat& g) {
    if (a.requires_grad()) {
      Mat ga = g.array().colwise() * col.value().col(0).array();
      tp.accumulate(a, fault("mul_col.mat") * ga);
    }
    if (col.requires_grad()) {
      Mat gc = g.cwiseProduct(a.value()).rowwise().sum();
      tp.accumulate(col, fault("mul_col.col") * gc);
    }
  });
}

Var scale(const Var& a, double s) {
  return tape_of(a).record(a.value() * s, {a},
                           [a, s](Tape& tp, const Mat& g) { tp.accumulate(a, fault("scale") * s * g); });
}

Var add_scalar(const Var& a, double s) {
  Mat out = a.value().array() + s;
  return tape_of(a).record(std::move(out), {a},
                           [a](Tape& tp, const Mat& g) { tp.accumulate(a, fault("add_scalar") * g); });
}

Var tanh(const Var& a) {
  Mat y = a.value().array().tanh();
  Tape& t = tape_of(a);
  const int id = static_cast<int>(t.size());
  return t.record(std::move(y), {a}, [a, id](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(id);
    Mat d = g.array() * (1.0 - y.array().square());
    tp.accumulate(a, fault("tanh") * d);
  });
}

Var sigmoid(const Var& a) {
  Mat y = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  Tape& t = tape_of(a);
  const int id = static_cast<int>(t.size());
  return t.record(std::move(y), {a}, [a, id](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(id);
    Mat d = g.array() * y.array() * (1.0 - y.array());
    tp.accumulate(a, fault("sigmoid") * d);
  });
}

Var layer_norm(const Var& a, double eps) {
  require(a.cols() >= 2, "layer_norm: need at least 2 columns, got " + shape(a));
  const Mat& x = a.value();
  const auto n = static_cast<double>(x.cols());
  Mat y(x.rows(), x.cols());
  Eigen::VectorXd inv_sigma(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const Eigen::RowVectorXd c = x.row(r).array() - mu;
    const double var = c.squaredNorm() / n;
    inv_sigma(r) = 1.0 / std::sqrt(var + eps);
    y.row(r) = c * inv_sigma(r);
  }
  Tape& t = tape_of(a);
  const int id = static_cast<int>(t.size());
  return t.record(std::move(y), {a}, [a, id, inv_sigma, n](Tape& tp, const Mat& g) {
    const Mat& y = tp.value(id);
    Mat dx(g.rows(), g.cols());
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      const double mg = g.row(r).sum() / n;
      const double mgy = g.row(r).dot(y.row(r)) / n;
      dx.row(r) = inv_sigma(r) * (g.row(r).array() - mg - y.row(r).array() * mgy);
    }
    tp.accumulate(a, fault("layer_norm") * dx);
  });
}

Var softmax_rows(const Var& a) {
  require(a.cols() >= 1, "softmax_rows: empty rows");
  Mat p = a.value();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  Tape& t = tape_of(a);
  const int id = static_cast<int>(t.size());
  return t.record(std::move(p), {a}, [a, id](Tape& tp, const Mat& g) {
    const Mat& p = tp.value(id);
    const Eigen::VectorXd dots = g.cwiseProduct(p).rowwise().sum();
    Mat d = p.array() * (g.array().colwise() - dots.array());
    tp.accumulate(a, fault("softmax") * d);
  });
}

Var concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows: no parts");
  Tape& t = tape_of(parts[0]);
  const Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  for (const Var& p : parts) {
    require(&tape_of(p) == &t, "concat_rows: mixed tapes");
    require(p.cols() == cols, "concat_rows: column mismatch " + shape(parts[0]) + " vs " + shape(p));
    rows += p.rows();
  }
  Mat out(rows, cols);
  Eigen::Index at = 0;
  for (const Var& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return t.record(std::move(out), parts, [keep](Tape& tp, const Mat& g) {
    Eigen::Index at = 0;
    for (const Var& p : keep) {
      if (p.requires_grad()) tp.accumulate(p, fault("concat_rows") * g.middleRows(at, p.rows()));
      at += p.rows();
    }
  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count) {
  require(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols: range outside " + shape(a));
  Mat out = a.value().middleCols(start, count);
  return tape_of(a).record(std::move(out), {a}, [a, start, count](Tape& tp, const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    d.middleCols(start, count) = fault("slice_cols") * g;
    tp.accumulate(a, d);
  });
}

Var gather_rows(const Var& a, const std::vector<int>& idx) {
  Mat out = Mat::Zero(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    require(idx[r] < a.rows(), "gather_rows: index " + std::to_string(idx[r]) + " outside " + shape(a));
    if (idx[r] >= 0) out.row(static_cast<Eigen::Index>(r)) = a.value().row(idx[r]);
  }
  return tape_of(a).record(std::move(out), {a}, [a, idx](Tape& tp, const Mat& g) {
    Mat d = Mat::Zero(a.rows(), a.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      if (idx[r] >= 0) d.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
    }
    tp.accumulate(a, fault("gather_rows") * d);
  });
}

Var sum(const Var& a) {
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).record(std::move(out), {a}, [a](Tape& tp, const Mat& g) {
    tp.accumulate(a, Mat::Constant(a.rows(), a.cols(), fault("sum") * g(0, 0)));
  });
}

Var linear(const Var& x, const Var& w, const Var& b) { return add_row(matmul_nt(x, w), b); }
Var linear(const Var& x, const Var& w) { return matmul_nt(x, w); }

Var attention(const Var& q, const Var& k, const Var& v) {
  require(k.rows() >= 1, "attention: no keys");
  require(q.cols() == k.cols(), "attention: query/key width " + shape(q) + " vs " + shape(k));
  require(k.rows() == v.rows(), "attention: key/value rows " + shape(k) + " vs " + shape(v));
  const double s = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return matmul(softmax_rows(scale(matmul_nt(q, k), s)), v);
}

Var focal_loss_sum(const Var& logits, const std::vector<double>& targets, double alpha, double gamma) {
  require(logits.cols() == 1 && logits.rows() == static_cast<Eigen::Index>(targets.size()),
          "focal_loss_sum: logits " + shape(logits) + " vs " + std::to_string(targets.size()) + " targets");
  const Mat& z = logits.value();
  double total = 0.0;
  Mat dz(z.rows(), 1);
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double x = z(r, 0);
    const double p = 1.0 / (1.0 + std::exp(-x));
    if (targets[static_cast<std::size_t>(r)] > 0.5) {
      const double logp = -softplus(-x);
      const double w = std::pow(1.0 - p, gamma);
      total += -alpha * w * logp;
      dz(r, 0) = alpha * w * (gamma * p * logp - (1.0 - p));
    } else {
      const double log1mp = -softplus(x);
      const double w = std::pow(p, gamma);
      total += -(1.0 - alpha) * w * log1mp;
      dz(r, 0) = -(1.0 - alpha) * w * (gamma * (1.0 - p) * log1mp - p);
    }
  }
  Mat out(1, 1);
  out(0, 0) = total;
  return tape_of(logits).record(std::move(out), {logits}, [logits, dz](Tape& tp, const Mat& g) {
    tp.accumulate(logits, fault("focal") * g(0, 0) * dz);
  });
}

Var smooth_l1_sum(const Var& pred, const Mat& target, const std::vector<double>& row_weight, double beta) {
  if (!(beta > 0.0)) throw std::invalid_argument("smooth_l1_sum: beta must be > 0");
  require(pred.rows() == target.rows() && pred.cols() == target.cols() &&
              static_cast<std::size_t>(pred.rows()) == row_weight.size(),
          "smooth_l1_sum: pred " + shape(pred) + " vs target");
  const Mat& p = pred.value();
  double total = 0.0;
  Mat d = Mat::Zero(p.rows(), p.cols());
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double w = row_weight[static_cast<std::size_t>(r)];
    if (w <= 0.0) continue;
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      const double x = p(r, c) - target(r, c);
      if (std::abs(x) < beta) {
        total += w * 0.5 * x * x / beta;
        d(r, c) = w * x / beta;
      } else {
        total += w * (std::abs(x) - 0.5 * beta);
        d(r, c) = w * (x > 0 ? 1.0 : -1.0);
      }
    }
  }
  Mat out(1, 1);
  out(0, 0) = total;
  return tape_of(pred).record(std::move(out), {pred}, [pred, d](Tape& tp, const Mat& g) {
    tp.accumulate(pred, fault("smooth_l1") * g(0, 0) * d);
  });
}

}  // namespace tacood::ad
