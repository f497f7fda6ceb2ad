#pragma once

// Minimal reverse-mode autodiff over dense double matrices.

#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tacood::ad {

using Mat = Eigen::MatrixXd;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

class Tape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* t, int id) : tape_(t), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var variable(Mat value);

  // Records an op result. `backward` is kept only if some parent needs gradients.
  Var record(Mat value, std::initializer_list<Var> parents, Backward backward);
  Var record(Mat value, std::span<const Var> parents, Backward backward);

  const Mat& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  // Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to every ancestor.
  void backward(const Var& out);
  // Gradient of the last backward() target with respect to `v`; zeros if unreached.
  Mat grad(const Var& v) const;

  void accumulate(const Var& v, const Mat& g);
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool has_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

// Scales one named backward contribution while alive; used to prove the gradient
// checker notices a broken derivative. Names are "<op>.<slot>", e.g. "matmul.rhs".
class ScopedFault {
 public:
  ScopedFault(std::string name, double scale);
  ~ScopedFault();
  ScopedFault(const ScopedFault&) = delete;
  ScopedFault& operator=(const ScopedFault&) = delete;

 private:
  std::string previous_name_;
  double previous_scale_;
};

// Every fault name an op may consult.
const std::vector<std::string>& fault_names();

// Ops. Shapes are checked and mismatches throw ShapeError.
Var matmul(const Var& a, const Var& b);     // A B
Var matmul_nt(const Var& a, const Var& b);  // A B^T
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);  // adds a 1 x c row to every row
Var mul(const Var& a, const Var& b);        // elementwise
Var mul_col(const Var& a, const Var& col);  // scales row r by col(r)
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var layer_norm(const Var& a, double eps = 1e-5);  // per row
Var softmax_rows(const Var& a);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index count);
// Row r of the result is row idx[r] of `a`, or zeros when idx[r] < 0.
Var gather_rows(const Var& a, const std::vector<int>& idx);
Var sum(const Var& a);

// linear: X W^T + b with W stored (out x in) and b (1 x out).
Var linear(const Var& x, const Var& w, const Var& b);
Var linear(const Var& x, const Var& w);
// softmax(Q K^T / sqrt(d)) V.
Var attention(const Var& q, const Var& k, const Var& v);

// Sum over rows of the sigmoid focal loss of column-vector logits against 0/1 targets.
Var focal_loss_sum(const Var& logits, const std::vector<double>& targets, double alpha = 0.25, double gamma = 2.0);
// Sum of smooth-L1 over all entries of rows with weight > 0, each row scaled by its weight.
Var smooth_l1_sum(const Var& pred, const Mat& target, const std::vector<double>& row_weight, double beta = 1.0);

}  // namespace tacood::ad
