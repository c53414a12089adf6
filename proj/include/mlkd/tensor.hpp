#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace mlkd {

class Tape;

// Dense row-major tensor of f64. A Tensor is a value; it participates in
// reverse-mode differentiation only while linked to a Tape (tape_/node_).
// Leaves watched by a Tape own a persistent gradient accumulator (grad_).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor({}, {v}); }
  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double v);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }

  double* data() { return data_->data(); }
  const double* data() const { return data_->data(); }
  std::vector<double>& vec() { return *data_; }
  const std::vector<double>& vec() const { return *data_; }

  double item() const;  // scalar tensors only
  double operator[](std::size_t i) const { return (*data_)[i]; }
  double& operator[](std::size_t i) { return (*data_)[i]; }
  // 2-D convenience accessors
  double at(std::size_t r, std::size_t c) const { return (*data_)[r * shape_[1] + c]; }
  double& at(std::size_t r, std::size_t c) { return (*data_)[r * shape_[1] + c]; }

  bool on_tape() const { return tape_ != nullptr; }
  bool is_leaf() const { return grad_ != nullptr; }
  Tensor grad() const;  // snapshot of the accumulated leaf gradient
  void zero_grad();
  void detach();  // drop tape linkage (data and any accumulated grad survive)

  // Tape bookkeeping, used by the op kernels.
  std::shared_ptr<std::vector<double>> data_;
  std::shared_ptr<std::vector<double>> grad_;
  std::vector<std::size_t> shape_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Records the computation graph of one scalar objective. Confined to a single
// thread; created per training step and discarded after backward().
class Tape {
 public:
  // Register t as a differentiable leaf. Allocates (or keeps) its grad
  // accumulator; backward() adds into it, so repeated calls accumulate.
  void watch(Tensor& t);

  // Reverse sweep from a scalar root. Leaf grads accumulate across calls;
  // internal scratch is reset every call.
  void backward(const Tensor& root);

  // Op support: register a node, returns its id.
  int record(std::size_t out_size, std::function<void(Tape&, const double*)> back);
  void accumulate(int node, const double* g, std::size_t n);
  // Raw scratch gradient of a node, zero-materialized on first touch. Only
  // valid inside backward callbacks; returns nullptr for node < 0.
  double* grad_scratch(int node);
  std::size_t num_nodes() const { return nodes_.size(); }

 private:
  struct Node {
    std::size_t size;
    std::function<void(Tape&, const double*)> back;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> scratch_;
  std::vector<char> touched_;
};

// When enabled, every op validates that its outputs are finite and throws
// (naming the op) otherwise. Thread-local; off by default.
void set_strict_numerics(bool enabled);
bool strict_numerics();

// ---- elementwise binary ops (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor mul(const Tensor& a, double s);

// ---- elementwise unary ops ----
Tensor neg(const Tensor& a);
Tensor square(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- reductions ----
Tensor sum(const Tensor& a);                    // all axes -> scalar
Tensor sum(const Tensor& a, std::size_t axis);  // drop one axis
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

// ---- linear algebra / shape ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n] -> [m,n]
Tensor transpose(const Tensor& a);                // 2-D only
Tensor reshape(const Tensor& a, std::vector<std::size_t> shape);
// Rows [start, start+count) of a 2-D tensor; gradients scatter back in place.
Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count);

// Max over coordinates of |analytic - central difference| /
// max(|analytic|, |difference|, 1e-8). f must build its result from the ops
// above so the analytic gradient can be taped; it is also evaluated off-tape
// for the difference quotients.
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double eps);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace mlkd
