#include "mlkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace mlkd {

namespace {

thread_local bool g_strict_numerics = false;

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

void set_strict_numerics(bool enabled) { g_strict_numerics = enabled; }
bool strict_numerics() { return g_strict_numerics; }

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(std::vector<std::size_t> shape)
    : data_(std::make_shared<std::vector<double>>(shape_product(shape), 0.0)),
      shape_(std::move(shape)) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_product(shape_) != values.size())
    throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match data length " +
                                std::to_string(values.size()));
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), v);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item: tensor " + shape_str(shape_) + " is not a scalar");
  return (*data_)[0];
}

Tensor Tensor::grad() const {
  if (!grad_) throw std::runtime_error("grad: tensor is not a watched leaf");
  return Tensor(shape_, *grad_);
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

void Tensor::detach() {
  tape_ = nullptr;
  node_ = -1;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

int Tape::record(std::size_t out_size, std::function<void(Tape&, const double*)> back) {
  nodes_.push_back(Node{out_size, std::move(back)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::watch(Tensor& t) {
  if (t.tape_ == this && t.node_ >= 0) return;
  if (t.tape_ != nullptr && t.tape_ != this)
    throw std::invalid_argument("watch: tensor is already linked to another tape");
  if (!t.grad_ || t.grad_->size() != t.size())
    t.grad_ = std::make_shared<std::vector<double>>(t.size(), 0.0);
  auto gbuf = t.grad_;
  std::size_t n = t.size();
  t.tape_ = this;
  t.node_ = record(n, [gbuf, n](Tape&, const double* g) {
    double* acc = gbuf->data();
    for (std::size_t i = 0; i < n; ++i) acc[i] += g[i];
  });
}

double* Tape::grad_scratch(int node) {
  if (node < 0) return nullptr;
  std::size_t u = static_cast<std::size_t>(node);
  if (scratch_[u].empty()) scratch_[u].assign(nodes_[u].size, 0.0);
  touched_[u] = 1;
  return scratch_[u].data();
}

void Tape::accumulate(int node, const double* g, std::size_t n) {
  double* dst = grad_scratch(node);
  if (!dst) return;
  for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
}

void Tape::backward(const Tensor& root) {
  if (root.size() != 1) throw std::invalid_argument("backward: root must be a scalar");
  if (root.tape_ != this || root.node_ < 0)
    throw std::invalid_argument("backward: root is detached from this tape");
  scratch_.assign(nodes_.size(), {});
  touched_.assign(nodes_.size(), 0);
  *grad_scratch(root.node_) = 1.0;
  for (int i = root.node_; i >= 0; --i) {
    std::size_t u = static_cast<std::size_t>(i);
    if (!touched_[u] || !nodes_[u].back) continue;
    nodes_[u].back(*this, scratch_[u].data());
  }
  scratch_.clear();
  touched_.clear();
}

// ---------------------------------------------------------------------------
// op kernels
// ---------------------------------------------------------------------------

namespace {

using BackFn = std::function<void(Tape&, const double*)>;

void check_finite(const char* op, const std::vector<double>& v) {
  if (!g_strict_numerics) return;
  for (double x : v)
    if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + ": non-finite result");
}

Tape* common_tape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.on_tape() && b.on_tape() && a.tape_ != b.tape_)
    throw std::invalid_argument(std::string(op) + ": operands belong to different tapes");
  return a.on_tape() ? a.tape_ : b.tape_;
}

void attach(const char* op, Tensor& out, Tape* tape, BackFn back) {
  check_finite(op, out.vec());
  if (tape) {
    out.tape_ = tape;
    out.node_ = tape->record(out.size(), std::move(back));
  }
}

// Broadcast plan for elementwise binaries: output shape plus per-output-dim
// element strides into both inputs (stride 0 along broadcast dims).
struct BcPlan {
  std::vector<std::size_t> out_shape;
  std::vector<std::size_t> a_stride, b_stride, out_stride;
  std::size_t out_size = 1;
  bool same_shape = false;
};

BcPlan broadcast_plan(const char* op, const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  BcPlan p;
  if (a == b) {
    p.out_shape = a;
    p.out_size = shape_product(a);
    p.same_shape = true;
    return p;
  }
  std::size_t nd = std::max(a.size(), b.size());
  p.out_shape.resize(nd);
  for (std::size_t d = 0; d < nd; ++d) {
    std::size_t ad = d < nd - a.size() ? 1 : a[d - (nd - a.size())];
    std::size_t bd = d < nd - b.size() ? 1 : b[d - (nd - b.size())];
    if (ad != bd && ad != 1 && bd != 1)
      throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                                  " are not broadcast-compatible");
    p.out_shape[d] = std::max(ad, bd);
  }
  p.out_size = shape_product(p.out_shape);
  auto strides_for = [&](const std::vector<std::size_t>& s) {
    std::vector<std::size_t> st(nd, 0);
    std::size_t acc = 1;
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::size_t d = nd - 1 - i;
      std::size_t dim = s[s.size() - 1 - i];
      st[d] = (dim == 1) ? 0 : acc;
      acc *= dim;
    }
    return st;
  };
  p.a_stride = strides_for(a);
  p.b_stride = strides_for(b);
  p.out_stride.assign(nd, 0);
  std::size_t acc = 1;
  for (std::size_t i = 0; i < nd; ++i) {
    std::size_t d = nd - 1 - i;
    p.out_stride[d] = acc;
    acc *= p.out_shape[d];
  }
  return p;
}

inline void map_indices(const BcPlan& p, std::size_t o, std::size_t& ia, std::size_t& ib) {
  ia = 0;
  ib = 0;
  std::size_t rem = o;
  for (std::size_t d = 0; d < p.out_shape.size(); ++d) {
    std::size_t idx = rem / p.out_stride[d];
    rem -= idx * p.out_stride[d];
    ia += idx * p.a_stride[d];
    ib += idx * p.b_stride[d];
  }
}

// Elementwise binary with broadcasting. da/db compute the gradient
// contribution from (upstream g, a value, b value, out value).
template <class Fwd, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, DA da, DB db) {
  BcPlan plan = broadcast_plan(op, a.shape_, b.shape_);
  std::vector<double> out(plan.out_size);
  const double* ap = a.data();
  const double* bp = b.data();
  if (plan.same_shape) {
    for (std::size_t i = 0; i < plan.out_size; ++i) out[i] = fwd(ap[i], bp[i]);
  } else {
    for (std::size_t o = 0; o < plan.out_size; ++o) {
      std::size_t ia, ib;
      map_indices(plan, o, ia, ib);
      out[o] = fwd(ap[ia], bp[ib]);
    }
  }
  Tape* tape = common_tape(op, a, b);
  Tensor result(plan.out_shape, std::move(out));
  BackFn back;
  if (tape) {
    back = [plan, an = a.node_, bn = b.node_, adata = a.data_, bdata = b.data_, odata = result.data_, da,
            db](Tape& t, const double* g) {
      double* ga = t.grad_scratch(an);
      double* gb = t.grad_scratch(bn);
      const double* av = adata->data();
      const double* bv = bdata->data();
      const double* ov = odata->data();
      if (plan.same_shape) {
        for (std::size_t i = 0; i < plan.out_size; ++i) {
          if (ga) ga[i] += da(g[i], av[i], bv[i], ov[i]);
          if (gb) gb[i] += db(g[i], av[i], bv[i], ov[i]);
        }
      } else {
        for (std::size_t o = 0; o < plan.out_size; ++o) {
          std::size_t ia, ib;
          map_indices(plan, o, ia, ib);
          if (ga) ga[ia] += da(g[o], av[ia], bv[ib], ov[o]);
          if (gb) gb[ib] += db(g[o], av[ia], bv[ib], ov[o]);
        }
      }
    };
  }
  attach(op, result, tape, std::move(back));
  return result;
}

// Elementwise unary. dx computes the gradient from (upstream g, x value,
// out value).
template <class Fwd, class DX>
Tensor unary_op(const char* op, const Tensor& a, Fwd fwd, DX dx) {
  std::vector<double> out(a.size());
  const double* ap = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fwd(ap[i]);
  Tensor result(a.shape_, std::move(out));
  BackFn back;
  if (a.on_tape()) {
    back = [an = a.node_, adata = a.data_, odata = result.data_, n = a.size(), dx](Tape& t,
                                                                                   const double* g) {
      double* ga = t.grad_scratch(an);
      if (!ga) return;
      const double* av = adata->data();
      const double* ov = odata->data();
      for (std::size_t i = 0; i < n; ++i) ga[i] += dx(g[i], av[i], ov[i]);
    };
  }
  attach(op, result, a.tape_, std::move(back));
  return result;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

// ---- binary ops ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y, double) { return g * y; },
      [](double g, double x, double, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y, double) { return g / y; },
      [](double g, double, double y, double o) { return -g * o / y; });
}

Tensor add(const Tensor& a, double s) {
  return unary_op(
      "add", a, [s](double x) { return x + s; }, [](double g, double, double) { return g; });
}

Tensor mul(const Tensor& a, double s) {
  return unary_op(
      "mul", a, [s](double x) { return x * s; }, [s](double g, double, double) { return g * s; });
}

// ---- unary ops ----

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; }, [](double g, double, double) { return -g; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double g, double x, double) { return 2.0 * x * g; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double g, double, double o) { return g / (2.0 * o); });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a, [](double x) { return std::log(x); }, [](double g, double x, double) { return g / x; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); }, [](double g, double, double o) { return g * o; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      "sigmoid", a, [](double x) { return stable_sigmoid(x); },
      [](double g, double, double o) { return g * o * (1.0 - o); });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw std::invalid_argument("clamp: lo must not exceed hi");
  return unary_op(
      "clamp", a, [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
      [lo, hi](double g, double x, double) { return (x > lo && x < hi) ? g : 0.0; });
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  const double* ap = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += ap[i];
  Tensor result({}, {acc});
  BackFn back;
  if (a.on_tape()) {
    back = [an = a.node_, n = a.size()](Tape& t, const double* g) {
      double* ga = t.grad_scratch(an);
      if (!ga) return;
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[0];
    };
  }
  attach("sum", result, a.tape_, std::move(back));
  return result;
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  double inv = 1.0 / static_cast<double>(a.size());
  double acc = 0.0;
  const double* ap = a.data();
  for (std::size_t i = 0; i < a.size(); ++i) acc += ap[i];
  Tensor result({}, {acc * inv});
  BackFn back;
  if (a.on_tape()) {
    back = [an = a.node_, n = a.size(), inv](Tape& t, const double* g) {
      double* ga = t.grad_scratch(an);
      if (!ga) return;
      double gs = g[0] * inv;
      for (std::size_t i = 0; i < n; ++i) ga[i] += gs;
    };
  }
  attach("mean", result, a.tape_, std::move(back));
  return result;
}

namespace {

// Shared kernel for axis reductions: out[o, i] = reduce_k in[o, k, i] where
// the input is viewed as [outer, axis_n, inner].
Tensor axis_reduce(const char* op, const Tensor& a, std::size_t axis, double scale) {
  if (axis >= a.ndim())
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) +
                                " out of range for shape " + shape_str(a.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= a.shape()[d];
  for (std::size_t d = axis + 1; d < a.ndim(); ++d) inner *= a.shape()[d];
  std::size_t axis_n = a.shape()[axis];
  std::vector<std::size_t> out_shape;
  for (std::size_t d = 0; d < a.ndim(); ++d)
    if (d != axis) out_shape.push_back(a.shape()[d]);
  std::vector<double> out(outer * inner, 0.0);
  const double* ap = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    const double* base = ap + o * axis_n * inner;
    double* orow = out.data() + o * inner;
    for (std::size_t k = 0; k < axis_n; ++k) {
      const double* row = base + k * inner;
      for (std::size_t i = 0; i < inner; ++i) orow[i] += row[i];
    }
  }
  if (scale != 1.0)
    for (double& x : out) x *= scale;
  Tensor result(std::move(out_shape), std::move(out));
  BackFn back;
  if (a.on_tape()) {
    back = [an = a.node_, outer, axis_n, inner, scale](Tape& t, const double* g) {
      double* ga = t.grad_scratch(an);
      if (!ga) return;
      for (std::size_t o = 0; o < outer; ++o) {
        const double* grow = g + o * inner;
        double* base = ga + o * axis_n * inner;
        for (std::size_t k = 0; k < axis_n; ++k) {
          double* row = base + k * inner;
          for (std::size_t i = 0; i < inner; ++i) row[i] += grow[i] * scale;
        }
      }
    };
  }
  attach(op, result, a.tape_, std::move(back));
  return result;
}

}  // namespace

Tensor sum(const Tensor& a, std::size_t axis) { return axis_reduce("sum", a, axis, 1.0); }

Tensor mean(const Tensor& a, std::size_t axis) {
  if (axis >= a.ndim())
    throw std::invalid_argument("mean: axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(a.shape()));
  if (a.shape()[axis] == 0) throw std::invalid_argument("mean: empty axis");
  return axis_reduce("mean", a, axis, 1.0 / static_cast<double>(a.shape()[axis]));
}

// ---- linear algebra / shape ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2)
    throw std::invalid_argument("matmul: expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  if (a.shape()[1] != b.shape()[0])
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const double* ap = a.data();
  const double* bp = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = out.data() + i * n;
    const double* arow = ap + i * k;
    for (std::size_t kk = 0; kk < k; ++kk) {
      double aik = arow[kk];
      if (aik == 0.0) continue;
      const double* brow = bp + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
  Tape* tape = common_tape("matmul", a, b);
  Tensor result({m, n}, std::move(out));
  BackFn back;
  if (tape) {
    back = [an = a.node_, bn = b.node_, adata = a.data_, bdata = b.data_, m, k, n](Tape& t,
                                                                                   const double* g) {
      const double* av = adata->data();
      const double* bv = bdata->data();
      if (double* ga = t.grad_scratch(an)) {
        // dA[i,kk] += sum_j g[i,j] * B[kk,j]
        for (std::size_t i = 0; i < m; ++i) {
          const double* grow = g + i * n;
          double* garow = ga + i * k;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double* brow = bv + kk * n;
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[kk] += acc;
          }
        }
      }
      if (double* gb = t.grad_scratch(bn)) {
        // dB[kk,j] += sum_i A[i,kk] * g[i,j]
        for (std::size_t i = 0; i < m; ++i) {
          const double* arow = av + i * k;
          const double* grow = g + i * n;
          for (std::size_t kk = 0; kk < k; ++kk) {
            double aik = arow[kk];
            if (aik == 0.0) continue;
            double* gbrow = gb + kk * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
          }
        }
      }
    };
  }
  attach("matmul", result, tape, std::move(back));
  return result;
}

Tensor transpose(const Tensor& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose: expects a 2-D tensor, got " + shape_str(a.shape()));
  std::size_t r = a.shape()[0], c = a.shape()[1];
  std::vector<double> out(r * c);
  const double* ap = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = ap[i * c + j];
  Tensor result({c, r}, std::move(out));
  BackFn back;
  if (a.on_tape()) {
    back = [an = a.node_, r, c](Tape& t, const double* g) {
      double* ga = t.grad_scratch(an);
      if (!ga) return;
      for (std::size_t j = 0; j < c; ++j)
        for (std::size_t i = 0; i < r; ++i) ga[i * c + j] += g[j * r + i];
    };
  }
  attach("transpose", result, a.tape_, std::move(back));
  return result;
}

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  if (shape_product(shape) != a.size())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor result(std::move(shape), a.vec());
  BackFn back;
  if (a.on_tape()) {
    back = [an = a.node_, n = a.size()](Tape& t, const double* g) { t.accumulate(an, g, n); };
  }
  attach("reshape", result, a.tape_, std::move(back));
  return result;
}

Tensor slice_rows(const Tensor& a, std::size_t start, std::size_t count) {
  if (a.ndim() != 2)
    throw std::invalid_argument("slice_rows: expects a 2-D tensor, got " + shape_str(a.shape()));
  std::size_t rows = a.shape()[0], cols = a.shape()[1];
  if (count == 0 || start + count > rows)
    throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                std::to_string(start + count) + ") outside " + shape_str(a.shape()));
  std::vector<double> out(a.data() + start * cols, a.data() + (start + count) * cols);
  Tensor result({count, cols}, std::move(out));
  BackFn back;
  if (a.on_tape()) {
    back = [an = a.node_, start, count, cols](Tape& t, const double* g) {
      double* ga = t.grad_scratch(an);
      if (!ga) return;
      for (std::size_t i = 0; i < count * cols; ++i) ga[start * cols + i] += g[i];
    };
  }
  attach("slice_rows", result, a.tape_, std::move(back));
  return result;
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                               double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_difference_check: eps must be positive");
  // analytic gradient
  std::vector<double> analytic(x.size(), 0.0);
  {
    Tape tape;
    Tensor xt(x.shape(), x.vec());
    tape.watch(xt);
    Tensor y = f(xt);
    if (y.size() != 1)
      throw std::invalid_argument("finite_difference_check: f must return a scalar, got " +
                                  shape_str(y.shape()));
    if (!std::isfinite(y.item())) throw std::runtime_error("finite_difference_check: f(x) is non-finite");
    if (y.on_tape()) {
      tape.backward(y);
      analytic = *xt.grad_;
    }
    xt.detach();
  }
  // central differences
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> vp = x.vec();
    std::vector<double> vm = x.vec();
    vp[i] += eps;
    vm[i] -= eps;
    double fp = f(Tensor(x.shape(), std::move(vp))).item();
    double fm = f(Tensor(x.shape(), std::move(vm))).item();
    double fd = (fp - fm) / (2.0 * eps);
    double denom = std::max({std::fabs(analytic[i]), std::fabs(fd), 1e-8});
    worst = std::max(worst, std::fabs(analytic[i] - fd) / denom);
  }
  return worst;
}

}  // namespace mlkd
