#include "smelt/tape.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace smelt {

std::atomic<uint64_t> Tape::backward_count_{0};

namespace {

#ifdef SMELT_NO_FINITE_CHECK
constexpr bool kCheckFinite = false;
#else
constexpr bool kCheckFinite = true;
#endif

struct Extents {
  int r, c;
};

Extents ext(const Tensor& t) { return {t.rows(), t.cols()}; }

// Legal elementwise pairs: equal extents, or one operand covering the full
// result while the other is a row [1xC], column [Rx1] or scalar of it.
Extents broadcast_extents(const Tensor& a, const Tensor& b, const char* opname) {
  Extents ea = ext(a), eb = ext(b);
  int r = std::max(ea.r, eb.r);
  int c = std::max(ea.c, eb.c);
  bool a_ok = (ea.r == r || ea.r == 1) && (ea.c == c || ea.c == 1);
  bool b_ok = (eb.r == r || eb.r == 1) && (eb.c == c || eb.c == 1);
  bool one_full = (ea.r == r && ea.c == c) || (eb.r == r && eb.c == c);
  if (!a_ok || !b_ok || !one_full)
    throw ShapeError(std::string(opname) + ": incompatible shapes " + a.shape_str() + " and " + b.shape_str());
  return {r, c};
}

inline double bval(const Tensor& t, int r, int c) {
  int tr = t.rows(), tc = t.cols();
  return t[static_cast<int64_t>(tr == 1 ? 0 : r) * tc + (tc == 1 ? 0 : c)];
}

inline int64_t bindex(const Tensor& t, int r, int c) {
  int tr = t.rows(), tc = t.cols();
  return static_cast<int64_t>(tr == 1 ? 0 : r) * tc + (tc == 1 ? 0 : c);
}

Shape result_shape(const Tensor& a, const Tensor& b, Extents e) {
  // Prefer the shape convention of the operand that spans the result.
  if (a.rows() == e.r && a.cols() == e.c) return a.shape();
  return b.shape();
}

}  // namespace

Var Tape::push(Node n, const char* opname) {
  if (kCheckFinite && !n.value.all_finite())
    throw NumericError(std::string(opname) + " produced non-finite values");
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor v) {
  Node n;
  n.value = std::move(v);
  n.needs_grad = true;
  return push(std::move(n), "leaf");
}

Var Tape::constant(Tensor v) {
  Node n;
  n.value = std::move(v);
  n.needs_grad = false;
  return push(std::move(n), "constant");
}

Var Tape::add(Var a, Var b) {
  const Tensor &ta = val(a), &tb = val(b);
  Extents e = broadcast_extents(ta, tb, "add");
  Tensor out(result_shape(ta, tb, e), std::vector<double>(static_cast<size_t>(e.r) * e.c));
  for (int r = 0; r < e.r; ++r)
    for (int c = 0; c < e.c; ++c) out[static_cast<int64_t>(r) * e.c + c] = bval(ta, r, c) + bval(tb, r, c);
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.p1 = b.id;
  n.op = Op::kAdd;
  n.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(n), "add");
}

Var Tape::sub(Var a, Var b) {
  const Tensor &ta = val(a), &tb = val(b);
  Extents e = broadcast_extents(ta, tb, "sub");
  Tensor out(result_shape(ta, tb, e), std::vector<double>(static_cast<size_t>(e.r) * e.c));
  for (int r = 0; r < e.r; ++r)
    for (int c = 0; c < e.c; ++c) out[static_cast<int64_t>(r) * e.c + c] = bval(ta, r, c) - bval(tb, r, c);
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.p1 = b.id;
  n.op = Op::kSub;
  n.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(n), "sub");
}

Var Tape::mul(Var a, Var b) {
  const Tensor &ta = val(a), &tb = val(b);
  Extents e = broadcast_extents(ta, tb, "mul");
  Tensor out(result_shape(ta, tb, e), std::vector<double>(static_cast<size_t>(e.r) * e.c));
  for (int r = 0; r < e.r; ++r)
    for (int c = 0; c < e.c; ++c) out[static_cast<int64_t>(r) * e.c + c] = bval(ta, r, c) * bval(tb, r, c);
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.p1 = b.id;
  n.op = Op::kMul;
  n.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(n), "mul");
}

Var Tape::div(Var a, Var b) {
  const Tensor &ta = val(a), &tb = val(b);
  Extents e = broadcast_extents(ta, tb, "div");
  Tensor out(result_shape(ta, tb, e), std::vector<double>(static_cast<size_t>(e.r) * e.c));
  for (int r = 0; r < e.r; ++r)
    for (int c = 0; c < e.c; ++c) out[static_cast<int64_t>(r) * e.c + c] = bval(ta, r, c) / bval(tb, r, c);
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.p1 = b.id;
  n.op = Op::kDiv;
  n.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(n), "div");
}

Var Tape::scale(Var a, double c) {
  const Tensor& ta = val(a);
  Tensor out = ta;
  for (auto& v : out.data()) v *= c;
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kScale;
  n.c0 = c;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "scale");
}

Var Tape::matmul(Var a, Var b) {
  const Tensor &ta = val(a), &tb = val(b);
  if (tb.rank() != 2) throw ShapeError("matmul: right operand must be a matrix, got " + tb.shape_str());
  int m = ta.rows(), k = ta.cols(), k2 = tb.rows(), p = tb.cols();
  if (k != k2) throw ShapeError("matmul: inner extents differ, " + ta.shape_str() + " vs " + tb.shape_str());
  Shape out_shape = ta.rank() == 2 ? Shape{m, p} : Shape{p};
  Tensor out(std::move(out_shape), std::vector<double>(static_cast<size_t>(m) * p, 0.0));
  for (int i = 0; i < m; ++i) {
    const double* arow = ta.data().data() + static_cast<size_t>(i) * k;
    double* orow = out.data().data() + static_cast<size_t>(i) * p;
    for (int kk = 0; kk < k; ++kk) {
      double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = tb.data().data() + static_cast<size_t>(kk) * p;
      for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.p1 = b.id;
  n.op = Op::kMatmul;
  n.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(n), "matmul");
}

Var Tape::transpose(Var a) {
  const Tensor& ta = val(a);
  int r = ta.rows(), c = ta.cols();
  Tensor out(Shape{c, r}, std::vector<double>(static_cast<size_t>(r) * c));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<int64_t>(j) * r + i] = ta[static_cast<int64_t>(i) * c + j];
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kTranspose;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "transpose");
}

Var Tape::concat(Var a, Var b, int axis) {
  const Tensor &ta = val(a), &tb = val(b);
  if (axis == 0) {
    if (ta.cols() != tb.cols())
      throw ShapeError("concat rows: column counts differ, " + ta.shape_str() + " vs " + tb.shape_str());
    int c = ta.cols(), r = ta.rows() + tb.rows();
    std::vector<double> d;
    d.reserve(static_cast<size_t>(r) * c);
    d.insert(d.end(), ta.data().begin(), ta.data().end());
    d.insert(d.end(), tb.data().begin(), tb.data().end());
    Node n;
    n.value = Tensor(Shape{r, c}, std::move(d));
    n.p0 = a.id;
    n.p1 = b.id;
    n.op = Op::kConcatRows;
    n.needs_grad = needs_grad(a) || needs_grad(b);
    return push(std::move(n), "concat");
  }
  if (axis != 1) throw ShapeError("concat: axis must be 0 or 1");
  if (ta.rows() != tb.rows())
    throw ShapeError("concat cols: row counts differ, " + ta.shape_str() + " vs " + tb.shape_str());
  int r = ta.rows(), ca = ta.cols(), cb = tb.cols();
  std::vector<double> d(static_cast<size_t>(r) * (ca + cb));
  for (int i = 0; i < r; ++i) {
    std::copy_n(ta.data().data() + static_cast<size_t>(i) * ca, ca, d.data() + static_cast<size_t>(i) * (ca + cb));
    std::copy_n(tb.data().data() + static_cast<size_t>(i) * cb, cb,
                d.data() + static_cast<size_t>(i) * (ca + cb) + ca);
  }
  Shape out_shape = (ta.rank() == 1 && tb.rank() == 1) ? Shape{ca + cb} : Shape{r, ca + cb};
  Node n;
  n.value = Tensor(std::move(out_shape), std::move(d));
  n.p0 = a.id;
  n.p1 = b.id;
  n.op = Op::kConcatCols;
  n.needs_grad = needs_grad(a) || needs_grad(b);
  return push(std::move(n), "concat");
}

namespace {
inline double sigmoid_stable(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var Tape::sigmoid(Var a) {
  Tensor out = val(a);
  for (auto& v : out.data()) v = sigmoid_stable(v);
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kSigmoid;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "sigmoid");
}

Var Tape::tanh(Var a) {
  Tensor out = val(a);
  for (auto& v : out.data()) v = std::tanh(v);
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kTanh;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "tanh");
}

Var Tape::relu(Var a) {
  Tensor out = val(a);
  for (auto& v : out.data()) v = v > 0.0 ? v : 0.0;
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kRelu;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "relu");
}

Var Tape::sqrt(Var a) {
  Tensor out = val(a);
  for (auto& v : out.data()) v = std::sqrt(v);
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kSqrt;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "sqrt");
}

Var Tape::clamp(Var a, double lo, double hi) {
  if (!(lo < hi)) throw ShapeError("clamp: lo must be < hi");
  Tensor out = val(a);
  for (auto& v : out.data()) v = std::min(hi, std::max(lo, v));
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kClamp;
  n.c0 = lo;
  n.c1 = hi;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "clamp");
}

Var Tape::softmax(Var a) {
  const Tensor& ta = val(a);
  Tensor out = ta;
  int r = ta.rows(), c = ta.cols();
  for (int i = 0; i < r; ++i) {
    double* row = out.data().data() + static_cast<size_t>(i) * c;
    double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      s += row[j];
    }
    for (int j = 0; j < c; ++j) row[j] /= s;
  }
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kSoftmax;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "softmax");
}

Var Tape::log_softmax(Var a) {
  const Tensor& ta = val(a);
  Tensor out = ta;
  int r = ta.rows(), c = ta.cols();
  for (int i = 0; i < r; ++i) {
    double* row = out.data().data() + static_cast<size_t>(i) * c;
    double m = *std::max_element(row, row + c);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(row[j] - m);
    double lse = m + std::log(s);
    for (int j = 0; j < c; ++j) row[j] -= lse;
  }
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kLogSoftmax;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "log_softmax");
}

Var Tape::norm_rows(Var a, double eps) {
  const Tensor& ta = val(a);
  Tensor out = ta;
  int r = ta.rows(), c = ta.cols();
  for (int i = 0; i < r; ++i) {
    double* row = out.data().data() + static_cast<size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= c;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) row[j] = (row[j] - mu) * inv;
  }
  Node n;
  n.value = std::move(out);
  n.p0 = a.id;
  n.op = Op::kNormRows;
  n.c0 = eps;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "norm_rows");
}

Var Tape::sum(Var a) {
  const Tensor& ta = val(a);
  double s = 0.0;
  for (double v : ta.data()) s += v;
  Node n;
  n.value = Tensor::scalar(s);
  n.p0 = a.id;
  n.op = Op::kSum;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "sum");
}

Var Tape::mean(Var a) {
  const Tensor& ta = val(a);
  double s = 0.0;
  for (double v : ta.data()) s += v;
  Node n;
  n.value = Tensor::scalar(s / static_cast<double>(ta.numel()));
  n.p0 = a.id;
  n.op = Op::kMean;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "mean");
}

Var Tape::sum_rows(Var a) {
  const Tensor& ta = val(a);
  int r = ta.rows(), c = ta.cols();
  std::vector<double> d(static_cast<size_t>(r), 0.0);
  for (int i = 0; i < r; ++i) {
    const double* row = ta.data().data() + static_cast<size_t>(i) * c;
    for (int j = 0; j < c; ++j) d[static_cast<size_t>(i)] += row[j];
  }
  Node n;
  n.value = Tensor(Shape{r, 1}, std::move(d));
  n.p0 = a.id;
  n.op = Op::kSumRows;
  n.needs_grad = needs_grad(a);
  return push(std::move(n), "sum_rows");
}

void Tape::accumulate(int target, const Tensor& contrib, std::vector<Tensor>& adjoints) const {
  Tensor& slot = adjoints[static_cast<size_t>(target)];
  if (slot.numel() == 0) {
    slot = contrib;
    return;
  }
  auto& d = slot.data();
  const auto& s = contrib.data();
  for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

namespace {

// Sum `full`-extent gradient down to the parent's extents (inverse of
// broadcasting), preserving the parent's shape convention.
Tensor reduce_to(const Tensor& parent, const Tensor& g) {
  if (parent.rows() == g.rows() && parent.cols() == g.cols()) {
    return Tensor(parent.shape(), g.data());
  }
  Tensor out = Tensor::zeros(parent.shape());
  int R = g.rows(), C = g.cols();
  for (int r = 0; r < R; ++r)
    for (int c = 0; c < C; ++c) out[bindex(parent, r, c)] += g[static_cast<int64_t>(r) * C + c];
  return out;
}

}  // namespace

void Tape::backward_into(const Node& n, const Tensor& g, std::vector<Tensor>& adjoints) const {
  auto wants = [&](int id) { return id >= 0 && nodes_[static_cast<size_t>(id)].needs_grad; };
  const int R = g.rows(), C = g.cols();

  switch (n.op) {
    case Op::kInput:
      break;
    case Op::kAdd: {
      if (wants(n.p0)) accumulate(n.p0, reduce_to(value_of(n.p0), g), adjoints);
      if (wants(n.p1)) accumulate(n.p1, reduce_to(value_of(n.p1), g), adjoints);
      break;
    }
    case Op::kSub: {
      if (wants(n.p0)) accumulate(n.p0, reduce_to(value_of(n.p0), g), adjoints);
      if (wants(n.p1)) {
        Tensor neg = g;
        for (auto& v : neg.data()) v = -v;
        accumulate(n.p1, reduce_to(value_of(n.p1), neg), adjoints);
      }
      break;
    }
    case Op::kMul: {
      const Tensor &ta = value_of(n.p0), &tb = value_of(n.p1);
      if (wants(n.p0)) {
        Tensor acc = Tensor::zeros(ta.shape());
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c)
            acc[bindex(ta, r, c)] += g[static_cast<int64_t>(r) * C + c] * bval(tb, r, c);
        accumulate(n.p0, acc, adjoints);
      }
      if (wants(n.p1)) {
        Tensor acc = Tensor::zeros(tb.shape());
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c)
            acc[bindex(tb, r, c)] += g[static_cast<int64_t>(r) * C + c] * bval(ta, r, c);
        accumulate(n.p1, acc, adjoints);
      }
      break;
    }
    case Op::kDiv: {
      const Tensor &ta = value_of(n.p0), &tb = value_of(n.p1);
      if (wants(n.p0)) {
        Tensor acc = Tensor::zeros(ta.shape());
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c)
            acc[bindex(ta, r, c)] += g[static_cast<int64_t>(r) * C + c] / bval(tb, r, c);
        accumulate(n.p0, acc, adjoints);
      }
      if (wants(n.p1)) {
        Tensor acc = Tensor::zeros(tb.shape());
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c) {
            double b = bval(tb, r, c);
            acc[bindex(tb, r, c)] -= g[static_cast<int64_t>(r) * C + c] * bval(ta, r, c) / (b * b);
          }
        accumulate(n.p1, acc, adjoints);
      }
      break;
    }
    case Op::kScale: {
      if (wants(n.p0)) {
        Tensor acc = g;
        for (auto& v : acc.data()) v *= n.c0;
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kMatmul: {
      const Tensor &ta = value_of(n.p0), &tb = value_of(n.p1);
      int m = ta.rows(), k = ta.cols(), p = tb.cols();
      if (wants(n.p0)) {  // dA = G B^T
        Tensor acc = Tensor::zeros(ta.shape());
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < p; ++j) {
            double gv = g[static_cast<int64_t>(i) * p + j];
            if (gv == 0.0) continue;
            for (int kk = 0; kk < k; ++kk)
              acc[static_cast<int64_t>(i) * k + kk] += gv * tb[static_cast<int64_t>(kk) * p + j];
          }
        accumulate(n.p0, acc, adjoints);
      }
      if (wants(n.p1)) {  // dB = A^T G
        Tensor acc = Tensor::zeros(tb.shape());
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            double av = ta[static_cast<int64_t>(i) * k + kk];
            if (av == 0.0) continue;
            for (int j = 0; j < p; ++j)
              acc[static_cast<int64_t>(kk) * p + j] += av * g[static_cast<int64_t>(i) * p + j];
          }
        accumulate(n.p1, acc, adjoints);
      }
      break;
    }
    case Op::kTranspose: {
      if (wants(n.p0)) {
        const Tensor& ta = value_of(n.p0);
        Tensor acc = Tensor::zeros(ta.shape());
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < C; ++c)
            acc[static_cast<int64_t>(c) * R + r] = g[static_cast<int64_t>(r) * C + c];
        accumulate(n.p0, acc, adjoints);
      }
      break;
    }
    case Op::kConcatRows: {
      const Tensor &ta = value_of(n.p0), &tb = value_of(n.p1);
      int na = static_cast<int>(ta.numel());
      if (wants(n.p0)) {
        Tensor acc(ta.shape(), std::vector<double>(g.data().begin(), g.data().begin() + na));
        accumulate(n.p0, acc, adjoints);
      }
      if (wants(n.p1)) {
        Tensor acc(tb.shape(), std::vector<double>(g.data().begin() + na, g.data().end()));
        accumulate(n.p1, acc, adjoints);
      }
      break;
    }
    case Op::kConcatCols: {
      const Tensor &ta = value_of(n.p0), &tb = value_of(n.p1);
      int ca = ta.cols(), cb = tb.cols();
      if (wants(n.p0)) {
        Tensor acc = Tensor::zeros(ta.shape());
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < ca; ++c)
            acc[static_cast<int64_t>(r) * ca + c] = g[static_cast<int64_t>(r) * (ca + cb) + c];
        accumulate(n.p0, acc, adjoints);
      }
      if (wants(n.p1)) {
        Tensor acc = Tensor::zeros(tb.shape());
        for (int r = 0; r < R; ++r)
          for (int c = 0; c < cb; ++c)
            acc[static_cast<int64_t>(r) * cb + c] = g[static_cast<int64_t>(r) * (ca + cb) + ca + c];
        accumulate(n.p1, acc, adjoints);
      }
      break;
    }
    case Op::kSigmoid: {
      if (wants(n.p0)) {
        Tensor acc = g;
        const auto& y = n.value.data();
        for (size_t i = 0; i < acc.data().size(); ++i) acc.data()[i] *= y[i] * (1.0 - y[i]);
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kTanh: {
      if (wants(n.p0)) {
        Tensor acc = g;
        const auto& y = n.value.data();
        for (size_t i = 0; i < acc.data().size(); ++i) acc.data()[i] *= 1.0 - y[i] * y[i];
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kRelu: {
      if (wants(n.p0)) {
        Tensor acc = g;
        const auto& x = value_of(n.p0).data();
        for (size_t i = 0; i < acc.data().size(); ++i)
          if (x[i] <= 0.0) acc.data()[i] = 0.0;
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kSqrt: {
      if (wants(n.p0)) {
        Tensor acc = g;
        const auto& y = n.value.data();
        for (size_t i = 0; i < acc.data().size(); ++i) acc.data()[i] *= 0.5 / y[i];
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kClamp: {
      if (wants(n.p0)) {
        Tensor acc = g;
        const auto& x = value_of(n.p0).data();
        for (size_t i = 0; i < acc.data().size(); ++i)
          if (!(x[i] > n.c0 && x[i] < n.c1)) acc.data()[i] = 0.0;
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kSoftmax: {
      if (wants(n.p0)) {
        const auto& y = n.value.data();
        Tensor acc = g;
        for (int r = 0; r < R; ++r) {
          double dot = 0.0;
          for (int c = 0; c < C; ++c) {
            int64_t i = static_cast<int64_t>(r) * C + c;
            dot += g[i] * y[static_cast<size_t>(i)];
          }
          for (int c = 0; c < C; ++c) {
            int64_t i = static_cast<int64_t>(r) * C + c;
            acc[i] = y[static_cast<size_t>(i)] * (g[i] - dot);
          }
        }
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kLogSoftmax: {
      if (wants(n.p0)) {
        const auto& y = n.value.data();
        Tensor acc = g;
        for (int r = 0; r < R; ++r) {
          double gsum = 0.0;
          for (int c = 0; c < C; ++c) gsum += g[static_cast<int64_t>(r) * C + c];
          for (int c = 0; c < C; ++c) {
            int64_t i = static_cast<int64_t>(r) * C + c;
            acc[i] = g[i] - std::exp(y[static_cast<size_t>(i)]) * gsum;
          }
        }
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kNormRows: {
      if (wants(n.p0)) {
        const Tensor& x = value_of(n.p0);
        const auto& y = n.value.data();
        Tensor acc = g;
        for (int r = 0; r < R; ++r) {
          const double* xr = x.data().data() + static_cast<size_t>(r) * C;
          double mu = 0.0;
          for (int c = 0; c < C; ++c) mu += xr[c];
          mu /= C;
          double var = 0.0;
          for (int c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
          var /= C;
          double inv = 1.0 / std::sqrt(var + n.c0);
          double gmean = 0.0, gymean = 0.0;
          for (int c = 0; c < C; ++c) {
            int64_t i = static_cast<int64_t>(r) * C + c;
            gmean += g[i];
            gymean += g[i] * y[static_cast<size_t>(i)];
          }
          gmean /= C;
          gymean /= C;
          for (int c = 0; c < C; ++c) {
            int64_t i = static_cast<int64_t>(r) * C + c;
            acc[i] = inv * (g[i] - gmean - y[static_cast<size_t>(i)] * gymean);
          }
        }
        accumulate(n.p0, Tensor(value_of(n.p0).shape(), std::move(acc.data())), adjoints);
      }
      break;
    }
    case Op::kSum: {
      if (wants(n.p0)) {
        accumulate(n.p0, Tensor::full(value_of(n.p0).shape(), g[0]), adjoints);
      }
      break;
    }
    case Op::kMean: {
      if (wants(n.p0)) {
        const Tensor& ta = value_of(n.p0);
        accumulate(n.p0, Tensor::full(ta.shape(), g[0] / static_cast<double>(ta.numel())), adjoints);
      }
      break;
    }
    case Op::kSumRows: {
      if (wants(n.p0)) {
        const Tensor& ta = value_of(n.p0);
        int r2 = ta.rows(), c2 = ta.cols();
        Tensor acc = Tensor::zeros(ta.shape());
        for (int r = 0; r < r2; ++r)
          for (int c = 0; c < c2; ++c) acc[static_cast<int64_t>(r) * c2 + c] = g[r];
        accumulate(n.p0, acc, adjoints);
      }
      break;
    }
  }
}

std::vector<Tensor> Tape::grad(Var loss, std::span<const Var> wrt) {
  if (!loss.valid() || static_cast<size_t>(loss.id) >= nodes_.size())
    throw ShapeError("grad: invalid loss var");
  const Tensor& lv = val(loss);
  if (lv.numel() != 1) throw ShapeError("grad: loss must be scalar, got " + lv.shape_str());

  backward_count_.fetch_add(1, std::memory_order_relaxed);

  std::vector<Tensor> adjoints(nodes_.size());
  adjoints[static_cast<size_t>(loss.id)] = Tensor::full(lv.shape(), 1.0);

  for (int id = loss.id; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad || n.op == Op::kInput) continue;
    const Tensor& g = adjoints[static_cast<size_t>(id)];
    if (g.numel() == 0) continue;  // unreached from the loss
    backward_into(n, g, adjoints);
  }

  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (Var v : wrt) {
    if (!v.valid() || static_cast<size_t>(v.id) >= nodes_.size())
      throw ShapeError("grad: invalid wrt var");
    const Tensor& slot = adjoints[static_cast<size_t>(v.id)];
    if (slot.numel() == 0)
      out.push_back(Tensor::zeros(val(v).shape()));
    else
      out.push_back(slot);
  }
  return out;
}

}  // namespace smelt
