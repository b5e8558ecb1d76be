#include "macb/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "macb/error.hpp"

namespace macb::ad {

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) {
  if (!value.all_finite()) throw NumericalError(next_label("constant") + ": non-finite input");
  nodes_.push_back(Node{std::move(value), {}, {}, {}, "constant", false});
  return Var(this, nodes_.size() - 1);
}

Var Tape::variable(Tensor value) {
  if (!value.all_finite()) throw NumericalError(next_label("variable") + ": non-finite input");
  nodes_.push_back(Node{std::move(value), {}, {}, {}, "variable", true});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, const char* op, BackwardFn backward) {
  if (!value.all_finite()) throw NumericalError(next_label(op) + ": produced a non-finite value");
  bool needs = false;
  for (auto i : inputs) needs = needs || nodes_[i].requires_grad;
  nodes_.push_back(Node{std::move(value), {}, std::move(inputs), needs ? std::move(backward) : BackwardFn{},
                        op, needs});
  return Var(this, nodes_.size() - 1);
}

std::string Tape::next_label(const char* op) const { return std::string(op) + "#" + std::to_string(nodes_.size()); }

Tensor Tape::grad(std::size_t id) const {
  const auto& n = nodes_[id];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return Tensor(n.value.shape(), n.grad);
}

double* Tape::accumulator(std::size_t id) {
  auto& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad.data();
}

void Tape::backward(Var root) {
  if (root.value().size() != 1)
    throw ShapeError(std::string(op(root.id())) + "#" + std::to_string(root.id()),
                     "backward root must be a scalar, got " + shape_str(root.shape()));
  for (auto& n : nodes_) n.grad.clear();
  if (!nodes_[root.id()].requires_grad) return;
  nodes_[root.id()].grad.assign(1, 1.0);
  for (std::size_t k = root.id() + 1; k-- > 0;) {
    auto& n = nodes_[k];
    if (n.grad.empty() || !n.backward) continue;
    n.backward(*this, k);
  }
}

namespace {

void same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw Error(std::string(op) + ": operands live on different tapes");
}

// Index plan for numpy-style broadcasting of two operands.
struct Broadcast {
  enum class Kind { kSame, kScalarB, kScalarA, kGeneral } kind = Kind::kSame;
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output axis; 0 on broadcast axes

  template <typename F>
  void for_each(F&& f) const {
    const std::size_t n = shape_size(out);
    switch (kind) {
      case Kind::kSame:
        for (std::size_t i = 0; i < n; ++i) f(i, i, i);
        return;
      case Kind::kScalarB:
        for (std::size_t i = 0; i < n; ++i) f(i, i, 0);
        return;
      case Kind::kScalarA:
        for (std::size_t i = 0; i < n; ++i) f(i, 0, i);
        return;
      case Kind::kGeneral:
        break;
    }
    const std::size_t r = out.size();
    std::vector<std::size_t> idx(r, 0);
    std::size_t ia = 0, ib = 0;
    for (std::size_t o = 0; o < n; ++o) {
      f(o, ia, ib);
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        ia += stride_a[ax];
        ib += stride_b[ax];
        if (idx[ax] < out[ax]) break;
        ia -= stride_a[ax] * idx[ax];
        ib -= stride_b[ax] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b, const std::string& where) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    return p;
  }
  if (shape_size(b) == 1 && b.size() <= a.size()) {
    p.kind = Broadcast::Kind::kScalarB;
    p.out = a;
    return p;
  }
  if (shape_size(a) == 1 && a.size() <= b.size()) {
    p.kind = Broadcast::Kind::kScalarA;
    p.out = b;
    return p;
  }
  p.kind = Broadcast::Kind::kGeneral;
  const std::size_t r = std::max(a.size(), b.size());
  Shape pa(r, 1), pb(r, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(r - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(r - b.size()));
  p.out.resize(r);
  const auto sa = contiguous_strides(pa), sb = contiguous_strides(pb);
  p.stride_a.resize(r);
  p.stride_b.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1)
      throw ShapeError(where, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    p.out[i] = std::max(pa[i], pb[i]);
    p.stride_a[i] = pa[i] == 1 ? 0 : sa[i];
    p.stride_b[i] = pb[i] == 1 ? 0 : sb[i];
  }
  return p;
}

// Binary elementwise op: f(x, y) and its partials dfx(x, y, z), dfy(x, y, z)
// where z = f(x, y).
template <typename F, typename DX, typename DY>
Var binary(Var a, Var b, const char* op, F f, DX dfx, DY dfy) {
  same_tape(a, b, op);
  Tape& t = a.tape();
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), t.next_label(op)));
  const auto& av = a.value().data();
  const auto& bv = b.value().data();
  Tensor out(plan->out);
  auto od = out.data();
  plan->for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { od[o] = f(av[ia], bv[ib]); });
  const std::size_t ida = a.id(), idb = b.id();
  return t.record(std::move(out), {ida, idb}, op, [plan, ida, idb, dfx, dfy](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    const auto x = tp.value(ida).data();
    const auto y = tp.value(idb).data();
    const auto z = tp.value(self).data();
    double* ga = tp.accumulator(ida);
    double* gb = tp.accumulator(idb);
    plan->for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) ga[ia] += g[o] * dfx(x[ia], y[ib], z[o]);
      if (gb) gb[ib] += g[o] * dfy(x[ia], y[ib], z[o]);
    });
  });
}

// Unary elementwise op with derivative df(x, y), y = f(x).
template <typename F, typename DF>
Var unary(Var a, const char* op, F f, DF df) {
  Tape& t = a.tape();
  Tensor out(a.shape());
  const auto x = a.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = f(x[i]);
  const std::size_t ida = a.id();
  return t.record(std::move(out), {ida}, op, [ida, df](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    const auto xv = tp.value(ida).data();
    const auto yv = tp.value(self).data();
    double* ga = tp.accumulator(ida);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

// Decomposes `shape` around `axis` into outer * mid * inner.
struct AxisSplit {
  std::size_t outer = 1, mid = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.mid = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

void require_rank_at_least(Var a, std::size_t r, const char* op) {
  if (a.rank() < r)
    throw ShapeError(a.tape().next_label(op), "needs rank >= " + std::to_string(r) + ", got " + shape_str(a.shape()));
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double z) { return -z / y; });
}

Var neg(Var a) {
  return unary(a, "neg", [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(Var a, double c) {
  return unary(a, "scale", [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var add_scalar(Var a, double c) {
  return unary(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var relu(Var a) {
  return unary(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary(
      a, "sigmoid",
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary(a, "tanh", [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(Var a) {
  return unary(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var abs(Var a) {
  return unary(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var sqrt(Var a) {
  return unary(a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Var square(Var a) {
  return unary(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Var matmul(Var a, Var b) {
  same_tape(a, b, "matmul");
  Tape& t = a.tape();
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError(t.next_label("matmul"), shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  {
    const auto A = a.value().data();
    const auto B = b.value().data();
    auto C = out.data();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = A[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = &B[p * n];
        double* crow = &C[i * n];
        for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
      }
  }
  const std::size_t ida = a.id(), idb = b.id();
  return t.record(std::move(out), {ida, idb}, "matmul", [=](Tape& tp, std::size_t self) {
    const auto G = tp.grad_span(self);
    const auto A = tp.value(ida).data();
    const auto B = tp.value(idb).data();
    if (double* ga = tp.accumulator(ida)) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          const double* grow = &G[i * n];
          const double* brow = &B[p * n];
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
          ga[i * k + p] += s;
        }
    }
    if (double* gb = tp.accumulator(idb)) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = A[i * k + p];
          if (aip == 0.0) continue;
          const double* grow = &G[i * n];
          double* gbrow = &gb[p * n];
          for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
        }
    }
  });
}

Var transpose(Var a) {
  if (a.rank() != 2) throw ShapeError(a.tape().next_label("transpose"), "needs rank 2, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Var permute(Var a, const std::vector<std::size_t>& axes) {
  Tape& t = a.tape();
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  std::vector<bool> seen(r, false);
  if (axes.size() != r) throw ShapeError(t.next_label("permute"), "axes do not match rank of " + shape_str(in));
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError(t.next_label("permute"), "invalid axis permutation");
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
  const auto in_strides = contiguous_strides(in);
  // map[o] = flat input offset of output element o
  auto map = std::make_shared<std::vector<std::size_t>>(shape_size(in));
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t o = 0; o < map->size(); ++o) {
      (*map)[o] = off;
      for (std::size_t ax = r; ax-- > 0;) {
        ++idx[ax];
        off += in_strides[axes[ax]];
        if (idx[ax] < out_shape[ax]) break;
        off -= in_strides[axes[ax]] * idx[ax];
        idx[ax] = 0;
      }
    }
  }
  Tensor out(out_shape);
  const auto x = a.value().data();
  for (std::size_t o = 0; o < map->size(); ++o) out[o] = x[(*map)[o]];
  const std::size_t ida = a.id();
  return t.record(std::move(out), {ida}, "permute", [map, ida](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    double* ga = tp.accumulator(ida);
    for (std::size_t o = 0; o < g.size(); ++o) ga[(*map)[o]] += g[o];
  });
}

Var reshape(Var a, Shape shape) {
  Tape& t = a.tape();
  if (shape_size(shape) != a.value().size())
    throw ShapeError(t.next_label("reshape"), shape_str(a.shape()) + " -> " + shape_str(shape));
  const std::size_t ida = a.id();
  return t.record(a.value().reshaped(std::move(shape)), {ida}, "reshape", [ida](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    double* ga = tp.accumulator(ida);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var softmax(Var a) {
  require_rank_at_least(a, 1, "softmax");
  Tape& t = a.tape();
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.value().size() / n;
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x[r * n];
    double* yr = &out.data()[r * n];
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::size_t j = 0; j < n; ++j) yr[j] /= s;
  }
  const std::size_t ida = a.id();
  return t.record(std::move(out), {ida}, "softmax", [ida, n, rows](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    const auto y = tp.value(self).data();
    double* ga = tp.accumulator(ida);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Var log_softmax(Var a) {
  require_rank_at_least(a, 1, "log_softmax");
  Tape& t = a.tape();
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.value().size() / n;
  Tensor out(a.shape());
  const auto x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x[r * n];
    double* yr = &out.data()[r * n];
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] - lse;
  }
  const std::size_t ida = a.id();
  return t.record(std::move(out), {ida}, "log_softmax", [ida, n, rows](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    const auto y = tp.value(self).data();
    double* ga = tp.accumulator(ida);
    for (std::size_t r = 0; r < rows; ++r) {
      double gs = 0.0;
      for (std::size_t j = 0; j < n; ++j) gs += g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += g[r * n + j] - std::exp(y[r * n + j]) * gs;
    }
  });
}

Var layer_norm(Var a, double eps) {
  require_rank_at_least(a, 1, "layer_norm");
  Tape& t = a.tape();
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.value().size() / n;
  Tensor out(a.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = &x[r * n];
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xr[j];
    mu /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) v += (xr[j] - mu) * (xr[j] - mu);
    v /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(v + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) out.data()[r * n + j] = (xr[j] - mu) * is;
  }
  const std::size_t ida = a.id();
  return t.record(std::move(out), {ida}, "layer_norm", [ida, n, rows, inv_std](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    const auto y = tp.value(self).data();
    double* ga = tp.accumulator(ida);
    const double dn = static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      double gm = 0.0, gy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        gm += g[r * n + j];
        gy += g[r * n + j] * y[r * n + j];
      }
      gm /= dn;
      gy /= dn;
      for (std::size_t j = 0; j < n; ++j)
        ga[r * n + j] += (*inv_std)[r] * (g[r * n + j] - gm - y[r * n + j] * gy);
    }
  });
}

Var sum(Var a) {
  Tape& t = a.tape();
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  const std::size_t ida = a.id();
  return t.record(Tensor::scalar(s), {ida}, "sum", [ida](Tape& tp, std::size_t self) {
    const double g = tp.grad_span(self)[0];
    double* ga = tp.accumulator(ida);
    const std::size_t n = tp.value(ida).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var sum_axis(Var a, std::size_t axis, bool keepdim) {
  Tape& t = a.tape();
  if (axis >= a.rank())
    throw ShapeError(t.next_label("sum_axis"), "axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  const auto sp = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  if (keepdim)
    out_shape[axis] = 1;
  else
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor out(out_shape);
  const auto x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t m = 0; m < sp.mid; ++m)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.mid + m) * sp.inner + i];
  const std::size_t ida = a.id();
  return t.record(std::move(out), {ida}, "sum_axis", [ida, sp](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    double* ga = tp.accumulator(ida);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t m = 0; m < sp.mid; ++m)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.mid + m) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean_axis(Var a, std::size_t axis, bool keepdim) {
  const double n = static_cast<double>(a.shape().at(axis));
  return scale(sum_axis(a, axis, keepdim), 1.0 / n);
}

Var var(Var a) { return mean(square(sub(a, mean(a)))); }

Var var_axis(Var a, std::size_t axis, bool keepdim) {
  Var mu = mean_axis(a, axis, true);
  return mean_axis(square(sub(a, mu)), axis, keepdim);
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw Error("concat: no inputs");
  Tape& t = parts.front().tape();
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError(t.next_label("concat"), "axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  std::vector<std::size_t> mids, ids;
  for (const auto& p : parts) {
    same_tape(parts.front(), p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) throw ShapeError(t.next_label("concat"), shape_str(s) + " does not fit " + shape_str(ref) + " along axis " + std::to_string(axis));
    out_shape[axis] += s[axis];
    mids.push_back(s[axis]);
    ids.push_back(p.id());
  }
  const auto sp = split_at(out_shape, axis);
  Tensor out(out_shape);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto x = parts[k].value().data();
    const std::size_t m = mids[k];
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(&x[o * m * sp.inner], m * sp.inner, &out.data()[(o * sp.mid + off) * sp.inner]);
    off += m;
  }
  return t.record(std::move(out), ids, "concat", [ids, mids, sp](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      const std::size_t m = mids[k];
      if (double* ga = tp.accumulator(ids[k])) {
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t j = 0; j < m * sp.inner; ++j) ga[o * m * sp.inner + j] += g[(o * sp.mid + off) * sp.inner + j];
      }
      off += m;
    }
  });
}

Var stack(const std::vector<Var>& parts) {
  std::vector<Var> lifted;
  lifted.reserve(parts.size());
  for (const auto& p : parts) {
    Shape s = p.shape();
    s.insert(s.begin(), 1);
    lifted.push_back(reshape(p, s));
  }
  return concat(lifted, 0);
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Tape& t = a.tape();
  if (axis >= a.rank() || begin >= end || end > a.dim(axis))
    throw ShapeError(t.next_label("slice"), "range [" + std::to_string(begin) + "," + std::to_string(end) +
                                                ") on axis " + std::to_string(axis) + " of " + shape_str(a.shape()));
  const auto sp = split_at(a.shape(), axis);
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t m = end - begin;
  Tensor out(out_shape);
  const auto x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy_n(&x[(o * sp.mid + begin) * sp.inner], m * sp.inner, &out.data()[o * m * sp.inner]);
  const std::size_t ida = a.id();
  return t.record(std::move(out), {ida}, "slice", [ida, sp, begin, m](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    double* ga = tp.accumulator(ida);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < m * sp.inner; ++j) ga[(o * sp.mid + begin) * sp.inner + j] += g[o * m * sp.inner + j];
  });
}

}  // namespace macb::ad
