#include "rcalign/ops.hpp"

#include <algorithm>
#include <cmath>

#include "rcalign/error.hpp"

namespace rcalign::ops {
namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw UsageError("operation on an unbound variable");
  return *a.tape;
}

// Elementwise unary op; deriv(x, y) returns dy/dx.
template <typename F, typename D>
Var unary(Var x, F f, D deriv) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return tape_of(x).record(std::move(out), {x}, [x, deriv](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    const Tensor& xv = t.value(x.id);
    const Tensor& yv = t.value(self);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
  });
}

// Resolves the broadcast factor for b against a: 1 for equal shapes, or the
// length of a's last axis when b's last axis is 1.
std::size_t broadcast_factor(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return 1;
  if (a.size() == b.size() && !a.empty() && b.back() == 1 &&
      std::equal(a.begin(), a.end() - 1, b.begin())) {
    return a.back();
  }
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) +
                       " against " + shape_str(a));
}

enum class BinOp { kAdd, kSub, kMul };

Var binary(Var a, Var b, BinOp op, const char* name) {
  // Put the broadcast operand (if any) on the right.
  bool swapped = false;
  if (a.shape() != b.shape() && a.shape().size() == b.shape().size() &&
      !a.shape().empty() && a.shape().back() == 1 && b.shape().back() != 1) {
    std::swap(a, b);
    swapped = true;
  }
  const std::size_t rep = broadcast_factor(a.shape(), b.shape(), name);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    const double y = bv[i / rep];
    switch (op) {
      case BinOp::kAdd: out[i] = x + y; break;
      case BinOp::kSub: out[i] = swapped ? y - x : x - y; break;
      case BinOp::kMul: out[i] = x * y; break;
    }
  }
  return tape_of(a).record(std::move(out), {a, b}, [a, b, rep, op, swapped](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    const Tensor& av = t.value(a.id);
    const Tensor& bv = t.value(b.id);
    // sign applied to each operand's gradient for subtraction
    const double sa = (op == BinOp::kSub && swapped) ? -1.0 : 1.0;
    const double sb = (op == BinOp::kSub && !swapped) ? -1.0 : 1.0;
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t i = 0; i < ga.size(); ++i) {
        ga[i] += op == BinOp::kMul ? g[i] * bv[i / rep] : sa * g[i];
      }
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) {
        gb[i / rep] += op == BinOp::kMul ? g[i] * av[i] : sb * g[i];
      }
    }
  });
}

// Four interleaved partial sums; fixed order keeps results deterministic.
double dot(const double* a, const double* b, std::size_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::size_t j = 0;
  for (; j + 4 <= n; j += 4) {
    s0 += a[j] * b[j];
    s1 += a[j + 1] * b[j + 1];
    s2 += a[j + 2] * b[j + 2];
    s3 += a[j + 3] * b[j + 3];
  }
  for (; j < n; ++j) s0 += a[j] * b[j];
  return (s0 + s1) + (s2 + s3);
}

// outer x axis_len x inner decomposition of a shape around an axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Var lstm_state(Var gates, Var c_prev) {
  const std::size_t d = c_prev.size();
  const Tensor& gv = gates.value();
  const Tensor& cv = c_prev.value();
  Tensor c({d});
  for (std::size_t k = 0; k < d; ++k) {
    const double i = stable_sigmoid(gv[k]);
    const double f = stable_sigmoid(gv[d + k]);
    const double g = std::tanh(gv[2 * d + k]);
    c[k] = f * cv[k] + i * g;
  }
  return tape_of(gates).record(std::move(c), {gates, c_prev}, [gates, c_prev, d](Tape& t, std::uint32_t self) {
    const auto gc = t.grad_of(self);
    const Tensor& gv = t.value(gates.id);
    const Tensor& cv = t.value(c_prev.id);
    const bool need_gates = t.requires_grad(gates.id);
    const bool need_c = t.requires_grad(c_prev.id);
    std::vector<double>* gg = need_gates ? &t.grad_buffer(gates.id) : nullptr;
    std::vector<double>* gcp = need_c ? &t.grad_buffer(c_prev.id) : nullptr;
    for (std::size_t k = 0; k < d; ++k) {
      const double i = stable_sigmoid(gv[k]);
      const double f = stable_sigmoid(gv[d + k]);
      const double g = std::tanh(gv[2 * d + k]);
      if (gg != nullptr) {
        (*gg)[k] += gc[k] * g * i * (1.0 - i);
        (*gg)[d + k] += gc[k] * cv[k] * f * (1.0 - f);
        (*gg)[2 * d + k] += gc[k] * i * (1.0 - g * g);
      }
      if (gcp != nullptr) (*gcp)[k] += gc[k] * f;
    }
  });
}

Var lstm_output(Var gates, Var c) {
  const std::size_t d = c.size();
  const Tensor& gv = gates.value();
  const Tensor& cv = c.value();
  Tensor h({d});
  for (std::size_t k = 0; k < d; ++k) h[k] = stable_sigmoid(gv[3 * d + k]) * std::tanh(cv[k]);
  return tape_of(gates).record(std::move(h), {gates, c}, [gates, c, d](Tape& t, std::uint32_t self) {
    const auto gh = t.grad_of(self);
    const Tensor& gv = t.value(gates.id);
    const Tensor& cv = t.value(c.id);
    const bool need_gates = t.requires_grad(gates.id);
    const bool need_c = t.requires_grad(c.id);
    std::vector<double>* gg = need_gates ? &t.grad_buffer(gates.id) : nullptr;
    std::vector<double>* gcv = need_c ? &t.grad_buffer(c.id) : nullptr;
    for (std::size_t k = 0; k < d; ++k) {
      const double o = stable_sigmoid(gv[3 * d + k]);
      const double tc = std::tanh(cv[k]);
      if (gg != nullptr) (*gg)[3 * d + k] += gh[k] * tc * o * (1.0 - o);
      if (gcv != nullptr) (*gcv)[k] += gh[k] * o * (1.0 - tc * tc);
    }
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() < 1 || av.rank() > 2 || bv.rank() != 2 || av.shape().back() != bv.dim(0)) {
    throw DimensionError("matmul: shapes " + shape_str(av.shape()) + " and " +
                         shape_str(bv.shape()) + " are incompatible");
  }
  const std::size_t m = av.rank() == 1 ? 1 : av.dim(0);
  const std::size_t k = bv.dim(0);
  const std::size_t n = bv.dim(1);
  Tensor out(av.rank() == 1 ? Shape{n} : Shape{m, n});
  const double* A = av.data().data();
  const double* B = bv.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* c_row = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double x = A[i * k + p];
      if (x == 0.0) continue;
      const double* b_row = B + p * n;
      for (std::size_t j = 0; j < n; ++j) c_row[j] += x * b_row[j];
    }
  }
  return tape_of(a).record(std::move(out), {a, b}, [a, b, m, k, n](Tape& t, std::uint32_t self) {
    const double* G = t.grad_of(self).data();
    const double* A = t.value(a.id).data().data();
    const double* B = t.value(b.id).data().data();
    if (t.requires_grad(a.id)) {
      double* GA = t.grad_buffer(a.id).data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* g_row = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          GA[i * k + p] += dot(g_row, B + p * n, n);
        }
      }
    }
    if (t.requires_grad(b.id)) {
      double* GB = t.grad_buffer(b.id).data();
      for (std::size_t i = 0; i < m; ++i) {
        const double* g_row = G + i * n;
        for (std::size_t p = 0; p < k; ++p) {
          const double x = A[i * k + p];
          if (x == 0.0) continue;
          double* gb_row = GB + p * n;
          for (std::size_t j = 0; j < n; ++j) gb_row[j] += x * g_row[j];
        }
      }
    }
  });
}

Var add(Var a, Var b) { return binary(a, b, BinOp::kAdd, "add"); }
Var sub(Var a, Var b) { return binary(a, b, BinOp::kSub, "sub"); }
Var mul(Var a, Var b) { return binary(a, b, BinOp::kMul, "mul"); }

Var add_rows(Var x, Var row_vec) {
  const Tensor& xv = x.value();
  const Tensor& rv = row_vec.value();
  if (rv.rank() != 1 || xv.rank() < 1 || xv.shape().back() != rv.size()) {
    throw DimensionError("add_rows: row " + shape_str(rv.shape()) +
                         " does not match trailing axis of " + shape_str(xv.shape()));
  }
  const std::size_t n = rv.size();
  Tensor out = xv;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += rv[i % n];
  return tape_of(x).record(std::move(out), {x, row_vec}, [x, row_vec, n](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    if (t.requires_grad(x.id)) {
      auto& gx = t.grad_buffer(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (t.requires_grad(row_vec.id)) {
      auto& gr = t.grad_buffer(row_vec.id);
      for (std::size_t i = 0; i < g.size(); ++i) gr[i % n] += g[i];
    }
  });
}

Var scale(Var x, double factor) {
  return unary(x, [factor](double v) { return v * factor; },
               [factor](double, double) { return factor; });
}

Var add_scalar(Var x, double offset) {
  return unary(x, [offset](double v) { return v + offset; },
               [](double, double) { return 1.0; });
}

Var one_minus(Var x) {
  return unary(x, [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var x) {
  return unary(x, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var exp(Var x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var softplus(Var x) {
  return unary(x, stable_softplus, [](double v, double) { return stable_sigmoid(v); });
}

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
               [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var softmax(Var x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(xv.shape()));
  }
  const AxisSplit s = split_axis(xv.shape(), axis);
  Tensor out(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s.len; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) out[base + j * s.inner] /= total;
    }
  }
  return tape_of(x).record(std::move(out), {x}, [x, s](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    const Tensor& y = t.value(self);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t idx = base + j * s.inner;
          dot += g[idx] * y[idx];
        }
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t idx = base + j * s.inner;
          gx[idx] += y[idx] * (g[idx] - dot);
        }
      }
    }
  });
}

Var concat(Var a, Var b, std::size_t axis) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  bool ok = sa.size() == sb.size() && axis < sa.size();
  for (std::size_t i = 0; ok && i < sa.size(); ++i) {
    if (i != axis && sa[i] != sb[i]) ok = false;
  }
  if (!ok) {
    throw DimensionError("concat: shapes " + shape_str(sa) + " and " + shape_str(sb) +
                         " differ outside axis " + std::to_string(axis));
  }
  const AxisSplit xa = split_axis(sa, axis);
  const AxisSplit xb = split_axis(sb, axis);
  const std::size_t chunk_a = xa.len * xa.inner;
  const std::size_t chunk_b = xb.len * xb.inner;
  Shape so = sa;
  so[axis] = sa[axis] + sb[axis];
  Tensor out(so);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for (std::size_t o = 0; o < xa.outer; ++o) {
    double* dst = out.data().data() + o * (chunk_a + chunk_b);
    std::copy_n(av.data().data() + o * chunk_a, chunk_a, dst);
    std::copy_n(bv.data().data() + o * chunk_b, chunk_b, dst + chunk_a);
  }
  const std::size_t outer = xa.outer;
  return tape_of(a).record(std::move(out), {a, b}, [a, b, outer, chunk_a, chunk_b](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad_buffer(a.id);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < chunk_a; ++i) ga[o * chunk_a + i] += g[o * (chunk_a + chunk_b) + i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad_buffer(b.id);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < chunk_b; ++i)
          gb[o * chunk_b + i] += g[o * (chunk_a + chunk_b) + chunk_a + i];
    }
  });
}

Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  if (tv.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + shape_str(tv.shape()));
  const std::size_t vocab = tv.dim(0);
  const std::size_t d = tv.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  Tensor out({idx.size(), d});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= vocab) {
      throw IndexError("embedding_lookup: id " + std::to_string(idx[r]) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    std::copy_n(tv.data().data() + idx[r] * d, d, out.data().data() + r * d);
  }
  return tape_of(table).record(std::move(out), {table}, [table, idx = std::move(idx), d](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    auto& gt = t.grad_buffer(table.id);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < d; ++c) gt[idx[r] * d + c] += g[r * d + c];
  });
}

Var reshape(Var x, Shape shape) {
  const Tensor& xv = x.value();
  if (shape_size(shape) != xv.size()) {
    throw DimensionError("reshape: " + shape_str(xv.shape()) + " -> " + shape_str(shape));
  }
  Tensor out(std::move(shape), xv.storage());
  return tape_of(x).record(std::move(out), {x}, [x](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var row(Var x, std::size_t index) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || index >= xv.dim(0)) {
    throw IndexError("row: index " + std::to_string(index) + " invalid for " + shape_str(xv.shape()));
  }
  const std::size_t n = xv.dim(1);
  Tensor out({n});
  std::copy_n(xv.data().data() + index * n, n, out.data().data());
  return tape_of(x).record(std::move(out), {x}, [x, index, n](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t c = 0; c < n; ++c) gx[index * n + c] += g[c];
  });
}

Var slice(Var x, std::size_t begin, std::size_t length) {
  const Tensor& xv = x.value();
  if (xv.rank() != 1 || begin + length > xv.size()) {
    throw DimensionError("slice: [" + std::to_string(begin) + ", " + std::to_string(begin + length) +
                         ") invalid for " + shape_str(xv.shape()));
  }
  Tensor out({length});
  std::copy_n(xv.data().data() + begin, length, out.data().data());
  return tape_of(x).record(std::move(out), {x}, [x, begin, length](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < length; ++i) gx[begin + i] += g[i];
  });
}

Var stack_rows(std::span<const Var> rows) {
  if (rows.empty()) throw UsageError("stack_rows: no rows");
  Tape& t = tape_of(rows.front());
  const std::size_t n = rows.front().size();
  Tensor out({rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Tensor& rv = rows[r].value();
    if (rv.rank() != 1 || rv.size() != n) {
      throw DimensionError("stack_rows: row " + std::to_string(r) + " has shape " + shape_str(rv.shape()));
    }
    std::copy_n(rv.data().data(), n, out.data().data() + r * n);
  }
  std::vector<Var> inputs(rows.begin(), rows.end());
  return t.record(std::move(out), rows, [inputs = std::move(inputs), n](Tape& tp, std::uint32_t self) {
    const auto g = tp.grad_of(self);
    for (std::size_t r = 0; r < inputs.size(); ++r) {
      if (!tp.requires_grad(inputs[r].id)) continue;
      auto& gr = tp.grad_buffer(inputs[r].id);
      for (std::size_t c = 0; c < n; ++c) gr[c] += g[r * n + c];
    }
  });
}

Var sum(Var x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.data()) total += v;
  return tape_of(x).record(Tensor({1}, {total}), {x}, [x](Tape& t, std::uint32_t self) {
    const double g = t.grad_of(self)[0];
    auto& gx = t.grad_buffer(x.id);
    for (double& v : gx) v += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.size();
  if (n == 0) throw UsageError("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var normalize(Var x) {
  const Tensor& xv = x.value();
  double total = 0.0;
  for (double v : xv.data()) total += v;
  if (!(total > 0.0)) throw NumericError("normalize: total mass is not positive");
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / total;
  return tape_of(x).record(std::move(out), {x}, [x, total](Tape& t, std::uint32_t self) {
    const auto g = t.grad_of(self);
    const Tensor& y = t.value(self);
    double dot = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
    auto& gx = t.grad_buffer(x.id);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += (g[i] - dot) / total;
  });
}

LstmOut lstm_cell(Var x, Var h_prev, Var c_prev, Var weights, Var bias) {
  const std::size_t d_in = x.size();
  const std::size_t d_h = h_prev.size();
  if (x.value().rank() != 1 || h_prev.value().rank() != 1 || c_prev.size() != d_h ||
      weights.value().rank() != 2 || weights.value().dim(0) != d_in + d_h ||
      weights.value().dim(1) != 4 * d_h || bias.size() != 4 * d_h) {
    throw DimensionError("lstm_cell: x " + shape_str(x.shape()) + ", h " + shape_str(h_prev.shape()) +
                         ", c " + shape_str(c_prev.shape()) + ", weights " + shape_str(weights.shape()) +
                         ", bias " + shape_str(bias.shape()) + " are inconsistent");
  }
  Var gates = add_rows(matmul(concat(x, h_prev, 0), weights), bias);
  Var c = lstm_state(gates, c_prev);
  Var h = lstm_output(gates, c);
  return {h, c};
}

Var conv1d(Var signal, Var kernel) {
  const Tensor& sv = signal.value();
  const Tensor& kv = kernel.value();
  if (kv.rank() != 3) throw DimensionError("conv1d: kernel must be [k x c_in x c_out], got " + shape_str(kv.shape()));
  const std::size_t k = kv.dim(0);
  if (k % 2 == 0) throw ConfigError("conv1d: kernel width must be odd, got " + std::to_string(k));
  if (sv.rank() != 2 || sv.dim(1) != kv.dim(1)) {
    throw DimensionError("conv1d: signal " + shape_str(sv.shape()) + " does not match kernel " +
                         shape_str(kv.shape()));
  }
  const std::size_t n = sv.dim(0);
  const std::size_t c_in = kv.dim(1);
  const std::size_t c_out = kv.dim(2);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out({n, c_out});
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t s = 0; s < k; ++s) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(s) - half;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
      for (std::size_t c = 0; c < c_in; ++c) {
        const double x = sv.at(static_cast<std::size_t>(src), c);
        if (x == 0.0) continue;
        const double* krow = kv.data().data() + (s * c_in + c) * c_out;
        double* orow = out.data().data() + t * c_out;
        for (std::size_t o = 0; o < c_out; ++o) orow[o] += x * krow[o];
      }
    }
  }
  return tape_of(signal).record(std::move(out), {signal, kernel},
                                [signal, kernel, n, k, c_in, c_out, half](Tape& tp, std::uint32_t self) {
    const auto g = tp.grad_of(self);
    const Tensor& sv = tp.value(signal.id);
    const Tensor& kv = tp.value(kernel.id);
    std::vector<double>* gs = tp.requires_grad(signal.id) ? &tp.grad_buffer(signal.id) : nullptr;
    std::vector<double>* gk = tp.requires_grad(kernel.id) ? &tp.grad_buffer(kernel.id) : nullptr;
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t s = 0; s < k; ++s) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(s) - half;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(n)) continue;
        const auto usrc = static_cast<std::size_t>(src);
        for (std::size_t c = 0; c < c_in; ++c) {
          const std::size_t kbase = (s * c_in + c) * c_out;
          double acc = 0.0;
          for (std::size_t o = 0; o < c_out; ++o) {
            const double go = g[t * c_out + o];
            acc += go * kv[kbase + o];
            if (gk != nullptr) (*gk)[kbase + o] += go * sv[usrc * c_in + c];
          }
          if (gs != nullptr) (*gs)[usrc * c_in + c] += acc;
        }
      }
    }
  });
}

Var mse(Var prediction, Var target) {
  if (prediction.shape() != target.shape()) {
    throw DimensionError("mse: prediction " + shape_str(prediction.shape()) + " vs target " +
                         shape_str(target.shape()));
  }
  Var diff = sub(prediction, target);
  return mean(mul(diff, diff));
}

Var bce_with_logits(Var logits, Var targets, double pos_weight) {
  if (logits.shape() != targets.shape()) {
    throw DimensionError("bce_with_logits: logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  }
  // softplus(x) - y x == -[y log s(x) + (1 - y) log(1 - s(x))]
  if (pos_weight == 1.0) return mean(sub(softplus(logits), mul(targets, logits)));
  // (1 - y) softplus(x) + w y softplus(-x), with softplus(-x) = softplus(x) - x
  Var sp = softplus(logits);
  return mean(add(mul(one_minus(targets), sp), scale(mul(targets, sub(sp, logits)), pos_weight)));
}

Var apply_mask(Var x, const Tensor& mask) {
  if (mask.shape() != x.shape()) {
    throw DimensionError("apply_mask: mask " + shape_str(mask.shape()) + " vs " + shape_str(x.shape()));
  }
  return mul(x, tape_of(x).constant(mask));
}

}  // namespace rcalign::ops
