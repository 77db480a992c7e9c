#include "core/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "core/parallel.hpp"

namespace colidr {

namespace {

Tape& tape_of(Value a) {
  CLDR_CHECK(a.valid(), ErrorKind::Internal, "op on detached Value");
  return *a.tape;
}

void check_same_tape(const char* op, Value a, Value b) {
  CLDR_CHECK(a.tape == b.tape, ErrorKind::Internal, "op '" << op << "': mixed tapes");
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  CLDR_CHECK(a.same_shape(b), ErrorKind::ShapeMismatch,
             "op '" << op << "': shape " << shape_str(a.shape) << " vs "
                    << shape_str(b.shape));
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double stable_softplus(double z) {
  // log(1 + e^z) without overflow
  return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
}

double sigmoid_scalar(double z) {
  if (z >= 0.0) {
    double e = std::exp(-z);
    return 1.0 / (1.0 + e);
  }
  double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

// ---------------------------------------------------------------------------
// GEMM kernels. Row-major, plain loops ordered so the inner loop streams
// contiguously and auto-vectorizes; accumulation order is fixed, so results
// are bitwise reproducible.
// ---------------------------------------------------------------------------

void gemm_nn(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      axpy(av, brow, crow, static_cast<std::size_t>(n));
    }
  }
}

void gemm_nt(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate) {
  // c[i,j] (+)= sum_p a[i,p] * b[j,p]
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

void gemm_tn(int m, int n, int k, const double* a, const double* b, double* c,
             bool accumulate) {
  // c[i,j] (+)= sum_p a[p,i] * b[p,j]   (a is k x m, b is k x n)
  if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m) * n);
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<std::size_t>(p) * m;
    const double* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      axpy(av, brow, c + static_cast<std::size_t>(i) * n, static_cast<std::size_t>(n));
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

Value add(Value a, Value b) {
  check_same_tape("add", a, b);
  Tape& t = tape_of(a);
  const Tensor& ta = t.out(a.id);
  const Tensor& tb = t.out(b.id);
  check_same_shape("add", ta, tb);
  Tensor out(ta.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + tb[i];
  int id = t.add_node("add", std::move(out), {a.id, b.id}, [](Tape& tp, Node& n) {
    for (int in : n.inputs) {
      if (!tp.node_needs_grad(in)) continue;
      axpy(1.0, n.grad.data.data(), tp.grad_ref(in).data.data(), n.grad.numel());
    }
  });
  return Value{&t, id};
}

Value sub(Value a, Value b) {
  check_same_tape("sub", a, b);
  Tape& t = tape_of(a);
  const Tensor& ta = t.out(a.id);
  const Tensor& tb = t.out(b.id);
  check_same_shape("sub", ta, tb);
  Tensor out(ta.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] - tb[i];
  int id = t.add_node("sub", std::move(out), {a.id, b.id}, [](Tape& tp, Node& n) {
    if (tp.node_needs_grad(n.inputs[0]))
      axpy(1.0, n.grad.data.data(), tp.grad_ref(n.inputs[0]).data.data(), n.grad.numel());
    if (tp.node_needs_grad(n.inputs[1]))
      axpy(-1.0, n.grad.data.data(), tp.grad_ref(n.inputs[1]).data.data(), n.grad.numel());
  });
  return Value{&t, id};
}

Value mul(Value a, Value b) {
  check_same_tape("mul", a, b);
  Tape& t = tape_of(a);
  const Tensor& ta = t.out(a.id);
  const Tensor& tb = t.out(b.id);
  check_same_shape("mul", ta, tb);
  Tensor out(ta.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * tb[i];
  int id = t.add_node("mul", std::move(out), {a.id, b.id}, [](Tape& tp, Node& n) {
    const Tensor& va = tp.out(n.inputs[0]);
    const Tensor& vb = tp.out(n.inputs[1]);
    if (tp.node_needs_grad(n.inputs[0])) {
      double* g = tp.grad_ref(n.inputs[0]).data.data();
      for (std::size_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * vb[i];
    }
    if (tp.node_needs_grad(n.inputs[1])) {
      double* g = tp.grad_ref(n.inputs[1]).data.data();
      for (std::size_t i = 0; i < n.grad.numel(); ++i) g[i] += n.grad[i] * va[i];
    }
  });
  return Value{&t, id};
}

Value scale(Value x, double c) {
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  Tensor out(tx.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = tx[i] * c;
  int id = t.add_node("scale", std::move(out), {x.id}, [c](Tape& tp, Node& n) {
    if (!tp.node_needs_grad(n.inputs[0])) return;
    axpy(c, n.grad.data.data(), tp.grad_ref(n.inputs[0]).data.data(), n.grad.numel());
  });
  return Value{&t, id};
}

Value add_scalar(Value x, double c) {
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  Tensor out(tx.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = tx[i] + c;
  int id = t.add_node("add_scalar", std::move(out), {x.id}, [](Tape& tp, Node& n) {
    if (!tp.node_needs_grad(n.inputs[0])) return;
    axpy(1.0, n.grad.data.data(), tp.grad_ref(n.inputs[0]).data.data(), n.grad.numel());
  });
  return Value{&t, id};
}

namespace {

template <typename Fwd, typename Bwd>
Value unary_op(const char* name, Value x, Fwd fwd, Bwd bwd_factor) {
  // bwd_factor(x_i, y_i) -> dy_i/dx_i
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  Tensor out(tx.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = fwd(tx[i]);
  int id = t.add_node(name, std::move(out), {x.id}, [bwd_factor](Tape& tp, Node& n) {
    if (!tp.node_needs_grad(n.inputs[0])) return;
    const Tensor& vx = tp.out(n.inputs[0]);
    double* g = tp.grad_ref(n.inputs[0]).data.data();
    for (std::size_t i = 0; i < n.grad.numel(); ++i)
      g[i] += n.grad[i] * bwd_factor(vx[i], n.out[i]);
  });
  return Value{&t, id};
}

}  // namespace

Value exp(Value x) {
  return unary_op("exp", x, [](double v) { return std::exp(v); },
                  [](double, double y) { return y; });
}

Value log(Value x) {
  return unary_op("log", x, [](double v) { return std::log(v); },
                  [](double v, double) { return 1.0 / v; });
}

Value square(Value x) {
  return unary_op("square", x, [](double v) { return v * v; },
                  [](double v, double) { return 2.0 * v; });
}

Value abs(Value x) {
  // subgradient 0 at the kink
  return unary_op("abs", x, [](double v) { return std::abs(v); },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Value sigmoid(Value x) {
  return unary_op("sigmoid", x, [](double v) { return sigmoid_scalar(v); },
                  [](double, double y) { return y * (1.0 - y); });
}

Value relu(Value x) {
  return unary_op("relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Value leaky_relu(Value x, double slope) {
  return unary_op(
      "leaky_relu", x, [slope](double v) { return v > 0.0 ? v : slope * v; },
      [slope](double v, double) { return v > 0.0 ? 1.0 : slope; });
}

// ---------------------------------------------------------------------------
// Shape and selection
// ---------------------------------------------------------------------------

Value reshape(Value x, Shape s) {
  Tape& t = tape_of(x);
  Tensor out = t.out(x.id).reshaped(std::move(s));
  int id = t.add_node("reshape", std::move(out), {x.id}, [](Tape& tp, Node& n) {
    if (!tp.node_needs_grad(n.inputs[0])) return;
    axpy(1.0, n.grad.data.data(), tp.grad_ref(n.inputs[0]).data.data(), n.grad.numel());
  });
  return Value{&t, id};
}

Value slice_cols(Value x, int lo, int hi) {
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  CLDR_CHECK(tx.ndim() == 2, ErrorKind::ShapeMismatch,
             "op 'slice_cols': expected rank-2 input, got " << shape_str(tx.shape));
  int rows = tx.dim(0), cols = tx.dim(1);
  CLDR_CHECK(0 <= lo && lo < hi && hi <= cols, ErrorKind::ShapeMismatch,
             "op 'slice_cols': range [" << lo << ", " << hi << ") out of " << cols
                                        << " columns");
  int width = hi - lo;
  Tensor out({rows, width});
  for (int r = 0; r < rows; ++r)
    std::memcpy(&out.data[static_cast<std::size_t>(r) * width],
                &tx.data[static_cast<std::size_t>(r) * cols + lo],
                sizeof(double) * static_cast<std::size_t>(width));
  int id = t.add_node("slice_cols", std::move(out), {x.id},
                      [lo, width, cols, rows](Tape& tp, Node& n) {
                        if (!tp.node_needs_grad(n.inputs[0])) return;
                        double* g = tp.grad_ref(n.inputs[0]).data.data();
                        for (int r = 0; r < rows; ++r)
                          axpy(1.0, &n.grad.data[static_cast<std::size_t>(r) * width],
                               g + static_cast<std::size_t>(r) * cols + lo,
                               static_cast<std::size_t>(width));
                      });
  return Value{&t, id};
}

Value concat_cols(const std::vector<Value>& parts) {
  CLDR_CHECK(!parts.empty(), ErrorKind::InvalidArgument, "op 'concat_cols': no inputs");
  Tape& t = tape_of(parts[0]);
  int rows = t.out(parts[0].id).dim(0);
  int total = 0;
  std::vector<int> widths;
  std::vector<int> ids;
  for (const Value& p : parts) {
    check_same_tape("concat_cols", parts[0], p);
    const Tensor& tp = t.out(p.id);
    CLDR_CHECK(tp.ndim() == 2 && tp.dim(0) == rows, ErrorKind::ShapeMismatch,
               "op 'concat_cols': part shape " << shape_str(tp.shape) << " vs " << rows
                                               << " rows");
    widths.push_back(tp.dim(1));
    ids.push_back(p.id);
    total += tp.dim(1);
  }
  Tensor out({rows, total});
  int off = 0;
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const Tensor& src = t.out(ids[k]);
    for (int r = 0; r < rows; ++r)
      std::memcpy(&out.data[static_cast<std::size_t>(r) * total + off],
                  &src.data[static_cast<std::size_t>(r) * widths[k]],
                  sizeof(double) * static_cast<std::size_t>(widths[k]));
    off += widths[k];
  }
  int id = t.add_node("concat_cols", std::move(out), ids,
                      [rows, total, widths](Tape& tp, Node& n) {
                        int off2 = 0;
                        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                          int w = widths[k];
                          if (tp.node_needs_grad(n.inputs[k])) {
                            double* g = tp.grad_ref(n.inputs[k]).data.data();
                            for (int r = 0; r < rows; ++r)
                              axpy(1.0,
                                   &n.grad.data[static_cast<std::size_t>(r) * total + off2],
                                   g + static_cast<std::size_t>(r) * w,
                                   static_cast<std::size_t>(w));
                          }
                          off2 += w;
                        }
                      });
  return Value{&t, id};
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Value matmul(Value a, Value b) {
  check_same_tape("matmul", a, b);
  Tape& t = tape_of(a);
  const Tensor& ta = t.out(a.id);
  const Tensor& tb = t.out(b.id);
  CLDR_CHECK(ta.ndim() == 2 && tb.ndim() == 2 && ta.dim(1) == tb.dim(0),
             ErrorKind::ShapeMismatch,
             "op 'matmul': " << shape_str(ta.shape) << " x " << shape_str(tb.shape));
  int m = ta.dim(0), k = ta.dim(1), n2 = tb.dim(1);
  Tensor out({m, n2});
  gemm_nn(m, n2, k, ta.data.data(), tb.data.data(), out.data.data(), false);
  int id = t.add_node("matmul", std::move(out), {a.id, b.id},
                      [m, k, n2](Tape& tp, Node& n) {
                        const Tensor& va = tp.out(n.inputs[0]);
                        const Tensor& vb = tp.out(n.inputs[1]);
                        if (tp.node_needs_grad(n.inputs[0]))
                          gemm_nt(m, k, n2, n.grad.data.data(), vb.data.data(),
                                  tp.grad_ref(n.inputs[0]).data.data(), true);
                        if (tp.node_needs_grad(n.inputs[1]))
                          gemm_tn(k, n2, m, va.data.data(), n.grad.data.data(),
                                  tp.grad_ref(n.inputs[1]).data.data(), true);
                      });
  return Value{&t, id};
}

Value linear(Value x, Value w, Value b) {
  check_same_tape("linear", x, w);
  check_same_tape("linear", x, b);
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  const Tensor& tw = t.out(w.id);
  const Tensor& tb = t.out(b.id);
  CLDR_CHECK(tx.ndim() == 2 && tw.ndim() == 2 && tx.dim(1) == tw.dim(1),
             ErrorKind::ShapeMismatch,
             "op 'linear': input " << shape_str(tx.shape) << " vs weight "
                                   << shape_str(tw.shape));
  int rows = tx.dim(0), d = tx.dim(1), o = tw.dim(0);
  CLDR_CHECK(tb.ndim() == 1 && tb.dim(0) == o, ErrorKind::ShapeMismatch,
             "op 'linear': bias " << shape_str(tb.shape) << " vs " << o << " outputs");
  Tensor out({rows, o});
  gemm_nt(rows, o, d, tx.data.data(), tw.data.data(), out.data.data(), false);
  for (int r = 0; r < rows; ++r)
    axpy(1.0, tb.data.data(), &out.data[static_cast<std::size_t>(r) * o],
         static_cast<std::size_t>(o));
  int id = t.add_node("linear", std::move(out), {x.id, w.id, b.id},
                      [rows, d, o](Tape& tp, Node& n) {
                        const Tensor& vx = tp.out(n.inputs[0]);
                        const Tensor& vw = tp.out(n.inputs[1]);
                        if (tp.node_needs_grad(n.inputs[0]))
                          gemm_nn(rows, d, o, n.grad.data.data(), vw.data.data(),
                                  tp.grad_ref(n.inputs[0]).data.data(), true);
                        if (tp.node_needs_grad(n.inputs[1]))
                          gemm_tn(o, d, rows, n.grad.data.data(), vx.data.data(),
                                  tp.grad_ref(n.inputs[1]).data.data(), true);
                        if (tp.node_needs_grad(n.inputs[2])) {
                          double* gb = tp.grad_ref(n.inputs[2]).data.data();
                          for (int r = 0; r < rows; ++r)
                            axpy(1.0, &n.grad.data[static_cast<std::size_t>(r) * o], gb,
                                 static_cast<std::size_t>(o));
                        }
                      });
  return Value{&t, id};
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int n, c, h, w;       // input
  int oc, kh, kw;       // kernel
  int stride, pad;
  int oh, ow;
};

// col is (c*kh*kw) x (oh*ow)
void im2col(const double* x, const ConvDims& d, double* col) {
  const int ohw = d.oh * d.ow;
  for (int ch = 0; ch < d.c; ++ch) {
    const double* xc = x + static_cast<std::size_t>(ch) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        double* row = col + (static_cast<std::size_t>(ch) * d.kh * d.kw +
                             static_cast<std::size_t>(ki) * d.kw + kj) *
                                ohw;
        for (int oh = 0; oh < d.oh; ++oh) {
          int ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.h) {
            std::memset(row + static_cast<std::size_t>(oh) * d.ow, 0,
                        sizeof(double) * static_cast<std::size_t>(d.ow));
            continue;
          }
          for (int ow = 0; ow < d.ow; ++ow) {
            int iw = ow * d.stride - d.pad + kj;
            row[static_cast<std::size_t>(oh) * d.ow + ow] =
                (iw < 0 || iw >= d.w) ? 0.0 : xc[static_cast<std::size_t>(ih) * d.w + iw];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, double* x) {
  const int ohw = d.oh * d.ow;
  for (int ch = 0; ch < d.c; ++ch) {
    double* xc = x + static_cast<std::size_t>(ch) * d.h * d.w;
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const double* row = col + (static_cast<std::size_t>(ch) * d.kh * d.kw +
                                   static_cast<std::size_t>(ki) * d.kw + kj) *
                                      ohw;
        for (int oh = 0; oh < d.oh; ++oh) {
          int ih = oh * d.stride - d.pad + ki;
          if (ih < 0 || ih >= d.h) continue;
          for (int ow = 0; ow < d.ow; ++ow) {
            int iw = ow * d.stride - d.pad + kj;
            if (iw < 0 || iw >= d.w) continue;
            xc[static_cast<std::size_t>(ih) * d.w + iw] +=
                row[static_cast<std::size_t>(oh) * d.ow + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Value conv2d(Value x, Value w, Value b, int stride, int pad) {
  check_same_tape("conv2d", x, w);
  check_same_tape("conv2d", x, b);
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  const Tensor& tw = t.out(w.id);
  const Tensor& tb = t.out(b.id);
  CLDR_CHECK(tx.ndim() == 4 && tw.ndim() == 4, ErrorKind::ShapeMismatch,
             "op 'conv2d': input " << shape_str(tx.shape) << ", weight "
                                   << shape_str(tw.shape));
  ConvDims d;
  d.n = tx.dim(0);
  d.c = tx.dim(1);
  d.h = tx.dim(2);
  d.w = tx.dim(3);
  d.oc = tw.dim(0);
  d.kh = tw.dim(2);
  d.kw = tw.dim(3);
  d.stride = stride;
  d.pad = pad;
  CLDR_CHECK(tw.dim(1) == d.c, ErrorKind::ShapeMismatch,
             "op 'conv2d': weight expects " << tw.dim(1) << " channels, input has " << d.c);
  CLDR_CHECK(tb.ndim() == 1 && tb.dim(0) == d.oc, ErrorKind::ShapeMismatch,
             "op 'conv2d': bias " << shape_str(tb.shape) << " vs " << d.oc << " filters");
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  CLDR_CHECK(d.oh > 0 && d.ow > 0, ErrorKind::ShapeMismatch,
             "op 'conv2d': kernel " << d.kh << "x" << d.kw << " does not fit input "
                                    << d.h << "x" << d.w);

  const int ckk = d.c * d.kh * d.kw;
  const int ohw = d.oh * d.ow;
  Tensor out({d.n, d.oc, d.oh, d.ow});
  parallel_for(static_cast<std::size_t>(d.n), [&](std::size_t lo, std::size_t hi) {
    std::vector<double> col(static_cast<std::size_t>(ckk) * ohw);
    for (std::size_t s = lo; s < hi; ++s) {
      im2col(tx.data.data() + s * d.c * d.h * d.w, d, col.data());
      double* y = out.data.data() + s * d.oc * ohw;
      gemm_nn(d.oc, ohw, ckk, tw.data.data(), col.data(), y, false);
      for (int oc = 0; oc < d.oc; ++oc) {
        double bias = tb[oc];
        double* yrow = y + static_cast<std::size_t>(oc) * ohw;
        for (int q = 0; q < ohw; ++q) yrow[q] += bias;
      }
    }
  });

  int id = t.add_node("conv2d", std::move(out), {x.id, w.id, b.id}, [d, ckk, ohw](Tape& tp,
                                                                                  Node& n) {
    const Tensor& vx = tp.out(n.inputs[0]);
    const Tensor& vw = tp.out(n.inputs[1]);
    bool need_x = tp.node_needs_grad(n.inputs[0]);
    bool need_w = tp.node_needs_grad(n.inputs[1]);
    bool need_b = tp.node_needs_grad(n.inputs[2]);
    if (need_x) {
      double* gx = tp.grad_ref(n.inputs[0]).data.data();
      parallel_for(static_cast<std::size_t>(d.n), [&](std::size_t lo, std::size_t hi) {
        std::vector<double> dcol(static_cast<std::size_t>(ckk) * ohw);
        for (std::size_t s = lo; s < hi; ++s) {
          const double* gy = n.grad.data.data() + s * d.oc * ohw;
          gemm_tn(ckk, ohw, d.oc, vw.data.data(), gy, dcol.data(), false);
          col2im_add(dcol.data(), d, gx + s * d.c * d.h * d.w);
        }
      });
    }
    if (need_w || need_b) {
      // per-chunk partials reduced in ascending chunk order
      std::size_t chunks = chunk_count(static_cast<std::size_t>(d.n));
      std::size_t wsize = static_cast<std::size_t>(d.oc) * ckk;
      std::vector<std::vector<double>> wparts(
          chunks, std::vector<double>(need_w ? wsize : 0, 0.0));
      std::vector<std::vector<double>> bparts(
          chunks, std::vector<double>(need_b ? d.oc : 0, 0.0));
      parallel_for_chunks(
          static_cast<std::size_t>(d.n),
          [&](std::size_t chunk, std::size_t lo, std::size_t hi) {
            std::vector<double> col(static_cast<std::size_t>(ckk) * ohw);
            for (std::size_t s = lo; s < hi; ++s) {
              const double* gy = n.grad.data.data() + s * d.oc * ohw;
              if (need_w) {
                im2col(vx.data.data() + s * d.c * d.h * d.w, d, col.data());
                gemm_nt(d.oc, ckk, ohw, gy, col.data(), wparts[chunk].data(), true);
              }
              if (need_b) {
                for (int oc = 0; oc < d.oc; ++oc) {
                  const double* row = gy + static_cast<std::size_t>(oc) * ohw;
                  double acc = 0.0;
                  for (int q = 0; q < ohw; ++q) acc += row[q];
                  bparts[chunk][oc] += acc;
                }
              }
            }
          },
          nullptr);
      if (need_w) {
        double* gw = tp.grad_ref(n.inputs[1]).data.data();
        for (std::size_t ch = 0; ch < chunks; ++ch) axpy(1.0, wparts[ch].data(), gw, wsize);
      }
      if (need_b) {
        double* gb = tp.grad_ref(n.inputs[2]).data.data();
        for (std::size_t ch = 0; ch < chunks; ++ch)
          axpy(1.0, bparts[ch].data(), gb, static_cast<std::size_t>(d.oc));
      }
    }
  });
  return Value{&t, id};
}

Value conv_transpose2d(Value x, Value w, Value b, int stride, int pad, int out_pad) {
  check_same_tape("conv_transpose2d", x, w);
  check_same_tape("conv_transpose2d", x, b);
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  const Tensor& tw = t.out(w.id);
  const Tensor& tb = t.out(b.id);
  CLDR_CHECK(tx.ndim() == 4 && tw.ndim() == 4, ErrorKind::ShapeMismatch,
             "op 'conv_transpose2d': input " << shape_str(tx.shape) << ", weight "
                                             << shape_str(tw.shape));
  CLDR_CHECK(tw.dim(0) == tx.dim(1), ErrorKind::ShapeMismatch,
             "op 'conv_transpose2d': weight expects " << tw.dim(0)
                                                      << " input channels, input has "
                                                      << tx.dim(1));
  // Geometry mirrors conv2d with input and output swapped: d.{c,h,w} describe
  // the *output* side so im2col/col2im can be reused unchanged.
  ConvDims d;
  d.n = tx.dim(0);
  d.oc = tx.dim(1);           // channels on the small side (conv-transpose input)
  d.c = tw.dim(1);            // channels on the large side (conv-transpose output)
  d.oh = tx.dim(2);
  d.ow = tx.dim(3);
  d.kh = tw.dim(2);
  d.kw = tw.dim(3);
  d.stride = stride;
  d.pad = pad;
  d.h = (d.oh - 1) * stride - 2 * pad + d.kh + out_pad;
  d.w = (d.ow - 1) * stride - 2 * pad + d.kw + out_pad;
  CLDR_CHECK(d.h > 0 && d.w > 0, ErrorKind::ShapeMismatch,
             "op 'conv_transpose2d': degenerate output " << d.h << "x" << d.w);
  CLDR_CHECK(tb.ndim() == 1 && tb.dim(0) == d.c, ErrorKind::ShapeMismatch,
             "op 'conv_transpose2d': bias " << shape_str(tb.shape) << " vs " << d.c
                                            << " output channels");

  const int ckk = d.c * d.kh * d.kw;
  const int ohw = d.oh * d.ow;
  const int out_chw = d.c * d.h * d.w;
  // w is [oc_small, c_large, kh, kw]; the col route needs [c*kh*kw, :] rows, so
  // build wmat[(c,kh,kw), oc] once.
  std::vector<double> wmat(static_cast<std::size_t>(ckk) * d.oc);
  for (int oc = 0; oc < d.oc; ++oc)
    for (int ch = 0; ch < d.c; ++ch)
      for (int ki = 0; ki < d.kh; ++ki)
        for (int kj = 0; kj < d.kw; ++kj)
          wmat[(static_cast<std::size_t>(ch) * d.kh * d.kw +
                static_cast<std::size_t>(ki) * d.kw + kj) *
                   d.oc +
               oc] = tw.data[((static_cast<std::size_t>(oc) * d.c + ch) * d.kh + ki) * d.kw +
                             kj];

  Tensor out({d.n, d.c, d.h, d.w});
  parallel_for(static_cast<std::size_t>(d.n), [&](std::size_t lo, std::size_t hi) {
    std::vector<double> col(static_cast<std::size_t>(ckk) * ohw);
    for (std::size_t s = lo; s < hi; ++s) {
      const double* xs = tx.data.data() + s * d.oc * ohw;
      gemm_nn(ckk, ohw, d.oc, wmat.data(), xs, col.data(), false);
      double* y = out.data.data() + s * out_chw;
      col2im_add(col.data(), d, y);  // y starts zeroed (fresh tensor)
      for (int ch = 0; ch < d.c; ++ch) {
        double bias = tb[ch];
        double* yc = y + static_cast<std::size_t>(ch) * d.h * d.w;
        for (int q = 0; q < d.h * d.w; ++q) yc[q] += bias;
      }
    }
  });

  int id = t.add_node(
      "conv_transpose2d", std::move(out), {x.id, w.id, b.id},
      [d, ckk, ohw, out_chw](Tape& tp, Node& n) {
        const Tensor& vx = tp.out(n.inputs[0]);
        const Tensor& vw = tp.out(n.inputs[1]);
        bool need_x = tp.node_needs_grad(n.inputs[0]);
        bool need_w = tp.node_needs_grad(n.inputs[1]);
        bool need_b = tp.node_needs_grad(n.inputs[2]);
        std::vector<double> wmat(static_cast<std::size_t>(ckk) * d.oc);
        for (int oc = 0; oc < d.oc; ++oc)
          for (int ch = 0; ch < d.c; ++ch)
            for (int ki = 0; ki < d.kh; ++ki)
              for (int kj = 0; kj < d.kw; ++kj)
                wmat[(static_cast<std::size_t>(ch) * d.kh * d.kw +
                      static_cast<std::size_t>(ki) * d.kw + kj) *
                         d.oc +
                     oc] = vw.data[((static_cast<std::size_t>(oc) * d.c + ch) * d.kh + ki) *
                                       d.kw +
                                   kj];
        if (need_x) {
          double* gx = tp.grad_ref(n.inputs[0]).data.data();
          parallel_for(static_cast<std::size_t>(d.n), [&](std::size_t lo, std::size_t hi) {
            std::vector<double> dcol(static_cast<std::size_t>(ckk) * ohw);
            for (std::size_t s = lo; s < hi; ++s) {
              im2col(n.grad.data.data() + s * out_chw, d, dcol.data());
              gemm_tn(d.oc, ohw, ckk, wmat.data(), dcol.data(), gx + s * d.oc * ohw, true);
            }
          });
        }
        if (need_w || need_b) {
          std::size_t chunks = chunk_count(static_cast<std::size_t>(d.n));
          std::size_t wsize = static_cast<std::size_t>(ckk) * d.oc;
          std::vector<std::vector<double>> wparts(
              chunks, std::vector<double>(need_w ? wsize : 0, 0.0));
          std::vector<std::vector<double>> bparts(
              chunks, std::vector<double>(need_b ? d.c : 0, 0.0));
          parallel_for_chunks(
              static_cast<std::size_t>(d.n),
              [&](std::size_t chunk, std::size_t lo, std::size_t hi) {
                std::vector<double> dcol(static_cast<std::size_t>(ckk) * ohw);
                for (std::size_t s = lo; s < hi; ++s) {
                  const double* gy = n.grad.data.data() + s * out_chw;
                  if (need_w) {
                    im2col(gy, d, dcol.data());
                    // dwmat[(ckk), oc] += dcol[(ckk), q] * x[oc, q]^T
                    gemm_nt(ckk, d.oc, ohw, dcol.data(), vx.data.data() + s * d.oc * ohw,
                            wparts[chunk].data(), true);
                  }
                  if (need_b) {
                    for (int ch = 0; ch < d.c; ++ch) {
                      const double* row = gy + static_cast<std::size_t>(ch) * d.h * d.w;
                      double acc = 0.0;
                      for (int q = 0; q < d.h * d.w; ++q) acc += row[q];
                      bparts[chunk][ch] += acc;
                    }
                  }
                }
              },
              nullptr);
          if (need_w) {
            std::vector<double> dwmat(wsize, 0.0);
            for (std::size_t ch = 0; ch < chunks; ++ch)
              axpy(1.0, wparts[ch].data(), dwmat.data(), wsize);
            double* gw = tp.grad_ref(n.inputs[1]).data.data();
            for (int oc = 0; oc < d.oc; ++oc)
              for (int ch = 0; ch < d.c; ++ch)
                for (int ki = 0; ki < d.kh; ++ki)
                  for (int kj = 0; kj < d.kw; ++kj)
                    gw[((static_cast<std::size_t>(oc) * d.c + ch) * d.kh + ki) * d.kw + kj] +=
                        dwmat[(static_cast<std::size_t>(ch) * d.kh * d.kw +
                               static_cast<std::size_t>(ki) * d.kw + kj) *
                                  d.oc +
                              oc];
          }
          if (need_b) {
            double* gb = tp.grad_ref(n.inputs[2]).data.data();
            for (std::size_t ch = 0; ch < chunks; ++ch)
              axpy(1.0, bparts[ch].data(), gb, static_cast<std::size_t>(d.c));
          }
        }
      });
  return Value{&t, id};
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

BatchNormResult batchnorm2d(Value x, Value gamma, Value beta,
                            const Tensor& running_mean, const Tensor& running_var,
                            bool training, double eps) {
  check_same_tape("batchnorm2d", x, gamma);
  check_same_tape("batchnorm2d", x, beta);
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  const Tensor& tg = t.out(gamma.id);
  const Tensor& tbeta = t.out(beta.id);
  CLDR_CHECK(tx.ndim() == 4, ErrorKind::ShapeMismatch,
             "op 'batchnorm2d': expected NCHW input, got " << shape_str(tx.shape));
  const int N = tx.dim(0), C = tx.dim(1), H = tx.dim(2), W = tx.dim(3);
  CLDR_CHECK(tg.numel() == static_cast<std::size_t>(C) &&
                 tbeta.numel() == static_cast<std::size_t>(C),
             ErrorKind::ShapeMismatch,
             "op 'batchnorm2d': gamma/beta size vs " << C << " channels");
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  const std::size_t m = static_cast<std::size_t>(N) * hw;

  std::vector<double> mean(C), var(C);
  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int s = 0; s < N; ++s) {
        const double* p = tx.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
        for (std::size_t q = 0; q < hw; ++q) acc += p[q];
      }
      mean[c] = acc / static_cast<double>(m);
      double vacc = 0.0;
      for (int s = 0; s < N; ++s) {
        const double* p = tx.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
        for (std::size_t q = 0; q < hw; ++q) {
          double dlt = p[q] - mean[c];
          vacc += dlt * dlt;
        }
      }
      var[c] = vacc / static_cast<double>(m);
    }
  } else {
    CLDR_CHECK(running_mean.numel() == static_cast<std::size_t>(C) &&
                   running_var.numel() == static_cast<std::size_t>(C),
               ErrorKind::ShapeMismatch, "op 'batchnorm2d': running stats vs channels");
    mean.assign(running_mean.data.begin(), running_mean.data.end());
    var.assign(running_var.data.begin(), running_var.data.end());
  }

  std::vector<double> inv(C);
  for (int c = 0; c < C; ++c) inv[c] = 1.0 / std::sqrt(var[c] + eps);

  Tensor out(tx.shape);
  for (int s = 0; s < N; ++s) {
    for (int c = 0; c < C; ++c) {
      const double* p = tx.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
      double* y = out.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
      double g = tg[c], bt = tbeta[c], mu = mean[c], ic = inv[c];
      for (std::size_t q = 0; q < hw; ++q) y[q] = g * (p[q] - mu) * ic + bt;
    }
  }

  BatchNormResult res;
  if (training) {
    res.batch_mean = Tensor({C}, std::vector<double>(mean));
    res.batch_var = Tensor({C}, std::vector<double>(var));
  }

  int id = t.add_node(
      "batchnorm2d", std::move(out), {x.id, gamma.id, beta.id},
      [N, C, hw, m, mean, inv, training](Tape& tp, Node& n) {
        const Tensor& vx = tp.out(n.inputs[0]);
        const Tensor& vg = tp.out(n.inputs[1]);
        bool need_x = tp.node_needs_grad(n.inputs[0]);
        bool need_g = tp.node_needs_grad(n.inputs[1]);
        bool need_b = tp.node_needs_grad(n.inputs[2]);
        for (int c = 0; c < C; ++c) {
          double mu = mean[c], ic = inv[c], g = vg[c];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int s = 0; s < N; ++s) {
            const double* dy = n.grad.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
            const double* px = vx.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
            for (std::size_t q = 0; q < hw; ++q) {
              sum_dy += dy[q];
              sum_dy_xhat += dy[q] * (px[q] - mu) * ic;
            }
          }
          if (need_b) tp.grad_ref(n.inputs[2]).data[c] += sum_dy;
          if (need_g) tp.grad_ref(n.inputs[1]).data[c] += sum_dy_xhat;
          if (need_x) {
            double* gx_base = tp.grad_ref(n.inputs[0]).data.data();
            double inv_m = 1.0 / static_cast<double>(m);
            for (int s = 0; s < N; ++s) {
              const double* dy =
                  n.grad.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
              const double* px = vx.data.data() + (static_cast<std::size_t>(s) * C + c) * hw;
              double* gx = gx_base + (static_cast<std::size_t>(s) * C + c) * hw;
              if (training) {
                for (std::size_t q = 0; q < hw; ++q) {
                  double xhat = (px[q] - mu) * ic;
                  gx[q] += g * ic * (dy[q] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                }
              } else {
                for (std::size_t q = 0; q < hw; ++q) gx[q] += g * ic * dy[q];
              }
            }
          }
        }
      });
  res.y = Value{&t, id};
  return res;
}

// ---------------------------------------------------------------------------
// Reductions / rows
// ---------------------------------------------------------------------------

Value sum(Value x) {
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  double acc = 0.0;
  for (double v : tx.data) acc += v;
  int id = t.add_node("sum", Tensor::scalar(acc), {x.id}, [](Tape& tp, Node& n) {
    if (!tp.node_needs_grad(n.inputs[0])) return;
    double g = n.grad[0];
    double* gx = tp.grad_ref(n.inputs[0]).data.data();
    std::size_t m = tp.out(n.inputs[0]).numel();
    for (std::size_t i = 0; i < m; ++i) gx[i] += g;
  });
  return Value{&t, id};
}

Value mean_all(Value x) {
  std::size_t n = tape_of(x).out(x.id).numel();
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Value softmax_rows(Value x) {
  Tape& t = tape_of(x);
  const Tensor& tx = t.out(x.id);
  CLDR_CHECK(tx.ndim() == 2, ErrorKind::ShapeMismatch,
             "op 'softmax_rows': expected rank-2, got " << shape_str(tx.shape));
  int rows = tx.dim(0), cols = tx.dim(1);
  Tensor out(tx.shape);
  for (int r = 0; r < rows; ++r) {
    const double* xr = &tx.data[static_cast<std::size_t>(r) * cols];
    double* yr = &out.data[static_cast<std::size_t>(r) * cols];
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (int j = 0; j < cols; ++j) yr[j] /= z;
  }
  int id = t.add_node("softmax_rows", std::move(out), {x.id},
                      [rows, cols](Tape& tp, Node& n) {
                        if (!tp.node_needs_grad(n.inputs[0])) return;
                        double* gx = tp.grad_ref(n.inputs[0]).data.data();
                        for (int r = 0; r < rows; ++r) {
                          const double* y = &n.out.data[static_cast<std::size_t>(r) * cols];
                          const double* gy = &n.grad.data[static_cast<std::size_t>(r) * cols];
                          double dot = 0.0;
                          for (int j = 0; j < cols; ++j) dot += gy[j] * y[j];
                          double* gr = gx + static_cast<std::size_t>(r) * cols;
                          for (int j = 0; j < cols; ++j) gr[j] += y[j] * (gy[j] - dot);
                        }
                      });
  return Value{&t, id};
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

Value bce_with_logits(Value logits, const Tensor& targets, const Tensor& pos_weight) {
  Tape& t = tape_of(logits);
  const Tensor& tl = t.out(logits.id);
  CLDR_CHECK(tl.ndim() == 2, ErrorKind::ShapeMismatch,
             "op 'bce_with_logits': expected rank-2 logits, got " << shape_str(tl.shape));
  check_same_shape("bce_with_logits", tl, targets);
  int rows = tl.dim(0), cols = tl.dim(1);
  CLDR_CHECK(pos_weight.numel() == static_cast<std::size_t>(cols), ErrorKind::ShapeMismatch,
             "op 'bce_with_logits': pos_weight size " << pos_weight.numel() << " vs "
                                                      << cols << " concepts");
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    for (int j = 0; j < cols; ++j) {
      double l = tl.data[static_cast<std::size_t>(r) * cols + j];
      double tv = targets.data[static_cast<std::size_t>(r) * cols + j];
      double w = pos_weight[j];
      acc += w * tv * stable_softplus(-l) + (1.0 - tv) * stable_softplus(l);
    }
  }
  acc /= static_cast<double>(rows);
  Tensor tgt = targets;
  Tensor pw = pos_weight;
  int id = t.add_node("bce_with_logits", Tensor::scalar(acc), {logits.id},
                      [rows, cols, tgt, pw](Tape& tp, Node& n) {
                        if (!tp.node_needs_grad(n.inputs[0])) return;
                        double g = n.grad[0] / static_cast<double>(rows);
                        const Tensor& vl = tp.out(n.inputs[0]);
                        double* gl = tp.grad_ref(n.inputs[0]).data.data();
                        for (int r = 0; r < rows; ++r) {
                          for (int j = 0; j < cols; ++j) {
                            std::size_t idx = static_cast<std::size_t>(r) * cols + j;
                            double s = sigmoid_scalar(vl.data[idx]);
                            double tv = tgt.data[idx];
                            gl[idx] += g * (-pw[j] * tv * (1.0 - s) + (1.0 - tv) * s);
                          }
                        }
                      });
  return Value{&t, id};
}

Value cross_entropy_logits(Value logits, const std::vector<int>& labels) {
  Tape& t = tape_of(logits);
  const Tensor& tl = t.out(logits.id);
  CLDR_CHECK(tl.ndim() == 2, ErrorKind::ShapeMismatch,
             "op 'cross_entropy_logits': expected rank-2 logits, got "
                 << shape_str(tl.shape));
  int rows = tl.dim(0), cols = tl.dim(1);
  CLDR_CHECK(labels.size() == static_cast<std::size_t>(rows), ErrorKind::ShapeMismatch,
             "op 'cross_entropy_logits': " << labels.size() << " labels vs " << rows
                                           << " rows");
  for (int y : labels)
    CLDR_CHECK(0 <= y && y < cols, ErrorKind::InvalidArgument,
               "op 'cross_entropy_logits': class index " << y << " out of [0, " << cols
                                                         << ")");
  double acc = 0.0;
  for (int r = 0; r < rows; ++r) {
    const double* xr = &tl.data[static_cast<std::size_t>(r) * cols];
    double mx = xr[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j) z += std::exp(xr[j] - mx);
    acc += std::log(z) + mx - xr[labels[static_cast<std::size_t>(r)]];
  }
  acc /= static_cast<double>(rows);
  std::vector<int> lab = labels;
  int id = t.add_node("cross_entropy_logits", Tensor::scalar(acc), {logits.id},
                      [rows, cols, lab](Tape& tp, Node& n) {
                        if (!tp.node_needs_grad(n.inputs[0])) return;
                        double g = n.grad[0] / static_cast<double>(rows);
                        const Tensor& vl = tp.out(n.inputs[0]);
                        double* gl = tp.grad_ref(n.inputs[0]).data.data();
                        for (int r = 0; r < rows; ++r) {
                          const double* xr = &vl.data[static_cast<std::size_t>(r) * cols];
                          double mx = xr[0];
                          for (int j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
                          double z = 0.0;
                          for (int j = 0; j < cols; ++j) z += std::exp(xr[j] - mx);
                          for (int j = 0; j < cols; ++j) {
                            double p = std::exp(xr[j] - mx) / z;
                            double onehot =
                                (j == lab[static_cast<std::size_t>(r)]) ? 1.0 : 0.0;
                            gl[static_cast<std::size_t>(r) * cols + j] += g * (p - onehot);
                          }
                        }
                      });
  return Value{&t, id};
}

}  // namespace colidr
