#include "rsc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#ifdef RSC_HAVE_CBLAS
#include <cblas.h>
#endif

namespace rsc {

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '{';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << '}';
  return os.str();
}

namespace {

[[noreturn]] void fail_shape(const char* op, const std::string& detail) {
  throw std::invalid_argument(std::string(op) + ": " + detail);
}

void check_positive_extents(const char* op, const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) fail_shape(op, "non-positive extent in shape " + shape_str(shape));
  }
}

Tensor make_node(Shape shape, std::vector<double> data, const char* op) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  return Tensor::wrap(std::move(n));
}

bool want_record(std::initializer_list<const Tensor*> inputs) {
  if (!Graph::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->node() && t->node()->needs_grad) return true;
  }
  return false;
}

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C.
void gemm_rm(bool ta, bool tb, int m, int n, int k, double alpha,
             const double* a, const double* b, double beta, double* c) {
#ifdef RSC_HAVE_CBLAS
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans,
              tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a,
              ta ? m : k, b, tb ? k : n, beta, c, n);
#else
  if (beta == 0.0) {
    std::fill(c, c + static_cast<std::int64_t>(m) * n, 0.0);
  } else if (beta != 1.0) {
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(m) * n; ++i) c[i] *= beta;
  }
  auto at = [&](int i, int kk) { return ta ? a[kk * m + i] : a[i * k + kk]; };
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const double av = alpha * at(i, kk);
      if (av == 0.0) continue;
      const double* brow = tb ? nullptr : b + static_cast<std::int64_t>(kk) * n;
      double* crow = c + static_cast<std::int64_t>(i) * n;
      if (tb) {
        for (int j = 0; j < n; ++j) crow[j] += av * b[static_cast<std::int64_t>(j) * k + kk];
      } else {
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
#endif
}

double* grad_of(const Tensor& t) { return t.node()->grad.data(); }
const double* grad_of_out(const Tensor& t) { return t.node()->grad.data(); }

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_positive_extents("zeros", shape);
  const auto n = numel(shape);
  Tensor t = make_node(std::move(shape), std::vector<double>(n, 0.0), "leaf");
  t.node()->needs_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_positive_extents("full", shape);
  const auto n = numel(shape);
  Tensor t = make_node(std::move(shape), std::vector<double>(n, value), "leaf");
  t.node()->needs_grad = requires_grad;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_positive_extents("from_data", shape);
  if (numel(shape) != static_cast<std::int64_t>(data.size())) {
    fail_shape("from_data", "shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  }
  Tensor t = make_node(std::move(shape), std::move(data), "leaf");
  t.node()->needs_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
std::int64_t Tensor::size() const { return static_cast<std::int64_t>(node_->data.size()); }
int Tensor::dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }

std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::raw_data() { return node_->data; }

bool Tensor::requires_grad() const { return node_ && node_->needs_grad; }

std::span<const double> Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::value() const {
  if (size() != 1) fail_shape("value", "tensor of shape " + shape_str(shape()) + " is not a scalar");
  return node_->data[0];
}

double Tensor::item(std::int64_t i) const { return node_->data.at(static_cast<std::size_t>(i)); }

// ---- Graph -----------------------------------------------------------------

namespace {
thread_local Graph* g_active_graph = nullptr;
}

Graph::~Graph() = default;

Graph::Scope::Scope(Graph& g) : prev_(g_active_graph) { g_active_graph = &g; }
Graph::Scope::~Scope() { g_active_graph = prev_; }

Graph* Graph::active() { return g_active_graph; }

void Graph::record(OpRecord rec) {
  rec.output.node()->needs_grad = true;
  records_.push_back(std::move(rec));
}

void Graph::clear() { records_.clear(); }

void Graph::backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1) {
    throw std::invalid_argument("backward: root must be a scalar tensor");
  }
  for (auto& r : records_) {
    r.output.node()->ensure_grad();
    std::fill(r.output.node()->grad.begin(), r.output.node()->grad.end(), 0.0);
    for (auto& in : r.inputs) {
      if (in.node()->needs_grad) {
        in.node()->ensure_grad();
        std::fill(in.node()->grad.begin(), in.node()->grad.end(), 0.0);
      }
    }
  }
  root.node()->ensure_grad();
  std::fill(root.node()->grad.begin(), root.node()->grad.end(), 0.0);
  root.node()->grad[0] = 1.0;

  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    it->backward();
    if (nan_check_) {
      for (const auto& in : it->inputs) {
        if (!in.node()->needs_grad) continue;
        for (double g : in.node()->grad) {
          if (!std::isfinite(g)) {
            throw std::runtime_error(std::string("backward: non-finite gradient after op '") +
                                     it->name + "'");
          }
        }
      }
    }
  }
}

// ---- primitives ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool same = as == bs;
  const bool a_scalar = a.size() == 1 && !same;
  const bool b_scalar = b.size() == 1 && !same;
  const bool row_bcast = !same && !a_scalar && !b_scalar && as.size() == 2 &&
                         bs.size() == 1 && as[1] == bs[0];
  if (!same && !a_scalar && !b_scalar && !row_bcast) {
    fail_shape("add", "incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }

  std::vector<double> out;
  Shape out_shape;
  const auto ad = a.data();
  const auto bd = b.data();
  if (same) {
    out_shape = as;
    out.resize(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[i];
  } else if (a_scalar) {
    out_shape = bs;
    out.resize(bd.size());
    for (std::size_t i = 0; i < bd.size(); ++i) out[i] = ad[0] + bd[i];
  } else if (b_scalar) {
    out_shape = as;
    out.resize(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = ad[i] + bd[0];
  } else {
    out_shape = as;
    out.resize(ad.size());
    const int rows = as[0], cols = as[1];
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) out[r * cols + c] = ad[r * cols + c] + bd[c];
  }

  Tensor y = make_node(out_shape, std::move(out), "add");
  if (want_record({&a, &b})) {
    Graph::active()->record(
        {"add", {a, b}, y, [a, b, y, same, a_scalar, b_scalar]() {
           const double* g = grad_of_out(y);
           const std::int64_t n = y.size();
           if (a.node()->needs_grad) {
             double* da = grad_of(a);
             if (same || b_scalar || (!a_scalar && !b_scalar)) {
               for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
             } else {  // a scalar
               for (std::int64_t i = 0; i < n; ++i) da[0] += g[i];
             }
           }
           if (b.node()->needs_grad) {
             double* db = grad_of(b);
             if (same) {
               for (std::int64_t i = 0; i < n; ++i) db[i] += g[i];
             } else if (b_scalar) {
               for (std::int64_t i = 0; i < n; ++i) db[0] += g[i];
             } else if (a_scalar) {
               for (std::int64_t i = 0; i < n; ++i) db[i] += g[i];
             } else {  // row broadcast
               const int rows = y.dim(0), cols = y.dim(1);
               for (int r = 0; r < rows; ++r)
                 for (int c = 0; c < cols; ++c) db[c] += g[r * cols + c];
             }
           }
         }});
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool same = as == bs;
  const bool a_scalar = a.size() == 1 && !same;
  const bool b_scalar = b.size() == 1 && !same;
  if (!same && !a_scalar && !b_scalar) {
    fail_shape("mul", "incompatible shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  Shape out_shape = a_scalar ? bs : as;
  std::vector<double> out(a_scalar ? bd.size() : ad.size());
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  } else if (a_scalar) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[0] * bd[i];
  } else {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[0];
  }

  Tensor y = make_node(std::move(out_shape), std::move(out), "mul");
  if (want_record({&a, &b})) {
    Graph::active()->record({"mul", {a, b}, y, [a, b, y, same, a_scalar, b_scalar]() {
                               const double* g = grad_of_out(y);
                               const auto ad2 = a.data();
                               const auto bd2 = b.data();
                               const std::int64_t n = y.size();
                               if (a.node()->needs_grad) {
                                 double* da = grad_of(a);
                                 if (same) {
                                   for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * bd2[i];
                                 } else if (a_scalar) {
                                   for (std::int64_t i = 0; i < n; ++i) da[0] += g[i] * bd2[i];
                                 } else {
                                   for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * bd2[0];
                                 }
                               }
                               if (b.node()->needs_grad) {
                                 double* db = grad_of(b);
                                 if (same) {
                                   for (std::int64_t i = 0; i < n; ++i) db[i] += g[i] * ad2[i];
                                 } else if (b_scalar) {
                                   for (std::int64_t i = 0; i < n; ++i) db[0] += g[i] * ad2[i];
                                 } else {
                                   for (std::int64_t i = 0; i < n; ++i) db[i] += g[i] * ad2[0];
                                 }
                               }
                             }});
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * ad[i];
  Tensor y = make_node(a.shape(), std::move(out), "scale");
  if (want_record({&a})) {
    Graph::active()->record({"scale", {a}, y, [a, y, c]() {
                               if (!a.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               double* da = grad_of(a);
                               for (std::int64_t i = 0; i < y.size(); ++i) da[i] += c * g[i];
                             }});
  }
  return y;
}

Tensor add_const(const Tensor& a, double c) {
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + c;
  Tensor y = make_node(a.shape(), std::move(out), "add_const");
  if (want_record({&a})) {
    Graph::active()->record({"add_const", {a}, y, [a, y]() {
                               if (!a.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               double* da = grad_of(a);
                               for (std::int64_t i = 0; i < y.size(); ++i) da[i] += g[i];
                             }});
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2) fail_shape("matmul", "lhs must be 2-D, got " + shape_str(a.shape()));
  const bool vec = b.shape().size() == 1;
  if (!vec && b.shape().size() != 2) {
    fail_shape("matmul", "rhs must be 1-D or 2-D, got " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1);
  const int k2 = b.dim(0);
  const int n = vec ? 1 : b.dim(1);
  if (k != k2) {
    fail_shape("matmul", "inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  }
  std::vector<double> out(static_cast<std::size_t>(m) * n);
  gemm_rm(false, false, m, n, k, 1.0, a.data().data(), b.data().data(), 0.0, out.data());
  Shape out_shape = vec ? Shape{m} : Shape{m, n};
  Tensor y = make_node(std::move(out_shape), std::move(out), "matmul");
  if (want_record({&a, &b})) {
    Graph::active()->record({"matmul", {a, b}, y, [a, b, y, m, n, k]() {
                               const double* g = grad_of_out(y);
                               if (a.node()->needs_grad) {
                                 // dA += g * B^T
                                 gemm_rm(false, true, m, k, n, 1.0, g, b.data().data(), 1.0,
                                         grad_of(a));
                               }
                               if (b.node()->needs_grad) {
                                 // dB += A^T * g
                                 gemm_rm(true, false, k, n, m, 1.0, a.data().data(), g, 1.0,
                                         grad_of(b));
                               }
                             }});
  }
  return y;
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) fail_shape("transpose", "needs a 2-D tensor, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<std::size_t>(j) * r + i] = ad[static_cast<std::size_t>(i) * c + j];
  Tensor y = make_node({c, r}, std::move(out), "transpose");
  if (want_record({&a})) {
    Graph::active()->record({"transpose", {a}, y, [a, y, r, c]() {
                               if (!a.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               double* da = grad_of(a);
                               for (int i = 0; i < r; ++i)
                                 for (int j = 0; j < c; ++j)
                                   da[static_cast<std::size_t>(i) * c + j] +=
                                       g[static_cast<std::size_t>(j) * r + i];
                             }});
  }
  return y;
}

namespace {

struct ConvDims {
  int C, H, W, O, KH, KW, OH, OW;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.shape().size() != 3) fail_shape("conv2d", "input must be {C,H,W}, got " + shape_str(x.shape()));
  if (w.shape().size() != 4) fail_shape("conv2d", "weight must be {O,C,kh,kw}, got " + shape_str(w.shape()));
  if (stride != 1 && stride != 2) fail_shape("conv2d", "stride must be 1 or 2");
  if (pad < 0) fail_shape("conv2d", "negative padding");
  ConvDims d;
  d.C = x.dim(0);
  d.H = x.dim(1);
  d.W = x.dim(2);
  d.O = w.dim(0);
  d.KH = w.dim(2);
  d.KW = w.dim(3);
  if (w.dim(1) != d.C) {
    fail_shape("conv2d", "weight channels " + std::to_string(w.dim(1)) +
                             " do not match input channels " + std::to_string(d.C));
  }
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  if (d.OH <= 0 || d.OW <= 0) fail_shape("conv2d", "kernel larger than padded input");
  return d;
}

void im2col(const double* x, const ConvDims& d, int stride, int pad, double* cols) {
  // cols is {C*KH*KW, OH*OW} row-major
  const int ohw = d.OH * d.OW;
  for (int c = 0; c < d.C; ++c) {
    for (int ki = 0; ki < d.KH; ++ki) {
      for (int kj = 0; kj < d.KW; ++kj) {
        double* row = cols + (static_cast<std::size_t>(c) * d.KH * d.KW + ki * d.KW + kj) * ohw;
        for (int oy = 0; oy < d.OH; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= d.H) {
            std::fill(row + oy * d.OW, row + (oy + 1) * d.OW, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * d.H + iy) * d.W;
          for (int ox = 0; ox < d.OW; ++ox) {
            const int ix = ox * stride - pad + kj;
            row[oy * d.OW + ox] = (ix >= 0 && ix < d.W) ? src[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* cols, const ConvDims& d, int stride, int pad, double* dx) {
  const int ohw = d.OH * d.OW;
  for (int c = 0; c < d.C; ++c) {
    for (int ki = 0; ki < d.KH; ++ki) {
      for (int kj = 0; kj < d.KW; ++kj) {
        const double* row = cols + (static_cast<std::size_t>(c) * d.KH * d.KW + ki * d.KW + kj) * ohw;
        for (int oy = 0; oy < d.OH; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= d.H) continue;
          double* dst = dx + (static_cast<std::size_t>(c) * d.H + iy) * d.W;
          for (int ox = 0; ox < d.OW; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < d.W) dst[ix] += row[oy * d.OW + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  const ConvDims d = conv_dims(x, w, stride, pad);
  const int ckk = d.C * d.KH * d.KW;
  const int ohw = d.OH * d.OW;
  std::vector<double> cols(static_cast<std::size_t>(ckk) * ohw);
  im2col(x.data().data(), d, stride, pad, cols.data());
  std::vector<double> out(static_cast<std::size_t>(d.O) * ohw);
  gemm_rm(false, false, d.O, ohw, ckk, 1.0, w.data().data(), cols.data(), 0.0, out.data());
  Tensor y = make_node({d.O, d.OH, d.OW}, std::move(out), "conv2d");
  if (want_record({&x, &w})) {
    Graph::active()->record(
        {"conv2d", {x, w}, y, [x, w, y, d, stride, pad, ckk, ohw]() {
           const double* g = grad_of_out(y);
           if (w.node()->needs_grad) {
             std::vector<double> cols2(static_cast<std::size_t>(ckk) * ohw);
             im2col(x.data().data(), d, stride, pad, cols2.data());
             gemm_rm(false, true, d.O, ckk, ohw, 1.0, g, cols2.data(), 1.0, grad_of(w));
           }
           if (x.node()->needs_grad) {
             std::vector<double> dcols(static_cast<std::size_t>(ckk) * ohw);
             gemm_rm(true, false, ckk, ohw, d.O, 1.0, w.data().data(), g, 0.0, dcols.data());
             col2im_add(dcols.data(), d, stride, pad, grad_of(x));
           }
         }});
  }
  return y;
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  if (x.shape().size() != 3) fail_shape("channel_affine", "input must be {C,H,W}");
  const int C = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    fail_shape("channel_affine", "gamma/beta must be {C}");
  }
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  std::vector<double> out(xd.size());
  for (int c = 0; c < C; ++c) {
    const double gc = gd[c], bc = bd[c];
    for (std::int64_t i = 0; i < hw; ++i) out[c * hw + i] = gc * xd[c * hw + i] + bc;
  }
  Tensor y = make_node(x.shape(), std::move(out), "channel_affine");
  if (want_record({&x, &gamma, &beta})) {
    Graph::active()->record(
        {"channel_affine", {x, gamma, beta}, y, [x, gamma, beta, y, C, hw]() {
           const double* g = grad_of_out(y);
           const auto xd2 = x.data();
           const auto gd2 = gamma.data();
           if (x.node()->needs_grad) {
             double* dx = grad_of(x);
             for (int c = 0; c < C; ++c)
               for (std::int64_t i = 0; i < hw; ++i) dx[c * hw + i] += gd2[c] * g[c * hw + i];
           }
           if (gamma.node()->needs_grad) {
             double* dg = grad_of(gamma);
             for (int c = 0; c < C; ++c) {
               double s = 0.0;
               for (std::int64_t i = 0; i < hw; ++i) s += g[c * hw + i] * xd2[c * hw + i];
               dg[c] += s;
             }
           }
           if (beta.node()->needs_grad) {
             double* db = grad_of(beta);
             for (int c = 0; c < C; ++c) {
               double s = 0.0;
               for (std::int64_t i = 0; i < hw; ++i) s += g[c * hw + i];
               db[c] += s;
             }
           }
         }});
  }
  return y;
}

Tensor relu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xd[i] > 0.0 ? xd[i] : 0.0;
  Tensor y = make_node(x.shape(), std::move(out), "relu");
  if (want_record({&x})) {
    Graph::active()->record({"relu", {x}, y, [x, y]() {
                               if (!x.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               const auto xd2 = x.data();
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < y.size(); ++i)
                                 if (xd2[i] > 0.0) dx[i] += g[i];
                             }});
  }
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.shape().size() != 3) fail_shape("global_avg_pool", "input must be {C,H,W}");
  const int C = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  const auto xd = x.data();
  std::vector<double> out(static_cast<std::size_t>(C));
  for (int c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) s += xd[c * hw + i];
    out[c] = s / static_cast<double>(hw);
  }
  Tensor y = make_node({C}, std::move(out), "global_avg_pool");
  if (want_record({&x})) {
    Graph::active()->record({"global_avg_pool", {x}, y, [x, y, C, hw]() {
                               if (!x.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               double* dx = grad_of(x);
                               for (int c = 0; c < C; ++c) {
                                 const double gc = g[c] / static_cast<double>(hw);
                                 for (std::int64_t i = 0; i < hw; ++i) dx[c * hw + i] += gc;
                               }
                             }});
  }
  return y;
}

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) fail_shape("concat", "no inputs");
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 1) fail_shape("concat", "all inputs must be 1-D");
    total += p.size();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(total));
  for (const auto& p : parts) {
    const auto pd = p.data();
    out.insert(out.end(), pd.begin(), pd.end());
  }
  Tensor y = make_node({static_cast<int>(total)}, std::move(out), "concat");
  bool rec = false;
  if (Graph::active()) {
    for (const auto& p : parts)
      if (p.node()->needs_grad) rec = true;
  }
  if (rec) {
    std::vector<Tensor> ins(parts.begin(), parts.end());
    Graph::active()->record({"concat", ins, y, [ins, y]() {
                               const double* g = grad_of_out(y);
                               std::int64_t off = 0;
                               for (const auto& p : ins) {
                                 if (p.node()->needs_grad) {
                                   double* dp = grad_of(p);
                                   for (std::int64_t i = 0; i < p.size(); ++i) dp[i] += g[off + i];
                                 }
                                 off += p.size();
                               }
                             }});
  }
  return y;
}

Tensor slice(const Tensor& x, std::int64_t offset, std::int64_t len) {
  if (offset < 0 || len <= 0 || offset + len > x.size()) {
    fail_shape("slice", "range [" + std::to_string(offset) + "," + std::to_string(offset + len) +
                            ") out of bounds for size " + std::to_string(x.size()));
  }
  const auto xd = x.data();
  std::vector<double> out(xd.begin() + offset, xd.begin() + offset + len);
  Tensor y = make_node({static_cast<int>(len)}, std::move(out), "slice");
  if (want_record({&x})) {
    Graph::active()->record({"slice", {x}, y, [x, y, offset]() {
                               if (!x.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < y.size(); ++i) dx[offset + i] += g[i];
                             }});
  }
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_positive_extents("reshape", shape);
  if (numel(shape) != x.size()) {
    fail_shape("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  const auto xd = x.data();
  Tensor y = make_node(std::move(shape), std::vector<double>(xd.begin(), xd.end()), "reshape");
  if (want_record({&x})) {
    Graph::active()->record({"reshape", {x}, y, [x, y]() {
                               if (!x.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < y.size(); ++i) dx[i] += g[i];
                             }});
  }
  return y;
}

Tensor sum(const Tensor& x) {
  const auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v;
  Tensor y = make_node({1}, {s}, "sum");
  if (want_record({&x})) {
    Graph::active()->record({"sum", {x}, y, [x, y]() {
                               if (!x.node()->needs_grad) return;
                               const double g = y.node()->grad[0];
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < x.size(); ++i) dx[i] += g;
                             }});
  }
  return y;
}

Tensor mean(const Tensor& x) {
  const auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v;
  const double n = static_cast<double>(xd.size());
  Tensor y = make_node({1}, {s / n}, "mean");
  if (want_record({&x})) {
    Graph::active()->record({"mean", {x}, y, [x, y, n]() {
                               if (!x.node()->needs_grad) return;
                               const double g = y.node()->grad[0] / n;
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < x.size(); ++i) dx[i] += g;
                             }});
  }
  return y;
}

Tensor squared_l2(const Tensor& x) {
  const auto xd = x.data();
  double s = 0.0;
  for (double v : xd) s += v * v;
  Tensor y = make_node({1}, {s}, "squared_l2");
  if (want_record({&x})) {
    Graph::active()->record({"squared_l2", {x}, y, [x, y]() {
                               if (!x.node()->needs_grad) return;
                               const double g = 2.0 * y.node()->grad[0];
                               const auto xd2 = x.data();
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < x.size(); ++i) dx[i] += g * xd2[i];
                             }});
  }
  return y;
}

Tensor exp(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(xd[i]);
  Tensor y = make_node(x.shape(), std::move(out), "exp");
  if (want_record({&x})) {
    Graph::active()->record({"exp", {x}, y, [x, y]() {
                               if (!x.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               const auto yd = y.data();
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < y.size(); ++i) dx[i] += g[i] * yd[i];
                             }});
  }
  return y;
}

Tensor log(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(xd[i] > 0.0)) throw std::runtime_error("log: non-positive input");
    out[i] = std::log(xd[i]);
  }
  Tensor y = make_node(x.shape(), std::move(out), "log");
  if (want_record({&x})) {
    Graph::active()->record({"log", {x}, y, [x, y]() {
                               if (!x.node()->needs_grad) return;
                               const double* g = grad_of_out(y);
                               const auto xd2 = x.data();
                               double* dx = grad_of(x);
                               for (std::int64_t i = 0; i < y.size(); ++i) dx[i] += g[i] / xd2[i];
                             }});
  }
  return y;
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) {
    fail_shape("cosine_similarity", "sizes disagree: " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
  }
  const auto ad = a.data();
  const auto bd = b.data();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (std::size_t i = 0; i < ad.size(); ++i) {
    dot += ad[i] * bd[i];
    na2 += ad[i] * ad[i];
    nb2 += bd[i] * bd[i];
  }
  if (na2 == 0.0 || nb2 == 0.0) {
    throw std::runtime_error("cosine_similarity: zero-norm input, cosine undefined");
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double s = dot / (na * nb);
  Tensor y = make_node({1}, {s}, "cosine_similarity");
  if (want_record({&a, &b})) {
    Graph::active()->record(
        {"cosine_similarity", {a, b}, y, [a, b, y, na, nb, s]() {
           const double g = y.node()->grad[0];
           const auto ad2 = a.data();
           const auto bd2 = b.data();
           if (a.node()->needs_grad) {
             double* da = grad_of(a);
             for (std::int64_t i = 0; i < a.size(); ++i)
               da[i] += g * (bd2[i] / (na * nb) - s * ad2[i] / (na * na));
           }
           if (b.node()->needs_grad) {
             double* db = grad_of(b);
             for (std::int64_t i = 0; i < b.size(); ++i)
               db[i] += g * (ad2[i] / (na * nb) - s * bd2[i] / (nb * nb));
           }
         }});
  }
  return y;
}

Tensor stop_gradient(const Tensor& x) {
  const auto xd = x.data();
  Tensor y = make_node(x.shape(), std::vector<double>(xd.begin(), xd.end()), "stop_gradient");
  y.node()->needs_grad = false;
  return y;
}

Tensor log_sum_exp(const Tensor& logits) {
  const auto ld = logits.data();
  double m = ld[0];
  for (double v : ld) m = std::max(m, v);
  return add_const(log(sum(exp(add_const(logits, -m)))), m);
}

}  // namespace rsc
