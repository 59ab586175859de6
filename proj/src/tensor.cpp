#include "safe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace safe {

namespace {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

void check_finite(const Tensor::Node& n) {
  for (double v : n.data) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by op '") + n.op + "'");
    }
  }
}

std::shared_ptr<Tensor::Node> make_node(Shape shape, std::vector<double> data, const char* op) {
  auto n = std::make_shared<Tensor::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  if (static_cast<int64_t>(n->data.size()) != shape_numel(n->shape)) {
    throw std::invalid_argument("data length does not match shape");
  }
  return n;
}

// Wires the output node into the graph when any parent is tracked.
Tensor finish(std::shared_ptr<Tensor::Node> out,
              std::vector<std::shared_ptr<Tensor::Node>> parents,
              std::function<void()> backfn) {
  check_finite(*out);
  bool tracked = false;
  for (const auto& p : parents) tracked = tracked || p->requires_grad;
  if (tracked) {
    out->requires_grad = true;
    out->is_leaf = false;
    out->parents = std::move(parents);
    out->backfn = std::move(backfn);
  }
  return Tensor(out);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

std::vector<double>& Tensor::Node::grad_buf() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(make_node(shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), 0.0),
                          "leaf"));
}

Tensor Tensor::full(const Shape& shape, double value) {
  if (!std::isfinite(value)) throw std::runtime_error("non-finite fill value");
  return Tensor(make_node(
      shape, std::vector<double>(static_cast<size_t>(shape_numel(shape)), value), "leaf"));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
  auto n = make_node(shape, std::move(data), "leaf");
  check_finite(*n);
  return Tensor(n);
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::randn(const Shape& shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (double& v : data) v = dist(rng) * stddev;
  return Tensor(make_node(shape, std::move(data), "leaf"));
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() requires a scalar tensor");
  return node_->data[0];
}

void Tensor::set_requires_grad(bool v) {
  if (!node_->is_leaf) throw std::invalid_argument("requires_grad can only be set on leaves");
  node_->requires_grad = v;
}

void Tensor::zero_grad() { std::fill(node_->grad_buf().begin(), node_->grad_buf().end(), 0.0); }

Tensor Tensor::detached() const {
  return Tensor(make_node(node_->shape, node_->data, "detach"));
}

Tensor Tensor::clone() const {
  auto n = make_node(node_->shape, node_->data, "leaf");
  n->requires_grad = node_->requires_grad;
  return Tensor(n);
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto na = a.node(), nb = b.node();
  std::vector<double> out(na->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na->data[i] + nb->data[i];
  auto no = make_node(na->shape, std::move(out), "add");
  return finish(no, {na, nb}, [no = no.get(), na, nb] {
    if (na->requires_grad) {
      auto& g = na->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i];
    }
    if (nb->requires_grad) {
      auto& g = nb->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto na = a.node(), nb = b.node();
  std::vector<double> out(na->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = na->data[i] * nb->data[i];
  auto no = make_node(na->shape, std::move(out), "mul");
  return finish(no, {na, nb}, [no = no.get(), na, nb] {
    if (na->requires_grad) {
      auto& g = na->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i] * nb->data[i];
    }
    if (nb->requires_grad) {
      auto& g = nb->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i] * na->data[i];
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  auto nx = x.node();
  std::vector<double> out(nx->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = nx->data[i] * c;
  auto no = make_node(nx->shape, std::move(out), "scale");
  return finish(no, {nx}, [no = no.get(), nx, c] {
    auto& g = nx->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i] * c;
  });
}

Tensor add_scalar(const Tensor& x, double c) {
  auto nx = x.node();
  std::vector<double> out(nx->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = nx->data[i] + c;
  auto no = make_node(nx->shape, std::move(out), "add_scalar");
  return finish(no, {nx}, [no = no.get(), nx] {
    auto& g = nx->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i];
  });
}

Tensor relu(const Tensor& x) {
  auto nx = x.node();
  std::vector<double> out(nx->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = nx->data[i] > 0.0 ? nx->data[i] : 0.0;
  auto no = make_node(nx->shape, std::move(out), "relu");
  return finish(no, {nx}, [no = no.get(), nx] {
    auto& g = nx->grad_buf();
    // subgradient 0 at the kink
    for (size_t i = 0; i < g.size(); ++i) g[i] += nx->data[i] > 0.0 ? no->grad[i] : 0.0;
  });
}

Tensor sigmoid(const Tensor& x) {
  auto nx = x.node();
  std::vector<double> out(nx->data.size());
  for (size_t i = 0; i < out.size(); ++i) {
    double v = nx->data[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto no = make_node(nx->shape, std::move(out), "sigmoid");
  return finish(no, {nx}, [no = no.get(), nx] {
    auto& g = nx->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) {
      double s = no->data[i];
      g[i] += no->grad[i] * s * (1.0 - s);
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw std::invalid_argument("matmul: both operands must be 2-D");
  }
  int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2) throw std::invalid_argument("matmul: inner dimensions disagree");
  auto na = a.node(), nb = b.node();
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      double av = na->data[static_cast<size_t>(i) * k + p];
      if (av == 0.0) continue;
      for (int j = 0; j < n; ++j) {
        out[static_cast<size_t>(i) * n + j] += av * nb->data[static_cast<size_t>(p) * n + j];
      }
    }
  }
  auto no = make_node({m, n}, std::move(out), "matmul");
  return finish(no, {na, nb}, [no = no.get(), na, nb, m, k, n] {
    if (na->requires_grad) {
      auto& g = na->grad_buf();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          double go = no->grad[static_cast<size_t>(i) * n + j];
          if (go == 0.0) continue;
          for (int p = 0; p < k; ++p)
            g[static_cast<size_t>(i) * k + p] += go * nb->data[static_cast<size_t>(p) * n + j];
        }
    }
    if (nb->requires_grad) {
      auto& g = nb->grad_buf();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
          double go = no->grad[static_cast<size_t>(i) * n + j];
          if (go == 0.0) continue;
          for (int p = 0; p < k; ++p)
            g[static_cast<size_t>(p) * n + j] += go * na->data[static_cast<size_t>(i) * k + p];
        }
    }
  });
}

Tensor transpose(const Tensor& m) {
  if (m.shape().size() != 2) throw std::invalid_argument("transpose: 2-D only");
  int r = m.dim(0), c = m.dim(1);
  auto nm = m.node();
  std::vector<double> out(static_cast<size_t>(r) * c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out[static_cast<size_t>(j) * r + i] = nm->data[static_cast<size_t>(i) * c + j];
  auto no = make_node({c, r}, std::move(out), "transpose");
  return finish(no, {nm}, [no = no.get(), nm, r, c] {
    auto& g = nm->grad_buf();
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        g[static_cast<size_t>(i) * c + j] += no->grad[static_cast<size_t>(j) * r + i];
  });
}

Tensor sum(const Tensor& x) {
  auto nx = x.node();
  double s = 0.0;
  for (double v : nx->data) s += v;
  auto no = make_node({1}, {s}, "sum");
  return finish(no, {nx}, [no = no.get(), nx] {
    auto& g = nx->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[0];
  });
}

Tensor softmax(const Tensor& z) {
  if (z.shape().size() != 2) throw std::invalid_argument("softmax: 2-D only");
  int n = z.dim(0), j = z.dim(1);
  if (j < 1) throw std::invalid_argument("softmax: last dimension must be >= 1");
  auto nz = z.node();
  std::vector<double> out(nz->data.size());
  for (int r = 0; r < n; ++r) {
    const double* zr = &nz->data[static_cast<size_t>(r) * j];
    double* pr = &out[static_cast<size_t>(r) * j];
    double mx = zr[0];
    for (int c = 1; c < j; ++c) mx = std::max(mx, zr[c]);
    double denom = 0.0;
    for (int c = 0; c < j; ++c) {
      pr[c] = std::exp(zr[c] - mx);
      denom += pr[c];
    }
    for (int c = 0; c < j; ++c) pr[c] /= denom;
  }
  auto no = make_node(nz->shape, std::move(out), "softmax");
  return finish(no, {nz}, [no = no.get(), nz, n, j] {
    auto& g = nz->grad_buf();
    for (int r = 0; r < n; ++r) {
      const double* p = &no->data[static_cast<size_t>(r) * j];
      const double* gp = &no->grad[static_cast<size_t>(r) * j];
      double dot = 0.0;
      for (int c = 0; c < j; ++c) dot += gp[c] * p[c];
      for (int c = 0; c < j; ++c) g[static_cast<size_t>(r) * j + c] += p[c] * (gp[c] - dot);
    }
  });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
  if (m.shape().size() != 2 || v.shape().size() != 1 || m.dim(1) != v.dim(0)) {
    throw std::invalid_argument("add_rowvec: expects [N x J] and [J]");
  }
  int n = m.dim(0), j = m.dim(1);
  auto nm = m.node(), nv = v.node();
  std::vector<double> out(nm->data.size());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < j; ++c)
      out[static_cast<size_t>(r) * j + c] = nm->data[static_cast<size_t>(r) * j + c] + nv->data[static_cast<size_t>(c)];
  auto no = make_node(nm->shape, std::move(out), "add_rowvec");
  return finish(no, {nm, nv}, [no = no.get(), nm, nv, n, j] {
    if (nm->requires_grad) {
      auto& g = nm->grad_buf();
      for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i];
    }
    if (nv->requires_grad) {
      auto& g = nv->grad_buf();
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < j; ++c) g[static_cast<size_t>(c)] += no->grad[static_cast<size_t>(r) * j + c];
    }
  });
}

// ---------------------------------------------------------------------------
// convolution-network ops
// ---------------------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
  if (input.shape().size() != 4 || kernel.shape().size() != 4) {
    throw std::invalid_argument("conv2d: input and kernel must be 4-D");
  }
  if (stride < 1 || padding < 0) throw std::invalid_argument("conv2d: bad stride/padding");
  int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  int o = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kc != c) throw std::invalid_argument("conv2d: channel mismatch");
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  if ((h + 2 * padding - kh) % stride != 0 || (w + 2 * padding - kw) % stride != 0) {
    throw std::invalid_argument("conv2d: non-integral output size");
  }
  int ho = (h + 2 * padding - kh) / stride + 1;
  int wo = (w + 2 * padding - kw) / stride + 1;
  auto ni = input.node(), nk = kernel.node();
  std::vector<double> out(static_cast<size_t>(n) * o * ho * wo, 0.0);
  auto in_at = [&](int b, int ch, int y, int x) -> double {
    return ni->data[((static_cast<size_t>(b) * c + ch) * h + y) * w + x];
  };
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int ic = 0; ic < c; ++ic)
            for (int ky = 0; ky < kh; ++ky) {
              int iy = oy * stride + ky - padding;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                int ix = ox * stride + kx - padding;
                if (ix < 0 || ix >= w) continue;
                acc += in_at(b, ic, iy, ix) *
                       nk->data[((static_cast<size_t>(oc) * c + ic) * kh + ky) * kw + kx];
              }
            }
          out[((static_cast<size_t>(b) * o + oc) * ho + oy) * wo + ox] = acc;
        }
  auto no = make_node({n, o, ho, wo}, std::move(out), "conv2d");
  return finish(no, {ni, nk}, [no = no.get(), ni, nk, n, c, h, w, o, kh, kw, ho, wo, stride, padding] {
    const bool gi = ni->requires_grad, gk = nk->requires_grad;
    auto& gin = gi ? ni->grad_buf() : no->grad;  // placeholder ref when unused
    auto& gkr = gk ? nk->grad_buf() : no->grad;
    for (int b = 0; b < n; ++b)
      for (int oc = 0; oc < o; ++oc)
        for (int oy = 0; oy < ho; ++oy)
          for (int ox = 0; ox < wo; ++ox) {
            double go = no->grad[((static_cast<size_t>(b) * o + oc) * ho + oy) * wo + ox];
            if (go == 0.0) continue;
            for (int ic = 0; ic < c; ++ic)
              for (int ky = 0; ky < kh; ++ky) {
                int iy = oy * stride + ky - padding;
                if (iy < 0 || iy >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  int ix = ox * stride + kx - padding;
                  if (ix < 0 || ix >= w) continue;
                  size_t ii = ((static_cast<size_t>(b) * c + ic) * h + iy) * w + ix;
                  size_t ki = ((static_cast<size_t>(oc) * c + ic) * kh + ky) * kw + kx;
                  if (gi) gin[ii] += go * nk->data[ki];
                  if (gk) gkr[ki] += go * ni->data[ii];
                }
              }
          }
  });
}

Tensor pad_nchw(const Tensor& x, int top, int bottom, int left, int right) {
  if (x.shape().size() != 4) throw std::invalid_argument("pad_nchw: input must be 4-D");
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw std::invalid_argument("pad_nchw: negative padding");
  }
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  int ho = h + top + bottom, wo = w + left + right;
  auto nx = x.node();
  std::vector<double> out(static_cast<size_t>(n) * c * ho * wo, 0.0);
  for (int b = 0; b < n; ++b)
    for (int cc = 0; cc < c; ++cc)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out[((static_cast<size_t>(b) * c + cc) * ho + y + top) * wo + xx + left] =
              nx->data[((static_cast<size_t>(b) * c + cc) * h + y) * w + xx];
  auto no = make_node({n, c, ho, wo}, std::move(out), "pad_nchw");
  return finish(no, {nx}, [no = no.get(), nx, n, c, h, w, ho, wo, top, left] {
    auto& g = nx->grad_buf();
    for (int b = 0; b < n; ++b)
      for (int cc = 0; cc < c; ++cc)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            g[((static_cast<size_t>(b) * c + cc) * h + y) * w + xx] +=
                no->grad[((static_cast<size_t>(b) * c + cc) * ho + y + top) * wo + xx + left];
  });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.shape().size() != 4) throw std::invalid_argument("group_norm: input must be 4-D");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (groups < 1 || c % groups != 0) {
    throw std::invalid_argument("group_norm: channel count not divisible by groups");
  }
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw std::invalid_argument("group_norm: affine parameters must have shape [C]");
  }
  int cpg = c / groups;
  int gsz = cpg * h * w;
  auto nx = x.node(), ng = gamma.node(), nb = beta.node();
  std::vector<double> out(nx->data.size());
  // cached per (sample, group) statistics and normalized values for backward
  auto mu = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * groups);
  auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * groups);
  auto xhat = std::make_shared<std::vector<double>>(nx->data.size());
  for (int b = 0; b < n; ++b)
    for (int g = 0; g < groups; ++g) {
      double m = 0.0;
      for (int cc = g * cpg; cc < (g + 1) * cpg; ++cc)
        for (int p = 0; p < h * w; ++p) m += nx->data[(static_cast<size_t>(b) * c + cc) * h * w + p];
      m /= gsz;
      double var = 0.0;
      for (int cc = g * cpg; cc < (g + 1) * cpg; ++cc)
        for (int p = 0; p < h * w; ++p) {
          double d = nx->data[(static_cast<size_t>(b) * c + cc) * h * w + p] - m;
          var += d * d;
        }
      var /= gsz;
      double is = 1.0 / std::sqrt(var + eps);
      (*mu)[static_cast<size_t>(b) * groups + g] = m;
      (*inv_sigma)[static_cast<size_t>(b) * groups + g] = is;
      for (int cc = g * cpg; cc < (g + 1) * cpg; ++cc)
        for (int p = 0; p < h * w; ++p) {
          size_t idx = (static_cast<size_t>(b) * c + cc) * h * w + p;
          double xh = (nx->data[idx] - m) * is;
          (*xhat)[idx] = xh;
          out[idx] = ng->data[static_cast<size_t>(cc)] * xh + nb->data[static_cast<size_t>(cc)];
        }
    }
  auto no = make_node(nx->shape, std::move(out), "group_norm");
  return finish(no, {nx, ng, nb}, [no = no.get(), nx, ng, nb, xhat, inv_sigma, n, c, h, w, groups, cpg, gsz] {
    for (int b = 0; b < n; ++b)
      for (int g = 0; g < groups; ++g) {
        double is = (*inv_sigma)[static_cast<size_t>(b) * groups + g];
        // dy through affine, plus mean/variance coupling within the group
        double sum_dyh = 0.0, sum_dyh_xhat = 0.0;
        for (int cc = g * cpg; cc < (g + 1) * cpg; ++cc)
          for (int p = 0; p < h * w; ++p) {
            size_t idx = (static_cast<size_t>(b) * c + cc) * h * w + p;
            double dyh = no->grad[idx] * ng->data[static_cast<size_t>(cc)];
            sum_dyh += dyh;
            sum_dyh_xhat += dyh * (*xhat)[idx];
          }
        if (nx->requires_grad) {
          auto& gx = nx->grad_buf();
          for (int cc = g * cpg; cc < (g + 1) * cpg; ++cc)
            for (int p = 0; p < h * w; ++p) {
              size_t idx = (static_cast<size_t>(b) * c + cc) * h * w + p;
              double dyh = no->grad[idx] * ng->data[static_cast<size_t>(cc)];
              gx[idx] += is * (dyh - sum_dyh / gsz - (*xhat)[idx] * sum_dyh_xhat / gsz);
            }
        }
      }
    if (ng->requires_grad || nb->requires_grad) {
      for (int cc = 0; cc < c; ++cc) {
        double dg = 0.0, db = 0.0;
        for (int b = 0; b < n; ++b)
          for (int p = 0; p < h * w; ++p) {
            size_t idx = (static_cast<size_t>(b) * c + cc) * h * w + p;
            dg += no->grad[idx] * (*xhat)[idx];
            db += no->grad[idx];
          }
        if (ng->requires_grad) ng->grad_buf()[static_cast<size_t>(cc)] += dg;
        if (nb->requires_grad) nb->grad_buf()[static_cast<size_t>(cc)] += db;
      }
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.shape().size() != 4) throw std::invalid_argument("global_avg_pool: input must be 4-D");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto nx = x.node();
  std::vector<double> out(static_cast<size_t>(n) * c, 0.0);
  for (int b = 0; b < n; ++b)
    for (int cc = 0; cc < c; ++cc) {
      double s = 0.0;
      for (int p = 0; p < h * w; ++p) s += nx->data[(static_cast<size_t>(b) * c + cc) * h * w + p];
      out[static_cast<size_t>(b) * c + cc] = s / (h * w);
    }
  auto no = make_node({n, c}, std::move(out), "global_avg_pool");
  return finish(no, {nx}, [no = no.get(), nx, n, c, h, w] {
    auto& g = nx->grad_buf();
    for (int b = 0; b < n; ++b)
      for (int cc = 0; cc < c; ++cc) {
        double go = no->grad[static_cast<size_t>(b) * c + cc] / (h * w);
        for (int p = 0; p < h * w; ++p) g[(static_cast<size_t>(b) * c + cc) * h * w + p] += go;
      }
  });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  int n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int ctot = 0;
  for (const auto& x : xs) {
    if (x.shape().size() != 4 || x.dim(0) != n || x.dim(2) != h || x.dim(3) != w) {
      throw std::invalid_argument("concat_channels: mismatched N/H/W");
    }
    ctot += x.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(n) * ctot * h * w);
  std::vector<std::shared_ptr<Tensor::Node>> parents;
  parents.reserve(xs.size());
  int coff = 0;
  std::vector<int> offsets;
  for (const auto& x : xs) {
    offsets.push_back(coff);
    int cx = x.dim(1);
    for (int b = 0; b < n; ++b)
      std::memcpy(&out[((static_cast<size_t>(b) * ctot) + coff) * h * w],
                  &x.node()->data[static_cast<size_t>(b) * cx * h * w],
                  sizeof(double) * static_cast<size_t>(cx) * h * w);
    coff += cx;
    parents.push_back(x.node());
  }
  auto no = make_node({n, ctot, h, w}, std::move(out), "concat_channels");
  auto ps = parents;
  return finish(no, std::move(parents), [no = no.get(), ps, offsets, n, ctot, h, w] {
    for (size_t k = 0; k < ps.size(); ++k) {
      if (!ps[k]->requires_grad) continue;
      int cx = ps[k]->shape[1];
      auto& g = ps[k]->grad_buf();
      for (int b = 0; b < n; ++b)
        for (int cc = 0; cc < cx; ++cc)
          for (int p = 0; p < h * w; ++p)
            g[(static_cast<size_t>(b) * cx + cc) * h * w + p] +=
                no->grad[((static_cast<size_t>(b) * ctot) + offsets[k] + cc) * h * w + p];
    }
  });
}

Tensor mul_broadcast_channel(const Tensor& gate, const Tensor& x) {
  if (gate.shape().size() != 4 || x.shape().size() != 4 || gate.dim(1) != 1 ||
      gate.dim(0) != x.dim(0) || gate.dim(2) != x.dim(2) || gate.dim(3) != x.dim(3)) {
    throw std::invalid_argument("mul_broadcast_channel: expects gate [N x 1 x H x W] matching x");
  }
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto ng = gate.node(), nx = x.node();
  std::vector<double> out(nx->data.size());
  for (int b = 0; b < n; ++b)
    for (int cc = 0; cc < c; ++cc)
      for (int p = 0; p < h * w; ++p)
        out[(static_cast<size_t>(b) * c + cc) * h * w + p] =
            ng->data[static_cast<size_t>(b) * h * w + p] *
            nx->data[(static_cast<size_t>(b) * c + cc) * h * w + p];
  auto no = make_node(nx->shape, std::move(out), "mul_broadcast_channel");
  return finish(no, {ng, nx}, [no = no.get(), ng, nx, n, c, h, w] {
    if (ng->requires_grad) {
      auto& g = ng->grad_buf();
      for (int b = 0; b < n; ++b)
        for (int cc = 0; cc < c; ++cc)
          for (int p = 0; p < h * w; ++p)
            g[static_cast<size_t>(b) * h * w + p] +=
                no->grad[(static_cast<size_t>(b) * c + cc) * h * w + p] *
                nx->data[(static_cast<size_t>(b) * c + cc) * h * w + p];
    }
    if (nx->requires_grad) {
      auto& g = nx->grad_buf();
      for (int b = 0; b < n; ++b)
        for (int cc = 0; cc < c; ++cc)
          for (int p = 0; p < h * w; ++p)
            g[(static_cast<size_t>(b) * c + cc) * h * w + p] +=
                no->grad[(static_cast<size_t>(b) * c + cc) * h * w + p] *
                ng->data[static_cast<size_t>(b) * h * w + p];
    }
  });
}

// ---------------------------------------------------------------------------
// reshapes between NCHW and (N*H*W) x C rows
// ---------------------------------------------------------------------------

Tensor nchw_to_rows(const Tensor& x) {
  if (x.shape().size() != 4) throw std::invalid_argument("nchw_to_rows: input must be 4-D");
  int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto nx = x.node();
  std::vector<double> out(nx->data.size());
  for (int b = 0; b < n; ++b)
    for (int cc = 0; cc < c; ++cc)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out[((static_cast<size_t>(b) * h + y) * w + xx) * c + cc] =
              nx->data[((static_cast<size_t>(b) * c + cc) * h + y) * w + xx];
  auto no = make_node({n * h * w, c}, std::move(out), "nchw_to_rows");
  return finish(no, {nx}, [no = no.get(), nx, n, c, h, w] {
    auto& g = nx->grad_buf();
    for (int b = 0; b < n; ++b)
      for (int cc = 0; cc < c; ++cc)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            g[((static_cast<size_t>(b) * c + cc) * h + y) * w + xx] +=
                no->grad[((static_cast<size_t>(b) * h + y) * w + xx) * c + cc];
  });
}

Tensor rows_to_nchw(const Tensor& rows, int n, int h, int w) {
  if (rows.shape().size() != 2 || rows.dim(0) != n * h * w) {
    throw std::invalid_argument("rows_to_nchw: row count must equal N*H*W");
  }
  int c = rows.dim(1);
  auto nr = rows.node();
  std::vector<double> out(nr->data.size());
  for (int b = 0; b < n; ++b)
    for (int cc = 0; cc < c; ++cc)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out[((static_cast<size_t>(b) * c + cc) * h + y) * w + xx] =
              nr->data[((static_cast<size_t>(b) * h + y) * w + xx) * c + cc];
  auto no = make_node({n, c, h, w}, std::move(out), "rows_to_nchw");
  return finish(no, {nr}, [no = no.get(), nr, n, c, h, w] {
    auto& g = nr->grad_buf();
    for (int b = 0; b < n; ++b)
      for (int cc = 0; cc < c; ++cc)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            g[((static_cast<size_t>(b) * h + y) * w + xx) * c + cc] +=
                no->grad[((static_cast<size_t>(b) * c + cc) * h + y) * w + xx];
  });
}

// ---------------------------------------------------------------------------
// matrix assembly
// ---------------------------------------------------------------------------

Tensor col(const Tensor& m, int j) {
  if (m.shape().size() != 2 || j < 0 || j >= m.dim(1)) {
    throw std::invalid_argument("col: index out of range");
  }
  int r = m.dim(0), c = m.dim(1);
  auto nm = m.node();
  std::vector<double> out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out[static_cast<size_t>(i)] = nm->data[static_cast<size_t>(i) * c + j];
  auto no = make_node({r, 1}, std::move(out), "col");
  return finish(no, {nm}, [no = no.get(), nm, r, c, j] {
    auto& g = nm->grad_buf();
    for (int i = 0; i < r; ++i) g[static_cast<size_t>(i) * c + j] += no->grad[static_cast<size_t>(i)];
  });
}

Tensor row(const Tensor& m, int i) {
  if (m.shape().size() != 2 || i < 0 || i >= m.dim(0)) {
    throw std::invalid_argument("row: index out of range");
  }
  int c = m.dim(1);
  auto nm = m.node();
  std::vector<double> out(nm->data.begin() + static_cast<size_t>(i) * c,
                          nm->data.begin() + static_cast<size_t>(i + 1) * c);
  auto no = make_node({1, c}, std::move(out), "row");
  return finish(no, {nm}, [no = no.get(), nm, i, c] {
    auto& g = nm->grad_buf();
    for (int j = 0; j < c; ++j) g[static_cast<size_t>(i) * c + j] += no->grad[static_cast<size_t>(j)];
  });
}

Tensor hstack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("hstack: empty input list");
  int r = parts[0].dim(0);
  int ctot = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(0) != r) throw std::invalid_argument("hstack: row mismatch");
    ctot += p.dim(1);
  }
  std::vector<double> out(static_cast<size_t>(r) * ctot);
  std::vector<std::shared_ptr<Tensor::Node>> parents;
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    int pc = p.dim(1);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < pc; ++j)
        out[static_cast<size_t>(i) * ctot + off + j] = p.node()->data[static_cast<size_t>(i) * pc + j];
    off += pc;
    parents.push_back(p.node());
  }
  auto no = make_node({r, ctot}, std::move(out), "hstack");
  auto ps = parents;
  return finish(no, std::move(parents), [no = no.get(), ps, offsets, r, ctot] {
    for (size_t k = 0; k < ps.size(); ++k) {
      if (!ps[k]->requires_grad) continue;
      int pc = ps[k]->shape[1];
      auto& g = ps[k]->grad_buf();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < pc; ++j)
          g[static_cast<size_t>(i) * pc + j] += no->grad[static_cast<size_t>(i) * ctot + offsets[k] + j];
    }
  });
}

Tensor vstack(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("vstack: empty input list");
  int c = parts[0].dim(1);
  int rtot = 0;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(1) != c) throw std::invalid_argument("vstack: column mismatch");
    rtot += p.dim(0);
  }
  std::vector<double> out;
  out.reserve(static_cast<size_t>(rtot) * c);
  std::vector<std::shared_ptr<Tensor::Node>> parents;
  std::vector<int> offsets;
  int off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    out.insert(out.end(), p.node()->data.begin(), p.node()->data.end());
    off += p.dim(0);
    parents.push_back(p.node());
  }
  auto no = make_node({rtot, c}, std::move(out), "vstack");
  auto ps = parents;
  return finish(no, std::move(parents), [no = no.get(), ps, offsets, c] {
    for (size_t k = 0; k < ps.size(); ++k) {
      if (!ps[k]->requires_grad) continue;
      int pr = ps[k]->shape[0];
      auto& g = ps[k]->grad_buf();
      for (int i = 0; i < pr; ++i)
        for (int j = 0; j < c; ++j)
          g[static_cast<size_t>(i) * c + j] +=
              no->grad[static_cast<size_t>(offsets[k] + i) * c + j];
    }
  });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

Tensor nll_weighted(const Tensor& probs, const std::vector<int>& labels,
                    const std::vector<double>& weights) {
  if (probs.shape().size() != 2) throw std::invalid_argument("nll: probs must be [N x J]");
  int n = probs.dim(0), j = probs.dim(1);
  if (static_cast<int>(labels.size()) != n || static_cast<int>(weights.size()) != n) {
    throw std::invalid_argument("nll: labels/weights length mismatch");
  }
  for (int y : labels) {
    if (y < 0 || y >= j) throw std::invalid_argument("nll: label out of range");
  }
  auto np = probs.node();
  double loss = 0.0;
  for (int r = 0; r < n; ++r) {
    loss -= weights[static_cast<size_t>(r)] *
            std::log(np->data[static_cast<size_t>(r) * j + labels[static_cast<size_t>(r)]]);
  }
  loss /= n;
  auto no = make_node({1}, {loss}, "nll_weighted");
  auto lab = labels;
  auto wts = weights;
  return finish(no, {np}, [no = no.get(), np, lab, wts, n, j] {
    auto& g = np->grad_buf();
    for (int r = 0; r < n; ++r) {
      size_t idx = static_cast<size_t>(r) * j + lab[static_cast<size_t>(r)];
      g[idx] += no->grad[0] * (-wts[static_cast<size_t>(r)] / (n * np->data[idx]));
    }
  });
}

Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
  return nll_weighted(probs, labels, std::vector<double>(labels.size(), 1.0));
}

Tensor straight_through(const Tensor& soft) {
  auto ns = soft.node();
  std::vector<double> out(ns->data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ns->data[i] >= 0.5 ? 1.0 : 0.0;
  auto no = make_node(ns->shape, std::move(out), "straight_through");
  return finish(no, {ns}, [no = no.get(), ns] {
    auto& g = ns->grad_buf();
    for (size_t i = 0; i < g.size(); ++i) g[i] += no->grad[i];
  });
}

Tensor detach(const Tensor& x) { return x.detached(); }

// ---------------------------------------------------------------------------
// reverse-mode engine
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  auto root = loss.node();
  if (!root) throw std::invalid_argument("backward: undefined tensor");
  if (root->numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  if (!root->requires_grad) throw std::invalid_argument("backward: graph is detached");
  if (root->backward_done) throw std::runtime_error("backward: already run on this graph");
  root->backward_done = true;

  // iterative postorder DFS over parent edges; reversed order is topological
  std::vector<Tensor::Node*> order;
  std::unordered_set<Tensor::Node*> pushed;
  std::vector<std::pair<Tensor::Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  std::unordered_set<Tensor::Node*> on_stack{root.get()};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor::Node* p = node->parents[next++].get();
      if (p->requires_grad && !pushed.count(p) && !on_stack.count(p)) {
        stack.emplace_back(p, 0);
        on_stack.insert(p);
      }
    } else {
      order.push_back(node);
      pushed.insert(node);
      on_stack.erase(node);
      stack.pop_back();
    }
  }

  root->grad_buf()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor::Node* n = *it;
    n->grad_buf();  // ensure consumers found an allocated buffer even for zero fan-in
    if (n->backfn) n->backfn();
  }
}

}  // namespace safe
