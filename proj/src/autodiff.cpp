#include "ofdiff/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace ofdiff {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

template <typename Scalar>
Gradients<Scalar> Graph<Scalar>::backward(const Var<Scalar>& loss) {
  if (&loss.graph() != this) throw ContractError("loss node belongs to another graph");
  if (value(loss.id()).size() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " +
                        shape_string(value(loss.id()).shape()));
  }
  Gradients<Scalar> out;
  if (!requires_grad(loss.id())) return out;
  grad(loss.id()).array().setConstant(Scalar(1));
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = node(id);
    if (!n.has_grad || !n.requires_grad) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (int id = 0; id <= loss.id(); ++id) {
    const Node& n = node(id);
    if (!n.requires_grad || !n.inputs.empty() || n.backward) continue;
    Tensor<Scalar> g = n.has_grad ? n.grad : Tensor<Scalar>::zeros(n.value.shape());
    if (n.param) out.by_param_[n.param] = g;
    out.by_node_[id] = std::move(g);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> Graph<Scalar>::next_stop_gradient_value(const Tensor<Scalar>& forward) {
  const std::size_t k = sg_cursor_++;
  if (sg_replay_) {
    if (k >= sg_replay_->size() || (*sg_replay_)[k].shape() != forward.shape()) {
      throw ContractError("stop_gradient replay does not match the recorded graph");
    }
    return (*sg_replay_)[k];
  }
  if (sg_recording_) sg_recorded_.push_back(forward);
  return forward;
}

namespace {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatMap = Eigen::Map<const RowMatrix<Scalar>>;

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// Broadcast-compatible pair: returns (outer, inner) where the larger operand
// is viewed as outer x inner and the smaller as inner.
std::pair<Index, Index> broadcast_extents(const Shape& a, const Shape& b, const char* op) {
  if (!is_suffix(b, a)) {
    throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(b) + " over " +
                     shape_string(a));
  }
  const Index inner = shape_size(b);
  return {inner == 0 ? 0 : shape_size(a) / inner, inner};
}

// Sums a gradient of the larger shape down to the broadcast operand.
template <typename Scalar>
void reduce_into(Tensor<Scalar>& dst, const typename Tensor<Scalar>::Array& src, Index outer,
                 Index inner) {
  Eigen::Map<const RowMatrix<Scalar>> m(src.data(), outer, inner);
  dst.array() += m.colwise().sum().transpose().array();
}

struct Image4 {
  Index n, c, h, w;
};

Image4 as_image(const Shape& s, const char* op) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw ShapeError(std::string(op) + ": expected (N, C, H, W) or (C, H, W), got " +
                   shape_string(s));
}

template <typename Scalar>
void im2col(const Scalar* x, Index c, Index h, Index w, Index k, int stride, int pad, Index ho,
            Index wo, Scalar* col) {
  for (Index ci = 0; ci < c; ++ci) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        Scalar* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          Scalar* out = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + wo, Scalar(0));
            continue;
          }
          const Scalar* in = x + (ci * h + iy) * w;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < w) ? in[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Scalar* col, Index c, Index h, Index w, Index k, int stride, int pad, Index ho,
            Index wo, Scalar* dx) {
  for (Index ci = 0; ci < c; ++ci) {
    for (Index ky = 0; ky < k; ++ky) {
      for (Index kx = 0; kx < k; ++kx) {
        const Scalar* row = col + ((ci * k + ky) * k + kx) * ho * wo;
        for (Index oy = 0; oy < ho; ++oy) {
          const Index iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          Scalar* out = dx + (ci * h + iy) * w;
          const Scalar* in = row + oy * wo;
          for (Index ox = 0; ox < wo; ++ox) {
            const Index ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape().size() < b.shape().size()) return add(b, a);
  const auto [outer, inner] = broadcast_extents(a.shape(), b.shape(), "add");
  Tensor<Scalar> out = a.value();
  {
    MatMap<Scalar> m(out.data(), outer, inner);
    Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> row(b.value().data(), inner);
    m.rowwise() += row;
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib, outer, inner](Graph<Scalar>& g, int self) {
    const Tensor<Scalar>& gy = *g.grad_if_any(self);
    if (g.requires_grad(ia)) g.grad(ia).array() += gy.array();
    if (g.requires_grad(ib)) reduce_into(g.grad(ib), gy.array(), outer, inner);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape().size() < b.shape().size()) return add(scale(b, -1.0), a);
  const auto [outer, inner] = broadcast_extents(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out = a.value();
  {
    MatMap<Scalar> m(out.data(), outer, inner);
    Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>> row(b.value().data(), inner);
    m.rowwise() -= row;
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib, outer, inner](Graph<Scalar>& g, int self) {
    const Tensor<Scalar>& gy = *g.grad_if_any(self);
    if (g.requires_grad(ia)) g.grad(ia).array() += gy.array();
    if (g.requires_grad(ib)) {
      Tensor<Scalar>& gb = g.grad(ib);
      Eigen::Map<const RowMatrix<Scalar>> m(gy.data(), outer, inner);
      gb.array() -= m.colwise().sum().transpose().array();
    }
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape().size() < b.shape().size()) return mul(b, a);
  const auto [outer, inner] = broadcast_extents(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out = a.value();
  {
    MatMap<Scalar> m(out.data(), outer, inner);
    Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>> row(b.value().data(), inner);
    m.array().rowwise() *= row;
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib, outer, inner](Graph<Scalar>& g, int self) {
    const Tensor<Scalar>& gy = *g.grad_if_any(self);
    ConstMatMap<Scalar> gm(gy.data(), outer, inner);
    if (g.requires_grad(ia)) {
      Eigen::Map<const Eigen::Array<Scalar, 1, Eigen::Dynamic>> bv(g.value(ib).data(), inner);
      MatMap<Scalar> ga(g.grad(ia).data(), outer, inner);
      ga.array() += gm.array().rowwise() * bv;
    }
    if (g.requires_grad(ib)) {
      ConstMatMap<Scalar> av(g.value(ia).data(), outer, inner);
      g.grad(ib).array() += (gm.array() * av.array()).colwise().sum().transpose();
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, double factor) {
  Tensor<Scalar> out = a.value();
  out.array() *= static_cast<Scalar>(factor);
  const int ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, factor](Graph<Scalar>& g, int self) {
    g.grad(ia).array() += g.grad_if_any(self)->array() * static_cast<Scalar>(factor);
  });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0]) {
    throw ShapeError("matmul: incompatible shapes " + shape_string(sa) + " and " + shape_string(sb));
  }
  const Index m = sa[0], k = sa[1], n = sb[1];
  Tensor<Scalar> out({m, n});
  MatMap<Scalar>(out.data(), m, n).noalias() =
      ConstMatMap<Scalar>(a.value().data(), m, k) * ConstMatMap<Scalar>(b.value().data(), k, n);
  const int ia = a.id(), ib = b.id();
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib, m, k, n](Graph<Scalar>& g, int self) {
    ConstMatMap<Scalar> gy(g.grad_if_any(self)->data(), m, n);
    if (g.requires_grad(ia)) {
      MatMap<Scalar>(g.grad(ia).data(), m, k).noalias() +=
          gy * ConstMatMap<Scalar>(g.value(ib).data(), k, n).transpose();
    }
    if (g.requires_grad(ib)) {
      MatMap<Scalar>(g.grad(ib).data(), k, n).noalias() +=
          ConstMatMap<Scalar>(g.value(ia).data(), m, k).transpose() * gy;
    }
  });
}

template <typename Scalar>
Var<Scalar> add_channel(const Var<Scalar>& x, const Var<Scalar>& v) {
  const Image4 d = as_image(x.shape(), "add_channel");
  if (v.shape() != Shape{d.n, d.c}) {
    throw ShapeError("add_channel: vector " + shape_string(v.shape()) + " does not match " +
                     shape_string(x.shape()));
  }
  const Index hw = d.h * d.w;
  Tensor<Scalar> out = x.value();
  MatMap<Scalar>(out.data(), d.n * d.c, hw).colwise() +=
      Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(v.value().data(), d.n * d.c);
  const int ix = x.id(), iv = v.id();
  return x.graph().record(std::move(out), {ix, iv}, [ix, iv, d, hw](Graph<Scalar>& g, int self) {
    const Tensor<Scalar>& gy = *g.grad_if_any(self);
    if (g.requires_grad(ix)) g.grad(ix).array() += gy.array();
    if (g.requires_grad(iv)) {
      g.grad(iv).array() += ConstMatMap<Scalar>(gy.data(), d.n * d.c, hw).rowwise().sum().array();
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel,
                   const std::optional<Var<Scalar>>& bias, int stride, int padding) {
  const Image4 d = as_image(input.shape(), "conv2d");
  const Shape& ks = kernel.shape();
  if (ks.size() != 4 || ks[2] != ks[3]) {
    throw ShapeError("conv2d: kernel must be (C_out, C_in, k, k), got " + shape_string(ks));
  }
  if (ks[1] != d.c) {
    throw ShapeError("conv2d: channel mismatch between input " + shape_string(input.shape()) +
                     " and kernel " + shape_string(ks));
  }
  if (ks[2] % 2 == 0) throw ContractError("conv2d: kernel size must be odd");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
  if (bias && bias->shape() != Shape{ks[0]}) {
    throw ShapeError("conv2d: bias " + shape_string(bias->shape()) + " for kernel " + shape_string(ks));
  }
  const Index co = ks[0], k = ks[2];
  const Index ho = (d.h + 2 * padding - k) / stride + 1;
  const Index wo = (d.w + 2 * padding - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for " + shape_string(input.shape()));
  const Index ckk = d.c * k * k, hw = ho * wo;

  const bool batched = input.shape().size() == 4;
  Tensor<Scalar> out(batched ? Shape{d.n, co, ho, wo} : Shape{co, ho, wo});
  ConstMatMap<Scalar> wm(kernel.value().data(), co, ckk);
  RowMatrix<Scalar> col(ckk, hw);
  for (Index n = 0; n < d.n; ++n) {
    im2col(input.value().data() + n * d.c * d.h * d.w, d.c, d.h, d.w, k, stride, padding, ho, wo,
           col.data());
    MatMap<Scalar> om(out.data() + n * co * hw, co, hw);
    om.noalias() = wm * col;
    if (bias) {
      om.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias->value().data(), co);
    }
  }

  std::vector<int> inputs{input.id(), kernel.id()};
  if (bias) inputs.push_back(bias->id());
  const int ix = input.id(), iw = kernel.id(), ib = bias ? bias->id() : -1;
  return input.graph().record(
      std::move(out), std::move(inputs),
      [ix, iw, ib, d, co, k, stride, padding, ho, wo, ckk, hw](Graph<Scalar>& g, int self) {
        const Tensor<Scalar>& gy = *g.grad_if_any(self);
        const Tensor<Scalar>& x = g.value(ix);
        ConstMatMap<Scalar> wm(g.value(iw).data(), co, ckk);
        const bool need_x = g.requires_grad(ix), need_w = g.requires_grad(iw);
        const bool need_b = ib >= 0 && g.requires_grad(ib);
        RowMatrix<Scalar> col(ckk, hw), dcol;
        for (Index n = 0; n < d.n; ++n) {
          ConstMatMap<Scalar> gm(gy.data() + n * co * hw, co, hw);
          if (need_w) {
            im2col(x.data() + n * d.c * d.h * d.w, d.c, d.h, d.w, k, stride, padding, ho, wo, col.data());
            MatMap<Scalar>(g.grad(iw).data(), co, ckk).noalias() += gm * col.transpose();
          }
          if (need_b) g.grad(ib).array() += gm.rowwise().sum().array();
          if (need_x) {
            dcol.noalias() = wm.transpose() * gm;
            col2im(dcol.data(), d.c, d.h, d.w, k, stride, padding, ho, wo,
                   g.grad(ix).data() + n * d.c * d.h * d.w);
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> group_norm(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                       int groups, double eps) {
  const Image4 d = as_image(x.shape(), "group_norm");
  if (groups < 1 || d.c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                     std::to_string(d.c) + " channels");
  }
  if (gamma.shape() != Shape{d.c} || beta.shape() != Shape{d.c}) {
    throw ShapeError("group_norm: affine parameters must have shape (" + std::to_string(d.c) + ")");
  }
  const Index cpg = d.c / groups, hw = d.h * d.w, m = cpg * hw;
  std::vector<double> mu(static_cast<std::size_t>(d.n * groups));
  std::vector<double> rstd(mu.size());
  Tensor<Scalar> out(x.shape());
  const Scalar* xv = x.value().data();
  const Scalar* gv = gamma.value().data();
  const Scalar* bv = beta.value().data();
  for (Index n = 0; n < d.n; ++n) {
    for (Index gi = 0; gi < groups; ++gi) {
      const Index base = (n * d.c + gi * cpg) * hw;
      double s = 0.0;
      for (Index i = 0; i < m; ++i) s += xv[base + i];
      const double mean_v = s / static_cast<double>(m);
      double ss = 0.0;
      for (Index i = 0; i < m; ++i) {
        const double dv = xv[base + i] - mean_v;
        ss += dv * dv;
      }
      const double r = 1.0 / std::sqrt(ss / static_cast<double>(m) + eps);
      const std::size_t slot = static_cast<std::size_t>(n * groups + gi);
      mu[slot] = mean_v;
      rstd[slot] = r;
      for (Index c = 0; c < cpg; ++c) {
        const Index ch = gi * cpg + c;
        const Index off = base + c * hw;
        for (Index i = 0; i < hw; ++i) {
          out[off + i] = static_cast<Scalar>((xv[off + i] - mean_v) * r) * gv[ch] + bv[ch];
        }
      }
    }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.graph().record(
      std::move(out), {ix, ig, ib},
      [ix, ig, ib, d, groups, cpg, hw, m, mu = std::move(mu), rstd = std::move(rstd)](Graph<Scalar>& g,
                                                                                     int self) {
        const Tensor<Scalar>& gy = *g.grad_if_any(self);
        const Scalar* xv = g.value(ix).data();
        const Scalar* gv = g.value(ig).data();
        const bool need_x = g.requires_grad(ix), need_g = g.requires_grad(ig), need_b = g.requires_grad(ib);
        for (Index n = 0; n < d.n; ++n) {
          for (Index gi = 0; gi < groups; ++gi) {
            const std::size_t slot = static_cast<std::size_t>(n * groups + gi);
            const double mean_v = mu[slot], r = rstd[slot];
            const Index base = (n * d.c + gi * cpg) * hw;
            double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
            for (Index c = 0; c < cpg; ++c) {
              const Index ch = gi * cpg + c;
              const Index off = base + c * hw;
              double dg = 0.0, db = 0.0;
              for (Index i = 0; i < hw; ++i) {
                const double xhat = (xv[off + i] - mean_v) * r;
                const double gyi = gy[off + i];
                dg += gyi * xhat;
                db += gyi;
                const double dxhat = gyi * gv[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
              }
              if (need_g) g.grad(ig)[ch] += static_cast<Scalar>(dg);
              if (need_b) g.grad(ib)[ch] += static_cast<Scalar>(db);
            }
            if (!need_x) continue;
            const double md = sum_dxhat / static_cast<double>(m);
            const double mdx = sum_dxhat_xhat / static_cast<double>(m);
            Scalar* gx = g.grad(ix).data();
            for (Index c = 0; c < cpg; ++c) {
              const Index ch = gi * cpg + c;
              const Index off = base + c * hw;
              for (Index i = 0; i < hw; ++i) {
                const double xhat = (xv[off + i] - mean_v) * r;
                const double dxhat = static_cast<double>(gy[off + i]) * gv[ch];
                gx[off + i] += static_cast<Scalar>(r * (dxhat - md - xhat * mdx));
              }
            }
          }
        }
      });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array() / (Scalar(1) + (-x.value().array()).exp());
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    const auto& xv = g.value(ix).array();
    const auto sig = (Scalar(1) / (Scalar(1) + (-xv).exp())).eval();
    g.grad(ix).array() += g.grad_if_any(self)->array() * sig * (Scalar(1) + xv * (Scalar(1) - sig));
  });
}

template <typename Scalar>
Var<Scalar> exp(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array().exp();
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    g.grad(ix).array() += g.grad_if_any(self)->array() * g.value(self).array();
  });
}

template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array().max(static_cast<Scalar>(lo)).min(static_cast<Scalar>(hi));
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, lo, hi](Graph<Scalar>& g, int self) {
    const auto& xv = g.value(ix).array();
    const auto inside = (xv >= static_cast<Scalar>(lo) && xv <= static_cast<Scalar>(hi)).template cast<Scalar>();
    g.grad(ix).array() += g.grad_if_any(self)->array() * inside;
  });
}

template <typename Scalar>
Var<Scalar> upsample2x(const Var<Scalar>& x) {
  const Image4 d = as_image(x.shape(), "upsample2x");
  Shape os = x.shape();
  os[os.size() - 2] *= 2;
  os[os.size() - 1] *= 2;
  Tensor<Scalar> out(os);
  const Index planes = d.n * d.c, w2 = 2 * d.w;
  const Scalar* xv = x.value().data();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < 2 * d.h; ++y) {
      const Scalar* in = xv + (p * d.h + y / 2) * d.w;
      Scalar* o = out.data() + (p * 2 * d.h + y) * w2;
      for (Index xx = 0; xx < w2; ++xx) o[xx] = in[xx / 2];
    }
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, d, planes, w2](Graph<Scalar>& g, int self) {
    const Scalar* gy = g.grad_if_any(self)->data();
    Scalar* gx = g.grad(ix).data();
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < 2 * d.h; ++y) {
        Scalar* o = gx + (p * d.h + y / 2) * d.w;
        const Scalar* in = gy + (p * 2 * d.h + y) * w2;
        for (Index xx = 0; xx < w2; ++xx) o[xx / 2] += in[xx];
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> avgpool2x(const Var<Scalar>& x) {
  const Image4 d = as_image(x.shape(), "avgpool2x");
  if (d.h % 2 || d.w % 2) throw ShapeError("avgpool2x: odd spatial extent in " + shape_string(x.shape()));
  Shape os = x.shape();
  os[os.size() - 2] /= 2;
  os[os.size() - 1] /= 2;
  Tensor<Scalar> out(os);
  const Index planes = d.n * d.c, h2 = d.h / 2, w2 = d.w / 2;
  const Scalar* xv = x.value().data();
  for (Index p = 0; p < planes; ++p) {
    for (Index y = 0; y < h2; ++y) {
      const Scalar* r0 = xv + (p * d.h + 2 * y) * d.w;
      const Scalar* r1 = r0 + d.w;
      Scalar* o = out.data() + (p * h2 + y) * w2;
      for (Index xx = 0; xx < w2; ++xx) {
        o[xx] = (r0[2 * xx] + r0[2 * xx + 1] + r1[2 * xx] + r1[2 * xx + 1]) * Scalar(0.25);
      }
    }
  }
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, d, planes, h2, w2](Graph<Scalar>& g, int self) {
    const Scalar* gy = g.grad_if_any(self)->data();
    Scalar* gx = g.grad(ix).data();
    for (Index p = 0; p < planes; ++p) {
      for (Index y = 0; y < h2; ++y) {
        Scalar* r0 = gx + (p * d.h + 2 * y) * d.w;
        Scalar* r1 = r0 + d.w;
        const Scalar* in = gy + (p * h2 + y) * w2;
        for (Index xx = 0; xx < w2; ++xx) {
          const Scalar v = in[xx] * Scalar(0.25);
          r0[2 * xx] += v;
          r0[2 * xx + 1] += v;
          r1[2 * xx] += v;
          r1[2 * xx + 1] += v;
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(const Var<Scalar>& a, const Var<Scalar>& b) {
  const Image4 da = as_image(a.shape(), "concat_channels");
  const Image4 db = as_image(b.shape(), "concat_channels");
  if (a.shape().size() != b.shape().size() || da.n != db.n || da.h != db.h || da.w != db.w) {
    throw ShapeError("concat_channels: incompatible " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
  }
  Shape os = a.shape();
  os[os.size() - 3] = da.c + db.c;
  Tensor<Scalar> out(os);
  const Index hw = da.h * da.w, sa = da.c * hw, sb = db.c * hw;
  for (Index n = 0; n < da.n; ++n) {
    std::copy_n(a.value().data() + n * sa, sa, out.data() + n * (sa + sb));
    std::copy_n(b.value().data() + n * sb, sb, out.data() + n * (sa + sb) + sa);
  }
  const int ia = a.id(), ib = b.id();
  const Index nn = da.n;
  return a.graph().record(std::move(out), {ia, ib}, [ia, ib, nn, sa, sb](Graph<Scalar>& g, int self) {
    const Scalar* gy = g.grad_if_any(self)->data();
    for (Index n = 0; n < nn; ++n) {
      if (g.requires_grad(ia)) {
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g.grad(ia).data() + n * sa, sa) +=
            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(gy + n * (sa + sb), sa);
      }
      if (g.requires_grad(ib)) {
        Eigen::Map<Eigen::Array<Scalar, Eigen::Dynamic, 1>>(g.grad(ib).data() + n * sb, sb) +=
            Eigen::Map<const Eigen::Array<Scalar, Eigen::Dynamic, 1>>(gy + n * (sa + sb) + sa, sb);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& x, Shape shape) {
  Tensor<Scalar> out = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<Scalar>& g, int self) {
    g.grad(ix).array() += g.grad_if_any(self)->array();
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  double s = 0.0;
  for (Scalar v : x.value().values()) s += v;
  const int ix = x.id();
  return x.graph().record(Tensor<Scalar>::scalar(static_cast<Scalar>(s)), {ix},
                          [ix](Graph<Scalar>& g, int self) {
                            g.grad(ix).array() += g.grad_if_any(self)->item();
                          });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& x) {
  const Index n = x.value().size();
  if (n == 0) throw ShapeError("mean of an empty tensor");
  double s = 0.0;
  for (Scalar v : x.value().values()) s += v;
  const int ix = x.id();
  return x.graph().record(Tensor<Scalar>::scalar(static_cast<Scalar>(s / static_cast<double>(n))), {ix},
                          [ix, n](Graph<Scalar>& g, int self) {
                            g.grad(ix).array() +=
                                static_cast<Scalar>(g.grad_if_any(self)->item() / static_cast<double>(n));
                          });
}

template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mse: shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()) +
                     " differ");
  }
  const Index n = a.value().size();
  if (n == 0) throw ShapeError("mse of empty tensors");
  double s = 0.0;
  const Scalar* av = a.value().data();
  const Scalar* bv = b.value().data();
  for (Index i = 0; i < n; ++i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    s += d * d;
  }
  const int ia = a.id(), ib = b.id();
  return a.graph().record(
      Tensor<Scalar>::scalar(static_cast<Scalar>(s / static_cast<double>(n))), {ia, ib},
      [ia, ib, n](Graph<Scalar>& g, int self) {
        const Scalar c = static_cast<Scalar>(2.0 * g.grad_if_any(self)->item() / static_cast<double>(n));
        const auto diff = (g.value(ia).array() - g.value(ib).array()).eval();
        if (g.requires_grad(ia)) g.grad(ia).array() += c * diff;
        if (g.requires_grad(ib)) g.grad(ib).array() -= c * diff;
      });
}

template <typename Scalar>
Var<Scalar> stop_gradient(const Var<Scalar>& x) {
  return x.graph().constant(x.graph().next_stop_gradient_value(x.value()));
}

template <typename Scalar>
double gaussian_log_density(std::span<const Scalar> action, std::span<const Scalar> mean, double sigma) {
  if (action.size() != mean.size()) throw ShapeError("gaussian_log_density: size mismatch");
  if (!(sigma > 0.0)) throw ContractError("gaussian_log_density: sigma must be positive");
  double q = 0.0;
  for (std::size_t i = 0; i < action.size(); ++i) {
    const double d = static_cast<double>(action[i]) - static_cast<double>(mean[i]);
    q += d * d;
  }
  const double dim = static_cast<double>(action.size());
  return -q / (2.0 * sigma * sigma) - 0.5 * dim * std::log(2.0 * std::numbers::pi * sigma * sigma);
}

template <typename Scalar>
Var<Scalar> gaussian_likelihood_ratio(const Var<Scalar>& mean, const Tensor<Scalar>& action, double sigma,
                                      std::span<const double> logp_old) {
  if (mean.shape() != action.shape() || mean.shape().empty()) {
    throw ShapeError("gaussian_likelihood_ratio: mean " + shape_string(mean.shape()) + " vs action " +
                     shape_string(action.shape()));
  }
  const Index batch = mean.shape()[0];
  if (static_cast<Index>(logp_old.size()) != batch) {
    throw ShapeError("gaussian_likelihood_ratio: one old log-probability per sample required");
  }
  const Index dim = mean.value().size() / batch;
  Tensor<Scalar> out({batch});
  std::vector<double> ratios(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    const auto span_a = action.values().subspan(static_cast<std::size_t>(b * dim), static_cast<std::size_t>(dim));
    const auto span_m = mean.value().values().subspan(static_cast<std::size_t>(b * dim), static_cast<std::size_t>(dim));
    const double lp = gaussian_log_density<Scalar>(span_a, span_m, sigma);
    ratios[static_cast<std::size_t>(b)] = std::exp(lp - logp_old[static_cast<std::size_t>(b)]);
    out[b] = static_cast<Scalar>(ratios[static_cast<std::size_t>(b)]);
  }
  const int im = mean.id();
  Tensor<Scalar> act = action;
  return mean.graph().record(
      std::move(out), {im},
      [im, act = std::move(act), sigma, batch, dim, ratios = std::move(ratios)](Graph<Scalar>& g, int self) {
        const Scalar* gy = g.grad_if_any(self)->data();
        const Scalar* mv = g.value(im).data();
        Scalar* gm = g.grad(im).data();
        const double inv_var = 1.0 / (sigma * sigma);
        for (Index b = 0; b < batch; ++b) {
          const double c = static_cast<double>(gy[b]) * ratios[static_cast<std::size_t>(b)] * inv_var;
          for (Index i = b * dim; i < (b + 1) * dim; ++i) {
            gm[i] += static_cast<Scalar>(c * (static_cast<double>(act[i]) - static_cast<double>(mv[i])));
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> sinusoidal_embedding(std::span<const double> timesteps, Index dim) {
  if (dim <= 0 || dim % 2) throw ContractError("sinusoidal_embedding: dimension must be positive and even");
  Tensor<Scalar> out({static_cast<Index>(timesteps.size()), dim});
  for (std::size_t n = 0; n < timesteps.size(); ++n) {
    for (Index i = 0; i < dim / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
      const double arg = timesteps[n] * freq;
      out[static_cast<Index>(n) * dim + 2 * i] = static_cast<Scalar>(std::sin(arg));
      out[static_cast<Index>(n) * dim + 2 * i + 1] = static_cast<Scalar>(std::cos(arg));
    }
  }
  return out;
}

#define OFDIFF_INSTANTIATE(S)                                                                       \
  template class Graph<S>;                                                                          \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                \
  template Var<S> scale(const Var<S>&, double);                                                     \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> add_channel(const Var<S>&, const Var<S>&);                                        \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const std::optional<Var<S>>&, int, int);     \
  template Var<S> group_norm(const Var<S>&, const Var<S>&, const Var<S>&, int, double);             \
  template Var<S> silu(const Var<S>&);                                                              \
  template Var<S> exp(const Var<S>&);                                                               \
  template Var<S> clamp(const Var<S>&, double, double);                                             \
  template Var<S> upsample2x(const Var<S>&);                                                        \
  template Var<S> avgpool2x(const Var<S>&);                                                         \
  template Var<S> concat_channels(const Var<S>&, const Var<S>&);                                    \
  template Var<S> reshape(const Var<S>&, Shape);                                                    \
  template Var<S> sum(const Var<S>&);                                                               \
  template Var<S> mean(const Var<S>&);                                                              \
  template Var<S> mse(const Var<S>&, const Var<S>&);                                                \
  template Var<S> stop_gradient(const Var<S>&);                                                     \
  template double gaussian_log_density<S>(std::span<const S>, std::span<const S>, double);          \
  template Var<S> gaussian_likelihood_ratio(const Var<S>&, const Tensor<S>&, double,                \
                                            std::span<const double>);                               \
  template Tensor<S> sinusoidal_embedding<S>(std::span<const double>, Index);

OFDIFF_INSTANTIATE(float)
OFDIFF_INSTANTIATE(double)

#undef OFDIFF_INSTANTIATE

}  // namespace ofdiff
