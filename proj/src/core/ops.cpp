#include "vloss/core/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace vloss {
namespace {

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MapMat = Eigen::Map<RowMat<Scalar>>;
template <typename Scalar>
using ConstMapMat = Eigen::Map<const RowMat<Scalar>>;

Index normalize_axis(Index axis, Index rank, const char* op) {
  const Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw ValidationError(std::string(op) + ": axis " + std::to_string(axis) +
                          " out of range for rank " + std::to_string(rank));
  }
  return a;
}

struct AxisSplit {
  Index outer = 1;
  Index n = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& shape, Index axis) {
  AxisSplit s;
  for (Index i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (Index i = axis + 1; i < static_cast<Index>(shape.size()); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, Index axis, bool keepdim) {
  Shape out = shape;
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + axis);
  return out;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct Broadcast {
  Shape out;
  bool same = false;
  std::vector<Index> a_off;
  std::vector<Index> b_off;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast plan;
  if (a == b) {
    plan.out = a;
    plan.same = true;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape ap(rank, 1), bp(rank, 1);
  std::copy(a.begin(), a.end(), ap.begin() + (rank - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + (rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw ValidationError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                            shape_str(b));
    }
    plan.out[i] = ap[i] == 1 ? bp[i] : ap[i];
  }
  // Strides in each input, zeroed along broadcast dims.
  std::vector<Index> as(rank, 0), bs(rank, 0);
  Index sa = 1, sb = 1;
  for (std::size_t k = rank; k-- > 0;) {
    as[k] = ap[k] == 1 ? 0 : sa;
    bs[k] = bp[k] == 1 ? 0 : sb;
    sa *= ap[k];
    sb *= bp[k];
  }
  const Index n = numel_of(plan.out);
  plan.a_off.resize(n);
  plan.b_off.resize(n);
  std::vector<Index> idx(rank, 0);
  Index oa = 0, ob = 0;
  for (Index i = 0; i < n; ++i) {
    plan.a_off[i] = oa;
    plan.b_off[i] = ob;
    for (std::size_t k = rank; k-- > 0;) {
      ++idx[k];
      oa += as[k];
      ob += bs[k];
      if (idx[k] < plan.out[k]) break;
      oa -= as[k] * idx[k];
      ob -= bs[k] * idx[k];
      idx[k] = 0;
    }
  }
  return plan;
}

enum class BinOp { add, sub, mul, div };

template <typename Scalar>
Tensor<Scalar> binary(const Tensor<Scalar>& a, const Tensor<Scalar>& b, BinOp kind) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* name = names[static_cast<int>(kind)];
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), name));
  const Index n = numel_of(plan->out);
  const auto ad = a.data();
  const auto bd = b.data();
  std::vector<Scalar> out(n);
  auto ai = [&](Index i) { return plan->same ? i : plan->a_off[i]; };
  auto bi = [&](Index i) { return plan->same ? i : plan->b_off[i]; };
  for (Index i = 0; i < n; ++i) {
    const Scalar x = ad[ai(i)], y = bd[bi(i)];
    switch (kind) {
      case BinOp::add: out[i] = x + y; break;
      case BinOp::sub: out[i] = x - y; break;
      case BinOp::mul: out[i] = x * y; break;
      case BinOp::div: out[i] = x / y; break;
    }
  }
  return detail::make_result<Scalar>(
      name, plan->out, std::move(out), {a, b},
      [a, b, plan, kind](const detail::TensorImpl<Scalar>& o) {
        const auto& g = o.grad;
        const Index n = static_cast<Index>(g.size());
        auto ai = [&](Index i) { return plan->same ? i : plan->a_off[i]; };
        auto bi = [&](Index i) { return plan->same ? i : plan->b_off[i]; };
        const auto ad = a.data();
        const auto bd = b.data();
        if (a.requires_grad()) {
          auto ga = detail::grad_buffer(a);
          for (Index i = 0; i < n; ++i) {
            switch (kind) {
              case BinOp::add:
              case BinOp::sub: ga[ai(i)] += g[i]; break;
              case BinOp::mul: ga[ai(i)] += g[i] * bd[bi(i)]; break;
              case BinOp::div: ga[ai(i)] += g[i] / bd[bi(i)]; break;
            }
          }
        }
        if (b.requires_grad()) {
          auto gb = detail::grad_buffer(b);
          for (Index i = 0; i < n; ++i) {
            switch (kind) {
              case BinOp::add: gb[bi(i)] += g[i]; break;
              case BinOp::sub: gb[bi(i)] -= g[i]; break;
              case BinOp::mul: gb[bi(i)] += g[i] * ad[ai(i)]; break;
              case BinOp::div: {
                const Scalar y = bd[bi(i)];
                gb[bi(i)] -= g[i] * ad[ai(i)] / (y * y);
                break;
              }
            }
          }
        }
      });
}

// Elementwise unary op; `deriv(x, y)` gives dy/dx.
template <typename Scalar, typename F, typename D>
Tensor<Scalar> unary(const char* name, const Tensor<Scalar>& x, F f, D deriv) {
  const auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  return detail::make_result<Scalar>(name, x.shape(), std::move(out), {x},
                                     [x, deriv](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       const auto xd = x.data();
                                       for (std::size_t i = 0; i < gx.size(); ++i)
                                         gx[i] += o.grad[i] * deriv(xd[i], o.data[i]);
                                     });
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  const bool batched = a.rank() == 3 && b.rank() == 3;
  if (!(batched || (a.rank() == 2 && b.rank() == 2))) {
    throw ValidationError("matmul: expected rank-2 or rank-3 operands, got " +
                          shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const Index batch = batched ? a.dim(0) : 1;
  const Index m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2 || (batched && b.dim(0) != batch)) {
    throw ValidationError("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  }
  std::vector<Scalar> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    ConstMapMat<Scalar> A(a.data().data() + i * m * k, m, k);
    ConstMapMat<Scalar> B(b.data().data() + i * k * n, k, n);
    MapMat<Scalar> C(out.data() + i * m * n, m, n);
    C.noalias() = A * B;
  }
  Shape shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return detail::make_result<Scalar>(
      "matmul", shape, std::move(out), {a, b},
      [a, b, batch, m, k, n](const detail::TensorImpl<Scalar>& o) {
        for (Index i = 0; i < batch; ++i) {
          ConstMapMat<Scalar> G(o.grad.data() + i * m * n, m, n);
          if (a.requires_grad()) {
            MapMat<Scalar> GA(detail::grad_buffer(a).data() + i * m * k, m, k);
            ConstMapMat<Scalar> B(b.data().data() + i * k * n, k, n);
            GA.noalias() += G * B.transpose();
          }
          if (b.requires_grad()) {
            MapMat<Scalar> GB(detail::grad_buffer(b).data() + i * k * n, k, n);
            ConstMapMat<Scalar> A(a.data().data() + i * m * k, m, k);
            GB.noalias() += A.transpose() * G;
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& input, const Tensor<Scalar>& weight, Index stride,
                      Index pad) {
  if (input.rank() != 3 || weight.rank() != 4) {
    throw ValidationError("conv2d: expected input [C,H,W] and weight [O,C,kh,kw], got " +
                          shape_str(input.shape()) + " and " + shape_str(weight.shape()));
  }
  if (stride < 1 || pad < 0) throw ValidationError("conv2d: stride must be >= 1 and pad >= 0");
  const Index C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const Index O = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != C) {
    throw ValidationError("conv2d: input channels " + std::to_string(C) + " != weight channels " +
                          std::to_string(weight.dim(1)));
  }
  if (H + 2 * pad < kh || W + 2 * pad < kw) {
    throw ValidationError("conv2d: kernel larger than padded input " + shape_str(input.shape()));
  }
  const Index Ho = (H + 2 * pad - kh) / stride + 1;
  const Index Wo = (W + 2 * pad - kw) / stride + 1;
  const Index K = C * kh * kw, P = Ho * Wo;

  auto col = std::make_shared<std::vector<Scalar>>(K * P, Scalar(0));
  const auto xd = input.data();
  for (Index c = 0; c < C; ++c)
    for (Index u = 0; u < kh; ++u)
      for (Index v = 0; v < kw; ++v) {
        Scalar* row = col->data() + ((c * kh + u) * kw + v) * P;
        for (Index y = 0; y < Ho; ++y) {
          const Index iy = y * stride + u - pad;
          if (iy < 0 || iy >= H) continue;
          for (Index x = 0; x < Wo; ++x) {
            const Index ix = x * stride + v - pad;
            if (ix < 0 || ix >= W) continue;
            row[y * Wo + x] = xd[(c * H + iy) * W + ix];
          }
        }
      }
  std::vector<Scalar> out(O * P);
  MapMat<Scalar>(out.data(), O, P).noalias() =
      ConstMapMat<Scalar>(weight.data().data(), O, K) * ConstMapMat<Scalar>(col->data(), K, P);

  return detail::make_result<Scalar>(
      "conv2d", Shape{O, Ho, Wo}, std::move(out), {input, weight},
      [=](const detail::TensorImpl<Scalar>& o) {
        ConstMapMat<Scalar> G(o.grad.data(), O, P);
        if (weight.requires_grad()) {
          MapMat<Scalar> GW(detail::grad_buffer(weight).data(), O, K);
          GW.noalias() += G * ConstMapMat<Scalar>(col->data(), K, P).transpose();
        }
        if (input.requires_grad()) {
          RowMat<Scalar> dcol = ConstMapMat<Scalar>(weight.data().data(), O, K).transpose() * G;
          auto gx = detail::grad_buffer(input);
          for (Index c = 0; c < C; ++c)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Scalar* row = dcol.data() + ((c * kh + u) * kw + v) * P;
                for (Index y = 0; y < Ho; ++y) {
                  const Index iy = y * stride + u - pad;
                  if (iy < 0 || iy >= H) continue;
                  for (Index x = 0; x < Wo; ++x) {
                    const Index ix = x * stride + v - pad;
                    if (ix < 0 || ix >= W) continue;
                    gx[(c * H + iy) * W + ix] += row[y * Wo + x];
                  }
                }
              }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinOp::add);
}
template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinOp::sub);
}
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinOp::mul);
}
template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return binary(a, b, BinOp::div);
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  return unary(
      "scale", x, [factor](Scalar v) { return v * factor; },
      [factor](Scalar, Scalar) { return factor; });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar value) {
  return unary(
      "add_scalar", x, [value](Scalar v) { return v + value; }, [](Scalar, Scalar) { return Scalar(1); });
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return unary(
      "relu", x, [](Scalar v) { return v > 0 ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  constexpr Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
  return unary(
      "gelu", x, [](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); },
      [](Scalar v, Scalar) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
      });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return unary(
      "sigmoid", x,
      [](Scalar v) {
        if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return unary(
      "exp", x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x, Scalar eps) {
  if (eps <= 0) {
    for (Scalar v : x.data()) {
      if (!(v > 0)) throw ValidationError("log: non-positive input " + std::to_string(v));
    }
  }
  return unary(
      "log", x, [eps](Scalar v) { return std::log(std::max(v, eps)); },
      [eps](Scalar v, Scalar) { return v >= eps ? Scalar(1) / v : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x) {
  return unary(
      "softplus", x,
      [](Scalar v) { return std::max(v, Scalar(0)) + std::log1p(std::exp(-std::abs(v))); },
      [](Scalar v, Scalar) {
        if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
        const Scalar e = std::exp(v);
        return e / (Scalar(1) + e);
      });
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis) {
  axis = normalize_axis(axis, x.rank(), "softmax");
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (Index o = 0; o < s.outer; ++o)
    for (Index in = 0; in < s.inner; ++in) {
      const Index base = o * s.n * s.inner + in;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < s.n; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      Scalar total = 0;
      for (Index j = 0; j < s.n; ++j) {
        const Scalar e = std::exp(xd[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (Index j = 0; j < s.n; ++j) out[base + j * s.inner] /= total;
    }
  return detail::make_result<Scalar>("softmax", x.shape(), std::move(out), {x},
                                     [x, s](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       const auto& y = o.data;
                                       const auto& g = o.grad;
                                       for (Index a = 0; a < s.outer; ++a)
                                         for (Index in = 0; in < s.inner; ++in) {
                                           const Index base = a * s.n * s.inner + in;
                                           Scalar dot = 0;
                                           for (Index j = 0; j < s.n; ++j)
                                             dot += g[base + j * s.inner] * y[base + j * s.inner];
                                           for (Index j = 0; j < s.n; ++j) {
                                             const Index p = base + j * s.inner;
                                             gx[p] += y[p] * (g[p] - dot);
                                           }
                                         }
                                     });
}

template <typename Scalar>
Tensor<Scalar> log_softmax(const Tensor<Scalar>& x, Index axis) {
  axis = normalize_axis(axis, x.rank(), "log_softmax");
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (Index o = 0; o < s.outer; ++o)
    for (Index in = 0; in < s.inner; ++in) {
      const Index base = o * s.n * s.inner + in;
      Scalar mx = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < s.n; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      Scalar total = 0;
      for (Index j = 0; j < s.n; ++j) total += std::exp(xd[base + j * s.inner] - mx);
      const Scalar lse = mx + std::log(total);
      for (Index j = 0; j < s.n; ++j) out[base + j * s.inner] = xd[base + j * s.inner] - lse;
    }
  return detail::make_result<Scalar>("log_softmax", x.shape(), std::move(out), {x},
                                     [x, s](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       const auto& y = o.data;
                                       const auto& g = o.grad;
                                       for (Index a = 0; a < s.outer; ++a)
                                         for (Index in = 0; in < s.inner; ++in) {
                                           const Index base = a * s.n * s.inner + in;
                                           Scalar gsum = 0;
                                           for (Index j = 0; j < s.n; ++j) gsum += g[base + j * s.inner];
                                           for (Index j = 0; j < s.n; ++j) {
                                             const Index p = base + j * s.inner;
                                             gx[p] += g[p] - std::exp(y[p]) * gsum;
                                           }
                                         }
                                     });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, Scalar eps) {
  if (x.rank() < 1) throw ValidationError("layer_norm: scalar input");
  const Index n = x.dim(-1);
  const Index rows = n == 0 ? 0 : x.numel() / n;
  const auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  auto inv_std = std::make_shared<std::vector<Scalar>>(rows);
  for (Index r = 0; r < rows; ++r) {
    const Scalar* p = xd.data() + r * n;
    Scalar mu = 0;
    for (Index j = 0; j < n; ++j) mu += p[j];
    mu /= Scalar(n);
    Scalar var = 0;
    for (Index j = 0; j < n; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= Scalar(n);
    const Scalar is = Scalar(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (Index j = 0; j < n; ++j) out[r * n + j] = (p[j] - mu) * is;
  }
  return detail::make_result<Scalar>("layer_norm", x.shape(), std::move(out), {x},
                                     [x, n, rows, inv_std](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (Index r = 0; r < rows; ++r) {
                                         const Scalar* g = o.grad.data() + r * n;
                                         const Scalar* y = o.data.data() + r * n;
                                         Scalar mg = 0, mgy = 0;
                                         for (Index j = 0; j < n; ++j) {
                                           mg += g[j];
                                           mgy += g[j] * y[j];
                                         }
                                         mg /= Scalar(n);
                                         mgy /= Scalar(n);
                                         const Scalar is = (*inv_std)[r];
                                         for (Index j = 0; j < n; ++j)
                                           gx[r * n + j] += is * (g[j] - mg - y[j] * mgy);
                                       }
                                     });
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps) {
  if (gamma.shape() != Shape{x.dim(-1)} || beta.shape() != Shape{x.dim(-1)}) {
    throw ValidationError("layer_norm: affine params must have shape [" + std::to_string(x.dim(-1)) +
                          "]");
  }
  return add(mul(layer_norm(x, eps), gamma), beta);
}

template <typename Scalar>
Tensor<Scalar> mean_pool_spatial(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw ValidationError("mean_pool_spatial: need [..., H, W], got " + shape_str(x.shape()));
  const Index hw = x.dim(-2) * x.dim(-1);
  if (hw == 0) throw ValidationError("mean_pool_spatial: empty spatial extent");
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  const Index lead = numel_of(shape);
  const auto xd = x.data();
  std::vector<Scalar> out(lead);
  for (Index i = 0; i < lead; ++i) {
    Scalar s = 0;
    for (Index j = 0; j < hw; ++j) s += xd[i * hw + j];
    out[i] = s / Scalar(hw);
  }
  return detail::make_result<Scalar>("mean_pool_spatial", shape, std::move(out), {x},
                                     [x, lead, hw](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (Index i = 0; i < lead; ++i) {
                                         const Scalar g = o.grad[i] / Scalar(hw);
                                         for (Index j = 0; j < hw; ++j) gx[i * hw + j] += g;
                                       }
                                     });
}

namespace {
struct Tap {
  Index lo, hi;
  double w_hi;
};

std::vector<Tap> bilinear_taps(Index in, Index factor) {
  std::vector<Tap> taps(in * factor);
  for (Index d = 0; d < in * factor; ++d) {
    double src = (static_cast<double>(d) + 0.5) / static_cast<double>(factor) - 0.5;
    if (src < 0) src = 0;
    Index lo = static_cast<Index>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const Index hi = std::min(lo + 1, in - 1);
    taps[d] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}
}  // namespace

template <typename Scalar>
Tensor<Scalar> bilinear_upsample(const Tensor<Scalar>& x, Index factor) {
  if (x.rank() < 2) throw ValidationError("bilinear_upsample: need [..., H, W], got " + shape_str(x.shape()));
  if (factor < 1) throw ValidationError("bilinear_upsample: factor must be >= 1");
  const Index H = x.dim(-2), W = x.dim(-1), Ho = H * factor, Wo = W * factor;
  const Index lead = H * W == 0 ? 0 : x.numel() / (H * W);
  auto ty = std::make_shared<std::vector<Tap>>(bilinear_taps(H, factor));
  auto tx = std::make_shared<std::vector<Tap>>(bilinear_taps(W, factor));
  Shape shape = x.shape();
  shape[shape.size() - 2] = Ho;
  shape[shape.size() - 1] = Wo;
  const auto xd = x.data();
  std::vector<Scalar> out(lead * Ho * Wo);
  for (Index i = 0; i < lead; ++i) {
    const Scalar* src = xd.data() + i * H * W;
    Scalar* dst = out.data() + i * Ho * Wo;
    for (Index y = 0; y < Ho; ++y) {
      const Tap& a = (*ty)[y];
      const Scalar wy = Scalar(a.w_hi);
      for (Index xx = 0; xx < Wo; ++xx) {
        const Tap& b = (*tx)[xx];
        const Scalar wx = Scalar(b.w_hi);
        const Scalar top = src[a.lo * W + b.lo] * (1 - wx) + src[a.lo * W + b.hi] * wx;
        const Scalar bot = src[a.hi * W + b.lo] * (1 - wx) + src[a.hi * W + b.hi] * wx;
        dst[y * Wo + xx] = top * (1 - wy) + bot * wy;
      }
    }
  }
  return detail::make_result<Scalar>(
      "bilinear_upsample", shape, std::move(out), {x},
      [x, ty, tx, lead, H, W, Ho, Wo](const detail::TensorImpl<Scalar>& o) {
        auto gx = detail::grad_buffer(x);
        for (Index i = 0; i < lead; ++i) {
          Scalar* g_src = gx.data() + i * H * W;
          const Scalar* g = o.grad.data() + i * Ho * Wo;
          for (Index y = 0; y < Ho; ++y) {
            const Tap& a = (*ty)[y];
            const Scalar wy = Scalar(a.w_hi);
            for (Index xx = 0; xx < Wo; ++xx) {
              const Tap& b = (*tx)[xx];
              const Scalar wx = Scalar(b.w_hi);
              const Scalar v = g[y * Wo + xx];
              g_src[a.lo * W + b.lo] += v * (1 - wy) * (1 - wx);
              g_src[a.lo * W + b.hi] += v * (1 - wy) * wx;
              g_src[a.hi * W + b.lo] += v * wy * (1 - wx);
              g_src[a.hi * W + b.hi] += v * wy * wx;
            }
          }
        }
      });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  Index infer = -1, known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ValidationError("reshape: more than one -1 in " + shape_str(shape));
      infer = static_cast<Index>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (numel_of(shape) != x.numel()) {
    throw ValidationError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<Scalar> out(x.data().begin(), x.data().end());
  return detail::make_result<Scalar>("reshape", std::move(shape), std::move(out), {x},
                                     [x](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                                     });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x, const std::vector<Index>& perm) {
  const Index r = x.rank();
  if (static_cast<Index>(perm.size()) != r) {
    throw ValidationError("transpose: permutation length " + std::to_string(perm.size()) +
                          " != rank " + std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  for (Index p : perm) {
    if (p < 0 || p >= r || seen[p]) throw ValidationError("transpose: invalid permutation");
    seen[p] = true;
  }
  Shape shape(r);
  std::vector<Index> in_stride(r), src_stride(r);
  Index s = 1;
  for (Index k = r; k-- > 0;) {
    in_stride[k] = s;
    s *= x.dim(k);
  }
  for (Index k = 0; k < r; ++k) {
    shape[k] = x.dim(perm[k]);
    src_stride[k] = in_stride[perm[k]];
  }
  const Index n = x.numel();
  auto src = std::make_shared<std::vector<Index>>(n);
  std::vector<Index> idx(r, 0);
  Index off = 0;
  for (Index i = 0; i < n; ++i) {
    (*src)[i] = off;
    for (Index k = r; k-- > 0;) {
      ++idx[k];
      off += src_stride[k];
      if (idx[k] < shape[k]) break;
      off -= src_stride[k] * idx[k];
      idx[k] = 0;
    }
  }
  const auto xd = x.data();
  std::vector<Scalar> out(n);
  for (Index i = 0; i < n; ++i) out[i] = xd[(*src)[i]];
  return detail::make_result<Scalar>("transpose", shape, std::move(out), {x},
                                     [x, src](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (std::size_t i = 0; i < src->size(); ++i)
                                         gx[(*src)[i]] += o.grad[i];
                                     });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw ValidationError("transpose: need rank >= 2");
  std::vector<Index> perm(x.rank());
  std::iota(perm.begin(), perm.end(), Index{0});
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return transpose(x, perm);
}

template <typename Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& parts, Index axis) {
  if (parts.empty()) throw ValidationError("concat: no inputs");
  const Index r = parts[0].rank();
  axis = normalize_axis(axis, r, "concat");
  Shape shape = parts[0].shape();
  shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != r) throw ValidationError("concat: rank mismatch");
    for (Index k = 0; k < r; ++k) {
      if (k != axis && p.dim(k) != shape[k]) {
        throw ValidationError("concat: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                              shape_str(p.shape()));
      }
    }
    shape[axis] += p.dim(axis);
  }
  const AxisSplit s = split_at(shape, axis);
  std::vector<Scalar> out(numel_of(shape));
  Index offset = 0;
  for (const auto& p : parts) {
    const Index len = p.dim(axis) * s.inner;
    const auto pd = p.data();
    for (Index o = 0; o < s.outer; ++o)
      std::copy(pd.begin() + o * len, pd.begin() + (o + 1) * len,
                out.begin() + o * s.n * s.inner + offset);
    offset += len;
  }
  return detail::make_result<Scalar>("concat", shape, std::move(out), parts,
                                     [parts, s, axis](const detail::TensorImpl<Scalar>& o) {
                                       Index offset = 0;
                                       for (const auto& p : parts) {
                                         const Index len = p.dim(axis) * s.inner;
                                         if (p.requires_grad()) {
                                           auto gp = detail::grad_buffer(p);
                                           for (Index a = 0; a < s.outer; ++a)
                                             for (Index j = 0; j < len; ++j)
                                               gp[a * len + j] += o.grad[a * s.n * s.inner + offset + j];
                                         }
                                         offset += len;
                                       }
                                     });
}

template <typename Scalar>
Tensor<Scalar> slice(const Tensor<Scalar>& x, Index axis, Index start, Index end) {
  axis = normalize_axis(axis, x.rank(), "slice");
  const Index n = x.dim(axis);
  if (start < 0 || end > n || start > end) {
    throw ValidationError("slice: range [" + std::to_string(start) + "," + std::to_string(end) +
                          ") invalid for dim " + std::to_string(n));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = end - start;
  const Index len = (end - start) * s.inner;
  const auto xd = x.data();
  std::vector<Scalar> out(s.outer * len);
  for (Index o = 0; o < s.outer; ++o)
    std::copy(xd.begin() + o * n * s.inner + start * s.inner,
              xd.begin() + o * n * s.inner + start * s.inner + len, out.begin() + o * len);
  return detail::make_result<Scalar>("slice", shape, std::move(out), {x},
                                     [x, s, n, start, len](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (Index a = 0; a < s.outer; ++a)
                                         for (Index j = 0; j < len; ++j)
                                           gx[a * n * s.inner + start * s.inner + j] += o.grad[a * len + j];
                                     });
}

template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, const std::vector<Index>& ids) {
  if (table.rank() != 2) throw ValidationError("embedding_lookup: table must be [V,D]");
  const Index V = table.dim(0), D = table.dim(1);
  for (Index id : ids) {
    if (id < 0 || id >= V) {
      throw ValidationError("embedding_lookup: id " + std::to_string(id) + " out of range [0," +
                            std::to_string(V) + ")");
    }
  }
  const auto td = table.data();
  std::vector<Scalar> out(ids.size() * D);
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(td.begin() + ids[i] * D, td.begin() + (ids[i] + 1) * D, out.begin() + i * D);
  return detail::make_result<Scalar>("embedding_lookup", Shape{static_cast<Index>(ids.size()), D},
                                     std::move(out), {table},
                                     [table, ids, D](const detail::TensorImpl<Scalar>& o) {
                                       auto gt = detail::grad_buffer(table);
                                       for (std::size_t i = 0; i < ids.size(); ++i)
                                         for (Index d = 0; d < D; ++d)
                                           gt[ids[i] * D + d] += o.grad[i * D + d];
                                     });
}

template <typename Scalar>
Tensor<Scalar> l2_normalize(const Tensor<Scalar>& x, Index axis, Scalar eps) {
  axis = normalize_axis(axis, x.rank(), "l2_normalize");
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  auto norms = std::make_shared<std::vector<Scalar>>(s.outer * s.inner);
  for (Index o = 0; o < s.outer; ++o)
    for (Index in = 0; in < s.inner; ++in) {
      const Index base = o * s.n * s.inner + in;
      Scalar ss = 0;
      for (Index j = 0; j < s.n; ++j) ss += xd[base + j * s.inner] * xd[base + j * s.inner];
      const Scalar nrm = std::sqrt(ss);
      if (eps <= 0 && !(nrm > 0)) throw ValidationError("l2_normalize: zero-norm slice");
      const Scalar d = std::max(nrm, eps);
      (*norms)[o * s.inner + in] = d;
      for (Index j = 0; j < s.n; ++j) out[base + j * s.inner] = xd[base + j * s.inner] / d;
    }
  return detail::make_result<Scalar>(
      "l2_normalize", x.shape(), std::move(out), {x},
      [x, s, norms, eps](const detail::TensorImpl<Scalar>& o) {
        auto gx = detail::grad_buffer(x);
        const auto xd = x.data();
        for (Index a = 0; a < s.outer; ++a)
          for (Index in = 0; in < s.inner; ++in) {
            const Index base = a * s.n * s.inner + in;
            const Scalar d = (*norms)[a * s.inner + in];
            // Clamped slices are a plain division by eps.
            Scalar raw = 0;
            for (Index j = 0; j < s.n; ++j) raw += xd[base + j * s.inner] * xd[base + j * s.inner];
            const bool clamped = eps > 0 && std::sqrt(raw) < eps;
            Scalar dot = 0;
            if (!clamped)
              for (Index j = 0; j < s.n; ++j) dot += o.grad[base + j * s.inner] * o.data[base + j * s.inner];
            for (Index j = 0; j < s.n; ++j) {
              const Index p = base + j * s.inner;
              gx[p] += (o.grad[p] - o.data[p] * dot) / d;
            }
          }
      });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Scalar total = 0;
  for (Scalar v : x.data()) total += v;
  return detail::make_result<Scalar>("sum", Shape{}, {total}, {x},
                                     [x](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (auto& g : gx) g += o.grad[0];
                                     });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, Index axis, bool keepdim) {
  axis = normalize_axis(axis, x.rank(), "sum");
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xd = x.data();
  std::vector<Scalar> out(s.outer * s.inner, Scalar(0));
  for (Index o = 0; o < s.outer; ++o)
    for (Index j = 0; j < s.n; ++j)
      for (Index in = 0; in < s.inner; ++in)
        out[o * s.inner + in] += xd[(o * s.n + j) * s.inner + in];
  return detail::make_result<Scalar>("sum", drop_axis(x.shape(), axis, keepdim), std::move(out), {x},
                                     [x, s](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (Index a = 0; a < s.outer; ++a)
                                         for (Index j = 0; j < s.n; ++j)
                                           for (Index in = 0; in < s.inner; ++in)
                                             gx[(a * s.n + j) * s.inner + in] += o.grad[a * s.inner + in];
                                     });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.numel() == 0) throw ValidationError("mean: empty tensor");
  return scale(sum(x), Scalar(1) / Scalar(x.numel()));
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, Index axis, bool keepdim) {
  const Index a = normalize_axis(axis, x.rank(), "mean");
  if (x.dim(a) == 0) throw ValidationError("mean: empty axis");
  return scale(sum(x, a, keepdim), Scalar(1) / Scalar(x.dim(a)));
}

template <typename Scalar>
Tensor<Scalar> max(const Tensor<Scalar>& x, Index axis, bool keepdim) {
  axis = normalize_axis(axis, x.rank(), "max");
  const AxisSplit s = split_at(x.shape(), axis);
  if (s.n == 0) throw ValidationError("max: empty axis");
  const auto xd = x.data();
  std::vector<Scalar> out(s.outer * s.inner);
  auto arg = std::make_shared<std::vector<Index>>(s.outer * s.inner);
  for (Index o = 0; o < s.outer; ++o)
    for (Index in = 0; in < s.inner; ++in) {
      Index best = 0;
      for (Index j = 1; j < s.n; ++j)
        if (xd[(o * s.n + j) * s.inner + in] > xd[(o * s.n + best) * s.inner + in]) best = j;
      (*arg)[o * s.inner + in] = best;
      out[o * s.inner + in] = xd[(o * s.n + best) * s.inner + in];
    }
  return detail::make_result<Scalar>("max", drop_axis(x.shape(), axis, keepdim), std::move(out), {x},
                                     [x, s, arg](const detail::TensorImpl<Scalar>& o) {
                                       auto gx = detail::grad_buffer(x);
                                       for (Index a = 0; a < s.outer; ++a)
                                         for (Index in = 0; in < s.inner; ++in)
                                           gx[(a * s.n + (*arg)[a * s.inner + in]) * s.inner + in] +=
                                               o.grad[a * s.inner + in];
                                     });
}

// ---------------------------------------------------------------------------
// Tape traversal

template <typename Scalar>
Tape<Scalar> record_tape(const Tensor<Scalar>& root) {
  using Impl = detail::TensorImpl<Scalar>;
  Tape<Scalar> tape;
  std::unordered_map<const Impl*, int> state;  // 1 = on stack, 2 = emitted
  struct Frame {
    std::shared_ptr<Impl> impl;
    std::size_t next = 0;
  };
  std::vector<Frame> stack;
  if (root.producer()) stack.push_back({root.impl_ptr()});
  while (!stack.empty()) {
    Frame& f = stack.back();
    const auto& node = *f.impl->producer;
    if (f.next == 0) state[f.impl.get()] = 1;
    if (f.next < node.inputs.size()) {
      const auto& in = node.inputs[f.next++];
      if (in.producer() && !state.count(&in.impl())) stack.push_back({in.impl_ptr()});
      continue;
    }
    state[f.impl.get()] = 2;
    typename Tape<Scalar>::Entry e;
    e.op = node.op;
    for (const auto& in : node.inputs) e.inputs.push_back(in.id());
    e.output = f.impl->id;
    tape.entries.push_back(std::move(e));
    tape.outputs.push_back(f.impl);
    stack.pop_back();
  }
  return tape;
}

template <typename Scalar>
GradMap<Scalar> backward(const Tensor<Scalar>& loss) {
  if (loss.numel() != 1) {
    throw ValidationError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  GradMap<Scalar> grads;
  if (!loss.requires_grad()) return grads;
  if (!loss.producer()) {
    auto g = detail::grad_buffer(loss);
    g[0] += Scalar(1);
    grads[loss.id()] = loss.impl().grad;
    return grads;
  }
  Tape<Scalar> tape = record_tape(loss);
  std::vector<Tensor<Scalar>> leaves;
  std::unordered_map<std::uint64_t, bool> leaf_seen;
  loss.impl().grad.assign(1, Scalar(1));
  for (std::size_t i = tape.outputs.size(); i-- > 0;) {
    auto& out = *tape.outputs[i];
    if (out.grad.empty()) continue;  // no path to the loss through this node
    out.producer->backward(out);
    for (const auto& in : out.producer->inputs)
      if (in.is_leaf() && in.requires_grad() && !leaf_seen[in.id()]) {
        leaf_seen[in.id()] = true;
        leaves.push_back(in);
      }
    out.grad.clear();
    out.grad.shrink_to_fit();
  }
  for (const auto& leaf : leaves)
    if (leaf.has_grad()) grads[leaf.id()] = std::vector<Scalar>(leaf.grad().begin(), leaf.grad().end());
  return grads;
}

#define VLOSS_INSTANTIATE(S)                                                                      \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, Index, Index);                    \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> div(const Tensor<S>&, const Tensor<S>&);                                     \
  template Tensor<S> scale(const Tensor<S>&, S);                                                  \
  template Tensor<S> add_scalar(const Tensor<S>&, S);                                             \
  template Tensor<S> relu(const Tensor<S>&);                                                      \
  template Tensor<S> gelu(const Tensor<S>&);                                                      \
  template Tensor<S> sigmoid(const Tensor<S>&);                                                   \
  template Tensor<S> exp(const Tensor<S>&);                                                       \
  template Tensor<S> log(const Tensor<S>&, S);                                                    \
  template Tensor<S> softplus(const Tensor<S>&);                                                  \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                            \
  template Tensor<S> log_softmax(const Tensor<S>&, Index);                                        \
  template Tensor<S> layer_norm(const Tensor<S>&, S);                                             \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);         \
  template Tensor<S> mean_pool_spatial(const Tensor<S>&);                                         \
  template Tensor<S> bilinear_upsample(const Tensor<S>&, Index);                                  \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                            \
  template Tensor<S> transpose(const Tensor<S>&, const std::vector<Index>&);                      \
  template Tensor<S> transpose(const Tensor<S>&);                                                 \
  template Tensor<S> concat(const std::vector<Tensor<S>>&, Index);                                \
  template Tensor<S> slice(const Tensor<S>&, Index, Index, Index);                                \
  template Tensor<S> embedding_lookup(const Tensor<S>&, const std::vector<Index>&);               \
  template Tensor<S> l2_normalize(const Tensor<S>&, Index, S);                                    \
  template Tensor<S> sum(const Tensor<S>&);                                                       \
  template Tensor<S> sum(const Tensor<S>&, Index, bool);                                          \
  template Tensor<S> mean(const Tensor<S>&);                                                      \
  template Tensor<S> mean(const Tensor<S>&, Index, bool);                                         \
  template Tensor<S> max(const Tensor<S>&, Index, bool);                                          \
  template Tape<S> record_tape(const Tensor<S>&);                                                 \
  template GradMap<S> backward(const Tensor<S>&);

VLOSS_INSTANTIATE(float)
VLOSS_INSTANTIATE(double)

#undef VLOSS_INSTANTIATE

}  // namespace vloss
