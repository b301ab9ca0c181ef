#ifndef MTSEG_OPS_HPP
#define MTSEG_OPS_HPP

#include <Eigen/Dense>

#include <cmath>
#include <utility>
#include <vector>

#include "mtseg/tape.hpp"

// Differentiable tensor operations, written as free functions over tape vars.
// Inner products and reductions accumulate in 64-bit arithmetic regardless of
// the storage scalar, so float-mode results stay close to the double path.

namespace mtseg {

namespace detail {

using AccMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using AccVector = Eigen::Matrix<double, Eigen::Dynamic, 1>;

template <typename Scalar>
AccMatrix as_matrix(const Tensor<Scalar>& t, Index rows, Index cols) {
  return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(t.data.data(), rows,
                                                                                                  cols)
      .template cast<double>();
}

template <typename Scalar>
AccMatrix grad_as_matrix(const typename Tensor<Scalar>::Storage& g, Index rows, Index cols) {
  return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(g.data(), rows, cols)
      .template cast<double>();
}

// Patch matrix for stride-1 cross-correlation: row r = (ci,ki,kj), col n =
// output position (oi,oj) in row-major order; out-of-image taps are zero.
template <typename Scalar>
AccMatrix im2col(const Tensor<Scalar>& x, Index kh, Index kw, Index pad, Index h_out, Index w_out) {
  const Index c_in = x.shape[0], h = x.shape[1], w = x.shape[2];
  AccMatrix patches = AccMatrix::Zero(c_in * kh * kw, h_out * w_out);
  for (Index ci = 0; ci < c_in; ++ci) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        const Index r = (ci * kh + ki) * kw + kj;
        double* prow = patches.data() + r * patches.cols();
        for (Index oi = 0; oi < h_out; ++oi) {
          const Index ii = oi + ki - pad;
          if (ii < 0 || ii >= h) continue;
          const Index oj_lo = std::max<Index>(0, pad - kj);
          const Index oj_hi = std::min<Index>(w_out - 1, w - 1 - kj + pad);
          const Scalar* src = x.data.data() + (ci * h + ii) * w + (oj_lo + kj - pad);
          double* dst = prow + oi * w_out + oj_lo;
          for (Index oj = oj_lo; oj <= oj_hi; ++oj) *dst++ = static_cast<double>(*src++);
        }
      }
    }
  }
  return patches;
}

template <typename Scalar>
void col2im_add(const AccMatrix& cols, Index c_in, Index h, Index w, Index kh, Index kw, Index pad, Index h_out,
                Index w_out, typename Tensor<Scalar>::Storage& dst) {
  AccVector acc = AccVector::Zero(c_in * h * w);
  for (Index ci = 0; ci < c_in; ++ci) {
    for (Index ki = 0; ki < kh; ++ki) {
      for (Index kj = 0; kj < kw; ++kj) {
        const Index r = (ci * kh + ki) * kw + kj;
        const double* prow = cols.data() + r * cols.cols();
        for (Index oi = 0; oi < h_out; ++oi) {
          const Index ii = oi + ki - pad;
          if (ii < 0 || ii >= h) continue;
          const Index oj_lo = std::max<Index>(0, pad - kj);
          const Index oj_hi = std::min<Index>(w_out - 1, w - 1 - kj + pad);
          double* out = acc.data() + (ci * h + ii) * w + (oj_lo + kj - pad);
          const double* src = prow + oi * w_out + oj_lo;
          for (Index oj = oj_lo; oj <= oj_hi; ++oj) *out++ += *src++;
        }
      }
    }
  }
  dst += acc.template cast<Scalar>().array();
}

template <typename Scalar>
void add_grad_from_acc(Tape<Scalar>& tape, int id, const AccVector& acc) {
  typename Tensor<Scalar>::Storage g = acc.template cast<Scalar>().array();
  tape.accumulate_grad(id, g);
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  require(a.shape == b.shape,
          std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "add");
  Tensor<Scalar> out(av.shape, av.data + bv.data);
  out.requires_grad = av.requires_grad || bv.requires_grad;
  return t.emit(std::move(out), "add", {a.id, b.id}, [a = a.id, b = b.id](Tape<Scalar>& tp, int out_id) {
    const auto& g = tp.grad_at(out_id);
    if (tp.wants_grad(a)) tp.accumulate_grad(a, g);
    if (tp.wants_grad(b)) tp.accumulate_grad(b, g);
  });
}

template <typename Scalar>
Var<Scalar> sub(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "sub");
  Tensor<Scalar> out(av.shape, av.data - bv.data);
  out.requires_grad = av.requires_grad || bv.requires_grad;
  return t.emit(std::move(out), "sub", {a.id, b.id}, [a = a.id, b = b.id](Tape<Scalar>& tp, int out_id) {
    const auto& g = tp.grad_at(out_id);
    if (tp.wants_grad(a)) tp.accumulate_grad(a, g);
    if (tp.wants_grad(b)) tp.accumulate_grad(b, typename Tensor<Scalar>::Storage(-g));
  });
}

template <typename Scalar>
Var<Scalar> mul(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require_same_shape(av, bv, "mul");
  Tensor<Scalar> out(av.shape, av.data * bv.data);
  out.requires_grad = av.requires_grad || bv.requires_grad;
  return t.emit(std::move(out), "mul", {a.id, b.id}, [a = a.id, b = b.id](Tape<Scalar>& tp, int out_id) {
    const auto& g = tp.grad_at(out_id);
    if (tp.wants_grad(a)) tp.accumulate_grad(a, typename Tensor<Scalar>::Storage(g * tp.value_at(b).data));
    if (tp.wants_grad(b)) tp.accumulate_grad(b, typename Tensor<Scalar>::Storage(g * tp.value_at(a).data));
  });
}

template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, double c) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  Tensor<Scalar> out(av.shape, av.data * Scalar(c));
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "scale", {a.id}, [a = a.id, c](Tape<Scalar>& tp, int out_id) {
    if (tp.wants_grad(a)) tp.accumulate_grad(a, typename Tensor<Scalar>::Storage(tp.grad_at(out_id) * Scalar(c)));
  });
}

template <typename Scalar>
Var<Scalar> add_scalar(Var<Scalar> a, double c) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  Tensor<Scalar> out(av.shape, av.data + Scalar(c));
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "add_scalar", {a.id}, [a = a.id](Tape<Scalar>& tp, int out_id) {
    if (tp.wants_grad(a)) tp.accumulate_grad(a, tp.grad_at(out_id));
  });
}

template <typename Scalar>
Var<Scalar> exp(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  Tensor<Scalar> out(av.shape, av.data.exp());
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "exp", {a.id}, [a = a.id](Tape<Scalar>& tp, int out_id) {
    if (tp.wants_grad(a))
      tp.accumulate_grad(a, typename Tensor<Scalar>::Storage(tp.grad_at(out_id) * tp.value_at(out_id).data));
  });
}

template <typename Scalar>
Var<Scalar> abs(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  Tensor<Scalar> out(av.shape, av.data.abs());
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "abs", {a.id}, [a = a.id](Tape<Scalar>& tp, int out_id) {
    if (!tp.wants_grad(a)) return;
    const auto& x = tp.value_at(a).data;
    typename Tensor<Scalar>::Storage sign = x.unaryExpr([](Scalar v) {
      if (v > Scalar(0)) return Scalar(1);
      if (v < Scalar(0)) return Scalar(-1);
      return Scalar(0);  // subgradient at the kink
    });
    tp.accumulate_grad(a, typename Tensor<Scalar>::Storage(tp.grad_at(out_id) * sign));
  });
}

template <typename Scalar>
Var<Scalar> relu(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  Tensor<Scalar> out(av.shape, av.data.max(Scalar(0)));
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "relu", {a.id}, [a = a.id](Tape<Scalar>& tp, int out_id) {
    if (!tp.wants_grad(a)) return;
    using St = typename Tensor<Scalar>::Storage;
    const auto& x = tp.value_at(a).data;
    St g = (x > Scalar(0)).select(tp.grad_at(out_id), St::Zero(x.size()));
    tp.accumulate_grad(a, g);
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  Tensor<Scalar> out(av.shape, av.data.unaryExpr([](Scalar v) {
    if (v >= Scalar(0)) {
      const Scalar e = std::exp(-v);
      return Scalar(1) / (Scalar(1) + e);
    }
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  }));
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "sigmoid", {a.id}, [a = a.id](Tape<Scalar>& tp, int out_id) {
    if (!tp.wants_grad(a)) return;
    const auto& y = tp.value_at(out_id).data;
    tp.accumulate_grad(a, typename Tensor<Scalar>::Storage(tp.grad_at(out_id) * y * (Scalar(1) - y)));
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> reduce_sum(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  const double s = av.data.template cast<double>().sum();
  Tensor<Scalar> out = Tensor<Scalar>::scalar(Scalar(s));
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "reduce_sum", {a.id}, [a = a.id](Tape<Scalar>& tp, int out_id) {
    if (!tp.wants_grad(a)) return;
    using St = typename Tensor<Scalar>::Storage;
    const Scalar g = tp.grad_at(out_id)[0];
    tp.accumulate_grad(a, St::Constant(tp.value_at(a).size(), g));
  });
}

template <typename Scalar>
Var<Scalar> reduce_mean(Var<Scalar> a) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  detail::require(av.size() > 0, "reduce_mean: empty tensor");
  const double n = static_cast<double>(av.size());
  const double s = av.data.template cast<double>().sum() / n;
  Tensor<Scalar> out = Tensor<Scalar>::scalar(Scalar(s));
  out.requires_grad = av.requires_grad;
  return t.emit(std::move(out), "reduce_mean", {a.id}, [a = a.id, n](Tape<Scalar>& tp, int out_id) {
    if (!tp.wants_grad(a)) return;
    using St = typename Tensor<Scalar>::Storage;
    const Scalar g = Scalar(static_cast<double>(tp.grad_at(out_id)[0]) / n);
    tp.accumulate_grad(a, St::Constant(tp.value_at(a).size(), g));
  });
}

// ---------------------------------------------------------------------------
// structural ops
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> concat_channels(Var<Scalar> a, Var<Scalar> b) {
  Tape<Scalar>& t = *a.tape;
  const auto& av = t.value(a);
  const auto& bv = t.value(b);
  detail::require(av.rank() == 3 && bv.rank() == 3, "concat_channels: inputs must be [C,H,W]");
  detail::require(av.shape[1] == bv.shape[1],
                  "concat_channels: height mismatch " + std::to_string(av.shape[1]) + " vs " +
                      std::to_string(bv.shape[1]));
  detail::require(av.shape[2] == bv.shape[2],
                  "concat_channels: width mismatch " + std::to_string(av.shape[2]) + " vs " +
                      std::to_string(bv.shape[2]));
  Tensor<Scalar> out({av.shape[0] + bv.shape[0], av.shape[1], av.shape[2]});
  out.data.head(av.size()) = av.data;
  out.data.tail(bv.size()) = bv.data;
  out.requires_grad = av.requires_grad || bv.requires_grad;
  const Index na = av.size();
  const Index nb = bv.size();
  return t.emit(std::move(out), "concat_channels", {a.id, b.id},
                [a = a.id, b = b.id, na, nb](Tape<Scalar>& tp, int out_id) {
                  const auto& g = tp.grad_at(out_id);
                  if (tp.wants_grad(a)) tp.accumulate_grad(a, typename Tensor<Scalar>::Storage(g.head(na)));
                  if (tp.wants_grad(b)) tp.accumulate_grad(b, typename Tensor<Scalar>::Storage(g.tail(nb)));
                });
}

// ---------------------------------------------------------------------------
// conv2d: stride-1 cross-correlation, odd kernel, zero padding
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> conv2d(Var<Scalar> input, Var<Scalar> kernel, Var<Scalar> bias, Index padding) {
  Tape<Scalar>& t = *input.tape;
  const auto& x = t.value(input);
  const auto& k = t.value(kernel);
  const auto& b = t.value(bias);
  detail::require(x.rank() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape));
  detail::require(k.rank() == 4, "conv2d: kernel must be [Cout,Cin,kH,kW], got " + shape_str(k.shape));
  detail::require(b.rank() == 1, "conv2d: bias must be [Cout], got " + shape_str(b.shape));
  const Index c_in = x.shape[0], h = x.shape[1], w = x.shape[2];
  const Index c_out = k.shape[0], kh = k.shape[2], kw = k.shape[3];
  detail::require(k.shape[1] == c_in, "conv2d: kernel input channels (" + std::to_string(k.shape[1]) +
                                          ") != input channels (" + std::to_string(c_in) + ")");
  detail::require(b.shape[0] == c_out, "conv2d: bias length (" + std::to_string(b.shape[0]) +
                                           ") != output channels (" + std::to_string(c_out) + ")");
  detail::require(kh % 2 == 1 && kw % 2 == 1,
                  "conv2d: kernel extents must be odd, got " + std::to_string(kh) + "x" + std::to_string(kw));
  detail::require(padding >= 0, "conv2d: padding must be >= 0");
  const Index h_out = h + 2 * padding - kh + 1;
  const Index w_out = w + 2 * padding - kw + 1;
  detail::require(h_out >= 1 && w_out >= 1, "conv2d: output would be empty for input " + shape_str(x.shape) +
                                                " and kernel " + shape_str(k.shape));

  detail::AccMatrix patches = detail::im2col(x, kh, kw, padding, h_out, w_out);
  detail::AccMatrix kmat = detail::as_matrix(k, c_out, c_in * kh * kw);
  detail::AccMatrix y = kmat * patches;
  for (Index co = 0; co < c_out; ++co) y.row(co).array() += static_cast<double>(b.data[co]);

  Tensor<Scalar> out({c_out, h_out, w_out});
  out.data = Eigen::Map<const detail::AccVector>(y.data(), y.size()).template cast<Scalar>();
  out.requires_grad = x.requires_grad || k.requires_grad || b.requires_grad;

  const int xi = input.id, ki = kernel.id, bi = bias.id;
  return t.emit(std::move(out), "conv2d", {xi, ki, bi},
                [xi, ki, bi, c_in, h, w, c_out, kh, kw, padding, h_out, w_out](Tape<Scalar>& tp, int out_id) {
                  const auto& gout = tp.grad_at(out_id);
                  detail::AccMatrix dy = detail::grad_as_matrix<Scalar>(gout, c_out, h_out * w_out);
                  if (tp.wants_grad(bi)) {
                    detail::AccVector db = dy.rowwise().sum();
                    detail::add_grad_from_acc(tp, bi, db);
                  }
                  const bool need_dk = tp.wants_grad(ki);
                  const bool need_dx = tp.wants_grad(xi);
                  if (!need_dk && !need_dx) return;
                  if (need_dk) {
                    detail::AccMatrix patches = detail::im2col(tp.value_at(xi), kh, kw, padding, h_out, w_out);
                    detail::AccMatrix dk = dy * patches.transpose();
                    detail::add_grad_from_acc(tp, ki, detail::AccVector(Eigen::Map<detail::AccVector>(dk.data(), dk.size())));
                  }
                  if (need_dx) {
                    detail::AccMatrix kmat = detail::as_matrix(tp.value_at(ki), c_out, c_in * kh * kw);
                    detail::AccMatrix dcols = kmat.transpose() * dy;
                    detail::col2im_add<Scalar>(dcols, c_in, h, w, kh, kw, padding, h_out, w_out, tp.grad_buffer(xi));
                  }
                });
}

// ---------------------------------------------------------------------------
// max_pool2d: non-overlapping k x k windows; ties go to the first maximum in
// row-major window order
// ---------------------------------------------------------------------------

template <typename Scalar>
std::pair<Tensor<Scalar>, std::vector<Index>> max_pool2d_with_indices(const Tensor<Scalar>& x, Index k) {
  detail::require(x.rank() == 3, "max_pool2d: input must be [C,H,W], got " + shape_str(x.shape));
  detail::require(k >= 1, "max_pool2d: window must be >= 1");
  const Index c = x.shape[0], h = x.shape[1], w = x.shape[2];
  detail::require(h % k == 0, "max_pool2d: height " + std::to_string(h) + " not divisible by " + std::to_string(k));
  detail::require(w % k == 0, "max_pool2d: width " + std::to_string(w) + " not divisible by " + std::to_string(k));
  const Index ho = h / k, wo = w / k;
  Tensor<Scalar> out({c, ho, wo});
  std::vector<Index> argmax(static_cast<std::size_t>(c * ho * wo));
  for (Index ci = 0; ci < c; ++ci) {
    for (Index oi = 0; oi < ho; ++oi) {
      for (Index oj = 0; oj < wo; ++oj) {
        Index best_idx = (ci * h + oi * k) * w + oj * k;
        Scalar best = x.data[best_idx];
        for (Index di = 0; di < k; ++di) {
          for (Index dj = 0; dj < k; ++dj) {
            const Index idx = (ci * h + oi * k + di) * w + oj * k + dj;
            if (x.data[idx] > best) {
              best = x.data[idx];
              best_idx = idx;
            }
          }
        }
        out.data[(ci * ho + oi) * wo + oj] = best;
        argmax[static_cast<std::size_t>((ci * ho + oi) * wo + oj)] = best_idx;
      }
    }
  }
  return {std::move(out), std::move(argmax)};
}

template <typename Scalar>
Var<Scalar> max_pool2d(Var<Scalar> input, Index k) {
  Tape<Scalar>& t = *input.tape;
  const auto& x = t.value(input);
  auto [out, argmax] = max_pool2d_with_indices(x, k);
  out.requires_grad = x.requires_grad;
  return t.emit(std::move(out), "max_pool2d", {input.id},
                [a = input.id, argmax = std::move(argmax)](Tape<Scalar>& tp, int out_id) {
                  if (!tp.wants_grad(a)) return;
                  const auto& g = tp.grad_at(out_id);
                  auto& gx = tp.grad_buffer(a);
                  for (Index n = 0; n < g.size(); ++n) gx[argmax[static_cast<std::size_t>(n)]] += g[n];
                });
}

// ---------------------------------------------------------------------------
// transposed_conv2d: stride-2 up-sampling with a 2x2 kernel (adjoint of a
// stride-2 convolution); doubles both spatial extents, no bias
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> transposed_conv2d(Var<Scalar> input, Var<Scalar> kernel) {
  Tape<Scalar>& t = *input.tape;
  const auto& x = t.value(input);
  const auto& k = t.value(kernel);
  detail::require(x.rank() == 3, "transposed_conv2d: input must be [C,H,W], got " + shape_str(x.shape));
  detail::require(k.rank() == 4, "transposed_conv2d: kernel must be [Cin,Cout,2,2], got " + shape_str(k.shape));
  const Index c_in = x.shape[0], h = x.shape[1], w = x.shape[2];
  detail::require(k.shape[0] == c_in, "transposed_conv2d: kernel input channels (" + std::to_string(k.shape[0]) +
                                          ") != input channels (" + std::to_string(c_in) + ")");
  detail::require(k.shape[2] == 2 && k.shape[3] == 2, "transposed_conv2d: kernel must be 2x2");
  const Index c_out = k.shape[1];
  const Index ho = 2 * h, wo = 2 * w;

  detail::AccVector acc = detail::AccVector::Zero(c_out * ho * wo);
  for (Index ci = 0; ci < c_in; ++ci) {
    for (Index co = 0; co < c_out; ++co) {
      const double k00 = k.data[((ci * c_out + co) * 2 + 0) * 2 + 0];
      const double k01 = k.data[((ci * c_out + co) * 2 + 0) * 2 + 1];
      const double k10 = k.data[((ci * c_out + co) * 2 + 1) * 2 + 0];
      const double k11 = k.data[((ci * c_out + co) * 2 + 1) * 2 + 1];
      for (Index i = 0; i < h; ++i) {
        const Scalar* xr = x.data.data() + (ci * h + i) * w;
        double* o0 = acc.data() + (co * ho + 2 * i) * wo;
        double* o1 = acc.data() + (co * ho + 2 * i + 1) * wo;
        for (Index j = 0; j < w; ++j) {
          const double v = static_cast<double>(xr[j]);
          o0[2 * j] += v * k00;
          o0[2 * j + 1] += v * k01;
          o1[2 * j] += v * k10;
          o1[2 * j + 1] += v * k11;
        }
      }
    }
  }
  Tensor<Scalar> out({c_out, ho, wo});
  out.data = acc.template cast<Scalar>();
  out.requires_grad = x.requires_grad || k.requires_grad;

  const int xi = input.id, ki = kernel.id;
  return t.emit(std::move(out), "transposed_conv2d", {xi, ki},
                [xi, ki, c_in, c_out, h, w, ho, wo](Tape<Scalar>& tp, int out_id) {
                  const auto& g = tp.grad_at(out_id);
                  const auto& x = tp.value_at(xi);
                  const auto& k = tp.value_at(ki);
                  const bool need_dx = tp.wants_grad(xi);
                  const bool need_dk = tp.wants_grad(ki);
                  if (!need_dx && !need_dk) return;
                  detail::AccVector dx = detail::AccVector::Zero(c_in * h * w);
                  detail::AccVector dk = detail::AccVector::Zero(c_in * c_out * 4);
                  for (Index ci = 0; ci < c_in; ++ci) {
                    for (Index co = 0; co < c_out; ++co) {
                      const Index kbase = (ci * c_out + co) * 4;
                      const double k00 = k.data[kbase + 0], k01 = k.data[kbase + 1];
                      const double k10 = k.data[kbase + 2], k11 = k.data[kbase + 3];
                      double s00 = 0, s01 = 0, s10 = 0, s11 = 0;
                      for (Index i = 0; i < h; ++i) {
                        const Scalar* xr = x.data.data() + (ci * h + i) * w;
                        const Scalar* g0 = g.data() + (co * ho + 2 * i) * wo;
                        const Scalar* g1 = g.data() + (co * ho + 2 * i + 1) * wo;
                        double* dxr = dx.data() + (ci * h + i) * w;
                        for (Index j = 0; j < w; ++j) {
                          const double g00 = g0[2 * j], g01 = g0[2 * j + 1];
                          const double g10 = g1[2 * j], g11 = g1[2 * j + 1];
                          dxr[j] += k00 * g00 + k01 * g01 + k10 * g10 + k11 * g11;
                          const double v = static_cast<double>(xr[j]);
                          s00 += v * g00;
                          s01 += v * g01;
                          s10 += v * g10;
                          s11 += v * g11;
                        }
                      }
                      dk[kbase + 0] += s00;
                      dk[kbase + 1] += s01;
                      dk[kbase + 2] += s10;
                      dk[kbase + 3] += s11;
                    }
                  }
                  if (need_dx) detail::add_grad_from_acc(tp, xi, dx);
                  if (need_dk) detail::add_grad_from_acc(tp, ki, dk);
                });
}

// ---------------------------------------------------------------------------
// linear: y = W x + b with the input flattened to a vector
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> linear(Var<Scalar> input, Var<Scalar> weight, Var<Scalar> bias) {
  Tape<Scalar>& t = *input.tape;
  const auto& x = t.value(input);
  const auto& wv = t.value(weight);
  const auto& b = t.value(bias);
  detail::require(wv.rank() == 2, "linear: weight must be [out,in], got " + shape_str(wv.shape));
  detail::require(b.rank() == 1, "linear: bias must be [out], got " + shape_str(b.shape));
  const Index fan_in = wv.shape[1], fan_out = wv.shape[0];
  detail::require(x.size() == fan_in, "linear: input size (" + std::to_string(x.size()) + ") != weight fan_in (" +
                                          std::to_string(fan_in) + ")");
  detail::require(b.shape[0] == fan_out, "linear: bias length (" + std::to_string(b.shape[0]) + ") != fan_out (" +
                                             std::to_string(fan_out) + ")");
  detail::AccMatrix wm = detail::as_matrix(wv, fan_out, fan_in);
  detail::AccVector xv = x.data.template cast<double>().matrix();
  detail::AccVector y = wm * xv + b.data.template cast<double>().matrix();
  Tensor<Scalar> out({fan_out});
  out.data = y.template cast<Scalar>().array();
  out.requires_grad = x.requires_grad || wv.requires_grad || b.requires_grad;
  const int xi = input.id, wi = weight.id, bi = bias.id;
  return t.emit(std::move(out), "linear", {xi, wi, bi},
                [xi, wi, bi, fan_in, fan_out](Tape<Scalar>& tp, int out_id) {
                  detail::AccVector dy = tp.grad_at(out_id).template cast<double>().matrix();
                  if (tp.wants_grad(bi)) detail::add_grad_from_acc(tp, bi, dy);
                  if (tp.wants_grad(wi)) {
                    detail::AccVector xv = tp.value_at(xi).data.template cast<double>().matrix();
                    detail::AccMatrix dw = dy * xv.transpose();
                    detail::add_grad_from_acc(tp, wi,
                                              detail::AccVector(Eigen::Map<detail::AccVector>(dw.data(), dw.size())));
                  }
                  if (tp.wants_grad(xi)) {
                    detail::AccMatrix wm = detail::as_matrix(tp.value_at(wi), fan_out, fan_in);
                    detail::AccVector dx = wm.transpose() * dy;
                    detail::add_grad_from_acc(tp, xi, dx);
                  }
                });
}

// ---------------------------------------------------------------------------
// binary cross-entropy of probabilities against a {0,1} mask, mean over all
// elements; probabilities are clamped to [eps, 1-eps] with eps = 1e-7
// ---------------------------------------------------------------------------

inline constexpr double kBceEps = 1e-7;

template <typename Scalar>
Var<Scalar> binary_cross_entropy(Var<Scalar> prob, Var<Scalar> mask) {
  Tape<Scalar>& t = *prob.tape;
  const auto& p = t.value(prob);
  const auto& m = t.value(mask);
  detail::require_same_shape(p, m, "binary_cross_entropy");
  detail::require(p.size() > 0, "binary_cross_entropy: empty input");
  for (Index i = 0; i < m.size(); ++i)
    detail::require(m.data[i] == Scalar(0) || m.data[i] == Scalar(1),
                    "binary_cross_entropy: mask element " + std::to_string(i) + " is not binary");
  const double n = static_cast<double>(p.size());
  double sum = 0.0;
  for (Index i = 0; i < p.size(); ++i) {
    const double pc = std::min(1.0 - kBceEps, std::max(kBceEps, static_cast<double>(p.data[i])));
    const double mi = static_cast<double>(m.data[i]);
    sum -= mi * std::log(pc) + (1.0 - mi) * std::log(1.0 - pc);
  }
  Tensor<Scalar> out = Tensor<Scalar>::scalar(Scalar(sum / n));
  out.requires_grad = p.requires_grad;
  const int pi = prob.id, mi_id = mask.id;
  return t.emit(std::move(out), "binary_cross_entropy", {pi, mi_id}, [pi, mi_id, n](Tape<Scalar>& tp, int out_id) {
    if (!tp.wants_grad(pi)) return;
    const double g = static_cast<double>(tp.grad_at(out_id)[0]);
    const auto& p = tp.value_at(pi).data;
    const auto& m = tp.value_at(mi_id).data;
    auto& gp = tp.grad_buffer(pi);
    for (Index i = 0; i < p.size(); ++i) {
      const double pv = static_cast<double>(p[i]);
      if (pv < kBceEps || pv > 1.0 - kBceEps) continue;  // clamp region: flat
      const double mv = static_cast<double>(m[i]);
      gp[i] += Scalar(g * (-mv / pv + (1.0 - mv) / (1.0 - pv)) / n);
    }
  });
}

}  // namespace mtseg

#endif  // MTSEG_OPS_HPP
