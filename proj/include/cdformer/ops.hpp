#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cdformer/tensor.hpp"

namespace cdformer {

namespace detail {

template <typename Scalar, typename Expr>
void accumulate(const Tensor<Scalar>& t, const Expr& contribution) {
  if (t.requires_grad()) t.node()->grad_buffer() += contribution;
}

inline void require_rank(const char* op, const Shape& shape, std::size_t rank) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         " input, got " + shape_string(shape));
  }
}

inline DimensionError mismatch(const char* op, const Shape& a, const Shape& b) {
  return DimensionError(std::string(op) + ": incompatible shapes " + shape_string(a) + " and " +
                        shape_string(b));
}

enum class Broadcast { same, channel_over_time };

// Only [B x C x L] (op) [B x C] is broadcast; the second operand is repeated
// along the trailing time axis.
inline Broadcast broadcast_kind(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return Broadcast::same;
  if (a.size() == 3 && b.size() == 2 && a[0] == b[0] && a[1] == b[1]) {
    return Broadcast::channel_over_time;
  }
  throw mismatch(op, a, b);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Binary elementwise

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (detail::broadcast_kind("add", a.shape(), b.shape()) == detail::Broadcast::same) {
    return make_op<Scalar>("add", a.shape(), a.value() + b.value(), {a, b},
                           [a, b](const Vec<Scalar>& g) {
                             detail::accumulate(a, g);
                             detail::accumulate(b, g);
                           });
  }
  const Index rows = b.size(), len = a.dim(2);
  Vec<Scalar> out(a.size());
  MatMap<Scalar>(out.data(), rows, len) =
      ConstMatMap<Scalar>(a.value().data(), rows, len).colwise() + b.value();
  return make_op<Scalar>("add", a.shape(), std::move(out), {a, b},
                         [a, b, rows, len](const Vec<Scalar>& g) {
                           detail::accumulate(a, g);
                           detail::accumulate(b, ConstMatMap<Scalar>(g.data(), rows, len).rowwise().sum());
                         });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (detail::broadcast_kind("sub", a.shape(), b.shape()) == detail::Broadcast::same) {
    return make_op<Scalar>("sub", a.shape(), a.value() - b.value(), {a, b},
                           [a, b](const Vec<Scalar>& g) {
                             detail::accumulate(a, g);
                             detail::accumulate(b, -g);
                           });
  }
  const Index rows = b.size(), len = a.dim(2);
  Vec<Scalar> out(a.size());
  MatMap<Scalar>(out.data(), rows, len) =
      ConstMatMap<Scalar>(a.value().data(), rows, len).colwise() - b.value();
  return make_op<Scalar>("sub", a.shape(), std::move(out), {a, b},
                         [a, b, rows, len](const Vec<Scalar>& g) {
                           detail::accumulate(a, g);
                           detail::accumulate(b, -ConstMatMap<Scalar>(g.data(), rows, len).rowwise().sum());
                         });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (detail::broadcast_kind("mul", a.shape(), b.shape()) == detail::Broadcast::same) {
    return make_op<Scalar>("mul", a.shape(), a.value().cwiseProduct(b.value()), {a, b},
                           [a, b](const Vec<Scalar>& g) {
                             if (a.requires_grad()) detail::accumulate(a, g.cwiseProduct(b.value()));
                             if (b.requires_grad()) detail::accumulate(b, g.cwiseProduct(a.value()));
                           });
  }
  const Index rows = b.size(), len = a.dim(2);
  Vec<Scalar> out(a.size());
  MatMap<Scalar>(out.data(), rows, len) =
      ConstMatMap<Scalar>(a.value().data(), rows, len).array().colwise() * b.value().array();
  return make_op<Scalar>(
      "mul", a.shape(), std::move(out), {a, b}, [a, b, rows, len](const Vec<Scalar>& g) {
        ConstMatMap<Scalar> gm(g.data(), rows, len);
        if (a.requires_grad()) {
          Vec<Scalar> ga(g.size());
          MatMap<Scalar>(ga.data(), rows, len) = gm.array().colwise() * b.value().array();
          detail::accumulate(a, ga);
        }
        if (b.requires_grad()) {
          ConstMatMap<Scalar> am(a.value().data(), rows, len);
          detail::accumulate(b, gm.cwiseProduct(am).rowwise().sum());
        }
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  return make_op<Scalar>("scale", x.shape(), x.value() * factor, {x},
                         [x, factor](const Vec<Scalar>& g) { detail::accumulate(x, g * factor); });
}

template <typename Scalar>
Tensor<Scalar> add_scalar(const Tensor<Scalar>& x, Scalar offset) {
  return make_op<Scalar>("add_scalar", x.shape(), (x.value().array() + offset).matrix(), {x},
                         [x](const Vec<Scalar>& g) { detail::accumulate(x, g); });
}

// ---------------------------------------------------------------------------
// Unary elementwise

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return make_op<Scalar>("relu", x.shape(), x.value().cwiseMax(Scalar(0)), {x},
                         [x](const Vec<Scalar>& g) {
                           detail::accumulate(
                               x, (x.value().array() > Scalar(0)).select(g.array(), Scalar(0)).matrix());
                         });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  Vec<Scalar> y = (Scalar(1) / (Scalar(1) + (-x.value().array()).exp())).matrix();
  Vec<Scalar> saved = y;
  return make_op<Scalar>("sigmoid", x.shape(), std::move(y), {x},
                         [x, saved](const Vec<Scalar>& g) {
                           detail::accumulate(
                               x, (g.array() * saved.array() * (Scalar(1) - saved.array())).matrix());
                         });
}

template <typename Scalar>
Vec<Scalar> sign_values(const Vec<Scalar>& v) {
  return ((v.array() > Scalar(0)).template cast<Scalar>() - (v.array() < Scalar(0)).template cast<Scalar>())
      .matrix();
}

template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& x) {
  return make_op<Scalar>("abs", x.shape(), x.value().cwiseAbs(), {x}, [x](const Vec<Scalar>& g) {
    detail::accumulate(x, g.cwiseProduct(sign_values(x.value())));
  });
}

/// sign(x) with sign(0) = 0. Its gradient is defined as zero everywhere.
template <typename Scalar>
Tensor<Scalar> sign(const Tensor<Scalar>& x) {
  return make_op<Scalar>("sign", x.shape(), sign_values(x.value()), {x}, [](const Vec<Scalar>&) {});
}

/// max(x, floor) elementwise; subgradient 0 at the kink.
template <typename Scalar>
Tensor<Scalar> max_with_scalar(const Tensor<Scalar>& x, Scalar floor) {
  return make_op<Scalar>("max_with_scalar", x.shape(), x.value().cwiseMax(floor), {x},
                         [x, floor](const Vec<Scalar>& g) {
                           detail::accumulate(
                               x, (x.value().array() > floor).select(g.array(), Scalar(0)).matrix());
                         });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Vec<Scalar> out(1);
  out[0] = x.value().sum();
  return make_op<Scalar>("sum", {}, std::move(out), {x}, [x](const Vec<Scalar>& g) {
    detail::accumulate(x, Vec<Scalar>::Constant(x.size(), g[0]));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.size());
  Vec<Scalar> out(1);
  out[0] = x.value().sum() * inv;
  return make_op<Scalar>("mean", {}, std::move(out), {x}, [x, inv](const Vec<Scalar>& g) {
    detail::accumulate(x, Vec<Scalar>::Constant(x.size(), g[0] * inv));
  });
}

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.size()) throw detail::mismatch("reshape", x.shape(), shape);
  return make_op<Scalar>("reshape", std::move(shape), x.value(), {x},
                         [x](const Vec<Scalar>& g) { detail::accumulate(x, g); });
}

/// [B x ...] -> [B x prod(...)]
template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x) {
  if (x.rank() < 1) throw DimensionError("flatten of a rank-0 tensor");
  const Index batch = x.dim(0);
  return reshape(x, {batch, batch ? x.size() / batch : 0});
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  detail::require_rank("transpose", x.shape(), 2);
  const Index m = x.dim(0), n = x.dim(1);
  Vec<Scalar> out(x.size());
  MatMap<Scalar>(out.data(), n, m) = ConstMatMap<Scalar>(x.value().data(), m, n).transpose();
  return make_op<Scalar>("transpose", {n, m}, std::move(out), {x}, [x, m, n](const Vec<Scalar>& g) {
    Vec<Scalar> gx(x.size());
    MatMap<Scalar>(gx.data(), m, n) = ConstMatMap<Scalar>(g.data(), n, m).transpose();
    detail::accumulate(x, gx);
  });
}

/// [B x M x N] -> [B x N x M]
template <typename Scalar>
Tensor<Scalar> swap_last_axes(const Tensor<Scalar>& x) {
  detail::require_rank("swap_last_axes", x.shape(), 3);
  const Index b = x.dim(0), m = x.dim(1), n = x.dim(2);
  auto swap = [b, m, n](const Vec<Scalar>& in, Index rows, Index cols) {
    Vec<Scalar> out(in.size());
    for (Index i = 0; i < b; ++i) {
      MatMap<Scalar>(out.data() + i * m * n, cols, rows) =
          ConstMatMap<Scalar>(in.data() + i * m * n, rows, cols).transpose();
    }
    return out;
  };
  return make_op<Scalar>("swap_last_axes", {b, n, m}, swap(x.value(), m, n), {x},
                         [x, swap, m, n](const Vec<Scalar>& g) { detail::accumulate(x, swap(g, n, m)); });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw detail::mismatch("matmul", a.shape(), b.shape());
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Vec<Scalar> out(m * n);
  MatMap<Scalar>(out.data(), m, n).noalias() =
      ConstMatMap<Scalar>(a.value().data(), m, k).lazyProduct(ConstMatMap<Scalar>(b.value().data(), k, n));
  return make_op<Scalar>("matmul", {m, n}, std::move(out), {a, b}, [a, b, m, k, n](const Vec<Scalar>& g) {
    ConstMatMap<Scalar> gm(g.data(), m, n);
    if (a.requires_grad()) {
      MatMap<Scalar>(a.node()->grad_buffer().data(), m, k).noalias() +=
          gm * ConstMatMap<Scalar>(b.value().data(), k, n).transpose();
    }
    if (b.requires_grad()) {
      MatMap<Scalar>(b.node()->grad_buffer().data(), k, n).noalias() +=
          ConstMatMap<Scalar>(a.value().data(), m, k).transpose() * gm;
    }
  });
}

/// Batched product [B x M x K] . [B x K x N] -> [B x M x N].
template <typename Scalar>
Tensor<Scalar> bmm(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw detail::mismatch("bmm", a.shape(), b.shape());
  }
  const Index batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Vec<Scalar> out(batch * m * n);
  for (Index i = 0; i < batch; ++i) {
    MatMap<Scalar>(out.data() + i * m * n, m, n).noalias() =
        ConstMatMap<Scalar>(a.value().data() + i * m * k, m, k)
            .lazyProduct(ConstMatMap<Scalar>(b.value().data() + i * k * n, k, n));
  }
  return make_op<Scalar>("bmm", {batch, m, n}, std::move(out), {a, b},
                         [a, b, batch, m, k, n](const Vec<Scalar>& g) {
                           for (Index i = 0; i < batch; ++i) {
                             ConstMatMap<Scalar> gm(g.data() + i * m * n, m, n);
                             if (a.requires_grad()) {
                               MatMap<Scalar>(a.node()->grad_buffer().data() + i * m * k, m, k).noalias() +=
                                   gm * ConstMatMap<Scalar>(b.value().data() + i * k * n, k, n).transpose();
                             }
                             if (b.requires_grad()) {
                               MatMap<Scalar>(b.node()->grad_buffer().data() + i * k * n, k, n).noalias() +=
                                   ConstMatMap<Scalar>(a.value().data() + i * m * k, m, k).transpose() * gm;
                             }
                           }
                         });
}

/// Affine map over the last axis: [N x in] . W^T + b with W [out x in], b [out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw detail::mismatch("linear", x.shape(), weight.shape());
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) throw detail::mismatch("linear", weight.shape(), bias.shape());
  const Index rows = x.dim(0), in = x.dim(1), out_dim = weight.dim(0);
  Vec<Scalar> out(rows * out_dim);
  MatMap<Scalar> om(out.data(), rows, out_dim);
  om.noalias() = ConstMatMap<Scalar>(x.value().data(), rows, in)
                    .lazyProduct(ConstMatMap<Scalar>(weight.value().data(), out_dim, in).transpose());
  om.rowwise() += bias.value().transpose();
  return make_op<Scalar>(
      "linear", {rows, out_dim}, std::move(out), {x, weight, bias},
      [x, weight, bias, rows, in, out_dim](const Vec<Scalar>& g) {
        ConstMatMap<Scalar> gm(g.data(), rows, out_dim);
        if (x.requires_grad()) {
          MatMap<Scalar>(x.node()->grad_buffer().data(), rows, in).noalias() +=
              gm * ConstMatMap<Scalar>(weight.value().data(), out_dim, in);
        }
        if (weight.requires_grad()) {
          MatMap<Scalar>(weight.node()->grad_buffer().data(), out_dim, in).noalias() +=
              gm.transpose() * ConstMatMap<Scalar>(x.value().data(), rows, in);
        }
        if (bias.requires_grad()) detail::accumulate(bias, gm.colwise().sum().transpose());
      });
}

// ---------------------------------------------------------------------------
// Softmax along an arbitrary axis, max-shifted.

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis) {
  const int rank = static_cast<int>(x.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_string(x.shape()));
  }
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < rank; ++i) inner *= x.dim(i);
  const Index len = x.dim(axis);
  Vec<Scalar> y(x.size());
  const auto& v = x.value();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      Scalar peak = -std::numeric_limits<Scalar>::infinity();
      for (Index j = 0; j < len; ++j) peak = std::max(peak, v[base + j * inner]);
      Scalar total = 0;
      for (Index j = 0; j < len; ++j) {
        const Scalar e = std::exp(v[base + j * inner] - peak);
        y[base + j * inner] = e;
        total += e;
      }
      for (Index j = 0; j < len; ++j) y[base + j * inner] /= total;
    }
  }
  Vec<Scalar> saved = y;
  return make_op<Scalar>("softmax", x.shape(), std::move(y), {x},
                         [x, saved, outer, inner, len](const Vec<Scalar>& g) {
                           Vec<Scalar> gx(saved.size());
                           for (Index o = 0; o < outer; ++o) {
                             for (Index in = 0; in < inner; ++in) {
                               const Index base = o * len * inner + in;
                               Scalar dot = 0;
                               for (Index j = 0; j < len; ++j) dot += g[base + j * inner] * saved[base + j * inner];
                               for (Index j = 0; j < len; ++j) {
                                 const Index p = base + j * inner;
                                 gx[p] = saved[p] * (g[p] - dot);
                               }
                             }
                           }
                           detail::accumulate(x, gx);
                         });
}

// ---------------------------------------------------------------------------
// Sequence ops on [B x C x L]

template <typename Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  detail::require_rank("global_avg_pool", x.shape(), 3);
  const Index rows = x.dim(0) * x.dim(1), len = x.dim(2);
  if (len == 0) throw DimensionError("global_avg_pool over an empty sequence");
  Vec<Scalar> out = ConstMatMap<Scalar>(x.value().data(), rows, len).rowwise().mean();
  return make_op<Scalar>("global_avg_pool", {x.dim(0), x.dim(1)}, std::move(out), {x},
                         [x, rows, len](const Vec<Scalar>& g) {
                           Vec<Scalar> gx(rows * len);
                           MatMap<Scalar>(gx.data(), rows, len) =
                               (g / static_cast<Scalar>(len)).replicate(1, len);
                           detail::accumulate(x, gx);
                         });
}

/// [B x C] -> [B x C x L] by repeating along time.
template <typename Scalar>
Tensor<Scalar> expand_time(const Tensor<Scalar>& x, Index len) {
  detail::require_rank("expand_time", x.shape(), 2);
  const Index rows = x.size();
  Vec<Scalar> out(rows * len);
  MatMap<Scalar>(out.data(), rows, len) = x.value().replicate(1, len);
  return make_op<Scalar>("expand_time", {x.dim(0), x.dim(1), len}, std::move(out), {x},
                         [x, rows, len](const Vec<Scalar>& g) {
                           detail::accumulate(x, ConstMatMap<Scalar>(g.data(), rows, len).rowwise().sum());
                         });
}

inline Index conv1d_output_length(Index len_in, Index kernel, Index stride, Index padding) {
  if (stride < 1) throw ConfigError("conv1d: stride must be >= 1");
  const Index span = len_in + 2 * padding - kernel;
  if (span < 0) {
    throw ConfigError("conv1d: kernel " + std::to_string(kernel) + " longer than padded input " +
                      std::to_string(len_in + 2 * padding));
  }
  return span / stride + 1;
}

/// x [N x C_in x L_in], w [C_out x C_in x K], optional b [C_out].
template <typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b, Index stride,
                      Index padding) {
  detail::require_rank("conv1d", x.shape(), 3);
  detail::require_rank("conv1d", w.shape(), 3);
  if (x.dim(1) != w.dim(1)) throw detail::mismatch("conv1d", x.shape(), w.shape());
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) throw detail::mismatch("conv1d", w.shape(), b.shape());
  const Index n = x.dim(0), cin = x.dim(1), lin = x.dim(2), cout = w.dim(0), k = w.dim(2);
  const Index lout = conv1d_output_length(lin, k, stride, padding);
  const Index patch = cin * k, cols = n * lout;

  // im2col: column (sample, t) holds the receptive field of output step t.
  RowMat<Scalar> col = RowMat<Scalar>::Zero(patch, cols);
  const auto& xv = x.value();
  for (Index s = 0; s < n; ++s) {
    for (Index c = 0; c < cin; ++c) {
      const Scalar* xrow = xv.data() + (s * cin + c) * lin;
      for (Index j = 0; j < k; ++j) {
        Scalar* crow = col.data() + (c * k + j) * cols + s * lout;
        for (Index t = 0; t < lout; ++t) {
          const Index src = stride * t + j - padding;
          if (src >= 0 && src < lin) crow[t] = xrow[src];
        }
      }
    }
  }
  RowMat<Scalar> prod(cout, cols);
  prod.noalias() = ConstMatMap<Scalar>(w.value().data(), cout, patch).lazyProduct(col);
  if (b.defined()) prod.colwise() += b.value();
  Vec<Scalar> out(n * cout * lout);
  for (Index s = 0; s < n; ++s) {
    MatMap<Scalar>(out.data() + s * cout * lout, cout, lout) = prod.middleCols(s * lout, lout);
  }

  std::vector<Tensor<Scalar>> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return make_op<Scalar>(
      "conv1d", {n, cout, lout}, std::move(out), inputs,
      [x, w, b, col = std::move(col), n, cin, lin, cout, k, lout, patch, cols, stride,
       padding](const Vec<Scalar>& g) {
        RowMat<Scalar> gm(cout, cols);
        for (Index s = 0; s < n; ++s) {
          gm.middleCols(s * lout, lout) = ConstMatMap<Scalar>(g.data() + s * cout * lout, cout, lout);
        }
        if (w.requires_grad()) {
          MatMap<Scalar>(w.node()->grad_buffer().data(), cout, patch).noalias() += gm * col.transpose();
        }
        if (b.defined() && b.requires_grad()) detail::accumulate(b, gm.rowwise().sum());
        if (x.requires_grad()) {
          RowMat<Scalar> gcol = ConstMatMap<Scalar>(w.value().data(), cout, patch).transpose() * gm;
          auto& gx = x.node()->grad_buffer();
          for (Index s = 0; s < n; ++s) {
            for (Index c = 0; c < cin; ++c) {
              Scalar* gxrow = gx.data() + (s * cin + c) * lin;
              for (Index j = 0; j < k; ++j) {
                const Scalar* crow = gcol.data() + (c * k + j) * cols + s * lout;
                for (Index t = 0; t < lout; ++t) {
                  const Index src = stride * t + j - padding;
                  if (src >= 0 && src < lin) gxrow[src] += crow[t];
                }
              }
            }
          }
        }
      });
}

enum class Mode { train, eval };

/// Per-channel running statistics of a batch-norm layer. Before the first
/// training step the running stats are (0, 1), so eval mode is the identity
/// up to the affine transform.
template <typename Scalar>
struct BatchNormState {
  Vec<Scalar> running_mean;
  Vec<Scalar> running_var;
  Scalar momentum = Scalar(0.1);
  Scalar eps = Scalar(1e-5);

  explicit BatchNormState(Index channels = 0)
      : running_mean(Vec<Scalar>::Zero(channels)), running_var(Vec<Scalar>::Ones(channels)) {}
};

/// x [B x C x L]; statistics over (B, L) per channel.
template <typename Scalar>
Tensor<Scalar> batchnorm1d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                           BatchNormState<Scalar>& state, Mode mode) {
  detail::require_rank("batchnorm1d", x.shape(), 3);
  const Index batch = x.dim(0), channels = x.dim(1), len = x.dim(2);
  if (gamma.size() != channels || beta.size() != channels || state.running_mean.size() != channels) {
    throw detail::mismatch("batchnorm1d", x.shape(), gamma.shape());
  }
  const Index count = batch * len;
  if (mode == Mode::train && count < 2) {
    throw DimensionError("batchnorm1d: training needs at least 2 values per channel, got " + std::to_string(count));
  }
  const auto& xv = x.value();
  Vec<Scalar> mu(channels), inv_std(channels);
  if (mode == Mode::train) {
    for (Index c = 0; c < channels; ++c) {
      Scalar s = 0;
      for (Index i = 0; i < batch; ++i) s += ConstMatMap<Scalar>(xv.data() + (i * channels + c) * len, 1, len).sum();
      const Scalar m = s / static_cast<Scalar>(count);
      Scalar ss = 0;
      for (Index i = 0; i < batch; ++i) {
        ss += (ConstMatMap<Scalar>(xv.data() + (i * channels + c) * len, 1, len).array() - m).square().sum();
      }
      const Scalar var = ss / static_cast<Scalar>(count);
      mu[c] = m;
      inv_std[c] = Scalar(1) / std::sqrt(var + state.eps);
      const Scalar unbiased = ss / static_cast<Scalar>(count - 1);
      state.running_mean[c] = (Scalar(1) - state.momentum) * state.running_mean[c] + state.momentum * m;
      state.running_var[c] = (Scalar(1) - state.momentum) * state.running_var[c] + state.momentum * unbiased;
    }
  } else {
    mu = state.running_mean;
    inv_std = (state.running_var.array() + state.eps).rsqrt().matrix();
  }

  Vec<Scalar> xhat(x.size()), out(x.size());
  for (Index i = 0; i < batch; ++i) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (i * channels + c) * len;
      for (Index t = 0; t < len; ++t) {
        xhat[off + t] = (xv[off + t] - mu[c]) * inv_std[c];
        out[off + t] = gamma.value()[c] * xhat[off + t] + beta.value()[c];
      }
    }
  }
  const bool batch_stats = mode == Mode::train;
  return make_op<Scalar>(
      "batchnorm1d", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, batch, channels, len, count, batch_stats](const Vec<Scalar>& g) {
        Vec<Scalar> dgamma = Vec<Scalar>::Zero(channels), dbeta = Vec<Scalar>::Zero(channels);
        for (Index i = 0; i < batch; ++i) {
          for (Index c = 0; c < channels; ++c) {
            const Index off = (i * channels + c) * len;
            for (Index t = 0; t < len; ++t) {
              dgamma[c] += g[off + t] * xhat[off + t];
              dbeta[c] += g[off + t];
            }
          }
        }
        detail::accumulate(gamma, dgamma);
        detail::accumulate(beta, dbeta);
        if (!x.requires_grad()) return;
        auto& gx = x.node()->grad_buffer();
        const Scalar inv_count = Scalar(1) / static_cast<Scalar>(count);
        for (Index i = 0; i < batch; ++i) {
          for (Index c = 0; c < channels; ++c) {
            const Index off = (i * channels + c) * len;
            const Scalar gs = gamma.value()[c] * inv_std[c];
            for (Index t = 0; t < len; ++t) {
              if (batch_stats) {
                // dxhat sums over the group: gamma * dbeta and gamma * dgamma.
                gx[off + t] += gs * (g[off + t] - inv_count * (dbeta[c] + xhat[off + t] * dgamma[c]));
              } else {
                gx[off + t] += gs * g[off + t];
              }
            }
          }
        }
      });
}

/// Normalises over the last axis per position; gamma, beta sized like that axis.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  if (x.rank() < 1) throw DimensionError("layer_norm of a rank-0 tensor");
  const Index width = x.shape().back();
  if (width == 0) throw DimensionError("layer_norm over an empty axis");
  if (gamma.size() != width || beta.size() != width) throw detail::mismatch("layer_norm", x.shape(), gamma.shape());
  const Index rows = x.size() / width;
  ConstMatMap<Scalar> xm(x.value().data(), rows, width);
  Vec<Scalar> mu = xm.rowwise().mean();
  RowMat<Scalar> centered = xm.colwise() - mu;
  Vec<Scalar> inv_std =
      ((centered.array().square().rowwise().sum() / static_cast<Scalar>(width)) + eps).rsqrt().matrix();
  RowMat<Scalar> xhat = centered.array().colwise() * inv_std.array();
  Vec<Scalar> out(x.size());
  MatMap<Scalar> om(out.data(), rows, width);
  om = (xhat.array().rowwise() * gamma.value().transpose().array()).rowwise() + beta.value().transpose().array();
  return make_op<Scalar>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std, rows, width](const Vec<Scalar>& g) {
        ConstMatMap<Scalar> gm(g.data(), rows, width);
        if (gamma.requires_grad()) detail::accumulate(gamma, gm.cwiseProduct(xhat).colwise().sum().transpose());
        if (beta.requires_grad()) detail::accumulate(beta, gm.colwise().sum().transpose());
        if (!x.requires_grad()) return;
        RowMat<Scalar> dxhat = gm.array().rowwise() * gamma.value().transpose().array();
        Vec<Scalar> s1 = dxhat.rowwise().mean();
        Vec<Scalar> s2 = dxhat.cwiseProduct(xhat).rowwise().mean();
        RowMat<Scalar> dx = ((dxhat.colwise() - s1).array() - xhat.array().colwise() * s2.array()).colwise() *
                            inv_std.array();
        MatMap<Scalar>(x.node()->grad_buffer().data(), rows, width) += dx;
      });
}

/// [B x L x D] -> [B x D] at time step `step`.
template <typename Scalar>
Tensor<Scalar> take_step(const Tensor<Scalar>& x, Index step) {
  detail::require_rank("take_step", x.shape(), 3);
  const Index batch = x.dim(0), len = x.dim(1), width = x.dim(2);
  if (step < 0) step += len;
  if (step < 0 || step >= len) throw DimensionError("take_step: step out of range for " + shape_string(x.shape()));
  Vec<Scalar> out(batch * width);
  for (Index i = 0; i < batch; ++i) out.segment(i * width, width) = x.value().segment((i * len + step) * width, width);
  return make_op<Scalar>("take_step", {batch, width}, std::move(out), {x},
                         [x, batch, len, width, step](const Vec<Scalar>& g) {
                           auto& gx = x.node()->grad_buffer();
                           for (Index i = 0; i < batch; ++i) {
                             gx.segment((i * len + step) * width, width) += g.segment(i * width, width);
                           }
                         });
}

/// Concatenates along the last axis; leading extents must agree.
template <typename Scalar>
Tensor<Scalar> concat_last(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw DimensionError("concat_last of zero tensors");
  Shape lead = parts.front().shape();
  if (lead.empty()) throw DimensionError("concat_last of rank-0 tensors");
  lead.pop_back();
  std::vector<Index> widths;
  Index total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.empty()) throw DimensionError("concat_last of rank-0 tensors");
    widths.push_back(s.back());
    s.pop_back();
    if (s != lead) throw detail::mismatch("concat_last", parts.front().shape(), p.shape());
    total += widths.back();
  }
  const Index rows = numel(lead);
  Vec<Scalar> out(rows * total);
  MatMap<Scalar> om(out.data(), rows, total);
  Index col = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    om.middleCols(col, widths[i]) = ConstMatMap<Scalar>(parts[i].value().data(), rows, widths[i]);
    col += widths[i];
  }
  Shape shape = lead;
  shape.push_back(total);
  return make_op<Scalar>("concat_last", std::move(shape), std::move(out), parts,
                         [parts, widths, rows, total](const Vec<Scalar>& g) {
                           ConstMatMap<Scalar> gm(g.data(), rows, total);
                           Index col = 0;
                           for (std::size_t i = 0; i < parts.size(); ++i) {
                             if (parts[i].requires_grad()) {
                               MatMap<Scalar>(parts[i].node()->grad_buffer().data(), rows, widths[i]) +=
                                   gm.middleCols(col, widths[i]);
                             }
                             col += widths[i];
                           }
                         });
}

}  // namespace cdformer
