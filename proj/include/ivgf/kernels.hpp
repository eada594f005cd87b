#pragma once

// Pure forward and backward kernels over Tensor values. The autodiff layer in
// autograd.hpp records these; nothing here keeps state.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ivgf/tensor.hpp"

namespace ivgf::kernels {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
  if (t.rank() != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

// ---------------------------------------------------------------------------
// conv2d, input [C,H,W], weight [O,C,k,k], bias [O], zero padding.

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline void check_conv(const Tensor& in, const Tensor& w, const Tensor& b, std::size_t stride,
                       std::size_t pad) {
  require_rank(in, 3, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  if (w.dim(1) != in.dim(0))
    throw DimensionError("conv2d: weight expects C_in=" + std::to_string(w.dim(1)) +
                         " but input has C=" + std::to_string(in.dim(0)));
  if (w.dim(2) != w.dim(3) || (w.dim(2) != 1 && w.dim(2) != 3))
    throw DimensionError("conv2d: kernel must be 1x1 or 3x3, got " + shape_str(w.shape()));
  if (b.numel() != w.dim(0))
    throw DimensionError("conv2d: bias length " + std::to_string(b.numel()) + " vs C_out " +
                         std::to_string(w.dim(0)));
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const std::size_t k = w.dim(2);
  if (in.dim(1) + 2 * pad < k || in.dim(2) + 2 * pad < k)
    throw DimensionError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(in.shape()));
}

// Valid output-column range [lo, hi) for kernel offset kw so that the input
// column ow*stride - pad + kw lies inside [0, W).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in, std::size_t stride,
                                                       std::size_t pad, std::size_t koff) {
  std::size_t lo = 0;
  while (lo < out && lo * stride + koff < pad) ++lo;
  std::size_t hi = lo;
  while (hi < out && hi * stride + koff - pad < in) ++hi;
  return {lo, hi};
}

inline Tensor conv2d(const Tensor& in, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad) {
  check_conv(in, w, b, stride, pad);
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t O = w.dim(0), k = w.dim(2);
  const std::size_t OH = conv_out_size(H, k, stride, pad), OW = conv_out_size(W, k, stride, pad);
  Tensor out({O, OH, OW});
  double* po = out.ptr();
  for (std::size_t o = 0; o < O; ++o)
    std::fill(po + o * OH * OW, po + (o + 1) * OH * OW, b[o]);
  for (std::size_t kh = 0; kh < k; ++kh) {
    const auto [oh_lo, oh_hi] = valid_range(OH, H, stride, pad, kh);
    for (std::size_t kw = 0; kw < k; ++kw) {
      const auto [ow_lo, ow_hi] = valid_range(OW, W, stride, pad, kw);
      for (std::size_t o = 0; o < O; ++o) {
        for (std::size_t c = 0; c < C; ++c) {
          const double wv = w[((o * C + c) * k + kh) * k + kw];
          const double* pi = in.ptr() + c * H * W;
          double* dst = po + o * OH * OW;
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const double* row = pi + (oh * stride + kh - pad) * W;
            double* orow = dst + oh * OW;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) orow[ow] += wv * row[ow * stride + kw - pad];
          }
        }
      }
    }
  }
  return out;
}

struct ConvGrads {
  Tensor input, weight, bias;
};

inline ConvGrads conv2d_backward(const Tensor& in, const Tensor& w, const Tensor& grad_out, std::size_t stride,
                                 std::size_t pad) {
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  const std::size_t O = w.dim(0), k = w.dim(2);
  const std::size_t OH = grad_out.dim(1), OW = grad_out.dim(2);
  ConvGrads g{Tensor(in.shape()), Tensor(w.shape()), Tensor({O})};
  for (std::size_t o = 0; o < O; ++o) {
    double s = 0.0;
    const double* go = grad_out.ptr() + o * OH * OW;
    for (std::size_t i = 0; i < OH * OW; ++i) s += go[i];
    g.bias[o] = s;
  }
  for (std::size_t kh = 0; kh < k; ++kh) {
    const auto [oh_lo, oh_hi] = valid_range(OH, H, stride, pad, kh);
    for (std::size_t kw = 0; kw < k; ++kw) {
      const auto [ow_lo, ow_hi] = valid_range(OW, W, stride, pad, kw);
      for (std::size_t o = 0; o < O; ++o) {
        const double* go = grad_out.ptr() + o * OH * OW;
        for (std::size_t c = 0; c < C; ++c) {
          const std::size_t widx = ((o * C + c) * k + kh) * k + kw;
          const double wv = w[widx];
          const double* pi = in.ptr() + c * H * W;
          double* gi = g.input.ptr() + c * H * W;
          double acc = 0.0;
          for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
            const std::size_t ih = oh * stride + kh - pad;
            const double* row = pi + ih * W;
            double* grow = gi + ih * W;
            const double* gorow = go + oh * OW;
            for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
              const std::size_t iw = ow * stride + kw - pad;
              acc += gorow[ow] * row[iw];
              grow[iw] += gorow[ow] * wv;
            }
          }
          g.weight[widx] += acc;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Dense matrix products on rank-2 tensors.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t N = a.dim(0), K = a.dim(1), M = b.dim(1);
  Tensor out({N, M});
  for (std::size_t i = 0; i < N; ++i) {
    double* orow = out.ptr() + i * M;
    for (std::size_t p = 0; p < K; ++p) {
      const double av = a[i * K + p];
      const double* brow = b.ptr() + p * M;
      for (std::size_t j = 0; j < M; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

inline Tensor transpose2d(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t R = a.dim(0), C = a.dim(1);
  Tensor out({C, R});
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j) out[j * R + i] = a[i * C + j];
  return out;
}

// ---------------------------------------------------------------------------
// linear: input [..., D_in], weight [D_out, D_in], bias [D_out].

inline Tensor linear(const Tensor& in, const Tensor& w, const Tensor& b) {
  require_rank(w, 2, "linear weight");
  if (in.rank() == 0 || in.shape().back() != w.dim(1))
    throw DimensionError("linear: input trailing dim of " + shape_str(in.shape()) + " does not match D_in " +
                         std::to_string(w.dim(1)));
  if (b.numel() != w.dim(0)) throw DimensionError("linear: bias length mismatch");
  const std::size_t Din = w.dim(1), Dout = w.dim(0), rows = in.numel() / Din;
  Shape os = in.shape();
  os.back() = Dout;
  Tensor out(os);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.ptr() + r * Din;
    double* y = out.ptr() + r * Dout;
    for (std::size_t o = 0; o < Dout; ++o) {
      const double* wr = w.ptr() + o * Din;
      double s = b[o];
      for (std::size_t i = 0; i < Din; ++i) s += x[i] * wr[i];
      y[o] = s;
    }
  }
  return out;
}

struct LinearGrads {
  Tensor input, weight, bias;
};

inline LinearGrads linear_backward(const Tensor& in, const Tensor& w, const Tensor& grad_out) {
  const std::size_t Din = w.dim(1), Dout = w.dim(0), rows = in.numel() / Din;
  LinearGrads g{Tensor(in.shape()), Tensor(w.shape()), Tensor({Dout})};
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.ptr() + r * Din;
    const double* go = grad_out.ptr() + r * Dout;
    double* gx = g.input.ptr() + r * Din;
    for (std::size_t o = 0; o < Dout; ++o) {
      const double gv = go[o];
      if (gv == 0.0) continue;
      g.bias[o] += gv;
      const double* wr = w.ptr() + o * Din;
      double* gw = g.weight.ptr() + o * Din;
      for (std::size_t i = 0; i < Din; ++i) {
        gx[i] += gv * wr[i];
        gw[i] += gv * x[i];
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// layer_norm over the trailing dimension with population variance.

inline Tensor layer_norm(const Tensor& in, const Tensor& gamma, const Tensor& beta, double eps) {
  if (in.rank() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t C = in.shape().back();
  if (gamma.numel() != C || beta.numel() != C)
    throw DimensionError("layer_norm: gamma/beta length must equal " + std::to_string(C));
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t rows = in.numel() / C;
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.ptr() + r * C;
    double mean = 0.0;
    for (std::size_t i = 0; i < C; ++i) mean += x[i];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t i = 0; i < C; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + eps);
    double* y = out.ptr() + r * C;
    for (std::size_t i = 0; i < C; ++i) y[i] = (x[i] - mean) * inv * gamma[i] + beta[i];
  }
  return out;
}

struct LayerNormGrads {
  Tensor input, gamma, beta;
};

inline LayerNormGrads layer_norm_backward(const Tensor& in, const Tensor& gamma, double eps,
                                          const Tensor& grad_out) {
  const std::size_t C = in.shape().back(), rows = in.numel() / C;
  LayerNormGrads g{Tensor(in.shape()), Tensor({C}), Tensor({C})};
  std::vector<double> xhat(C), dxhat(C);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.ptr() + r * C;
    const double* go = grad_out.ptr() + r * C;
    double mean = 0.0;
    for (std::size_t i = 0; i < C; ++i) mean += x[i];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t i = 0; i < C; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + eps);
    double sum_d = 0.0, sum_dx = 0.0;
    for (std::size_t i = 0; i < C; ++i) {
      xhat[i] = (x[i] - mean) * inv;
      dxhat[i] = go[i] * gamma[i];
      g.gamma[i] += go[i] * xhat[i];
      g.beta[i] += go[i];
      sum_d += dxhat[i];
      sum_dx += dxhat[i] * xhat[i];
    }
    double* gx = g.input.ptr() + r * C;
    const double n = static_cast<double>(C);
    for (std::size_t i = 0; i < C; ++i) gx[i] = inv * (dxhat[i] - sum_d / n - xhat[i] * sum_dx / n);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Row softmax over the trailing dimension, max-subtracted.

inline Tensor softmax_rows(const Tensor& in) {
  if (in.rank() == 0) throw DimensionError("softmax_rows: scalar input");
  const std::size_t M = in.shape().back(), rows = in.numel() / M;
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = in.ptr() + r * M;
    double* y = out.ptr() + r * M;
    const double mx = *std::max_element(x, x + M);
    double s = 0.0;
    for (std::size_t i = 0; i < M; ++i) s += (y[i] = std::exp(x[i] - mx));
    for (std::size_t i = 0; i < M; ++i) y[i] /= s;
  }
  return out;
}

inline Tensor softmax_rows_backward(const Tensor& out, const Tensor& grad_out) {
  const std::size_t M = out.shape().back(), rows = out.numel() / M;
  Tensor g(out.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* y = out.ptr() + r * M;
    const double* go = grad_out.ptr() + r * M;
    double dot = 0.0;
    for (std::size_t i = 0; i < M; ++i) dot += y[i] * go[i];
    for (std::size_t i = 0; i < M; ++i) g[r * M + i] = y[i] * (go[i] - dot);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Adaptive pooling. Bin i of a length-L axis pooled to n covers
// [floor(i*L/n), ceil((i+1)*L/n)).

enum class PoolMode { avg, max };

inline std::size_t bin_begin(std::size_t i, std::size_t L, std::size_t n) { return (i * L) / n; }
inline std::size_t bin_end(std::size_t i, std::size_t L, std::size_t n) { return ((i + 1) * L + n - 1) / n; }

/// Pools the trailing two dims of [C,H,W] to [C,oh,ow], or the trailing dim of
/// [N,L] to [N,ow] (oh ignored). Max ties resolve to the first index.
inline Tensor adaptive_pool(const Tensor& in, PoolMode mode, std::size_t oh, std::size_t ow) {
  if (oh == 0 || ow == 0) throw DimensionError("adaptive_pool: output size must be positive");
  if (in.rank() == 2) {
    const std::size_t N = in.dim(0), L = in.dim(1);
    if (ow > L) throw DimensionError("adaptive_pool: target " + std::to_string(ow) + " exceeds length " +
                                     std::to_string(L));
    Tensor out({N, ow});
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t b = bin_begin(j, L, ow), e = bin_end(j, L, ow);
        const double* x = in.ptr() + n * L;
        if (mode == PoolMode::avg) {
          double s = 0.0;
          for (std::size_t i = b; i < e; ++i) s += x[i];
          out[n * ow + j] = s / static_cast<double>(e - b);
        } else {
          out[n * ow + j] = *std::max_element(x + b, x + e);
        }
      }
    return out;
  }
  require_rank(in, 3, "adaptive_pool");
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  if (oh > H || ow > W)
    throw DimensionError("adaptive_pool: target exceeds input " + shape_str(in.shape()));
  Tensor out({C, oh, ow});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t hb = bin_begin(i, H, oh), he = bin_end(i, H, oh);
        const std::size_t wb = bin_begin(j, W, ow), we = bin_end(j, W, ow);
        double acc = mode == PoolMode::avg ? 0.0 : -std::numeric_limits<double>::infinity();
        for (std::size_t h = hb; h < he; ++h)
          for (std::size_t w = wb; w < we; ++w) {
            const double v = in.at(c, h, w);
            if (mode == PoolMode::avg)
              acc += v;
            else if (v > acc)
              acc = v;
          }
        if (mode == PoolMode::avg) acc /= static_cast<double>((he - hb) * (we - wb));
        out.at(c, i, j) = acc;
      }
  return out;
}

inline Tensor adaptive_pool_backward(const Tensor& in, PoolMode mode, std::size_t oh, std::size_t ow,
                                     const Tensor& grad_out) {
  Tensor g(in.shape());
  if (in.rank() == 2) {
    const std::size_t N = in.dim(0), L = in.dim(1);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t b = bin_begin(j, L, ow), e = bin_end(j, L, ow);
        const double go = grad_out[n * ow + j];
        const double* x = in.ptr() + n * L;
        if (mode == PoolMode::avg) {
          for (std::size_t i = b; i < e; ++i) g[n * L + i] += go / static_cast<double>(e - b);
        } else {
          g[n * L + static_cast<std::size_t>(std::max_element(x + b, x + e) - x)] += go;
        }
      }
    return g;
  }
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        const std::size_t hb = bin_begin(i, H, oh), he = bin_end(i, H, oh);
        const std::size_t wb = bin_begin(j, W, ow), we = bin_end(j, W, ow);
        const double go = grad_out.at(c, i, j);
        if (mode == PoolMode::avg) {
          const double share = go / static_cast<double>((he - hb) * (we - wb));
          for (std::size_t h = hb; h < he; ++h)
            for (std::size_t w = wb; w < we; ++w) g.at(c, h, w) += share;
        } else {
          std::size_t bh = hb, bw = wb;
          for (std::size_t h = hb; h < he; ++h)
            for (std::size_t w = wb; w < we; ++w)
              if (in.at(c, h, w) > in.at(c, bh, bw)) bh = h, bw = w;
          g.at(c, bh, bw) += go;
        }
      }
  return g;
}

// ---------------------------------------------------------------------------
// Pointwise activations.

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor map(const Tensor& in, double (*f)(double)) {
  Tensor out(in.shape());
  for (std::size_t i = 0; i < in.numel(); ++i) out[i] = f(in[i]);
  return out;
}

inline double relu(double x) { return x > 0.0 ? x : 0.0; }

// ---------------------------------------------------------------------------
// Broadcasting. `b` has the same rank as `a` and each of its dims is either 1
// or equal to a's. Returns, per element of a, the matching offset into b.

inline bool broadcastable(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (b[i] != 1 && b[i] != a[i]) return false;
  return true;
}

template <class Fn>
void for_each_broadcast(const Shape& a, const Shape& b, Fn&& fn) {
  const std::size_t r = a.size();
  std::vector<std::size_t> bstride(r, 0);
  std::size_t s = 1;
  for (std::size_t i = r; i-- > 0;) {
    bstride[i] = b[i] == 1 ? 0 : s;
    s *= b[i];
  }
  std::vector<std::size_t> idx(r, 0);
  const std::size_t n = shape_numel(a);
  std::size_t boff = 0;
  for (std::size_t ai = 0; ai < n; ++ai) {
    fn(ai, boff);
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < a[d]) {
        boff += bstride[d];
        break;
      }
      boff -= bstride[d] * (a[d] - 1);
      idx[d] = 0;
    }
  }
}

// ---------------------------------------------------------------------------
// Axis concat/slice on arbitrary-rank tensors.

inline std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

inline Tensor concat(const std::vector<const Tensor*>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape os = parts[0]->shape();
  if (axis >= os.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    Shape ps = p->shape();
    if (ps.size() != os.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (i != axis && ps[i] != os[i])
        throw DimensionError("concat: " + shape_str(ps) + " vs " + shape_str(os) + " off axis " +
                             std::to_string(axis));
    total += ps[axis];
  }
  os[axis] = total;
  Tensor out(os);
  const auto [outer, inner] = outer_inner(os, axis);
  std::size_t off = 0;
  for (const Tensor* p : parts) {
    const std::size_t len = p->dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(p->ptr() + o * len, len, out.ptr() + o * total * inner + off);
    off += len;
  }
  return out;
}

inline Tensor slice(const Tensor& in, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= in.rank() || begin >= end || end > in.dim(axis))
    throw DimensionError("slice: bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") on " +
                         shape_str(in.shape()));
  Shape os = in.shape();
  os[axis] = end - begin;
  Tensor out(os);
  const auto [outer, inner] = outer_inner(in.shape(), axis);
  const std::size_t len = (end - begin) * inner, full = in.dim(axis) * inner;
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.ptr() + o * full + begin * inner, len, out.ptr() + o * len);
  return out;
}

// Nearest-neighbor upsampling of [C,H,W] by an integer factor.
inline Tensor upsample_nearest(const Tensor& in, std::size_t factor) {
  require_rank(in, 3, "upsample_nearest");
  const std::size_t C = in.dim(0), H = in.dim(1), W = in.dim(2);
  Tensor out({C, H * factor, W * factor});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H * factor; ++h)
      for (std::size_t w = 0; w < W * factor; ++w) out.at(c, h, w) = in.at(c, h / factor, w / factor);
  return out;
}

inline Tensor upsample_nearest_backward(const Tensor& grad_out, std::size_t factor) {
  const std::size_t C = grad_out.dim(0), H = grad_out.dim(1) / factor, W = grad_out.dim(2) / factor;
  Tensor g({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H * factor; ++h)
      for (std::size_t w = 0; w < W * factor; ++w) g.at(c, h / factor, w / factor) += grad_out.at(c, h, w);
  return g;
}

// ---------------------------------------------------------------------------
// Pixelwise cross-entropy of logits [K,H,W] against class ids [H,W].

constexpr int kIgnoreLabel = 255;

inline std::size_t count_labeled(const Tensor& mask) {
  std::size_t n = 0;
  for (double v : mask.data())
    if (static_cast<int>(v) != kIgnoreLabel) ++n;
  return n;
}

inline void check_ce(const Tensor& logits, const Tensor& mask) {
  require_rank(logits, 3, "cross_entropy logits");
  require_rank(mask, 2, "cross_entropy mask");
  if (mask.dim(0) != logits.dim(1) || mask.dim(1) != logits.dim(2))
    throw DimensionError("cross_entropy: mask " + shape_str(mask.shape()) + " vs logits " +
                         shape_str(logits.shape()));
  for (double v : mask.data()) {
    const int id = static_cast<int>(v);
    if (id != kIgnoreLabel && (id < 0 || static_cast<std::size_t>(id) >= logits.dim(0)))
      throw DimensionError("cross_entropy: class id " + std::to_string(id) + " out of range");
  }
  if (count_labeled(mask) == 0) throw std::domain_error("cross_entropy: every pixel is ignored");
}

inline double cross_entropy(const Tensor& logits, const Tensor& mask) {
  check_ce(logits, mask);
  const std::size_t K = logits.dim(0), P = mask.numel();
  double total = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const int id = static_cast<int>(mask[p]);
    if (id == kIgnoreLabel) continue;
    double mx = logits[p];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits[k * P + p]);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(logits[k * P + p] - mx);
    total += std::log(s) + mx - logits[static_cast<std::size_t>(id) * P + p];
  }
  return total / static_cast<double>(count_labeled(mask));
}

inline Tensor cross_entropy_backward(const Tensor& logits, const Tensor& mask, double grad_out) {
  const std::size_t K = logits.dim(0), P = mask.numel();
  const double scale = grad_out / static_cast<double>(count_labeled(mask));
  Tensor g(logits.shape());
  for (std::size_t p = 0; p < P; ++p) {
    const int id = static_cast<int>(mask[p]);
    if (id == kIgnoreLabel) continue;
    double mx = logits[p];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits[k * P + p]);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(logits[k * P + p] - mx);
    for (std::size_t k = 0; k < K; ++k) {
      const double prob = std::exp(logits[k * P + p] - mx) / s;
      g[k * P + p] = scale * (prob - (static_cast<std::size_t>(id) == k ? 1.0 : 0.0));
    }
  }
  return g;
}

}  // namespace ivgf::kernels
