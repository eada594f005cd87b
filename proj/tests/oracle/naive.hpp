#pragma once

// Scalar-loop reference implementations used as oracles. Written directly
// from the block definitions with explicit index arithmetic; nothing here
// calls into ivgf::kernels or the autodiff graph.

#include <cmath>
#include <string>
#include <vector>

#include "ivgf/params.hpp"
#include "ivgf/tensor.hpp"

namespace oracle {

using ivgf::ParamStore;
using ivgf::Tensor;

inline double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double rel(double x) { return x > 0 ? x : 0; }

inline Tensor conv2d(const Tensor& in, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int C = int(in.dim(0)), H = int(in.dim(1)), W = int(in.dim(2));
  const int O = int(w.dim(0)), K = int(w.dim(2));
  const int OH = (H + 2 * pad - K) / stride + 1, OW = (W + 2 * pad - K) / stride + 1;
  Tensor out({std::size_t(O), std::size_t(OH), std::size_t(OW)});
  for (int o = 0; o < O; ++o)
    for (int y = 0; y < OH; ++y)
      for (int x = 0; x < OW; ++x) {
        double s = b[o];
        for (int c = 0; c < C; ++c)
          for (int i = 0; i < K; ++i)
            for (int j = 0; j < K; ++j) {
              const int yy = y * stride + i - pad, xx = x * stride + j - pad;
              if (yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
              s += w[((o * C + c) * K + i) * K + j] * in[(c * H + yy) * W + xx];
            }
        out[(o * OH + y) * OW + x] = s;
      }
  return out;
}

// rows x Din times Dout x Din^T
inline Tensor linear(const Tensor& in, const Tensor& w, const Tensor& b) {
  const std::size_t Din = w.dim(1), Dout = w.dim(0), R = in.numel() / Din;
  ivgf::Shape s = in.shape();
  s.back() = Dout;
  Tensor out(s);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t o = 0; o < Dout; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < Din; ++i) acc += in[r * Din + i] * w[o * Din + i];
      out[r * Dout + o] = acc;
    }
  return out;
}

inline Tensor linear_p(const Tensor& in, const ParamStore& ps, const std::string& n) {
  return linear(in, ps.get(n + ".w"), ps.get(n + ".b"));
}

inline Tensor conv_p(const Tensor& in, const ParamStore& ps, const std::string& n, int stride, int pad) {
  return conv2d(in, ps.get(n + ".w"), ps.get(n + ".b"), stride, pad);
}

// Row-wise layer norm evaluated in long double.
inline Tensor layer_norm(const Tensor& in, const Tensor& g, const Tensor& b, double eps = 1e-5) {
  const std::size_t C = in.shape().back(), R = in.numel() / C;
  Tensor out(in.shape());
  for (std::size_t r = 0; r < R; ++r) {
    long double mu = 0;
    for (std::size_t i = 0; i < C; ++i) mu += in[r * C + i];
    mu /= C;
    long double var = 0;
    for (std::size_t i = 0; i < C; ++i) var += (in[r * C + i] - mu) * (in[r * C + i] - mu);
    var /= C;
    for (std::size_t i = 0; i < C; ++i)
      out[r * C + i] = double((in[r * C + i] - mu) / std::sqrt(var + eps) * g[i] + b[i]);
  }
  return out;
}

// Softmax of each row, computed via the log-sum-exp identity.
inline Tensor softmax(const Tensor& in) {
  const std::size_t M = in.shape().back(), R = in.numel() / M;
  Tensor out(in.shape());
  for (std::size_t r = 0; r < R; ++r) {
    double mx = in[r * M];
    for (std::size_t i = 1; i < M; ++i) mx = std::max(mx, in[r * M + i]);
    double lse = 0;
    for (std::size_t i = 0; i < M; ++i) lse += std::exp(in[r * M + i] - mx);
    lse = mx + std::log(lse);
    for (std::size_t i = 0; i < M; ++i) out[r * M + i] = std::exp(in[r * M + i] - lse);
  }
  return out;
}

inline Tensor spatial_attention(const Tensor& f, const ParamStore& ps, const std::string& br) {
  Tensor h = conv_p(f, ps, br + ".spatial1", 1, 0);
  for (auto& v : h.data()) v = rel(v);
  Tensor o = conv_p(h, ps, br + ".spatial2", 1, 0);
  for (auto& v : o.data()) v = sig(v);
  return o;
}

inline Tensor channel_attention(const Tensor& f, const ParamStore& ps, const std::string& br) {
  const std::size_t C = f.dim(0), HW = f.dim(1) * f.dim(2);
  Tensor d({1, 2 * C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0, m = f[c * HW];
    for (std::size_t p = 0; p < HW; ++p) {
      s += f[c * HW + p];
      m = std::max(m, f[c * HW + p]);
    }
    d[c] = s / double(HW);
    d[C + c] = m;
  }
  Tensor h = linear_p(d, ps, br + ".channel1");
  for (auto& v : h.data()) v = rel(v);
  Tensor w = linear_p(h, ps, br + ".channel2");
  for (auto& v : w.data()) v = sig(v);
  return w.reshaped({C, 1, 1});
}

struct Pair {
  Tensor x, y;
};

inline Pair cross_spatial(const Tensor& fx, const Tensor& fy, const ParamStore& ps, const std::string& p) {
  Tensor wx = spatial_attention(fx, ps, p + ".x"), wy = spatial_attention(fy, ps, p + ".y");
  const std::size_t C = fx.dim(0), HW = fx.dim(1) * fx.dim(2);
  Pair out{fx, fy};
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t q = 0; q < HW; ++q) {
      out.x[c * HW + q] = fx[c * HW + q] + fy[c * HW + q] * wy[q];
      out.y[c * HW + q] = fy[c * HW + q] + fx[c * HW + q] * wx[q];
    }
  return out;
}

inline Tensor channel_scaled(const Tensor& f, const Tensor& w) {
  Tensor out = f;
  const std::size_t HW = f.dim(1) * f.dim(2);
  for (std::size_t i = 0; i < f.numel(); ++i) out[i] = f[i] * w[i / HW];
  return out;
}

inline Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor o = a;
  for (std::size_t i = 0; i < a.numel(); ++i) o[i] += b[i];
  return o;
}

// mode: "parallel", "serial", "channel_only", "spatial_only"
inline Pair fem(const Tensor& fx, const Tensor& fy, const ParamStore& ps, const std::string& p,
                const std::string& mode) {
  if (mode == "parallel") {
    Pair s = cross_spatial(fx, fy, ps, p);
    return {plus(s.x, channel_scaled(fx, channel_attention(fx, ps, p + ".x"))),
            plus(s.y, channel_scaled(fy, channel_attention(fy, ps, p + ".y")))};
  }
  if (mode == "serial") {
    Pair s = cross_spatial(fx, fy, ps, p);
    return {plus(s.x, channel_scaled(s.x, channel_attention(s.x, ps, p + ".x"))),
            plus(s.y, channel_scaled(s.y, channel_attention(s.y, ps, p + ".y")))};
  }
  if (mode == "channel_only")
    return {plus(fx, channel_scaled(fx, channel_attention(fx, ps, p + ".x"))),
            plus(fy, channel_scaled(fy, channel_attention(fy, ps, p + ".y")))};
  return cross_spatial(fx, fy, ps, p);
}

struct TemResult {
  Tensor x, y, prompt_x, prompt_y;
};

inline TemResult tem(const Tensor& tx, const Tensor& ty, const ParamStore& ps, const std::string& p, bool adapters,
                     std::size_t n_adapters = 2) {
  const std::size_t N = tx.dim(0), C = tx.dim(1);
  Tensor cat({N, 2 * C});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      cat[n * 2 * C + c] = tx[n * C + c];
      cat[n * 2 * C + C + c] = ty[n * C + c];
    }
  Tensor phi = linear_p(layer_norm(cat, ps.get(p + ".norm.gamma"), ps.get(p + ".norm.beta")), ps, p + ".reduce");
  const std::size_t C1 = phi.dim(1);
  if (adapters) {
    Tensor route = softmax(linear_p(phi, ps, p + ".router"));
    Tensor refined = phi;
    for (std::size_t k = 0; k < n_adapters; ++k) {
      const std::string a = p + ".adapter" + std::to_string(k);
      Tensor h = linear_p(phi, ps, a + ".down");
      for (auto& v : h.data()) v = rel(v);
      Tensor up = linear_p(h, ps, a + ".up");
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C1; ++c) refined[n * C1 + c] += route[n * n_adapters + k] * up[n * C1 + c];
    }
    phi = refined;
  }
  // Average pool each row to two bins: [0, ceil(C1/2)) and [floor(C1/2), C1).
  TemResult r{tx, ty, Tensor({N, 1}), Tensor({N, 1})};
  for (std::size_t n = 0; n < N; ++n) {
    const std::size_t e0 = (C1 + 1) / 2, b1 = C1 / 2;
    double s0 = 0, s1 = 0;
    for (std::size_t c = 0; c < e0; ++c) s0 += phi[n * C1 + c];
    for (std::size_t c = b1; c < C1; ++c) s1 += phi[n * C1 + c];
    r.prompt_x[n] = sig(s0 / double(e0));
    r.prompt_y[n] = sig(s1 / double(C1 - b1));
    for (std::size_t c = 0; c < C; ++c) {
      r.x[n * C + c] = tx[n * C + c] * r.prompt_x[n];
      r.y[n * C + c] = ty[n * C + c] * r.prompt_y[n];
    }
  }
  return r;
}

struct AttnResult {
  Tensor out;                  // [L, C]
  std::vector<Tensor> probs;   // per head [Lq, Lk]
};

// q_src, kv_src: [C, L] channel-major maps.
inline AttnResult cross_attention(const Tensor& q_src, const Tensor& kv_src, const ParamStore& ps,
                                  const std::string& dir, std::size_t heads) {
  const std::size_t C = q_src.dim(0), Lq = q_src.dim(1), Lk = kv_src.dim(1), dk = C / heads;
  auto tokens = [](const Tensor& m) {
    Tensor t({m.dim(1), m.dim(0)});
    for (std::size_t c = 0; c < m.dim(0); ++c)
      for (std::size_t l = 0; l < m.dim(1); ++l) t[l * m.dim(0) + c] = m[c * m.dim(1) + l];
    return t;
  };
  Tensor Q = linear_p(tokens(q_src), ps, dir + ".q");
  Tensor K = linear_p(tokens(kv_src), ps, dir + ".k");
  Tensor V = linear_p(tokens(kv_src), ps, dir + ".v");
  AttnResult r{Tensor({Lq, C}), {}};
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor P({Lq, Lk});
    for (std::size_t i = 0; i < Lq; ++i) {
      std::vector<double> s(Lk);
      double mx = -1e300;
      for (std::size_t j = 0; j < Lk; ++j) {
        double d = 0;
        for (std::size_t e = 0; e < dk; ++e) d += Q[i * C + h * dk + e] * K[j * C + h * dk + e];
        s[j] = d / std::sqrt(double(dk));
        mx = std::max(mx, s[j]);
      }
      double z = 0;
      for (double v : s) z += std::exp(v - mx);
      for (std::size_t j = 0; j < Lk; ++j) P[i * Lk + j] = std::exp(s[j] - mx) / z;
      for (std::size_t e = 0; e < dk; ++e) {
        double acc = 0;
        for (std::size_t j = 0; j < Lk; ++j) acc += P[i * Lk + j] * V[j * C + h * dk + e];
        r.out[i * C + h * dk + e] = acc;
      }
    }
    r.probs.push_back(P);
  }
  return r;
}

inline Tensor agf(const Tensor& fx, const Tensor& fy, const ParamStore& ps, const std::string& p, std::size_t heads,
                  int merge_kernel) {
  const std::size_t C = fx.dim(0), H = fx.dim(1), W = fx.dim(2), L = H * W;
  Tensor rx = fx.reshaped({C, L}), ry = fy.reshaped({C, L});
  Tensor axy = cross_attention(rx, ry, ps, p + ".xy", heads).out;
  Tensor ayx = cross_attention(ry, rx, ps, p + ".yx", heads).out;
  Tensor cat({2 * C, H, W});
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t c = 0; c < C; ++c) {
      cat[c * L + l] = axy[l * C + c];
      cat[(C + c) * L + l] = ayx[l * C + c];
    }
  Tensor h = conv_p(cat, ps, p + ".merge_a", 1, 0);
  for (auto& v : h.data()) v = rel(v);
  h = conv_p(h, ps, p + ".merge_b", 1, 0);
  return conv_p(h, ps, p + ".merge_c", 1, merge_kernel / 2);
}

}  // namespace oracle
