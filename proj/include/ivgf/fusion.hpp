#pragma once

// Feature enhancement (FEM), token enhancement (TEM) and attention-guided
// fusion (AGF) blocks. Every block reads its weights from a ParamStore under a
// caller-chosen prefix and records onto the Graph of its inputs.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ivgf/autograd.hpp"
#include "ivgf/params.hpp"

namespace ivgf {

enum class FemMode { parallel, serial, channel_only, spatial_only };

inline std::string_view to_string(FemMode m) {
  switch (m) {
    case FemMode::parallel: return "parallel";
    case FemMode::serial: return "serial";
    case FemMode::channel_only: return "channel_only";
    case FemMode::spatial_only: return "spatial_only";
  }
  return "?";
}

inline FemMode parse_fem_mode(std::string_view s) {
  if (s == "parallel") return FemMode::parallel;
  if (s == "serial") return FemMode::serial;
  if (s == "channel_only") return FemMode::channel_only;
  if (s == "spatial_only") return FemMode::spatial_only;
  throw ConfigError("unknown FEM mode '" + std::string(s) + "'");
}

struct FemConfig {
  FemMode mode = FemMode::parallel;
  std::size_t ratio = 8;  // spatial bottleneck C -> max(C/ratio, 1)
};

struct TemConfig {
  bool adapters = true;
  std::size_t num_adapters = 2;
};

struct AgfConfig {
  std::size_t heads = 4;
  std::size_t merge_kernel = 3;  // last merge conv; 1 only for equivariance tests
};

inline std::size_t spatial_hidden(std::size_t c, std::size_t ratio) { return std::max<std::size_t>(c / ratio, 1); }
inline std::size_t channel_hidden(std::size_t c) { return std::max<std::size_t>(c / 4, 1); }
inline std::size_t adapter_hidden(std::size_t c) { return std::max<std::size_t>(c / 4, 1); }

namespace detail {
inline Var linear_p(Var x, const ParamStore& ps, const std::string& name) {
  Graph& g = x.graph();
  return linear(x, g.param(ps, name + ".w"), g.param(ps, name + ".b"));
}
inline Var conv_p(Var x, const ParamStore& ps, const std::string& name, std::size_t stride, std::size_t pad) {
  Graph& g = x.graph();
  return conv2d(x, g.param(ps, name + ".w"), g.param(ps, name + ".b"), stride, pad);
}
inline void require_same(Var a, Var b, const char* what) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(what) + ": modality shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}
}  // namespace detail

// ---------------------------------------------------------------------------
// FEM

inline void init_fem_params(ParamStore& ps, const std::string& prefix, std::size_t c, const FemConfig& cfg,
                            Rng& rng) {
  const std::size_t hs = spatial_hidden(c, cfg.ratio), hc = channel_hidden(c);
  for (const char* m : {".x", ".y"}) {
    const std::string p = prefix + m;
    add_conv(ps, p + ".spatial1", hs, c, 1, rng);
    add_conv(ps, p + ".spatial2", 1, hs, 1, rng);
    add_linear(ps, p + ".channel1", hc, 2 * c, rng);
    add_linear(ps, p + ".channel2", c, hc, rng);
  }
}

/// Sigmoid(Conv(ReLU(Conv(F)))) -> [1,H,W]. `branch` is e.g. "fem1.x".
inline Var spatial_attention(Var f, const ParamStore& ps, const std::string& branch) {
  if (f.shape().size() != 3) throw DimensionError("spatial_attention: expected [C,H,W], got " + shape_str(f.shape()));
  Var h = relu(detail::conv_p(f, ps, branch + ".spatial1", 1, 0));
  return sigmoid(detail::conv_p(h, ps, branch + ".spatial2", 1, 0));
}

struct CrossSpatial {
  Var sxy, syx;  // Fx + Fy*Wsy, Fy + Fx*Wsx
  Var wsx, wsy;
};

inline CrossSpatial cross_spatial_integration(Var fx, Var fy, const ParamStore& ps, const std::string& prefix) {
  detail::require_same(fx, fy, "cross_spatial_integration");
  Var wsx = spatial_attention(fx, ps, prefix + ".x");
  Var wsy = spatial_attention(fy, ps, prefix + ".y");
  Var fsx = mul(fx, wsx);
  Var fsy = mul(fy, wsy);
  return {add(fx, fsy), add(fy, fsx), wsx, wsy};
}

/// Avg and max descriptors, concatenated to 2C, through Linear-ReLU-Linear-Sigmoid -> [C,1,1].
inline Var channel_attention(Var f, const ParamStore& ps, const std::string& branch) {
  if (f.shape().size() != 3) throw DimensionError("channel_attention: expected [C,H,W], got " + shape_str(f.shape()));
  const std::size_t c = f.dim(0);
  Var fa = adaptive_pool(f, kernels::PoolMode::avg, 1, 1);
  Var fm = adaptive_pool(f, kernels::PoolMode::max, 1, 1);
  Var desc = reshape(concat({fa, fm}, 0), {1, 2 * c});
  Var h = relu(detail::linear_p(desc, ps, branch + ".channel1"));
  Var w = sigmoid(detail::linear_p(h, ps, branch + ".channel2"));
  return reshape(w, {c, 1, 1});
}

struct FemOutput {
  Var x, y;
  std::vector<Var> gates;  // every sigmoid weight map produced
};

inline FemOutput fem_forward(Var fx, Var fy, const ParamStore& ps, const std::string& prefix, const FemConfig& cfg) {
  detail::require_same(fx, fy, "fem_forward");
  FemOutput out;
  switch (cfg.mode) {
    case FemMode::parallel: {
      auto s = cross_spatial_integration(fx, fy, ps, prefix);
      Var wcx = channel_attention(fx, ps, prefix + ".x");
      Var wcy = channel_attention(fy, ps, prefix + ".y");
      out.x = add(s.sxy, mul(fx, wcx));
      out.y = add(s.syx, mul(fy, wcy));
      out.gates = {s.wsx, s.wsy, wcx, wcy};
      break;
    }
    case FemMode::serial: {
      auto s = cross_spatial_integration(fx, fy, ps, prefix);
      Var wcx = channel_attention(s.sxy, ps, prefix + ".x");
      Var wcy = channel_attention(s.syx, ps, prefix + ".y");
      out.x = add(s.sxy, mul(s.sxy, wcx));
      out.y = add(s.syx, mul(s.syx, wcy));
      out.gates = {s.wsx, s.wsy, wcx, wcy};
      break;
    }
    case FemMode::channel_only: {
      Var wcx = channel_attention(fx, ps, prefix + ".x");
      Var wcy = channel_attention(fy, ps, prefix + ".y");
      out.x = add(fx, mul(fx, wcx));
      out.y = add(fy, mul(fy, wcy));
      out.gates = {wcx, wcy};
      break;
    }
    case FemMode::spatial_only: {
      auto s = cross_spatial_integration(fx, fy, ps, prefix);
      out.x = s.sxy;
      out.y = s.syx;
      out.gates = {s.wsx, s.wsy};
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// TEM

inline void init_tem_params(ParamStore& ps, const std::string& prefix, std::size_t c, const TemConfig& cfg, Rng& rng) {
  add_layer_norm(ps, prefix + ".norm", 2 * c);
  add_linear(ps, prefix + ".reduce", c, 2 * c, rng);
  if (cfg.adapters) {
    const std::size_t h = adapter_hidden(c);
    for (std::size_t k = 0; k < cfg.num_adapters; ++k) {
      const std::string a = prefix + ".adapter" + std::to_string(k);
      add_linear(ps, a + ".down", h, c, rng);
      add_linear(ps, a + ".up", c, h, rng);
    }
    add_linear(ps, prefix + ".router", cfg.num_adapters, c, rng);
  }
}

struct TemOutput {
  Var x, y;
  Var prompt_x, prompt_y;  // [N,1]
  std::optional<Var> router;  // [N,K] mixture weights
};

inline TemOutput tem_forward(Var tx, Var ty, const ParamStore& ps, const std::string& prefix, const TemConfig& cfg) {
  detail::require_same(tx, ty, "tem_forward");
  if (tx.shape().size() != 2) throw DimensionError("tem_forward: tokens must be [N,C], got " + shape_str(tx.shape()));
  Graph& g = tx.graph();
  Var merged = concat({tx, ty}, 1);
  Var normed = layer_norm(merged, g.param(ps, prefix + ".norm.gamma"), g.param(ps, prefix + ".norm.beta"));
  Var phi = detail::linear_p(normed, ps, prefix + ".reduce");
  TemOutput out;
  if (cfg.adapters) {
    Var router = softmax_rows(detail::linear_p(phi, ps, prefix + ".router"));
    Var mix;
    for (std::size_t k = 0; k < cfg.num_adapters; ++k) {
      const std::string a = prefix + ".adapter" + std::to_string(k);
      Var ad = detail::linear_p(relu(detail::linear_p(phi, ps, a + ".down")), ps, a + ".up");
      Var weighted = mul(ad, slice(router, 1, k, k + 1));
      mix = k == 0 ? weighted : add(mix, weighted);
    }
    phi = add(phi, mix);
    out.router = router;
  }
  Var prompts = sigmoid(adaptive_pool(phi, kernels::PoolMode::avg, 1, 2));
  out.prompt_x = slice(prompts, 1, 0, 1);
  out.prompt_y = slice(prompts, 1, 1, 2);
  out.x = mul(tx, out.prompt_x);
  out.y = mul(ty, out.prompt_y);
  return out;
}

// ---------------------------------------------------------------------------
// AGF

inline void init_agf_params(ParamStore& ps, const std::string& prefix, std::size_t c, const AgfConfig& cfg,
                            Rng& rng) {
  if (cfg.heads == 0 || c % cfg.heads != 0)
    throw ConfigError("agf.heads = " + std::to_string(cfg.heads) + " must divide channel width " + std::to_string(c));
  for (const char* d : {".xy", ".yx"})
    for (const char* p : {".q", ".k", ".v"}) add_linear(ps, prefix + d + p, c, c, rng);
  add_conv(ps, prefix + ".merge_a", c, 2 * c, 1, rng);
  add_conv(ps, prefix + ".merge_b", c, c, 1, rng);
  add_conv(ps, prefix + ".merge_c", c, c, cfg.merge_kernel, rng);
}

/// Scaled dot-product attention over projected tokens q [Lq,C], k and v
/// [Lk,C], split into `heads` column groups. Returns [Lq,C].
inline Var attend(Var q, Var k, Var v, std::size_t heads, std::vector<Var>* probs = nullptr) {
  const std::size_t c = q.dim(1);
  if (heads == 0 || c % heads != 0)
    throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide C=" + std::to_string(c));
  const std::size_t dk = c / heads;
  const double temp = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> head_out;
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : slice(q, 1, h * dk, (h + 1) * dk);
    Var kh = heads == 1 ? k : slice(k, 1, h * dk, (h + 1) * dk);
    Var vh = heads == 1 ? v : slice(v, 1, h * dk, (h + 1) * dk);
    Var p = softmax_rows(scale(matmul(qh, transpose(kh)), temp));
    if (probs) probs->push_back(p);
    head_out.push_back(matmul(p, vh));
  }
  return heads == 1 ? head_out[0] : concat(head_out, 1);
}

struct CrossAttnOutput {
  Var out;                 // [HW_q, C]
  std::vector<Var> probs;  // per head [HW_q, HW_kv]
};

/// Multi-head cross-attention. q_src and kv_src are flattened maps [C, L].
/// `dir` is the direction prefix, e.g. "agf1.xy".
inline CrossAttnOutput cross_attention(Var q_src, Var kv_src, const ParamStore& ps, const std::string& dir,
                                       std::size_t heads) {
  if (q_src.shape().size() != 2 || kv_src.shape().size() != 2 || q_src.dim(0) != kv_src.dim(0))
    throw DimensionError("cross_attention: inputs must be [C,L] with equal C, got " + shape_str(q_src.shape()) +
                         " and " + shape_str(kv_src.shape()));
  const std::size_t c = q_src.dim(0);
  if (heads == 0 || c % heads != 0)
    throw ConfigError("cross_attention: " + std::to_string(heads) + " heads do not divide C=" + std::to_string(c));
  Var q = detail::linear_p(transpose(q_src), ps, dir + ".q");
  Var kv_tokens = transpose(kv_src);
  Var k = detail::linear_p(kv_tokens, ps, dir + ".k");
  Var v = detail::linear_p(kv_tokens, ps, dir + ".v");
  CrossAttnOutput out;
  out.out = attend(q, k, v, heads, &out.probs);
  return out;
}

struct AgfOutput {
  Var fused;               // [C,H,W]
  std::vector<Var> probs;  // attention rows of both directions
};

/// Merge M: conv1x1(2C->C) -> ReLU -> conv1x1(C->C) -> conv kxk(C->C).
inline Var agf_merge(Var cat, const ParamStore& ps, const std::string& prefix, std::size_t merge_kernel) {
  Var h = relu(detail::conv_p(cat, ps, prefix + ".merge_a", 1, 0));
  h = detail::conv_p(h, ps, prefix + ".merge_b", 1, 0);
  return detail::conv_p(h, ps, prefix + ".merge_c", 1, merge_kernel / 2);
}

inline AgfOutput agf_forward(Var fx, Var fy, const ParamStore& ps, const std::string& prefix, const AgfConfig& cfg) {
  detail::require_same(fx, fy, "agf_forward");
  if (fx.shape().size() != 3) throw DimensionError("agf_forward: expected [C,H,W], got " + shape_str(fx.shape()));
  const std::size_t c = fx.dim(0), h = fx.dim(1), w = fx.dim(2);
  Var rx = reshape(fx, {c, h * w});
  Var ry = reshape(fy, {c, h * w});
  auto axy = cross_attention(rx, ry, ps, prefix + ".xy", cfg.heads);
  auto ayx = cross_attention(ry, rx, ps, prefix + ".yx", cfg.heads);
  Var cat = reshape(transpose(concat({axy.out, ayx.out}, 1)), {2 * c, h, w});
  AgfOutput out;
  out.fused = agf_merge(cat, ps, prefix, cfg.merge_kernel);
  out.probs = axy.probs;
  out.probs.insert(out.probs.end(), ayx.probs.begin(), ayx.probs.end());
  return out;
}

}  // namespace ivgf
