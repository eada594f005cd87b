#pragma once

// Toy dual-branch encoder. Per modality: two strided conv stages (/4, /8), a
// token stage (/16) of pre-norm MHSA layers and a strided conv to /32. FEM
// enhances scales 1-3, TEM gates the tokens every `tem_every` layers and AGF
// fuses each scale.

#include <array>
#include <string>

#include "ivgf/augment.hpp"
#include "ivgf/config.hpp"
#include "ivgf/fusion.hpp"

namespace ivgf {

inline constexpr std::array<const char*, 2> kBranches{"bb.x", "bb.y"};

inline void init_backbone_params(ParamStore& ps, const ModelConfig& m, Rng& rng) {
  const auto& w = m.widths;
  const std::size_t stem = std::max<std::size_t>(w[0] / 2, 1);
  for (const char* b : kBranches) {
    const std::string p = b;
    add_conv(ps, p + ".stem1", stem, 3, 3, rng);
    add_conv(ps, p + ".stem2", w[0], stem, 3, rng);
    add_conv(ps, p + ".stage2", w[1], w[0], 3, rng);
    add_conv(ps, p + ".embed", w[2], w[1], 3, rng);
    for (std::size_t j = 1; j <= m.depth; ++j) {
      const std::string l = p + ".layer" + std::to_string(j);
      add_layer_norm(ps, l + ".ln1", w[2]);
      add_linear(ps, l + ".qkv", 3 * w[2], w[2], rng);
      add_linear(ps, l + ".proj", w[2], w[2], rng);
      add_layer_norm(ps, l + ".ln2", w[2]);
      add_linear(ps, l + ".mlp1", m.mlp_ratio * w[2], w[2], rng);
      add_linear(ps, l + ".mlp2", w[2], m.mlp_ratio * w[2], rng);
    }
    add_conv(ps, p + ".stage4", w[3], w[2], 3, rng);
  }
  if (m.fem_enabled)
    for (std::size_t i = 0; i < 3; ++i) init_fem_params(ps, "fem" + std::to_string(i + 1), w[i], m.fem, rng);
  if (m.tem_enabled) init_tem_params(ps, "tem", w[2], m.tem, rng);
  if (m.agf_enabled)
    for (std::size_t i = 0; i < 4; ++i) init_agf_params(ps, "agf" + std::to_string(i + 1), w[i], m.agf, rng);
}

struct MultiScaleFeatures {
  std::array<Var, 4> x, y;   // per-modality features entering fusion
  std::array<Var, 4> fused;  // F_{i_xy}
  std::size_t tem_calls = 0;
  std::vector<Var> gates;       // sigmoid gates from FEM and TEM
  std::vector<Var> attn_probs;  // AGF attention rows
};

namespace detail {

inline Var stem_stage(Var img, const ParamStore& ps, const std::string& b) {
  Var h = relu(conv_p(img, ps, b + ".stem1", 2, 1));
  return relu(conv_p(h, ps, b + ".stem2", 2, 1));
}

inline Var mhsa_layer(Var t, const ParamStore& ps, const std::string& l, std::size_t heads) {
  Graph& g = t.graph();
  const std::size_t c = t.dim(1);
  Var h = layer_norm(t, g.param(ps, l + ".ln1.gamma"), g.param(ps, l + ".ln1.beta"));
  Var qkv = linear_p(h, ps, l + ".qkv");
  Var a = attend(slice(qkv, 1, 0, c), slice(qkv, 1, c, 2 * c), slice(qkv, 1, 2 * c, 3 * c), heads);
  t = add(t, linear_p(a, ps, l + ".proj"));
  h = layer_norm(t, g.param(ps, l + ".ln2.gamma"), g.param(ps, l + ".ln2.beta"));
  return add(t, linear_p(relu(linear_p(h, ps, l + ".mlp1")), ps, l + ".mlp2"));
}

}  // namespace detail

inline void check_input_size(const Shape& s) {
  if (s.size() != 3 || s[0] != 3) throw ConfigError("encoder: images must be [3,H,W], got " + shape_str(s));
  if (s[1] % 32 != 0 || s[2] % 32 != 0)
    throw ConfigError("encoder: H and W must be divisible by 32, got " + shape_str(s));
}

inline MultiScaleFeatures encoder_forward(Var x_img, Var y_img, const ParamStore& ps, const ModelConfig& m) {
  check_input_size(x_img.shape());
  if (x_img.shape() != y_img.shape())
    throw ConfigError("encoder: modality images differ in shape, " + shape_str(x_img.shape()) + " vs " +
                      shape_str(y_img.shape()));
  MultiScaleFeatures out;
  auto enhance = [&](std::size_t i, Var fx, Var fy) {
    if (m.fem_enabled) {
      auto f = fem_forward(fx, fy, ps, "fem" + std::to_string(i + 1), m.fem);
      out.gates.insert(out.gates.end(), f.gates.begin(), f.gates.end());
      fx = f.x;
      fy = f.y;
    }
    out.x[i] = fx;
    out.y[i] = fy;
  };

  enhance(0, detail::stem_stage(x_img, ps, kBranches[0]), detail::stem_stage(y_img, ps, kBranches[1]));
  enhance(1, relu(detail::conv_p(out.x[0], ps, std::string(kBranches[0]) + ".stage2", 2, 1)),
          relu(detail::conv_p(out.y[0], ps, std::string(kBranches[1]) + ".stage2", 2, 1)));

  std::array<Var, 2> tokens;
  Shape map3;
  const std::array<Var, 2> prev{out.x[1], out.y[1]};
  for (std::size_t b = 0; b < 2; ++b) {
    Var e = detail::conv_p(prev[b], ps, std::string(kBranches[b]) + ".embed", 2, 1);
    map3 = e.shape();
    tokens[b] = transpose(reshape(e, {map3[0], map3[1] * map3[2]}));
  }
  for (std::size_t j = 1; j <= m.depth; ++j) {
    for (std::size_t b = 0; b < 2; ++b)
      tokens[b] = detail::mhsa_layer(tokens[b], ps, std::string(kBranches[b]) + ".layer" + std::to_string(j),
                                     m.mhsa_heads);
    if (m.tem_enabled && j % m.tem_every == 0) {
      auto t = tem_forward(tokens[0], tokens[1], ps, "tem", m.tem);
      tokens = {t.x, t.y};
      out.gates.push_back(t.prompt_x);
      out.gates.push_back(t.prompt_y);
      ++out.tem_calls;
    }
  }
  enhance(2, reshape(transpose(tokens[0]), map3), reshape(transpose(tokens[1]), map3));

  out.x[3] = relu(detail::conv_p(out.x[2], ps, std::string(kBranches[0]) + ".stage4", 2, 1));
  out.y[3] = relu(detail::conv_p(out.y[2], ps, std::string(kBranches[1]) + ".stage4", 2, 1));

  for (std::size_t i = 0; i < 4; ++i) {
    if (m.agf_enabled) {
      auto a = agf_forward(out.x[i], out.y[i], ps, "agf" + std::to_string(i + 1), m.agf);
      out.fused[i] = a.fused;
      out.attn_probs.insert(out.attn_probs.end(), a.probs.begin(), a.probs.end());
    } else {
      out.fused[i] = add(out.x[i], out.y[i]);
    }
  }
  return out;
}

/// Missing-modality protocol: the absent modality's image is replaced by the
/// present one, so both branches see the same input.
inline ImagePair substitute_missing(const Tensor& x_img, const Tensor& y_img, Modality missing) {
  switch (missing) {
    case Modality::ir: return {y_img, y_img};
    case Modality::vis: return {x_img, x_img};
    case Modality::none: break;
  }
  return {x_img, y_img};
}

/// Per-channel maximum of a [C,H,W] map, min-max normalized to [0,1] as [1,H,W].
inline Tensor max_projection(const Tensor& f) {
  kernels::require_rank(f, 3, "max_projection");
  const std::size_t C = f.dim(0), H = f.dim(1), W = f.dim(2);
  Tensor out({1, H, W});
  for (std::size_t p = 0; p < H * W; ++p) {
    double mx = f[p];
    for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, f[c * H * W + p]);
    out[p] = mx;
  }
  const auto [lo, hi] = std::minmax_element(out.data().begin(), out.data().end());
  const double a = *lo, span = *hi - *lo;
  for (auto& v : out.data()) v = span > 0 ? (v - a) / span : 0.0;
  return out;
}

}  // namespace ivgf
