#pragma once

// Segmentation head, loss, mIoU, synthetic paired-modality scenes, AdamW
// training and (missing-modality) evaluation.

#include <cinttypes>
#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ivgf/augment.hpp"
#include "ivgf/backbone.hpp"
#include "ivgf/config.hpp"

namespace ivgf {

// ---------------------------------------------------------------------------
// Segmentation head: lateral 1x1 convs to a common width, nearest upsampling
// to scale-1 resolution, sum, ReLU, 1x1 classifier, x4 upsampling.

inline void init_head_params(ParamStore& ps, const ModelConfig& m, Rng& rng) {
  for (std::size_t i = 0; i < 4; ++i) add_conv(ps, "head.lateral" + std::to_string(i + 1), m.head_width, m.widths[i], 1, rng);
  add_conv(ps, "head.cls", m.classes, m.head_width, 1, rng);
}

inline Var seg_forward(const MultiScaleFeatures& f, const ParamStore& ps) {
  Var acc;
  for (std::size_t i = 0; i < 4; ++i) {
    Var l = detail::conv_p(f.fused[i], ps, "head.lateral" + std::to_string(i + 1), 1, 0);
    l = upsample_nearest(l, std::size_t{1} << i);
    acc = i == 0 ? l : add(acc, l);
  }
  return upsample_nearest(detail::conv_p(relu(acc), ps, "head.cls", 1, 0), 4);
}

/// All trainable parameters for a model config, drawn from the init stream of `seed`.
inline ParamStore init_model_params(const ModelConfig& m, std::uint64_t seed) {
  ParamStore ps;
  Rng rng = Rng(seed).split(Stream::init);
  init_backbone_params(ps, m, rng);
  init_head_params(ps, m, rng);
  return ps;
}

/// Per-pixel argmax over classes of [K,H,W]; ties go to the lowest class id.
inline Tensor argmax_classes(const Tensor& logits) {
  kernels::require_rank(logits, 3, "argmax");
  const std::size_t K = logits.dim(0), H = logits.dim(1), W = logits.dim(2), P = H * W;
  Tensor out({H, W});
  for (std::size_t p = 0; p < P; ++p) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k)
      if (logits[k * P + p] > logits[best * P + p]) best = k;
    out[p] = static_cast<double>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Confusion matrix and mIoU.

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : k_(classes), counts_(classes * classes, 0) {
    if (classes == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  std::size_t classes() const noexcept { return k_; }
  std::uint64_t operator()(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  std::uint64_t& operator()(std::size_t truth, std::size_t pred) { return counts_.at(truth * k_ + pred); }

  /// Adds every non-ignored pixel of (truth, prediction) id maps.
  void update(const Tensor& truth, const Tensor& pred) {
    if (truth.shape() != pred.shape())
      throw DimensionError("confusion update: " + shape_str(truth.shape()) + " vs " + shape_str(pred.shape()));
    for (std::size_t i = 0; i < truth.numel(); ++i) {
      const int t = static_cast<int>(truth[i]);
      if (t == kernels::kIgnoreLabel) continue;
      const int p = static_cast<int>(pred[i]);
      if (t < 0 || p < 0 || static_cast<std::size_t>(t) >= k_ || static_cast<std::size_t>(p) >= k_)
        throw DimensionError("confusion update: class id out of range");
      ++counts_[static_cast<std::size_t>(t) * k_ + static_cast<std::size_t>(p)];
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw DimensionError("confusion merge: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts_) s += c;
    return s;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct MiouReport {
  double miou = 0.0;
  std::vector<std::optional<double>> iou;  // nullopt: class absent from truth and prediction
};

inline MiouReport miou(const ConfusionMatrix& cm) {
  const std::size_t K = cm.classes();
  MiouReport r;
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < K; ++j) {
      row += cm(k, j);
      col += cm(j, k);
    }
    const std::uint64_t denom = row + col - cm(k, k);
    if (denom == 0) {
      r.iou.emplace_back(std::nullopt);
      continue;
    }
    const double iou = static_cast<double>(cm(k, k)) / static_cast<double>(denom);
    r.iou.emplace_back(iou);
    sum += iou;
    ++valid;
  }
  if (valid == 0) throw std::domain_error("miou: every class has an empty union");
  r.miou = sum / static_cast<double>(valid);
  return r;
}

inline std::string format_real6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

/// Machine-readable report: `class_id,iou` rows then `miou,<value>`.
inline std::string report_csv(const MiouReport& r) {
  std::string out = "class_id,iou\n";
  for (std::size_t k = 0; k < r.iou.size(); ++k)
    out += std::to_string(k) + "," + (r.iou[k] ? format_real6(*r.iou[k]) : std::string("nan")) + "\n";
  out += "miou," + format_real6(r.miou) + "\n";
  return out;
}

inline std::string report_table(const MiouReport& r, const std::string& title) {
  std::string out = title + "\n  class   IoU\n";
  for (std::size_t k = 0; k < r.iou.size(); ++k) {
    char line[64];
    std::snprintf(line, sizeof line, "  %5zu   %s\n", k, r.iou[k] ? format_real6(*r.iou[k]).c_str() : "excluded");
    out += line;
  }
  out += "  mIoU    " + format_real6(r.miou) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes. Class id = 1*(hot in infrared) + 2*(marked in visible):
// 0 background, 1 infrared-only, 2 visible-only, 3 both. No single modality
// separates all four classes.

struct SyntheticScene {
  Tensor ir, vis;  // [3,H,W], values on the 1/255 grid
  Tensor mask;     // [H,W] class ids
};

inline double quantize255(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

inline SyntheticScene generate_scene(Rng& rng, std::size_t size, std::size_t classes = 4) {
  if (classes != 4) throw ConfigError("synthetic scenes are defined for 4 classes");
  const std::size_t S = size;
  SyntheticScene s{Tensor({3, S, S}), Tensor({3, S, S}), Tensor({S, S})};
  const double ir_base = rng.uniform(0.15, 0.35);
  const double ir_slope = rng.uniform(-0.1, 0.1);
  double vis_base[3];
  for (double& v : vis_base) v = rng.uniform(0.3, 0.6);

  // Objects, painted in order; later ones occlude earlier ones.
  const std::size_t n_obj = 2 + static_cast<std::size_t>(rng.below(3));
  std::vector<std::size_t> cls(n_obj);
  for (std::size_t o = 0; o < n_obj; ++o) {
    cls[o] = 1 + static_cast<std::size_t>(rng.below(3));
    const std::size_t h = S / 5 + static_cast<std::size_t>(rng.below(S / 3));
    const std::size_t w = S / 5 + static_cast<std::size_t>(rng.below(S / 3));
    const std::size_t r0 = static_cast<std::size_t>(rng.below(S - h + 1));
    const std::size_t c0 = static_cast<std::size_t>(rng.below(S - w + 1));
    for (std::size_t r = r0; r < r0 + h; ++r)
      for (std::size_t c = c0; c < c0 + w; ++c) s.mask.at(r, c) = static_cast<double>(cls[o]);
  }
  for (std::size_t r = 0; r < S; ++r)
    for (std::size_t c = 0; c < S; ++c) {
      const auto id = static_cast<std::size_t>(s.mask.at(r, c));
      const bool hot = id & 1u, marked = id & 2u;
      const double ir = ir_base + ir_slope * (static_cast<double>(r) / static_cast<double>(S) - 0.5) +
                        (hot ? 0.35 : 0.0) + rng.uniform(-0.08, 0.08);
      const double q = quantize255(ir);
      for (std::size_t ch = 0; ch < 3; ++ch) s.ir.at(ch, r, c) = q;
      static constexpr double kMark[3] = {0.3, -0.15, -0.2};
      for (std::size_t ch = 0; ch < 3; ++ch)
        s.vis.at(ch, r, c) = quantize255(vis_base[ch] + (marked ? kMark[ch] : 0.0) + rng.uniform(-0.08, 0.08));
    }
  return s;
}

enum class Split : std::uint64_t { train = 0, eval = 1 };

inline std::vector<SyntheticScene> make_dataset(std::uint64_t seed, Split split, std::size_t count, std::size_t size) {
  Rng rng = Rng(seed).split(Stream::data).split(static_cast<std::uint64_t>(split));
  std::vector<SyntheticScene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_scene(rng, size));
  return out;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay.

struct AdamW {
  double lr = 1e-4, weight_decay = 0.05, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::uint64_t t = 0;
  std::map<std::string, Tensor> m, v;

  static AdamW from(const TrainConfig& c) { return AdamW{c.lr, c.weight_decay, c.beta1, c.beta2, c.eps, 0, {}, {}}; }

  /// p <- p - lr*wd*p - lr * mhat / (sqrt(vhat) + eps), for every parameter.
  /// Parameters without an entry in `grads` are treated as zero-gradient.
  void step(ParamStore& ps, const Gradients& grads) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : ps) {
      auto git = grads.params.find(name);
      auto [mit, m_new] = m.try_emplace(name, Tensor::zeros(p.shape()));
      auto [vit, v_new] = v.try_emplace(name, Tensor::zeros(p.shape()));
      Tensor& mt = mit->second;
      Tensor& vt = vit->second;
      for (std::size_t i = 0; i < p.numel(); ++i) {
        const double g = git != grads.params.end() ? git->second[i] : 0.0;
        mt[i] = beta1 * mt[i] + (1.0 - beta1) * g;
        vt[i] = beta2 * vt[i] + (1.0 - beta2) * g * g;
        const double mhat = mt[i] / bc1, vhat = vt[i] / bc2;
        p[i] = p[i] - lr * weight_decay * p[i] - lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Training.

/// Image values in [0,1] mapped to roughly zero mean, unit spread before the encoder.
inline Tensor standardize(const Tensor& img) {
  return kernels::map(img, [](double v) { return (v - 0.5) * 4.0; });
}

/// Builds the full forward on `g` and returns the scalar loss node.
inline Var scene_loss(Graph& g, const Tensor& ir, const Tensor& vis, const Tensor& mask, const ParamStore& ps,
                      const ModelConfig& m) {
  auto feats = encoder_forward(g.constant(standardize(ir)), g.constant(standardize(vis)), ps, m);
  return cross_entropy(seg_forward(feats, ps), mask);
}

struct StepResult {
  double loss = 0.0;
  Gradients grads;
};

/// Mean loss and gradient over a batch; augments each sample through cma
/// when `aug` is enabled, with the per-sample stream `aug_streams[b]`.
inline StepResult batch_gradient(const std::vector<const SyntheticScene*>& batch, const ParamStore& ps,
                                 const RunConfig& cfg, std::vector<Rng>& aug_streams) {
  StepResult r;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const SyntheticScene& s = *batch[b];
    AugResult a = cfg.aug.enabled ? cma_apply(s.ir, s.vis, cfg.aug, aug_streams[b]) : AugResult{s.ir, s.vis, {}};
    Graph g;
    Var loss = scene_loss(g, a.x, a.y, s.mask, ps, cfg.model);
    if (!std::isfinite(loss.value().item())) {
      auto where = g.first_non_finite();
      throw NonFiniteError("non-finite loss; first non-finite tensor: " + where.value_or("loss"));
    }
    r.loss += loss.value().item() * inv;
    Gradients gr = g.backward(loss);
    for (auto& [name, t] : gr.params) {
      auto [it, fresh] = r.grads.params.try_emplace(name, Tensor::zeros(t.shape()));
      for (std::size_t i = 0; i < t.numel(); ++i) it->second[i] += t[i] * inv;
    }
  }
  return r;
}

/// One optimizer update on `ps`. Returns the batch loss before the update.
inline double train_step(const std::vector<const SyntheticScene*>& batch, ParamStore& ps, AdamW& opt,
                         const RunConfig& cfg, std::vector<Rng>& aug_streams) {
  StepResult r = batch_gradient(batch, ps, cfg, aug_streams);
  for (const auto& [name, g] : r.grads.params)
    if (!g.all_finite()) throw NonFiniteError("non-finite gradient for parameter " + name);
  opt.step(ps, r.grads);
  return r.loss;
}

struct TrainResult {
  ParamStore params;
  std::vector<double> losses;  // per step
};

/// Toy training on the synthetic train split. Sample order cycles through the
/// split; augmentation streams derive from (seed, step, slot).
inline TrainResult train_toy(const RunConfig& cfg, std::size_t steps,
                             const std::function<void(std::size_t, double)>& on_step = {}) {
  const auto data = make_dataset(cfg.seed, Split::train, cfg.data.train_count, cfg.data.size);
  TrainResult r{init_model_params(cfg.model, cfg.seed), {}};
  AdamW opt = AdamW::from(cfg.train);
  const Rng aug_root = Rng(cfg.seed).split(Stream::augment);
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<const SyntheticScene*> batch;
    std::vector<Rng> streams;
    for (std::size_t b = 0; b < cfg.train.batch; ++b) {
      const std::size_t slot = s * cfg.train.batch + b;
      batch.push_back(&data[slot % data.size()]);
      streams.push_back(aug_root.split(slot));
    }
    const double loss = train_step(batch, r.params, opt, cfg, streams);
    r.losses.push_back(loss);
    if (on_step) on_step(s, loss);
  }
  return r;
}

inline std::string loss_curve_csv(const std::vector<double>& losses) {
  std::string out = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.12g\n", i, losses[i]);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation.

inline Tensor predict(const Tensor& ir, const Tensor& vis, const ParamStore& ps, const ModelConfig& m) {
  Graph g;
  auto feats = encoder_forward(g.constant(standardize(ir)), g.constant(standardize(vis)), ps, m);
  return argmax_classes(seg_forward(feats, ps).value());
}

struct EvalResult {
  ConfusionMatrix cm;
  MiouReport report;
};

/// Accumulates a confusion matrix over `data` after applying the
/// missing-modality substitution to each pair.
inline EvalResult evaluate(const std::vector<SyntheticScene>& data, const ParamStore& ps, const ModelConfig& m,
                           Modality missing) {
  if (data.empty()) throw std::domain_error("evaluate: empty dataset");
  ConfusionMatrix cm(m.classes);
  for (const auto& s : data) {
    ImagePair in = substitute_missing(s.ir, s.vis, missing);
    cm.update(s.mask, predict(in.x, in.y, ps, m));
  }
  MiouReport rep = miou(cm);
  return {std::move(cm), std::move(rep)};
}

}  // namespace ivgf
