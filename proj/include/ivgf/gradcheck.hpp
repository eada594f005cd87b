#pragma once

// Gradient-check suite: tape gradients of each block against central finite
// differences of its forward value.

#include <cctype>
#include <chrono>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ivgf/pipeline.hpp"

namespace ivgf {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  std::size_t trials = 20;
  double eps = 1e-5;
  double block_tolerance = 1e-4;
  double composed_tolerance = 1e-3;
  std::size_t composed_samples = 5;  // sampled parameter elements per block group
  std::string fault_op;              // negate this op's backward (fault injection)
};

struct GradCheckResult {
  std::string block;
  double max_rel_error = 0.0;
  std::string worst;  // tensor (or element) with the largest error
  std::size_t trials = 0;
  std::size_t checks = 0;
  double tolerance = 0.0;
  double seconds = 0.0;
  bool passed() const { return max_rel_error <= tolerance; }
};

namespace detail {

using Tensors = std::map<std::string, Tensor>;
using LossBuilder = std::function<Var(Graph&, const ParamStore&, const std::map<std::string, Var>&)>;

struct Problem {
  ParamStore params;
  Tensors inputs;
  LossBuilder loss;
};

inline void randomize(ParamStore& ps, Rng& rng) {
  for (auto& [name, t] : ps)
    for (auto& v : t.data()) v = rng.uniform(-1.0, 1.0);
}

inline double eval_loss(const Problem& p, const ParamStore& ps, const Tensors& in) {
  Graph g;
  std::map<std::string, Var> vars;
  for (const auto& [n, t] : in) vars.emplace(n, g.constant(t));
  return p.loss(g, ps, vars).value().item();
}

/// Full check: every parameter and input tensor, every element.
inline void check_problem(const Problem& p, const GradCheckOptions& o, GradCheckResult& r) {
  Graph g(Graph::Options{o.fault_op});
  std::map<std::string, Var> vars;
  for (const auto& [n, t] : p.inputs) vars.emplace(n, g.input(t));
  Var loss = p.loss(g, p.params, vars);
  Gradients grads = g.backward(loss);
  // Central differences carry rounding noise near 1e-10 * |loss|; gradients
  // far below that (e.g. exactly-zero key biases) are compared absolutely.
  const double floor = 1e-5 * std::max(1.0, std::abs(loss.value().item()));
  auto record = [&](const std::string& name, const Tensor& analytic, const Tensor& numeric) {
    const double e = relative_error(analytic, numeric, floor);
    ++r.checks;
    if (e > r.max_rel_error || r.worst.empty()) {
      r.max_rel_error = std::max(r.max_rel_error, e);
      r.worst = name;
    }
  };
  for (const auto& [name, t] : p.params) {
    ParamStore probe = p.params;
    Tensor numeric = finite_diff_grad(
        [&](const Tensor& x) {
          probe.get(name) = x;
          return eval_loss(p, probe, p.inputs);
        },
        t, o.eps);
    auto it = grads.params.find(name);
    record(name, it != grads.params.end() ? it->second : Tensor::zeros(t.shape()), numeric);
  }
  for (const auto& [name, t] : p.inputs) {
    Tensors probe = p.inputs;
    Tensor numeric = finite_diff_grad(
        [&](const Tensor& x) {
          probe[name] = x;
          return eval_loss(p, p.params, probe);
        },
        t, o.eps);
    record("input:" + name, g.grad(vars.at(name)), numeric);
  }
}

inline Problem fem_problem(Rng& rng, std::size_t trial) {
  const std::size_t C = 4, H = 4, W = 4;
  FemConfig cfg;
  cfg.mode = static_cast<FemMode>(trial % 4);
  cfg.ratio = 2;
  Problem p;
  init_fem_params(p.params, "fem", C, cfg, rng);
  randomize(p.params, rng);
  p.inputs = {{"fx", uniform_tensor({C, H, W}, rng)}, {"fy", uniform_tensor({C, H, W}, rng)}};
  Tensor wx = uniform_tensor({C, H, W}, rng), wy = uniform_tensor({C, H, W}, rng);
  p.loss = [cfg, wx, wy](Graph&, const ParamStore& ps, const std::map<std::string, Var>& in) {
    auto out = fem_forward(in.at("fx"), in.at("fy"), ps, "fem", cfg);
    return add(weighted_sum(out.x, wx), weighted_sum(out.y, wy));
  };
  return p;
}

inline Problem tem_problem(Rng& rng, std::size_t trial) {
  const std::size_t N = 4, C = 4;
  TemConfig cfg;
  cfg.adapters = trial % 5 != 4;  // mostly with the adapter mixture
  Problem p;
  init_tem_params(p.params, "tem", C, cfg, rng);
  randomize(p.params, rng);
  p.inputs = {{"tx", uniform_tensor({N, C}, rng)}, {"ty", uniform_tensor({N, C}, rng)}};
  Tensor wx = uniform_tensor({N, C}, rng), wy = uniform_tensor({N, C}, rng);
  p.loss = [cfg, wx, wy](Graph&, const ParamStore& ps, const std::map<std::string, Var>& in) {
    auto out = tem_forward(in.at("tx"), in.at("ty"), ps, "tem", cfg);
    return add(weighted_sum(out.x, wx), weighted_sum(out.y, wy));
  };
  return p;
}

inline Problem agf_problem(Rng& rng, std::size_t) {
  const std::size_t C = 4, H = 4, W = 4;
  AgfConfig cfg{2, 3};
  Problem p;
  init_agf_params(p.params, "agf", C, cfg, rng);
  randomize(p.params, rng);
  p.inputs = {{"fx", uniform_tensor({C, H, W}, rng)}, {"fy", uniform_tensor({C, H, W}, rng)}};
  Tensor w = uniform_tensor({C, H, W}, rng);
  p.loss = [cfg, w](Graph&, const ParamStore& ps, const std::map<std::string, Var>& in) {
    return weighted_sum(agf_forward(in.at("fx"), in.at("fy"), ps, "agf", cfg).fused, w);
  };
  return p;
}

inline Problem head_problem(Rng& rng, std::size_t) {
  ModelConfig m;
  m.widths = {2, 3, 4, 4};
  m.head_width = 4;
  m.classes = 3;
  Problem p;
  init_head_params(p.params, m, rng);
  randomize(p.params, rng);
  for (std::size_t i = 0, side = 8; i < 4; ++i, side /= 2)
    p.inputs.emplace("f" + std::to_string(i + 1), uniform_tensor({m.widths[i], side, side}, rng));
  Tensor mask({32, 32});
  for (auto& v : mask.data()) v = static_cast<double>(rng.below(m.classes));
  mask[3] = kernels::kIgnoreLabel;
  p.loss = [mask](Graph&, const ParamStore& ps, const std::map<std::string, Var>& in) {
    MultiScaleFeatures f;
    f.fused = {in.at("f1"), in.at("f2"), in.at("f3"), in.at("f4")};
    return cross_entropy(seg_forward(f, ps), mask);
  };
  return p;
}

/// Block group a parameter belongs to in the composed check.
inline std::string param_group(const std::string& name) {
  const auto dot = name.find('.');
  std::string head = name.substr(0, dot);
  while (!head.empty() && std::isdigit(static_cast<unsigned char>(head.back()))) head.pop_back();
  return head;
}

}  // namespace detail

/// One block of the suite: `trials` fresh problems, every element checked.
inline GradCheckResult gradcheck_block(const std::string& block, const GradCheckOptions& o) {
  using Make = detail::Problem (*)(Rng&, std::size_t);
  struct Entry {
    Make make;
    std::uint64_t stream;
  };
  static const std::map<std::string, Entry> makers{{"fem", {detail::fem_problem, 1}},
                                                   {"tem", {detail::tem_problem, 2}},
                                                   {"agf", {detail::agf_problem, 3}},
                                                   {"head", {detail::head_problem, 4}}};
  const auto it = makers.find(block);
  if (it == makers.end()) throw ConfigError("gradcheck: unknown block " + block);
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckResult r{block, 0.0, "", o.trials, 0, o.block_tolerance, 0.0};
  const Rng root = Rng(o.seed).split(Stream::gradcheck).split(it->second.stream);
  for (std::size_t t = 0; t < o.trials; ++t) {
    Rng rng = root.split(t);
    detail::check_problem(it->second.make(rng, t), o, r);
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Composed 32x32 check: per model instance, `composed_samples` random
/// parameter elements from each block group (bb, fem, tem, agf, head).
/// trials counts sampled elements per group, so instances = ceil(trials / samples).
inline GradCheckResult gradcheck_composed(const GradCheckOptions& o) {
  const auto t0 = std::chrono::steady_clock::now();
  GradCheckResult r{"end_to_end", 0.0, "", o.trials, 0, o.composed_tolerance, 0.0};
  const std::size_t per = std::max<std::size_t>(o.composed_samples, 1);
  const std::size_t instances = (o.trials + per - 1) / per;
  ModelConfig m;
  Rng root = Rng(o.seed).split(Stream::gradcheck).split(5);
  for (std::size_t t = 0; t < instances; ++t) {
    Rng rng = root.split(t);
    ParamStore ps = init_model_params(m, rng.next_u64());
    const Tensor ir = uniform_tensor({3, 32, 32}, rng, 0.0, 1.0);
    const Tensor vis = uniform_tensor({3, 32, 32}, rng, 0.0, 1.0);
    Tensor mask({32, 32});
    for (auto& v : mask.data()) v = static_cast<double>(rng.below(m.classes));
    auto loss_of = [&](const ParamStore& p) {
      Graph g;
      return scene_loss(g, ir, vis, mask, p, m).value().item();
    };
    Graph g(Graph::Options{o.fault_op});
    Gradients grads = g.backward(scene_loss(g, ir, vis, mask, ps, m));

    std::map<std::string, std::vector<std::string>> groups;
    for (const auto& name : ps.names()) groups[detail::param_group(name)].push_back(name);
    for (const auto& [group, names] : groups) {
      for (std::size_t k = 0; k < per; ++k) {
        const std::string& name = names[rng.below(names.size())];
        Tensor& p = ps.get(name);
        const std::size_t i = rng.below(p.numel());
        const double saved = p[i];
        p[i] = saved + o.eps;
        const double up = loss_of(ps);
        p[i] = saved - o.eps;
        const double down = loss_of(ps);
        p[i] = saved;
        const double numeric = (up - down) / (2 * o.eps);
        const double analytic = grads.params.at(name)[i];
        // Scaled by the tensor's gradient magnitude, as in the block check.
        const double scale = std::max({max_abs(grads.params.at(name)), std::abs(numeric), 1e-6});
        const double e = std::abs(analytic - numeric) / scale;
        ++r.checks;
        if (e > r.max_rel_error || r.worst.empty()) {
          r.max_rel_error = std::max(r.max_rel_error, e);
          r.worst = name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline const std::vector<std::string>& gradcheck_blocks() {
  static const std::vector<std::string> b{"fem", "tem", "agf", "head", "end_to_end"};
  return b;
}

inline std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& o) {
  if (o.trials == 0) throw ConfigError("gradcheck: trials must be positive");
  std::vector<GradCheckResult> out;
  for (const auto& b : gradcheck_blocks())
    out.push_back(b == "end_to_end" ? gradcheck_composed(o) : gradcheck_block(b, o));
  return out;
}

}  // namespace ivgf
