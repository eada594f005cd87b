#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ivgf/tensor.hpp"

namespace ivgf {

/// Named parameter tensors, ordered by name so iteration is deterministic.
class ParamStore {
 public:
  void set(const std::string& name, Tensor t) { params_.insert_or_assign(name, std::move(t)); }

  void add(const std::string& name, Tensor t) {
    if (!params_.emplace(name, std::move(t)).second) throw ConfigError("duplicate parameter name: " + name);
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }
  Tensor& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, v] : params_) out.push_back(k);
    return out;
  }

  /// Names beginning with `prefix`.
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (auto it = params_.lower_bound(prefix); it != params_.end() && it->first.starts_with(prefix); ++it)
      out.push_back(it->first);
    return out;
  }

  std::size_t size() const noexcept { return params_.size(); }
  bool empty() const noexcept { return params_.empty(); }
  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [k, v] : params_) n += v.numel();
    return n;
  }

  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  std::map<std::string, Tensor> params_;
};

// Weights uniform in +-1/sqrt(fan_in), biases zero.
inline void add_conv(ParamStore& ps, const std::string& name, std::size_t c_out, std::size_t c_in, std::size_t k,
                     Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(c_in * k * k));
  ps.add(name + ".w", uniform_tensor({c_out, c_in, k, k}, rng, -bound, bound));
  ps.add(name + ".b", Tensor::zeros({c_out}));
}

inline void add_linear(ParamStore& ps, const std::string& name, std::size_t d_out, std::size_t d_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  ps.add(name + ".w", uniform_tensor({d_out, d_in}, rng, -bound, bound));
  ps.add(name + ".b", Tensor::zeros({d_out}));
}

inline void add_layer_norm(ParamStore& ps, const std::string& name, std::size_t c) {
  ps.add(name + ".gamma", Tensor::ones({c}));
  ps.add(name + ".beta", Tensor::zeros({c}));
}

}  // namespace ivgf
