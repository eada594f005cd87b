#pragma once

// Line-based `key = value` configuration with dotted keys, `#` comments,
// defaults for absent keys and strict validation.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "ivgf/augment.hpp"
#include "ivgf/fusion.hpp"

namespace ivgf {

struct ModelConfig {
  std::array<std::size_t, 4> widths{32, 64, 128, 256};
  std::size_t depth = 9;       // MHSA layers in stage 3
  std::size_t mhsa_heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t classes = 4;
  std::size_t head_width = 64;
  bool fem_enabled = true;
  FemConfig fem;
  bool tem_enabled = true;
  TemConfig tem;
  std::size_t tem_every = 3;   // TEM after layers 3, 6, 9 for depth 9
  bool agf_enabled = true;
  AgfConfig agf;
};

struct TrainConfig {
  double lr = 1e-4;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch = 2;
  std::size_t steps = 200;
};

struct DataConfig {
  std::size_t train_count = 64;
  std::size_t eval_count = 16;
  std::size_t size = 64;
};

struct RunConfig {
  std::uint64_t seed = 7;
  ModelConfig model;
  AugConfig aug;
  TrainConfig train;
  DataConfig data;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::uint64_t parse_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw std::invalid_argument("expected a non-negative integer");
  return out;
}

inline double parse_real(const std::string& v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out))
    throw std::invalid_argument("expected a finite real number");
  return out;
}

inline bool parse_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("expected true or false");
}

inline std::string fmt_real(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

struct KeySpec {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define IVGF_UINT_KEY(name, field)                                                                 \
  KeySpec{name, [](RunConfig& c, const std::string& v) { c.field = parse_uint(v); },              \
          [](const RunConfig& c) { return std::to_string(c.field); }}
#define IVGF_REAL_KEY(name, field)                                                                 \
  KeySpec{name, [](RunConfig& c, const std::string& v) { c.field = parse_real(v); },              \
          [](const RunConfig& c) { return fmt_real(c.field); }}
#define IVGF_BOOL_KEY(name, field)                                                                 \
  KeySpec{name, [](RunConfig& c, const std::string& v) { c.field = parse_bool(v); },              \
          [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }}

inline const std::vector<KeySpec>& key_specs() {
  static const std::vector<KeySpec> specs = {
      IVGF_UINT_KEY("seed", seed),
      IVGF_UINT_KEY("model.width1", model.widths[0]),
      IVGF_UINT_KEY("model.width2", model.widths[1]),
      IVGF_UINT_KEY("model.width3", model.widths[2]),
      IVGF_UINT_KEY("model.width4", model.widths[3]),
      IVGF_UINT_KEY("model.depth", model.depth),
      IVGF_UINT_KEY("model.heads", model.mhsa_heads),
      IVGF_UINT_KEY("model.mlp_ratio", model.mlp_ratio),
      IVGF_UINT_KEY("model.classes", model.classes),
      IVGF_UINT_KEY("model.head_width", model.head_width),
      IVGF_BOOL_KEY("fem.enabled", model.fem_enabled),
      KeySpec{"fem.mode", [](RunConfig& c, const std::string& v) { c.model.fem.mode = parse_fem_mode(v); },
              [](const RunConfig& c) { return std::string(to_string(c.model.fem.mode)); }},
      IVGF_UINT_KEY("fem.ratio", model.fem.ratio),
      IVGF_BOOL_KEY("tem.enabled", model.tem_enabled),
      IVGF_BOOL_KEY("tem.adapters", model.tem.adapters),
      IVGF_UINT_KEY("tem.num_adapters", model.tem.num_adapters),
      IVGF_UINT_KEY("tem.every", model.tem_every),
      IVGF_BOOL_KEY("agf.enabled", model.agf_enabled),
      IVGF_UINT_KEY("agf.heads", model.agf.heads),
      IVGF_UINT_KEY("agf.merge_kernel", model.agf.merge_kernel),
      IVGF_BOOL_KEY("aug.enabled", aug.enabled),
      IVGF_UINT_KEY("aug.grid_rows", aug.grid_rows),
      IVGF_UINT_KEY("aug.grid_cols", aug.grid_cols),
      IVGF_REAL_KEY("aug.p_cutmix", aug.p_cutmix),
      IVGF_REAL_KEY("aug.p_cutout", aug.p_cutout),
      IVGF_UINT_KEY("aug.cutout_cells", aug.cutout_cells),
      IVGF_REAL_KEY("aug.fill_value", aug.fill_value),
      IVGF_REAL_KEY("train.lr", train.lr),
      IVGF_REAL_KEY("train.weight_decay", train.weight_decay),
      IVGF_REAL_KEY("train.beta1", train.beta1),
      IVGF_REAL_KEY("train.beta2", train.beta2),
      IVGF_REAL_KEY("train.eps", train.eps),
      IVGF_UINT_KEY("train.batch", train.batch),
      IVGF_UINT_KEY("train.steps", train.steps),
      IVGF_UINT_KEY("data.train_count", data.train_count),
      IVGF_UINT_KEY("data.eval_count", data.eval_count),
      IVGF_UINT_KEY("data.size", data.size),
  };
  return specs;
}

#undef IVGF_UINT_KEY
#undef IVGF_REAL_KEY
#undef IVGF_BOOL_KEY

// Throws ConfigError naming the offending key; the caller adds the line.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& key, const std::string& msg) { throw ConfigError(key + ": " + msg); };
  const auto& m = c.model;
  for (std::size_t i = 0; i < 4; ++i)
    if (m.widths[i] == 0) fail("model.width" + std::to_string(i + 1), "must be positive");
  if (m.depth == 0) fail("model.depth", "must be positive");
  if (m.mhsa_heads == 0 || m.widths[2] % m.mhsa_heads != 0)
    fail("model.heads", "must divide stage-3 width " + std::to_string(m.widths[2]));
  if (m.mlp_ratio == 0) fail("model.mlp_ratio", "must be positive");
  if (m.classes < 2 || m.classes > 254) fail("model.classes", "must lie in [2,254]");
  if (m.head_width == 0) fail("model.head_width", "must be positive");
  if (m.fem.ratio == 0) fail("fem.ratio", "must be positive");
  if (m.tem.num_adapters == 0) fail("tem.num_adapters", "must be positive");
  if (m.tem_every == 0) fail("tem.every", "must be positive");
  for (std::size_t i = 0; i < 4; ++i)
    if (m.agf.heads == 0 || m.widths[i] % m.agf.heads != 0)
      fail("agf.heads", "heads must divide channel width " + std::to_string(m.widths[i]));
  if (m.agf.merge_kernel != 1 && m.agf.merge_kernel != 3) fail("agf.merge_kernel", "must be 1 or 3");
  if (c.aug.grid_rows == 0) fail("aug.grid_rows", "must be positive");
  if (c.aug.grid_cols == 0) fail("aug.grid_cols", "must be positive");
  if (c.aug.p_cutmix < 0 || c.aug.p_cutmix > 1) fail("aug.p_cutmix", "must lie in [0,1]");
  if (c.aug.p_cutout < 0 || c.aug.p_cutout > 1) fail("aug.p_cutout", "must lie in [0,1]");
  if (c.aug.cutout_cells > c.aug.grid_rows * c.aug.grid_cols)
    fail("aug.cutout_cells", "exceeds grid cell count");
  if (!(c.train.lr > 0)) fail("train.lr", "must be positive");
  if (c.train.weight_decay < 0) fail("train.weight_decay", "must be non-negative");
  if (c.train.beta1 < 0 || c.train.beta1 >= 1) fail("train.beta1", "must lie in [0,1)");
  if (c.train.beta2 < 0 || c.train.beta2 >= 1) fail("train.beta2", "must lie in [0,1)");
  if (!(c.train.eps > 0)) fail("train.eps", "must be positive");
  if (c.train.batch == 0) fail("train.batch", "must be positive");
  if (c.data.train_count == 0) fail("data.train_count", "must be positive");
  if (c.data.eval_count == 0) fail("data.eval_count", "must be positive");
  if (c.data.size == 0 || c.data.size % 32 != 0) fail("data.size", "must be a positive multiple of 32");
}

}  // namespace detail

/// Parses config text. Absent keys keep their defaults; unknown, duplicate,
/// ill-typed or out-of-range entries throw ConfigError naming line and key.
inline RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::size_t line_no = 0, pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value', got '" + body + "'");
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    const std::string where = "line " + std::to_string(line_no) + ", key '" + key + "'";
    if (key.empty() || value.empty()) throw ConfigError(where + ": empty key or value");
    const auto& specs = detail::key_specs();
    auto it = std::find_if(specs.begin(), specs.end(), [&](const detail::KeySpec& s) { return s.key == key; });
    if (it == specs.end()) throw ConfigError(where + ": unknown key");
    if (!seen.emplace(key, line_no).second)
      throw ConfigError(where + ": duplicate key (first set on line " + std::to_string(seen[key]) + ")");
    try {
      it->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + ": " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + e.what() + ", got '" + value + "'");
    }
  }
  try {
    detail::validate(cfg);
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    const std::string key = msg.substr(0, msg.find(':'));
    auto it = seen.find(key);
    throw ConfigError((it != seen.end() ? "line " + std::to_string(it->second) + ", key '" + key + "'"
                                        : "key '" + key + "' (default)") +
                      msg.substr(msg.find(':')));
  }
  return cfg;
}

/// Full effective configuration, one `key = value` per line in a fixed order.
inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& s : detail::key_specs()) out += s.key + " = " + s.get(cfg) + "\n";
  return out;
}

}  // namespace ivgf
