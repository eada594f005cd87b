#pragma once

// Cutout&mix augmentation over an (infrared, visible) image pair on a fixed
// patch grid: cutmix exchanges grid cells between the modalities, cutout
// erases cells in one randomly chosen modality.

#include <algorithm>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ivgf/tensor.hpp"

namespace ivgf {

enum class Modality { none, ir, vis };

inline std::string to_string(Modality m) {
  switch (m) {
    case Modality::ir: return "ir";
    case Modality::vis: return "vis";
    case Modality::none: return "none";
  }
  return "?";
}

inline Modality parse_modality(const std::string& s) {
  if (s == "ir") return Modality::ir;
  if (s == "vis") return Modality::vis;
  if (s == "none") return Modality::none;
  throw ConfigError("unknown modality '" + s + "' (expected ir|vis|none)");
}

struct AugConfig {
  std::size_t grid_rows = 4;
  std::size_t grid_cols = 4;
  double p_cutmix = 0.25;
  double p_cutout = 0.5;
  std::size_t cutout_cells = 2;
  double fill_value = 0.0;
  bool enabled = true;

  void validate() const {
    if (grid_rows == 0 || grid_cols == 0) throw ConfigError("aug grid dims must be positive");
    if (p_cutmix < 0.0 || p_cutmix > 1.0) throw ConfigError("aug.p_cutmix must lie in [0,1]");
    if (p_cutout < 0.0 || p_cutout > 1.0) throw ConfigError("aug.p_cutout must lie in [0,1]");
    if (cutout_cells > grid_rows * grid_cols) throw ConfigError("aug.cutout_cells exceeds grid cell count");
  }
};

struct AugRecord {
  std::vector<std::size_t> swapped_cells;
  Modality cutout_modality = Modality::none;
  std::vector<std::size_t> cutout_cells_applied;

  friend bool operator==(const AugRecord&, const AugRecord&) = default;

  std::string to_text() const {
    std::ostringstream os;
    os << "swapped_cells";
    for (auto c : swapped_cells) os << ' ' << c;
    os << "\ncutout_modality " << to_string(cutout_modality) << "\ncutout_cells";
    for (auto c : cutout_cells_applied) os << ' ' << c;
    os << '\n';
    return os.str();
  }
};

struct ImagePair {
  Tensor x, y;  // infrared, visible; [C,H,W]
};

struct AugResult {
  Tensor x, y;
  AugRecord record;
};

/// Pixel rectangle of a grid cell. Trailing cells absorb the remainder.
struct CellRect {
  std::size_t h0, h1, w0, w1;
};

inline CellRect cell_rect(std::size_t cell, std::size_t H, std::size_t W, const AugConfig& cfg) {
  const std::size_t r = cell / cfg.grid_cols, c = cell % cfg.grid_cols;
  const std::size_t ch = H / cfg.grid_rows, cw = W / cfg.grid_cols;
  return {r * ch, r + 1 == cfg.grid_rows ? H : (r + 1) * ch, c * cw, c + 1 == cfg.grid_cols ? W : (c + 1) * cw};
}

namespace detail {
inline void check_pair(const Tensor& x, const Tensor& y, const AugConfig& cfg) {
  if (x.rank() != 3 || x.shape() != y.shape())
    throw DimensionError("augment: images must be matching [C,H,W], got " + shape_str(x.shape()) + " and " +
                         shape_str(y.shape()));
  if (x.dim(1) < cfg.grid_rows || x.dim(2) < cfg.grid_cols)
    throw DimensionError("augment: image " + shape_str(x.shape()) + " smaller than the patch grid");
}

template <class Fn>
void for_cell(const Tensor& t, std::size_t cell, const AugConfig& cfg, Fn&& fn) {
  const auto rect = cell_rect(cell, t.dim(1), t.dim(2), cfg);
  for (std::size_t ch = 0; ch < t.dim(0); ++ch)
    for (std::size_t h = rect.h0; h < rect.h1; ++h)
      for (std::size_t w = rect.w0; w < rect.w1; ++w) fn((ch * t.dim(1) + h) * t.dim(2) + w);
}
}  // namespace detail

/// Reapplies a recorded augmentation. Swaps first, then erasure.
inline AugResult apply_record(const Tensor& x, const Tensor& y, const AugRecord& rec, const AugConfig& cfg) {
  detail::check_pair(x, y, cfg);
  AugResult out{x, y, rec};
  for (auto cell : rec.swapped_cells)
    detail::for_cell(out.x, cell, cfg, [&](std::size_t i) { std::swap(out.x[i], out.y[i]); });
  if (rec.cutout_modality != Modality::none) {
    Tensor& target = rec.cutout_modality == Modality::ir ? out.x : out.y;
    for (auto cell : rec.cutout_cells_applied)
      detail::for_cell(target, cell, cfg, [&](std::size_t i) { target[i] = cfg.fill_value; });
  }
  return out;
}

/// One Bernoulli(p_cutmix) draw per cell in row-major order; selected cells
/// are exchanged between the modalities.
inline AugResult cutmix_apply(const Tensor& x, const Tensor& y, const AugConfig& cfg, Rng& rng) {
  detail::check_pair(x, y, cfg);
  AugRecord rec;
  const std::size_t cells = cfg.grid_rows * cfg.grid_cols;
  for (std::size_t cell = 0; cell < cells; ++cell)
    if (rng.bernoulli(cfg.p_cutmix)) rec.swapped_cells.push_back(cell);
  return apply_record(x, y, rec, cfg);
}

/// With probability p_cutout, erases cutout_cells distinct cells of one
/// uniformly chosen modality. Draws: apply, modality, then a partial shuffle.
inline AugResult cutout_apply(const Tensor& x, const Tensor& y, const AugConfig& cfg, Rng& rng) {
  detail::check_pair(x, y, cfg);
  AugRecord rec;
  if (rng.bernoulli(cfg.p_cutout)) {
    rec.cutout_modality = rng.below(2) == 0 ? Modality::ir : Modality::vis;
    std::vector<std::size_t> cells(cfg.grid_rows * cfg.grid_cols);
    std::iota(cells.begin(), cells.end(), std::size_t{0});
    for (std::size_t i = 0; i < cfg.cutout_cells; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(cells.size() - i));
      std::swap(cells[i], cells[j]);
    }
    rec.cutout_cells_applied.assign(cells.begin(), cells.begin() + static_cast<std::ptrdiff_t>(cfg.cutout_cells));
    std::sort(rec.cutout_cells_applied.begin(), rec.cutout_cells_applied.end());
  }
  return apply_record(x, y, rec, cfg);
}

/// Cutmix on rng.split(1), then cutout on rng.split(2); advances `rng` by one
/// draw so consecutive calls get fresh streams.
inline AugResult cma_apply(const Tensor& x, const Tensor& y, const AugConfig& cfg, Rng& rng) {
  detail::check_pair(x, y, cfg);
  if (!cfg.enabled) return {x, y, {}};
  Rng mix_stream = rng.split(1);
  Rng cut_stream = rng.split(2);
  rng.next_u64();
  AugResult mixed = cutmix_apply(x, y, cfg, mix_stream);
  AugResult cut = cutout_apply(mixed.x, mixed.y, cfg, cut_stream);
  cut.record.swapped_cells = std::move(mixed.record.swapped_cells);
  return cut;
}

}  // namespace ivgf
