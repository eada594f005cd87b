#include <gtest/gtest.h>

#include <algorithm>

#include "ivgf/augment.hpp"

using namespace ivgf;

namespace {

// Values away from the fill value so erased elements are always visible.
Tensor image(Rng& rng, std::size_t c = 3, std::size_t h = 16, std::size_t w = 16) {
  return uniform_tensor({c, h, w}, rng, 0.1, 1.0);
}

std::size_t count_diff(const Tensor& a, const Tensor& b) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) n += a[i] != b[i];
  return n;
}

}  // namespace

TEST(Cutmix, ZeroProbabilityIsIdentity) {
  Rng rng(1);
  AugConfig cfg;
  cfg.p_cutmix = 0.0;
  Tensor x = image(rng), y = image(rng);
  AugResult r = cutmix_apply(x, y, cfg, rng);
  EXPECT_EQ(r.x, x);
  EXPECT_EQ(r.y, y);
  EXPECT_TRUE(r.record.swapped_cells.empty());
}

TEST(Cutmix, ExchangeLawAndConservation) {
  Rng rng(2);
  AugConfig cfg;
  cfg.p_cutmix = 0.5;
  for (int t = 0; t < 1000; ++t) {
    Tensor x = image(rng, 2, 8, 12), y = image(rng, 2, 8, 12);
    AugResult r = cutmix_apply(x, y, cfg, rng);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const bool took_y = r.x[i] == y[i] && x[i] != y[i];
      ASSERT_TRUE(r.x[i] == x[i] || r.x[i] == y[i]);
      ASSERT_EQ(took_y, r.y[i] == x[i] && x[i] != y[i]);
      // Per-position multiset conservation.
      ASSERT_EQ(std::minmax(r.x[i], r.y[i]), std::minmax(x[i], y[i]));
    }
  }
}

TEST(Cutmix, Seed42ReplayCount) {
  AugConfig cfg;
  cfg.p_cutmix = 0.5;
  Tensor x({1, 16, 16}, 0.2), y({1, 16, 16}, 0.9);
  Rng rng(42);
  AugResult r = cutmix_apply(x, y, cfg, rng);
  // Independent replay of the Bernoulli stream.
  Rng replay(42);
  std::size_t expected = 0;
  for (int c = 0; c < 16; ++c) expected += replay.uniform() < 0.5;
  EXPECT_EQ(r.record.swapped_cells.size(), expected);
  std::size_t swapped_px = 0;
  for (double v : r.x.data()) swapped_px += v == 0.9;
  EXPECT_EQ(swapped_px, expected * 16);
}

TEST(Cutmix, AlwaysSwapExchangesWholeImages) {
  Rng rng(3);
  AugConfig cfg;
  cfg.p_cutmix = 1.0;
  Tensor x = image(rng), y = image(rng);
  AugResult r = cutmix_apply(x, y, cfg, rng);
  EXPECT_EQ(r.x, y);
  EXPECT_EQ(r.y, x);
}

TEST(Cutout, ZeroProbabilityIsIdentity) {
  Rng rng(4);
  AugConfig cfg;
  cfg.p_cutout = 0.0;
  Tensor x = image(rng), y = image(rng);
  AugResult r = cutout_apply(x, y, cfg, rng);
  EXPECT_EQ(r.x, x);
  EXPECT_EQ(r.y, y);
  EXPECT_EQ(r.record.cutout_modality, Modality::none);
}

TEST(Cutout, CountingLawAndSingleModality) {
  Rng rng(5);
  AugConfig cfg;
  cfg.p_cutout = 1.0;
  cfg.fill_value = 0.0;
  for (std::size_t cells : {0u, 1u, 2u, 5u, 16u}) {
    cfg.cutout_cells = cells;
    for (int t = 0; t < 200; ++t) {
      Tensor x = image(rng), y = image(rng);
      AugResult r = cutout_apply(x, y, cfg, rng);
      const std::size_t dx = count_diff(x, r.x), dy = count_diff(y, r.y);
      const std::size_t want = cells * (16 / 4) * (16 / 4) * 3;
      ASSERT_EQ(std::min(dx, dy), 0u);
      ASSERT_EQ(dx + dy, want);
      const Tensor& changed = dx ? r.x : r.y;
      const Tensor& orig = dx ? x : y;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        if (changed[i] != orig[i]) {
          ASSERT_EQ(changed[i], cfg.fill_value);
        }
      }
      ASSERT_EQ(r.record.cutout_cells_applied.size(), cells);
      ASSERT_TRUE(std::adjacent_find(r.record.cutout_cells_applied.begin(), r.record.cutout_cells_applied.end()) ==
                  r.record.cutout_cells_applied.end());
    }
  }
}

TEST(Cutout, ModalityFrequency) {
  AugConfig cfg;
  cfg.p_cutout = 0.5;
  Tensor x({1, 8, 8}, 0.5), y({1, 8, 8}, 0.5);
  std::size_t ir = 0, vis = 0;
  Rng rng(6);
  for (int t = 0; t < 10000; ++t) {
    AugResult r = cutout_apply(x, y, cfg, rng);
    ir += r.record.cutout_modality == Modality::ir;
    vis += r.record.cutout_modality == Modality::vis;
  }
  EXPECT_NEAR(ir / 10000.0, 0.25, 0.02);
  EXPECT_NEAR(vis / 10000.0, 0.25, 0.02);
}

TEST(Cutout, RemainderCellsAbsorbed) {
  AugConfig cfg;  // 4x4 grid on 10x7: last row/col cells are larger
  EXPECT_EQ(cell_rect(0, 10, 7, cfg).h1, 2u);
  const CellRect last = cell_rect(15, 10, 7, cfg);
  EXPECT_EQ(last.h0, 6u);
  EXPECT_EQ(last.h1, 10u);
  EXPECT_EQ(last.w0, 3u);
  EXPECT_EQ(last.w1, 7u);
  std::size_t area = 0;
  for (std::size_t c = 0; c < 16; ++c) {
    const CellRect r = cell_rect(c, 10, 7, cfg);
    area += (r.h1 - r.h0) * (r.w1 - r.w0);
  }
  EXPECT_EQ(area, 70u);
}

TEST(Cma, DisabledIsIdentity) {
  Rng rng(7);
  AugConfig cfg;
  cfg.enabled = false;
  Tensor x = image(rng), y = image(rng);
  Rng before = rng;
  AugResult r = cma_apply(x, y, cfg, rng);
  EXPECT_EQ(r.x, x);
  EXPECT_EQ(r.y, y);
  EXPECT_EQ(rng, before);
}

TEST(Cma, DeterministicUnderSeed) {
  Rng src(8);
  Tensor x = image(src), y = image(src);
  AugConfig cfg;
  Rng a(99), b(99);
  AugResult ra = cma_apply(x, y, cfg, a), rb = cma_apply(x, y, cfg, b);
  EXPECT_EQ(ra.x, rb.x);
  EXPECT_EQ(ra.y, rb.y);
  EXPECT_EQ(ra.record, rb.record);
}

TEST(Cma, EqualsCompositionOfSubOps) {
  Rng src(9);
  AugConfig cfg;
  cfg.p_cutmix = 0.4;
  cfg.p_cutout = 0.8;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor x = image(src), y = image(src);
    Rng rng(seed);
    AugResult got = cma_apply(x, y, cfg, rng);
    Rng root(seed);
    Rng s1 = root.split(1), s2 = root.split(2);
    AugResult mixed = cutmix_apply(x, y, cfg, s1);
    AugResult want = cutout_apply(mixed.x, mixed.y, cfg, s2);
    EXPECT_EQ(got.x, want.x);
    EXPECT_EQ(got.y, want.y);
    EXPECT_EQ(got.record.swapped_cells, mixed.record.swapped_cells);
    EXPECT_EQ(got.record.cutout_cells_applied, want.record.cutout_cells_applied);
  }
}

TEST(Cma, RecordReplays) {
  Rng src(10);
  AugConfig cfg;
  cfg.p_cutmix = 0.5;
  cfg.p_cutout = 1.0;
  for (int t = 0; t < 50; ++t) {
    Tensor x = image(src), y = image(src);
    AugResult r = cma_apply(x, y, cfg, src);
    AugResult replay = apply_record(x, y, r.record, cfg);
    EXPECT_EQ(replay.x, r.x);
    EXPECT_EQ(replay.y, r.y);
  }
}

TEST(Cma, ConsecutiveCallsDiffer) {
  Rng src(11);
  AugConfig cfg;
  cfg.p_cutmix = 0.5;
  Tensor x = image(src), y = image(src);
  Rng rng(5);
  AugResult a = cma_apply(x, y, cfg, rng), b = cma_apply(x, y, cfg, rng);
  EXPECT_FALSE(a.record == b.record && a.x == b.x);
}

TEST(AugConfig, Validation) {
  AugConfig c;
  EXPECT_NO_THROW(c.validate());
  c.p_cutmix = 1.5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = AugConfig{};
  c.cutout_cells = 17;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(parse_modality("thermal"), ConfigError);
}

TEST(Augment, MismatchedPairRejected) {
  Rng rng(12);
  AugConfig cfg;
  EXPECT_THROW(cma_apply(Tensor::zeros({3, 8, 8}), Tensor::zeros({3, 8, 4}), cfg, rng), DimensionError);
}
