#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <vector>

#include "kelixpq/quantalt.hpp"
#include "kelixpq/synth.hpp"

using namespace kelixpq;

namespace {

std::vector<double> normals(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

}  // namespace

TEST(FSQ, IndexIsABijectionForSmallLevels) {
  const FSQConfig cfg{{2, 3, 2}};
  EXPECT_EQ(cfg.index_space(), 12u);
  std::set<std::vector<std::uint32_t>> seen;
  for (std::uint64_t i = 0; i < cfg.index_space(); ++i) {
    const auto digits = fsq_decode(i, cfg);
    EXPECT_EQ(fsq_encode(digits, cfg), i);
    EXPECT_TRUE(seen.insert(digits).second);
  }
  for (std::uint32_t a = 0; a < 2; ++a)
    for (std::uint32_t b = 0; b < 3; ++b)
      for (std::uint32_t c = 0; c < 2; ++c) {
        const std::vector<std::uint32_t> d{a, b, c};
        EXPECT_EQ(fsq_decode(fsq_encode(d, cfg), cfg), d);
      }
}

TEST(FSQ, CardinalityOfFourSixteens) {
  const FSQConfig cfg{{16, 16, 16, 16}};
  EXPECT_EQ(cfg.index_space(), 65536u);
  EXPECT_EQ(fsq_decode(65535, cfg), (std::vector<std::uint32_t>{15, 15, 15, 15}));
  EXPECT_THROW(fsq_decode(65536, cfg), UsageError);
}

TEST(FSQ, ExactLevelValuesQuantizeToThemselves) {
  FSQConfig cfg{{5, 3}};
  cfg.squash = FsqSquash::kClamp;
  for (std::uint64_t i = 0; i < cfg.index_space(); ++i) {
    const auto v = fsq_levels_of(fsq_decode(i, cfg), cfg);
    const auto r = fsq_quantize(v, cfg);
    EXPECT_EQ(r.index, i);
    EXPECT_EQ(r.z_q, v);
  }
}

TEST(FSQ, QuantizedValueIsTheNearestLevel) {
  const FSQConfig cfg{{4, 7, 2}};
  Rng rng(1);
  for (int t = 0; t < 300; ++t) {
    const auto z = normals(3, rng);
    const auto r = fsq_quantize(z, cfg);
    for (std::size_t j = 0; j < 3; ++j) {
      const double u = fsq_squash(z[j], cfg);
      double best = 1e9;
      for (std::uint32_t k = 0; k < cfg.levels[j]; ++k) best = std::min(best, std::abs(u - cfg.level_value(j, k)));
      EXPECT_NEAR(std::abs(u - r.z_q[j]), best, 1e-12);
    }
  }
}

TEST(FSQ, GridListsEveryCellInIndexOrder) {
  const FSQConfig cfg{{2, 3}};
  const auto grid = fsq_grid(cfg);
  ASSERT_EQ(grid.size(), 12u);
  EXPECT_EQ(grid[0], -1.0);
  EXPECT_EQ(grid[1], -1.0);
  EXPECT_EQ(grid[2], 1.0);
  EXPECT_EQ(grid[3], -1.0);
  EXPECT_EQ(grid[11], 1.0);
}

TEST(FSQ, RejectsBadLevels) {
  EXPECT_THROW((FSQConfig{{1, 3}}).validate(), UsageError);
  EXPECT_THROW((FSQConfig{{}}).validate(), UsageError);
  EXPECT_THROW(fsq_quantize(std::vector<double>{0.0}, FSQConfig{{2, 2}}), UsageError);
}

TEST(RQ, ResidualNormIsNonIncreasingWithZeroEntry) {
  Rng rng(2);
  for (int t = 0; t < 200; ++t) {
    RQConfig cfg;
    for (int l = 0; l < 4; ++l) {
      auto v = normals(6 * 3, rng);
      for (std::size_t j = 0; j < 3; ++j) v[j] = 0.0;  // entry 0 is the zero vector
      cfg.layers.emplace_back(ndiff::Shape{6, 3}, v);
    }
    const auto z = normals(3, rng);
    const auto r = rq_quantize(z, cfg);
    double prev = std::sqrt(z[0] * z[0] + z[1] * z[1] + z[2] * z[2]);
    for (double n : r.residual_norms) {
      EXPECT_LE(n, prev + 1e-12);
      prev = n;
    }
  }
}

TEST(RQ, ReconstructionIsSumOfSelectedEntries) {
  Rng rng(3);
  RQConfig cfg;
  for (int l = 0; l < 3; ++l) cfg.layers.emplace_back(ndiff::Shape{5, 2}, normals(10, rng));
  const auto z = normals(2, rng);
  const auto r = rq_quantize(z, cfg);
  for (std::size_t j = 0; j < 2; ++j) {
    double s = 0.0;
    for (const auto& e : r.selected) s += e[j];
    EXPECT_NEAR(r.z_q[j], s, 1e-12);
  }
  const double dx = z[0] - r.z_q[0], dy = z[1] - r.z_q[1];
  EXPECT_NEAR(r.residual_norms.back(), std::sqrt(dx * dx + dy * dy), 1e-12);
  for (std::size_t l = 0; l < 3; ++l)
    EXPECT_EQ(r.indices[l], brute_quantize(r.residuals[l], cfg.layers[l].values));
}

TEST(RQ, FromCodebookUsesEffectiveEntries) {
  Rng rng(4);
  std::vector<double> centers = normals(8 * 2, rng);
  auto cb = partition(centers, 2, 2, 1);
  cb.W[1].values = {2.0, 0.0, 0.0, 2.0};
  const auto cfg = RQConfig::from_codebook(cb);
  ASSERT_EQ(cfg.layers.size(), 2u);
  EXPECT_EQ(cfg.layers[1].values, effective_entries(cb, 1));
}

TEST(Quantizers, SharedInterfaceAcrossSchemes) {
  Rng rng(5);
  PQConfig pc;
  pc.D = 4;
  pc.d = 2;
  pc.N = 2;
  pc.S = 8;
  const auto cb = partition(normals(8 * 2, rng), 2, 2, 0);
  PQQuantizer pq(pc, SubspaceProjector::orthonormal(4, 2, 2, 1), cb);
  FSQQuantizer fsq(FSQConfig{{4, 4, 2}});
  RQQuantizer rq(RQConfig::from_codebook(partition(normals(8 * 4, rng), 4, 2, 0)));

  EXPECT_EQ(pq.capacity_bits(), capacity_bits(2, 4));
  EXPECT_EQ(fsq.capacity_bits(), 5.0);
  EXPECT_EQ(rq.capacity_bits(), 4.0);
  EXPECT_EQ(pq.slot_offsets(), (std::vector<std::uint32_t>{0, 4}));
  EXPECT_EQ(rq.slot_offsets(), (std::vector<std::uint32_t>{0, 4}));

  for (const PatchQuantizer* q : {static_cast<const PatchQuantizer*>(&pq), static_cast<const PatchQuantizer*>(&fsq),
                                  static_cast<const PatchQuantizer*>(&rq)}) {
    const auto z = normals(q->input_dim() * 6, rng);
    const auto img = q->quantize_image(z, 2, 3);
    EXPECT_EQ(img.patches.size(), 6u);
    const auto sizes = q->slot_sizes();
    for (const auto& p : img.patches) {
      ASSERT_EQ(p.indices.size(), q->slots());
      for (std::size_t s = 0; s < sizes.size(); ++s) EXPECT_LT(p.indices[s], sizes[s]);
    }
  }
}

TEST(Quantizers, SchemeNames) {
  EXPECT_EQ(scheme_from_string("fsq"), Scheme::kFSQ);
  EXPECT_EQ(to_string(Scheme::kRQ), "rq");
  EXPECT_THROW(scheme_from_string("lfq"), UsageError);
}
