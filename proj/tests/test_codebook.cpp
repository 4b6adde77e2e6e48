#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>
#include <vector>

#include "kelixpq/codebook.hpp"
#include "kelixpq/synth.hpp"

using namespace kelixpq;

namespace {

Codebook small_codebook(std::uint64_t seed = 7) {
  Rng rng(seed);
  std::vector<double> centers(12 * 3);
  for (auto& x : centers) x = rng.normal();
  return partition(centers, 3, 4, seed);
}

/// Cost of assigning every point to its nearest center, computed directly.
double direct_cost(const std::vector<double>& pts, const std::vector<double>& centers, std::size_t d) {
  double total = 0.0;
  for (std::size_t i = 0; i < pts.size() / d; ++i) {
    double best = 1e300;
    for (std::size_t c = 0; c < centers.size() / d; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (pts[i * d + j] - centers[c * d + j]) * (pts[i * d + j] - centers[c * d + j]);
      best = std::min(best, s);
    }
    total += best;
  }
  return total;
}

}  // namespace

TEST(KMeans, CostIsMonotoneNonIncreasing) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    MixtureSpec spec;
    spec.components = 6;
    spec.D = 4;
    spec.mean_scale = 2.0;  // overlapping clusters make Lloyd take many steps
    spec.points_per_component = 40;
    spec.seed = seed;
    const auto mix = gen_mixture(spec);
    const auto km = kmeans(mix.points.values, 4, 10, 100, seed);
    for (std::size_t i = 1; i < km.cost_history.size(); ++i)
      EXPECT_LE(km.cost_history[i], km.cost_history[i - 1]) << "seed " << seed << " iter " << i;
  }
}

TEST(KMeans, FinalCostMatchesDirectAssignment) {
  MixtureSpec spec;
  spec.components = 5;
  spec.D = 3;
  spec.points_per_component = 30;
  spec.seed = 3;
  const auto mix = gen_mixture(spec);
  const auto km = kmeans(mix.points.values, 3, 5, 50, 1);
  EXPECT_NEAR(km.final_cost(), direct_cost(mix.points.values, km.centers, 3), 1e-9 * km.final_cost() + 1e-12);
}

TEST(KMeans, RecoversSeparatedMixture) {
  MixtureSpec spec;
  spec.components = 8;
  spec.D = 16;
  spec.mean_scale = 10.0;
  spec.sigma = 1.0;
  spec.points_per_component = 100;
  spec.seed = 42;
  const auto mix = gen_mixture(spec);
  const auto km = kmeans(mix.points.values, 16, 8, 100, 42);
  std::vector<std::uint32_t> a(km.assignments.begin(), km.assignments.end());
  EXPECT_GE(adjusted_rand_index(a, mix.points.labels), 0.99);
}

TEST(KMeans, DeterministicForSeed) {
  MixtureSpec spec;
  spec.seed = 9;
  const auto mix = gen_mixture(spec);
  const auto a = kmeans(mix.points.values, spec.D, 8, 20, 5);
  const auto b = kmeans(mix.points.values, spec.D, 8, 20, 5);
  EXPECT_EQ(a.centers, b.centers);
  EXPECT_EQ(a.assignments, b.assignments);
}

TEST(KMeans, RejectsMoreClustersThanPoints) {
  std::vector<double> pts{0.0, 1.0, 2.0};
  EXPECT_THROW(kmeans(pts, 1, 4, 10, 0), UsageError);
  EXPECT_THROW(kmeans(pts, 2, 1, 10, 0), UsageError);
}

TEST(KMeans, SingleClusterIsTheMean) {
  std::vector<double> pts{0.0, 2.0, 4.0, 10.0};
  const auto km = kmeans(pts, 1, 1, 10, 0);
  EXPECT_DOUBLE_EQ(km.centers[0], 4.0);
}

TEST(Codebook, PartitionIsABijection) {
  const auto cb = small_codebook();
  cb.validate();
  EXPECT_EQ(cb.K(), 3u);
  std::set<std::uint32_t> seen;
  for (std::size_t i = 0; i < cb.N; ++i)
    for (auto e : cb.sub_range(i)) EXPECT_TRUE(seen.insert(e).second);
  EXPECT_EQ(seen.size(), cb.S);
}

TEST(Codebook, PartitionRejectsNonDivisor) {
  std::vector<double> centers(10 * 2, 0.5);
  EXPECT_THROW(partition(centers, 2, 3, 0), UsageError);
}

TEST(Codebook, IdentityOrderKeepsIdentityPermutation) {
  std::vector<double> centers(8, 0.0);
  const auto cb = partition(centers, 1, 2, 0, PartitionOrder::kIdentity);
  for (std::uint32_t i = 0; i < 8; ++i) EXPECT_EQ(cb.permutation[i], i);
}

TEST(Codebook, EffectiveEntriesAreCentersTimesW) {
  auto cb = small_codebook();
  Rng rng(11);
  for (auto& w : cb.W)
    for (auto& x : w.values) x = rng.normal();
  for (std::size_t i = 0; i < cb.N; ++i) {
    const auto C = cb.sub_centers(i);
    const auto E = effective_entries(cb, i);
    for (std::size_t r = 0; r < cb.K(); ++r)
      for (std::size_t c = 0; c < cb.d; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < cb.d; ++p) s += C[r * cb.d + p] * cb.W[i].values[p * cb.d + c];
        EXPECT_NEAR(E[r * cb.d + c], s, 1e-12);
      }
  }
}

TEST(Codebook, IdentityWLeavesEntriesEqualToCenters) {
  const auto cb = small_codebook();
  for (std::size_t i = 0; i < cb.N; ++i) EXPECT_EQ(effective_entries(cb, i), cb.sub_centers(i));
}

TEST(Codebook, GraphEffectiveEntriesMatchPlain) {
  auto cb = small_codebook();
  cb.W[1].values[0] = 2.5;
  ndiff::Graph<double> g;
  auto w = g.param(cb.W[1]);
  auto e = effective_entries(g, cb, 1, w);
  const auto v = g.value(e);
  EXPECT_EQ(std::vector<double>(v.begin(), v.end()), effective_entries(cb, 1));
}

TEST(Codebook, EncodeDecodeRoundTrip) {
  auto cb = small_codebook();
  cb.W[2].values[4] = -0.125;
  const auto bytes = encode_codebook(cb);
  EXPECT_EQ(decode_codebook(bytes), cb);
  EXPECT_EQ(encode_codebook(decode_codebook(bytes)), bytes);
}

TEST(Codebook, FileRoundTrip) {
  const auto cb = small_codebook();
  const auto path = std::filesystem::temp_directory_path() / "kelixpq_test_cb.cbk";
  save_codebook(cb, path);
  EXPECT_EQ(load_codebook(path), cb);
  std::filesystem::remove(path);
}

TEST(Codebook, CorruptionIsDetected) {
  const auto bytes = encode_codebook(small_codebook());
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_codebook(flipped), FormatError);

  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_codebook(magic), BadMagicError);

  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(bytes.size() - 7));
  EXPECT_THROW(decode_codebook(truncated), FormatError);
}

TEST(Codebook, SubCodebookIndexIsChecked) {
  const auto cb = small_codebook();
  EXPECT_THROW(cb.sub_range(cb.N), UsageError);
}
