#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "kelixpq/nbp.hpp"
#include "kelixpq/rng.hpp"

using namespace kelixpq;

namespace {

const VocabLayout kLayout{20, 64};

QuantizedImage random_image(std::size_t rows, std::size_t cols, std::size_t N, std::uint32_t K, Rng& rng) {
  QuantizedImage img{rows, cols, {}};
  for (std::size_t p = 0; p < rows * cols; ++p) {
    QuantizedPatch q;
    for (std::size_t i = 0; i < N; ++i) q.indices.push_back(static_cast<std::uint32_t>(rng.index(K)));
    img.patches.push_back(q);
  }
  return img;
}

std::vector<std::uint32_t> offsets(std::size_t N, std::uint32_t K) {
  std::vector<std::uint32_t> o;
  for (std::size_t i = 0; i < N; ++i) o.push_back(static_cast<std::uint32_t>(i) * K);
  return o;
}

/// A random interleaving of text runs and bracketed images.
std::vector<Block> random_sequence(Rng& rng) {
  std::vector<Block> out;
  const std::vector<std::uint32_t> sizes(8, 8);
  const auto off = offsets(8, 8);
  const std::size_t parts = 1 + rng.index(4);
  for (std::size_t p = 0; p < parts; ++p) {
    if (rng.index(2)) {
      std::vector<std::uint32_t> ids;
      for (std::size_t k = 0, n = 1 + rng.index(6); k < n; ++k) ids.push_back(static_cast<std::uint32_t>(rng.index(20)));
      for (auto& b : make_text_blocks(ids, kLayout)) out.push_back(b);
    } else {
      const auto img = random_image(1 + rng.index(3), 1 + rng.index(3), 8, 8, rng);
      for (auto& b : make_visual_blocks(img, kLayout, off, sizes)) out.push_back(b);
    }
  }
  return out;
}

}  // namespace

TEST(Nbp, BlockSizes) {
  Rng rng(1);
  const auto text = make_text_blocks(std::vector<std::uint32_t>{3, 4}, kLayout);
  for (const auto& b : text) EXPECT_EQ(b.M(), 2u);
  const auto img = random_image(2, 2, 8, 8, rng);
  const std::vector<std::uint32_t> sizes(8, 8);
  for (const auto& b : make_visual_blocks(img, kLayout, offsets(8, 8), sizes)) {
    if (b.kind == BlockKind::kVisual)
      EXPECT_EQ(b.M(), 9u);
    else
      EXPECT_EQ(b.M(), 2u);
    validate_block(b, kLayout, 8);
  }
}

TEST(Nbp, VisualSpanStructure) {
  QuantizedImage img{2, 1, {}};
  img.patches.resize(2);
  img.patches[0].indices = {1, 2};
  img.patches[1].indices = {3, 0};
  const std::vector<std::uint32_t> sizes{32, 32};
  const auto blocks = make_visual_blocks(img, kLayout, offsets(2, 32), sizes);
  std::vector<std::uint32_t> firsts;
  for (const auto& b : blocks) firsts.push_back(b.tokens[0]);
  const auto L = kLayout;
  const std::vector<std::uint32_t> expected{
      L.vis_start(), L.pos_start(), L.digit(0), L.comma(), L.digit(0), L.pos_end(), L.visual_offset() + 1,
      L.pos_start(), L.digit(1),    L.comma(),  L.digit(0), L.pos_end(), L.visual_offset() + 3, L.vis_end()};
  EXPECT_EQ(firsts, expected);
  EXPECT_EQ(blocks[6].tokens, (std::vector<std::uint32_t>{L.visual_offset() + 1, L.visual_offset() + 32 + 2, L.eob()}));
  EXPECT_EQ(blocks.size(), 2 + visual_overhead_blocks(2));
}

TEST(Nbp, OverheadCountsMarkers) {
  EXPECT_EQ(visual_overhead_blocks(1), 2u + 5u);
  EXPECT_EQ(visual_overhead_blocks(11), 2u + 10u * 5u + 6u);
}

TEST(Nbp, PackUnpackRoundTrip) {
  Rng rng(2);
  for (int t = 0; t < 1000; ++t) {
    const auto seq = random_sequence(rng);
    EXPECT_EQ(unflatten(flatten(seq), kLayout), seq);
    EXPECT_TRUE(brackets_balanced(seq, kLayout));
  }
}

TEST(Nbp, JsonRoundTrip) {
  Rng rng(3);
  const auto seq = random_sequence(rng);
  EXPECT_EQ(blocks_from_json(nlohmann::json::parse(to_json(seq).dump())), seq);
  EXPECT_THROW(blocks_from_json(nlohmann::json::parse(R"({"blocks":[{"kind":"audio","tokens":[1]}]})")), FormatError);
  EXPECT_THROW(blocks_from_json(nlohmann::json::parse(R"({"nope":1})")), FormatError);
}

TEST(Nbp, BracketChecks) {
  const auto L = kLayout;
  std::vector<Block> bad{text_block(L.vis_start(), L), text_block(L.vis_start(), L)};
  EXPECT_FALSE(brackets_balanced(bad, L));
  std::vector<Block> stray{Block{BlockKind::kVisual, {L.visual_offset(), L.eob()}}};
  EXPECT_FALSE(brackets_balanced(stray, L));
  std::vector<Block> open{text_block(L.vis_start(), L)};
  EXPECT_FALSE(brackets_balanced(open, L));
}

TEST(Nbp, TextBlocksRejectVisualIdsAndEob) {
  EXPECT_THROW(make_text_blocks(std::vector<std::uint32_t>{kLayout.visual_offset()}, kLayout), UsageError);
  EXPECT_THROW(make_text_blocks(std::vector<std::uint32_t>{kLayout.eob()}, kLayout), UsageError);
}

TEST(Nbp, UnflattenRequiresTrailingEob) {
  EXPECT_THROW(unflatten(std::vector<std::uint32_t>{1, 2}, kLayout), UsageError);
}

TEST(Nbp, BlockEncodeSumsAllButEob) {
  const std::size_t V = kLayout.total();
  std::vector<double> vals(V * 2);
  for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = static_cast<double>(i % 7) - 3.0;
  const Matrix table({V, 2}, vals);
  const Block b{BlockKind::kVisual, {kLayout.visual_offset() + 1, kLayout.visual_offset() + 5, kLayout.eob()}};
  const auto e = block_encode(b, table);
  for (std::size_t c = 0; c < 2; ++c)
    EXPECT_EQ(e[c], table.at(kLayout.visual_offset() + 1, c) + table.at(kLayout.visual_offset() + 5, c));
  const auto m = block_encode(b, table, Fusion::kMean);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(e[c], 2.0 * m[c], 1e-12);
}

TEST(Nbp, FusedEqualsMMinusOneTimesMean) {
  Rng rng(4);
  const std::size_t V = kLayout.total();
  std::vector<double> vals(V * 5);
  for (auto& x : vals) x = rng.normal();
  const Matrix table({V, 5}, vals);
  const std::vector<std::uint32_t> sizes(8, 8);
  for (int t = 0; t < 200; ++t) {
    const auto img = random_image(1, 1, 8, 8, rng);
    const auto blocks = make_visual_blocks(img, kLayout, offsets(8, 8), sizes);
    for (const auto& b : blocks) {
      const auto s = block_encode(b, table, Fusion::kSum);
      const auto m = block_encode(b, table, Fusion::kMean);
      const double f = b.kind == BlockKind::kVisual ? static_cast<double>(b.M() - 1) : 1.0;
      for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(s[c], f * m[c], 1e-12);
    }
  }
}

TEST(Nbp, LossIsSumOfNegativeLogProbsIncludingEob) {
  const std::size_t V = 4;
  // A fixed "decoder": log-probs depend only on prefix length.
  auto step = [&](std::span<const double>, std::span<const std::uint32_t> prefix) {
    std::vector<double> lp(V);
    for (std::size_t t = 0; t < V; ++t) lp[t] = std::log((t + 1 + prefix.size()) / (10.0 + 4.0 * prefix.size()));
    return lp;
  };
  const VocabLayout L{1, 1};  // eob id = 2
  const Block b{BlockKind::kText, {0, L.eob()}};
  const std::vector<double> h{0.0};
  const double expected = -std::log(1.0 / 10.0) - std::log((2.0 + 1.0 + 1.0) / 14.0);
  EXPECT_NEAR(nbp_loss(h, b, step), expected, 1e-12);
}

TEST(Nbp, ValidateBlockCatchesMalformed) {
  const auto L = kLayout;
  EXPECT_THROW(validate_block(Block{BlockKind::kText, {1}}, L, 8), UsageError);
  EXPECT_THROW(validate_block(Block{BlockKind::kText, {1, 2, L.eob()}}, L, 8), UsageError);
  EXPECT_THROW(validate_block(Block{BlockKind::kVisual, {L.visual_offset(), L.eob()}}, L, 8), UsageError);
  EXPECT_THROW(validate_block(Block{BlockKind::kVisual, {1, L.eob()}}, L, 1), UsageError);
}
