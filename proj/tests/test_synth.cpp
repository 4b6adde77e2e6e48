#include <gtest/gtest.h>

#include <filesystem>
#include <vector>

#include "kelixpq/synth.hpp"

using namespace kelixpq;

TEST(Embeddings, RoundTripWithAndWithoutLabels) {
  MixtureSpec spec;
  spec.components = 3;
  spec.D = 5;
  spec.points_per_component = 7;
  const auto mix = gen_mixture(spec);
  EXPECT_EQ(decode_embeddings(encode_embeddings(mix.points)), mix.points);
  auto unlabeled = mix.points;
  unlabeled.labels.clear();
  EXPECT_EQ(decode_embeddings(encode_embeddings(unlabeled)), unlabeled);
}

TEST(Embeddings, FileRoundTrip) {
  MixtureSpec spec;
  spec.seed = 4;
  const auto mix = gen_mixture(spec);
  const auto path = std::filesystem::temp_directory_path() / "kelixpq_test.emb";
  save_embeddings(mix.points, path);
  EXPECT_EQ(load_embeddings(path), mix.points);
  std::filesystem::remove(path);
}

TEST(Embeddings, HeaderLayoutIsLittleEndian) {
  EmbeddingSet e;
  e.D = 2;
  e.values = {1.0, -2.0};
  const auto b = encode_embeddings(e);
  ASSERT_EQ(b.size(), 4u + 4 + 8 + 4 + 8 + 4);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "EMB1");
  EXPECT_EQ(b[4], 1);   // version
  EXPECT_EQ(b[8], 1);   // count
  EXPECT_EQ(b[16], 2);  // D
  // 1.0f = 0x3f800000
  EXPECT_EQ(b[20], 0x00);
  EXPECT_EQ(b[23], 0x3f);
}

TEST(Embeddings, RejectsCorruptInput) {
  MixtureSpec spec;
  spec.points_per_component = 3;
  const auto bytes = encode_embeddings(gen_mixture(spec).points);
  auto magic = bytes;
  magic[1] = 'X';
  EXPECT_THROW(decode_embeddings(magic), BadMagicError);
  auto flipped = bytes;
  flipped[40] ^= 1;
  EXPECT_THROW(decode_embeddings(flipped), FormatError);
  std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + 30);
  EXPECT_THROW(decode_embeddings(truncated), FormatError);
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(decode_embeddings(version), FormatError);
}

TEST(Mixture, SameSeedIsByteIdentical) {
  MixtureSpec spec;
  spec.seed = 17;
  EXPECT_EQ(encode_embeddings(gen_mixture(spec).points), encode_embeddings(gen_mixture(spec).points));
  auto other = spec;
  other.seed = 18;
  EXPECT_NE(encode_embeddings(gen_mixture(spec).points), encode_embeddings(gen_mixture(other).points));
}

TEST(Mixture, ZeroSigmaCollapsesToMeans) {
  MixtureSpec spec;
  spec.sigma = 0.0;
  spec.components = 4;
  spec.D = 3;
  spec.points_per_component = 5;
  const auto mix = gen_mixture(spec);
  for (std::size_t i = 0; i < mix.points.count(); ++i) {
    const auto c = mix.points.labels[i];
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(mix.points.row(i)[j], mix.means[c * 3 + j]);
  }
}

TEST(GridTask, SingleCellBaseCase) {
  GridTaskSpec spec;
  spec.rows = 1;
  spec.cols = 1;
  spec.palette = 1;
  const auto s = gen_grid_task(spec);
  const GridVocab v{1};
  EXPECT_EQ(s.caption, (std::vector<std::uint32_t>{GridVocab::kRow, v.digit(0), GridVocab::kColon, v.symbol(0)}));
  std::string text;
  for (auto t : s.caption) text += v.name(t) + " ";
  EXPECT_EQ(text, "row 0 : A ");
}

TEST(GridTask, CaptionLengthFormula) {
  Rng rng(1);
  for (std::size_t rows = 1; rows <= 12; ++rows)
    for (std::size_t cols = 1; cols <= 4; ++cols) {
      GridTaskSpec spec;
      spec.rows = rows;
      spec.cols = cols;
      spec.palette = 5;
      spec.D = 2;
      GridTask task(spec);
      const auto s = task.sample(rng);
      std::size_t digits = 0;
      for (std::size_t r = 0; r < rows; ++r) digits += r < 10 ? 1 : 2;
      EXPECT_EQ(s.caption.size(), rows * (cols + 2) + digits);
      EXPECT_EQ(caption_length(rows, cols), s.caption.size());
    }
}

TEST(GridTask, NoiseFreeEmbeddingsEqualPrototypes) {
  GridTaskSpec spec;
  spec.noise = 0.0;
  spec.palette = 4;
  GridTask task(spec);
  Rng rng(3);
  const auto s = task.sample(rng);
  for (std::size_t p = 0; p < s.cells.size(); ++p) {
    const auto proto = task.prototype(s.cells[p]);
    for (std::size_t j = 0; j < spec.D; ++j) EXPECT_EQ(s.embeddings[p * spec.D + j], proto[j]);
  }
}

TEST(GridTask, CaptionsInvertToGrid) {
  Rng rng(5);
  for (int t = 0; t < 300; ++t) {
    GridTaskSpec spec;
    spec.rows = 1 + rng.index(12);
    spec.cols = 1 + rng.index(5);
    spec.palette = 1 + static_cast<std::uint32_t>(rng.index(60));
    spec.D = 2;
    spec.seed = rng.next();
    GridTask task(spec);
    const auto s = task.sample(rng);
    const auto parsed = parse_caption(s.caption, task.vocab());
    ASSERT_TRUE(parsed.has_value());
    EXPECT_EQ(parsed->rows, spec.rows);
    EXPECT_EQ(parsed->cols, spec.cols);
    EXPECT_EQ(parsed->cells, s.cells);
  }
}

TEST(GridTask, MalformedCaptionsDoNotParse) {
  const GridVocab v{4};
  EXPECT_FALSE(parse_caption(std::vector<std::uint32_t>{}, v));
  EXPECT_FALSE(parse_caption(std::vector<std::uint32_t>{GridVocab::kRow, v.digit(1), GridVocab::kColon, v.symbol(0)}, v));
  EXPECT_FALSE(parse_caption(std::vector<std::uint32_t>{GridVocab::kRow, v.digit(0), v.symbol(0)}, v));
  EXPECT_FALSE(parse_caption(std::vector<std::uint32_t>{GridVocab::kRow, v.digit(0), GridVocab::kColon, v.symbol(0),
                                                        GridVocab::kRow, v.digit(1), GridVocab::kColon, v.symbol(0),
                                                        v.symbol(1)},
                             v));
}

TEST(GridTask, GeneratorIsPureInSpec) {
  GridTaskSpec spec;
  spec.seed = 77;
  const auto a = gen_grid_task(spec);
  const auto b = gen_grid_task(spec);
  EXPECT_EQ(a.embeddings, b.embeddings);
  EXPECT_EQ(a.caption, b.caption);
  GridTask task(spec);
  EXPECT_EQ(task.patch_corpus(50, 3), task.patch_corpus(50, 3));
}

TEST(GridTask, RejectsBadSpecs) {
  GridTaskSpec spec;
  spec.grammar_version = 2;
  EXPECT_THROW(GridTask{spec}, UsageError);
  spec = GridTaskSpec{};
  spec.palette = 0;
  EXPECT_THROW(GridTask{spec}, UsageError);
}

TEST(Oracles, BruteQuantizeTiesAndSingleEntry) {
  const std::vector<double> one{3.0, 4.0};
  EXPECT_EQ(brute_quantize(std::vector<double>{-100.0, 2.0}, one), 0u);
  const std::vector<double> pair{1.0, -1.0};
  EXPECT_EQ(brute_quantize(std::vector<double>{0.0}, pair), 0u);
  const std::vector<double> three{5.0, 1.0, 1.0};
  EXPECT_EQ(brute_quantize(std::vector<double>{1.0}, three), 1u);
}

TEST(Oracles, AdjustedRandIndexKnownValues) {
  const std::vector<std::uint32_t> a{0, 0, 1, 1}, b{0, 0, 1, 2}, c{1, 1, 0, 0};
  EXPECT_NEAR(adjusted_rand_index(a, b), 4.0 / 7.0, 1e-12);
  EXPECT_NEAR(adjusted_rand_index(a, c), 1.0, 1e-12);
  const std::vector<std::uint32_t> same{0, 0, 0, 0}, distinct{0, 1, 2, 3};
  EXPECT_NEAR(adjusted_rand_index(same, distinct), 0.0, 1e-12);
}
