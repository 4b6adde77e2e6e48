#pragma once

// Synthetic corpora and brute-force reference implementations.
//
//  * Gaussian mixtures of patch embeddings (for K-means and tokenizer tests).
//  * A grid-caption task: a rows x cols grid of palette symbols, each cell
//    rendered as a noisy copy of its symbol's prototype embedding, paired with
//    the caption "row 0 : A B row 1 : C D".
//  * EMB1 embedding dumps.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kelixpq/binary_io.hpp"
#include "kelixpq/error.hpp"
#include "kelixpq/rng.hpp"

namespace kelixpq {

// --- embedding sets and EMB1 -------------------------------------------------

/// count x D embeddings. Values are kept at 32-bit precision (they are
/// rounded through float on creation) so an EMB1 round trip is exact.
struct EmbeddingSet {
  std::uint32_t D = 0;
  std::vector<double> values;          // count x D
  std::vector<std::uint32_t> labels;   // empty or one per row

  std::size_t count() const { return D == 0 ? 0 : values.size() / D; }
  std::span<const double> row(std::size_t i) const {
    return std::span(values).subspan(i * D, D);
  }
  friend bool operator==(const EmbeddingSet&, const EmbeddingSet&) = default;
};

inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline constexpr char kEmbeddingMagic[4] = {'E', 'M', 'B', '1'};
inline constexpr std::uint32_t kEmbeddingVersion = 1;

inline std::vector<std::uint8_t> encode_embeddings(const EmbeddingSet& e) {
  if (e.D == 0 || e.values.size() % e.D != 0) throw UsageError("EMB1: values are not count x D");
  if (!e.labels.empty() && e.labels.size() != e.count())
    throw UsageError("EMB1: label count differs from row count");
  io::Writer w;
  w.put_bytes(std::string_view(kEmbeddingMagic, 4));
  w.put(kEmbeddingVersion);
  w.put(static_cast<std::uint64_t>(e.count()));
  w.put(e.D);
  std::vector<float> f(e.values.begin(), e.values.end());
  w.put_array<float>(f);
  w.put_array<std::uint32_t>(e.labels);
  w.seal();
  return w.take();
}

/// Labels are present when the payload is exactly 4 bytes per row longer
/// than the embedding block.
inline EmbeddingSet decode_embeddings(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "EMB1");
  if (bytes.size() < 4 || r.get_bytes(4) != std::string_view(kEmbeddingMagic, 4))
    throw BadMagicError("bad format: not an EMB1 embedding file");
  const auto version = r.get<std::uint32_t>();
  if (version != kEmbeddingVersion)
    throw FormatError("EMB1: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>();
  EmbeddingSet e;
  e.D = r.get<std::uint32_t>();
  if (e.D == 0) throw FormatError("EMB1: D = 0");
  const std::uint64_t body = count * e.D * 4;
  if (count != 0 && body / count / 4 != e.D) throw FormatError("EMB1: header overflow");
  if (r.remaining() < body + 4) r.truncated();
  const auto rest = r.remaining() - body - 4;
  if (rest != 0 && rest != count * 4) throw FormatError("EMB1: payload size does not match header");
  const auto f = r.get_array<float>(count * e.D);
  e.values.assign(f.begin(), f.end());
  if (rest != 0) e.labels = r.get_array<std::uint32_t>(count);
  r.verify_crc();
  return e;
}

inline void save_embeddings(const EmbeddingSet& e, const std::filesystem::path& path) {
  io::write_file(path, encode_embeddings(e));
}
inline EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  return decode_embeddings(io::read_file(path));
}

// --- Gaussian mixtures -------------------------------------------------------

struct MixtureSpec {
  std::size_t components = 8;
  std::size_t D = 16;
  double mean_scale = 10.0;  // component means ~ N(0, mean_scale^2) per coordinate
  double sigma = 1.0;
  std::size_t points_per_component = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (components < 1 || D < 1 || points_per_component < 1)
      throw UsageError("MixtureSpec: counts must be >= 1");
    if (!(sigma >= 0.0)) throw UsageError("MixtureSpec: sigma must be >= 0");
  }
};

struct Mixture {
  EmbeddingSet points;         // labels = component index
  std::vector<double> means;   // components x D
};

/// Points are emitted component by component.
inline Mixture gen_mixture(const MixtureSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  Mixture m;
  m.means.resize(spec.components * spec.D);
  for (auto& v : m.means) v = to_f32(spec.mean_scale * rng.normal());
  m.points.D = static_cast<std::uint32_t>(spec.D);
  for (std::size_t c = 0; c < spec.components; ++c)
    for (std::size_t i = 0; i < spec.points_per_component; ++i) {
      for (std::size_t j = 0; j < spec.D; ++j)
        m.points.values.push_back(to_f32(m.means[c * spec.D + j] + spec.sigma * rng.normal()));
      m.points.labels.push_back(static_cast<std::uint32_t>(c));
    }
  return m;
}

// --- grid-caption task -------------------------------------------------------

/// Text vocabulary of the grid task: "row", ":", "0".."9", then one symbol per
/// palette entry.
struct GridVocab {
  std::uint32_t palette = 0;

  static constexpr std::uint32_t kRow = 0;
  static constexpr std::uint32_t kColon = 1;
  static constexpr std::uint32_t kDigit0 = 2;
  static constexpr std::uint32_t kFirstSymbol = 12;

  std::uint32_t size() const { return kFirstSymbol + palette; }
  std::uint32_t digit(unsigned k) const { return kDigit0 + k; }
  std::uint32_t symbol(std::uint32_t c) const {
    if (c >= palette) throw UsageError("palette index out of range");
    return kFirstSymbol + c;
  }
  bool is_symbol(std::uint32_t t) const { return t >= kFirstSymbol && t < size(); }

  /// Printable form of a text id: "row", ":", digits, then A..Z, a..z, s52...
  std::string name(std::uint32_t t) const {
    if (t == kRow) return "row";
    if (t == kColon) return ":";
    if (t >= kDigit0 && t < kFirstSymbol) return std::string(1, static_cast<char>('0' + t - kDigit0));
    if (!is_symbol(t)) return "<" + std::to_string(t) + ">";
    const auto c = t - kFirstSymbol;
    if (c < 26) return std::string(1, static_cast<char>('A' + c));
    if (c < 52) return std::string(1, static_cast<char>('a' + c - 26));
    return "s" + std::to_string(c);
  }
};

struct GridTaskSpec {
  std::size_t rows = 2;
  std::size_t cols = 2;
  std::uint32_t palette = 8;
  std::size_t D = 16;
  double noise = 0.05;
  double proto_scale = 1.0;
  std::uint32_t grammar_version = 1;
  std::uint64_t seed = 0;

  std::size_t P() const { return rows * cols; }
  void validate() const {
    if (rows < 1 || cols < 1 || D < 1) throw UsageError("GridTaskSpec: rows, cols, D must be >= 1");
    if (palette < 1) throw UsageError("GridTaskSpec: palette must be >= 1");
    if (!(noise >= 0.0)) throw UsageError("GridTaskSpec: noise must be >= 0");
    if (grammar_version != 1) throw UsageError("GridTaskSpec: only caption grammar 1 exists");
  }
};

struct GridSample {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint32_t> cells;     // palette index per patch, row-major
  std::vector<double> embeddings;       // P x D
  std::vector<std::uint32_t> caption;   // grid-vocab text ids
};

inline void append_digits(std::vector<std::uint32_t>& out, std::size_t n, const GridVocab& v) {
  for (char ch : std::to_string(n)) out.push_back(v.digit(static_cast<unsigned>(ch - '0')));
}

/// "row r : s s ... " for every row.
inline std::vector<std::uint32_t> render_caption(std::span<const std::uint32_t> cells,
                                                 std::size_t rows, std::size_t cols,
                                                 const GridVocab& v) {
  if (cells.size() != rows * cols) throw UsageError("render_caption: cell count mismatch");
  std::vector<std::uint32_t> out;
  for (std::size_t r = 0; r < rows; ++r) {
    out.push_back(GridVocab::kRow);
    append_digits(out, r, v);
    out.push_back(GridVocab::kColon);
    for (std::size_t c = 0; c < cols; ++c) out.push_back(v.symbol(cells[r * cols + c]));
  }
  return out;
}

inline std::size_t caption_length(std::size_t rows, std::size_t cols) {
  std::size_t n = 0;
  for (std::size_t r = 0; r < rows; ++r) n += 2 + std::to_string(r).size() + cols;
  return n;
}

struct ParsedCaption {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint32_t> cells;
};

/// Inverse of render_caption; nullopt unless the tokens are a well-formed
/// caption with rows numbered 0, 1, ... and equal row lengths.
inline std::optional<ParsedCaption> parse_caption(std::span<const std::uint32_t> tokens,
                                                  const GridVocab& v) {
  ParsedCaption out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (tokens[i++] != GridVocab::kRow) return std::nullopt;
    std::size_t r = 0, nd = 0;
    while (i < tokens.size() && tokens[i] >= GridVocab::kDigit0 && tokens[i] < GridVocab::kFirstSymbol) {
      r = r * 10 + (tokens[i++] - GridVocab::kDigit0);
      ++nd;
    }
    if (nd == 0 || r != out.rows || std::to_string(r).size() != nd) return std::nullopt;
    if (i >= tokens.size() || tokens[i++] != GridVocab::kColon) return std::nullopt;
    std::size_t c = 0;
    while (i < tokens.size() && v.is_symbol(tokens[i])) {
      out.cells.push_back(tokens[i++] - GridVocab::kFirstSymbol);
      ++c;
    }
    if (c == 0 || (out.rows > 0 && c != out.cols)) return std::nullopt;
    out.cols = c;
    ++out.rows;
  }
  if (out.rows == 0) return std::nullopt;
  return out;
}

class GridTask {
 public:
  explicit GridTask(GridTaskSpec spec) : spec_(spec), vocab_{spec.palette} {
    spec_.validate();
    Rng rng(spec_.seed);
    prototypes_.resize(std::size_t{spec_.palette} * spec_.D);
    for (auto& v : prototypes_) v = to_f32(spec_.proto_scale * rng.normal());
  }

  const GridTaskSpec& spec() const { return spec_; }
  const GridVocab& vocab() const { return vocab_; }
  std::span<const double> prototype(std::uint32_t c) const {
    return std::span(prototypes_).subspan(std::size_t{c} * spec_.D, spec_.D);
  }

  /// Sample with the given cells; noise drawn from `rng`.
  GridSample render(std::vector<std::uint32_t> cells, Rng& rng) const {
    if (cells.size() != spec_.P()) throw UsageError("GridTask::render: cell count mismatch");
    GridSample s;
    s.rows = spec_.rows;
    s.cols = spec_.cols;
    for (auto c : cells) {
      const auto p = prototype(c);
      for (std::size_t j = 0; j < spec_.D; ++j)
        s.embeddings.push_back(spec_.noise == 0.0 ? p[j] : to_f32(p[j] + spec_.noise * rng.normal()));
    }
    s.caption = render_caption(cells, s.rows, s.cols, vocab_);
    s.cells = std::move(cells);
    return s;
  }

  GridSample sample(Rng& rng) const {
    std::vector<std::uint32_t> cells(spec_.P());
    for (auto& c : cells) c = static_cast<std::uint32_t>(rng.index(spec_.palette));
    return render(std::move(cells), rng);
  }

  /// Noisy cell embeddings of random symbols, for codebook fitting.
  EmbeddingSet patch_corpus(std::size_t count, std::uint64_t seed) const {
    Rng rng(seed);
    EmbeddingSet e;
    e.D = static_cast<std::uint32_t>(spec_.D);
    for (std::size_t i = 0; i < count; ++i) {
      const auto c = static_cast<std::uint32_t>(rng.index(spec_.palette));
      const auto p = prototype(c);
      for (std::size_t j = 0; j < spec_.D; ++j) e.values.push_back(to_f32(p[j] + spec_.noise * rng.normal()));
      e.labels.push_back(c);
    }
    return e;
  }

 private:
  GridTaskSpec spec_;
  GridVocab vocab_;
  std::vector<double> prototypes_;
};

/// One sample drawn from the task's own seed.
inline GridSample gen_grid_task(const GridTaskSpec& spec) {
  GridTask task(spec);
  Rng rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  return task.sample(rng);
}

// --- reference oracles -------------------------------------------------------

/// Exhaustive nearest row of a K x d matrix; lowest index on ties.
inline std::size_t brute_quantize(std::span<const double> z, std::span<const double> entries) {
  const std::size_t d = z.size();
  if (d == 0 || entries.empty() || entries.size() % d != 0)
    throw UsageError("brute_quantize: dimension mismatch");
  std::size_t best = 0;
  double best_dist = 0.0;
  for (std::size_t k = 0; k < entries.size() / d; ++k) {
    double dist = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = z[j] - entries[k * d + j];
      dist += diff * diff;
    }
    if (k == 0 || dist < best_dist) {
      best = k;
      best_dist = dist;
    }
  }
  return best;
}

/// Adjusted Rand index between two labelings of the same points.
inline double adjusted_rand_index(std::span<const std::uint32_t> a, std::span<const std::uint32_t> b) {
  if (a.size() != b.size()) throw UsageError("adjusted_rand_index: length mismatch");
  const double n = static_cast<double>(a.size());
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> joint;
  std::map<std::uint32_t, double> ra, rb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1;
    ra[a[i]] += 1;
    rb[b[i]] += 1;
  }
  auto c2 = [](double x) { return x * (x - 1) / 2; };
  double sum_joint = 0, sum_a = 0, sum_b = 0;
  for (const auto& [k, v] : joint) sum_joint += c2(v);
  for (const auto& [k, v] : ra) sum_a += c2(v);
  for (const auto& [k, v] : rb) sum_b += c2(v);
  const double expected = sum_a * sum_b / c2(n);
  const double max_index = (sum_a + sum_b) / 2;
  if (max_index == expected) return 1.0;
  return (sum_joint - expected) / (max_index - expected);
}

}  // namespace kelixpq
