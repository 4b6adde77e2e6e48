#pragma once

// Next-block-prediction sequences. Text is one token per block, {t, eob};
// a visual patch is one block of its N slot tokens, {t1..tN, eob}. Images are
// bracketed by vis_start/vis_end and every grid row is preceded by a
// "<pos_start>r,c<pos_end>" coordinate marker, all emitted as text blocks.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "kelixpq/error.hpp"
#include "kelixpq/ndiff.hpp"
#include "kelixpq/pq.hpp"

namespace kelixpq {

/// Unified vocabulary: [0, V_text) text, [V_text, V_text + S) visual, then
/// the special tokens.
struct VocabLayout {
  std::uint32_t V_text = 0;
  std::uint32_t S = 0;

  enum Special : std::uint32_t {
    kEob = 0,
    kEos,
    kVisStart,
    kVisEnd,
    kPosStart,
    kPosEnd,
    kComma,
    kDigit0,
  };
  static constexpr std::uint32_t kSpecialCount = kDigit0 + 10;

  std::uint32_t visual_offset() const { return V_text; }
  std::uint32_t special_offset() const { return V_text + S; }
  std::uint32_t total() const { return V_text + S + kSpecialCount; }

  std::uint32_t special(Special s) const { return special_offset() + s; }
  std::uint32_t eob() const { return special(kEob); }
  std::uint32_t eos() const { return special(kEos); }
  std::uint32_t vis_start() const { return special(kVisStart); }
  std::uint32_t vis_end() const { return special(kVisEnd); }
  std::uint32_t pos_start() const { return special(kPosStart); }
  std::uint32_t pos_end() const { return special(kPosEnd); }
  std::uint32_t comma() const { return special(kComma); }
  std::uint32_t digit(unsigned k) const {
    if (k > 9) throw UsageError("digit out of range");
    return special_offset() + kDigit0 + k;
  }

  bool is_text(std::uint32_t id) const { return id < V_text; }
  bool is_visual(std::uint32_t id) const { return id >= V_text && id < special_offset(); }
  bool is_special(std::uint32_t id) const { return id >= special_offset() && id < total(); }
};

enum class BlockKind { kText, kVisual };

struct Block {
  BlockKind kind = BlockKind::kText;
  std::vector<std::uint32_t> tokens;  // always ends with eob

  std::size_t M() const { return tokens.size(); }
  friend bool operator==(const Block&, const Block&) = default;
};

/// Throws UsageError unless `b` is a well-formed text block or a visual block
/// with `slots` visual tokens.
inline void validate_block(const Block& b, const VocabLayout& layout, std::size_t slots) {
  if (b.tokens.empty() || b.tokens.back() != layout.eob())
    throw UsageError("block does not end with eob");
  if (b.kind == BlockKind::kText) {
    if (b.M() != 2) throw UsageError("text block must have M = 2");
    const auto t = b.tokens[0];
    if (layout.is_visual(t) || t == layout.eob() || t >= layout.total())
      throw UsageError("invalid text-block token " + std::to_string(t));
  } else {
    if (b.M() != slots + 1) throw UsageError("visual block must have M = N + 1");
    for (std::size_t j = 0; j + 1 < b.M(); ++j)
      if (!layout.is_visual(b.tokens[j]))
        throw UsageError("non-visual token in visual block");
  }
}

inline Block text_block(std::uint32_t t, const VocabLayout& layout) {
  return Block{BlockKind::kText, {t, layout.eob()}};
}

/// One {t, eob} block per token, order preserved. Special tokens other than
/// eob are accepted; visual ids are not.
inline std::vector<Block> make_text_blocks(std::span<const std::uint32_t> ids,
                                           const VocabLayout& layout) {
  std::vector<Block> out;
  out.reserve(ids.size());
  for (auto t : ids) {
    if (layout.is_visual(t)) throw UsageError("visual id " + std::to_string(t) + " in text stream");
    if (t >= layout.total() || t == layout.eob())
      throw UsageError("token " + std::to_string(t) + " is not a text or special id");
    out.push_back(text_block(t, layout));
  }
  return out;
}

inline void append_number(std::vector<Block>& out, std::size_t n, const VocabLayout& layout) {
  const auto s = std::to_string(n);
  for (char ch : s) out.push_back(text_block(layout.digit(static_cast<unsigned>(ch - '0')), layout));
}

/// Bracketed, row-marked visual span. Slot s of a patch becomes token
/// visual_offset + offsets[s] + index; markers use 0-based (row, column of
/// the row's first patch).
inline std::vector<Block> make_visual_blocks(const QuantizedImage& q, const VocabLayout& layout,
                                             std::span<const std::uint32_t> offsets,
                                             std::span<const std::uint32_t> sizes) {
  if (q.rows * q.cols != q.patches.size() || q.patches.empty())
    throw UsageError("make_visual_blocks: grid " + std::to_string(q.rows) + "x" +
                     std::to_string(q.cols) + " does not match " +
                     std::to_string(q.patches.size()) + " patches");
  if (offsets.size() != sizes.size()) throw UsageError("make_visual_blocks: offsets/sizes");
  std::vector<Block> out;
  out.push_back(text_block(layout.vis_start(), layout));
  for (std::size_t r = 0; r < q.rows; ++r) {
    out.push_back(text_block(layout.pos_start(), layout));
    append_number(out, r, layout);
    out.push_back(text_block(layout.comma(), layout));
    append_number(out, 0, layout);
    out.push_back(text_block(layout.pos_end(), layout));
    for (std::size_t c = 0; c < q.cols; ++c) {
      const auto& p = q.patches[r * q.cols + c];
      if (p.indices.size() != sizes.size())
        throw UsageError("make_visual_blocks: patch has wrong slot count");
      Block b{BlockKind::kVisual, {}};
      for (std::size_t s = 0; s < p.indices.size(); ++s) {
        if (p.indices[s] >= sizes[s])
          throw UsageError("make_visual_blocks: index " + std::to_string(p.indices[s]) +
                           " out of range for slot " + std::to_string(s));
        const auto id = layout.visual_offset() + offsets[s] + p.indices[s];
        if (!layout.is_visual(id)) throw UsageError("make_visual_blocks: id outside visual range");
        b.tokens.push_back(id);
      }
      b.tokens.push_back(layout.eob());
      out.push_back(std::move(b));
    }
  }
  out.push_back(text_block(layout.vis_end(), layout));
  return out;
}

/// Marker and bracket blocks around a rows x cols grid.
inline std::size_t visual_overhead_blocks(std::size_t rows) {
  std::size_t per_row = 0;
  for (std::size_t r = 0; r < rows; ++r) per_row += 3 + std::to_string(r).size() + 1;
  return 2 + per_row;
}

struct GridSpan {
  std::size_t first_block = 0;  // index of the vis_start block
  std::size_t rows = 0;
  std::size_t cols = 0;
};

struct PackedSequence {
  std::vector<Block> blocks;
  std::vector<std::vector<double>> E;  // per-block aggregated embeddings, if computed
  std::vector<GridSpan> grids;

  friend bool operator==(const PackedSequence& a, const PackedSequence& b) {
    return a.blocks == b.blocks;
  }
};

// --- block encoder -----------------------------------------------------------

/// Sum of the table rows of all tokens except the trailing eob. With mean
/// fusion, visual blocks are divided by M - 1.
inline std::vector<double> block_encode(const Block& b, const Matrix& table,
                                        Fusion fusion = Fusion::kSum) {
  if (b.tokens.empty()) throw UsageError("block_encode: empty block");
  const std::size_t w = table.cols();
  std::vector<double> e(w, 0.0);
  for (std::size_t j = 0; j + 1 < b.M(); ++j) {
    const auto t = b.tokens[j];
    if (t >= table.rows()) throw UsageError("block_encode: id " + std::to_string(t) + " out of range");
    for (std::size_t c = 0; c < w; ++c) e[c] += table.values[t * w + c];
  }
  if (fusion == Fusion::kMean && b.kind == BlockKind::kVisual && b.M() > 1)
    for (auto& v : e) v /= static_cast<double>(b.M() - 1);
  return e;
}

inline void encode_sequence(PackedSequence& seq, const Matrix& table, Fusion fusion = Fusion::kSum) {
  seq.E.clear();
  for (const auto& b : seq.blocks) seq.E.push_back(block_encode(b, table, fusion));
}

// --- loss --------------------------------------------------------------------

/// -sum_j log P(t^j | h, t^{<j}) with teacher forcing, eob included.
/// `step(h, prefix)` returns log-probabilities over the vocabulary for the
/// next token given the block prefix.
template <class StepFn>
double nbp_loss(std::span<const double> h, const Block& target, StepFn&& step) {
  if (target.tokens.empty()) throw UsageError("nbp_loss: empty target block");
  double loss = 0.0;
  std::vector<std::uint32_t> prefix;
  for (auto t : target.tokens) {
    const std::vector<double> logp = step(h, std::span<const std::uint32_t>(prefix));
    if (t >= logp.size()) throw UsageError("nbp_loss: decoder vocabulary does not cover target");
    loss -= logp[t];
    prefix.push_back(t);
  }
  return loss;
}

// --- flattening and checks ---------------------------------------------------

inline std::vector<std::uint32_t> flatten(const std::vector<Block>& blocks) {
  std::vector<std::uint32_t> out;
  for (const auto& b : blocks) out.insert(out.end(), b.tokens.begin(), b.tokens.end());
  return out;
}

/// Inverse of flatten: split after every eob; a block whose first token is
/// visual is a visual block.
inline std::vector<Block> unflatten(std::span<const std::uint32_t> tokens, const VocabLayout& layout) {
  std::vector<Block> out;
  Block cur;
  for (auto t : tokens) {
    cur.tokens.push_back(t);
    if (t == layout.eob()) {
      cur.kind = layout.is_visual(cur.tokens.front()) ? BlockKind::kVisual : BlockKind::kText;
      out.push_back(std::move(cur));
      cur = Block{};
    }
  }
  if (!cur.tokens.empty()) throw UsageError("unflatten: trailing tokens without eob");
  return out;
}

/// vis_start/vis_end balanced and non-nested, visual blocks only inside a
/// span.
inline bool brackets_balanced(const std::vector<Block>& blocks, const VocabLayout& layout) {
  bool open = false;
  for (const auto& b : blocks) {
    if (b.tokens.empty()) return false;
    const auto t = b.tokens.front();
    if (b.kind == BlockKind::kVisual) {
      if (!open) return false;
    } else if (t == layout.vis_start()) {
      if (open) return false;
      open = true;
    } else if (t == layout.vis_end()) {
      if (!open) return false;
      open = false;
    }
  }
  return !open;
}

// --- JSON --------------------------------------------------------------------

inline nlohmann::json to_json(const std::vector<Block>& blocks) {
  auto arr = nlohmann::json::array();
  for (const auto& b : blocks)
    arr.push_back({{"kind", b.kind == BlockKind::kText ? "text" : "visual"}, {"tokens", b.tokens}});
  return nlohmann::json{{"blocks", std::move(arr)}};
}

inline std::vector<Block> blocks_from_json(const nlohmann::json& j) {
  std::vector<Block> out;
  try {
    for (const auto& b : j.at("blocks")) {
      Block blk;
      const auto kind = b.at("kind").get<std::string>();
      if (kind == "text")
        blk.kind = BlockKind::kText;
      else if (kind == "visual")
        blk.kind = BlockKind::kVisual;
      else
        throw FormatError("unknown block kind '" + kind + "'");
      blk.tokens = b.at("tokens").get<std::vector<std::uint32_t>>();
      out.push_back(std::move(blk));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("packed-sequence JSON: ") + e.what());
  }
  return out;
}

}  // namespace kelixpq
