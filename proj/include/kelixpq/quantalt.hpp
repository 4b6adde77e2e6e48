#pragma once

// Alternative quantizers for the quantization-strategy comparison: finite
// scalar quantization (per-dimension level rounding, one flat index) and
// greedy residual quantization (one index per layer). All schemes, PQ
// included, sit behind PatchQuantizer so the ablation harness can swap them.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kelixpq/codebook.hpp"
#include "kelixpq/error.hpp"
#include "kelixpq/pq.hpp"

namespace kelixpq {

enum class Scheme { kVQ, kFSQ, kRQ };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::kVQ: return "vq";
    case Scheme::kFSQ: return "fsq";
    case Scheme::kRQ: return "rq";
  }
  return "?";
}
inline Scheme scheme_from_string(const std::string& s) {
  if (s == "vq") return Scheme::kVQ;
  if (s == "fsq") return Scheme::kFSQ;
  if (s == "rq") return Scheme::kRQ;
  throw UsageError("unknown scheme '" + s + "' (expected vq|fsq|rq)");
}

// --- FSQ ---------------------------------------------------------------------

enum class FsqSquash { kTanh, kClamp };

struct FSQConfig {
  std::vector<std::uint32_t> levels;  // L_j >= 2 per dimension
  double bound = 1.0;                 // levels live in [-bound, bound]
  FsqSquash squash = FsqSquash::kTanh;

  std::size_t dims() const { return levels.size(); }

  std::uint64_t index_space() const {
    std::uint64_t n = 1;
    for (auto l : levels) n *= l;
    return n;
  }

  void validate() const {
    if (levels.empty()) throw UsageError("FSQConfig: no levels");
    for (auto l : levels)
      if (l < 2) throw UsageError("FSQConfig: every level count must be >= 2");
    if (!(bound > 0.0)) throw UsageError("FSQConfig: bound must be positive");
  }

  /// Value of level k (of L) in dimension j: evenly spaced, symmetric.
  double level_value(std::size_t j, std::uint32_t k) const {
    const double L = levels[j];
    return bound * (-1.0 + 2.0 * static_cast<double>(k) / (L - 1.0));
  }
};

/// Squashed coordinate in [-bound, bound].
inline double fsq_squash(double x, const FSQConfig& cfg) {
  return cfg.squash == FsqSquash::kTanh ? cfg.bound * std::tanh(x / cfg.bound)
                                        : std::clamp(x, -cfg.bound, cfg.bound);
}

/// Mixed-radix encoding, dimension 0 least significant.
inline std::uint64_t fsq_encode(std::span<const std::uint32_t> digits, const FSQConfig& cfg) {
  if (digits.size() != cfg.dims()) throw UsageError("fsq_encode: dimension mismatch");
  std::uint64_t idx = 0, radix = 1;
  for (std::size_t j = 0; j < digits.size(); ++j) {
    if (digits[j] >= cfg.levels[j]) throw UsageError("fsq_encode: digit out of range");
    idx += digits[j] * radix;
    radix *= cfg.levels[j];
  }
  return idx;
}

inline std::vector<std::uint32_t> fsq_decode(std::uint64_t index, const FSQConfig& cfg) {
  if (index >= cfg.index_space()) throw UsageError("fsq_decode: index out of range");
  std::vector<std::uint32_t> digits(cfg.dims());
  for (std::size_t j = 0; j < cfg.dims(); ++j) {
    digits[j] = static_cast<std::uint32_t>(index % cfg.levels[j]);
    index /= cfg.levels[j];
  }
  return digits;
}

inline std::vector<double> fsq_levels_of(std::span<const std::uint32_t> digits, const FSQConfig& cfg) {
  std::vector<double> v(digits.size());
  for (std::size_t j = 0; j < digits.size(); ++j) v[j] = cfg.level_value(j, digits[j]);
  return v;
}

struct FsqResult {
  std::uint64_t index = 0;
  std::vector<std::uint32_t> digits;
  std::vector<double> z_q;
};

inline FsqResult fsq_quantize(std::span<const double> z, const FSQConfig& cfg) {
  cfg.validate();
  if (z.size() != cfg.dims())
    throw UsageError("fsq_quantize: z has dim " + std::to_string(z.size()) + ", levels " +
                     std::to_string(cfg.dims()));
  FsqResult r;
  for (std::size_t j = 0; j < z.size(); ++j) {
    const double u = fsq_squash(z[j], cfg);
    const double L = cfg.levels[j];
    const double pos = (u / cfg.bound + 1.0) * (L - 1.0) / 2.0;
    const auto k = static_cast<std::uint32_t>(std::clamp(std::lround(pos), 0L, static_cast<long>(L - 1)));
    r.digits.push_back(k);
  }
  r.index = fsq_encode(r.digits, cfg);
  r.z_q = fsq_levels_of(r.digits, cfg);
  return r;
}

/// Every cell of the FSQ grid, in index order (index_space x dims).
inline std::vector<double> fsq_grid(const FSQConfig& cfg) {
  std::vector<double> out;
  for (std::uint64_t i = 0; i < cfg.index_space(); ++i) {
    const auto v = fsq_levels_of(fsq_decode(i, cfg), cfg);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

// --- RQ ----------------------------------------------------------------------

struct RQConfig {
  std::vector<Matrix> layers;  // each K_l x d

  std::size_t d() const { return layers.empty() ? 0 : layers[0].cols(); }
  void validate() const {
    if (layers.empty()) throw UsageError("RQConfig: at least one layer required");
    for (const auto& l : layers)
      if (l.shape.size() != 2 || l.cols() != d() || l.rows() == 0)
        throw UsageError("RQConfig: every layer must be a non-empty K_l x d matrix");
  }

  /// Layers taken from the sub-codebooks of a codebook (effective entries).
  static RQConfig from_codebook(const Codebook& cb) {
    RQConfig cfg;
    for (std::size_t i = 0; i < cb.N; ++i)
      cfg.layers.emplace_back(ndiff::Shape{cb.K(), cb.d}, effective_entries(cb, i));
    return cfg;
  }
};

struct RqResult {
  std::vector<std::uint32_t> indices;
  std::vector<std::vector<double>> residuals;  // residual entering each layer
  std::vector<std::vector<double>> selected;   // entry chosen at each layer
  std::vector<double> z_q;                     // sum of selected entries
  std::vector<double> residual_norms;          // |residual| after each layer
};

/// Greedy: layer l quantizes z minus the entries already chosen.
inline RqResult rq_quantize(std::span<const double> z, const RQConfig& cfg) {
  cfg.validate();
  if (z.size() != cfg.d())
    throw UsageError("rq_quantize: z has dim " + std::to_string(z.size()) + ", layers " +
                     std::to_string(cfg.d()));
  RqResult r;
  std::vector<double> res(z.begin(), z.end());
  r.z_q.assign(z.size(), 0.0);
  for (const auto& layer : cfg.layers) {
    r.residuals.push_back(res);
    const auto hit = nearest_in(res, layer.values, cfg.d());
    std::vector<double> e(layer.values.begin() + static_cast<std::ptrdiff_t>(hit.index * cfg.d()),
                          layer.values.begin() + static_cast<std::ptrdiff_t>((hit.index + 1) * cfg.d()));
    double norm = 0.0;
    for (std::size_t j = 0; j < res.size(); ++j) {
      res[j] -= e[j];
      r.z_q[j] += e[j];
      norm += res[j] * res[j];
    }
    r.indices.push_back(hit.index);
    r.selected.push_back(std::move(e));
    r.residual_norms.push_back(std::sqrt(norm));
  }
  return r;
}

// --- common contract ---------------------------------------------------------

/// Anything that turns a patch embedding into a fixed number of discrete
/// slots. Slot s emits an index in [0, slot_sizes()[s]); `slot_offsets()`
/// makes slot indices global within the scheme's index space.
class PatchQuantizer {
 public:
  virtual ~PatchQuantizer() = default;
  virtual Scheme scheme() const = 0;
  virtual std::size_t input_dim() const = 0;
  virtual std::vector<std::uint32_t> slot_sizes() const = 0;
  virtual std::vector<std::uint32_t> slot_offsets() const = 0;
  virtual QuantizedPatch quantize(std::span<const double> z) const = 0;

  std::size_t slots() const { return slot_sizes().size(); }
  double capacity_bits() const {
    double bits = 0.0;
    for (auto k : slot_sizes()) bits += std::log2(static_cast<double>(k));
    return bits;
  }

  QuantizedImage quantize_image(std::span<const double> embeddings, std::size_t rows,
                                std::size_t cols) const {
    const std::size_t D = input_dim();
    if (embeddings.size() != rows * cols * D)
      throw UsageError("quantize_image: embedding count does not match the grid");
    QuantizedImage img{rows, cols, {}};
    for (std::size_t p = 0; p < rows * cols; ++p) img.patches.push_back(quantize(embeddings.subspan(p * D, D)));
    img.validate();
    return img;
  }
};

class PQQuantizer final : public PatchQuantizer {
 public:
  PQQuantizer(PQConfig cfg, SubspaceProjector proj, Codebook cb, Fusion fusion = Fusion::kSum)
      : cfg_(cfg), proj_(std::move(proj)), cb_(std::move(cb)), fusion_(fusion) {
    cfg_.validate();
    proj_.validate(cfg_.D, cfg_.d, cfg_.N);
    cb_.validate();
    if (cb_.d != cfg_.d || (cb_.N != cfg_.N && cb_.N != 1))
      throw UsageError("PQQuantizer: codebook does not match config");
  }

  Scheme scheme() const override { return Scheme::kVQ; }
  std::size_t input_dim() const override { return cfg_.D; }
  std::vector<std::uint32_t> slot_sizes() const override {
    return std::vector<std::uint32_t>(cfg_.N, cb_.K());
  }
  std::vector<std::uint32_t> slot_offsets() const override { return pq_offsets(cb_, cfg_.N); }
  QuantizedPatch quantize(std::span<const double> z) const override {
    return quantize_patch(z, cfg_, proj_, cb_, fusion_);
  }

  const Codebook& codebook() const { return cb_; }
  const PQConfig& config() const { return cfg_; }

 private:
  PQConfig cfg_;
  SubspaceProjector proj_;
  Codebook cb_;
  Fusion fusion_;
};

class FSQQuantizer final : public PatchQuantizer {
 public:
  explicit FSQQuantizer(FSQConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  Scheme scheme() const override { return Scheme::kFSQ; }
  std::size_t input_dim() const override { return cfg_.dims(); }
  std::vector<std::uint32_t> slot_sizes() const override {
    return {static_cast<std::uint32_t>(cfg_.index_space())};
  }
  std::vector<std::uint32_t> slot_offsets() const override { return {0}; }
  QuantizedPatch quantize(std::span<const double> z) const override {
    const auto r = fsq_quantize(z, cfg_);
    QuantizedPatch q;
    q.indices = {static_cast<std::uint32_t>(r.index)};
    std::vector<double> u(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) u[j] = fsq_squash(z[j], cfg_);
    q.z_sub = {u};
    q.z_q = {r.z_q};
    q.fused = r.z_q;
    q.codebook_term = squared_distance(u, r.z_q);
    q.commitment_term = q.codebook_term;
    return q;
  }

  const FSQConfig& config() const { return cfg_; }

 private:
  FSQConfig cfg_;
};

class RQQuantizer final : public PatchQuantizer {
 public:
  explicit RQQuantizer(RQConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

  Scheme scheme() const override { return Scheme::kRQ; }
  std::size_t input_dim() const override { return cfg_.d(); }
  std::vector<std::uint32_t> slot_sizes() const override {
    std::vector<std::uint32_t> s;
    for (const auto& l : cfg_.layers) s.push_back(static_cast<std::uint32_t>(l.rows()));
    return s;
  }
  std::vector<std::uint32_t> slot_offsets() const override {
    std::vector<std::uint32_t> off;
    std::uint32_t acc = 0;
    for (const auto& l : cfg_.layers) {
      off.push_back(acc);
      acc += static_cast<std::uint32_t>(l.rows());
    }
    return off;
  }
  QuantizedPatch quantize(std::span<const double> z) const override {
    const auto r = rq_quantize(z, cfg_);
    QuantizedPatch q;
    q.indices = r.indices;
    q.z_sub = r.residuals;
    q.z_q = r.selected;
    q.fused = r.z_q;
    double dist = 0.0;
    for (std::size_t l = 0; l < r.residuals.size(); ++l)
      dist += squared_distance(r.residuals[l], r.selected[l]);
    q.codebook_term = dist / static_cast<double>(r.residuals.size());
    q.commitment_term = q.codebook_term;
    return q;
  }

  const RQConfig& config() const { return cfg_; }

 private:
  RQConfig cfg_;
};

}  // namespace kelixpq
