#pragma once

// Product-quantized patch tokenization. A D-dim patch embedding z is
// projected into N subspaces (z_i = z * P_i, each d-dim); each z_i is replaced
// by its nearest effective entry in sub-codebook i; the N quantized
// sub-vectors are fused by sum pooling into one d-dim token.
//
// The training path uses the straight-through estimator
//   ste_i = z_i + sg(zq_i - z_i)
// and the VQ loss
//   (1/N) sum_i ( |sg(z_i) - zq_i|^2 + beta |z_i - sg(zq_i)|^2 ).

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "kelixpq/codebook.hpp"
#include "kelixpq/error.hpp"
#include "kelixpq/ndiff.hpp"
#include "kelixpq/rng.hpp"

namespace kelixpq {

using Matrix = ndiff::DiffArray<double>;

enum class Fusion { kSum, kMean };

inline std::string to_string(Fusion f) { return f == Fusion::kSum ? "sum" : "mean"; }
inline Fusion fusion_from_string(const std::string& s) {
  if (s == "sum") return Fusion::kSum;
  if (s == "mean") return Fusion::kMean;
  throw UsageError("unknown fusion '" + s + "' (expected sum|mean)");
}

struct PQConfig {
  std::size_t D = 16;  // input patch-embedding dim
  std::size_t d = 16;  // subspace dim
  std::size_t N = 8;   // subspaces
  std::size_t S = 64;  // total codebook entries
  double beta = 0.25;  // commitment weight
  std::uint64_t seed = 0;

  std::size_t K() const { return S / N; }

  void validate() const {
    if (D < 1 || d < 1 || N < 1) throw UsageError("PQConfig: D, d and N must be >= 1");
    if (S < 1 || S % N != 0)
      throw UsageError("PQConfig: N=" + std::to_string(N) + " must divide S=" +
                       std::to_string(S));
    if (!(beta >= 0.0)) throw UsageError("PQConfig: beta must be >= 0");
  }
};

/// Which sub-codebook serves subspace i: its own, or the single pool of a
/// shared codebook (N = 1 in the file).
inline std::size_t pool_of(const Codebook& cb, std::size_t subspace) {
  return cb.N == 1 ? 0 : subspace;
}

/// Offset added to a sub-codebook-local index to make it global.
inline std::uint32_t pool_offset(const Codebook& cb, std::size_t subspace) {
  return static_cast<std::uint32_t>(pool_of(cb, subspace) * cb.K());
}

// --- projection --------------------------------------------------------------

struct SubspaceProjector {
  std::vector<Matrix> P;  // N matrices, D x d

  std::size_t N() const { return P.size(); }
  std::size_t D() const { return P.empty() ? 0 : P[0].rows(); }
  std::size_t d() const { return P.empty() ? 0 : P[0].cols(); }

  void validate(std::size_t D, std::size_t d, std::size_t N) const {
    if (P.size() != N)
      throw UsageError("SubspaceProjector: expected " + std::to_string(N) + " matrices");
    for (const auto& p : P)
      if (p.shape != ndiff::Shape{D, d})
        throw UsageError("SubspaceProjector: matrix shape " + ndiff::shape_str(p.shape) +
                         ", expected [" + std::to_string(D) + "," + std::to_string(d) + "]");
  }

  /// Every P_i is the first d columns of the D x D identity.
  static SubspaceProjector identity(std::size_t D, std::size_t d, std::size_t N) {
    if (d > D) throw UsageError("identity projector needs d <= D");
    std::vector<double> m(D * d, 0.0);
    for (std::size_t j = 0; j < d; ++j) m[j * d + j] = 1.0;
    SubspaceProjector sp;
    for (std::size_t i = 0; i < N; ++i) sp.P.emplace_back(ndiff::Shape{D, d}, m, true);
    return sp;
  }

  /// Seeded orthonormal columns. When N*d <= D the subspaces are disjoint
  /// column blocks of one random orthogonal matrix; otherwise each P_i comes
  /// from its own random orthogonal matrix.
  static SubspaceProjector orthonormal(std::size_t D, std::size_t d, std::size_t N,
                                       std::uint64_t seed) {
    if (d > D) throw UsageError("orthonormal projector needs d <= D");
    Rng rng(seed);
    SubspaceProjector sp;
    std::vector<double> q;
    for (std::size_t i = 0; i < N; ++i) {
      const bool fresh = (N * d > D) || i == 0;
      if (fresh) q = random_orthogonal(D, rng);
      const std::size_t c0 = (N * d <= D) ? i * d : 0;
      std::vector<double> m(D * d);
      for (std::size_t r = 0; r < D; ++r)
        for (std::size_t c = 0; c < d; ++c) m[r * d + c] = q[r * D + c0 + c];
      sp.P.emplace_back(ndiff::Shape{D, d}, std::move(m), true);
    }
    return sp;
  }

  /// D x D orthogonal matrix via modified Gram-Schmidt on Gaussian columns.
  static std::vector<double> random_orthogonal(std::size_t D, Rng& rng) {
    std::vector<double> q(D * D);
    for (auto& v : q) v = rng.normal();
    for (std::size_t c = 0; c < D; ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < D; ++r) dot += q[r * D + c] * q[r * D + p];
        for (std::size_t r = 0; r < D; ++r) q[r * D + c] -= dot * q[r * D + p];
      }
      double norm = 0.0;
      for (std::size_t r = 0; r < D; ++r) norm += q[r * D + c] * q[r * D + c];
      norm = std::sqrt(norm);
      for (std::size_t r = 0; r < D; ++r) q[r * D + c] /= norm;
    }
    return q;
  }
};

/// z_i = z * P_i for every subspace.
inline std::vector<std::vector<double>> project_subspaces(std::span<const double> z,
                                                          const SubspaceProjector& proj) {
  const std::size_t D = proj.D(), d = proj.d();
  if (z.size() != D)
    throw UsageError("project_subspaces: z has dim " + std::to_string(z.size()) +
                     ", expected " + std::to_string(D));
  std::vector<std::vector<double>> out;
  for (const auto& p : proj.P) {
    std::vector<double> v(d, 0.0);
    for (std::size_t r = 0; r < D; ++r)
      for (std::size_t c = 0; c < d; ++c) v[c] += z[r] * p.values[r * d + c];
    out.push_back(std::move(v));
  }
  return out;
}

template <class T>
std::vector<ndiff::Var<T>> project_subspaces(ndiff::Var<T> z,
                                             std::span<const ndiff::Var<T>> P) {
  std::vector<ndiff::Var<T>> out;
  for (auto p : P) out.push_back(ndiff::matmul(z, p));
  return out;
}

// --- nearest entry -----------------------------------------------------------

struct NearestEntry {
  std::uint32_t index = 0;  // sub-codebook-local
  double distance = 0.0;    // squared Euclidean
};

/// Exhaustive scan of K entries (K x d row-major); lowest index wins ties.
inline NearestEntry nearest_in(std::span<const double> query, std::span<const double> entries,
                               std::size_t d) {
  if (d == 0 || query.size() != d || entries.size() % d != 0)
    throw UsageError("nearest: dimension mismatch");
  const std::size_t K = entries.size() / d;
  if (K == 0) throw UsageError("nearest: empty sub-codebook");
  NearestEntry best{0, std::numeric_limits<double>::infinity()};
  for (std::size_t k = 0; k < K; ++k) {
    const double dist = squared_distance(query, entries.subspan(k * d, d));
    if (dist < best.distance) best = {static_cast<std::uint32_t>(k), dist};
  }
  return best;
}

/// Nearest effective entry of sub-codebook i, with the selected entry.
inline std::pair<NearestEntry, std::vector<double>> nearest(std::span<const double> z_sub,
                                                            const Codebook& cb,
                                                            std::size_t i) {
  if (z_sub.size() != cb.d)
    throw UsageError("nearest: query dim " + std::to_string(z_sub.size()) +
                     " vs codebook d=" + std::to_string(cb.d));
  const auto entries = effective_entries(cb, i);
  const auto hit = nearest_in(z_sub, entries, cb.d);
  std::vector<double> zq(entries.begin() + static_cast<std::ptrdiff_t>(hit.index * cb.d),
                         entries.begin() + static_cast<std::ptrdiff_t>((hit.index + 1) * cb.d));
  return {hit, std::move(zq)};
}

// --- quantized patches -------------------------------------------------------

struct QuantizedPatch {
  std::vector<std::uint32_t> indices;     // one per slot, slot-local
  std::vector<std::vector<double>> z_sub;  // pre-quantization, per slot
  std::vector<std::vector<double>> z_q;    // selected entries, per slot
  std::vector<double> fused;               // fused straight-through token
  /// (1/N) sum_i |z_i - zq_i|^2. Both terms share this forward value; they
  /// differ only in where their gradients go.
  double codebook_term = 0.0;
  double commitment_term = 0.0;
};

struct QuantizedImage {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<QuantizedPatch> patches;

  std::size_t P() const { return patches.size(); }
  void validate() const {
    if (rows * cols != patches.size() || patches.empty())
      throw UsageError("QuantizedImage: grid " + std::to_string(rows) + "x" +
                       std::to_string(cols) + " vs " + std::to_string(patches.size()) +
                       " patches");
  }
};

inline std::vector<double> fuse(const std::vector<std::vector<double>>& parts, Fusion fusion) {
  if (parts.empty()) throw UsageError("fuse: no sub-vectors");
  std::vector<double> out(parts[0].size(), 0.0);
  for (const auto& p : parts)
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += p[j];
  if (fusion == Fusion::kMean)
    for (auto& v : out) v /= static_cast<double>(parts.size());
  return out;
}

/// Forward-only quantization of one patch.
inline QuantizedPatch quantize_patch(std::span<const double> z, const PQConfig& cfg,
                                     const SubspaceProjector& proj, const Codebook& cb,
                                     Fusion fusion = Fusion::kSum) {
  cfg.validate();
  proj.validate(cfg.D, cfg.d, cfg.N);
  if (cb.d != cfg.d) throw UsageError("quantize_patch: codebook d != config d");
  if (cb.N != cfg.N && cb.N != 1)
    throw UsageError("quantize_patch: codebook has " + std::to_string(cb.N) +
                     " sub-codebooks for N=" + std::to_string(cfg.N));
  QuantizedPatch q;
  q.z_sub = project_subspaces(z, proj);
  double dist = 0.0;
  for (std::size_t i = 0; i < cfg.N; ++i) {
    auto [hit, zq] = nearest(q.z_sub[i], cb, pool_of(cb, i));
    q.indices.push_back(hit.index);
    q.z_q.push_back(std::move(zq));
    dist += hit.distance;
  }
  q.fused = fuse(q.z_q, fusion);  // straight-through forward value is zq
  q.codebook_term = dist / static_cast<double>(cfg.N);
  q.commitment_term = q.codebook_term;
  return q;
}

inline QuantizedImage quantize_image(std::span<const double> embeddings, std::size_t rows,
                                     std::size_t cols, const PQConfig& cfg,
                                     const SubspaceProjector& proj, const Codebook& cb,
                                     Fusion fusion = Fusion::kSum) {
  if (embeddings.size() != rows * cols * cfg.D)
    throw UsageError("quantize_image: embedding count does not match the grid");
  QuantizedImage img{rows, cols, {}};
  for (std::size_t p = 0; p < rows * cols; ++p)
    img.patches.push_back(
        quantize_patch(embeddings.subspan(p * cfg.D, cfg.D), cfg, proj, cb, fusion));
  img.validate();
  return img;
}

inline double vq_loss(const QuantizedPatch& q, double beta) {
  return q.codebook_term + beta * q.commitment_term;
}

/// Per-image loss: mean of the per-patch VQ losses.
inline double vq_loss(const QuantizedImage& img, double beta) {
  double s = 0.0;
  for (const auto& p : img.patches) s += vq_loss(p, beta);
  return s / static_cast<double>(img.patches.size());
}

/// Bits carried by one patch: N * log2(K).
inline double capacity_bits(std::size_t N, std::size_t K) {
  if (N < 1 || K < 1) throw UsageError("capacity_bits: N and K must be >= 1");
  return static_cast<double>(N) * std::log2(static_cast<double>(K));
}

// --- differentiable path -----------------------------------------------------

/// Forward value z_q, gradient w.r.t. z_sub passed through unchanged.
template <class T>
ndiff::Var<T> straight_through(ndiff::Var<T> z_sub, ndiff::Var<T> z_q) {
  return ndiff::add(z_sub, ndiff::stop_gradient(ndiff::sub(z_q, z_sub)));
}

/// |sg(z) - zq|^2: moves entries, never the encoder.
template <class T>
ndiff::Var<T> codebook_term(ndiff::Var<T> z_sub, ndiff::Var<T> z_q) {
  return ndiff::sum_squares(ndiff::sub(ndiff::stop_gradient(z_sub), z_q));
}

/// |z - sg(zq)|^2: moves the encoder, never the entries.
template <class T>
ndiff::Var<T> commitment_term(ndiff::Var<T> z_sub, ndiff::Var<T> z_q) {
  return ndiff::sum_squares(ndiff::sub(z_sub, ndiff::stop_gradient(z_q)));
}

template <class T>
ndiff::Var<T> vq_loss(std::span<const ndiff::Var<T>> z_sub, std::span<const ndiff::Var<T>> z_q,
                      T beta) {
  if (z_sub.empty() || z_sub.size() != z_q.size()) throw UsageError("vq_loss: slot mismatch");
  auto& g = *z_sub[0].graph;
  ndiff::Var<T> total = g.scalar(T{0});
  for (std::size_t i = 0; i < z_sub.size(); ++i) {
    total = ndiff::add(total, codebook_term(z_sub[i], z_q[i]));
    if (beta != T{0}) total = ndiff::add(total, ndiff::scale(commitment_term(z_sub[i], z_q[i]), beta));
  }
  return ndiff::scale(total, T{1} / static_cast<T>(z_sub.size()));
}

/// Graph nodes for one quantized patch.
template <class T>
struct PatchGraph {
  std::vector<std::uint32_t> indices;
  std::vector<ndiff::Var<T>> z_sub, z_q, ste;
  ndiff::Var<T> fused;
  ndiff::Var<T> loss;
};

/// Differentiable quantization. `entries[p]` is the effective-entry matrix
/// (K x d) of sub-codebook p, typically built once per graph with
/// `effective_entries(g, cb, p, W_p)`. Gradients reach z and P_i through the
/// straight-through path and the commitment term, and reach W through the
/// codebook term.
template <class T>
PatchGraph<T> quantize_patch(ndiff::Var<T> z, std::span<const ndiff::Var<T>> P,
                             std::span<const ndiff::Var<T>> entries, const Codebook& cb,
                             T beta, Fusion fusion = Fusion::kSum) {
  auto& g = *z.graph;
  PatchGraph<T> out;
  out.z_sub = project_subspaces(z, P);
  const std::size_t d = cb.d;
  for (std::size_t i = 0; i < out.z_sub.size(); ++i) {
    const auto pool = pool_of(cb, i);
    auto zs = g.value(out.z_sub[i]);
    auto ev = g.value(entries[pool]);
    std::vector<double> q(zs.begin(), zs.end()), e(ev.begin(), ev.end());
    const auto hit = nearest_in(q, e, d);
    out.indices.push_back(hit.index);
    auto zq = ndiff::reshape(ndiff::gather_sum(entries[pool], {{hit.index}}), ndiff::Shape{d});
    out.z_q.push_back(zq);
    out.ste.push_back(straight_through(out.z_sub[i], zq));
  }
  ndiff::Var<T> fused = out.ste[0];
  for (std::size_t i = 1; i < out.ste.size(); ++i) fused = ndiff::add(fused, out.ste[i]);
  if (fusion == Fusion::kMean) fused = ndiff::scale(fused, T{1} / static_cast<T>(out.ste.size()));
  out.fused = fused;
  out.loss = vq_loss<T>(out.z_sub, out.z_q, beta);
  return out;
}

// --- unified embedding table -------------------------------------------------

/// Rows: text table, then every effective entry (sub-codebook order) pushed
/// through the projector chain, then the special rows.
inline Matrix build_unified_table(const Codebook& cb, const std::vector<Matrix>& chain,
                                  const Matrix& text_table, const Matrix& special_table) {
  std::vector<double> vis = all_effective_entries(cb);
  std::size_t width = cb.d;
  for (const auto& m : chain) {
    if (m.shape.size() != 2 || m.rows() != width)
      throw UsageError("build_unified_table: projector chain dimension mismatch at " +
                       ndiff::shape_str(m.shape));
    const std::size_t out_w = m.cols();
    std::vector<double> next(cb.S * out_w, 0.0);
    for (std::size_t r = 0; r < cb.S; ++r)
      for (std::size_t p = 0; p < width; ++p) {
        const double a = vis[r * width + p];
        for (std::size_t c = 0; c < out_w; ++c) next[r * out_w + c] += a * m.values[p * out_w + c];
      }
    vis.swap(next);
    width = out_w;
  }
  if (text_table.cols() != width || special_table.cols() != width)
    throw UsageError("build_unified_table: text/special width != chain output width");
  std::vector<double> rows(text_table.values);
  rows.insert(rows.end(), vis.begin(), vis.end());
  rows.insert(rows.end(), special_table.values.begin(), special_table.values.end());
  const std::size_t total = text_table.rows() + cb.S + special_table.rows();
  return Matrix(ndiff::Shape{total, width}, std::move(rows));
}

// --- token dump --------------------------------------------------------------

/// One line of the token dump. Indices are global: local index plus the
/// offset of the serving sub-codebook.
inline nlohmann::json token_record(const QuantizedImage& img, const std::vector<std::uint32_t>& offsets,
                                   const std::string& scheme) {
  nlohmann::json rec;
  rec["grid"] = {img.rows, img.cols};
  auto idx = nlohmann::json::array();
  for (const auto& p : img.patches) {
    auto row = nlohmann::json::array();
    for (std::size_t i = 0; i < p.indices.size(); ++i) row.push_back(p.indices[i] + offsets.at(i));
    idx.push_back(std::move(row));
  }
  rec["indices"] = std::move(idx);
  rec["scheme"] = scheme;
  return rec;
}

inline std::vector<std::uint32_t> pq_offsets(const Codebook& cb, std::size_t N) {
  std::vector<std::uint32_t> off;
  for (std::size_t i = 0; i < N; ++i) off.push_back(pool_offset(cb, i));
  return off;
}

}  // namespace kelixpq
