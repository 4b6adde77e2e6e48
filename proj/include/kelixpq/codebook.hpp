#pragma once

// Codebook lifecycle: K-means centers, a seeded partition into N equal
// sub-codebooks, frozen centers with one learnable d x d projection W_i per
// sub-codebook (effective entry = center_row * W_i), and the CBK1 file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "kelixpq/binary_io.hpp"
#include "kelixpq/error.hpp"
#include "kelixpq/ndiff.hpp"
#include "kelixpq/rng.hpp"

namespace kelixpq {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

// --- K-means -----------------------------------------------------------------

struct KMeansResult {
  std::vector<double> centers;  // S x d
  std::vector<std::uint32_t> assignments;
  /// Total within-cluster squared distance after each assignment step; the
  /// first entry is the cost of the k-means++ seeding.
  std::vector<double> cost_history;
  std::size_t iterations = 0;
  bool converged = false;

  double final_cost() const { return cost_history.back(); }
};

namespace detail {

/// Nearest center (lowest index on ties) for every point; returns total cost.
inline double assign_points(std::span<const double> points, std::size_t d,
                            std::span<const double> centers, std::size_t S,
                            std::vector<std::uint32_t>& assign, std::vector<double>& dist) {
  const std::size_t M = points.size() / d;
  double cost = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    const auto p = points.subspan(m * d, d);
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t arg = 0;
    for (std::size_t s = 0; s < S; ++s) {
      const double dd = squared_distance(p, centers.subspan(s * d, d));
      if (dd < best) {
        best = dd;
        arg = static_cast<std::uint32_t>(s);
      }
    }
    assign[m] = arg;
    dist[m] = best;
    cost += best;
  }
  return cost;
}

/// Index drawn with probability proportional to `weights`; uniform when all
/// weights are zero.
inline std::size_t weighted_pick(const std::vector<double>& weights, double total, Rng& rng) {
  if (!(total > 0.0)) return rng.index(weights.size());
  double r = rng.uniform() * total;
  for (std::size_t m = 0; m < weights.size(); ++m) {
    r -= weights[m];
    if (r < 0.0) return m;
  }
  return weights.size() - 1;
}

/// Greedy k-means++: each new center is the best (lowest resulting cost) of
/// 2 + floor(ln S) candidates drawn by squared distance.
inline std::vector<double> kmeanspp_seed(std::span<const double> points, std::size_t d,
                                         std::size_t S, Rng& rng) {
  const std::size_t M = points.size() / d;
  const std::size_t trials = 2 + static_cast<std::size_t>(std::floor(std::log(static_cast<double>(S))));
  std::vector<double> centers;
  centers.reserve(S * d);
  auto first = rng.index(M);
  centers.insert(centers.end(), points.begin() + static_cast<std::ptrdiff_t>(first * d),
                 points.begin() + static_cast<std::ptrdiff_t>((first + 1) * d));
  std::vector<double> nearest(M);
  for (std::size_t m = 0; m < M; ++m)
    nearest[m] = squared_distance(points.subspan(m * d, d), std::span(centers).first(d));
  std::vector<double> candidate(M), best_nearest(M);
  for (std::size_t s = 1; s < S; ++s) {
    const double total = std::accumulate(nearest.begin(), nearest.end(), 0.0);
    std::size_t best = M;
    double best_cost = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < trials; ++t) {
      const std::size_t pick = weighted_pick(nearest, total, rng);
      const auto c = points.subspan(pick * d, d);
      double cost = 0.0;
      for (std::size_t m = 0; m < M; ++m) {
        candidate[m] = std::min(nearest[m], squared_distance(points.subspan(m * d, d), c));
        cost += candidate[m];
      }
      if (cost < best_cost) {
        best_cost = cost;
        best = pick;
        best_nearest.swap(candidate);
      }
    }
    const auto c = points.subspan(best * d, d);
    centers.insert(centers.end(), c.begin(), c.end());
    nearest.swap(best_nearest);
  }
  return centers;
}

}  // namespace detail

/// Lloyd's algorithm from greedy k-means++ seeding over M points of dimension d
/// (row-major). Stops after `max_iters` updates or at an assignment fixpoint.
/// A cluster left empty by an update is reseeded with the point of the
/// highest-cost cluster that lies farthest from its center.
inline KMeansResult kmeans(std::span<const double> points, std::size_t d, std::size_t S,
                           std::size_t max_iters, std::uint64_t seed) {
  if (d == 0 || points.empty()) throw UsageError("kmeans: empty input");
  if (points.size() % d != 0) throw UsageError("kmeans: points not a multiple of d");
  const std::size_t M = points.size() / d;
  if (S == 0) throw UsageError("kmeans: need at least one cluster");
  if (M < S)
    throw UsageError("kmeans: " + std::to_string(M) + " points < " + std::to_string(S) +
                     " clusters");
  if (max_iters < 1) throw UsageError("kmeans: max_iters must be >= 1");

  Rng rng(seed);
  KMeansResult r;
  r.centers = detail::kmeanspp_seed(points, d, S, rng);
  r.assignments.assign(M, 0);
  std::vector<double> dist(M);
  r.cost_history.push_back(detail::assign_points(points, d, r.centers, S, r.assignments, dist));

  std::vector<double> sums(S * d);
  std::vector<std::size_t> counts(S);
  std::vector<std::uint32_t> next(M);
  for (std::size_t it = 0; it < max_iters; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t m = 0; m < M; ++m) {
      const auto a = r.assignments[m];
      ++counts[a];
      for (std::size_t j = 0; j < d; ++j) sums[a * d + j] += points[m * d + j];
    }
    std::vector<double> cluster_cost(S, 0.0);
    for (std::size_t m = 0; m < M; ++m) cluster_cost[r.assignments[m]] += dist[m];
    for (std::size_t s = 0; s < S; ++s)
      if (counts[s] > 0)
        for (std::size_t j = 0; j < d; ++j)
          r.centers[s * d + j] = sums[s * d + j] / static_cast<double>(counts[s]);

    for (std::size_t s = 0; s < S; ++s) {
      if (counts[s] > 0) continue;
      const auto worst = static_cast<std::size_t>(
          std::max_element(cluster_cost.begin(), cluster_cost.end()) - cluster_cost.begin());
      std::size_t far = M;
      double far_d = -1.0;
      for (std::size_t m = 0; m < M; ++m)
        if (r.assignments[m] == worst && dist[m] > far_d) {
          far_d = dist[m];
          far = m;
        }
      if (far == M) break;  // every cluster already has zero cost
      std::copy_n(points.begin() + static_cast<std::ptrdiff_t>(far * d), d,
                  r.centers.begin() + static_cast<std::ptrdiff_t>(s * d));
      cluster_cost[worst] -= dist[far];
      dist[far] = 0.0;
      counts[s] = 1;
    }

    const double cost = detail::assign_points(points, d, r.centers, S, next, dist);
    r.cost_history.push_back(cost);
    r.iterations = it + 1;
    const bool same = next == r.assignments;
    r.assignments.swap(next);
    if (same) {
      r.converged = true;
      break;
    }
  }
  return r;
}

// --- Codebook ----------------------------------------------------------------

enum class PartitionOrder { kRandom, kIdentity };

struct Codebook {
  std::uint32_t S = 0;  // total entries
  std::uint32_t N = 0;  // sub-codebooks
  std::uint32_t d = 0;  // code dimension
  std::uint64_t seed = 0;
  /// Sub-codebook i owns entries permutation[i*K, (i+1)*K).
  std::vector<std::uint32_t> permutation;
  std::vector<double> centers;              // S x d, frozen
  std::vector<ndiff::DiffArray<double>> W;  // N matrices, d x d

  std::uint32_t K() const { return N == 0 ? 0 : S / N; }

  /// Checks every structural invariant; throws FormatError on violation.
  void validate() const {
    if (N == 0 || S == 0 || d == 0) throw FormatError("codebook: zero S, N or d");
    if (S % N != 0)
      throw FormatError("codebook: N=" + std::to_string(N) + " does not divide S=" +
                        std::to_string(S));
    if (permutation.size() != S) throw FormatError("codebook: permutation length");
    std::vector<bool> seen(S, false);
    for (auto p : permutation) {
      if (p >= S || seen[p]) throw FormatError("codebook: partition is not a bijection");
      seen[p] = true;
    }
    if (centers.size() != std::size_t{S} * d) throw FormatError("codebook: centers size");
    if (W.size() != N) throw FormatError("codebook: W count");
    for (const auto& w : W)
      if (w.shape != ndiff::Shape{d, d}) throw FormatError("codebook: W shape");
  }

  std::span<const std::uint32_t> sub_range(std::size_t i) const {
    check_index(i);
    return std::span(permutation).subspan(i * K(), K());
  }

  /// Frozen rows of sub-codebook i (K x d).
  std::vector<double> sub_centers(std::size_t i) const {
    std::vector<double> out;
    out.reserve(std::size_t{K()} * d);
    for (auto e : sub_range(i))
      out.insert(out.end(), centers.begin() + static_cast<std::ptrdiff_t>(e * d),
                 centers.begin() + static_cast<std::ptrdiff_t>((e + 1) * d));
    return out;
  }

  void check_index(std::size_t i) const {
    if (i >= N)
      throw UsageError("sub-codebook index " + std::to_string(i) + " out of range [0," +
                       std::to_string(N) + ")");
  }

  friend bool operator==(const Codebook&, const Codebook&) = default;
};

/// Splits S centers (S x d) into N sub-codebooks of K = S/N entries. Each W_i
/// starts as the identity.
inline Codebook partition(std::vector<double> centers, std::size_t d, std::size_t N,
                          std::uint64_t seed, PartitionOrder order = PartitionOrder::kRandom) {
  if (d == 0 || centers.empty() || centers.size() % d != 0)
    throw UsageError("partition: centers must be a non-empty S x d matrix");
  const std::size_t S = centers.size() / d;
  if (N == 0 || S % N != 0)
    throw UsageError("partition: N=" + std::to_string(N) + " does not divide S=" +
                     std::to_string(S));
  Codebook cb;
  cb.S = static_cast<std::uint32_t>(S);
  cb.N = static_cast<std::uint32_t>(N);
  cb.d = static_cast<std::uint32_t>(d);
  cb.seed = seed;
  cb.permutation.resize(S);
  std::iota(cb.permutation.begin(), cb.permutation.end(), 0u);
  if (order == PartitionOrder::kRandom) {
    Rng rng(seed);
    rng.shuffle(cb.permutation.begin(), cb.permutation.end());
  }
  cb.centers = std::move(centers);
  std::vector<double> eye(d * d, 0.0);
  for (std::size_t j = 0; j < d; ++j) eye[j * d + j] = 1.0;
  for (std::size_t i = 0; i < N; ++i) cb.W.emplace_back(ndiff::Shape{d, d}, eye, true);
  return cb;
}

/// Frozen sub-centers of subspace i times W_i (K x d).
inline std::vector<double> effective_entries(const Codebook& cb, std::size_t i) {
  cb.check_index(i);
  const auto sub = cb.sub_centers(i);
  const auto& w = cb.W[i].values;
  const std::size_t K = cb.K(), d = cb.d;
  std::vector<double> out(K * d, 0.0);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t p = 0; p < d; ++p) {
      const double c = sub[k * d + p];
      for (std::size_t j = 0; j < d; ++j) out[k * d + j] += c * w[p * d + j];
    }
  return out;
}

/// Graph version: differentiable in `w` only; the sub-centers enter as
/// constants.
template <class T>
ndiff::Var<T> effective_entries(ndiff::Graph<T>& g, const Codebook& cb, std::size_t i,
                                ndiff::Var<T> w) {
  cb.check_index(i);
  const auto sub = cb.sub_centers(i);
  auto c = g.constant(ndiff::Shape{cb.K(), cb.d}, std::vector<T>(sub.begin(), sub.end()));
  return ndiff::matmul(c, w);
}

/// All effective entries, sub-codebook 0 first (S x d).
inline std::vector<double> all_effective_entries(const Codebook& cb) {
  std::vector<double> out;
  out.reserve(cb.centers.size());
  for (std::size_t i = 0; i < cb.N; ++i) {
    auto e = effective_entries(cb, i);
    out.insert(out.end(), e.begin(), e.end());
  }
  return out;
}

// --- CBK1 --------------------------------------------------------------------

inline constexpr char kCodebookMagic[4] = {'C', 'B', 'K', '1'};
inline constexpr std::uint32_t kCodebookVersion = 1;

inline std::vector<std::uint8_t> encode_codebook(const Codebook& cb) {
  cb.validate();
  io::Writer w;
  w.put_bytes(std::string_view(kCodebookMagic, 4));
  w.put(kCodebookVersion);
  w.put(cb.S);
  w.put(cb.N);
  w.put(cb.d);
  w.put(cb.seed);
  w.put_array(std::span<const std::uint32_t>(cb.permutation));
  w.put_array(std::span<const double>(cb.centers));
  for (const auto& m : cb.W) w.put_array(std::span<const double>(m.values));
  w.seal();
  return w.take();
}

inline Codebook decode_codebook(std::span<const std::uint8_t> bytes) {
  io::Reader r(bytes, "CBK1");
  if (bytes.size() < 4 || r.get_bytes(4) != std::string_view(kCodebookMagic, 4))
    throw BadMagicError("bad format: not a CBK1 codebook file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCodebookVersion)
    throw FormatError("CBK1: unsupported version " + std::to_string(version));
  Codebook cb;
  cb.S = r.get<std::uint32_t>();
  cb.N = r.get<std::uint32_t>();
  cb.d = r.get<std::uint32_t>();
  cb.seed = r.get<std::uint64_t>();
  if (cb.N == 0 || cb.S == 0 || cb.d == 0 || cb.S % cb.N != 0)
    throw FormatError("CBK1: invalid header S=" + std::to_string(cb.S) +
                      " N=" + std::to_string(cb.N) + " d=" + std::to_string(cb.d));
  cb.permutation = r.get_array<std::uint32_t>(cb.S);
  cb.centers = r.get_array<double>(std::size_t{cb.S} * cb.d);
  for (std::uint32_t i = 0; i < cb.N; ++i)
    cb.W.emplace_back(ndiff::Shape{cb.d, cb.d},
                      r.get_array<double>(std::size_t{cb.d} * cb.d), true);
  r.verify_crc();
  cb.validate();
  return cb;
}

inline void save_codebook(const Codebook& cb, const std::filesystem::path& path) {
  io::write_file(path, encode_codebook(cb));
}

inline Codebook load_codebook(const std::filesystem::path& path) {
  return decode_codebook(io::read_file(path));
}

}  // namespace kelixpq
