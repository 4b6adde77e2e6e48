// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// non-zero when any criterion fails. Tolerances are fixed here.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "kelixpq/kelixpq.hpp"

using namespace kelixpq;
using G = ndiff::Graph<double>;
using V = ndiff::Var<double>;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kFusionTol = 1e-12;
constexpr double kMinAri = 0.99;
constexpr double kMinCompression = 7.2;
constexpr double kMaxLossFraction = 0.5;
constexpr double kMinExactMatch = 0.8;
constexpr double kOracleSeconds = 10.0;
constexpr double kGradientSeconds = 120.0;
constexpr double kKmeansSeconds = 30.0;
constexpr double kToySeconds = 15.0 * 60.0;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count(); }

 private:
  std::chrono::steady_clock::time_point t0_ = std::chrono::steady_clock::now();
};

std::vector<double> normals(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

std::string fmt(double x) {
  std::ostringstream os;
  os.precision(6);
  os << x;
  return os.str();
}

// 1 ---------------------------------------------------------------------------

Outcome quantizer_oracle() {
  Stopwatch sw;
  Rng rng(101);
  std::size_t matches = 0;
  const std::size_t n = 1000;
  for (std::size_t t = 0; t < n; ++t) {
    const std::size_t d = 1 + rng.index(8), N = 1 + rng.index(8), K = 1 + rng.index(32);
    auto cb = partition(normals(N * K * d, rng), d, N, rng.next());
    for (auto& w : cb.W)
      for (auto& x : w.values) x += 0.3 * rng.normal();
    const auto q = normals(d, rng);
    const std::size_t i = rng.index(N);
    if (nearest(q, cb, i).first.index == brute_quantize(q, effective_entries(cb, i))) ++matches;
  }
  const double secs = sw.seconds();
  return {matches == n && secs < kOracleSeconds,
          std::to_string(matches) + "/" + std::to_string(n) + " match in " + fmt(secs) + " s"};
}

// 2 ---------------------------------------------------------------------------

Outcome gradient_suite() {
  Stopwatch sw;
  Rng rng(202);
  double worst_vq = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t N = 3, d = 3, D = 6;
    auto cb = partition(normals(4 * N * d, rng), d, N, rng.next());
    const auto proj = SubspaceProjector::orthonormal(D, d, N, rng.next());
    ndiff::ParamSet<double> ps;
    ps.add("z", {D}, normals(D, rng));
    for (std::size_t i = 0; i < N; ++i) {
      ps.add("P" + std::to_string(i), proj.P[i]);
      auto w = cb.W[i];
      for (auto& x : w.values) x += 0.2 * rng.normal();
      ps.add("W" + std::to_string(i), w);
    }
    auto loss = [&](double beta) {
      return [&, beta](G& g) {
        std::vector<V> P, E;
        for (std::size_t i = 0; i < N; ++i) {
          P.push_back(g.param(ps, "P" + std::to_string(i)));
          E.push_back(effective_entries(g, cb, i, g.param(ps, "W" + std::to_string(i))));
        }
        return quantize_patch<double>(g.param(ps, "z"), P, E, cb, beta).loss;
      };
    };
    // The beta = 0 value is the mean squared distance S; stop gradients send
    // dS/dW to the entries and beta * dS/d(z, P) to the encoder side.
    const double beta = 0.25;
    const auto ana = ndiff::value_and_grad(loss(beta), ps);
    const auto num = ndiff::finite_diff_grad(loss(0.0), ps, 1e-6);
    for (const auto& [name, gr] : ana.grads) {
      auto expect = num.at(name);
      if (name[0] != 'W')
        for (auto& x : expect) x *= beta;
      worst_vq = std::max(worst_vq, ndiff::max_rel_error<double>(gr, expect));
    }
  }

  toy::ToyModel m(toy::ToyConfig{});
  Rng data(203);
  const auto batch = m.sample_batch(data, 2);
  auto expr = [&](G& g) { return m.forward(g, batch).L_nbp; };
  const auto ana = ndiff::value_and_grad(expr, m.params());
  const auto names = m.params().names();
  double worst_nbp = 0.0;
  std::size_t checked = 0;
  Rng pick(204);
  while (checked < 10) {
    const auto& name = names[pick.index(names.size())];
    auto& p = m.params().at(name);
    if (!p.requires_grad) continue;
    const std::vector<std::size_t> coord{pick.index(p.size())};
    const double num = ndiff::finite_diff_slice<double>(expr, p, coord, 1e-6)[0];
    const double a = ana.grads.at(name)[coord[0]];
    worst_nbp = std::max(worst_nbp, std::abs(a - num) / std::max(1.0, std::abs(num)));
    ++checked;
  }
  const double secs = sw.seconds();
  return {worst_vq <= kGradTol && worst_nbp <= kGradTol && secs < kGradientSeconds,
          "max rel err L_vq " + fmt(worst_vq) + ", L_nbp slice " + fmt(worst_nbp) + ", " + fmt(secs) + " s"};
}

// 3 ---------------------------------------------------------------------------

Outcome gradient_routing() {
  Rng rng(303);
  bool codebook_zero = true, commit_zero = true;
  for (int t = 0; t < 20; ++t) {
    auto cb = partition(normals(8 * 3, rng), 3, 2, rng.next());
    ndiff::ParamSet<double> ps;
    ps.add("z", {3}, normals(3, rng));
    ps.add("W0", cb.W[0]);
    const auto pick = static_cast<std::uint32_t>(rng.index(4));
    auto with = [&](auto term) {
      return ndiff::value_and_grad(
          [&](G& g) {
            auto z = g.param(ps, "z");
            auto e = effective_entries(g, cb, 0, g.param(ps, "W0"));
            auto zq = ndiff::reshape(ndiff::gather_sum(e, {{pick}}), ndiff::Shape{3});
            return term(z, zq);
          },
          ps);
    };
    const auto cb_grads = with([](V z, V zq) { return codebook_term(z, zq); });
    const auto commit_grads = with([](V z, V zq) { return commitment_term(z, zq); });
    for (double x : cb_grads.grads.at("z")) codebook_zero &= x == 0.0;
    for (double x : commit_grads.grads.at("W0")) commit_zero &= x == 0.0;
  }
  toy::ToyModel m(toy::ToyConfig{});
  const auto centers = m.frozen_centers();
  const auto W0 = m.codebook().W;
  for (int s = 0; s < 100; ++s) m.train_step();
  const bool frozen = m.frozen_centers() == centers && m.codebook().centers == centers;
  std::size_t moved = 0;
  const auto W1 = m.codebook().W;
  for (std::size_t i = 0; i < W0.size(); ++i) moved += W0[i].values != W1[i].values;
  return {codebook_zero && commit_zero && frozen && moved >= 1,
          std::string("codebook->z zero: ") + (codebook_zero ? "yes" : "no") +
              ", commitment->entries zero: " + (commit_zero ? "yes" : "no") + ", centers bit-identical: " +
              (frozen ? "yes" : "no") + ", W changed: " + std::to_string(moved) + "/" + std::to_string(W0.size())};
}

// 4 ---------------------------------------------------------------------------

Outcome capacity() {
  const double a = capacity_bits(1, 65536), b = capacity_bits(8, 8192);
  return {a == 16.0 && b == 104.0, "capacity_bits(1,65536)=" + fmt(a) + ", capacity_bits(8,8192)=" + fmt(b)};
}

// 5 ---------------------------------------------------------------------------

QuantizedImage random_image(std::size_t rows, std::size_t cols, std::size_t N, std::uint32_t K, Rng& rng) {
  QuantizedImage img{rows, cols, {}};
  for (std::size_t p = 0; p < rows * cols; ++p) {
    QuantizedPatch q;
    for (std::size_t i = 0; i < N; ++i) q.indices.push_back(static_cast<std::uint32_t>(rng.index(K)));
    img.patches.push_back(q);
  }
  return img;
}

Outcome block_contract() {
  const VocabLayout L{30, 64};
  const std::vector<std::uint32_t> sizes(8, 8);
  std::vector<std::uint32_t> offsets;
  for (std::uint32_t i = 0; i < 8; ++i) offsets.push_back(8 * i);
  Rng rng(505);
  bool sizes_ok = true;
  std::size_t round_trips = 0;
  const std::size_t n = 1000;
  for (std::size_t t = 0; t < n; ++t) {
    std::vector<Block> seq;
    for (std::size_t part = 0, parts = 1 + rng.index(4); part < parts; ++part) {
      if (rng.index(2)) {
        std::vector<std::uint32_t> ids;
        for (std::size_t k = 0, m = 1 + rng.index(8); k < m; ++k) ids.push_back(static_cast<std::uint32_t>(rng.index(30)));
        for (auto& b : make_text_blocks(ids, L)) seq.push_back(b);
      } else {
        for (auto& b : make_visual_blocks(random_image(1 + rng.index(3), 1 + rng.index(3), 8, 8, rng), L, offsets, sizes))
          seq.push_back(b);
      }
    }
    for (const auto& b : seq) sizes_ok &= b.M() == (b.kind == BlockKind::kVisual ? 9u : 2u);
    if (unflatten(flatten(seq), L) == seq) ++round_trips;
  }
  return {sizes_ok && round_trips == n, std::string("text M=2 / visual M=9: ") + (sizes_ok ? "yes" : "no") +
                                            ", round trips " + std::to_string(round_trips) + "/" + std::to_string(n)};
}

// 6 ---------------------------------------------------------------------------

Outcome compression() {
  const VocabLayout L{30, 64};
  const std::vector<std::uint32_t> sizes(8, 8);
  std::vector<std::uint32_t> offsets;
  for (std::uint32_t i = 0; i < 8; ++i) offsets.push_back(8 * i);
  Rng rng(606);
  std::ostringstream info;
  bool pass = true;
  for (auto [rows, cols] : {std::pair<std::size_t, std::size_t>{1, 64}, {8, 8}}) {
    const auto blocks = make_visual_blocks(random_image(rows, cols, 8, 8, rng), L, offsets, sizes);
    std::size_t flat = 0;
    for (const auto& b : blocks) flat += b.M() - 1;  // the stream a one-token-per-step model reads
    const double ratio = static_cast<double>(flat) / static_cast<double>(blocks.size());
    const bool bound = blocks.size() <= 64 + visual_overhead_blocks(rows);
    info << rows << "x" << cols << ": " << blocks.size() << " blocks, " << flat << " tokens, ratio " << fmt(ratio)
         << (rows == 1 ? "" : " (informational)") << "; ";
    if (rows == 1) pass = bound && ratio >= kMinCompression;
  }
  return {pass, info.str()};
}

// 7 ---------------------------------------------------------------------------

Outcome fusion_identity() {
  const VocabLayout L{30, 64};
  Rng rng(707);
  const std::size_t V_ = L.total();
  const Matrix table({V_, 6}, normals(V_ * 6, rng));
  const std::vector<std::uint32_t> sizes(8, 8);
  std::vector<std::uint32_t> offsets;
  for (std::uint32_t i = 0; i < 8; ++i) offsets.push_back(8 * i);
  double worst = 0.0;
  for (int t = 0; t < 500; ++t)
    for (const auto& b : make_visual_blocks(random_image(1, 2, 8, 8, rng), L, offsets, sizes)) {
      if (b.kind != BlockKind::kVisual) continue;
      const auto s = block_encode(b, table, Fusion::kSum);
      const auto m = block_encode(b, table, Fusion::kMean);
      for (std::size_t c = 0; c < 6; ++c)
        worst = std::max(worst, std::abs(s[c] - static_cast<double>(b.M() - 1) * m[c]));
    }
  const auto cells = ablate::axis_cells("fusion");
  auto a = cells[0].model.to_json(), b = cells[1].model.to_json();
  const bool only_fusion = a.at("fusion") != b.at("fusion") && (a.erase("fusion"), b.erase("fusion"), a == b);
  return {worst <= kFusionTol && only_fusion,
          "max |sum - (M-1) mean| " + fmt(worst) + ", harness cells differ only in fusion: " +
              (only_fusion ? "yes" : "no")};
}

// 8 ---------------------------------------------------------------------------

Outcome kmeans_check() {
  Stopwatch sw;
  bool monotone = true;
  double worst_ari = 1.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MixtureSpec spec;
    spec.components = 8;
    spec.D = 16;
    spec.mean_scale = 10.0;
    spec.sigma = 1.0;
    spec.points_per_component = 100;
    spec.seed = seed;
    const auto mix = gen_mixture(spec);
    const auto km = kmeans(mix.points.values, spec.D, 8, 100, seed);
    for (std::size_t i = 1; i < km.cost_history.size(); ++i) monotone &= km.cost_history[i] <= km.cost_history[i - 1];
    worst_ari = std::min(worst_ari, adjusted_rand_index(km.assignments, mix.points.labels));
  }
  // Overlapping mixtures need many Lloyd steps; cost must still never rise.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MixtureSpec spec;
    spec.components = 6;
    spec.D = 4;
    spec.mean_scale = 2.0;
    spec.points_per_component = 50;
    spec.seed = 100 + seed;
    const auto km = kmeans(gen_mixture(spec).points.values, 4, 10, 100, seed);
    for (std::size_t i = 1; i < km.cost_history.size(); ++i) monotone &= km.cost_history[i] <= km.cost_history[i - 1];
  }
  const double secs = sw.seconds();
  return {monotone && worst_ari >= kMinAri && secs < kKmeansSeconds,
          std::string("monotone: ") + (monotone ? "yes" : "no") + ", min ARI " + fmt(worst_ari) + ", " + fmt(secs) +
              " s"};
}

// 9 ---------------------------------------------------------------------------

Outcome fsq_rq() {
  const FSQConfig small{{2, 3, 2}};
  std::set<std::vector<std::uint32_t>> seen;
  bool bijection = small.index_space() == 12;
  for (std::uint64_t i = 0; i < small.index_space(); ++i) {
    const auto digits = fsq_decode(i, small);
    bijection &= fsq_encode(digits, small) == i && seen.insert(digits).second;
  }
  bijection &= seen.size() == 12;
  const FSQConfig big{{16, 16, 16, 16}};
  const bool card = big.index_space() == 65536;

  Rng rng(909);
  bool rq_ok = true;
  for (int t = 0; t < 500; ++t) {
    RQConfig cfg;
    for (int l = 0; l < 4; ++l) {
      auto v = normals(6 * 3, rng);
      std::fill(v.begin(), v.begin() + 3, 0.0);
      cfg.layers.emplace_back(ndiff::Shape{6, 3}, v);
    }
    const auto z = normals(3, rng);
    const auto r = rq_quantize(z, cfg);
    double prev = std::sqrt(z[0] * z[0] + z[1] * z[1] + z[2] * z[2]);
    for (double n : r.residual_norms) {
      rq_ok &= n <= prev;
      prev = n;
    }
  }
  return {bijection && card && rq_ok, std::string("FSQ [2,3,2] bijection: ") + (bijection ? "yes" : "no") +
                                          ", [16,16,16,16] cardinality " + std::to_string(big.index_space()) +
                                          ", RQ norms non-increasing: " + (rq_ok ? "yes" : "no")};
}

// 10 --------------------------------------------------------------------------

Outcome toy_end_to_end() {
  Stopwatch sw;
  toy::ToyModel m(toy::ToyConfig{});
  const auto eval = m.eval_set(128, 12345);
  const double before = m.evaluate(eval).L_nbp;
  double first_train = 0.0;
  for (int s = 0; s < 2000; ++s) {
    const auto st = m.train_step();
    if (s == 0) first_train = st.L_nbp;
  }
  const double after = m.evaluate(eval).L_nbp;
  const double em = m.caption_exact_match(100, 999);
  const double secs = sw.seconds();
  return {after < kMaxLossFraction * before && em >= kMinExactMatch && secs <= kToySeconds,
          "eval L_nbp " + fmt(before) + " -> " + fmt(after) + " (step-0 train " + fmt(first_train) +
              "), exact match " + fmt(em) + " on 100 held-out grids, " + fmt(secs) + " s"};
}

// 11 --------------------------------------------------------------------------

Outcome ablation_direction() {
  const auto threads = ablate::thread_cap();
  const auto n_results = ablate::run_cells(ablate::axis_cells("N"), threads);
  bool non_increasing = true;
  std::ostringstream info;
  info << "N-sweep eval L_nbp";
  for (std::size_t i = 0; i < n_results.size(); ++i) {
    info << " N=" << n_results[i].run.model.pq.N << ":" << fmt(n_results[i].final_eval_nbp);
    if (i) non_increasing &= n_results[i].final_eval_nbp <= n_results[i - 1].final_eval_nbp;
  }
  const auto h_results = ablate::run_cells(ablate::axis_cells("head9"), threads);
  const double block = h_results[0].final_eval_nbp, head9 = h_results[1].final_eval_nbp;
  info << "; block " << fmt(block) << " vs 9-head " << fmt(head9);
  return {non_increasing && head9 >= block, info.str()};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"quantizer-oracle", quantizer_oracle},
      {"gradient-suite", gradient_suite},
      {"gradient-routing", gradient_routing},
      {"capacity-accounting", capacity},
      {"block-size-contract", block_contract},
      {"sequence-compression", compression},
      {"fusion-identity", fusion_identity},
      {"kmeans", kmeans_check},
      {"fsq-rq", fsq_rq},
      {"toy-end-to-end", toy_end_to_end},
      {"ablation-directionality", ablation_direction},
  };
  int failures = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << std::endl;
  }
  return failures ? 1 : 0;
}
