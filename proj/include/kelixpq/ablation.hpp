#pragma once

// Seeded, matched-budget ablation sweeps over the toy model. Every cell is a
// RunConfig: a full model config plus the training budget and evaluation
// sizes. Cells are independent and deterministic, so they run on a small
// thread pool capped by KELIXPQ_THREADS.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "kelixpq/error.hpp"
#include "kelixpq/nbp.hpp"
#include "kelixpq/toymodel.hpp"

namespace kelixpq::ablate {

using toy::ToyConfig;
using toy::ToyModel;

struct RunConfig {
  std::string name = "run";
  ToyConfig model;
  std::size_t steps = 2000;
  std::size_t eval_samples = 64;
  std::uint64_t eval_seed = 12345;
  std::size_t exact_match_samples = 0;  // 0 skips the greedy decode check
  std::uint64_t exact_match_seed = 999;
  std::size_t tail = 50;  // final training loss = mean of the last `tail` steps

  nlohmann::json to_json() const {
    return {{"name", name},
            {"model", model.to_json()},
            {"steps", steps},
            {"eval_samples", eval_samples},
            {"eval_seed", eval_seed},
            {"exact_match_samples", exact_match_samples},
            {"exact_match_seed", exact_match_seed},
            {"tail", tail}};
  }

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig r;
    try {
      if (j.contains("name")) r.name = j.at("name").get<std::string>();
      if (j.contains("model")) r.model = ToyConfig::from_json(j.at("model"));
      if (j.contains("steps")) r.steps = j.at("steps").get<std::size_t>();
      if (j.contains("eval_samples")) r.eval_samples = j.at("eval_samples").get<std::size_t>();
      if (j.contains("eval_seed")) r.eval_seed = j.at("eval_seed").get<std::uint64_t>();
      if (j.contains("exact_match_samples"))
        r.exact_match_samples = j.at("exact_match_samples").get<std::size_t>();
      if (j.contains("exact_match_seed")) r.exact_match_seed = j.at("exact_match_seed").get<std::uint64_t>();
      if (j.contains("tail")) r.tail = j.at("tail").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("run config JSON: ") + e.what());
    }
    return r;
  }
};

struct CellResult {
  RunConfig run;
  double initial_eval_nbp = 0.0;
  double final_train_nbp = 0.0;  // mean over the last `tail` steps
  double final_eval_nbp = 0.0;
  double final_eval_vq = 0.0;
  double utilization = 0.0;  // fraction of visual ids used on the eval set
  double compression = 0.0;  // flat tokens per backbone block on one image
  double exact_match = -1.0; // -1 when not measured
  double wall_seconds = 0.0;
  std::vector<toy::StepStats> curve;
};

/// Fraction of visual ids produced when quantizing `samples`.
inline double utilization(const ToyModel& m, const std::vector<toy::Example>& samples) {
  std::set<std::uint32_t> used;
  const auto& L = m.layout();
  for (const auto& ex : samples) {
    const auto q = m.quantize(ex.sample.embeddings, ex.sample.rows, ex.sample.cols);
    for (const auto& b : m.visual_blocks(q))
      if (b.kind == BlockKind::kVisual)
        for (std::size_t j = 0; j + 1 < b.M(); ++j) used.insert(b.tokens[j]);
  }
  return L.S ? static_cast<double>(used.size()) / static_cast<double>(L.S) : 0.0;
}

/// Length of one image as a flat token stream (slots tokens per patch plus
/// one per marker and bracket) over its number of backbone blocks.
inline double compression_factor(std::size_t rows, std::size_t cols, std::size_t slots) {
  const double P = static_cast<double>(rows * cols);
  const double overhead = static_cast<double>(visual_overhead_blocks(rows));
  return (P * static_cast<double>(slots) + overhead) / (P + overhead);
}

using Progress = std::function<void(const RunConfig&, const toy::StepStats&)>;

inline CellResult run_cell(const RunConfig& rc, const Progress& progress = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  CellResult out;
  out.run = rc;
  ToyModel m(rc.model);
  const auto eval = m.eval_set(rc.eval_samples, rc.eval_seed);
  out.initial_eval_nbp = m.evaluate(eval).L_nbp;
  double tail_sum = 0.0;
  std::size_t tail_n = 0;
  for (std::size_t s = 0; s < rc.steps; ++s) {
    const auto st = m.train_step();
    out.curve.push_back(st);
    if (progress) progress(rc, st);
    if (s + rc.tail >= rc.steps) {
      tail_sum += st.L_nbp;
      ++tail_n;
    }
  }
  const auto fin = m.evaluate(eval);
  out.final_train_nbp = tail_n ? tail_sum / static_cast<double>(tail_n) : out.initial_eval_nbp;
  out.final_eval_nbp = fin.L_nbp;
  out.final_eval_vq = fin.L_vq;
  out.utilization = utilization(m, eval);
  out.compression = compression_factor(rc.model.task.rows, rc.model.task.cols, m.slots());
  if (rc.exact_match_samples) out.exact_match = m.caption_exact_match(rc.exact_match_samples, rc.exact_match_seed);
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

/// Worker count: KELIXPQ_THREADS if set (>= 1), else the hardware count.
inline std::size_t thread_cap() {
  if (const char* env = std::getenv("KELIXPQ_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw UsageError("KELIXPQ_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs every cell; results keep the input order whatever the scheduling.
inline std::vector<CellResult> run_cells(const std::vector<RunConfig>& cells, std::size_t threads,
                                         const Progress& progress = {}) {
  std::vector<CellResult> out(cells.size());
  std::vector<std::exception_ptr> errors(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex progress_mu;
  Progress guarded;
  if (progress)
    guarded = [&](const RunConfig& rc, const toy::StepStats& st) {
      std::lock_guard lock(progress_mu);
      progress(rc, st);
    };
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        out[i] = run_cell(cells[i], guarded);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(1, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

// --- axes --------------------------------------------------------------------

inline const std::vector<std::string>& axes() {
  static const std::vector<std::string> a = {"N", "d", "S", "fusion", "shared", "scheme", "head9"};
  return a;
}

/// Base cell for sweeps: a grid-caption task with a palette large enough
/// that a single small codebook cannot name every symbol.
inline RunConfig sweep_base() {
  RunConfig r;
  r.name = "base";
  auto& c = r.model;
  c.task.rows = 2;
  c.task.cols = 2;
  c.task.palette = 48;
  c.task.D = 16;
  c.task.noise = 0.05;
  c.task.seed = 3;
  c.pq.D = 16;
  c.pq.S = 32;
  c.pq.N = 4;
  c.pq.d = 4;
  c.projector_init = toy::ProjectorInit::kOrthonormal;
  c.backbone.d_model = 32;
  c.backbone.heads = 4;
  c.backbone.layers = 2;
  c.decoder.heads = 4;
  c.optim.lr = 2e-3;
  c.seed = 11;
  r.steps = 1500;
  r.eval_samples = 128;
  return r;
}

/// Cells of one axis. Every cell differs from `base` only along the axis.
inline std::vector<RunConfig> axis_cells(const std::string& axis, const RunConfig& base = sweep_base()) {
  std::vector<RunConfig> cells;
  auto cell = [&](const std::string& label) {
    RunConfig r = base;
    r.name = axis + "=" + label;
    cells.push_back(r);
    return &cells.back();
  };
  const std::size_t D = base.model.task.D;
  if (axis == "N") {
    for (std::size_t N : {1, 2, 4, 8}) {
      auto* r = cell(std::to_string(N));
      r->model.pq.N = N;
      r->model.pq.d = std::max<std::size_t>(1, D / N);
    }
  } else if (axis == "d") {
    for (std::size_t d : {2, 4, 8, 16}) cell(std::to_string(d))->model.pq.d = d;
  } else if (axis == "S") {
    for (std::size_t S : {16, 32, 64, 128}) cell(std::to_string(S))->model.pq.S = S;
  } else if (axis == "fusion") {
    cell("sum")->model.fusion = Fusion::kSum;
    cell("mean")->model.fusion = Fusion::kMean;
  } else if (axis == "shared") {
    cell("separate")->model.shared_codebook = false;
    cell("shared")->model.shared_codebook = true;
  } else if (axis == "scheme") {
    cell("vq")->model.scheme = Scheme::kVQ;
    cell("fsq")->model.scheme = Scheme::kFSQ;
    cell("rq")->model.scheme = Scheme::kRQ;
  } else if (axis == "head9") {
    for (auto kind : {toy::DecoderKind::kBlock, toy::DecoderKind::kNineHead}) {
      auto* r = cell(toy::to_string(kind));
      r->model.decoder_kind = kind;
      r->model.mode = toy::TaskMode::kJoint;
    }
  } else {
    std::string opts;
    for (const auto& a : axes()) opts += (opts.empty() ? "" : "|") + a;
    throw UsageError("unknown axis '" + axis + "' (expected " + opts + ")");
  }
  for (auto& c : cells) c.model.validate();
  return cells;
}

inline std::string csv_header() {
  return "name,scheme,N,S,d,beta,fusion,shared,decoder,steps,initial_eval_nbp,final_train_nbp,"
         "final_eval_nbp,final_eval_vq,utilization,compression,exact_match,wall_seconds";
}

inline std::string csv_row(const CellResult& r) {
  const auto& c = r.run.model;
  std::ostringstream os;
  os.precision(10);
  os << r.run.name << ',' << to_string(c.scheme) << ',' << c.pq.N << ',' << c.pq.S << ',' << c.pq.d << ','
     << c.pq.beta << ',' << to_string(c.fusion) << ',' << (c.shared_codebook ? 1 : 0) << ','
     << toy::to_string(c.decoder_kind) << ',' << r.run.steps << ',' << r.initial_eval_nbp << ','
     << r.final_train_nbp << ',' << r.final_eval_nbp << ',' << r.final_eval_vq << ',' << r.utilization << ','
     << r.compression << ',' << r.exact_match << ',' << r.wall_seconds;
  return os.str();
}

inline std::string csv_report(const std::vector<CellResult>& results) {
  std::string s = csv_header() + "\n";
  for (const auto& r : results) s += csv_row(r) + "\n";
  return s;
}

}  // namespace kelixpq::ablate
