// Command-line front end: synthetic data, codebook building, tokenization,
// toy-model training and generation, and ablation sweeps.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "kelixpq/kelixpq.hpp"

namespace fs = std::filesystem;
using namespace kelixpq;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot write " + path.string());
  f << text;
  if (!f) throw UsageError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UsageError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(what + ": " + e.what());
  }
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string& s) {
  const auto x = s.find('x');
  try {
    if (x == std::string::npos) throw std::invalid_argument("no x");
    const auto r = std::stoul(s.substr(0, x));
    const auto c = std::stoul(s.substr(x + 1));
    if (r == 0 || c == 0) throw std::invalid_argument("zero");
    return {r, c};
  } catch (const std::exception&) {
    throw UsageError("grid must look like ROWSxCOLS, got '" + s + "'");
  }
}

std::string caption_text(std::span<const std::uint32_t> ids, const GridVocab& v) {
  std::string out;
  for (auto t : ids) out += (out.empty() ? "" : " ") + v.name(t);
  return out;
}

// --- synth -------------------------------------------------------------------

struct SynthArgs {
  std::string kind = "mixture";
  std::string out;
  std::string captions;
  MixtureSpec mix;
  GridTaskSpec grid;
  std::size_t count = 100;
};

int cmd_synth(const SynthArgs& a) {
  if (a.kind == "mixture") {
    const auto m = gen_mixture(a.mix);
    save_embeddings(m.points, a.out);
    std::cout << "wrote " << m.points.count() << " points (D=" << m.points.D << ", "
              << a.mix.components << " components) to " << a.out << "\n";
    return 0;
  }
  if (a.kind != "grid") throw UsageError("synth kind must be mixture or grid");
  a.grid.validate();
  GridTask task(a.grid);
  Rng rng(a.grid.seed ^ 0x9e3779b97f4a7c15ULL);
  EmbeddingSet e;
  e.D = static_cast<std::uint32_t>(a.grid.D);
  std::string lines;
  for (std::size_t i = 0; i < a.count; ++i) {
    const auto s = task.sample(rng);
    e.values.insert(e.values.end(), s.embeddings.begin(), s.embeddings.end());
    e.labels.insert(e.labels.end(), s.cells.begin(), s.cells.end());
    nlohmann::json rec{{"grid", {s.rows, s.cols}},
                       {"cells", s.cells},
                       {"caption", s.caption},
                       {"text", caption_text(s.caption, task.vocab())}};
    lines += rec.dump() + "\n";
  }
  for (auto& v : e.values) v = to_f32(v);
  save_embeddings(e, a.out);
  if (!a.captions.empty()) write_text(a.captions, lines);
  std::cout << "wrote " << a.count << " grids of " << a.grid.rows << "x" << a.grid.cols << " ("
            << e.count() << " patches, D=" << e.D << ") to " << a.out << "\n";
  return 0;
}

// --- kmeans-build ------------------------------------------------------------

struct KMeansArgs {
  std::string emb, out, projector = "identity";
  std::size_t clusters = 0, subspaces = 1, d = 0, iters = 50;
  std::uint64_t seed = 0;
};

SubspaceProjector make_projector(const std::string& kind, std::size_t D, std::size_t d, std::size_t N,
                                 std::uint64_t seed) {
  if (kind == "identity") return SubspaceProjector::identity(D, d, N);
  if (kind == "orthonormal") return SubspaceProjector::orthonormal(D, d, N, seed);
  throw UsageError("projector must be identity or orthonormal");
}

int cmd_kmeans_build(const KMeansArgs& a) {
  const auto emb = load_embeddings(a.emb);
  const std::size_t D = emb.D;
  const std::size_t d = a.d ? a.d : D;
  if (d > D) throw UsageError("--d exceeds the embedding dimension " + std::to_string(D));
  if (a.clusters == 0) throw UsageError("--clusters must be >= 1");
  if (a.subspaces == 0 || a.clusters % a.subspaces != 0)
    throw UsageError("--subspaces=" + std::to_string(a.subspaces) + " must divide --clusters=" +
                     std::to_string(a.clusters));
  const auto proj = make_projector(a.projector, D, d, a.subspaces, a.seed);
  std::vector<double> pooled;
  const bool plain = d == D && a.projector == "identity";
  if (plain) {
    pooled = emb.values;
  } else {
    for (std::size_t r = 0; r < emb.count(); ++r)
      for (const auto& v : project_subspaces(emb.row(r), proj)) pooled.insert(pooled.end(), v.begin(), v.end());
  }
  const auto km = kmeans(pooled, d, a.clusters, a.iters, a.seed);
  for (std::size_t i = 0; i < km.cost_history.size(); ++i)
    std::cout << "iter " << i << " cost " << std::setprecision(10) << km.cost_history[i] << "\n";
  std::cout << "converged " << (km.converged ? "yes" : "no") << " after " << km.iterations << " iterations\n";
  if (plain && emb.labels.size() == emb.count() && !emb.labels.empty()) {
    std::map<std::uint32_t, std::pair<std::vector<double>, std::size_t>> groups;
    for (std::size_t r = 0; r < emb.count(); ++r) {
      auto& [sum, n] = groups[emb.labels[r]];
      sum.resize(D, 0.0);
      for (std::size_t j = 0; j < D; ++j) sum[j] += emb.row(r)[j];
      ++n;
    }
    double cost = 0.0;
    for (std::size_t r = 0; r < emb.count(); ++r) {
      const auto& [sum, n] = groups[emb.labels[r]];
      for (std::size_t j = 0; j < D; ++j) {
        const double diff = emb.row(r)[j] - sum[j] / static_cast<double>(n);
        cost += diff * diff;
      }
    }
    std::cout << "true-label cost " << cost << " (ratio " << km.final_cost() / cost << ")\n";
    std::vector<std::uint32_t> assign(km.assignments.begin(), km.assignments.end());
    std::cout << "ARI vs labels " << adjusted_rand_index(assign, emb.labels) << "\n";
  }
  const auto cb = partition(km.centers, d, a.subspaces, a.seed);
  save_codebook(cb, a.out);
  std::cout << "wrote codebook S=" << cb.S << " N=" << cb.N << " d=" << cb.d << " to " << a.out << "\n";
  return 0;
}

// --- tokenize ----------------------------------------------------------------

struct TokenizeArgs {
  std::string emb, codebook, scheme = "vq", out, grid = "1x1", projector = "identity";
  std::size_t subspaces = 0;
  std::vector<std::uint32_t> fsq_levels = {4, 4, 2};
  std::uint64_t seed = 0;
};

int cmd_tokenize(const TokenizeArgs& a) {
  const auto emb = load_embeddings(a.emb);
  const auto [rows, cols] = parse_grid(a.grid);
  const std::size_t P = rows * cols;
  if (emb.count() % P != 0)
    throw FormatError("embedding count " + std::to_string(emb.count()) + " is not a multiple of the grid size " +
                      std::to_string(P));
  const auto scheme = scheme_from_string(a.scheme);
  std::unique_ptr<PatchQuantizer> q;
  std::optional<SubspaceProjector> pre;  // projection applied before fsq
  std::size_t S_total = 0;
  if (scheme == Scheme::kVQ) {
    const auto cb = load_codebook(a.codebook);
    PQConfig cfg;
    cfg.D = emb.D;
    cfg.d = cb.d;
    cfg.N = a.subspaces ? a.subspaces : cb.N;
    cfg.S = cb.S;
    if (cb.d > emb.D)
      throw FormatError("dimension mismatch: codebook d=" + std::to_string(cb.d) + " > embedding D=" +
                        std::to_string(emb.D));
    if (cb.N != 1 && cb.N != cfg.N)
      throw UsageError("--subspaces must equal the codebook's N=" + std::to_string(cb.N));
    if (cfg.S % cfg.N != 0) throw UsageError("N must divide S");
    auto proj = make_projector(a.projector, emb.D, cb.d, cfg.N, a.seed);
    S_total = cb.S;
    q = std::make_unique<PQQuantizer>(cfg, std::move(proj), cb);
  } else if (scheme == Scheme::kRQ) {
    const auto cb = load_codebook(a.codebook);
    if (cb.d != emb.D)
      throw FormatError("dimension mismatch: codebook d=" + std::to_string(cb.d) + " but embedding D=" +
                        std::to_string(emb.D));
    S_total = cb.S;
    q = std::make_unique<RQQuantizer>(RQConfig::from_codebook(cb));
  } else {
    const FSQConfig fc{a.fsq_levels};
    fc.validate();
    if (fc.dims() > emb.D) throw FormatError("dimension mismatch: more FSQ levels than embedding dims");
    pre = SubspaceProjector::orthonormal(emb.D, fc.dims(), 1, a.seed);
    S_total = fc.index_space();
    q = std::make_unique<FSQQuantizer>(fc);
  }

  const auto sizes = q->slot_sizes();
  const auto offsets = q->slot_offsets();
  std::vector<std::set<std::uint32_t>> used(sizes.size());
  std::string lines;
  std::set<std::vector<std::uint32_t>> distinct_codes;
  for (std::size_t img = 0; img < emb.count() / P; ++img) {
    std::vector<double> z;
    for (std::size_t p = 0; p < P; ++p) {
      const auto row = emb.row(img * P + p);
      if (pre) {
        const auto u = project_subspaces(row, *pre)[0];
        z.insert(z.end(), u.begin(), u.end());
      } else {
        z.insert(z.end(), row.begin(), row.end());
      }
    }
    const auto qi = q->quantize_image(z, rows, cols);
    for (const auto& patch : qi.patches) {
      for (std::size_t s = 0; s < patch.indices.size(); ++s) used[s].insert(patch.indices[s]);
      distinct_codes.insert(patch.indices);
    }
    lines += token_record(qi, offsets, a.scheme).dump() + "\n";
  }
  write_text(a.out, lines);
  std::cout << "scheme " << a.scheme << ", " << emb.count() / P << " images, " << emb.count() << " patches\n";
  for (std::size_t s = 0; s < sizes.size(); ++s)
    std::cout << "slot " << s << " utilization " << static_cast<double>(used[s].size()) / sizes[s] << " ("
              << used[s].size() << "/" << sizes[s] << ")\n";
  std::cout << "distinct codes " << distinct_codes.size() << "\n";
  std::cout << "capacity_bits " << q->capacity_bits() << " per patch\n";
  std::cout << "single-token capacity_bits " << capacity_bits(1, S_total) << " (one index over " << S_total
            << " entries)\n";
  return 0;
}

int cmd_capacity(std::size_t N, std::size_t S) {
  if (N == 0 || S == 0 || S % N != 0) throw UsageError("capacity: N must divide S");
  std::cout << "N=" << N << " S=" << S << " K=" << S / N << " capacity_bits " << capacity_bits(N, S / N)
            << " per patch\n";
  std::cout << "single-token capacity_bits " << capacity_bits(1, S) << "\n";
  return 0;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string task = "grid", config, out = "run", stage, resume;
  std::size_t steps = 2000, log_every = 50, checkpoint_every = 0, eval_samples = 64, exact_match = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

toy::ToyConfig load_config(const std::string& path) {
  if (path.empty()) return toy::ToyConfig{};
  return toy::ToyConfig::from_json(parse_json(read_text(path), "config " + path));
}

std::string step_csv_header() { return "step,L_nbp,L_vq,L_total,supervised_blocks,seconds\n"; }

int cmd_train(const TrainArgs& a) {
  if (a.task != "grid") throw UsageError("only --task grid is available");
  const fs::path out(a.out);
  fs::create_directories(out);
  std::optional<toy::ToyModel> model;
  if (!a.resume.empty()) {
    model.emplace(toy::ToyModel::load(a.resume));
  } else {
    auto cfg = load_config(a.config);
    if (a.seed_set) cfg.seed = a.seed;
    if (!a.stage.empty()) cfg.stage = toy::stage_from_string(a.stage);
    model.emplace(cfg);
  }
  if (!a.stage.empty()) model->set_stage(toy::stage_from_string(a.stage));
  auto& m = *model;

  ablate::RunConfig rc;
  rc.name = out.filename().string();
  rc.model = m.config();
  rc.steps = a.steps;
  rc.eval_samples = a.eval_samples;
  write_text(out / "run_config.json", rc.to_json().dump(2) + "\n");

  const auto eval = m.eval_set(a.eval_samples, rc.eval_seed);
  const auto e0 = m.evaluate(eval);
  std::cout << "step " << m.step() << " eval L_nbp " << e0.L_nbp << " L_vq " << e0.L_vq << "\n";

  std::ofstream log(out / "loss.csv", std::ios::binary);
  log << step_csv_header();
  log.precision(10);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t s = 0; s < a.steps; ++s) {
    const auto st = m.train_step();
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << st.step << ',' << st.L_nbp << ',' << st.L_vq << ',' << st.L_total << ',' << st.supervised_blocks << ','
        << secs << '\n';
    if (a.log_every && (s % a.log_every == 0 || s + 1 == a.steps))
      std::cout << "step " << st.step << " L_nbp " << st.L_nbp << " L_vq " << st.L_vq << " L_total " << st.L_total
                << "\n";
    if (a.checkpoint_every && (s + 1) % a.checkpoint_every == 0)
      m.save(out / ("checkpoint_" + std::to_string(st.step) + ".klx"));
  }
  m.save(out / "checkpoint.klx");
  const auto e1 = m.evaluate(eval);
  nlohmann::json summary{{"steps", m.step()},
                         {"initial_eval_nbp", e0.L_nbp},
                         {"final_eval_nbp", e1.L_nbp},
                         {"final_eval_vq", e1.L_vq}};
  std::cout << "step " << m.step() << " eval L_nbp " << e1.L_nbp << " L_vq " << e1.L_vq << "\n";
  if (a.exact_match) {
    const double em = m.caption_exact_match(a.exact_match, rc.exact_match_seed);
    summary["exact_match"] = em;
    std::cout << "caption exact match " << em << " on " << a.exact_match << " samples\n";
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  std::cout << "checkpoint " << (out / "checkpoint.klx").string() << "\n";
  return 0;
}

// --- generate ----------------------------------------------------------------

struct GenerateArgs {
  std::string checkpoint, prompt = "image", prompt_file, out;
  std::uint64_t sample_seed = 1, seed = 0;
  double temperature = 0.0;
  std::size_t max_blocks = 64;
  bool unconstrained = false;
};

int cmd_generate(const GenerateArgs& a) {
  const auto m = toy::ToyModel::load(a.checkpoint);
  const auto& L = m.layout();
  std::vector<Block> prompt;
  std::optional<GridSample> sample;
  if (!a.prompt_file.empty()) {
    prompt = blocks_from_json(parse_json(read_text(a.prompt_file), "prompt " + a.prompt_file));
    for (const auto& b : prompt) validate_block(b, L, m.slots());
  } else {
    Rng rng(a.sample_seed);
    sample = m.task().sample(rng);
    if (a.prompt == "image") {
      prompt = m.visual_blocks(m.quantize(sample->embeddings, sample->rows, sample->cols));
    } else if (a.prompt == "caption") {
      prompt = make_text_blocks(sample->caption, L);
    } else {
      throw UsageError("--prompt must be image or caption");
    }
  }
  toy::GenerateOptions opt;
  opt.max_new_blocks = a.max_blocks;
  opt.seed = a.seed;
  opt.sample.temperature = a.temperature;
  opt.sample.constrained = !a.unconstrained;
  const auto gen = m.generate(prompt, opt);
  std::vector<std::uint32_t> text;
  for (std::size_t i = gen.prompt_blocks; i < gen.blocks.size(); ++i)
    if (gen.blocks[i].kind == BlockKind::kText && L.is_text(gen.blocks[i].tokens[0]))
      text.push_back(gen.blocks[i].tokens[0]);
  const std::string line = to_json(gen.blocks).dump() + "\n";
  if (a.out.empty())
    std::cout << line;
  else
    write_text(a.out, line);
  const auto& v = m.task().vocab();
  std::cout << "caption: " << caption_text(text, v) << "\n";
  if (sample) std::cout << "reference: " << caption_text(sample->caption, v) << "\n";
  std::cout << "blocks " << gen.blocks.size() - gen.prompt_blocks << (gen.ended_with_eos ? " (eos)" : "")
            << (gen.hit_limit ? " (limit reached)" : "") << "\n";
  return 0;
}

// --- ablate ------------------------------------------------------------------

struct AblateArgs {
  std::string axis, out = "ablation", base;
  std::size_t steps = 0;
};

int cmd_ablate(const AblateArgs& a) {
  auto base = ablate::sweep_base();
  if (!a.base.empty()) base = ablate::RunConfig::from_json(parse_json(read_text(a.base), "base " + a.base));
  if (a.steps) base.steps = a.steps;
  const auto cells = ablate::axis_cells(a.axis, base);
  const fs::path out(a.out);
  fs::create_directories(out);
  const auto threads = ablate::thread_cap();
  std::cout << "axis " << a.axis << ": " << cells.size() << " cells, " << base.steps << " steps each, " << threads
            << " threads\n";
  const auto results = ablate::run_cells(cells, threads);
  for (const auto& r : results) {
    std::string dir = r.run.name;
    for (auto& ch : dir)
      if (ch == '=') ch = '_';
    const auto cd = out / dir;
    fs::create_directories(cd);
    write_text(cd / "run_config.json", r.run.to_json().dump(2) + "\n");
    std::ostringstream curve;
    curve.precision(10);
    curve << "step,L_nbp,L_vq,L_total,supervised_blocks\n";
    for (const auto& st : r.curve)
      curve << st.step << ',' << st.L_nbp << ',' << st.L_vq << ',' << st.L_total << ',' << st.supervised_blocks << '\n';
    write_text(cd / "loss.csv", curve.str());
  }
  const auto report = ablate::csv_report(results);
  write_text(out / "report.csv", report);
  std::cout << report;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Product-quantized visual tokens and next-block prediction toolkit"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate synthetic embedding dumps");
  s->add_option("kind", synth.kind, "mixture or grid")->check(CLI::IsMember({"mixture", "grid"}));
  s->add_option("--out", synth.out, "Output EMB1 file")->required();
  s->add_option("--captions", synth.captions, "Grid captions as JSON lines");
  s->add_option("--components", synth.mix.components);
  s->add_option("--D", synth.mix.D, "Embedding dimension")->each([&](const std::string& v) {
    synth.grid.D = std::stoul(v);
  });
  s->add_option("--mean-scale", synth.mix.mean_scale);
  s->add_option("--sigma", synth.mix.sigma);
  s->add_option("--per-component", synth.mix.points_per_component);
  s->add_option("--seed", synth.mix.seed)->each([&](const std::string& v) { synth.grid.seed = std::stoull(v); });
  s->add_option("--rows", synth.grid.rows);
  s->add_option("--cols", synth.grid.cols);
  s->add_option("--palette", synth.grid.palette);
  s->add_option("--noise", synth.grid.noise);
  s->add_option("--count", synth.count, "Number of grids");

  KMeansArgs km;
  auto* k = app.add_subcommand("kmeans-build", "Cluster an embedding dump into a CBK1 codebook");
  k->add_option("--emb", km.emb)->required();
  k->add_option("--clusters", km.clusters, "Total entries S")->required();
  k->add_option("--out", km.out)->required();
  k->add_option("--subspaces", km.subspaces, "Sub-codebooks N");
  k->add_option("--d", km.d, "Code dimension (default: embedding D)");
  k->add_option("--projector", km.projector)->check(CLI::IsMember({"identity", "orthonormal"}));
  k->add_option("--iters", km.iters);
  k->add_option("--seed", km.seed);

  TokenizeArgs tk;
  auto* t = app.add_subcommand("tokenize", "Quantize an embedding dump into a token dump");
  t->add_option("--emb", tk.emb)->required();
  t->add_option("--codebook", tk.codebook, "CBK1 file (vq and rq)");
  t->add_option("--scheme", tk.scheme)->check(CLI::IsMember({"vq", "fsq", "rq"}));
  t->add_option("--out", tk.out)->required();
  t->add_option("--grid", tk.grid, "Patches per image as ROWSxCOLS");
  t->add_option("--subspaces", tk.subspaces, "N for a shared codebook");
  t->add_option("--projector", tk.projector)->check(CLI::IsMember({"identity", "orthonormal"}));
  t->add_option("--fsq-levels", tk.fsq_levels)->delimiter(',');
  t->add_option("--seed", tk.seed);

  std::size_t cap_N = 8, cap_S = 65536;
  auto* c = app.add_subcommand("capacity", "Print bits per patch for N sub-codebooks over S entries");
  c->add_option("--N", cap_N);
  c->add_option("--S", cap_S);

  TrainArgs tr;
  auto* r = app.add_subcommand("train", "Train the toy model");
  r->add_option("--task", tr.task)->check(CLI::IsMember({"grid"}));
  r->add_option("--config", tr.config, "Model config JSON");
  r->add_option("--steps", tr.steps);
  r->add_option("--stage", tr.stage)->check(CLI::IsMember({"align", "full"}));
  r->add_option("--out", tr.out, "Output directory");
  r->add_option("--resume", tr.resume, "Continue from a checkpoint");
  r->add_option("--log-every", tr.log_every);
  r->add_option("--checkpoint-every", tr.checkpoint_every);
  r->add_option("--eval-samples", tr.eval_samples);
  r->add_option("--exact-match", tr.exact_match, "Greedy caption check on this many samples");
  r->add_option("--seed", tr.seed)->each([&](const std::string&) { tr.seed_set = true; });

  GenerateArgs ge;
  auto* g = app.add_subcommand("generate", "Generate from a checkpoint");
  g->add_option("--checkpoint", ge.checkpoint)->required();
  g->add_option("--prompt", ge.prompt, "image or caption of a fresh task sample")
      ->check(CLI::IsMember({"image", "caption"}));
  g->add_option("--prompt-file", ge.prompt_file, "Packed-sequence JSON prompt");
  g->add_option("--sample-seed", ge.sample_seed);
  g->add_option("--seed", ge.seed, "Sampling seed");
  g->add_option("--temperature", ge.temperature);
  g->add_option("--max-blocks", ge.max_blocks);
  g->add_flag("--unconstrained", ge.unconstrained);
  g->add_option("--out", ge.out, "Write the packed sequence here instead of stdout");

  AblateArgs ab;
  auto* a = app.add_subcommand("ablate", "Run a seeded ablation sweep");
  a->add_option("--axis", ab.axis)->required();
  a->add_option("--out", ab.out, "Output directory");
  a->add_option("--steps", ab.steps, "Override the per-cell step budget");
  a->add_option("--base", ab.base, "Base RunConfig JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*k) return cmd_kmeans_build(km);
    if (*t) return cmd_tokenize(tk);
    if (*c) return cmd_capacity(cap_N, cap_S);
    if (*r) return cmd_train(tr);
    if (*g) return cmd_generate(ge);
    if (*a) return cmd_ablate(ab);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
