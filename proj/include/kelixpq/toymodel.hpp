#pragma once

// Desk-scale unified model over next-block prediction.
//
// Every block of a sequence is collapsed into one embedding E_i (sum of its
// token embeddings, eob excluded), a small pre-LN transformer runs causally
// over the E_i, and a lightweight block decoder reconstructs block i+1 from
// h_i: its input is [h_i * W_in, e(t^1), ..., e(t^{M-1})], causally masked,
// read out through the shared LM head. The visual rows of the unified
// embedding table are the codebook's effective entries pushed through an
// up-projector, so the next-block loss reaches the SimVQ matrices.
//
// One training batch is a single graph: all sequences are stacked row-wise
// and separated by block-diagonal causal masks, and all supervised target
// blocks are decoded together the same way.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "kelixpq/binary_io.hpp"
#include "kelixpq/codebook.hpp"
#include "kelixpq/error.hpp"
#include "kelixpq/nbp.hpp"
#include "kelixpq/ndiff.hpp"
#include "kelixpq/pq.hpp"
#include "kelixpq/quantalt.hpp"
#include "kelixpq/rng.hpp"
#include "kelixpq/synth.hpp"

namespace kelixpq::toy {

using ndiff::Var;
using Graph = ndiff::Graph<double>;
using Params = ndiff::ParamSet<double>;
using ndiff::Mask;

// --- configuration -----------------------------------------------------------

enum class TaskMode { kCaption, kGenerate, kJoint };
enum class Stage { kAlign, kFull };
enum class DecoderKind { kBlock, kNineHead };
enum class VisualEmbedding { kDerived, kRandom };
enum class ProjectorInit { kIdentity, kOrthonormal };

namespace detail {
template <class E>
using NameTable = std::initializer_list<std::pair<E, const char*>>;

template <class E>
std::string name_of(E e, NameTable<E> table) {
  for (const auto& [v, n] : table)
    if (v == e) return n;
  throw UsageError("unnamed enum value");
}
template <class E>
E value_of(const std::string& s, NameTable<E> table, const char* what) {
  std::string options;
  for (const auto& [v, n] : table) {
    if (s == n) return v;
    options += (options.empty() ? "" : "|") + std::string(n);
  }
  throw UsageError(std::string("unknown ") + what + " '" + s + "' (expected " + options + ")");
}

inline constexpr NameTable<TaskMode> kModes = {
    {TaskMode::kCaption, "caption"}, {TaskMode::kGenerate, "generate"}, {TaskMode::kJoint, "joint"}};
inline constexpr NameTable<Stage> kStages = {{Stage::kAlign, "align"}, {Stage::kFull, "full"}};
inline constexpr NameTable<DecoderKind> kDecoders = {{DecoderKind::kBlock, "block"},
                                                     {DecoderKind::kNineHead, "head9"}};
inline constexpr NameTable<VisualEmbedding> kVisual = {{VisualEmbedding::kDerived, "derived"},
                                                       {VisualEmbedding::kRandom, "random"}};
inline constexpr NameTable<ProjectorInit> kProjInit = {{ProjectorInit::kIdentity, "identity"},
                                                       {ProjectorInit::kOrthonormal, "orthonormal"}};
}  // namespace detail

inline std::string to_string(TaskMode m) { return detail::name_of(m, detail::kModes); }
inline std::string to_string(Stage s) { return detail::name_of(s, detail::kStages); }
inline std::string to_string(DecoderKind k) { return detail::name_of(k, detail::kDecoders); }
inline std::string to_string(VisualEmbedding v) { return detail::name_of(v, detail::kVisual); }
inline std::string to_string(ProjectorInit p) { return detail::name_of(p, detail::kProjInit); }
inline TaskMode mode_from_string(const std::string& s) { return detail::value_of(s, detail::kModes, "task mode"); }
inline Stage stage_from_string(const std::string& s) { return detail::value_of(s, detail::kStages, "stage"); }
inline DecoderKind decoder_from_string(const std::string& s) { return detail::value_of(s, detail::kDecoders, "decoder"); }
inline VisualEmbedding visual_from_string(const std::string& s) { return detail::value_of(s, detail::kVisual, "visual embedding"); }
inline ProjectorInit projinit_from_string(const std::string& s) { return detail::value_of(s, detail::kProjInit, "projector init"); }

struct BackboneConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_model = 64;
  std::size_t max_blocks = 64;
};

struct BlockDecoderConfig {
  std::size_t layers = 1;
  std::size_t heads = 4;
  std::size_t max_M = 0;  // 0: exactly slots + 1
};

struct OptimConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double clip = 0.0;  // global gradient-norm clip, 0 disables
  std::size_t batch = 8;
};

struct ToyConfig {
  GridTaskSpec task;
  TaskMode mode = TaskMode::kCaption;
  Scheme scheme = Scheme::kVQ;
  PQConfig pq;  // pq.D must equal task.D
  Fusion fusion = Fusion::kSum;
  bool shared_codebook = false;
  ProjectorInit projector_init = ProjectorInit::kIdentity;
  std::vector<std::uint32_t> fsq_levels = {4, 4, 2};
  std::size_t rq_layers = 2;
  std::size_t kmeans_points = 2048;
  std::size_t kmeans_iters = 30;
  BackboneConfig backbone;
  BlockDecoderConfig decoder;
  OptimConfig optim;
  DecoderKind decoder_kind = DecoderKind::kBlock;
  VisualEmbedding visual_embedding = VisualEmbedding::kDerived;
  bool ntp_through_quantizer = false;
  Stage stage = Stage::kFull;
  std::uint64_t seed = 0;

  void validate() const {
    task.validate();
    pq.validate();
    if (pq.D != task.D)
      throw UsageError("config: pq.D=" + std::to_string(pq.D) + " differs from task.D=" +
                       std::to_string(task.D));
    if (backbone.d_model == 0 || backbone.heads == 0 || backbone.d_model % backbone.heads != 0)
      throw UsageError("config: d_model must be a positive multiple of backbone heads");
    if (decoder.heads == 0 || backbone.d_model % decoder.heads != 0)
      throw UsageError("config: d_model must be a multiple of decoder heads");
    if (backbone.layers < 1 || decoder.layers < 1 || decoder.layers > 2)
      throw UsageError("config: need >= 1 backbone layer and 1-2 decoder layers");
    if (optim.batch < 1) throw UsageError("config: batch must be >= 1");
    if (!(optim.lr > 0.0)) throw UsageError("config: lr must be positive");
    if (scheme == Scheme::kFSQ) FSQConfig{fsq_levels}.validate();
    if (scheme == Scheme::kRQ && (rq_layers < 1 || pq.S % rq_layers != 0))
      throw UsageError("config: rq_layers must divide S");
    if (ntp_through_quantizer &&
        (scheme != Scheme::kVQ || visual_embedding != VisualEmbedding::kDerived))
      throw UsageError("config: ntp_through_quantizer needs scheme vq with derived embeddings");
  }

  nlohmann::json to_json() const {
    using nlohmann::json;
    return json{
        {"task",
         {{"rows", task.rows}, {"cols", task.cols}, {"palette", task.palette}, {"D", task.D},
          {"noise", task.noise}, {"proto_scale", task.proto_scale},
          {"grammar_version", task.grammar_version}, {"seed", task.seed}}},
        {"mode", to_string(mode)},
        {"scheme", kelixpq::to_string(scheme)},
        {"pq", {{"D", pq.D}, {"d", pq.d}, {"N", pq.N}, {"S", pq.S}, {"beta", pq.beta}, {"seed", pq.seed}}},
        {"fusion", kelixpq::to_string(fusion)},
        {"shared_codebook", shared_codebook},
        {"projector_init", to_string(projector_init)},
        {"fsq_levels", fsq_levels},
        {"rq_layers", rq_layers},
        {"kmeans_points", kmeans_points},
        {"kmeans_iters", kmeans_iters},
        {"backbone",
         {{"layers", backbone.layers}, {"heads", backbone.heads}, {"d_model", backbone.d_model},
          {"max_blocks", backbone.max_blocks}}},
        {"decoder", {{"layers", decoder.layers}, {"heads", decoder.heads}, {"max_M", decoder.max_M}}},
        {"optim",
         {{"lr", optim.lr}, {"beta1", optim.beta1}, {"beta2", optim.beta2}, {"eps", optim.eps},
          {"weight_decay", optim.weight_decay}, {"clip", optim.clip}, {"batch", optim.batch}}},
        {"decoder_kind", to_string(decoder_kind)},
        {"visual_embedding", to_string(visual_embedding)},
        {"ntp_through_quantizer", ntp_through_quantizer},
        {"stage", to_string(stage)},
        {"seed", seed},
    };
  }

  /// Missing keys keep their defaults; unknown enum names are errors.
  static ToyConfig from_json(const nlohmann::json& j) {
    ToyConfig c;
    try {
      auto get = [](const nlohmann::json& o, const char* k, auto& dst) {
        if (o.contains(k)) dst = o.at(k).get<std::decay_t<decltype(dst)>>();
      };
      if (j.contains("task")) {
        const auto& t = j.at("task");
        get(t, "rows", c.task.rows);
        get(t, "cols", c.task.cols);
        get(t, "palette", c.task.palette);
        get(t, "D", c.task.D);
        get(t, "noise", c.task.noise);
        get(t, "proto_scale", c.task.proto_scale);
        get(t, "grammar_version", c.task.grammar_version);
        get(t, "seed", c.task.seed);
      }
      if (j.contains("mode")) c.mode = mode_from_string(j.at("mode").get<std::string>());
      if (j.contains("scheme")) c.scheme = scheme_from_string(j.at("scheme").get<std::string>());
      c.pq.D = c.task.D;
      if (j.contains("pq")) {
        const auto& p = j.at("pq");
        get(p, "D", c.pq.D);
        get(p, "d", c.pq.d);
        get(p, "N", c.pq.N);
        get(p, "S", c.pq.S);
        get(p, "beta", c.pq.beta);
        get(p, "seed", c.pq.seed);
      }
      if (j.contains("fusion")) c.fusion = fusion_from_string(j.at("fusion").get<std::string>());
      get(j, "shared_codebook", c.shared_codebook);
      if (j.contains("projector_init"))
        c.projector_init = projinit_from_string(j.at("projector_init").get<std::string>());
      get(j, "fsq_levels", c.fsq_levels);
      get(j, "rq_layers", c.rq_layers);
      get(j, "kmeans_points", c.kmeans_points);
      get(j, "kmeans_iters", c.kmeans_iters);
      if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        get(b, "layers", c.backbone.layers);
        get(b, "heads", c.backbone.heads);
        get(b, "d_model", c.backbone.d_model);
        get(b, "max_blocks", c.backbone.max_blocks);
      }
      if (j.contains("decoder")) {
        const auto& b = j.at("decoder");
        get(b, "layers", c.decoder.layers);
        get(b, "heads", c.decoder.heads);
        get(b, "max_M", c.decoder.max_M);
      }
      if (j.contains("optim")) {
        const auto& o = j.at("optim");
        get(o, "lr", c.optim.lr);
        get(o, "beta1", c.optim.beta1);
        get(o, "beta2", c.optim.beta2);
        get(o, "eps", c.optim.eps);
        get(o, "weight_decay", c.optim.weight_decay);
        get(o, "clip", c.optim.clip);
        get(o, "batch", c.optim.batch);
      }
      if (j.contains("decoder_kind"))
        c.decoder_kind = decoder_from_string(j.at("decoder_kind").get<std::string>());
      if (j.contains("visual_embedding"))
        c.visual_embedding = visual_from_string(j.at("visual_embedding").get<std::string>());
      get(j, "ntp_through_quantizer", c.ntp_through_quantizer);
      if (j.contains("stage")) c.stage = stage_from_string(j.at("stage").get<std::string>());
      get(j, "seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError(std::string("config JSON: ") + e.what());
    }
    return c;
  }
};

/// 64-bit FNV-1a, used as the checkpoint's config digest.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// --- data --------------------------------------------------------------------

/// One training sequence before quantization.
struct Example {
  GridSample sample;
  TaskMode mode = TaskMode::kCaption;
  bool masked = false;  // no supervised block at all
};

/// A sequence with its supervision plan. Block j is predicted from h_{j-1},
/// so supervised[0] is always 0.
struct SequencePlan {
  std::vector<Block> blocks;
  std::vector<std::uint8_t> supervised;
  std::vector<std::size_t> patch_of_block;  // npos for non-visual blocks

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
};

struct StepStats {
  double L_nbp = 0.0;
  double L_vq = 0.0;
  double L_total = 0.0;
  std::size_t supervised_blocks = 0;
  std::uint64_t step = 0;
};

struct SampleOptions {
  double temperature = 0.0;  // 0: argmax
  bool constrained = true;   // keep block and bracket structure valid
  std::size_t max_M = 0;     // 0: slots + 1
};

struct DecodedBlock {
  Block block;
  /// Log-probabilities of every step (the distribution actually used: masked
  /// and tempered when sampling).
  std::vector<std::vector<double>> log_probs;
  bool truncated = false;  // max_M reached before eob; eob was appended as the last token
};

struct GenerateOptions {
  std::size_t max_new_blocks = 64;
  SampleOptions sample;
  std::uint64_t seed = 0;
};

struct Generation {
  std::vector<Block> blocks;  // prompt followed by the continuation
  std::size_t prompt_blocks = 0;
  bool ended_with_eos = false;
  bool hit_limit = false;
};

// --- model -------------------------------------------------------------------

class ToyModel {
 public:
  explicit ToyModel(ToyConfig cfg) : cfg_(std::move(cfg)), task_(cfg_.task), data_rng_(cfg_.seed + 1) {
    cfg_.validate();
    init();
    set_stage(cfg_.stage);
  }

  const ToyConfig& config() const { return cfg_; }
  const GridTask& task() const { return task_; }
  const VocabLayout& layout() const { return layout_; }
  std::size_t slots() const { return slot_sizes_.size(); }
  std::size_t max_M() const { return cfg_.decoder.max_M ? cfg_.decoder.max_M : slots() + 1; }
  const std::vector<std::uint32_t>& slot_sizes() const { return slot_sizes_; }
  const std::vector<std::uint32_t>& slot_offsets() const { return slot_offsets_; }
  std::size_t d_model() const { return cfg_.backbone.d_model; }
  std::uint64_t step() const { return step_; }
  Params& params() { return params_; }
  const Params& params() const { return params_; }

  /// The codebook with the current SimVQ matrices (vq scheme only).
  Codebook codebook() const {
    require_vq("codebook");
    Codebook cb = cb_;
    for (std::size_t p = 0; p < cb.N; ++p) cb.W[p] = params_.at(w_name(p));
    return cb;
  }

  /// Frozen centers as stored; never touched by training.
  const std::vector<double>& frozen_centers() const { return cb_.centers; }

  static bool align_trainable(const std::string& name) {
    return name.rfind("dec.", 0) == 0 || name.rfind("lm_", 0) == 0 || name.rfind("head9.", 0) == 0;
  }

  /// Stage align trains only the block decoder, nine-head projections and LM
  /// head; stage full trains everything except fixed quantizer constants.
  void set_stage(Stage s) {
    cfg_.stage = s;
    for (auto& [name, p] : params_) {
      const bool trainable = !constants_.count(name) && (s == Stage::kFull || align_trainable(name));
      p.set_requires_grad(trainable);
    }
  }

  // --- quantization --------------------------------------------------------

  struct QuantGraph {
    std::vector<std::vector<std::uint32_t>> indices;  // per patch, per slot (slot-local)
    Var<double> loss;                                 // mean VQ loss over patches
    std::optional<Var<double>> fused;                 // patches x d (vq only)
  };

  /// Quantizes `count` patches (rows of Z, count x D) inside `g`.
  QuantGraph quantize_graph(Graph& g, std::span<const double> Z, std::size_t count) const {
    const std::size_t D = cfg_.task.D;
    QuantGraph out;
    out.indices.assign(count, {});
    out.loss = g.scalar(0.0);
    if (count == 0) return out;
    auto z = g.constant(ndiff::Shape{count, D}, std::vector<double>(Z.begin(), Z.end()));
    if (cfg_.scheme == Scheme::kVQ) {
      const std::size_t d = cb_.d;
      auto entries = effective_entries_graph(g);
      Var<double> total = g.scalar(0.0);
      std::optional<Var<double>> fused;
      for (std::size_t i = 0; i < cfg_.pq.N; ++i) {
        auto zs = ndiff::matmul(z, g.param(params_, p_name(i)));
        const auto pool = pool_of(cb_, i);
        auto zv = g.value(zs);
        auto ev = g.value(entries[pool]);
        std::vector<double> ent(ev.begin(), ev.end());
        std::vector<std::vector<std::uint32_t>> groups;
        for (std::size_t r = 0; r < count; ++r) {
          const auto hit = nearest_in(zv.subspan(r * d, d), ent, d);
          out.indices[r].push_back(hit.index);
          groups.push_back({hit.index});
        }
        auto zq = ndiff::gather_sum(entries[pool], std::move(groups));
        total = total + codebook_term(zs, zq);
        if (cfg_.pq.beta != 0.0) total = total + ndiff::scale(commitment_term(zs, zq), cfg_.pq.beta);
        auto ste = straight_through(zs, zq);
        fused = fused ? *fused + ste : ste;
      }
      if (cfg_.fusion == Fusion::kMean) fused = ndiff::scale(*fused, 1.0 / static_cast<double>(cfg_.pq.N));
      out.fused = fused;
      out.loss = ndiff::scale(total, 1.0 / static_cast<double>(cfg_.pq.N * count));
      return out;
    }
    if (cfg_.scheme == Scheme::kFSQ) {
      const FSQConfig fc{cfg_.fsq_levels};
      auto u = g.value(ndiff::matmul(z, g.param(params_, "fsq.P")));
      const std::size_t dims = fc.dims();
      double dist = 0.0;
      for (std::size_t r = 0; r < count; ++r) {
        const auto q = fsq_quantize(u.subspan(r * dims, dims), fc);
        out.indices[r] = {static_cast<std::uint32_t>(q.index)};
        for (std::size_t j = 0; j < dims; ++j) {
          const double diff = fsq_squash(u[r * dims + j], fc) - q.z_q[j];
          dist += diff * diff;
        }
      }
      out.loss = g.scalar((1.0 + cfg_.pq.beta) * dist / static_cast<double>(count));
      return out;
    }
    const auto rc = rq_config();
    double dist = 0.0;
    for (std::size_t r = 0; r < count; ++r) {
      const auto q = rq_quantize(Z.subspan(r * D, D), rc);
      out.indices[r] = q.indices;
      for (std::size_t l = 0; l < q.residuals.size(); ++l)
        dist += squared_distance(q.residuals[l], q.selected[l]);
    }
    out.loss = g.scalar((1.0 + cfg_.pq.beta) * dist /
                        static_cast<double>(count * rc.layers.size()));
    return out;
  }

  /// Forward-only quantization of a rows x cols grid of embeddings.
  QuantizedImage quantize(std::span<const double> embeddings, std::size_t rows, std::size_t cols) const {
    if (embeddings.size() != rows * cols * cfg_.task.D)
      throw UsageError("quantize: embeddings do not match the grid");
    Graph g(ndiff::GradMode::kNoGrad);
    auto q = quantize_graph(g, embeddings, rows * cols);
    QuantizedImage img{rows, cols, {}};
    for (auto& idx : q.indices) {
      QuantizedPatch p;
      p.indices = std::move(idx);
      img.patches.push_back(std::move(p));
    }
    img.validate();
    return img;
  }

  std::vector<Block> visual_blocks(const QuantizedImage& q) const {
    return make_visual_blocks(q, layout_, slot_offsets_, slot_sizes_);
  }

  /// Blocks of a sample in the given mode, with its supervision mask.
  SequencePlan plan(const GridSample& s, const QuantizedImage& q, TaskMode mode, bool masked = false) const {
    SequencePlan out;
    const auto vis = visual_blocks(q);
    const auto cap = make_text_blocks(s.caption, layout_);
    auto append = [&](const std::vector<Block>& bs, bool sup, bool visual_span) {
      std::size_t patch = 0;
      for (const auto& b : bs) {
        out.blocks.push_back(b);
        out.supervised.push_back(sup ? 1 : 0);
        if (visual_span && b.kind == BlockKind::kVisual)
          out.patch_of_block.push_back(patch++);
        else
          out.patch_of_block.push_back(SequencePlan::npos);
      }
    };
    const std::vector<Block> eos{text_block(layout_.eos(), layout_)};
    switch (mode) {
      case TaskMode::kCaption:
        append(vis, false, true);
        append(cap, true, false);
        break;
      case TaskMode::kGenerate:
        append(cap, false, false);
        append(vis, true, true);
        break;
      case TaskMode::kJoint:
        append(vis, true, true);
        append(cap, true, false);
        break;
    }
    append(eos, true, false);
    out.supervised[0] = 0;
    if (masked) std::fill(out.supervised.begin(), out.supervised.end(), 0);
    if (out.blocks.size() > cfg_.backbone.max_blocks)
      throw UsageError("sequence of " + std::to_string(out.blocks.size()) +
                       " blocks exceeds max_blocks=" + std::to_string(cfg_.backbone.max_blocks));
    return out;
  }

  // --- graph building blocks -----------------------------------------------

  /// Unified embedding table: text rows, visual rows, special rows.
  Var<double> table_graph(Graph& g) const {
    auto text = g.param(params_, "emb.text");
    auto spec = g.param(params_, "emb.special");
    Var<double> vis = visual_rows_graph(g);
    return ndiff::concat_rows<double>({text, vis, spec});
  }

  /// Plain copy of the unified table.
  Matrix table() const {
    Graph g(ndiff::GradMode::kNoGrad);
    auto t = table_graph(g);
    auto v = g.value(t);
    return Matrix(g.shape(t), std::vector<double>(v.begin(), v.end()));
  }

  /// Causal backbone over R stacked block embeddings (R x d_model) whose
  /// sequence boundaries are given by `lengths`.
  Var<double> backbone_graph(Graph& g, Var<double> E, const std::vector<std::size_t>& lengths) const {
    std::vector<std::vector<std::uint32_t>> pos;
    for (auto L : lengths) {
      if (L > cfg_.backbone.max_blocks)
        throw UsageError("backbone: " + std::to_string(L) + " blocks exceed max_blocks=" +
                         std::to_string(cfg_.backbone.max_blocks));
      for (std::size_t j = 0; j < L; ++j) pos.push_back({static_cast<std::uint32_t>(j)});
    }
    auto x = E + ndiff::gather_sum(g.param(params_, "bb.pos"), std::move(pos));
    const auto mask = causal_mask(lengths);
    for (std::size_t l = 0; l < cfg_.backbone.layers; ++l)
      x = transformer_layer(g, x, "bb." + std::to_string(l) + ".", cfg_.backbone.heads, mask);
    return ndiff::layer_norm_rows(x, g.param(params_, "bb.lnf.g"), g.param(params_, "bb.lnf.b"));
  }

  /// h_1..h_L for one sequence of block embeddings (plain values).
  std::vector<double> backbone_forward(const std::vector<std::vector<double>>& E) const {
    if (E.empty()) throw UsageError("backbone_forward: no blocks");
    std::vector<double> flat;
    for (const auto& e : E) {
      if (e.size() != d_model()) throw UsageError("backbone_forward: embedding width mismatch");
      flat.insert(flat.end(), e.begin(), e.end());
    }
    Graph g(ndiff::GradMode::kNoGrad);
    auto h = backbone_graph(g, g.constant(ndiff::Shape{E.size(), d_model()}, std::move(flat)), {E.size()});
    auto v = g.value(h);
    return {v.begin(), v.end()};
  }

  /// Logits (rows x V) of the block decoder for a batch of targets.
  /// `inputs[k]` lists, for target k, the tokens fed after the hidden state.
  Var<double> decoder_logits(Graph& g, Var<double> Hsel, Var<double> table,
                             const std::vector<std::vector<std::uint32_t>>& inputs) const {
    const std::size_t T = inputs.size();
    auto hin = ndiff::matmul(Hsel, g.param(params_, "dec.in"));
    auto stacked = ndiff::concat_rows<double>({hin, table});
    std::vector<std::vector<std::uint32_t>> groups, pos;
    std::vector<std::size_t> lengths;
    for (std::size_t k = 0; k < T; ++k) {
      if (inputs[k].size() + 1 > max_M())
        throw UsageError("decoder: block longer than max_M=" + std::to_string(max_M()));
      groups.push_back({static_cast<std::uint32_t>(k)});
      pos.push_back({0});
      for (std::size_t m = 0; m < inputs[k].size(); ++m) {
        groups.push_back({static_cast<std::uint32_t>(T + inputs[k][m])});
        pos.push_back({static_cast<std::uint32_t>(m + 1)});
      }
      lengths.push_back(inputs[k].size() + 1);
    }
    auto x = ndiff::gather_sum(stacked, std::move(groups)) +
             ndiff::gather_sum(g.param(params_, "dec.pos"), std::move(pos));
    const auto mask = causal_mask(lengths);
    for (std::size_t l = 0; l < cfg_.decoder.layers; ++l)
      x = transformer_layer(g, x, "dec." + std::to_string(l) + ".", cfg_.decoder.heads, mask);
    x = ndiff::layer_norm_rows(x, g.param(params_, "dec.lnf.g"), g.param(params_, "dec.lnf.b"));
    return lm_logits(g, x);
  }

  /// Logits of the nine-head baseline: head k for every target, stacked
  /// head-major ((slots+1)*T x V).
  Var<double> nine_head_logits(Graph& g, Var<double> Hsel) const {
    std::vector<Var<double>> parts;
    for (std::size_t k = 0; k <= slots(); ++k)
      parts.push_back(lm_logits(g, ndiff::matmul(Hsel, g.param(params_, head_name(k)))));
    return ndiff::concat_rows(parts);
  }

  // --- loss ----------------------------------------------------------------

  struct BatchGraph {
    Var<double> L_nbp, L_vq, L_total;
    std::size_t supervised_blocks = 0;
    std::vector<SequencePlan> plans;
  };

  /// Builds the whole batch loss L_total = L_nbp + L_VQ inside `g`. L_nbp is
  /// the summed token NLL per supervised block, averaged over blocks; L_VQ is
  /// the mean per-patch VQ loss over samples with any supervision.
  BatchGraph forward(Graph& g, std::span<const Example> batch) const {
    if (batch.empty()) throw UsageError("train_step: empty batch");
    const std::size_t D = cfg_.task.D, dm = d_model();
    BatchGraph out;

    // Quantize every patch of every sample in one pass.
    std::vector<double> Z;
    std::vector<std::size_t> patch_base;
    std::size_t n_patches = 0;
    for (const auto& ex : batch) {
      patch_base.push_back(n_patches);
      Z.insert(Z.end(), ex.sample.embeddings.begin(), ex.sample.embeddings.end());
      n_patches += ex.sample.rows * ex.sample.cols;
    }
    if (Z.size() != n_patches * D) throw UsageError("train_step: sample embeddings do not match D");
    auto qg = quantize_graph(g, Z, n_patches);

    std::vector<std::size_t> lengths;
    std::vector<std::vector<std::uint32_t>> groups, vis_groups;
    std::vector<double> scales;
    std::vector<std::size_t> vq_patches;  // patches counted in L_VQ
    for (std::size_t s = 0; s < batch.size(); ++s) {
      const auto& ex = batch[s];
      QuantizedImage img{ex.sample.rows, ex.sample.cols, {}};
      for (std::size_t p = 0; p < img.rows * img.cols; ++p) {
        QuantizedPatch qp;
        qp.indices = qg.indices[patch_base[s] + p];
        img.patches.push_back(std::move(qp));
      }
      auto pl = plan(ex.sample, img, ex.mode, ex.masked);
      bool any = false;
      for (std::size_t j = 0; j < pl.blocks.size(); ++j) {
        const auto& b = pl.blocks[j];
        any = any || pl.supervised[j];
        const bool via_fused = cfg_.ntp_through_quantizer && pl.patch_of_block[j] != SequencePlan::npos;
        if (via_fused) {
          groups.push_back({});
          vis_groups.push_back({static_cast<std::uint32_t>(patch_base[s] + pl.patch_of_block[j])});
        } else {
          groups.emplace_back(b.tokens.begin(), b.tokens.end() - 1);
          vis_groups.push_back({});
        }
        scales.push_back(block_scale(b));
      }
      if (any)
        for (std::size_t p = 0; p < img.rows * img.cols; ++p) vq_patches.push_back(patch_base[s] + p);
      lengths.push_back(pl.blocks.size());
      out.plans.push_back(std::move(pl));
    }

    auto table = table_graph(g);
    auto E = ndiff::gather_sum(table, std::move(groups), scales);
    if (cfg_.ntp_through_quantizer) {
      auto fused_up = ndiff::matmul(*qg.fused, g.param(params_, "up"));
      E = E + ndiff::gather_sum(fused_up, std::move(vis_groups));
    }
    auto H = backbone_graph(g, E, lengths);

    // Supervised targets.
    std::vector<std::vector<std::uint32_t>> hsel;
    std::vector<const Block*> targets;
    std::size_t row = 0;
    for (const auto& pl : out.plans) {
      for (std::size_t j = 1; j < pl.blocks.size(); ++j)
        if (pl.supervised[j]) {
          hsel.push_back({static_cast<std::uint32_t>(row + j - 1)});
          targets.push_back(&pl.blocks[j]);
        }
      row += pl.blocks.size();
    }
    out.supervised_blocks = targets.size();

    if (targets.empty()) {
      out.L_nbp = g.scalar(0.0);
    } else {
      auto Hsel = ndiff::gather_sum(H, std::move(hsel));
      Var<double> ce;
      if (cfg_.decoder_kind == DecoderKind::kBlock) {
        std::vector<std::vector<std::uint32_t>> inputs;
        std::vector<std::int32_t> tgt;
        for (const auto* b : targets) {
          inputs.emplace_back(b->tokens.begin(), b->tokens.end() - 1);
          for (auto t : b->tokens) tgt.push_back(static_cast<std::int32_t>(t));
        }
        auto logits = decoder_logits(g, Hsel, table, inputs);
        ce = ndiff::cross_entropy_rows(logits, std::move(tgt), std::vector<double>(g.shape(logits)[0], 1.0));
      } else {
        auto logits = nine_head_logits(g, Hsel);
        std::vector<std::int32_t> tgt;
        std::vector<double> w;
        for (std::size_t k = 0; k <= slots(); ++k)
          for (const auto* b : targets) {
            const auto [t, sup] = nine_head_target(*b, k);
            tgt.push_back(static_cast<std::int32_t>(t));
            w.push_back(sup ? 1.0 : 0.0);
          }
        ce = ndiff::cross_entropy_rows(logits, std::move(tgt), std::move(w));
      }
      out.L_nbp = ndiff::scale(ce, 1.0 / static_cast<double>(targets.size()));
    }
    (void)dm;

    if (vq_patches.empty()) {
      out.L_vq = g.scalar(0.0);
    } else if (vq_patches.size() == n_patches) {
      out.L_vq = qg.loss;
    } else {
      // Re-quantize only the supervised samples so masked ones contribute nothing.
      std::vector<double> Zs;
      for (auto p : vq_patches) Zs.insert(Zs.end(), Z.begin() + static_cast<std::ptrdiff_t>(p * D),
                                           Z.begin() + static_cast<std::ptrdiff_t>((p + 1) * D));
      out.L_vq = quantize_graph(g, Zs, vq_patches.size()).loss;
    }
    out.L_total = out.L_nbp + out.L_vq;
    return out;
  }

  /// The scalar training objective as a graph builder, for gradient checks.
  std::function<Var<double>(Graph&)> loss_fn(std::vector<Example> batch) const {
    return [this, batch = std::move(batch)](Graph& g) { return forward(g, batch).L_total; };
  }

  /// Loss values on a set of examples without updating anything. Large sets
  /// are processed in chunks of the training batch size; L_nbp is averaged
  /// over supervised blocks and L_VQ over supervised samples.
  StepStats evaluate(std::span<const Example> examples) const {
    if (examples.empty()) throw UsageError("evaluate: empty set");
    const std::size_t chunk = cfg_.optim.batch;
    double nbp_sum = 0.0, vq_sum = 0.0;
    std::size_t blocks = 0, vq_weight = 0;
    for (std::size_t b = 0; b < examples.size(); b += chunk) {
      const auto part = examples.subspan(b, std::min(chunk, examples.size() - b));
      Graph g(ndiff::GradMode::kNoGrad);
      auto bg = forward(g, part);
      std::size_t sup_samples = 0;
      for (const auto& pl : bg.plans)
        sup_samples += std::any_of(pl.supervised.begin(), pl.supervised.end(), [](auto s) { return s != 0; });
      nbp_sum += g.item(bg.L_nbp) * static_cast<double>(bg.supervised_blocks);
      vq_sum += g.item(bg.L_vq) * static_cast<double>(sup_samples);
      blocks += bg.supervised_blocks;
      vq_weight += sup_samples;
    }
    StepStats st;
    st.L_nbp = blocks ? nbp_sum / static_cast<double>(blocks) : 0.0;
    st.L_vq = vq_weight ? vq_sum / static_cast<double>(vq_weight) : 0.0;
    st.L_total = st.L_nbp + st.L_vq;
    st.supervised_blocks = blocks;
    st.step = step_;
    return st;
  }

  // --- training ------------------------------------------------------------

  std::vector<Example> sample_batch(Rng& rng, std::size_t n) const {
    std::vector<Example> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back({task_.sample(rng), cfg_.mode, false});
    return out;
  }

  /// Fixed evaluation set drawn from its own seed.
  std::vector<Example> eval_set(std::size_t n, std::uint64_t seed) const {
    Rng rng(seed);
    return sample_batch(rng, n);
  }

  /// One AdamW update on `batch`. A batch with no supervised block leaves
  /// every parameter and the optimizer state untouched.
  StepStats train_step(std::span<const Example> batch) {
    Graph g;
    BatchGraph bg;
    try {
      bg = forward(g, batch);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step_) + ": " + e.what());
    }
    StepStats st{g.item(bg.L_nbp), g.item(bg.L_vq), g.item(bg.L_total), bg.supervised_blocks, step_};
    if (!std::isfinite(st.L_total))
      throw NumericError("step " + std::to_string(step_) + ": non-finite loss (L_nbp=" +
                         std::to_string(st.L_nbp) + ", L_vq=" + std::to_string(st.L_vq) + ")");
    if (bg.supervised_blocks == 0) {
      ++step_;
      st.step = step_;
      return st;
    }
    g.backward(bg.L_total);
    std::map<std::string, std::vector<double>> grads;
    double sq = 0.0;
    for (auto& [name, p] : params_) {
      if (!p.requires_grad) continue;
      const auto* gr = g.param_grad(p);
      std::vector<double> v = gr ? *gr : std::vector<double>(p.size(), 0.0);
      for (double x : v) sq += x * x;
      grads.emplace(name, std::move(v));
    }
    if (!std::isfinite(sq)) throw NumericError("step " + std::to_string(step_) + ": non-finite gradient");
    double mult = 1.0;
    if (cfg_.optim.clip > 0.0 && std::sqrt(sq) > cfg_.optim.clip) mult = cfg_.optim.clip / std::sqrt(sq);
    adam_update(grads, mult);
    ++step_;
    st.step = step_;
    return st;
  }

  /// Draws a batch from the model's data stream and trains on it.
  StepStats train_step() {
    const auto batch = sample_batch(data_rng_, cfg_.optim.batch);
    return train_step(batch);
  }

  // --- decoding ------------------------------------------------------------

  /// Per-step log-probabilities of the block decoder for `target` given h
  /// (teacher forcing); one row per token of the target, eob included.
  std::vector<std::vector<double>> teacher_forced(std::span<const double> h, const Block& target) const {
    if (target.tokens.empty()) throw UsageError("teacher_forced: empty target");
    Graph g(ndiff::GradMode::kNoGrad);
    auto table = table_graph(g);
    auto H = g.constant(ndiff::Shape{1, d_model()}, std::vector<double>(h.begin(), h.end()));
    std::vector<std::vector<std::uint32_t>> inputs{{target.tokens.begin(), target.tokens.end() - 1}};
    auto logits = decoder_logits(g, H, table, inputs);
    return split_log_softmax(g, logits);
  }

  /// Autoregressive decoding of one block from h. `prefix_blocks` is the
  /// sequence so far; with constraints on it decides which tokens are legal.
  DecodedBlock decode_block(std::span<const double> h, const std::vector<Block>& prefix_blocks,
                            const SampleOptions& opt, Rng& rng) const {
    if (h.size() != d_model()) throw UsageError("decode_block: h has the wrong width");
    if (cfg_.decoder_kind == DecoderKind::kNineHead) return nine_head_decode(h, prefix_blocks, opt, rng);
    const std::size_t limit = opt.max_M ? std::min(opt.max_M, max_M()) : max_M();
    if (limit < 2) throw UsageError("decode_block: max_M must be at least 2");
    const bool inside = inside_visual(prefix_blocks);
    Graph g(ndiff::GradMode::kNoGrad);
    auto table = table_graph(g);
    auto tv = g.value(table);
    auto table_const = [&](Graph& gg) {
      return gg.constant(g.shape(table), std::vector<double>(tv.begin(), tv.end()));
    };
    DecodedBlock out;
    std::vector<std::uint32_t> prefix;
    while (true) {
      const auto allowed = opt.constrained ? allowed_tokens(prefix, inside, limit) : std::vector<std::uint8_t>{};
      const bool eob_forced = !allowed.empty() && allowed[layout_.eob()] &&
                              std::count(allowed.begin(), allowed.end(), std::uint8_t{1}) == 1;
      if (prefix.size() + 1 >= limit && !eob_forced) {
        out.truncated = true;
        prefix.push_back(layout_.eob());
        break;
      }
      Graph gg(ndiff::GradMode::kNoGrad);
      auto H = gg.constant(ndiff::Shape{1, d_model()}, std::vector<double>(h.begin(), h.end()));
      auto logits = decoder_logits(gg, H, table_const(gg), {prefix});
      const auto lv = gg.value(logits);
      const std::size_t V = layout_.total();
      std::vector<double> last(lv.end() - static_cast<std::ptrdiff_t>(V), lv.end());
      auto [tok, lp] = choose(last, allowed, opt.temperature, rng);
      out.log_probs.push_back(std::move(lp));
      prefix.push_back(tok);
      if (tok == layout_.eob()) break;
    }
    out.block.tokens = prefix;
    out.block.kind = layout_.is_visual(prefix.front()) ? BlockKind::kVisual : BlockKind::kText;
    return out;
  }

  /// Baseline: slots+1 independent heads read h in parallel. Head 0 picks a
  /// text token, or eob to announce a visual block whose tokens come from
  /// heads 1..slots.
  DecodedBlock nine_head_decode(std::span<const double> h, const std::vector<Block>& prefix_blocks,
                                const SampleOptions& opt, Rng& rng) const {
    const auto lps = nine_head_log_probs(h);
    const bool inside = inside_visual(prefix_blocks);
    DecodedBlock out;
    std::vector<std::uint8_t> allowed;
    if (opt.constrained) {
      allowed.assign(layout_.total(), 0);
      for (std::uint32_t t = 0; t < layout_.total(); ++t)
        allowed[t] = !layout_.is_visual(t) && first_token_ok(t, inside);
      if (inside) allowed[layout_.eob()] = 1;  // visual sentinel
    }
    auto [first, lp0] = choose(lps[0], allowed, opt.temperature, rng);
    out.log_probs.push_back(std::move(lp0));
    if (first != layout_.eob()) {
      out.block = text_block(first, layout_);
      return out;
    }
    out.block.kind = BlockKind::kVisual;
    for (std::size_t k = 1; k <= slots(); ++k) {
      std::vector<std::uint8_t> ok;
      if (opt.constrained) ok = slot_mask(k - 1);
      auto [t, lp] = choose(lps[k], ok, opt.temperature, rng);
      out.block.tokens.push_back(t);
      out.log_probs.push_back(std::move(lp));
    }
    out.block.tokens.push_back(layout_.eob());
    return out;
  }

  /// Log-probabilities of each of the slots+1 heads at h.
  std::vector<std::vector<double>> nine_head_log_probs(std::span<const double> h) const {
    if (cfg_.decoder_kind != DecoderKind::kNineHead)
      throw UsageError("nine_head_log_probs: model was built with the block decoder");
    Graph g(ndiff::GradMode::kNoGrad);
    auto H = g.constant(ndiff::Shape{1, d_model()}, std::vector<double>(h.begin(), h.end()));
    return split_log_softmax(g, nine_head_logits(g, H));
  }

  /// Plain block embeddings of a block list (table rows summed, eob excluded).
  std::vector<std::vector<double>> encode_blocks(const std::vector<Block>& blocks, const Matrix& table) const {
    std::vector<std::vector<double>> E;
    for (const auto& b : blocks) {
      auto e = block_encode(b, table);
      const double s = block_scale(b);
      if (s != 1.0)
        for (auto& v : e) v *= s;
      E.push_back(std::move(e));
    }
    return E;
  }

  /// Alternates the backbone and the block decoder until an eos block, the
  /// block limit, or max_blocks.
  Generation generate(std::vector<Block> prompt, const GenerateOptions& opt) const {
    Generation out;
    out.prompt_blocks = prompt.size();
    out.blocks = std::move(prompt);
    if (out.blocks.empty()) throw UsageError("generate: empty prompt");
    if (out.blocks.size() > cfg_.backbone.max_blocks) throw UsageError("generate: prompt exceeds max_blocks");
    if (is_eos(out.blocks.back())) {
      out.ended_with_eos = true;
      return out;
    }
    const auto table = this->table();
    Rng rng(opt.seed);
    for (std::size_t n = 0; n < opt.max_new_blocks; ++n) {
      if (out.blocks.size() >= cfg_.backbone.max_blocks) break;
      const auto H = backbone_forward(encode_blocks(out.blocks, table));
      std::span<const double> h(H.data() + H.size() - d_model(), d_model());
      auto dec = decode_block(h, out.blocks, opt.sample, rng);
      out.blocks.push_back(std::move(dec.block));
      if (is_eos(out.blocks.back())) {
        out.ended_with_eos = true;
        return out;
      }
    }
    out.hit_limit = true;
    return out;
  }

  /// Greedy caption for a sample: prompt with its visual span, decode until
  /// eos, keep the text tokens.
  std::vector<std::uint32_t> caption(const GridSample& s) const {
    const auto q = quantize(s.embeddings, s.rows, s.cols);
    GenerateOptions opt;
    opt.max_new_blocks = caption_length(s.rows, s.cols) + 4;
    const auto gen = generate(visual_blocks(q), opt);
    std::vector<std::uint32_t> out;
    for (std::size_t i = gen.prompt_blocks; i < gen.blocks.size(); ++i) {
      const auto& b = gen.blocks[i];
      if (is_eos(b)) break;
      out.push_back(b.tokens.front());
    }
    return out;
  }

  /// Fraction of `n` fresh samples whose greedy caption is exactly right.
  double caption_exact_match(std::size_t n, std::uint64_t seed) const {
    if (n == 0) return 0.0;
    Rng rng(seed);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = task_.sample(rng);
      if (caption(s) == s.caption) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(n);
  }

  // --- checkpoint ----------------------------------------------------------

  std::vector<std::uint8_t> save_checkpoint() const {
    const std::string cfg_json = cfg_.to_json().dump();
    io::Writer w;
    w.put_bytes(std::string_view(kMagic, 4));
    w.put(kVersion);
    w.put(fnv1a64(cfg_json));
    w.put_string(cfg_json);
    w.put(step_);
    w.put(adam_t_);
    w.put_string(data_rng_.state());
    w.put(static_cast<std::uint32_t>(params_.size()));
    for (const auto& [name, p] : params_) {
      w.put_string(name);
      w.put(static_cast<std::uint32_t>(p.shape.size()));
      for (auto s : p.shape) w.put(static_cast<std::uint64_t>(s));
      w.put_array(std::span<const double>(p.values));
      const auto& m = moment(m_, name, p.size());
      const auto& v = moment(v_, name, p.size());
      w.put_array(std::span<const double>(m));
      w.put_array(std::span<const double>(v));
    }
    std::vector<std::uint8_t> cb;
    if (cfg_.scheme == Scheme::kVQ) cb = encode_codebook(codebook());
    w.put(static_cast<std::uint64_t>(cb.size()));
    w.put_bytes(std::span<const std::uint8_t>(cb));
    w.seal();
    return w.take();
  }

  static ToyModel load_checkpoint(std::span<const std::uint8_t> bytes) {
    io::Reader r(bytes, "KLX1");
    if (bytes.size() < 4 || r.get_bytes(4) != std::string_view(kMagic, 4))
      throw BadMagicError("bad format: not a KLX1 checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kVersion) throw FormatError("KLX1: unsupported version " + std::to_string(version));
    const auto digest = r.get<std::uint64_t>();
    const auto cfg_json = r.get_string();
    if (fnv1a64(cfg_json) != digest) throw FormatError("KLX1: config digest mismatch");
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(cfg_json);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("KLX1: config JSON: ") + e.what());
    }
    ToyModel model(ToyConfig::from_json(j));
    model.step_ = r.get<std::uint64_t>();
    model.adam_t_ = r.get<std::uint64_t>();
    model.data_rng_.set_state(r.get_string());
    const auto count = r.get<std::uint32_t>();
    if (count != model.params_.size()) throw FormatError("KLX1: parameter count mismatch");
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto name = r.get_string();
      if (!model.params_.contains(name)) throw FormatError("KLX1: unknown parameter '" + name + "'");
      auto& p = model.params_.at(name);
      const auto rank = r.get<std::uint32_t>();
      ndiff::Shape shape;
      for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
      if (shape != p.shape) throw FormatError("KLX1: shape mismatch for '" + name + "'");
      p.values = r.get_array<double>(p.size());
      model.m_[name] = r.get_array<double>(p.size());
      model.v_[name] = r.get_array<double>(p.size());
    }
    const auto cb_len = r.get<std::uint64_t>();
    if (cb_len > r.remaining()) r.truncated();
    if (cb_len > 0) {
      const auto raw = r.get_bytes(cb_len);
      auto cb = decode_codebook(std::span(reinterpret_cast<const std::uint8_t*>(raw.data()), raw.size()));
      if (model.cfg_.scheme != Scheme::kVQ) throw FormatError("KLX1: codebook present for a non-vq model");
      model.cb_ = std::move(cb);
      for (std::size_t p = 0; p < model.cb_.N; ++p) {
        if (model.params_.at(model.w_name(p)).values != model.cb_.W[p].values)
          throw FormatError("KLX1: codebook W differs from parameter blob");
      }
    } else if (model.cfg_.scheme == Scheme::kVQ) {
      throw FormatError("KLX1: vq checkpoint without codebook");
    }
    r.verify_crc();
    model.set_stage(model.cfg_.stage);
    return model;
  }

  void save(const std::filesystem::path& path) const { io::write_file(path, save_checkpoint()); }
  static ToyModel load(const std::filesystem::path& path) { return load_checkpoint(io::read_file(path)); }

 private:
  static constexpr char kMagic[4] = {'K', 'L', 'X', '1'};
  static constexpr std::uint32_t kVersion = 1;

  static std::string p_name(std::size_t i) { return "vq.P." + std::to_string(i); }
  static std::string w_name(std::size_t p) { return "vq.W." + std::to_string(p); }
  static std::string head_name(std::size_t k) { return "head9." + std::to_string(k); }

  void require_vq(const char* what) const {
    if (cfg_.scheme != Scheme::kVQ) throw UsageError(std::string(what) + ": only the vq scheme has a codebook");
  }

  static const std::vector<double>& moment(const std::map<std::string, std::vector<double>>& mm,
                                           const std::string& name, std::size_t n) {
    static thread_local std::vector<double> zeros;
    auto it = mm.find(name);
    if (it != mm.end()) return it->second;
    zeros.assign(n, 0.0);
    return zeros;
  }

  // --- initialization ------------------------------------------------------

  void add_normal(const std::string& name, ndiff::Shape shape, double stddev, Rng& rng) {
    std::vector<double> v(ndiff::numel(shape));
    for (auto& x : v) x = stddev * rng.normal();
    params_.add(name, std::move(shape), std::move(v));
  }
  void add_fill(const std::string& name, ndiff::Shape shape, double value) {
    const auto n = ndiff::numel(shape);
    params_.add(name, std::move(shape), std::vector<double>(n, value));
  }
  void add_constant(const std::string& name, ndiff::Shape shape, std::vector<double> v) {
    params_.add(name, std::move(shape), std::move(v));
    constants_.insert(name);
  }

  void add_layer(const std::string& pre, std::size_t layers, Rng& rng) {
    const std::size_t dm = d_model(), hid = 2 * dm;
    const double s = 1.0 / std::sqrt(static_cast<double>(dm));
    const double so = s / std::sqrt(2.0 * static_cast<double>(layers));
    add_fill(pre + "ln1.g", {dm}, 1.0);
    add_fill(pre + "ln1.b", {dm}, 0.0);
    add_normal(pre + "wq", {dm, dm}, s, rng);
    add_normal(pre + "wk", {dm, dm}, s, rng);
    add_normal(pre + "wv", {dm, dm}, s, rng);
    add_normal(pre + "wo", {dm, dm}, so, rng);
    add_fill(pre + "ln2.g", {dm}, 1.0);
    add_fill(pre + "ln2.b", {dm}, 0.0);
    add_normal(pre + "w1", {dm, hid}, s, rng);
    add_fill(pre + "b1", {hid}, 0.0);
    add_normal(pre + "w2", {hid, dm}, 1.0 / std::sqrt(static_cast<double>(hid) * 2.0 * static_cast<double>(layers)), rng);
    add_fill(pre + "b2", {dm}, 0.0);
  }

  void init() {
    Rng rng(cfg_.seed);
    const std::size_t dm = d_model(), D = cfg_.task.D;
    const auto V_text = task_.vocab().size();
    std::size_t source_dim = 0;  // width of the visual rows before up-projection
    std::uint32_t S_vis = 0;

    if (cfg_.scheme == Scheme::kVQ) {
      const std::size_t N = cfg_.pq.N, d = cfg_.pq.d;
      SubspaceProjector proj = cfg_.projector_init == ProjectorInit::kIdentity
                                   ? SubspaceProjector::identity(D, d, N)
                                   : SubspaceProjector::orthonormal(D, d, N, cfg_.pq.seed);
      const auto corpus = task_.patch_corpus(cfg_.kmeans_points, cfg_.seed + 7);
      std::vector<double> pooled;
      for (std::size_t r = 0; r < corpus.count(); ++r)
        for (const auto& v : project_subspaces(corpus.row(r), proj)) pooled.insert(pooled.end(), v.begin(), v.end());
      const auto km = kmeans(pooled, d, cfg_.pq.S, cfg_.kmeans_iters, cfg_.pq.seed);
      cb_ = partition(km.centers, d, cfg_.shared_codebook ? 1 : N, cfg_.pq.seed);
      for (std::size_t i = 0; i < N; ++i) params_.add(p_name(i), proj.P[i]);
      for (std::size_t p = 0; p < cb_.N; ++p) params_.add(w_name(p), cb_.W[p]);
      for (std::size_t i = 0; i < N; ++i) {
        slot_sizes_.push_back(cb_.K());
        slot_offsets_.push_back(pool_offset(cb_, i));
      }
      source_dim = d;
      S_vis = cb_.S;
    } else if (cfg_.scheme == Scheme::kFSQ) {
      const FSQConfig fc{cfg_.fsq_levels};
      const auto proj = SubspaceProjector::orthonormal(D, fc.dims(), 1, cfg_.pq.seed);
      add_constant("fsq.P", {D, fc.dims()}, proj.P[0].values);
      add_constant("fsq.grid", {fc.index_space(), fc.dims()}, fsq_grid(fc));
      slot_sizes_ = {static_cast<std::uint32_t>(fc.index_space())};
      slot_offsets_ = {0};
      source_dim = fc.dims();
      S_vis = static_cast<std::uint32_t>(fc.index_space());
    } else {
      const std::size_t L = cfg_.rq_layers, K = cfg_.pq.S / L;
      const auto corpus = task_.patch_corpus(cfg_.kmeans_points, cfg_.seed + 7);
      std::vector<double> res = corpus.values;
      for (std::size_t l = 0; l < L; ++l) {
        auto km = kmeans(res, D, K, cfg_.kmeans_iters, cfg_.pq.seed + l);
        for (std::size_t r = 0; r < corpus.count(); ++r)
          for (std::size_t j = 0; j < D; ++j) res[r * D + j] -= km.centers[km.assignments[r] * D + j];
        add_constant("rq.layer." + std::to_string(l), {K, D}, std::move(km.centers));
        slot_sizes_.push_back(static_cast<std::uint32_t>(K));
        slot_offsets_.push_back(static_cast<std::uint32_t>(l * K));
      }
      source_dim = D;
      S_vis = static_cast<std::uint32_t>(L * K);
    }

    layout_ = VocabLayout{V_text, S_vis};
    const std::size_t V = layout_.total();

    add_normal("emb.text", {V_text, dm}, 1.0, rng);
    add_normal("emb.special", {VocabLayout::kSpecialCount, dm}, 1.0, rng);
    if (cfg_.visual_embedding == VisualEmbedding::kRandom)
      add_normal("emb.visual", {S_vis, dm}, 1.0, rng);
    else
      add_normal("up", {source_dim, dm}, 1.0 / std::sqrt(static_cast<double>(source_dim)), rng);

    add_normal("bb.pos", {cfg_.backbone.max_blocks, dm}, 0.1, rng);
    for (std::size_t l = 0; l < cfg_.backbone.layers; ++l)
      add_layer("bb." + std::to_string(l) + ".", cfg_.backbone.layers, rng);
    add_fill("bb.lnf.g", {dm}, 1.0);
    add_fill("bb.lnf.b", {dm}, 0.0);

    if (cfg_.decoder_kind == DecoderKind::kBlock) {
      add_normal("dec.in", {dm, dm}, 1.0 / std::sqrt(static_cast<double>(dm)), rng);
      add_normal("dec.pos", {max_M(), dm}, 0.1, rng);
      for (std::size_t l = 0; l < cfg_.decoder.layers; ++l)
        add_layer("dec." + std::to_string(l) + ".", cfg_.decoder.layers, rng);
      add_fill("dec.lnf.g", {dm}, 1.0);
      add_fill("dec.lnf.b", {dm}, 0.0);
    } else {
      for (std::size_t k = 0; k <= slots(); ++k)
        add_normal(head_name(k), {dm, dm}, 1.0 / std::sqrt(static_cast<double>(dm)), rng);
    }
    add_normal("lm_head", {dm, V}, 1.0 / std::sqrt(static_cast<double>(dm)), rng);
    add_fill("lm_bias", {V}, 0.0);
  }

  // --- graph helpers -------------------------------------------------------

  std::vector<Var<double>> effective_entries_graph(Graph& g) const {
    std::vector<Var<double>> out;
    for (std::size_t p = 0; p < cb_.N; ++p)
      out.push_back(effective_entries(g, cb_, p, g.param(params_, w_name(p))));
    return out;
  }

  RQConfig rq_config() const {
    RQConfig rc;
    for (std::size_t l = 0; l < cfg_.rq_layers; ++l) rc.layers.push_back(params_.at("rq.layer." + std::to_string(l)));
    return rc;
  }

  Var<double> visual_rows_graph(Graph& g) const {
    if (cfg_.visual_embedding == VisualEmbedding::kRandom) return g.param(params_, "emb.visual");
    Var<double> src;
    if (cfg_.scheme == Scheme::kVQ) {
      src = ndiff::concat_rows(effective_entries_graph(g));
    } else if (cfg_.scheme == Scheme::kFSQ) {
      src = g.param(params_, "fsq.grid");
    } else {
      std::vector<Var<double>> layers;
      for (std::size_t l = 0; l < cfg_.rq_layers; ++l) layers.push_back(g.param(params_, "rq.layer." + std::to_string(l)));
      src = ndiff::concat_rows(layers);
    }
    return ndiff::matmul(src, g.param(params_, "up"));
  }

  double block_scale(const Block& b) const {
    if (cfg_.fusion == Fusion::kMean && b.kind == BlockKind::kVisual && b.M() > 1)
      return 1.0 / static_cast<double>(b.M() - 1);
    return 1.0;
  }

  static Mask causal_mask(const std::vector<std::size_t>& lengths) {
    std::size_t R = 0;
    for (auto L : lengths) R += L;
    auto m = std::make_shared<std::vector<std::uint8_t>>(R * R, 0);
    std::size_t base = 0;
    for (auto L : lengths) {
      for (std::size_t r = 0; r < L; ++r)
        for (std::size_t c = 0; c <= r; ++c) (*m)[(base + r) * R + base + c] = 1;
      base += L;
    }
    return m;
  }

  Var<double> attention(Graph& g, Var<double> x, const std::string& pre, std::size_t heads, const Mask& mask) const {
    auto q = ndiff::matmul(x, g.param(params_, pre + "wq"));
    auto k = ndiff::matmul(x, g.param(params_, pre + "wk"));
    auto v = ndiff::matmul(x, g.param(params_, pre + "wv"));
    const std::size_t dh = d_model() / heads;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var<double>> outs;
    for (std::size_t h = 0; h < heads; ++h) {
      auto qh = ndiff::slice_cols(q, h * dh, dh);
      auto kh = ndiff::slice_cols(k, h * dh, dh);
      auto vh = ndiff::slice_cols(v, h * dh, dh);
      auto att = ndiff::softmax_rows(ndiff::scale(ndiff::matmul(qh, ndiff::transpose(kh)), inv), mask);
      outs.push_back(ndiff::matmul(att, vh));
    }
    auto o = heads == 1 ? outs[0] : ndiff::concat_cols(outs);
    return ndiff::matmul(o, g.param(params_, pre + "wo"));
  }

  Var<double> transformer_layer(Graph& g, Var<double> x, const std::string& pre, std::size_t heads,
                                const Mask& mask) const {
    auto a = ndiff::layer_norm_rows(x, g.param(params_, pre + "ln1.g"), g.param(params_, pre + "ln1.b"));
    x = x + attention(g, a, pre, heads, mask);
    auto m = ndiff::layer_norm_rows(x, g.param(params_, pre + "ln2.g"), g.param(params_, pre + "ln2.b"));
    auto hdn = ndiff::gelu(ndiff::add_rowwise(ndiff::matmul(m, g.param(params_, pre + "w1")), g.param(params_, pre + "b1")));
    return x + ndiff::add_rowwise(ndiff::matmul(hdn, g.param(params_, pre + "w2")), g.param(params_, pre + "b2"));
  }

  Var<double> lm_logits(Graph& g, Var<double> x) const {
    return ndiff::add_rowwise(ndiff::matmul(x, g.param(params_, "lm_head")), g.param(params_, "lm_bias"));
  }

  static std::vector<std::vector<double>> split_log_softmax(Graph& g, Var<double> logits) {
    const auto [m, n] = ndiff::dims2(g.shape(logits));
    const auto lp = ndiff::log_softmax_rows(g.value(logits), m, n);
    std::vector<std::vector<double>> out;
    for (std::size_t r = 0; r < m; ++r)
      out.emplace_back(lp.begin() + static_cast<std::ptrdiff_t>(r * n), lp.begin() + static_cast<std::ptrdiff_t>((r + 1) * n));
    return out;
  }

  /// Target of head k for a block and whether it is supervised.
  std::pair<std::uint32_t, bool> nine_head_target(const Block& b, std::size_t k) const {
    if (b.kind == BlockKind::kText) return {k == 0 ? b.tokens[0] : 0u, k == 0};
    if (k == 0) return {layout_.eob(), true};
    return {b.tokens[k - 1], true};
  }

  // --- decoding helpers ----------------------------------------------------

  bool is_eos(const Block& b) const { return b.kind == BlockKind::kText && b.tokens.front() == layout_.eos(); }

  bool inside_visual(const std::vector<Block>& blocks) const {
    bool open = false;
    for (const auto& b : blocks) {
      if (b.kind != BlockKind::kText) continue;
      if (b.tokens.front() == layout_.vis_start()) open = true;
      if (b.tokens.front() == layout_.vis_end()) open = false;
    }
    return open;
  }

  /// Legal first token of a text block given the bracket state.
  bool first_token_ok(std::uint32_t t, bool inside) const {
    if (t == layout_.eob()) return false;
    if (inside) return t != layout_.vis_start() && t != layout_.eos();
    return t != layout_.vis_end();
  }

  std::vector<std::uint8_t> slot_mask(std::size_t slot) const {
    std::vector<std::uint8_t> ok(layout_.total(), 0);
    const auto base = layout_.visual_offset() + slot_offsets_[slot];
    for (std::uint32_t k = 0; k < slot_sizes_[slot]; ++k) ok[base + k] = 1;
    return ok;
  }

  std::vector<std::uint8_t> allowed_tokens(const std::vector<std::uint32_t>& prefix, bool inside,
                                           std::size_t limit) const {
    const std::size_t V = layout_.total();
    std::vector<std::uint8_t> ok(V, 0);
    if (prefix.empty()) {
      for (std::uint32_t t = 0; t < V; ++t) ok[t] = !layout_.is_visual(t) && first_token_ok(t, inside);
      if (inside && limit >= slots() + 1) {
        const auto s0 = slot_mask(0);
        for (std::size_t t = 0; t < V; ++t) ok[t] = ok[t] || s0[t];
      }
      return ok;
    }
    if (!layout_.is_visual(prefix.front()) || prefix.size() >= slots()) {
      ok[layout_.eob()] = 1;
      return ok;
    }
    return slot_mask(prefix.size());
  }

  /// Picks a token from logits restricted to `allowed` (all when empty).
  /// Returns the token and the log-distribution it was drawn from.
  static std::pair<std::uint32_t, std::vector<double>> choose(const std::vector<double>& logits,
                                                              const std::vector<std::uint8_t>& allowed,
                                                              double temperature, Rng& rng) {
    const std::size_t V = logits.size();
    const double tau = temperature > 0.0 ? temperature : 1.0;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < V; ++t)
      if (allowed.empty() || allowed[t]) mx = std::max(mx, logits[t] / tau);
    if (!std::isfinite(mx)) throw NumericError("decode: no legal token");
    double z = 0.0;
    for (std::size_t t = 0; t < V; ++t)
      if (allowed.empty() || allowed[t]) z += std::exp(logits[t] / tau - mx);
    const double lz = mx + std::log(z);
    std::vector<double> lp(V, -std::numeric_limits<double>::infinity());
    std::uint32_t best = 0;
    bool have = false;
    for (std::size_t t = 0; t < V; ++t)
      if (allowed.empty() || allowed[t]) {
        lp[t] = logits[t] / tau - lz;
        if (!have || lp[t] > lp[best]) {
          best = static_cast<std::uint32_t>(t);
          have = true;
        }
      }
    if (temperature <= 0.0) return {best, std::move(lp)};
    double u = rng.uniform();
    std::uint32_t pick = best;
    for (std::size_t t = 0; t < V; ++t) {
      if (!(allowed.empty() || allowed[t])) continue;
      u -= std::exp(lp[t]);
      pick = static_cast<std::uint32_t>(t);
      if (u < 0.0) break;
    }
    return {pick, std::move(lp)};
  }

  // --- optimizer -----------------------------------------------------------

  void adam_update(const std::map<std::string, std::vector<double>>& grads, double mult) {
    ++adam_t_;
    const auto& o = cfg_.optim;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(adam_t_));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(adam_t_));
    for (const auto& [name, gvec] : grads) {
      auto& p = params_.at(name);
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) m.assign(p.size(), 0.0);
      if (v.empty()) v.assign(p.size(), 0.0);
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = gvec[i] * mult;
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * gi;
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * gi * gi;
        const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + o.eps);
        p.values[i] -= o.lr * (upd + o.weight_decay * p.values[i]);
      }
    }
  }

  ToyConfig cfg_;
  GridTask task_;
  Rng data_rng_;
  VocabLayout layout_;
  Codebook cb_;  // frozen centers and partition; W lives in params_
  std::vector<std::uint32_t> slot_sizes_, slot_offsets_;
  Params params_;
  std::set<std::string> constants_;
  std::map<std::string, std::vector<double>> m_, v_;
  std::uint64_t step_ = 0;
  std::uint64_t adam_t_ = 0;
};

}  // namespace kelixpq::toy
