#include "seqpar/model.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <sstream>

#include "json.hpp"

namespace seqpar {

namespace {

constexpr double kInitStd = 0.02;

// layer slot offsets within the parameter registry
enum : int { kAttnNorm = 0, kWq, kWk, kWv, kWo, kMlpNorm, kWGate, kWUp, kWDown, kSlots };

}  // namespace

void ModelConfig::validate() const {
  if (vocab < 2) throw ConfigError("model: vocab must be at least 2");
  if (layers < 0) throw ConfigError("model: layers must be non-negative");
  if (heads < 1 || head_dim < 1) throw ConfigError("model: heads and head_dim must be positive");
  if (head_dim % 2 != 0) throw ConfigError("model: head_dim must be even for rotary pairs");
  if (hidden != static_cast<int64_t>(heads) * head_dim) {
    throw ConfigError("model: hidden " + std::to_string(hidden) + " != heads*head_dim " +
                      std::to_string(static_cast<int64_t>(heads) * head_dim));
  }
  if (kv_heads < 0 || heads % kv() != 0) {
    throw ConfigError("model: kv_heads must divide heads");
  }
  if (mlp_ratio < 1) throw ConfigError("model: mlp_ratio must be positive");
  if (!(norm_eps > 0.0) || !std::isfinite(norm_eps)) {
    throw ConfigError("model: norm_eps must be positive and finite");
  }
}

const char* task_name(Task t) { return t == Task::sft ? "sft" : "dpo"; }

Task task_from_string(const std::string& s) {
  if (s == "sft") return Task::sft;
  if (s == "dpo") return Task::dpo;
  throw ConfigError("unknown task '" + s + "' (expected sft or dpo)");
}

void TrainerConfig::validate() const {
  if (sp < 1) throw ConfigError("trainer: sp must be positive");
  if (engine == Engine::oracle && sp > 1) {
    throw ConfigError("trainer: the oracle engine runs only at sp == 1");
  }
  if (engine == Engine::ring && layout != SplitMode::zigzag) {
    throw ConfigError("trainer: the ring engine requires the zigzag layout");
  }
  if (engine == Engine::usp) {
    if (ulysses_degree < 1 || ring_degree < 1 || ulysses_degree * ring_degree != sp) {
      throw ConfigError("trainer: usp needs ulysses_degree * ring_degree == sp");
    }
  } else {
    if (ulysses_degree != 0 || ring_degree != 0) {
      throw ConfigError("trainer: ulysses_degree/ring_degree apply to the usp engine only");
    }
    if (layout == SplitMode::usp) {
      throw ConfigError("trainer: the usp layout belongs to the usp engine");
    }
  }
  if (epochs < 1) throw ConfigError("trainer: epochs must be positive");
  if (grad_accum < 1) throw ConfigError("trainer: grad_accum must be positive");
  if (!std::isfinite(lr) || lr < 0.0) throw ConfigError("trainer: lr must be finite and >= 0");
  if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("trainer: beta must be positive");
  if (cutoff_len < 1) throw ConfigError("trainer: cutoff_len must be positive");
  if (pad_token < 0) throw ConfigError("trainer: pad_token must be non-negative");
}

// ---- config JSON ----

namespace {

using nlohmann::json;

void require_known_keys(const json& obj, std::initializer_list<const char*> known,
                        const char* where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
  }
}

int64_t get_int(const json& obj, const char* key, int64_t fallback, const char* where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) {
    throw ConfigError(std::string(where) + "." + key + " must be an integer");
  }
  return v.get<int64_t>();
}

uint64_t get_seed(const json& obj, const char* key, uint64_t fallback, const char* where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0)) {
    throw ConfigError(std::string(where) + "." + key + " must be a non-negative integer");
  }
  return v.get<uint64_t>();
}

double get_double(const json& obj, const char* key, double fallback, const char* where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(std::string(where) + "." + key + " must be a number");
  return v.get<double>();
}

bool get_bool(const json& obj, const char* key, bool fallback, const char* where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_boolean()) throw ConfigError(std::string(where) + "." + key + " must be a boolean");
  return v.get<bool>();
}

std::string get_string(const json& obj, const char* key, const std::string& fallback,
                       const char* where) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(std::string(where) + "." + key + " must be a string");
  return v.get<std::string>();
}

int narrow_int(int64_t v, const char* what) {
  if (v < INT32_MIN || v > INT32_MAX) throw ConfigError(std::string(what) + " out of range");
  return static_cast<int>(v);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  require_known_keys(doc, {"model", "trainer", "data"}, "config");

  RunConfig rc;
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    if (!m.is_object()) throw ConfigError("config.model must be an object");
    require_known_keys(m,
                       {"vocab", "layers", "hidden", "heads", "kv_heads", "head_dim", "mlp_ratio",
                        "norm_eps", "seed"},
                       "model");
    ModelConfig& mc = rc.model;
    mc.vocab = get_int(m, "vocab", mc.vocab, "model");
    mc.layers = narrow_int(get_int(m, "layers", mc.layers, "model"), "model.layers");
    mc.hidden = get_int(m, "hidden", mc.hidden, "model");
    mc.heads = narrow_int(get_int(m, "heads", mc.heads, "model"), "model.heads");
    mc.kv_heads = narrow_int(get_int(m, "kv_heads", mc.kv_heads, "model"), "model.kv_heads");
    mc.head_dim = narrow_int(get_int(m, "head_dim", mc.head_dim, "model"), "model.head_dim");
    mc.mlp_ratio = narrow_int(get_int(m, "mlp_ratio", mc.mlp_ratio, "model"), "model.mlp_ratio");
    mc.norm_eps = get_double(m, "norm_eps", mc.norm_eps, "model");
    mc.seed = get_seed(m, "seed", mc.seed, "model");
  }
  if (doc.contains("trainer")) {
    const json& t = doc.at("trainer");
    if (!t.is_object()) throw ConfigError("config.trainer must be an object");
    require_known_keys(t,
                       {"task", "engine", "sp", "layout", "ulysses_degree", "ring_degree", "lr",
                        "epochs", "grad_accum", "beta", "seed", "reduce_mode", "per_rank_mean",
                        "scheduler", "cutoff_len", "pad_to_cutoff", "pad_token"},
                       "trainer");
    TrainerConfig& tc = rc.trainer;
    tc.task = task_from_string(get_string(t, "task", task_name(tc.task), "trainer"));
    tc.engine = engine_from_string(get_string(t, "engine", engine_name(tc.engine), "trainer"));
    tc.sp = narrow_int(get_int(t, "sp", tc.sp, "trainer"), "trainer.sp");
    tc.layout = split_mode_from_string(get_string(t, "layout", split_mode_name(tc.layout), "trainer"));
    tc.ulysses_degree =
        narrow_int(get_int(t, "ulysses_degree", tc.ulysses_degree, "trainer"), "trainer.ulysses_degree");
    tc.ring_degree =
        narrow_int(get_int(t, "ring_degree", tc.ring_degree, "trainer"), "trainer.ring_degree");
    tc.lr = get_double(t, "lr", tc.lr, "trainer");
    tc.epochs = narrow_int(get_int(t, "epochs", tc.epochs, "trainer"), "trainer.epochs");
    tc.grad_accum = narrow_int(get_int(t, "grad_accum", tc.grad_accum, "trainer"), "trainer.grad_accum");
    tc.beta = get_double(t, "beta", tc.beta, "trainer");
    tc.seed = get_seed(t, "seed", tc.seed, "trainer");
    tc.reduce_mode =
        reduce_mode_from_string(get_string(t, "reduce_mode", reduce_mode_name(tc.reduce_mode), "trainer"));
    tc.per_rank_mean = get_bool(t, "per_rank_mean", tc.per_rank_mean, "trainer");
    tc.scheduler =
        scheduler_from_string(get_string(t, "scheduler", scheduler_name(tc.scheduler), "trainer"));
    tc.cutoff_len = get_int(t, "cutoff_len", tc.cutoff_len, "trainer");
    tc.pad_to_cutoff = get_bool(t, "pad_to_cutoff", tc.pad_to_cutoff, "trainer");
    tc.pad_token = get_int(t, "pad_token", tc.pad_token, "trainer");
  }
  if (doc.contains("data")) {
    const json& d = doc.at("data");
    if (!d.is_object()) throw ConfigError("config.data must be an object");
    require_known_keys(d, {"path", "samples", "min_len", "max_len"}, "data");
    DataConfig& dc = rc.data;
    dc.path = get_string(d, "path", dc.path, "data");
    dc.samples = narrow_int(get_int(d, "samples", dc.samples, "data"), "data.samples");
    dc.min_len = get_int(d, "min_len", dc.min_len, "data");
    dc.max_len = get_int(d, "max_len", dc.max_len, "data");
  }
  rc.model.validate();
  rc.trainer.validate();
  rc.data.validate();
  return rc;
}

void DataConfig::validate() const {
  if (samples < 1) throw ConfigError("data.samples must be positive");
  if (min_len < 2) throw ConfigError("data.min_len must be at least 2");
  if (max_len < min_len) throw ConfigError("data.max_len must be >= data.min_len");
}

std::vector<TrainBatch> build_dataset(const DataConfig& dc, Task task, int64_t vocab,
                                      uint64_t seed) {
  dc.validate();
  if (!dc.path.empty()) return load_batches_jsonl(dc.path);
  if (task == Task::dpo) {
    if (dc.samples % 2 != 0) throw ConfigError("data.samples must be even for dpo");
    return make_preference_dataset(dc.samples / 2, dc.min_len, dc.max_len, vocab, seed);
  }
  return make_memorization_dataset(dc.samples, dc.min_len, dc.max_len, vocab, seed);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

// ---- model ----

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  auto weight = [&](Shape shape) {
    Tensor t(std::move(shape));
    for (double& v : t.raw_data()) v = rng.normal(kInitStd);
    t.set_requires_grad(true);
    return t;
  };
  auto ones = [&](int64_t n) {
    Tensor t({n}, 1.0);
    t.set_requires_grad(true);
    return t;
  };
  auto push = [&](std::string name, Tensor t) {
    names_.push_back(std::move(name));
    params_.push_back(std::move(t));
  };

  const int64_t H = cfg_.hidden;
  const int64_t qd = static_cast<int64_t>(cfg_.heads) * cfg_.head_dim;
  const int64_t kvd = static_cast<int64_t>(cfg_.kv()) * cfg_.head_dim;
  const int64_t M = cfg_.mlp_hidden();

  push("embedding", weight({cfg_.vocab, H}));
  for (int l = 0; l < cfg_.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    push(p + "attn_norm", ones(H));
    push(p + "wq", weight({H, qd}));
    push(p + "wk", weight({H, kvd}));
    push(p + "wv", weight({H, kvd}));
    push(p + "wo", weight({qd, H}));
    push(p + "mlp_norm", ones(H));
    push(p + "w_gate", weight({H, M}));
    push(p + "w_up", weight({H, M}));
    push(p + "w_down", weight({M, H}));
  }
  push("final_norm", ones(H));
  push("lm_head", weight({H, cfg_.vocab}));
}

const Tensor& Model::layer_param(int layer, int slot) const {
  return params_[1 + static_cast<size_t>(layer) * kSlots + static_cast<size_t>(slot)];
}

int64_t Model::param_count() const {
  int64_t n = 0;
  for (const Tensor& p : params_) n += p.numel();
  return n;
}

Tensor Model::forward(RankCtx& ctx, const ShardLayout& layout, int shard_index,
                      std::span<const int64_t> tokens, std::span<const int64_t> position_ids,
                      const ForwardSpec& spec) const {
  const auto& owned = layout.positions_of(shard_index);
  const int64_t T = static_cast<int64_t>(tokens.size());
  if (T != static_cast<int64_t>(owned.size())) {
    throw ShapeError("model forward: " + std::to_string(tokens.size()) +
                     " tokens for a shard of " + std::to_string(owned.size()));
  }

  std::vector<int64_t> ids;
  if (spec.local_position_ids) {
    ids.resize(static_cast<size_t>(T));
    std::iota(ids.begin(), ids.end(), 0);
  } else if (position_ids.empty()) {
    if (layout.sp > 1) {
      throw ConfigError(
          "model forward: position ids are required when sp > 1; "
          "a local 0-based range corrupts the rotary phases");
    }
    ids.assign(owned.begin(), owned.end());
  } else {
    if (static_cast<int64_t>(position_ids.size()) != T) {
      throw ShapeError("model forward: position ids length " +
                       std::to_string(position_ids.size()) + " for " + std::to_string(T) +
                       " tokens");
    }
    ids.assign(position_ids.begin(), position_ids.end());
  }

  const int64_t heads = cfg_.heads;
  const int64_t kv = cfg_.kv();
  const int64_t dim = cfg_.head_dim;
  const AttentionConfig acfg{.heads = cfg_.heads,
                             .kv_heads = cfg_.kv_heads,
                             .head_dim = cfg_.head_dim,
                             .causal = true,
                             .ulysses_degree = spec.ulysses_degree,
                             .ring_degree = spec.ring_degree};

  Tensor x = embedding(embedding_table(), tokens);
  for (int l = 0; l < cfg_.layers; ++l) {
    Tensor h = rms_norm(x, layer_param(l, kAttnNorm), cfg_.norm_eps);
    Tensor q = rope_apply(reshape(matmul(h, layer_param(l, kWq)), {1, T, heads, dim}), ids);
    Tensor k = rope_apply(reshape(matmul(h, layer_param(l, kWk)), {1, T, kv, dim}), ids);
    Tensor v = reshape(matmul(h, layer_param(l, kWv)), {1, T, kv, dim});
    Tensor a = run_attention_engine(ctx, spec.engine, acfg, layout, q, k, v);
    x = add(x, matmul(reshape(a, {T, heads * dim}), layer_param(l, kWo)));
    Tensor m = rms_norm(x, layer_param(l, kMlpNorm), cfg_.norm_eps);
    Tensor gated = mul(silu(matmul(m, layer_param(l, kWGate))), matmul(m, layer_param(l, kWUp)));
    x = add(x, matmul(gated, layer_param(l, kWDown)));
  }
  return matmul(rms_norm(x, final_norm_w(), cfg_.norm_eps), lm_head_w());
}

// ---- training ----

namespace {

ShardLayout layout_for(const TrainerConfig& tc, int64_t len) {
  if (tc.engine == Engine::usp) {
    return ShardLayout::make_usp(len, tc.ulysses_degree, tc.ring_degree);
  }
  if (tc.layout == SplitMode::zigzag) return ShardLayout::make_zigzag(len, tc.sp);
  return ShardLayout::make_naive(len, tc.sp);
}

uint64_t bits_of(double v) { return std::bit_cast<uint64_t>(v); }

}  // namespace

TrainResult run_training(const ModelConfig& mc, const TrainerConfig& tc,
                         const std::vector<TrainBatch>& dataset) {
  mc.validate();
  tc.validate();
  if (dataset.empty()) throw ConfigError("run_training: empty dataset");
  const int unit = tc.task == Task::dpo ? 2 : 1;
  if (dataset.size() % static_cast<size_t>(unit) != 0) {
    throw ConfigError("run_training: dpo needs (chosen, rejected) record pairs, got an odd count");
  }
  if (tc.pad_token >= mc.vocab) throw ConfigError("run_training: pad token outside vocab");
  for (const TrainBatch& b : dataset) b.validate();
  const int n_units = static_cast<int>(dataset.size()) / unit;

  const ForwardSpec spec{.engine = tc.engine,
                         .ulysses_degree = tc.ulysses_degree,
                         .ring_degree = tc.ring_degree};
  CommFabric fabric(tc.sp, tc.sp, tc.scheduler);
  std::vector<TrainResult> by_rank(static_cast<size_t>(tc.sp));

  fabric.run([&](RankCtx& ctx) {
    const CommGroup& group = ctx.sp_group;
    const int my = group.index_of(ctx.rank);
    TrainResult& res = by_rank[static_cast<size_t>(my)];
    Model model(mc);
    std::optional<Model> ref;
    if (tc.task == Task::dpo) ref.emplace(mc);

    auto shard_of = [&](const TrainBatch& raw, TrainBatch& local, ShardLayout& layout) {
      TrainBatch padded = pad_batch(raw, tc.sp, tc.pad_token, tc.cutoff_len, tc.pad_to_cutoff);
      layout = layout_for(tc, padded.len());
      local.tokens = shard(padded.tokens, layout, my);
      local.labels = shard(padded.labels, layout, my);
      local.position_ids = make_position_ids(layout, my);
    };

    int step = 0;
    double loss_accum = 0.0;
    int window = 0;

    auto flush = [&] {
      std::vector<double> flat;
      flat.reserve(static_cast<size_t>(model.param_count()));
      for (const Tensor& p : model.params()) {
        if (p.has_grad()) {
          flat.insert(flat.end(), p.grad().begin(), p.grad().end());
        } else {
          flat.insert(flat.end(), static_cast<size_t>(p.numel()), 0.0);
        }
      }
      std::vector<double> synced = all_reduce_values(ctx, group, flat);
      const double denom = static_cast<double>(tc.sp) * static_cast<double>(window);
      for (double& v : synced) v /= denom;
      double sq = 0.0;
      for (double v : synced) sq += v * v;
      const double gnorm = std::sqrt(sq);

      double delta = 0.0;
      if (tc.lr != 0.0) {  // lr 0 must leave parameters bitwise untouched
        size_t off = 0;
        double dsq = 0.0;
        for (Tensor& p : model.params()) {
          for (double& v : p.raw_data()) {
            const double upd = tc.lr * synced[off++];
            v -= upd;
            dsq += upd * upd;
          }
        }
        delta = std::sqrt(dsq);
      }
      for (Tensor& p : model.params()) p.zero_grad();

      ++step;
      const double mean_loss = loss_accum / static_cast<double>(window);
      if (res.first_sync_grads.empty()) res.first_sync_grads = std::move(synced);
      res.steps.push_back({step, mean_loss, gnorm, delta});
      loss_accum = 0.0;
      window = 0;
    };

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
      for (int u = 0; u < n_units; ++u) {
        Tape tape;
        TapeScope scope(&tape);
        double sample_loss = 0.0;
        if (tc.task == Task::sft) {
          TrainBatch local;
          ShardLayout layout;
          shard_of(dataset[static_cast<size_t>(u)], local, layout);
          Tensor logits = model.forward(ctx, layout, my, local.tokens, local.position_ids, spec);
          Tensor loss =
              sft_loss_sharded(ctx, group, logits, local.labels, tc.reduce_mode, tc.per_rank_mean);
          sample_loss = loss.scalar_value();
          backward(loss);
        } else {
          TrainBatch cho, rej;
          ShardLayout lay_c, lay_r;
          shard_of(dataset[static_cast<size_t>(2 * u)], cho, lay_c);
          shard_of(dataset[static_cast<size_t>(2 * u + 1)], rej, lay_r);
          Tensor logits_c = model.forward(ctx, lay_c, my, cho.tokens, cho.position_ids, spec);
          Tensor logits_r = model.forward(ctx, lay_r, my, rej.tokens, rej.position_ids, spec);
          Tensor pc = sequence_logprob_per_position(logits_c, cho.labels);
          Tensor pr = sequence_logprob_per_position(logits_r, rej.labels);
          Tensor rc, rr;
          {
            NoGradScope ng;  // frozen reference replica
            Tensor ref_c = ref->forward(ctx, lay_c, my, cho.tokens, cho.position_ids, spec);
            Tensor ref_r = ref->forward(ctx, lay_r, my, rej.tokens, rej.position_ids, spec);
            rc = sequence_logprob_per_position(ref_c, cho.labels);
            rr = sequence_logprob_per_position(ref_r, rej.labels);
          }
          std::array<double, 4> sums{};
          Tensor loss = dpo_loss_sharded(ctx, group, pc, pr, rc, rr, tc.beta, &sums);
          res.dpo_sums.push_back(sums);
          sample_loss = loss.scalar_value();
          backward(loss);
        }
        if (!std::isfinite(sample_loss)) {
          throw StateError("run_training: non-finite loss at step " + std::to_string(step + 1));
        }
        loss_accum += sample_loss;
        ++window;
        if (window == tc.grad_accum || u == n_units - 1) flush();
      }
    }

    res.final_params.reserve(model.params().size());
    for (const Tensor& p : model.params()) {
      res.final_params.emplace_back(p.values().begin(), p.values().end());
    }
  });

  // replicas interact only through collectives; any bitwise disagreement in
  // their reports means the lockstep broke
  for (int r = 1; r < tc.sp; ++r) {
    const TrainResult& a = by_rank[0];
    const TrainResult& b = by_rank[static_cast<size_t>(r)];
    bool same = a.steps.size() == b.steps.size() && a.dpo_sums.size() == b.dpo_sums.size();
    for (size_t i = 0; same && i < a.steps.size(); ++i) {
      same = bits_of(a.steps[i].loss) == bits_of(b.steps[i].loss) &&
             bits_of(a.steps[i].grad_norm) == bits_of(b.steps[i].grad_norm) &&
             bits_of(a.steps[i].param_delta) == bits_of(b.steps[i].param_delta);
    }
    for (size_t i = 0; same && i < a.dpo_sums.size(); ++i) {
      for (int j = 0; j < 4; ++j) {
        same = same && bits_of(a.dpo_sums[i][j]) == bits_of(b.dpo_sums[i][j]);
      }
    }
    if (!same) {
      throw StateError("run_training: rank " + std::to_string(r) + " diverged from rank 0");
    }
  }
  return std::move(by_rank[0]);
}

void write_loss_curve_csv(std::ostream& os, const std::vector<StepReport>& steps) {
  os << "step,loss,grad_norm\n";
  char buf[64];
  for (const StepReport& s : steps) {
    os << s.step;
    std::snprintf(buf, sizeof buf, "%.17g", s.loss);
    os << ',' << buf;
    std::snprintf(buf, sizeof buf, "%.17g", s.grad_norm);
    os << ',' << buf << '\n';
  }
}

// ---- toy datasets ----

std::vector<TrainBatch> make_memorization_dataset(int n, int64_t min_len, int64_t max_len,
                                                  int64_t vocab, uint64_t seed) {
  if (n < 1 || min_len < 4 || max_len < min_len || vocab < 2) {
    throw ConfigError("make_memorization_dataset: bad arguments");
  }
  Rng rng(seed);
  std::vector<TrainBatch> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const int64_t len = rng.uniform_int(min_len, max_len);
    TrainBatch b;
    b.tokens.resize(static_cast<size_t>(len));
    for (int64_t& t : b.tokens) t = rng.uniform_int(0, vocab - 1);
    b.labels.assign(static_cast<size_t>(len), kIgnoreLabel);
    for (int64_t t = len / 4; t + 1 < len; ++t) {  // first quarter is prompt
      b.labels[static_cast<size_t>(t)] = b.tokens[static_cast<size_t>(t + 1)];
    }
    b.position_ids.resize(static_cast<size_t>(len));
    std::iota(b.position_ids.begin(), b.position_ids.end(), 0);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<TrainBatch> make_preference_dataset(int n_pairs, int64_t min_len, int64_t max_len,
                                                int64_t vocab, uint64_t seed) {
  if (n_pairs < 1 || min_len < 4 || max_len < min_len || vocab < 2) {
    throw ConfigError("make_preference_dataset: bad arguments");
  }
  Rng rng(seed);
  std::vector<TrainBatch> out;
  out.reserve(static_cast<size_t>(2 * n_pairs));
  for (int i = 0; i < n_pairs; ++i) {
    const int64_t len = rng.uniform_int(min_len, max_len);
    const int64_t prompt = len / 4;
    std::vector<int64_t> shared(static_cast<size_t>(prompt));
    for (int64_t& t : shared) t = rng.uniform_int(0, vocab - 1);
    for (int side = 0; side < 2; ++side) {
      TrainBatch b;
      b.tokens = shared;
      b.tokens.resize(static_cast<size_t>(len));
      for (int64_t t = prompt; t < len; ++t) {
        b.tokens[static_cast<size_t>(t)] = rng.uniform_int(0, vocab - 1);
      }
      b.labels.assign(static_cast<size_t>(len), kIgnoreLabel);
      for (int64_t t = prompt; t + 1 < len; ++t) {
        b.labels[static_cast<size_t>(t)] = b.tokens[static_cast<size_t>(t + 1)];
      }
      b.position_ids.resize(static_cast<size_t>(len));
      std::iota(b.position_ids.begin(), b.position_ids.end(), 0);
      out.push_back(std::move(b));
    }
  }
  return out;
}

}  // namespace seqpar
