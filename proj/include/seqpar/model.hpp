#pragma once

#include <array>
#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "seqpar/attention.hpp"
#include "seqpar/comm.hpp"
#include "seqpar/losses.hpp"
#include "seqpar/partition.hpp"
#include "seqpar/tensor.hpp"

namespace seqpar {

struct ModelConfig {
  int64_t vocab = 64;
  int layers = 2;
  int64_t hidden = 48;  // must equal heads * head_dim
  int heads = 6;
  int kv_heads = 0;  // 0 = same as heads
  int head_dim = 8;
  int mlp_ratio = 2;
  double norm_eps = 1e-5;
  uint64_t seed = 1;

  int kv() const { return kv_heads > 0 ? kv_heads : heads; }
  int64_t mlp_hidden() const { return hidden * mlp_ratio; }
  void validate() const;
};

enum class Task { sft, dpo };
const char* task_name(Task t);
Task task_from_string(const std::string& s);

struct TrainerConfig {
  Task task = Task::sft;
  Engine engine = Engine::oracle;
  int sp = 1;
  SplitMode layout = SplitMode::naive;  // the ring engine needs zigzag
  int ulysses_degree = 0;               // usp engine only; must multiply to sp
  int ring_degree = 0;
  double lr = 0.1;
  int epochs = 8;
  int grad_accum = 8;
  double beta = kDpoBetaDefault;
  uint64_t seed = 1;
  ReduceMode reduce_mode = ReduceMode::grad_aware;
  bool per_rank_mean = false;
  SchedulerKind scheduler = SchedulerKind::threaded;
  int64_t cutoff_len = 512;
  bool pad_to_cutoff = false;
  int64_t pad_token = 0;

  void validate() const;
};

struct DataConfig {
  std::string path;  // nonempty: load the dataset from this JSONL file
  int samples = 30;  // synthesized records; a DPO pair is two records
  int64_t min_len = 20;
  int64_t max_len = 40;

  void validate() const;
};

// One JSON document with optional "model", "trainer" and "data" sections;
// unknown keys are config errors so typos do not silently fall back to
// defaults.
struct RunConfig {
  ModelConfig model;
  TrainerConfig trainer;
  DataConfig data;
};
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

// Loads data.path when set, otherwise synthesizes the task's dataset from
// the seed (memorization records for SFT, preference pairs for DPO).
std::vector<TrainBatch> build_dataset(const DataConfig& dc, Task task, int64_t vocab,
                                      uint64_t seed);

struct ForwardSpec {
  Engine engine = Engine::oracle;
  int ulysses_degree = 0;  // usp only
  int ring_degree = 0;
  // Feeds a local 0-based range to RoPE instead of the shard's global ids.
  // Deliberately wrong at sp > 1; exists for the position-id demo.
  bool local_position_ids = false;
};

// Pre-norm decoder stack: embedding, then per layer
//   RMSNorm -> attention(engine, RoPE on global ids) -> residual
//   RMSNorm -> gated silu MLP -> residual
// then a final RMSNorm and an untied LM head. Every rank holds a full
// replica; only the attention engine touches the fabric.
class Model {
 public:
  explicit Model(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  // order: embedding, per layer [attn_norm, wq, wk, wv, wo, mlp_norm,
  // w_gate, w_up, w_down], final_norm, lm_head
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& param_names() const { return names_; }
  int64_t param_count() const;

  // tokens are this shard's rows; position_ids must be the global ids from
  // make_position_ids. An empty span is allowed only at sp == 1 (the shard
  // ids are the identity there); at sp > 1 it is a hard config error.
  Tensor forward(RankCtx& ctx, const ShardLayout& layout, int shard_index,
                 std::span<const int64_t> tokens, std::span<const int64_t> position_ids,
                 const ForwardSpec& spec) const;

 private:
  const Tensor& embedding_table() const { return params_[0]; }
  const Tensor& layer_param(int layer, int slot) const;
  const Tensor& final_norm_w() const { return params_[params_.size() - 2]; }
  const Tensor& lm_head_w() const { return params_.back(); }

  ModelConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
};

struct StepReport {
  int step = 0;  // 1-based optimizer update index
  double loss = 0.0;
  double grad_norm = 0.0;
  double param_delta = 0.0;  // L2 norm of the applied update, 0 when lr == 0
};

struct TrainResult {
  std::vector<StepReport> steps;
  // dpo only: the four reduced log-prob sums (policy chosen, policy
  // rejected, ref chosen, ref rejected) for every pair forward, in order
  std::vector<std::array<double, 4>> dpo_sums;
  std::vector<double> first_sync_grads;     // synchronized grads of step 1
  std::vector<std::vector<double>> final_params;  // flat, registry order
};

// Replicated-model training over one SP group (world size = sp). SFT feeds
// one dataset record per forward; DPO consumes (chosen, rejected) pairs
// from consecutive records. Samples are padded per pad_length, sharded by
// the layout the engine needs, and gradients are accumulated grad_accum
// samples at a time (the tail of an epoch flushes early). Each flush
// all-reduces the flat gradient, divides by sp times the window size,
// reports loss and grad norm, and applies SGD; lr == 0 skips the update so
// parameters stay bitwise frozen. All ranks must agree bitwise on every
// report; divergence is a state error, as is a non-finite loss.
TrainResult run_training(const ModelConfig& mc, const TrainerConfig& tc,
                         const std::vector<TrainBatch>& dataset);

// step,loss,grad_norm with %.17g floats
void write_loss_curve_csv(std::ostream& os, const std::vector<StepReport>& steps);

// Random next-token sequences for memorization runs: lengths uniform in
// [min_len, max_len], the first quarter is unsupervised prompt, the last
// position has no target.
std::vector<TrainBatch> make_memorization_dataset(int n, int64_t min_len, int64_t max_len,
                                                  int64_t vocab, uint64_t seed);

// n_pairs (chosen, rejected) records, interleaved chosen-first, sharing a
// prompt quarter per pair.
std::vector<TrainBatch> make_preference_dataset(int n_pairs, int64_t min_len, int64_t max_len,
                                                int64_t vocab, uint64_t seed);

}  // namespace seqpar
