#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seqpar/comm.hpp"
#include "seqpar/partition.hpp"
#include "seqpar/tensor.hpp"

namespace seqpar {

enum class Engine { oracle, ulysses, dummy_head, xtuner, ring, usp };
const char* engine_name(Engine e);
Engine engine_from_string(const std::string& s);
const std::vector<Engine>& parallel_engines();  // everything except oracle

struct AttentionConfig {
  int heads = 1;
  int kv_heads = 0;  // 0 = same as heads; otherwise heads % kv_heads == 0
  int head_dim = 1;
  bool causal = true;
  int ulysses_degree = 0;  // usp only: inner all-to-all degree
  int ring_degree = 0;     // usp only: outer ring degree
};

// Streaming-softmax state for one block of keys against the local queries.
// numerator is [bs, lq, heads, dim]; row_max/row_norm are [bs, lq, heads].
// A row that admitted no key has row_max == -inf and row_norm == 0.
struct AttnPiece {
  int64_t bs = 0, lq = 0, heads = 0, dim = 0;
  std::vector<double> numerator;
  std::vector<double> row_max;
  std::vector<double> row_norm;

  bool empty() const { return numerator.empty(); }
};

// q: [bs, lq, heads, dim], k/v: [bs, lk, heads, dim], flat row-major.
// Masking compares global positions: key j is admitted for query i when
// !causal or kpos[j] <= qpos[i]. Adds 4*dim flops per admitted pair.
AttnPiece attn_block_forward(int64_t bs, int64_t heads, int64_t dim,
                             std::span<const double> q, std::span<const int64_t> qpos,
                             std::span<const double> k, std::span<const double> v,
                             std::span<const int64_t> kpos, bool causal, double scale,
                             int64_t* flops = nullptr);

// Online-softmax merge of another block into acc. An empty acc adopts the
// piece unchanged, so a single-block run is bit-identical to the plain form.
void merge_piece(AttnPiece& acc, AttnPiece&& piece);

// out[row] = numerator[row] / row_norm[row], lse[row] = row_max + log(row_norm).
// Rows that admitted nothing produce zeros and lse = -inf.
void finalize_piece(const AttnPiece& acc, std::vector<double>& out, std::vector<double>& lse);

// Recomputes probabilities from the saved lse and accumulates dq/dk/dv
// (buffers sized like q/k/v; += semantics). Adds 10*dim flops per pair.
void attn_block_backward(int64_t bs, int64_t heads, int64_t dim,
                         std::span<const double> q, std::span<const int64_t> qpos,
                         std::span<const double> k, std::span<const double> v,
                         std::span<const int64_t> kpos, bool causal, double scale,
                         std::span<const double> out, std::span<const double> lse,
                         std::span<const double> dout, std::span<double> dq,
                         std::span<double> dk, std::span<double> dv,
                         int64_t* flops = nullptr);

// Single-block softmax attention over the full key set, scale 1/sqrt(dim).
// q/k/v: [bs, L, heads, dim] with k/v already expanded to q's head count.
// Differentiable (records one tape node). When ctx is given, forward and
// backward flops are charged to its rank.
Tensor oracle_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const int64_t> positions, bool causal,
                        RankCtx* ctx = nullptr);

// Ring attention over `group`: keys and values circulate (sp-1 fused k|v
// shifts forward, sp fused k|v|dk|dv shifts backward) while queries stay
// put. positions_by_index[i] gives the global positions group index i owns.
Tensor ring_attention(RankCtx& ctx, const CommGroup& group,
                      const std::vector<std::vector<int64_t>>& positions_by_index,
                      const Tensor& q, const Tensor& k, const Tensor& v, bool causal);

// Virtual-head factor: the smallest multiple of sp/gcd(heads, sp) that
// divides head_dim; the rank groups it induces must tile sp evenly.
int pick_xtuner_insp(int heads, int sp, int head_dim);

// Runs one attention engine on this rank's sequence shard. q is
// [bs, local_len, heads, dim], k/v are [bs, local_len, kv_heads, dim]; the
// result matches q's shape. The oracle engine only runs at sp == 1.
Tensor run_attention_engine(RankCtx& ctx, Engine engine, const AttentionConfig& cfg,
                            const ShardLayout& layout, const Tensor& q, const Tensor& k,
                            const Tensor& v);

}  // namespace seqpar
