#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>

#include "seqpar/comm.hpp"
#include "seqpar/tensor.hpp"

namespace seqpar {

// Per-position label log-probabilities: logits [T, V], labels length T.
// Positions labeled kIgnoreLabel yield 0 and receive no gradient.
Tensor sequence_logprob_per_position(const Tensor& logits, std::span<const int64_t> labels);

int64_t supervised_count(std::span<const int64_t> labels);

// How the scalar upstream gradient crosses ranks in backward. grad_aware
// all-reduces it (each rank's replicated loss consumed the sum); plain
// passes it through untouched, which silently scales gradients by 1/sp
// once the trainer averages them.
enum class ReduceMode { grad_aware, plain };
const char* reduce_mode_name(ReduceMode m);
ReduceMode reduce_mode_from_string(const std::string& s);

// Sums every element of per_pos into an exact accumulator, merges across
// the group, and rounds once. The result is bit-identical for any sharding
// of the same values. Counted as one 8-byte all-reduce.
Tensor logprob_sum_allreduce(RankCtx& ctx, const CommGroup& group, const Tensor& per_pos,
                             ReduceMode mode);

// Negative log-likelihood over the group's supervised positions:
//   default:        -sum(logp) / N_global
//   per_rank_mean:  mean over ranks of the per-rank means
// The default is bit-identical across shardings; the flag variant is a
// different (weighting) semantic kept for comparison runs.
Tensor sft_loss_sharded(RankCtx& ctx, const CommGroup& group, const Tensor& logits,
                        std::span<const int64_t> labels, ReduceMode mode,
                        bool per_rank_mean = false);

constexpr double kDpoBetaDefault = 0.1;

// softplus(-beta * margin) with margin built from exact global sums of the
// four per-position log-prob streams. Policy sums reduce grad-aware;
// reference streams are expected to carry no gradient. sums_out, when given,
// receives the four reduced sums in argument order.
Tensor dpo_loss_sharded(RankCtx& ctx, const CommGroup& group, const Tensor& policy_chosen,
                        const Tensor& policy_rejected, const Tensor& ref_chosen,
                        const Tensor& ref_rejected, double beta,
                        std::array<double, 4>* sums_out = nullptr);

// The order-of-operations mistake: per-rank local DPO losses averaged after
// the nonlinearity. Differs from dpo_loss_sharded whenever sp > 1.
Tensor wrong_order_dpo_loss(RankCtx& ctx, const CommGroup& group, const Tensor& policy_chosen,
                            const Tensor& policy_rejected, const Tensor& ref_chosen,
                            const Tensor& ref_rejected, double beta);

}  // namespace seqpar
