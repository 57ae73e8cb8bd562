#include "seqpar/losses.hpp"

#include <algorithm>
#include <cmath>

#include "seqpar/exact_sum.hpp"
#include "seqpar/partition.hpp"

namespace seqpar {

const char* reduce_mode_name(ReduceMode m) {
  return m == ReduceMode::grad_aware ? "grad_aware" : "plain";
}

ReduceMode reduce_mode_from_string(const std::string& s) {
  if (s == "grad_aware") return ReduceMode::grad_aware;
  if (s == "plain") return ReduceMode::plain;
  throw ConfigError("unknown reduce mode '" + s + "'");
}

Tensor sequence_logprob_per_position(const Tensor& logits, std::span<const int64_t> labels) {
  if (!logits.defined() || logits.shape().size() != 2) {
    throw ShapeError("sequence_logprob: logits must be [T, V]");
  }
  const int64_t T = logits.extent(0);
  const int64_t V = logits.extent(1);
  if (static_cast<int64_t>(labels.size()) != T) {
    throw ShapeError("sequence_logprob: labels length " + std::to_string(labels.size()) +
                     " does not match T " + std::to_string(T));
  }
  std::vector<double> out(static_cast<size_t>(T), 0.0);
  std::vector<double> lse(static_cast<size_t>(T), 0.0);
  for (int64_t t = 0; t < T; ++t) {
    const int64_t lab = labels[static_cast<size_t>(t)];
    if (lab == kIgnoreLabel) continue;
    if (lab < 0 || lab >= V) {
      throw ConfigError("sequence_logprob: label " + std::to_string(lab) +
                        " outside vocab of " + std::to_string(V));
    }
    const double* row = logits.values().data() + t * V;
    double m = row[0];
    for (int64_t j = 1; j < V; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < V; ++j) z += std::exp(row[j] - m);
    lse[static_cast<size_t>(t)] = m + std::log(z);
    out[static_cast<size_t>(t)] = row[lab] - lse[static_cast<size_t>(t)];
  }

  Tape* tape = Tape::active();
  bool track = tape && logits.requires_grad();
  Tensor y = Tensor::from({T}, std::move(out), track);
  if (track) {
    std::vector<int64_t> labs(labels.begin(), labels.end());
    tape->record([li = logits.impl(), yi = y.impl(), labs = std::move(labs),
                  lse = std::move(lse), T, V] {
      if (yi->grad.empty()) return;
      li->ensure_grad();
      for (int64_t t = 0; t < T; ++t) {
        const int64_t lab = labs[static_cast<size_t>(t)];
        if (lab == kIgnoreLabel) continue;
        const double g = yi->grad[static_cast<size_t>(t)];
        if (g == 0.0) continue;
        const double* row = li->data.data() + t * V;
        double* grow = li->grad.data() + t * V;
        for (int64_t j = 0; j < V; ++j) {
          grow[j] -= g * std::exp(row[j] - lse[static_cast<size_t>(t)]);
        }
        grow[lab] += g;
      }
    });
  }
  return y;
}

int64_t supervised_count(std::span<const int64_t> labels) {
  return static_cast<int64_t>(
      std::count_if(labels.begin(), labels.end(), [](int64_t l) { return l != kIgnoreLabel; }));
}

Tensor logprob_sum_allreduce(RankCtx& ctx, const CommGroup& group, const Tensor& per_pos,
                             ReduceMode mode) {
  ExactSum local;
  for (double v : per_pos.values()) local.add(v);
  ExactSum global = exact_sum_all_reduce(ctx, group, local);
  const double total = global.round_to_double();

  Tape* tape = Tape::active();
  bool track = tape && per_pos.requires_grad();
  Tensor y = Tensor::scalar(total, track);
  if (track) {
    tape->record([pi = per_pos.impl(), yi = y.impl(), ctxp = &ctx, group, mode] {
      // symmetric participation: reduce a zero when no gradient arrived
      double up = yi->grad.empty() ? 0.0 : yi->grad[0];
      if (mode == ReduceMode::grad_aware) {
        up = all_reduce_values(*ctxp, group, {up})[0];
      }
      if (!pi->requires_grad) return;
      pi->ensure_grad();
      for (double& g : pi->grad) g += up;
    });
  }
  return y;
}

Tensor sft_loss_sharded(RankCtx& ctx, const CommGroup& group, const Tensor& logits,
                        std::span<const int64_t> labels, ReduceMode mode, bool per_rank_mean) {
  Tensor per_pos = sequence_logprob_per_position(logits, labels);
  const int64_t local_n = supervised_count(labels);
  const int64_t global_n = all_reduce_count(ctx, group, local_n);
  if (global_n == 0) throw ConfigError("sft loss: no supervised positions in the group");

  if (per_rank_mean) {
    // mean of per-rank means; ranks with nothing supervised contribute zero
    const double inv = local_n > 0 ? 1.0 / static_cast<double>(local_n) : 0.0;
    Tensor scaled = scale(per_pos, inv);
    Tensor total = logprob_sum_allreduce(ctx, group, scaled, mode);
    return scale(total, -1.0 / static_cast<double>(group.size()));
  }
  Tensor total = logprob_sum_allreduce(ctx, group, per_pos, mode);
  return scale(total, -1.0 / static_cast<double>(global_n));
}

Tensor dpo_loss_sharded(RankCtx& ctx, const CommGroup& group, const Tensor& policy_chosen,
                        const Tensor& policy_rejected, const Tensor& ref_chosen,
                        const Tensor& ref_rejected, double beta, std::array<double, 4>* sums_out) {
  Tensor pc = logprob_sum_allreduce(ctx, group, policy_chosen, ReduceMode::grad_aware);
  Tensor pr = logprob_sum_allreduce(ctx, group, policy_rejected, ReduceMode::grad_aware);
  Tensor rc = logprob_sum_allreduce(ctx, group, ref_chosen, ReduceMode::plain);
  Tensor rr = logprob_sum_allreduce(ctx, group, ref_rejected, ReduceMode::plain);
  if (sums_out) {
    *sums_out = {pc.scalar_value(), pr.scalar_value(), rc.scalar_value(), rr.scalar_value()};
  }
  Tensor margin = sub(sub(pc, pr), sub(rc, rr));
  return softplus(scale(margin, -beta));
}

Tensor wrong_order_dpo_loss(RankCtx& ctx, const CommGroup& group, const Tensor& policy_chosen,
                            const Tensor& policy_rejected, const Tensor& ref_chosen,
                            const Tensor& ref_rejected, double beta) {
  // the nonlinearity lands before the cross-rank reduction: each rank
  // scores only its own shard, and the shard losses get averaged
  Tensor margin = sub(sub(sum_all(policy_chosen), sum_all(policy_rejected)),
                      sub(sum_all(ref_chosen), sum_all(ref_rejected)));
  Tensor local_loss = softplus(scale(margin, -beta));
  Tensor summed = all_reduce_grad_aware(ctx, group, local_loss);
  return scale(summed, 1.0 / static_cast<double>(group.size()));
}

}  // namespace seqpar
