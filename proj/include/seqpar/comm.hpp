#pragma once

#include <array>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <ostream>
#include <string>
#include <vector>

#include "seqpar/exact_sum.hpp"
#include "seqpar/tensor.hpp"

namespace seqpar {

enum class Primitive { all_to_all = 0, all_gather, p2p, all_reduce, broadcast };
constexpr int kPrimitiveCount = 5;
const char* primitive_name(Primitive p);

// lockstep: ranks execute one at a time, handing a baton round-robin at
// every rendezvous. threaded: ranks run freely and block on rendezvous.
// Both must produce identical results; tests compare them.
enum class SchedulerKind { lockstep, threaded };
SchedulerKind scheduler_from_string(const std::string& s);
const char* scheduler_name(SchedulerKind k);

struct PrimitiveStats {
  int64_t calls = 0;
  int64_t bytes = 0;
};

class CommFabric;

struct CommGroup {
  std::vector<int> ranks;

  int size() const { return static_cast<int>(ranks.size()); }
  int index_of(int rank) const;  // throws ConfigError when absent
  bool contains(int rank) const;
  std::string key() const;
};

struct RankCtx {
  CommFabric& fabric;
  int rank;
  CommGroup sp_group;
  // per-group collective sequence numbers; symmetric programs keep these
  // aligned across the group's members
  std::map<std::string, int64_t> group_seq;

  void count(Primitive p, int64_t bytes);
  void add_flops(int64_t n);
};

// Rendezvous-based collective fabric over in-process rank threads.
// exchange() deposits every rank's payload and hands each rank the full
// deposit list; all collectives derive their output from it locally, so
// results do not depend on the scheduler.
class CommFabric {
 public:
  CommFabric(int world_size, int sp, SchedulerKind kind = SchedulerKind::threaded);

  int world_size() const { return world_size_; }
  int sp() const { return sp_; }
  SchedulerKind scheduler() const { return kind_; }
  CommGroup sp_group_of(int rank) const;

  // Spawns one thread per rank, joins them, and rethrows the first rank
  // error (by rank order). Reusable across calls; counters persist.
  void run(const std::function<void(RankCtx&)>& body);

  const PrimitiveStats& stats(int rank, Primitive p) const;
  int64_t total_bytes(int rank) const;
  int64_t flops(int rank) const;
  void add_count(int rank, Primitive p, int64_t bytes);
  void add_flops(int rank, int64_t n);
  void reset_stats();
  // columns: engine,rank,primitive,calls,bytes
  void write_stats_csv(std::ostream& os, const std::string& engine) const;

  std::vector<std::shared_ptr<const void>> exchange_erased(RankCtx& ctx, const CommGroup& group,
                                                           std::shared_ptr<const void> payload);

 private:
  struct Slot {
    std::vector<std::shared_ptr<const void>> deposits;
    int arrived = 0;
    int taken = 0;
  };

  void wait_rendezvous(RankCtx& ctx, std::unique_lock<std::mutex>& lk,
                       const std::function<bool()>& pred);
  bool advance_turn_locked();

  int world_size_;
  int sp_;
  SchedulerKind kind_;

  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::string, std::shared_ptr<Slot>> slots_;
  int turn_ = 0;
  bool abort_ = false;
  std::vector<char> done_;

  struct RankStats {
    std::array<PrimitiveStats, kPrimitiveCount> prim;
    int64_t flops = 0;
  };
  std::vector<RankStats> stats_;
};

template <typename T>
std::vector<std::shared_ptr<const T>> exchange(RankCtx& ctx, const CommGroup& group, T value) {
  auto raw = ctx.fabric.exchange_erased(ctx, group, std::make_shared<const T>(std::move(value)));
  std::vector<std::shared_ptr<const T>> out;
  out.reserve(raw.size());
  for (auto& p : raw) out.push_back(std::static_pointer_cast<const T>(p));
  return out;
}

// ---- collectives ----
// Byte counters use send-side accounting with integer multiply-then-divide;
// group size 1 degenerates to an identity with zero bytes.

// Scatters scatter_dim over the group and gathers gather_dim; registers an
// inverse all-to-all as its backward when recorded on a tape.
Tensor all_to_all(RankCtx& ctx, const CommGroup& group, const Tensor& local, int scatter_dim,
                  int gather_dim);

// Concatenates shards along dim. Backward is a reduce-scatter, counted as
// one more all_gather call of the same volume.
Tensor all_gather(RankCtx& ctx, const CommGroup& group, const Tensor& local, int dim);

// One ring step: rank at group index i receives the payload of index i-1.
// Value-level; ring attention wires its own gradients.
Tensor ring_shift(RankCtx& ctx, const CommGroup& group, const Tensor& payload);

// Sum-reduce with a balanced (recursive halving) reduction order, exact for
// power-of-two group sizes when the summands are equal. The plain variant
// passes upstream gradients through unchanged; the grad-aware variant
// all-reduces them (one extra counted call).
Tensor all_reduce_plain(RankCtx& ctx, const CommGroup& group, const Tensor& x);
Tensor all_reduce_grad_aware(RankCtx& ctx, const CommGroup& group, const Tensor& x);

// Raw value reductions (no tape): flat parameter-gradient sync, counts.
std::vector<double> all_reduce_values(RankCtx& ctx, const CommGroup& group,
                                      const std::vector<double>& vals);
int64_t all_reduce_count(RankCtx& ctx, const CommGroup& group, int64_t n);

// Merges exact accumulators across the group. The protocol reduces one f64
// scalar, so bytes are counted as an 8-byte all-reduce; the wide state is
// numerical plumbing, not wire payload.
ExactSum exact_sum_all_reduce(RankCtx& ctx, const CommGroup& group, const ExactSum& local);

// Root's bytes reach every rank; counted amortized as bytes*(g-1)/g per rank.
std::vector<uint8_t> broadcast_bytes(RankCtx& ctx, const CommGroup& group,
                                     const std::vector<uint8_t>& payload, int root);

}  // namespace seqpar
