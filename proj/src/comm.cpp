#include "seqpar/comm.hpp"

#include <algorithm>
#include <thread>

namespace seqpar {

namespace {

// Abort signal raised in ranks that observe a failed peer, so the original
// error (not the collateral one) is what run() rethrows.
struct PeerAbort : StateError {
  PeerAbort() : StateError("aborted: a peer rank failed") {}
};

struct TensorPayload {
  Shape shape;
  std::shared_ptr<const std::vector<double>> data;
};

int64_t payload_bytes(int64_t numel) { return numel * static_cast<int64_t>(sizeof(double)); }

}  // namespace

const char* primitive_name(Primitive p) {
  switch (p) {
    case Primitive::all_to_all: return "all_to_all";
    case Primitive::all_gather: return "all_gather";
    case Primitive::p2p: return "p2p";
    case Primitive::all_reduce: return "all_reduce";
    case Primitive::broadcast: return "broadcast";
  }
  return "?";
}

SchedulerKind scheduler_from_string(const std::string& s) {
  if (s == "lockstep") return SchedulerKind::lockstep;
  if (s == "threaded") return SchedulerKind::threaded;
  throw ConfigError("unknown scheduler '" + s + "' (expected lockstep or threaded)");
}

const char* scheduler_name(SchedulerKind k) {
  return k == SchedulerKind::lockstep ? "lockstep" : "threaded";
}

int CommGroup::index_of(int rank) const {
  for (size_t i = 0; i < ranks.size(); ++i) {
    if (ranks[i] == rank) return static_cast<int>(i);
  }
  throw ConfigError("rank " + std::to_string(rank) + " not in group " + key());
}

bool CommGroup::contains(int rank) const {
  return std::find(ranks.begin(), ranks.end(), rank) != ranks.end();
}

std::string CommGroup::key() const {
  std::string k = "g";
  for (int r : ranks) {
    k += ".";
    k += std::to_string(r);
  }
  return k;
}

void RankCtx::count(Primitive p, int64_t bytes) { fabric.add_count(rank, p, bytes); }

void RankCtx::add_flops(int64_t n) { fabric.add_flops(rank, n); }

CommFabric::CommFabric(int world_size, int sp, SchedulerKind kind)
    : world_size_(world_size), sp_(sp), kind_(kind) {
  if (world_size <= 0 || sp <= 0) throw ConfigError("world size and sp must be positive");
  if (world_size % sp != 0) {
    throw ConfigError("world size " + std::to_string(world_size) + " not divisible by sp " +
                      std::to_string(sp));
  }
  stats_.resize(static_cast<size_t>(world_size));
  done_.assign(static_cast<size_t>(world_size), 0);
}

CommGroup CommFabric::sp_group_of(int rank) const {
  if (rank < 0 || rank >= world_size_) throw ConfigError("rank out of range");
  CommGroup g;
  int base = (rank / sp_) * sp_;
  for (int i = 0; i < sp_; ++i) g.ranks.push_back(base + i);
  return g;
}

const PrimitiveStats& CommFabric::stats(int rank, Primitive p) const {
  return stats_[static_cast<size_t>(rank)].prim[static_cast<size_t>(p)];
}

int64_t CommFabric::total_bytes(int rank) const {
  int64_t t = 0;
  for (const auto& s : stats_[static_cast<size_t>(rank)].prim) t += s.bytes;
  return t;
}

int64_t CommFabric::flops(int rank) const { return stats_[static_cast<size_t>(rank)].flops; }

void CommFabric::add_count(int rank, Primitive p, int64_t bytes) {
  auto& s = stats_[static_cast<size_t>(rank)].prim[static_cast<size_t>(p)];
  s.calls += 1;
  s.bytes += bytes;
}

void CommFabric::add_flops(int rank, int64_t n) { stats_[static_cast<size_t>(rank)].flops += n; }

void CommFabric::reset_stats() {
  for (auto& r : stats_) {
    r.prim.fill(PrimitiveStats{});
    r.flops = 0;
  }
}

void CommFabric::write_stats_csv(std::ostream& os, const std::string& engine) const {
  os << "engine,rank,primitive,calls,bytes\n";
  for (int r = 0; r < world_size_; ++r) {
    for (int p = 0; p < kPrimitiveCount; ++p) {
      const auto& s = stats_[static_cast<size_t>(r)].prim[static_cast<size_t>(p)];
      os << engine << "," << r << "," << primitive_name(static_cast<Primitive>(p)) << ","
         << s.calls << "," << s.bytes << "\n";
    }
  }
}

bool CommFabric::advance_turn_locked() {
  for (int step = 1; step <= world_size_; ++step) {
    int cand = (turn_ + step) % world_size_;
    if (!done_[static_cast<size_t>(cand)] && cand != turn_) {
      turn_ = cand;
      cv_.notify_all();
      return true;
    }
  }
  return false;
}

void CommFabric::wait_rendezvous(RankCtx& ctx, std::unique_lock<std::mutex>& lk,
                                 const std::function<bool()>& pred) {
  if (kind_ == SchedulerKind::threaded) {
    cv_.wait(lk, [&] { return abort_ || pred(); });
    if (abort_) throw PeerAbort();
    return;
  }
  for (;;) {
    if (abort_) throw PeerAbort();
    if (turn_ == ctx.rank) {
      if (pred()) return;
      if (!advance_turn_locked()) {
        abort_ = true;
        cv_.notify_all();
        throw StateError("collective has no runnable peers; mismatched protocol");
      }
    }
    cv_.wait(lk, [&] { return abort_ || turn_ == ctx.rank; });
  }
}

std::vector<std::shared_ptr<const void>> CommFabric::exchange_erased(
    RankCtx& ctx, const CommGroup& group, std::shared_ptr<const void> payload) {
  int idx = group.index_of(ctx.rank);  // throws when caller is not a member
  std::string key = group.key() + "#" + std::to_string(ctx.group_seq[group.key()]++);

  std::unique_lock<std::mutex> lk(mu_);
  auto it = slots_.find(key);
  std::shared_ptr<Slot> slot;
  if (it == slots_.end()) {
    slot = std::make_shared<Slot>();
    slot->deposits.resize(static_cast<size_t>(group.size()));
    slots_[key] = slot;
  } else {
    slot = it->second;
  }
  slot->deposits[static_cast<size_t>(idx)] = std::move(payload);
  slot->arrived += 1;
  cv_.notify_all();
  wait_rendezvous(ctx, lk, [&] { return slot->arrived == group.size(); });
  auto out = slot->deposits;
  slot->taken += 1;
  if (slot->taken == group.size()) slots_.erase(key);
  return out;
}

void CommFabric::run(const std::function<void(RankCtx&)>& body) {
  {
    std::lock_guard<std::mutex> lg(mu_);
    turn_ = 0;
    abort_ = false;
    done_.assign(static_cast<size_t>(world_size_), 0);
    slots_.clear();
  }
  std::vector<std::exception_ptr> errors(static_cast<size_t>(world_size_));
  std::vector<char> is_abort(static_cast<size_t>(world_size_), 0);
  std::vector<std::thread> threads;
  threads.reserve(static_cast<size_t>(world_size_));
  for (int r = 0; r < world_size_; ++r) {
    threads.emplace_back([&, r] {
      RankCtx ctx{*this, r, sp_group_of(r), {}};
      bool aborted_at_start = false;
      if (kind_ == SchedulerKind::lockstep) {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return abort_ || turn_ == r; });
        aborted_at_start = abort_;
      }
      try {
        if (!aborted_at_start) body(ctx);
      } catch (const PeerAbort&) {
        errors[static_cast<size_t>(r)] = std::current_exception();
        is_abort[static_cast<size_t>(r)] = 1;
      } catch (...) {
        errors[static_cast<size_t>(r)] = std::current_exception();
        std::lock_guard<std::mutex> lg(mu_);
        abort_ = true;
        cv_.notify_all();
      }
      std::lock_guard<std::mutex> lg(mu_);
      done_[static_cast<size_t>(r)] = 1;
      if (kind_ == SchedulerKind::lockstep && turn_ == r) advance_turn_locked();
      cv_.notify_all();
    });
  }
  for (auto& t : threads) t.join();
  for (int pass = 0; pass < 2; ++pass) {
    for (int r = 0; r < world_size_; ++r) {
      if (errors[static_cast<size_t>(r)] && (pass == 1 || !is_abort[static_cast<size_t>(r)])) {
        std::rethrow_exception(errors[static_cast<size_t>(r)]);
      }
    }
  }
}

// ---- value-level cores ----

namespace {

std::vector<int64_t> strides_of(const Shape& shape) {
  std::vector<int64_t> st(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    st[static_cast<size_t>(i)] = st[static_cast<size_t>(i) + 1] * shape[static_cast<size_t>(i) + 1];
  }
  return st;
}

// Copies a `block`-shaped region between row-major tensors given the region
// origin in each. Odometer walk; fine at simulator scale.
void copy_region(const double* src, const Shape& src_shape, const std::vector<int64_t>& src_start,
                 double* dst, const Shape& dst_shape, const std::vector<int64_t>& dst_start,
                 const Shape& block) {
  auto sstr = strides_of(src_shape);
  auto dstr = strides_of(dst_shape);
  size_t nd = block.size();
  std::vector<int64_t> idx(nd, 0);
  int64_t total = numel_of(block);
  for (int64_t n = 0; n < total; ++n) {
    int64_t so = 0, dofs = 0;
    for (size_t i = 0; i < nd; ++i) {
      so += (src_start[i] + idx[i]) * sstr[i];
      dofs += (dst_start[i] + idx[i]) * dstr[i];
    }
    dst[dofs] = src[so];
    for (int i = static_cast<int>(nd) - 1; i >= 0; --i) {
      if (++idx[static_cast<size_t>(i)] < block[static_cast<size_t>(i)]) break;
      idx[static_cast<size_t>(i)] = 0;
    }
  }
}

void check_axis(const Shape& shape, int axis, const char* what) {
  if (axis < 0 || static_cast<size_t>(axis) >= shape.size()) {
    throw ShapeError(std::string(what) + " axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape));
  }
}

// All-to-all on raw values. Scatters scatter_dim, gathers gather_dim,
// counting one call of local_bytes*(g-1)/g.
std::vector<double> all_to_all_values(RankCtx& ctx, const CommGroup& group,
                                      const std::vector<double>& data, const Shape& shape,
                                      int scatter_dim, int gather_dim, Shape* out_shape) {
  check_axis(shape, scatter_dim, "scatter");
  check_axis(shape, gather_dim, "gather");
  if (scatter_dim == gather_dim) throw ShapeError("scatter and gather axes must differ");
  int g = group.size();
  int idx = group.index_of(ctx.rank);
  if (shape[static_cast<size_t>(scatter_dim)] % g != 0) {
    throw ShapeError("all_to_all: extent " +
                     std::to_string(shape[static_cast<size_t>(scatter_dim)]) + " of axis " +
                     std::to_string(scatter_dim) + " not divisible by group size " +
                     std::to_string(g));
  }
  int64_t local_bytes = payload_bytes(numel_of(shape));
  ctx.count(Primitive::all_to_all, local_bytes * (g - 1) / g);

  auto deposits = exchange<TensorPayload>(
      ctx, group, TensorPayload{shape, std::make_shared<const std::vector<double>>(data)});
  for (const auto& d : deposits) {
    if (d->shape != shape) {
      throw ShapeError("all_to_all: peer shape " + shape_str(d->shape) + " differs from " +
                       shape_str(shape));
    }
  }
  Shape os = shape;
  os[static_cast<size_t>(scatter_dim)] /= g;
  os[static_cast<size_t>(gather_dim)] *= g;
  if (out_shape) *out_shape = os;
  std::vector<double> out(static_cast<size_t>(numel_of(os)));

  Shape block = os;
  block[static_cast<size_t>(gather_dim)] = shape[static_cast<size_t>(gather_dim)];
  std::vector<int64_t> src_start(shape.size(), 0), dst_start(shape.size(), 0);
  int64_t scatter_piece = os[static_cast<size_t>(scatter_dim)];
  int64_t gather_piece = shape[static_cast<size_t>(gather_dim)];
  for (int j = 0; j < g; ++j) {
    src_start[static_cast<size_t>(scatter_dim)] = idx * scatter_piece;
    dst_start[static_cast<size_t>(gather_dim)] = j * gather_piece;
    copy_region(deposits[static_cast<size_t>(j)]->data->data(), shape, src_start, out.data(), os,
                dst_start, block);
  }
  return out;
}

// Balanced pairwise reduction over the deposit list; exact when the group
// size is a power of two and the summands are equal.
void tree_sum_into(const std::vector<std::shared_ptr<const std::vector<double>>>& parts, int lo,
                   int hi, std::vector<double>& out) {
  if (hi - lo == 1) {
    out = *parts[static_cast<size_t>(lo)];
    return;
  }
  int mid = lo + (hi - lo) / 2;
  std::vector<double> left, right;
  tree_sum_into(parts, lo, mid, left);
  tree_sum_into(parts, mid, hi, right);
  out.resize(left.size());
  for (size_t i = 0; i < left.size(); ++i) out[i] = left[i] + right[i];
}

std::vector<double> all_reduce_values_core(RankCtx& ctx, const CommGroup& group,
                                           const std::vector<double>& vals) {
  int g = group.size();
  group.index_of(ctx.rank);
  int64_t local_bytes = payload_bytes(static_cast<int64_t>(vals.size()));
  ctx.count(Primitive::all_reduce, 2 * local_bytes * (g - 1) / g);
  if (g == 1) return vals;
  auto deposits = exchange<std::vector<double>>(ctx, group, vals);
  for (const auto& d : deposits) {
    if (d->size() != vals.size()) throw ShapeError("all_reduce: peer size mismatch");
  }
  std::vector<double> out;
  tree_sum_into(deposits, 0, g, out);
  return out;
}

}  // namespace

Tensor all_to_all(RankCtx& ctx, const CommGroup& group, const Tensor& local, int scatter_dim,
                  int gather_dim) {
  Shape out_shape;
  std::vector<double> out = all_to_all_values(ctx, group, local.impl()->data, local.shape(),
                                              scatter_dim, gather_dim, &out_shape);
  Tape* tape = Tape::active();
  bool track = tape && local.requires_grad();
  Tensor y = Tensor::from(std::move(out_shape), std::move(out), track);
  if (track) {
    tape->record([li = local.impl(), yi = y.impl(), &ctx, group, scatter_dim, gather_dim] {
      // inverse all-to-all on the upstream gradient; participate with zeros
      // even when nothing flowed so peers do not stall
      std::vector<double> gy = yi->grad.empty() ? std::vector<double>(yi->data.size(), 0.0)
                                                : yi->grad;
      Shape back_shape;
      std::vector<double> gx = all_to_all_values(ctx, group, gy, yi->shape, gather_dim,
                                                 scatter_dim, &back_shape);
      li->ensure_grad();
      for (size_t i = 0; i < gx.size(); ++i) li->grad[i] += gx[i];
    });
  }
  return y;
}

Tensor all_gather(RankCtx& ctx, const CommGroup& group, const Tensor& local, int dim) {
  check_axis(local.shape(), dim, "gather");
  int g = group.size();
  int idx = group.index_of(ctx.rank);
  int64_t local_bytes = payload_bytes(local.numel());
  ctx.count(Primitive::all_gather, local_bytes * (g - 1));

  auto deposits = exchange<TensorPayload>(
      ctx, group,
      TensorPayload{local.shape(), std::make_shared<const std::vector<double>>(local.impl()->data)});
  int64_t total_dim = 0;
  for (const auto& d : deposits) {
    if (d->shape.size() != local.shape().size()) {
      throw ShapeError("all_gather: peer rank count mismatch");
    }
    for (size_t i = 0; i < d->shape.size(); ++i) {
      if (static_cast<int>(i) != dim && d->shape[i] != local.shape()[i]) {
        throw ShapeError("all_gather: extent mismatch outside axis " + std::to_string(dim) + ": " +
                         shape_str(d->shape) + " vs " + shape_str(local.shape()));
      }
    }
    total_dim += d->shape[static_cast<size_t>(dim)];
  }
  Shape os = local.shape();
  os[static_cast<size_t>(dim)] = total_dim;
  std::vector<double> out(static_cast<size_t>(numel_of(os)));
  std::vector<int64_t> src_start(os.size(), 0), dst_start(os.size(), 0);
  int64_t offset = 0;
  std::vector<int64_t> offsets;
  for (int j = 0; j < g; ++j) {
    offsets.push_back(offset);
    dst_start[static_cast<size_t>(dim)] = offset;
    copy_region(deposits[static_cast<size_t>(j)]->data->data(), deposits[static_cast<size_t>(j)]->shape,
                src_start, out.data(), os, dst_start, deposits[static_cast<size_t>(j)]->shape);
    offset += deposits[static_cast<size_t>(j)]->shape[static_cast<size_t>(dim)];
  }

  Tape* tape = Tape::active();
  bool track = tape && local.requires_grad();
  Tensor y = Tensor::from(os, std::move(out), track);
  if (track) {
    tape->record([li = local.impl(), yi = y.impl(), &ctx, group, dim, idx, offsets, local_bytes, g] {
      // reduce-scatter of the gathered gradient, counted at gather volume
      ctx.count(Primitive::all_gather, local_bytes * (g - 1));
      std::vector<double> gy = yi->grad.empty() ? std::vector<double>(yi->data.size(), 0.0)
                                                : yi->grad;
      auto deposits = exchange<std::vector<double>>(ctx, group, gy);
      li->ensure_grad();
      // slice each peer's gradient at my dim range, then tree-sum
      Shape gshape = yi->shape;
      Shape lshape = li->shape;
      std::vector<std::shared_ptr<const std::vector<double>>> mine;
      for (int j = 0; j < g; ++j) {
        auto piece = std::make_shared<std::vector<double>>(li->data.size());
        std::vector<int64_t> sstart(gshape.size(), 0), dstart(gshape.size(), 0);
        sstart[static_cast<size_t>(dim)] = offsets[static_cast<size_t>(idx)];
        copy_region(deposits[static_cast<size_t>(j)]->data(), gshape, sstart, piece->data(), lshape,
                    dstart, lshape);
        mine.push_back(std::move(piece));
      }
      std::vector<double> summed;
      tree_sum_into(mine, 0, g, summed);
      for (size_t i = 0; i < summed.size(); ++i) li->grad[i] += summed[i];
    });
  }
  return y;
}

Tensor ring_shift(RankCtx& ctx, const CommGroup& group, const Tensor& payload) {
  int g = group.size();
  int idx = group.index_of(ctx.rank);
  ctx.count(Primitive::p2p, g == 1 ? 0 : payload_bytes(payload.numel()));
  if (g == 1) return payload;
  auto deposits = exchange<TensorPayload>(
      ctx, group,
      TensorPayload{payload.shape(),
                    std::make_shared<const std::vector<double>>(payload.impl()->data)});
  const auto& src = deposits[static_cast<size_t>((idx - 1 + g) % g)];
  return Tensor::from(src->shape, *src->data);
}

namespace {

Tensor all_reduce_impl(RankCtx& ctx, const CommGroup& group, const Tensor& x, bool grad_aware) {
  std::vector<double> out = all_reduce_values_core(ctx, group, x.impl()->data);
  Tape* tape = Tape::active();
  bool track = tape && x.requires_grad();
  Tensor y = Tensor::from(x.shape(), std::move(out), track);
  if (track) {
    if (grad_aware) {
      tape->record([xi = x.impl(), yi = y.impl(), &ctx, group] {
        std::vector<double> gy = yi->grad.empty() ? std::vector<double>(yi->data.size(), 0.0)
                                                  : yi->grad;
        std::vector<double> red = all_reduce_values_core(ctx, group, gy);
        xi->ensure_grad();
        for (size_t i = 0; i < red.size(); ++i) xi->grad[i] += red[i];
      });
    } else {
      tape->record([xi = x.impl(), yi = y.impl()] {
        if (yi->grad.empty()) return;
        xi->ensure_grad();
        for (size_t i = 0; i < yi->grad.size(); ++i) xi->grad[i] += yi->grad[i];
      });
    }
  }
  return y;
}

}  // namespace

Tensor all_reduce_plain(RankCtx& ctx, const CommGroup& group, const Tensor& x) {
  return all_reduce_impl(ctx, group, x, false);
}

Tensor all_reduce_grad_aware(RankCtx& ctx, const CommGroup& group, const Tensor& x) {
  return all_reduce_impl(ctx, group, x, true);
}

std::vector<double> all_reduce_values(RankCtx& ctx, const CommGroup& group,
                                      const std::vector<double>& vals) {
  return all_reduce_values_core(ctx, group, vals);
}

int64_t all_reduce_count(RankCtx& ctx, const CommGroup& group, int64_t n) {
  int g = group.size();
  group.index_of(ctx.rank);
  ctx.count(Primitive::all_reduce, 2 * static_cast<int64_t>(sizeof(int64_t)) * (g - 1) / g);
  if (g == 1) return n;
  auto deposits = exchange<int64_t>(ctx, group, n);
  int64_t total = 0;
  for (const auto& d : deposits) total += *d;
  return total;
}

ExactSum exact_sum_all_reduce(RankCtx& ctx, const CommGroup& group, const ExactSum& local) {
  int g = group.size();
  group.index_of(ctx.rank);
  ctx.count(Primitive::all_reduce, 2 * static_cast<int64_t>(sizeof(double)) * (g - 1) / g);
  if (g == 1) return local;
  auto deposits = exchange<std::array<uint64_t, ExactSum::kLimbs>>(ctx, group, local.limbs());
  ExactSum total;
  for (const auto& d : deposits) total.merge(ExactSum::from_limbs(*d));
  return total;
}

std::vector<uint8_t> broadcast_bytes(RankCtx& ctx, const CommGroup& group,
                                     const std::vector<uint8_t>& payload, int root) {
  int g = group.size();
  group.index_of(ctx.rank);
  if (!group.contains(root)) throw ConfigError("broadcast root not in group");
  int root_idx = group.index_of(root);
  bool is_root = ctx.rank == root;
  std::shared_ptr<const void> dep;
  if (is_root) dep = std::make_shared<const std::vector<uint8_t>>(payload);
  auto deposits = ctx.fabric.exchange_erased(ctx, group, dep);
  auto result = std::static_pointer_cast<const std::vector<uint8_t>>(
      deposits[static_cast<size_t>(root_idx)]);
  if (!result) throw StateError("broadcast root deposited nothing");
  ctx.count(Primitive::broadcast,
            static_cast<int64_t>(result->size()) * (g - 1) / g);
  return *result;
}

}  // namespace seqpar
