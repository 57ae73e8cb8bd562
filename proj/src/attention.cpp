#include "seqpar/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace seqpar {

const char* engine_name(Engine e) {
  switch (e) {
    case Engine::oracle: return "oracle";
    case Engine::ulysses: return "ulysses";
    case Engine::dummy_head: return "dummy_head";
    case Engine::xtuner: return "xtuner";
    case Engine::ring: return "ring";
    case Engine::usp: return "usp";
  }
  return "?";
}

Engine engine_from_string(const std::string& s) {
  for (Engine e : {Engine::oracle, Engine::ulysses, Engine::dummy_head, Engine::xtuner,
                   Engine::ring, Engine::usp}) {
    if (s == engine_name(e)) return e;
  }
  throw ConfigError("unknown engine '" + s + "'");
}

const std::vector<Engine>& parallel_engines() {
  static const std::vector<Engine> all{Engine::ulysses, Engine::dummy_head, Engine::xtuner,
                                       Engine::ring, Engine::usp};
  return all;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool rec(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

struct Dims4 {
  int64_t bs, len, heads, dim;
};

Dims4 dims4(const Tensor& t, const char* what) {
  if (!t.defined() || t.shape().size() != 4) {
    throw ShapeError(std::string(what) + " must be [bs, len, heads, dim]");
  }
  return {t.extent(0), t.extent(1), t.extent(2), t.extent(3)};
}

}  // namespace

AttnPiece attn_block_forward(int64_t bs, int64_t heads, int64_t dim,
                             std::span<const double> q, std::span<const int64_t> qpos,
                             std::span<const double> k, std::span<const double> v,
                             std::span<const int64_t> kpos, bool causal, double scale,
                             int64_t* flops) {
  const int64_t lq = static_cast<int64_t>(qpos.size());
  const int64_t lk = static_cast<int64_t>(kpos.size());
  if (static_cast<int64_t>(q.size()) != bs * lq * heads * dim ||
      static_cast<int64_t>(k.size()) != bs * lk * heads * dim || k.size() != v.size()) {
    throw ShapeError("attention block: buffer sizes disagree with positions");
  }
  AttnPiece p;
  p.bs = bs;
  p.lq = lq;
  p.heads = heads;
  p.dim = dim;
  p.numerator.assign(static_cast<size_t>(bs * lq * heads * dim), 0.0);
  p.row_max.assign(static_cast<size_t>(bs * lq * heads), kNegInf);
  p.row_norm.assign(static_cast<size_t>(bs * lq * heads), 0.0);

  std::vector<double> scores(static_cast<size_t>(lk));
  int64_t pairs = 0;
  for (int64_t b = 0; b < bs; ++b) {
    for (int64_t i = 0; i < lq; ++i) {
      for (int64_t h = 0; h < heads; ++h) {
        const double* qrow = q.data() + ((b * lq + i) * heads + h) * dim;
        double m = kNegInf;
        for (int64_t j = 0; j < lk; ++j) {
          if (causal && kpos[static_cast<size_t>(j)] > qpos[static_cast<size_t>(i)]) continue;
          const double* krow = k.data() + ((b * lk + j) * heads + h) * dim;
          double dot = 0.0;
          for (int64_t c = 0; c < dim; ++c) dot += qrow[c] * krow[c];
          scores[static_cast<size_t>(j)] = dot * scale;
          m = std::max(m, scores[static_cast<size_t>(j)]);
          ++pairs;
        }
        if (m == kNegInf) continue;  // nothing admitted in this block
        const int64_t row = (b * lq + i) * heads + h;
        double* num = p.numerator.data() + row * dim;
        double norm = 0.0;
        for (int64_t j = 0; j < lk; ++j) {
          if (causal && kpos[static_cast<size_t>(j)] > qpos[static_cast<size_t>(i)]) continue;
          const double w = std::exp(scores[static_cast<size_t>(j)] - m);
          norm += w;
          const double* vrow = v.data() + ((b * lk + j) * heads + h) * dim;
          for (int64_t c = 0; c < dim; ++c) num[c] += w * vrow[c];
        }
        p.row_max[static_cast<size_t>(row)] = m;
        p.row_norm[static_cast<size_t>(row)] = norm;
      }
    }
  }
  if (flops) *flops += pairs * 4 * dim;
  return p;
}

void merge_piece(AttnPiece& acc, AttnPiece&& piece) {
  if (acc.empty()) {
    acc = std::move(piece);
    return;
  }
  if (acc.bs != piece.bs || acc.lq != piece.lq || acc.heads != piece.heads ||
      acc.dim != piece.dim) {
    throw ShapeError("merge_piece: block shapes disagree");
  }
  const int64_t rows = acc.bs * acc.lq * acc.heads;
  const int64_t dim = acc.dim;
  for (int64_t row = 0; row < rows; ++row) {
    const double mb = piece.row_max[static_cast<size_t>(row)];
    if (mb == kNegInf) continue;  // incoming row saw nothing
    const double ma = acc.row_max[static_cast<size_t>(row)];
    double* na = acc.numerator.data() + row * dim;
    const double* nb = piece.numerator.data() + row * dim;
    if (ma == kNegInf) {
      acc.row_max[static_cast<size_t>(row)] = mb;
      acc.row_norm[static_cast<size_t>(row)] = piece.row_norm[static_cast<size_t>(row)];
      std::copy_n(nb, dim, na);
      continue;
    }
    const double m = std::max(ma, mb);
    const double ca = std::exp(ma - m);
    const double cb = std::exp(mb - m);
    acc.row_max[static_cast<size_t>(row)] = m;
    acc.row_norm[static_cast<size_t>(row)] =
        acc.row_norm[static_cast<size_t>(row)] * ca +
        piece.row_norm[static_cast<size_t>(row)] * cb;
    for (int64_t c = 0; c < dim; ++c) na[c] = na[c] * ca + nb[c] * cb;
  }
}

void finalize_piece(const AttnPiece& acc, std::vector<double>& out, std::vector<double>& lse) {
  const int64_t rows = acc.bs * acc.lq * acc.heads;
  const int64_t dim = acc.dim;
  out.assign(static_cast<size_t>(rows * dim), 0.0);
  lse.assign(static_cast<size_t>(rows), kNegInf);
  for (int64_t row = 0; row < rows; ++row) {
    const double norm = acc.row_norm[static_cast<size_t>(row)];
    if (norm <= 0.0) continue;  // fully masked row stays zero
    const double inv = 1.0 / norm;
    const double* num = acc.numerator.data() + row * dim;
    double* o = out.data() + row * dim;
    for (int64_t c = 0; c < dim; ++c) o[c] = num[c] * inv;
    lse[static_cast<size_t>(row)] = acc.row_max[static_cast<size_t>(row)] + std::log(norm);
  }
}

void attn_block_backward(int64_t bs, int64_t heads, int64_t dim,
                         std::span<const double> q, std::span<const int64_t> qpos,
                         std::span<const double> k, std::span<const double> v,
                         std::span<const int64_t> kpos, bool causal, double scale,
                         std::span<const double> out, std::span<const double> lse,
                         std::span<const double> dout, std::span<double> dq,
                         std::span<double> dk, std::span<double> dv, int64_t* flops) {
  const int64_t lq = static_cast<int64_t>(qpos.size());
  const int64_t lk = static_cast<int64_t>(kpos.size());
  if (dq.size() != q.size() || dk.size() != k.size() || dv.size() != v.size() ||
      dout.size() != out.size() || static_cast<int64_t>(out.size()) != bs * lq * heads * dim) {
    throw ShapeError("attention backward: buffer sizes disagree");
  }
  int64_t pairs = 0;
  for (int64_t b = 0; b < bs; ++b) {
    for (int64_t i = 0; i < lq; ++i) {
      for (int64_t h = 0; h < heads; ++h) {
        const int64_t row = (b * lq + i) * heads + h;
        if (lse[static_cast<size_t>(row)] == kNegInf) continue;
        const double* qrow = q.data() + row * dim;
        const double* orow = out.data() + row * dim;
        const double* dorow = dout.data() + row * dim;
        double* dqrow = dq.data() + row * dim;
        double delta = 0.0;  // rowsum(dout * out), the softmax shift term
        for (int64_t c = 0; c < dim; ++c) delta += dorow[c] * orow[c];
        for (int64_t j = 0; j < lk; ++j) {
          if (causal && kpos[static_cast<size_t>(j)] > qpos[static_cast<size_t>(i)]) continue;
          const int64_t krow_idx = ((b * lk + j) * heads + h) * dim;
          const double* krow = k.data() + krow_idx;
          const double* vrow = v.data() + krow_idx;
          double dot = 0.0;
          for (int64_t c = 0; c < dim; ++c) dot += qrow[c] * krow[c];
          const double prob = std::exp(dot * scale - lse[static_cast<size_t>(row)]);
          double dprob = 0.0;
          for (int64_t c = 0; c < dim; ++c) dprob += dorow[c] * vrow[c];
          const double dscore = prob * (dprob - delta) * scale;
          double* dkrow = dk.data() + krow_idx;
          double* dvrow = dv.data() + krow_idx;
          for (int64_t c = 0; c < dim; ++c) {
            dvrow[c] += prob * dorow[c];
            dqrow[c] += dscore * krow[c];
            dkrow[c] += dscore * qrow[c];
          }
          ++pairs;
        }
      }
    }
  }
  if (flops) *flops += pairs * 10 * dim;
}

Tensor oracle_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const int64_t> positions, bool causal, RankCtx* ctx) {
  const Dims4 d = dims4(q, "oracle_attention q");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("oracle_attention: q, k, v must share a shape (expand kv heads first)");
  }
  if (static_cast<int64_t>(positions.size()) != d.len) {
    throw ShapeError("oracle_attention: positions length " + std::to_string(positions.size()) +
                     " does not match sequence length " + std::to_string(d.len));
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.dim));
  int64_t fl = 0;
  AttnPiece piece = attn_block_forward(d.bs, d.heads, d.dim, q.values(), positions, k.values(),
                                       v.values(), positions, causal, scale, &fl);
  std::vector<double> out, lse;
  finalize_piece(piece, out, lse);
  if (ctx) ctx->add_flops(fl);

  Tensor y = Tensor::from(q.shape(), std::move(out), rec({&q, &k, &v}));
  if (y.requires_grad()) {
    std::vector<int64_t> pos(positions.begin(), positions.end());
    Tape::active()->record([qi = q.impl(), ki = k.impl(), vi = v.impl(), yi = y.impl(),
                            lse = std::move(lse), pos = std::move(pos), causal, scale, d, ctx] {
      if (yi->grad.empty()) return;
      std::vector<double> dq(qi->data.size(), 0.0);
      std::vector<double> dk(ki->data.size(), 0.0);
      std::vector<double> dv(vi->data.size(), 0.0);
      int64_t fl = 0;
      attn_block_backward(d.bs, d.heads, d.dim, qi->data, pos, ki->data, vi->data, pos, causal,
                          scale, yi->data, lse, yi->grad, dq, dk, dv, &fl);
      if (ctx) ctx->add_flops(fl);
      auto accumulate = [](TensorImpl& t, const std::vector<double>& g) {
        if (!t.requires_grad) return;
        t.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) t.grad[i] += g[i];
      };
      accumulate(*qi, dq);
      accumulate(*ki, dk);
      accumulate(*vi, dv);
    });
  }
  return y;
}

Tensor ring_attention(RankCtx& ctx, const CommGroup& group,
                      const std::vector<std::vector<int64_t>>& positions_by_index,
                      const Tensor& q, const Tensor& k, const Tensor& v, bool causal) {
  const Dims4 d = dims4(q, "ring_attention q");
  if (k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("ring_attention: q, k, v must share a shape (expand kv heads first)");
  }
  const int g = group.size();
  const int my = group.index_of(ctx.rank);
  if (static_cast<int>(positions_by_index.size()) != g) {
    throw ConfigError("ring_attention: need one position list per group index");
  }
  for (const auto& pb : positions_by_index) {
    if (static_cast<int64_t>(pb.size()) != d.len) {
      throw ConfigError("ring_attention: every block must own local_len positions");
    }
  }
  const auto& qpos = positions_by_index[static_cast<size_t>(my)];
  const double scale = 1.0 / std::sqrt(static_cast<double>(d.dim));
  const int64_t X = d.bs * d.len * d.heads * d.dim;

  // Keys and values travel the ring fused as one payload; queries stay put.
  std::vector<double> buf(static_cast<size_t>(2 * X));
  std::copy_n(k.values().data(), X, buf.data());
  std::copy_n(v.values().data(), X, buf.data() + X);

  AttnPiece acc;
  int64_t fl = 0;
  for (int s = 0; s < g; ++s) {
    if (s > 0) {
      Tensor shifted = ring_shift(ctx, group, Tensor::from({2 * X}, std::move(buf)));
      buf.assign(shifted.values().begin(), shifted.values().end());
    }
    const int owner = (my - s + g) % g;
    AttnPiece piece = attn_block_forward(
        d.bs, d.heads, d.dim, q.values(), qpos, std::span<const double>(buf.data(), X),
        std::span<const double>(buf.data() + X, X), positions_by_index[static_cast<size_t>(owner)],
        causal, scale, &fl);
    merge_piece(acc, std::move(piece));
  }
  std::vector<double> out, lse;
  finalize_piece(acc, out, lse);
  ctx.add_flops(fl);

  Tensor y = Tensor::from(q.shape(), std::move(out), rec({&q, &k, &v}));
  if (y.requires_grad()) {
    Tape::active()->record([qi = q.impl(), ki = k.impl(), vi = v.impl(), yi = y.impl(),
                            lse = std::move(lse), pos = positions_by_index, causal, scale, d, X,
                            my, g, group, ctxp = &ctx] {
      // Other ranks expect this rank's shifts even when no gradient reached
      // this node, so participate with zeros instead of returning early.
      std::vector<double> zeros;
      std::span<const double> dout;
      if (yi->grad.empty()) {
        zeros.assign(static_cast<size_t>(X), 0.0);
        dout = zeros;
      } else {
        dout = yi->grad;
      }
      const auto& qpos = pos[static_cast<size_t>(my)];
      std::vector<double> dq(static_cast<size_t>(X), 0.0);
      // k | v | dk | dv circulate together; after g shifts each block is
      // home again carrying every rank's contributions.
      std::vector<double> buf(static_cast<size_t>(4 * X), 0.0);
      std::copy_n(ki->data.data(), X, buf.data());
      std::copy_n(vi->data.data(), X, buf.data() + X);
      int64_t fl = 0;
      for (int s = 0; s < g; ++s) {
        const int owner = (my - s + g) % g;
        attn_block_backward(d.bs, d.heads, d.dim, qi->data, qpos,
                            std::span<const double>(buf.data(), X),
                            std::span<const double>(buf.data() + X, X),
                            pos[static_cast<size_t>(owner)], causal, scale, yi->data, lse, dout,
                            dq, std::span<double>(buf.data() + 2 * X, X),
                            std::span<double>(buf.data() + 3 * X, X), &fl);
        Tensor shifted = ring_shift(*ctxp, group, Tensor::from({4 * X}, std::move(buf)));
        buf.assign(shifted.values().begin(), shifted.values().end());
      }
      ctxp->add_flops(fl);
      auto accumulate = [](TensorImpl& t, const double* g_, int64_t n) {
        if (!t.requires_grad) return;
        t.ensure_grad();
        for (int64_t i = 0; i < n; ++i) t.grad[static_cast<size_t>(i)] += g_[i];
      };
      accumulate(*qi, dq.data(), X);
      accumulate(*ki, buf.data() + 2 * X, X);
      accumulate(*vi, buf.data() + 3 * X, X);
    });
  }
  return y;
}

int pick_xtuner_insp(int heads, int sp, int head_dim) {
  if (heads <= 0 || sp <= 0 || head_dim <= 0) {
    throw ConfigError("xtuner: heads, sp, and head_dim must be positive");
  }
  const int base = sp / std::gcd(heads, sp);
  for (int insp = base; insp <= head_dim; insp += base) {
    if (head_dim % insp == 0 && sp % insp == 0) return insp;
  }
  throw ConfigError("xtuner: no virtual-head factor for heads=" + std::to_string(heads) +
                    ", sp=" + std::to_string(sp) + ", head_dim=" + std::to_string(head_dim) +
                    ": need a multiple of " + std::to_string(base) +
                    " dividing both head_dim and sp");
}

namespace {

std::vector<int64_t> concat_owned(const ShardLayout& layout, int from, int count) {
  std::vector<int64_t> pos;
  pos.reserve(static_cast<size_t>(layout.local_len()) * static_cast<size_t>(count));
  for (int t = from; t < from + count; ++t) {
    const auto& o = layout.positions_of(t);
    pos.insert(pos.end(), o.begin(), o.end());
  }
  return pos;
}

CommGroup subgroup(const CommGroup& parent, int from, int count, int stride) {
  CommGroup out;
  out.ranks.reserve(static_cast<size_t>(count));
  for (int t = 0; t < count; ++t) {
    out.ranks.push_back(parent.ranks[static_cast<size_t>(from + t * stride)]);
  }
  return out;
}

// Shared all-to-all sandwich: scatter heads, attend over the gathered
// sequence, scatter the sequence back.
Tensor ulysses_core(RankCtx& ctx, const CommGroup& group,
                    const std::vector<int64_t>& full_positions, const Tensor& q, const Tensor& k,
                    const Tensor& v, bool causal) {
  Tensor qg = all_to_all(ctx, group, q, 2, 1);
  Tensor kg = all_to_all(ctx, group, k, 2, 1);
  Tensor vg = all_to_all(ctx, group, v, 2, 1);
  Tensor og = oracle_attention(qg, kg, vg, full_positions, causal, &ctx);
  return all_to_all(ctx, group, og, 1, 2);
}

Tensor ulysses_engine(RankCtx& ctx, const AttentionConfig& cfg, const ShardLayout& layout,
                      const Tensor& q, const Tensor& k, const Tensor& v) {
  if (cfg.heads % layout.sp != 0) {
    throw ConfigError("ulysses: heads=" + std::to_string(cfg.heads) +
                      " not divisible by sp=" + std::to_string(layout.sp) +
                      "; use dummy_head or xtuner");
  }
  return ulysses_core(ctx, ctx.sp_group, concat_owned(layout, 0, layout.sp), q, k, v,
                      cfg.causal);
}

Tensor dummy_head_engine(RankCtx& ctx, const AttentionConfig& cfg, const ShardLayout& layout,
                         const Tensor& q, const Tensor& k, const Tensor& v) {
  const int sp = layout.sp;
  const auto positions = concat_owned(layout, 0, sp);
  if (cfg.heads % sp == 0) {
    return ulysses_core(ctx, ctx.sp_group, positions, q, k, v, cfg.causal);
  }
  const int64_t pad = (cfg.heads + sp - 1) / sp * sp - cfg.heads;
  Tensor qp = pad_axis_zeros(q, 2, pad);
  Tensor kp = pad_axis_zeros(k, 2, pad);
  Tensor vp = pad_axis_zeros(v, 2, pad);
  Tensor out = ulysses_core(ctx, ctx.sp_group, positions, qp, kp, vp, cfg.causal);
  return slice_axis(out, 2, 0, cfg.heads);
}

Tensor xtuner_engine(RankCtx& ctx, const AttentionConfig& cfg, const ShardLayout& layout,
                     const Tensor& q, const Tensor& k, const Tensor& v) {
  const int sp = layout.sp;
  const Dims4 d = dims4(q, "xtuner q");
  const int insp = pick_xtuner_insp(cfg.heads, sp, cfg.head_dim);
  const int64_t hv = d.heads * insp;    // virtual heads over the fragment dim
  const int64_t frag = d.dim / insp;
  const int64_t hv_local = hv / sp;     // virtual heads per rank after scatter
  const auto positions = concat_owned(layout, 0, sp);

  auto to_virtual = [&](const Tensor& t) {
    return reshape(t, {d.bs, d.len, hv, frag});
  };
  Tensor qa = all_to_all(ctx, ctx.sp_group, to_virtual(q), 2, 1);
  Tensor ka = all_to_all(ctx, ctx.sp_group, to_virtual(k), 2, 1);
  Tensor va = all_to_all(ctx, ctx.sp_group, to_virtual(v), 2, 1);

  // Ranks holding fragments of the same real heads gather them back; the
  // group's virtual range is consecutive, so a reshape restores full heads.
  const int my = ctx.sp_group.index_of(ctx.rank);
  const int gidx = my / insp;
  CommGroup inner = subgroup(ctx.sp_group, gidx * insp, insp, 1);
  const int64_t L = d.len * sp;
  // insp ranks x hv_local fragments collapse into hv_local full real heads,
  // so each group computes hv_local heads (replicated insp times across sp).
  Tensor qg = reshape(all_gather(ctx, inner, qa, 2), {d.bs, L, hv_local, d.dim});
  Tensor kg = reshape(all_gather(ctx, inner, ka, 2), {d.bs, L, hv_local, d.dim});
  Tensor vg = reshape(all_gather(ctx, inner, va, 2), {d.bs, L, hv_local, d.dim});

  Tensor og = oracle_attention(qg, kg, vg, positions, cfg.causal, &ctx);

  // Back to virtual heads, keep only the fragments this rank contributed,
  // and undo the scatter.
  Tensor ov = reshape(og, {d.bs, L, hv_local * insp, frag});
  Tensor mine = slice_axis(ov, 2, static_cast<int64_t>(my - gidx * insp) * hv_local, hv_local);
  Tensor oa = all_to_all(ctx, ctx.sp_group, mine, 1, 2);
  return reshape(oa, q.shape());
}

Tensor ring_engine(RankCtx& ctx, const AttentionConfig& cfg, const ShardLayout& layout,
                   const Tensor& q, const Tensor& k, const Tensor& v) {
  if (layout.mode != SplitMode::zigzag) {
    throw ConfigError("ring engine requires the zigzag layout");
  }
  return ring_attention(ctx, ctx.sp_group, layout.owned, q, k, v, cfg.causal);
}

Tensor usp_engine(RankCtx& ctx, const AttentionConfig& cfg, const ShardLayout& layout,
                  const Tensor& q, const Tensor& k, const Tensor& v) {
  const int u = cfg.ulysses_degree;
  const int r = cfg.ring_degree;
  if (u <= 0 || r <= 0) {
    throw ConfigError("usp: ulysses_degree and ring_degree must be positive");
  }
  if (u * r != layout.sp) {
    throw ConfigError("usp: ulysses_degree " + std::to_string(u) + " * ring_degree " +
                      std::to_string(r) + " != sp " + std::to_string(layout.sp));
  }
  if (layout.mode != SplitMode::usp || layout.u_degree != u || layout.r_degree != r) {
    throw ConfigError("usp: layout was not built for these degrees");
  }
  const int my = ctx.sp_group.index_of(ctx.rank);
  const int rho = my / u;

  Tensor qs = q, ks = k, vs = v;
  int64_t pad = 0;
  CommGroup inner;
  if (u > 1) {
    if (cfg.heads % u != 0) {
      pad = (cfg.heads + u - 1) / u * u - cfg.heads;
      qs = pad_axis_zeros(qs, 2, pad);
      ks = pad_axis_zeros(ks, 2, pad);
      vs = pad_axis_zeros(vs, 2, pad);
    }
    inner = subgroup(ctx.sp_group, rho * u, u, 1);
    qs = all_to_all(ctx, inner, qs, 2, 1);
    ks = all_to_all(ctx, inner, ks, 2, 1);
    vs = all_to_all(ctx, inner, vs, 2, 1);
  }

  Tensor out;
  if (r > 1) {
    const int iota = my % u;
    CommGroup outer = subgroup(ctx.sp_group, iota, r, u);
    auto ring_layout = ShardLayout::make_zigzag(layout.global_len, r);
    out = ring_attention(ctx, outer, ring_layout.owned, qs, ks, vs, cfg.causal);
  } else {
    out = oracle_attention(qs, ks, vs, concat_owned(layout, rho * u, u), cfg.causal, &ctx);
  }

  if (u > 1) {
    out = all_to_all(ctx, inner, out, 1, 2);
    if (pad > 0) out = slice_axis(out, 2, 0, cfg.heads);
  }
  return out;
}

}  // namespace

Tensor run_attention_engine(RankCtx& ctx, Engine engine, const AttentionConfig& cfg,
                            const ShardLayout& layout, const Tensor& q, const Tensor& k,
                            const Tensor& v) {
  const Dims4 dq = dims4(q, "attention q");
  const Dims4 dk = dims4(k, "attention k");
  if (v.shape() != k.shape()) throw ShapeError("attention: k and v shapes differ");
  const int kv_heads = cfg.kv_heads > 0 ? cfg.kv_heads : cfg.heads;
  if (dq.heads != cfg.heads || dq.dim != cfg.head_dim) {
    throw ShapeError("attention: q shape disagrees with the config");
  }
  if (dk.bs != dq.bs || dk.len != dq.len || dk.heads != kv_heads || dk.dim != dq.dim) {
    throw ShapeError("attention: kv shape disagrees with the config");
  }
  if (cfg.heads % kv_heads != 0) {
    throw ConfigError("attention: heads=" + std::to_string(cfg.heads) +
                      " not a multiple of kv_heads=" + std::to_string(kv_heads));
  }
  if (layout.sp != ctx.sp_group.size()) {
    throw ConfigError("attention: layout sp does not match the communicator size");
  }
  if (dq.len != layout.local_len()) {
    throw ShapeError("attention: local length " + std::to_string(dq.len) +
                     " does not match layout shard length " + std::to_string(layout.local_len()));
  }

  Tensor ke = k, ve = v;
  const int64_t rep = cfg.heads / kv_heads;
  if (rep > 1) {
    ke = repeat_heads(k, rep);
    ve = repeat_heads(v, rep);
  }

  switch (engine) {
    case Engine::oracle:
      if (layout.sp != 1) throw ConfigError("oracle engine runs only at sp=1");
      return oracle_attention(q, ke, ve, layout.positions_of(0), cfg.causal, &ctx);
    case Engine::ulysses:
      return ulysses_engine(ctx, cfg, layout, q, ke, ve);
    case Engine::dummy_head:
      return dummy_head_engine(ctx, cfg, layout, q, ke, ve);
    case Engine::xtuner:
      return xtuner_engine(ctx, cfg, layout, q, ke, ve);
    case Engine::ring:
      return ring_engine(ctx, cfg, layout, q, ke, ve);
    case Engine::usp:
      return usp_engine(ctx, cfg, layout, q, ke, ve);
  }
  throw ConfigError("unknown engine");
}

}  // namespace seqpar
