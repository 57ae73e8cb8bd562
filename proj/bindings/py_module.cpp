// Python bindings for the core operations: sharding, attention engines,
// byte accounting, the verification suites, and the trainer.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstring>
#include <mutex>
#include <sstream>
#include <vector>

#include "seqpar/attention.hpp"
#include "seqpar/model.hpp"
#include "seqpar/partition.hpp"
#include "seqpar/report.hpp"

namespace py = pybind11;
using namespace seqpar;

namespace {

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;

ShardLayout layout_from(const std::string& mode, int64_t len, int sp, int u, int r) {
  const SplitMode m = split_mode_from_string(mode);
  switch (m) {
    case SplitMode::naive:
      return ShardLayout::make_naive(len, sp);
    case SplitMode::zigzag:
      return ShardLayout::make_zigzag(len, sp);
    case SplitMode::usp:
      if (u <= 0 && r <= 0) default_usp_degrees(sp, u, r);
      return ShardLayout::make_usp(len, u, r);
  }
  throw ConfigError("unknown split mode " + mode);
}

ShardLayout engine_layout(Engine e, const std::string& mode, int64_t len, int sp, int u, int r) {
  if (mode != "auto") return layout_from(mode, len, sp, u, r);
  if (e == Engine::ring) return ShardLayout::make_zigzag(len, sp);
  if (e == Engine::usp) {
    if (u <= 0 && r <= 0) default_usp_degrees(sp, u, r);
    return ShardLayout::make_usp(len, u, r);
  }
  return ShardLayout::make_naive(len, sp);
}

std::vector<double> copy_array(const Arr& a) {
  return std::vector<double>(a.data(), a.data() + a.size());
}

Shape shape_of(const Arr& a) {
  Shape s;
  for (py::ssize_t i = 0; i < a.ndim(); ++i) s.push_back(a.shape(i));
  return s;
}

void require_4d(const Arr& a, const char* name) {
  if (a.ndim() != 4) {
    throw ShapeError(std::string(name) + " must be [bs, L, heads, dim], got ndim " +
                     std::to_string(a.ndim()));
  }
}

py::dict row_dict(const ReportRow& r) {
  py::dict d;
  d["engine"] = r.engine;
  d["sp"] = r.sp;
  d["metric"] = r.metric;
  d["measured"] = r.measured;
  d["expected"] = r.expected;
  d["tolerance"] = r.tolerance;
  d["pass"] = r.pass;
  return d;
}

py::list row_list(const std::vector<ReportRow>& rows) {
  py::list out;
  for (const auto& r : rows) out.append(row_dict(r));
  return out;
}

// Full-sequence oracle, forward only. k/v must carry q's head count.
Arr oracle_forward(const Arr& q, const Arr& k, const Arr& v, bool causal,
                   const std::vector<int64_t>& positions) {
  require_4d(q, "q");
  require_4d(k, "k");
  require_4d(v, "v");
  const Shape qs = shape_of(q);
  std::vector<int64_t> pos = positions;
  if (pos.empty()) {
    pos.resize(static_cast<size_t>(qs[1]));
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int64_t>(i);
  }
  const Tensor qt = Tensor::from(qs, copy_array(q));
  const Tensor kt = Tensor::from(shape_of(k), copy_array(k));
  const Tensor vt = Tensor::from(shape_of(v), copy_array(v));
  Tensor out;
  {
    py::gil_scoped_release release;
    out = oracle_attention(qt, kt, vt, pos, causal);
  }
  Arr res(qs);
  std::memcpy(res.mutable_data(), out.values().data(), sizeof(double) * out.values().size());
  return res;
}

// Shards q/k/v over sp ranks, runs the engine on a collective fabric, and
// gathers the outputs back into the full [bs, L, heads, dim] array.
Arr engine_forward(const std::string& engine, const Arr& q, const Arr& k, const Arr& v, int sp,
                   const std::string& layout_mode, bool causal, int ulysses_degree,
                   int ring_degree, const std::string& scheduler) {
  require_4d(q, "q");
  require_4d(k, "k");
  require_4d(v, "v");
  const Engine e = engine_from_string(engine);
  const Shape qs = shape_of(q);
  const Shape ks = shape_of(k);
  const int64_t bs = qs[0], L = qs[1];
  AttentionConfig cfg;
  cfg.heads = static_cast<int>(qs[2]);
  cfg.kv_heads = static_cast<int>(ks[2]);
  cfg.head_dim = static_cast<int>(qs[3]);
  cfg.causal = causal;

  int u = ulysses_degree, r = ring_degree;
  const ShardLayout layout = engine_layout(e, layout_mode, L, sp, u, r);
  cfg.ulysses_degree = layout.u_degree;
  cfg.ring_degree = layout.r_degree;

  const std::vector<double> qv = copy_array(q);
  const std::vector<double> kv = copy_array(k);
  const std::vector<double> vv = copy_array(v);
  const int64_t qrow = qs[2] * qs[3];
  const int64_t krow = ks[2] * ks[3];

  auto take = [&](const std::vector<double>& full, int64_t row, int index) {
    const auto& pos = layout.positions_of(index);
    std::vector<double> local(static_cast<size_t>(bs) * pos.size() * row);
    double* dst = local.data();
    for (int64_t b = 0; b < bs; ++b) {
      for (int64_t p : pos) {
        const double* src = full.data() + (b * L + p) * row;
        std::memcpy(dst, src, sizeof(double) * static_cast<size_t>(row));
        dst += row;
      }
    }
    return local;
  };

  std::vector<std::vector<double>> outs(static_cast<size_t>(sp));
  {
    py::gil_scoped_release release;
    CommFabric fabric(sp, sp, scheduler_from_string(scheduler));
    fabric.run([&](RankCtx& ctx) {
      const int index = ctx.sp_group.index_of(ctx.rank);
      const int64_t ll = layout.local_len();
      const Tensor lq = Tensor::from({bs, ll, qs[2], qs[3]}, take(qv, qrow, index));
      const Tensor lk = Tensor::from({bs, ll, ks[2], ks[3]}, take(kv, krow, index));
      const Tensor lv = Tensor::from({bs, ll, ks[2], ks[3]}, take(vv, krow, index));
      const Tensor out = run_attention_engine(ctx, e, cfg, layout, lq, lk, lv);
      outs[static_cast<size_t>(index)].assign(out.values().begin(), out.values().end());
    });
  }

  Arr res(qs);
  double* full = res.mutable_data();
  for (int index = 0; index < sp; ++index) {
    const auto& pos = layout.positions_of(index);
    const double* src = outs[static_cast<size_t>(index)].data();
    for (int64_t b = 0; b < bs; ++b) {
      for (int64_t p : pos) {
        std::memcpy(full + (b * L + p) * qrow, src, sizeof(double) * static_cast<size_t>(qrow));
        src += qrow;
      }
    }
  }
  return res;
}

py::array_t<double> shard_rows_py(const Arr& x, const std::string& mode, int sp, int index,
                                  int u, int r) {
  if (x.ndim() != 2) throw ShapeError("shard_rows expects a 2-d array");
  const ShardLayout layout = layout_from(mode, x.shape(0), sp, u, r);
  const std::vector<double> local = shard_rows(copy_array(x), x.shape(1), layout, index);
  py::array_t<double> out({layout.local_len(), static_cast<int64_t>(x.shape(1))});
  std::memcpy(out.mutable_data(), local.data(), sizeof(double) * local.size());
  return out;
}

py::array_t<double> gather_rows_py(const std::vector<Arr>& shards, const std::string& mode,
                                   int sp, int u, int r) {
  if (shards.empty()) throw ShapeError("gather_rows got no shards");
  const int64_t width = shards[0].ndim() == 2 ? shards[0].shape(1) : 1;
  int64_t total = 0;
  std::vector<std::vector<double>> by_index;
  for (const Arr& s : shards) {
    total += s.shape(0);
    by_index.push_back(copy_array(s));
  }
  const ShardLayout layout = layout_from(mode, total, sp, u, r);
  const std::vector<double> full = gather_rows(by_index, width, layout);
  py::array_t<double> out({total, width});
  std::memcpy(out.mutable_data(), full.data(), sizeof(double) * full.size());
  return out;
}

py::dict train_from_json(const std::string& config_json) {
  RunConfig rc = parse_run_config(config_json);
  TrainResult result;
  {
    py::gil_scoped_release release;
    const auto data = build_dataset(rc.data, rc.trainer.task, rc.model.vocab, rc.trainer.seed);
    result = run_training(rc.model, rc.trainer, data);
  }
  py::list steps;
  for (const StepReport& s : result.steps) {
    py::dict d;
    d["step"] = s.step;
    d["loss"] = s.loss;
    d["grad_norm"] = s.grad_norm;
    d["param_delta"] = s.param_delta;
    steps.append(d);
  }
  py::list sums;
  for (const auto& a : result.dpo_sums) {
    sums.append(py::make_tuple(a[0], a[1], a[2], a[3]));
  }
  py::dict out;
  out["steps"] = steps;
  out["dpo_sums"] = sums;
  out["first_sync_grads"] = result.first_sync_grads;
  return out;
}

py::dict comm_report_py(uint64_t seed, const std::string& scheduler) {
  CommReport rep;
  {
    py::gil_scoped_release release;
    rep = comm_report(seed, scheduler_from_string(scheduler));
  }
  py::list grid;
  for (const CommGridRow& r : rep.grid) {
    py::dict d;
    d["engine"] = r.engine;
    d["sp"] = r.sp;
    d["seq_len"] = r.seq_len;
    d["heads"] = r.heads;
    d["head_dim"] = r.head_dim;
    d["measured_bytes"] = r.measured_bytes;
    d["analytic_bytes"] = r.analytic_bytes;
    d["asymptotic_bytes"] = r.asymptotic_bytes;
    d["pass"] = r.pass;
    grid.append(d);
  }
  py::dict out;
  out["grid"] = grid;
  out["orderings"] = row_list(rep.orderings);
  return out;
}

py::list balance_py(const std::vector<int64_t>& lens, const std::vector<int>& sps, int64_t heads,
                    int64_t head_dim) {
  const auto rows = balance_report(lens, sps, heads, head_dim);
  py::list out;
  for (const BalanceRow& r : rows) {
    py::dict d;
    d["layout"] = r.layout;
    d["sp"] = r.sp;
    d["seq_len"] = r.seq_len;
    d["rank"] = r.rank;
    d["causal_pairs"] = r.causal_pairs;
    d["attn_flops"] = r.attn_flops;
    out.append(d);
  }
  return out;
}

py::list verify_py(const std::vector<std::string>& engines, const std::vector<int>& sps,
                   uint64_t seed, const std::string& scheduler) {
  VerifyOptions opt;
  for (const std::string& name : engines) opt.engines.push_back(engine_from_string(name));
  if (!sps.empty()) opt.sps = sps;
  opt.seed = seed;
  opt.scheduler = scheduler_from_string(scheduler);
  std::vector<ReportRow> rows;
  {
    py::gil_scoped_release release;
    rows = run_verify_suites(opt);
  }
  return row_list(rows);
}

py::list pitfall_py(const std::vector<int>& sps, uint64_t seed, const std::string& scheduler) {
  std::vector<ReportRow> rows;
  {
    py::gil_scoped_release release;
    rows = pitfall_demo_rows(sps, seed, scheduler_from_string(scheduler));
  }
  return row_list(rows);
}

int64_t measure_bytes_py(const std::string& engine, int64_t L, int64_t heads, int64_t kv_heads,
                         int64_t head_dim, int sp, int ulysses_degree, int ring_degree,
                         uint64_t seed, const std::string& scheduler) {
  const Engine e = engine_from_string(engine);
  py::gil_scoped_release release;
  return measure_engine_bytes(e, L, heads, kv_heads, head_dim, sp, ulysses_degree, ring_degree,
                              seed, scheduler_from_string(scheduler));
}

}  // namespace

PYBIND11_MODULE(_seqpar, m) {
  m.doc() = "sequence-parallel attention simulator core";
  m.attr("__version__") = "0.1.0";
  m.attr("IGNORE_LABEL") = kIgnoreLabel;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);

  m.def("engine_names", [] {
    std::vector<std::string> names{"oracle"};
    for (Engine e : parallel_engines()) names.push_back(engine_name(e));
    return names;
  });

  m.def(
      "shard_positions",
      [](const std::string& mode, int64_t len, int sp, int index, int u, int r) {
        return layout_from(mode, len, sp, u, r).positions_of(index);
      },
      py::arg("mode"), py::arg("len"), py::arg("sp"), py::arg("index"),
      py::arg("ulysses_degree") = 0, py::arg("ring_degree") = 0,
      "Global sequence positions owned by one group index, in local order.");

  m.def(
      "position_ids",
      [](const std::string& mode, int64_t len, int sp, int index, int u, int r) {
        return make_position_ids(layout_from(mode, len, sp, u, r), index);
      },
      py::arg("mode"), py::arg("len"), py::arg("sp"), py::arg("index"),
      py::arg("ulysses_degree") = 0, py::arg("ring_degree") = 0);

  m.def(
      "causal_pairs",
      [](const std::string& mode, int64_t len, int sp, int index, int u, int r) {
        return causal_pair_count(layout_from(mode, len, sp, u, r), index);
      },
      py::arg("mode"), py::arg("len"), py::arg("sp"), py::arg("index"),
      py::arg("ulysses_degree") = 0, py::arg("ring_degree") = 0,
      "(query, key) pairs a causal mask admits for the owned positions.");

  m.def("shard_rows", &shard_rows_py, py::arg("x"), py::arg("mode"), py::arg("sp"),
        py::arg("index"), py::arg("ulysses_degree") = 0, py::arg("ring_degree") = 0);
  m.def("gather_rows", &gather_rows_py, py::arg("shards"), py::arg("mode"), py::arg("sp"),
        py::arg("ulysses_degree") = 0, py::arg("ring_degree") = 0);

  m.def("pad_length", &pad_length, py::arg("len"), py::arg("sp"), py::arg("cutoff_len"),
        py::arg("pad_to_cutoff") = false);
  m.def("pick_xtuner_insp", &pick_xtuner_insp, py::arg("heads"), py::arg("sp"),
        py::arg("head_dim"));

  m.def("oracle_attention", &oracle_forward, py::arg("q"), py::arg("k"), py::arg("v"),
        py::arg("causal") = true, py::arg("positions") = std::vector<int64_t>{},
        "Single-device softmax attention; k/v carry q's head count.");
  m.def("engine_attention", &engine_forward, py::arg("engine"), py::arg("q"), py::arg("k"),
        py::arg("v"), py::arg("sp"), py::arg("layout") = "auto", py::arg("causal") = true,
        py::arg("ulysses_degree") = 0, py::arg("ring_degree") = 0,
        py::arg("scheduler") = "threaded",
        "Sharded attention across sp simulated ranks, gathered to full length.");

  m.def("ulysses_bytes", &ulysses_bytes, py::arg("bs"), py::arg("len"), py::arg("heads"),
        py::arg("head_dim"), py::arg("sp"));
  m.def("ring_bytes", &ring_bytes, py::arg("bs"), py::arg("len"), py::arg("heads"),
        py::arg("head_dim"), py::arg("sp"));
  m.def("dummy_head_bytes", &dummy_head_bytes, py::arg("bs"), py::arg("len"), py::arg("heads"),
        py::arg("head_dim"), py::arg("sp"));
  m.def("xtuner_bytes", &xtuner_bytes, py::arg("bs"), py::arg("len"), py::arg("heads"),
        py::arg("head_dim"), py::arg("sp"));
  m.def("usp_bytes", &usp_bytes, py::arg("bs"), py::arg("len"), py::arg("heads"),
        py::arg("head_dim"), py::arg("ulysses_degree"), py::arg("ring_degree"));
  m.def("measure_engine_bytes", &measure_bytes_py, py::arg("engine"), py::arg("len"),
        py::arg("heads"), py::arg("kv_heads"), py::arg("head_dim"), py::arg("sp"),
        py::arg("ulysses_degree") = 0, py::arg("ring_degree") = 0, py::arg("seed") = 1,
        py::arg("scheduler") = "threaded",
        "Measured per-rank attention bytes, forward and backward.");

  m.def("pitfall_demo", &pitfall_py, py::arg("sps") = std::vector<int>{2, 4},
        py::arg("seed") = 1, py::arg("scheduler") = "threaded");
  m.def("verify", &verify_py, py::arg("engines") = std::vector<std::string>{},
        py::arg("sps") = std::vector<int>{}, py::arg("seed") = 1,
        py::arg("scheduler") = "threaded",
        "Run the full verification suites; returns one dict per check.");
  m.def("comm_report", &comm_report_py, py::arg("seed") = 1, py::arg("scheduler") = "threaded");
  m.def("balance_report", &balance_py, py::arg("lens"), py::arg("sps"), py::arg("heads") = 6,
        py::arg("head_dim") = 8);
  m.def("train", &train_from_json, py::arg("config_json"),
        "Run training from a JSON config string; returns steps and DPO sums.");
}
