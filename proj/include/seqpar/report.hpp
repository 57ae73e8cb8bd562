#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "seqpar/model.hpp"

namespace seqpar {

struct ReportRow {
  std::string engine;  // engine name, or a suite tag for cross-engine rows
  int sp = 1;
  std::string metric;
  double measured = 0.0;
  double expected = 0.0;
  double tolerance = 0.0;  // 0 means exact; ignored by inequality rows
  bool pass = false;
};

// pass iff |measured - expected| <= tolerance
ReportRow check_close(std::string engine, int sp, std::string metric, double measured,
                      double expected, double tolerance);
// pass iff measured > expected (strict); the tolerance column stays 0
ReportRow check_greater(std::string engine, int sp, std::string metric, double measured,
                        double expected);

int count_failures(const std::vector<ReportRow>& rows);
// columns: engine,sp,metric,measured,expected,tolerance,pass
void write_report_csv(std::ostream& os, const std::vector<ReportRow>& rows);

struct VerifyOptions {
  std::vector<Engine> engines;  // empty means every parallel engine
  std::vector<int> sps{2, 4};
  uint64_t seed = 1;
  SchedulerKind scheduler = SchedulerKind::threaded;
};

// usp degrees used when only sp is given: a genuine two-level (sp/2, 2)
// split when sp allows it, otherwise pure ring.
void default_usp_degrees(int sp, int& ulysses_degree, int& ring_degree);

// Sharded attention vs the single-device oracle over the full config grid,
// plus expected divisibility failures, padded-head counts and GQA spots.
std::vector<ReportRow> engine_parity_suite(const VerifyOptions& opt);
// The reduction-wiring toy, the whole-model finite-difference check, and
// the plain/grad-aware norm factor.
std::vector<ReportRow> gradient_suite(const VerifyOptions& opt);
// SFT/DPO loss-curve parity against sp=1 and the lr=0 exact-match runs.
std::vector<ReportRow> loss_parity_suite(const VerifyOptions& opt);
// Shard/gather, padding, JSONL and CSV round trips; scheduler invariance.
std::vector<ReportRow> roundtrip_suite(uint64_t seed);
// Global ids match the oracle; deliberately local ids corrupt the logits.
std::vector<ReportRow> position_id_suite(uint64_t seed);
// All of the above in order.
std::vector<ReportRow> run_verify_suites(const VerifyOptions& opt);

// Toy rows (per-rank grads under both reductions plus the single-device
// oracle) and per-step full-model grad-norm ratios at each requested sp.
std::vector<ReportRow> pitfall_demo_rows(const std::vector<int>& sps, uint64_t seed,
                                         SchedulerKind scheduler);

struct CommGridRow {
  std::string engine;
  int sp = 0;
  int64_t seq_len = 0;
  int64_t heads = 0;
  int64_t head_dim = 0;
  int64_t measured_bytes = 0;  // per rank, forward + backward
  int64_t analytic_bytes = 0;  // closed-form send-side model
  double asymptotic_bytes = 0.0;  // leading-order volume, never asserted
  bool pass = false;              // measured == analytic
};

struct CommReport {
  std::vector<CommGridRow> grid;
  std::vector<ReportRow> orderings;
};

// Per-rank attention bytes for one engine run, forward and backward, with
// every rank checked equal. usp runs pass the factored degrees.
int64_t measure_engine_bytes(Engine e, int64_t L, int64_t heads, int64_t kv_heads,
                             int64_t head_dim, int sp, int ulysses_degree, int ring_degree,
                             uint64_t seed, SchedulerKind scheduler);

// Closed-form send-side byte totals. Grouped kv heads expand to q heads
// before any engine touches the fabric, so only the q head count matters.
int64_t ulysses_bytes(int64_t bs, int64_t L, int64_t heads, int64_t head_dim, int sp);
int64_t ring_bytes(int64_t bs, int64_t L, int64_t heads, int64_t head_dim, int sp);
int64_t dummy_head_bytes(int64_t bs, int64_t L, int64_t heads, int64_t head_dim, int sp);
int64_t xtuner_bytes(int64_t bs, int64_t L, int64_t heads, int64_t head_dim, int sp);
int64_t usp_bytes(int64_t bs, int64_t L, int64_t heads, int64_t head_dim, int ulysses_degree,
                  int ring_degree);

// Measured vs closed-form bytes over (bs=1, L in {64,128,256}, sp in {2,4})
// for every engine, plus the cross-engine ordering assertions.
CommReport comm_report(uint64_t seed, SchedulerKind scheduler);
// columns: engine,sp,seq_len,heads,head_dim,measured_bytes,analytic_bytes,
//          asymptotic_bytes,pass  then the ordering rows in report format
void write_comm_csv(std::ostream& os, const CommReport& report);

// Per-rank primitive call and byte counts, one block per engine, from a
// representative attention round trip (L=64, dim=8, sp=4).
void write_engine_stats_csv(std::ostream& os, uint64_t seed, SchedulerKind scheduler);

struct BalanceRow {
  std::string layout;  // naive | zigzag
  int sp = 0;
  int64_t seq_len = 0;
  int rank = 0;
  int64_t causal_pairs = 0;
  int64_t attn_flops = 0;  // 14 * head_dim * heads per admitted pair
};

// Per-rank causal workloads for both layouts at the reference head shape.
std::vector<BalanceRow> balance_report(const std::vector<int64_t>& lens,
                                       const std::vector<int>& sps, int64_t heads,
                                       int64_t head_dim);
// columns: layout,sp,seq_len,rank,causal_pairs,attn_flops
void write_balance_csv(std::ostream& os, const std::vector<BalanceRow>& rows);

struct NamedCurve {
  std::string label;
  std::vector<StepReport> steps;
};

// Self-contained SVG line chart of loss vs step, one polyline per curve.
void write_loss_overlay_svg(std::ostream& os, const std::string& title,
                            const std::vector<NamedCurve>& curves);

std::string format_g17(double v);

}  // namespace seqpar
