#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "seqpar/comm.hpp"
#include "seqpar/tensor.hpp"

using namespace seqpar;

namespace {

const SchedulerKind kBothSchedulers[] = {SchedulerKind::lockstep, SchedulerKind::threaded};

}  // namespace

TEST_CASE("fabric validates construction") {
  CHECK_THROWS_AS(CommFabric(3, 2), ConfigError);
  CHECK_THROWS_AS(CommFabric(0, 1), ConfigError);
  CommFabric f(8, 4);
  CommGroup g = f.sp_group_of(5);
  CHECK(g.ranks == std::vector<int>{4, 5, 6, 7});
  CHECK(g.index_of(6) == 2);
  CHECK_THROWS_AS(g.index_of(0), ConfigError);
}

TEST_CASE("all_to_all matches the two-rank example") {
  // rank0 holds [A0,A1], rank1 holds [B0,B1] on the scatter axis;
  // afterwards rank0 holds [A0,B0] and rank1 holds [A1,B1]
  for (SchedulerKind sched : kBothSchedulers) {
    CommFabric f(2, 2, sched);
    std::vector<std::vector<double>> got(2);
    f.run([&](RankCtx& ctx) {
      double base = ctx.rank == 0 ? 10 : 20;  // A=1x, B=2x
      Tensor local = Tensor::from({2, 1}, {base + 0, base + 1});
      Tensor out = all_to_all(ctx, ctx.sp_group, local, 0, 1);
      REQUIRE(out.shape() == Shape{1, 2});
      got[static_cast<size_t>(ctx.rank)] = {out.value_at(0), out.value_at(1)};
    });
    CHECK(got[0] == std::vector<double>{10, 20});
    CHECK(got[1] == std::vector<double>{11, 21});
  }
}

TEST_CASE("all_to_all inverse round trips bitwise") {
  CommFabric f(4, 4);
  f.run([&](RankCtx& ctx) {
    Rng rng(100 + static_cast<uint64_t>(ctx.rank));
    std::vector<double> data(static_cast<size_t>(2 * 3 * 8 * 4));
    for (double& v : data) v = rng.uniform_range(-3, 3);
    Tensor x = Tensor::from({2, 3, 8, 4}, data);
    Tensor fwd = all_to_all(ctx, ctx.sp_group, x, 2, 1);
    REQUIRE(fwd.shape() == Shape{2, 12, 2, 4});
    Tensor back = all_to_all(ctx, ctx.sp_group, fwd, 1, 2);
    REQUIRE(back.shape() == x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) {
      REQUIRE(back.value_at(i) == x.value_at(i));
    }
  });
}

TEST_CASE("all_to_all rejects non divisible scatter extent") {
  CommFabric f(4, 4);
  CHECK_THROWS_WITH_AS(
      f.run([&](RankCtx& ctx) {
        Tensor x(Shape{1, 2, 6, 2}, 1.0);
        all_to_all(ctx, ctx.sp_group, x, 2, 1);
      }),
      doctest::Contains("not divisible"), ShapeError);
}

TEST_CASE("all_to_all byte accounting") {
  CommFabric f(4, 4);
  f.run([&](RankCtx& ctx) {
    Tensor x(Shape{1, 16, 8, 4}, 0.5);  // 512 elements, 4096 bytes
    all_to_all(ctx, ctx.sp_group, x, 2, 1);
  });
  for (int r = 0; r < 4; ++r) {
    CHECK(f.stats(r, Primitive::all_to_all).calls == 1);
    CHECK(f.stats(r, Primitive::all_to_all).bytes == 4096 * 3 / 4);
  }
}

TEST_CASE("all_to_all backward is the inverse collective") {
  CommFabric f(2, 2);
  std::vector<std::vector<double>> grads(2);
  f.run([&](RankCtx& ctx) {
    Tape tape;
    TapeScope ts(&tape);
    double base = ctx.rank == 0 ? 1 : 5;
    Tensor x = Tensor::from({2, 1}, {base, base + 1}, true);
    Tensor out = all_to_all(ctx, ctx.sp_group, x, 0, 1);
    // weight the two gathered entries differently per rank
    Tensor w = Tensor::from({1, 2}, {double(ctx.rank + 1), double(10 * (ctx.rank + 1))});
    Tensor loss = sum_all(mul(out, w));
    tape.backward(loss);
    auto g = x.grad();
    grads[static_cast<size_t>(ctx.rank)] = {g[0], g[1]};
  });
  // rank0 x = [A0,A1]: A0 weighted by rank0 w[0]=1, A1 by rank1 w[0]=2
  CHECK(grads[0] == std::vector<double>{1, 2});
  // rank1 x = [B0,B1]: B0 weighted by rank0 w[1]=10, B1 by rank1 w[1]=20
  CHECK(grads[1] == std::vector<double>{10, 20});
  // forward + backward both counted
  CHECK(f.stats(0, Primitive::all_to_all).calls == 2);
}

TEST_CASE("all_gather example volume and order") {
  for (SchedulerKind sched : kBothSchedulers) {
    CommFabric f(2, 2, sched);
    f.run([&](RankCtx& ctx) {
      std::vector<double> vals(16, static_cast<double>(ctx.rank));
      Tensor out = all_gather(ctx, ctx.sp_group, Tensor::from({16}, vals), 0);
      REQUIRE(out.shape() == Shape{32});
      CHECK(out.value_at(0) == 0.0);
      CHECK(out.value_at(16) == 1.0);
    });
    for (int r = 0; r < 2; ++r) {
      CHECK(f.stats(r, Primitive::all_gather).calls == 1);
      CHECK(f.stats(r, Primitive::all_gather).bytes == 128);  // 16*8*(2-1)
    }
  }
}

TEST_CASE("all_gather rejects mismatched extents outside the axis") {
  CommFabric f(2, 2);
  CHECK_THROWS_WITH_AS(
      f.run([&](RankCtx& ctx) {
        Tensor x(Shape{2, ctx.rank == 0 ? 3 : 4}, 1.0);
        all_gather(ctx, ctx.sp_group, x, 0);
      }),
      doctest::Contains("extent mismatch"), ShapeError);
}

TEST_CASE("all_gather backward reduce-scatters") {
  CommFabric f(2, 2);
  std::vector<std::vector<double>> grads(2);
  f.run([&](RankCtx& ctx) {
    Tape tape;
    TapeScope ts(&tape);
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor out = all_gather(ctx, ctx.sp_group, x, 0);
    Tensor w = Tensor::from({4}, {1.0, 2.0, 3.0, 4.0});
    Tensor loss = sum_all(mul(out, scale(w, static_cast<double>(ctx.rank + 1))));
    tape.backward(loss);
    auto g = x.grad();
    grads[static_cast<size_t>(ctx.rank)] = {g[0], g[1]};
  });
  // rank0 slice gets w[0:2] scaled by 1 and 2 -> [3, 6]; rank1 slice w[2:4] -> [9, 12]
  CHECK(grads[0] == std::vector<double>{3, 6});
  CHECK(grads[1] == std::vector<double>{9, 12});
  CHECK(f.stats(0, Primitive::all_gather).calls == 2);
  CHECK(f.stats(0, Primitive::all_gather).bytes == 2 * 16);
}

TEST_CASE("ring shift moves payloads one hop and is periodic") {
  CommFabric f(4, 4);
  f.run([&](RankCtx& ctx) {
    Tensor p = Tensor::from({1}, {static_cast<double>(ctx.rank)});
    Tensor cur = p;
    // one shift: rank holds payload of rank-1
    cur = ring_shift(ctx, ctx.sp_group, cur);
    CHECK(cur.value_at(0) == static_cast<double>((ctx.rank + 3) % 4));
    if (ctx.rank == 2) CHECK(cur.value_at(0) == 1.0);
    for (int s = 1; s < 4; ++s) cur = ring_shift(ctx, ctx.sp_group, cur);
    CHECK(cur.value_at(0) == static_cast<double>(ctx.rank));
  });
  CHECK(f.stats(0, Primitive::p2p).calls == 4);
  CHECK(f.stats(0, Primitive::p2p).bytes == 4 * 8);
}

TEST_CASE("all_reduce sums with balanced pairing and counts bus volume") {
  for (SchedulerKind sched : kBothSchedulers) {
    CommFabric f(4, 4, sched);
    f.run([&](RankCtx& ctx) {
      Tensor x(Shape{10}, static_cast<double>(ctx.rank + 1));
      Tensor out = all_reduce_plain(ctx, ctx.sp_group, x);
      for (int64_t i = 0; i < 10; ++i) CHECK(out.value_at(i) == 10.0);
    });
    for (int r = 0; r < 4; ++r) {
      CHECK(f.stats(r, Primitive::all_reduce).bytes == 2 * 80 * 3 / 4);
    }
  }
}

TEST_CASE("reduction wiring decides the toy gradient") {
  // two ranks, w=1, x = 2 or 3, loss = 2*reduce(w*x) - 1
  for (SchedulerKind sched : kBothSchedulers) {
    for (bool grad_aware : {true, false}) {
      CommFabric f(2, 2, sched);
      std::vector<double> w_grad(2), loss_val(2);
      f.run([&](RankCtx& ctx) {
        Tape tape;
        TapeScope ts(&tape);
        Tensor w = Tensor::scalar(1.0, true);
        Tensor x = Tensor::scalar(ctx.rank == 0 ? 2.0 : 3.0);
        Tensor y = mul(w, x);
        Tensor red = grad_aware ? all_reduce_grad_aware(ctx, ctx.sp_group, y)
                                : all_reduce_plain(ctx, ctx.sp_group, y);
        Tensor loss = add_scalar(scale(red, 2.0), -1.0);
        tape.backward(loss);
        w_grad[static_cast<size_t>(ctx.rank)] = w.grad()[0];
        loss_val[static_cast<size_t>(ctx.rank)] = loss.scalar_value();
      });
      CHECK(loss_val[0] == 9.0);  // same forward either way
      CHECK(loss_val[1] == 9.0);
      if (grad_aware) {
        CHECK(w_grad[0] == 8.0);
        CHECK(w_grad[1] == 12.0);
      } else {
        CHECK(w_grad[0] == 4.0);
        CHECK(w_grad[1] == 6.0);
      }
    }
  }
}

TEST_CASE("toy gradient single device oracle") {
  Tape tape;
  TapeScope ts(&tape);
  Tensor w = Tensor::scalar(1.0, true);
  Tensor x = Tensor::scalar(5.0);
  Tensor loss = add_scalar(scale(mul(w, x), 2.0), -1.0);
  tape.backward(loss);
  CHECK(loss.scalar_value() == 9.0);
  CHECK(w.grad()[0] == 10.0);
}

TEST_CASE("grad aware over plain ratio is exactly sp") {
  for (int sp : {2, 4, 8}) {
    std::vector<double> aware(static_cast<size_t>(sp)), plain(static_cast<size_t>(sp));
    for (bool ga : {true, false}) {
      CommFabric f(sp, sp);
      f.run([&](RankCtx& ctx) {
        Tape tape;
        TapeScope ts(&tape);
        Tensor w = Tensor::scalar(1.0, true);
        Tensor x = Tensor::scalar(static_cast<double>(ctx.rank + 2));
        Tensor red = ga ? all_reduce_grad_aware(ctx, ctx.sp_group, mul(w, x))
                        : all_reduce_plain(ctx, ctx.sp_group, mul(w, x));
        tape.backward(scale(red, 2.0));
        (ga ? aware : plain)[static_cast<size_t>(ctx.rank)] = w.grad()[0];
      });
    }
    for (int r = 0; r < sp; ++r) {
      CHECK(aware[static_cast<size_t>(r)] == static_cast<double>(sp) * plain[static_cast<size_t>(r)]);
    }
  }
}

TEST_CASE("subgroup collectives route independently") {
  // 2x2 layout: inner groups {0,1},{2,3}, outer groups {0,2},{1,3}
  CommFabric f(4, 4);
  f.run([&](RankCtx& ctx) {
    CommGroup inner{ctx.rank < 2 ? std::vector<int>{0, 1} : std::vector<int>{2, 3}};
    CommGroup outer{ctx.rank % 2 == 0 ? std::vector<int>{0, 2} : std::vector<int>{1, 3}};
    Tensor mine = Tensor::from({1}, {static_cast<double>(ctx.rank)});
    Tensor in_sum = all_reduce_plain(ctx, inner, mine);
    Tensor out_sum = all_reduce_plain(ctx, outer, mine);
    double expected_inner = ctx.rank < 2 ? 1.0 : 5.0;
    double expected_outer = ctx.rank % 2 == 0 ? 2.0 : 4.0;
    CHECK(in_sum.value_at(0) == expected_inner);
    CHECK(out_sum.value_at(0) == expected_outer);
    // repeated collectives on the same groups stay matched
    Tensor again = all_reduce_plain(ctx, inner, in_sum);
    CHECK(again.value_at(0) == 2 * expected_inner);
  });
}

TEST_CASE("collective from a non member rank fails") {
  CommFabric f(2, 2);
  CHECK_THROWS_AS(f.run([&](RankCtx& ctx) {
                    CommGroup g{{0}};
                    Tensor x(Shape{1}, 1.0);
                    all_reduce_plain(ctx, g, x);  // rank 1 is not a member
                  }),
                  ConfigError);
}

TEST_CASE("rank errors surface from run") {
  for (SchedulerKind sched : kBothSchedulers) {
    CommFabric f(2, 2, sched);
    CHECK_THROWS_WITH_AS(f.run([&](RankCtx&) { throw ConfigError("boom"); }),
                         doctest::Contains("boom"), ConfigError);
  }
}

TEST_CASE("asymmetric failure aborts peers instead of hanging") {
  for (SchedulerKind sched : kBothSchedulers) {
    CommFabric f(2, 2, sched);
    CHECK_THROWS_WITH_AS(f.run([&](RankCtx& ctx) {
                           if (ctx.rank == 1) throw ConfigError("rank1 died");
                           Tensor x(Shape{1}, 1.0);
                           all_reduce_plain(ctx, ctx.sp_group, x);
                         }),
                         doctest::Contains("rank1 died"), ConfigError);
  }
}

TEST_CASE("count and exact sum reductions") {
  CommFabric f(4, 4);
  f.run([&](RankCtx& ctx) {
    int64_t total = all_reduce_count(ctx, ctx.sp_group, ctx.rank + 1);
    CHECK(total == 10);
    ExactSum local;
    local.add(0.1 * static_cast<double>(ctx.rank));
    local.add(1e100);
    local.add(-1e100);
    ExactSum merged = exact_sum_all_reduce(ctx, ctx.sp_group, local);
    ExactSum expect;
    for (int r = 0; r < 4; ++r) {
      expect.add(0.1 * r);
      expect.add(1e100);
      expect.add(-1e100);
    }
    CHECK(merged.round_to_double() == expect.round_to_double());
  });
  // scalar accounting: both reduction calls count 2*8*(g-1)/g bytes
  CHECK(f.stats(2, Primitive::all_reduce).calls == 2);
  CHECK(f.stats(2, Primitive::all_reduce).bytes == 2 * 12);
}

TEST_CASE("broadcast replicates the root payload") {
  CommFabric f(4, 4);
  std::vector<std::vector<uint8_t>> got(4);
  f.run([&](RankCtx& ctx) {
    std::vector<uint8_t> mask;
    if (ctx.rank == 0) mask = {1, 1, 0, 1};
    got[static_cast<size_t>(ctx.rank)] = broadcast_bytes(ctx, ctx.sp_group, mask, 0);
  });
  for (int r = 0; r < 4; ++r) {
    CHECK(got[static_cast<size_t>(r)] == std::vector<uint8_t>{1, 1, 0, 1});
    CHECK(f.stats(r, Primitive::broadcast).calls == 1);
    CHECK(f.stats(r, Primitive::broadcast).bytes == 4 * 3 / 4);
  }
}

TEST_CASE("group of one is an identity with zero bytes") {
  CommFabric f(1, 1);
  f.run([&](RankCtx& ctx) {
    Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor a = all_to_all(ctx, ctx.sp_group, x, 0, 1);
    Tensor b = all_gather(ctx, ctx.sp_group, x, 0);
    Tensor c = all_reduce_plain(ctx, ctx.sp_group, x);
    Tensor d = ring_shift(ctx, ctx.sp_group, x);
    for (int64_t i = 0; i < 4; ++i) {
      CHECK(a.value_at(i) == x.value_at(i));
      CHECK(b.value_at(i) == x.value_at(i));
      CHECK(c.value_at(i) == x.value_at(i));
      CHECK(d.value_at(i) == x.value_at(i));
    }
  });
  CHECK(f.total_bytes(0) == 0);
  CHECK(f.stats(0, Primitive::all_to_all).calls == 1);
}

TEST_CASE("schedulers produce identical results and counters") {
  std::vector<std::string> csv(2);
  std::vector<std::vector<double>> outs(2);
  for (int k = 0; k < 2; ++k) {
    CommFabric f(4, 4, kBothSchedulers[k]);
    outs[static_cast<size_t>(k)].resize(4);
    f.run([&](RankCtx& ctx) {
      Rng rng(7 + static_cast<uint64_t>(ctx.rank));
      std::vector<double> vals(256);
      for (double& v : vals) v = rng.uniform_range(-1, 1);
      Tensor x = Tensor::from({4, 4, 8, 2}, vals);
      Tensor t = all_to_all(ctx, ctx.sp_group, x, 2, 1);
      Tensor r = all_reduce_plain(ctx, ctx.sp_group, t);
      Tensor s = ring_shift(ctx, ctx.sp_group, r);
      double acc = 0;
      for (int64_t i = 0; i < s.numel(); ++i) acc += s.value_at(i);
      outs[static_cast<size_t>(k)][static_cast<size_t>(ctx.rank)] = acc;
    });
    std::ostringstream os;
    f.write_stats_csv(os, "mixed");
    csv[static_cast<size_t>(k)] = os.str();
  }
  CHECK(outs[0] == outs[1]);
  CHECK(csv[0] == csv[1]);
  CHECK(csv[0].find("engine,rank,primitive,calls,bytes") == 0);
}

TEST_CASE("stats csv is stable across reruns") {
  auto run_once = [] {
    CommFabric f(2, 2, SchedulerKind::lockstep);
    f.run([&](RankCtx& ctx) {
      Tensor x(Shape{8, 2}, 1.0);
      all_gather(ctx, ctx.sp_group, x, 0);
      all_reduce_plain(ctx, ctx.sp_group, x);
    });
    std::ostringstream os;
    f.write_stats_csv(os, "probe");
    return os.str();
  };
  CHECK(run_once() == run_once());
}
