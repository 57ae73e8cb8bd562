#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "seqpar/exact_sum.hpp"
#include "seqpar/tensor.hpp"

using namespace seqpar;

namespace {

double eval_loss(const std::function<Tensor()>& make_loss) {
  NoGradScope ng;
  return make_loss().scalar_value();
}

// Central differences at h=1e-5 against the tape's analytic gradients.
void fd_check(std::vector<Tensor> params, const std::function<Tensor()>& make_loss,
              double rtol = 1e-6) {
  Tape tape;
  {
    TapeScope ts(&tape);
    Tensor loss = make_loss();
    tape.backward(loss);
  }
  const double h = 1e-5;
  for (Tensor& p : params) {
    REQUIRE(p.has_grad());
    for (int64_t i = 0; i < p.numel(); ++i) {
      double orig = p.raw_data()[static_cast<size_t>(i)];
      p.raw_data()[static_cast<size_t>(i)] = orig + h;
      double fp = eval_loss(make_loss);
      p.raw_data()[static_cast<size_t>(i)] = orig - h;
      double fm = eval_loss(make_loss);
      p.raw_data()[static_cast<size_t>(i)] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double an = p.impl()->grad[static_cast<size_t>(i)];
      double tol = rtol * std::max({1.0, std::fabs(an), std::fabs(fd)});
      CHECK(std::fabs(an - fd) <= tol);
    }
  }
}

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::vector<double> data(static_cast<size_t>(numel_of(shape)));
  for (double& v : data) v = rng.uniform_range(-2.0, 2.0);
  return Tensor::from(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("matmul small example") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 1}, {5, 6});
  Tensor y = matmul(a, b);
  CHECK(y.shape() == Shape{2, 1});
  CHECK(y.value_at(0) == 17.0);
  CHECK(y.value_at(1) == 39.0);
}

TEST_CASE("matmul shape errors name both operands") {
  Tensor a = Tensor::from({2, 3}, std::vector<double>(6, 1.0));
  Tensor b = Tensor::from({2, 2}, std::vector<double>(4, 1.0));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), ShapeError);
  Tensor c = Tensor::from({3}, {1, 2, 3});
  CHECK_THROWS_AS(matmul(a, c), ShapeError);
}

TEST_CASE("matmul batched against flat loops") {
  Rng rng(7);
  Tensor a = random_tensor({2, 3, 4}, rng, false);
  Tensor b = random_tensor({2, 4, 5}, rng, false);
  Tensor y = matmul(a, b);
  REQUIRE(y.shape() == Shape{2, 3, 5});
  for (int64_t t = 0; t < 2; ++t) {
    for (int64_t i = 0; i < 3; ++i) {
      for (int64_t j = 0; j < 5; ++j) {
        double acc = 0;
        for (int64_t k = 0; k < 4; ++k) {
          acc += a.value_at(t * 12 + i * 4 + k) * b.value_at(t * 20 + k * 5 + j);
        }
        CHECK(y.value_at(t * 15 + i * 5 + j) == doctest::Approx(acc).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("softmax handles large offsets") {
  Tensor x = Tensor::from({2}, {1000.0, 1000.0 + std::log(2.0)});
  Tensor y = stable_softmax_lastdim(x);
  CHECK(std::fabs(y.value_at(0) - 1.0 / 3.0) < 1e-12);
  CHECK(std::fabs(y.value_at(1) - 2.0 / 3.0) < 1e-12);
}

TEST_CASE("softmax is shift invariant") {
  Rng rng(3);
  Tensor x = random_tensor({3, 5}, rng, false);
  Tensor y1 = stable_softmax_lastdim(x);
  std::vector<double> shifted(x.values().begin(), x.values().end());
  for (double& v : shifted) v += 123.25;
  Tensor y2 = stable_softmax_lastdim(Tensor::from({3, 5}, std::move(shifted)));
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(std::fabs(y1.value_at(i) - y2.value_at(i)) < 1e-12);
  }
}

TEST_CASE("softmax fully masked row yields zeros and sets flag") {
  const double ninf = -std::numeric_limits<double>::infinity();
  Tensor x = Tensor::from({2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor mask = Tensor::from({2, 2}, {0.0, 0.0, ninf, ninf});
  bool flagged = false;
  Tensor y = stable_softmax_lastdim(x, &mask, &flagged);
  CHECK(flagged);
  CHECK(y.value_at(2) == 0.0);
  CHECK(y.value_at(3) == 0.0);
  CHECK(y.value_at(0) + y.value_at(1) == doctest::Approx(1.0));
}

TEST_CASE("softmax mask broadcasts by trailing dims") {
  const double ninf = -std::numeric_limits<double>::infinity();
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor mask = Tensor::from({3}, {0.0, ninf, 0.0});
  Tensor y = stable_softmax_lastdim(x, &mask);
  CHECK(y.value_at(1) == 0.0);
  CHECK(y.value_at(4) == 0.0);
  CHECK(y.value_at(0) + y.value_at(2) == doctest::Approx(1.0));
}

TEST_CASE("rope depends only on relative position for dot products") {
  Rng rng(11);
  int64_t dim = 8;
  Tensor q = random_tensor({1, 1, 1, dim}, rng, false);
  Tensor k = random_tensor({1, 1, 1, dim}, rng, false);
  auto dot_at = [&](int64_t pm, int64_t pn) {
    std::vector<int64_t> pq{pm}, pk{pn};
    Tensor qr = rope_apply(q, pq);
    Tensor kr = rope_apply(k, pk);
    double acc = 0;
    for (int64_t i = 0; i < dim; ++i) acc += qr.value_at(i) * kr.value_at(i);
    return acc;
  };
  double d1 = dot_at(3, 1);
  double d2 = dot_at(10, 8);
  double d3 = dot_at(103, 101);
  CHECK(std::fabs(d1 - d2) < 1e-10);
  CHECK(std::fabs(d1 - d3) < 1e-10);
}

TEST_CASE("rope with negated positions inverts the rotation") {
  Rng rng(13);
  Tensor x = random_tensor({1, 4, 2, 6}, rng, false);
  std::vector<int64_t> pos{0, 5, 9, 2}, neg{0, -5, -9, -2};
  Tensor once = rope_apply(x, pos);
  Tensor back = rope_apply(once, neg);
  for (int64_t i = 0; i < x.numel(); ++i) {
    CHECK(std::fabs(back.value_at(i) - x.value_at(i)) < 1e-12);
  }
}

TEST_CASE("rope preserves per-position norms") {
  Rng rng(17);
  Tensor x = random_tensor({1, 3, 2, 8}, rng, false);
  std::vector<int64_t> pos{7, 21, 2};
  Tensor y = rope_apply(x, pos);
  for (int64_t t = 0; t < 3; ++t) {
    for (int64_t h = 0; h < 2; ++h) {
      double nx = 0, ny = 0;
      for (int64_t j = 0; j < 8; ++j) {
        int64_t idx = (t * 2 + h) * 8 + j;
        nx += x.value_at(idx) * x.value_at(idx);
        ny += y.value_at(idx) * y.value_at(idx);
      }
      CHECK(std::fabs(nx - ny) < 1e-10);
    }
  }
}

TEST_CASE("rope validates shape and position count") {
  Rng rng(19);
  Tensor bad_dim = random_tensor({1, 2, 1, 5}, rng, false);
  std::vector<int64_t> pos{0, 1};
  CHECK_THROWS_AS(rope_apply(bad_dim, pos), ShapeError);
  Tensor x = random_tensor({1, 4, 1, 4}, rng, false);
  CHECK_THROWS_AS(rope_apply(x, pos), ShapeError);
}

TEST_CASE("embedding rejects out of range ids") {
  Tensor table = Tensor::from({4, 2}, {0, 1, 2, 3, 4, 5, 6, 7});
  std::vector<int64_t> ok{3, 0};
  Tensor y = embedding(table, ok);
  CHECK(y.value_at(0) == 6.0);
  CHECK(y.value_at(3) == 1.0);
  std::vector<int64_t> bad{4};
  CHECK_THROWS_AS(embedding(table, bad), ShapeError);
  std::vector<int64_t> neg{-1};
  CHECK_THROWS_AS(embedding(table, neg), ShapeError);
}

TEST_CASE("slice pad and repeat round trips") {
  Rng rng(23);
  Tensor x = random_tensor({1, 2, 3, 2}, rng, false);
  Tensor padded = pad_axis_zeros(x, 2, 2);
  CHECK(padded.shape() == Shape{1, 2, 5, 2});
  Tensor back = slice_axis(padded, 2, 0, 3);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(back.value_at(i) == x.value_at(i));
  CHECK(padded.value_at(padded.numel() - 1) == 0.0);

  Tensor rep = repeat_heads(x, 2);
  CHECK(rep.shape() == Shape{1, 2, 6, 2});
  // head h of the output reads input head h/2
  for (int64_t t = 0; t < 2; ++t) {
    for (int64_t h = 0; h < 6; ++h) {
      for (int64_t d = 0; d < 2; ++d) {
        CHECK(rep.value_at((t * 6 + h) * 2 + d) == x.value_at((t * 3 + h / 2) * 2 + d));
      }
    }
  }
}

TEST_CASE("backward errors") {
  Tape tape;
  TapeScope ts(&tape);
  Tensor w = Tensor::from({2}, {1.0, 2.0}, true);
  Tensor loss = sum_all(mul(w, w));
  SUBCASE("non scalar loss") {
    CHECK_THROWS_AS(tape.backward(mul(w, w)), ShapeError);
  }
  SUBCASE("double backward without reset") {
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), StateError);
    tape.reset();
  }
  SUBCASE("disconnected loss") {
    Tensor stray = Tensor::scalar(4.0);
    CHECK_THROWS_AS(tape.backward(stray), StateError);
  }
}

TEST_CASE("backward with no active tape throws") {
  Tensor w = Tensor::from({}, {2.0}, true);
  CHECK_THROWS_AS(backward(w), StateError);
}

TEST_CASE("gradients accumulate across tapes until cleared") {
  Tensor w = Tensor::from({}, {3.0}, true);
  for (int rep = 0; rep < 2; ++rep) {
    Tape tape;
    TapeScope ts(&tape);
    Tensor loss = mul(w, w);
    tape.backward(loss);
  }
  CHECK(w.grad()[0] == doctest::Approx(12.0));
  w.zero_grad();
  CHECK_THROWS_AS(static_cast<void>(w.grad()), StateError);
}

TEST_CASE("no tape means no recording") {
  Tensor w = Tensor::from({}, {3.0}, true);
  Tensor y = mul(w, w);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite differences validate elementwise ops") {
  Rng rng(29);
  Tensor a = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2, 3}, rng);
  fd_check({a, b}, [&] {
    return sum_all(mul(silu(a), add(softplus(b), scale(sub(a, b), 0.5))));
  });
}

TEST_CASE("finite differences validate matmul chain") {
  Rng rng(31);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  Tensor c = random_tensor({3, 2}, rng);
  fd_check({a, b, c}, [&] { return sum_all(mul(matmul(a, b), c)); });
}

TEST_CASE("finite differences validate softmax with mask") {
  Rng rng(37);
  const double ninf = -std::numeric_limits<double>::infinity();
  Tensor x = random_tensor({2, 4}, rng);
  Tensor mask = Tensor::from({2, 4}, {0, 0, ninf, 0, 0, 0, 0, ninf});
  Tensor w = random_tensor({2, 4}, rng, false);
  fd_check({x}, [&] { return sum_all(mul(stable_softmax_lastdim(x, &mask), w)); });
}

TEST_CASE("finite differences validate rms_norm") {
  Rng rng(41);
  Tensor x = random_tensor({3, 5}, rng);
  Tensor w = random_tensor({5}, rng);
  fd_check({x, w}, [&] { return sum_all(silu(rms_norm(x, w, 1e-6))); });
}

TEST_CASE("finite differences validate rope") {
  Rng rng(43);
  Tensor x = random_tensor({1, 3, 2, 4}, rng);
  Tensor w = random_tensor({1, 3, 2, 4}, rng, false);
  std::vector<int64_t> pos{4, 0, 11};
  fd_check({x}, [&] { return sum_all(mul(rope_apply(x, pos), w)); });
}

TEST_CASE("finite differences validate embedding and reshape") {
  Rng rng(47);
  Tensor table = random_tensor({6, 4}, rng);
  std::vector<int64_t> ids{1, 5, 1, 0};
  Tensor w = random_tensor({2, 8}, rng, false);
  fd_check({table}, [&] {
    return sum_all(mul(reshape(embedding(table, ids), {2, 8}), w));
  });
}

TEST_CASE("finite differences validate slice pad repeat") {
  Rng rng(53);
  Tensor x = random_tensor({1, 2, 3, 2}, rng);
  Tensor w = random_tensor({1, 2, 10, 2}, rng, false);
  fd_check({x}, [&] {
    Tensor padded = pad_axis_zeros(x, 2, 2);
    Tensor rep = repeat_heads(slice_axis(padded, 2, 0, 5), 2);
    return sum_all(mul(rep, w));
  });
}

TEST_CASE("rng streams are reproducible") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(123), d(124);
  CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("rng normal moments are sane") {
  Rng rng(99);
  double mean = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    double v = rng.normal(1.0);
    mean += v;
    sq += v * v;
  }
  mean /= n;
  double var = sq / n - mean * mean;
  CHECK(std::fabs(mean) < 0.05);
  CHECK(std::fabs(var - 1.0) < 0.05);
}

TEST_CASE("exact sum is order independent") {
  std::mt19937_64 gen(5);
  std::vector<double> vals;
  for (int i = 0; i < 500; ++i) {
    double mag = std::ldexp(static_cast<double>(gen() >> 11) / 9007199254740992.0,
                            static_cast<int>(gen() % 120) - 60);
    vals.push_back((gen() & 1) ? mag : -mag);
  }
  ExactSum fwd;
  for (double v : vals) fwd.add(v);
  std::shuffle(vals.begin(), vals.end(), gen);
  ExactSum shuf;
  for (double v : vals) shuf.add(v);
  CHECK(fwd.round_to_double() == shuf.round_to_double());
  CHECK(fwd.limbs() == shuf.limbs());
}

TEST_CASE("exact sum matches ieee on single adds") {
  std::mt19937_64 gen(6);
  for (int i = 0; i < 200; ++i) {
    double a = std::ldexp(static_cast<double>(gen() >> 11) / 9007199254740992.0,
                          static_cast<int>(gen() % 40) - 20);
    double b = std::ldexp(static_cast<double>(gen() >> 11) / 9007199254740992.0,
                          static_cast<int>(gen() % 40) - 20);
    if (gen() & 1) a = -a;
    if (gen() & 1) b = -b;
    ExactSum s;
    s.add(a);
    s.add(b);
    CHECK(s.round_to_double() == a + b);  // a+b is correctly rounded by ieee
    ExactSum single;
    single.add(a);
    CHECK(single.round_to_double() == a);
  }
}

TEST_CASE("exact sum survives catastrophic cancellation") {
  ExactSum s;
  s.add(1e300);
  s.add(1e-300);
  s.add(-1e300);
  CHECK(s.round_to_double() == 1e-300);
  ExactSum z;
  z.add(3.5);
  z.add(-3.5);
  CHECK(z.is_zero());
  CHECK(z.round_to_double() == 0.0);
}

TEST_CASE("exact sum merge equals pooled accumulation") {
  std::mt19937_64 gen(8);
  ExactSum a, b, pooled;
  for (int i = 0; i < 100; ++i) {
    double v = std::ldexp(static_cast<double>(gen() >> 11) / 9007199254740992.0,
                          static_cast<int>(gen() % 80) - 40) *
               ((gen() & 1) ? 1.0 : -1.0);
    if (i % 2) {
      a.add(v);
    } else {
      b.add(v);
    }
    pooled.add(v);
  }
  a.merge(b);
  CHECK(a.limbs() == pooled.limbs());
  CHECK(a.round_to_double() == pooled.round_to_double());
}

TEST_CASE("exact sum handles subnormals") {
  double tiny = 4.9406564584124654e-324;  // smallest positive subnormal
  ExactSum s;
  for (int i = 0; i < 3; ++i) s.add(tiny);
  CHECK(s.round_to_double() == 3 * tiny);
  s.add(-tiny);
  CHECK(s.round_to_double() == 2 * tiny);
}

TEST_CASE("exact sum rejects non finite input") {
  ExactSum s;
  CHECK_THROWS_AS(s.add(std::numeric_limits<double>::infinity()), std::invalid_argument);
  CHECK_THROWS_AS(s.add(std::nan("")), std::invalid_argument);
}
