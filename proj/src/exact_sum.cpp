#include "seqpar/exact_sum.hpp"

#include <cmath>
#include <stdexcept>

namespace seqpar {

namespace {

// Adds chunk << (64*limb) into x with carry propagation.
void add_chunk(std::array<uint64_t, ExactSum::kLimbs>& x, int limb, uint64_t chunk) {
  if (chunk == 0) return;
  unsigned __int128 acc = static_cast<unsigned __int128>(x[static_cast<size_t>(limb)]) + chunk;
  x[static_cast<size_t>(limb)] = static_cast<uint64_t>(acc);
  uint64_t carry = static_cast<uint64_t>(acc >> 64);
  for (int i = limb + 1; carry && i < ExactSum::kLimbs; ++i) {
    acc = static_cast<unsigned __int128>(x[static_cast<size_t>(i)]) + carry;
    x[static_cast<size_t>(i)] = static_cast<uint64_t>(acc);
    carry = static_cast<uint64_t>(acc >> 64);
  }
}

void sub_chunk(std::array<uint64_t, ExactSum::kLimbs>& x, int limb, uint64_t chunk) {
  if (chunk == 0) return;
  uint64_t before = x[static_cast<size_t>(limb)];
  x[static_cast<size_t>(limb)] = before - chunk;
  bool borrow = before < chunk;
  for (int i = limb + 1; borrow && i < ExactSum::kLimbs; ++i) {
    borrow = x[static_cast<size_t>(i)] == 0;
    x[static_cast<size_t>(i)] -= 1;
  }
}

}  // namespace

void ExactSum::add(double v) {
  if (!std::isfinite(v)) throw std::invalid_argument("ExactSum requires finite values");
  if (v == 0.0) return;
  int e;
  double fr = std::frexp(std::fabs(v), &e);
  // |v| = m * 2^(e-53) with m an integer in [2^52, 2^53)
  uint64_t m = static_cast<uint64_t>(std::ldexp(fr, 53));
  int beta = e - 53 + 1074;  // bit offset of m's LSB in 2^-1074 units
  if (beta < 0) {
    m >>= -beta;  // subnormals: trailing zeros make this exact
    beta = 0;
  }
  int limb = beta / 64, off = beta % 64;
  uint64_t lo = off ? (m << off) : m;
  uint64_t hi = off ? (m >> (64 - off)) : 0;
  if (v > 0) {
    add_chunk(limbs_, limb, lo);
    add_chunk(limbs_, limb + 1, hi);
  } else {
    sub_chunk(limbs_, limb, lo);
    sub_chunk(limbs_, limb + 1, hi);
  }
}

void ExactSum::merge(const ExactSum& other) {
  uint64_t carry = 0;
  for (int i = 0; i < kLimbs; ++i) {
    unsigned __int128 acc = static_cast<unsigned __int128>(limbs_[static_cast<size_t>(i)]) +
                            other.limbs_[static_cast<size_t>(i)] + carry;
    limbs_[static_cast<size_t>(i)] = static_cast<uint64_t>(acc);
    carry = static_cast<uint64_t>(acc >> 64);
  }
}

bool ExactSum::is_zero() const {
  for (uint64_t l : limbs_) {
    if (l) return false;
  }
  return true;
}

ExactSum ExactSum::from_limbs(const std::array<uint64_t, kLimbs>& limbs) {
  ExactSum s;
  s.limbs_ = limbs;
  return s;
}

double ExactSum::round_to_double() const {
  bool negative = (limbs_[kLimbs - 1] >> 63) != 0;
  std::array<uint64_t, kLimbs> mag = limbs_;
  if (negative) {
    for (auto& l : mag) l = ~l;
    add_chunk(mag, 0, 1);
  }
  int high = -1;
  for (int i = kLimbs - 1; i >= 0 && high < 0; --i) {
    if (mag[static_cast<size_t>(i)]) {
      high = i * 64 + 63 - __builtin_clzll(mag[static_cast<size_t>(i)]);
    }
  }
  if (high < 0) return 0.0;

  auto get_bit = [&](int pos) -> int {
    if (pos < 0) return 0;
    return static_cast<int>((mag[static_cast<size_t>(pos / 64)] >> (pos % 64)) & 1u);
  };
  if (high <= 52) {
    // fits in one mantissa exactly
    uint64_t m = 0;
    for (int b = high; b >= 0; --b) m = (m << 1) | static_cast<uint64_t>(get_bit(b));
    double v = std::ldexp(static_cast<double>(m), -1074);
    return negative ? -v : v;
  }
  uint64_t mant = 0;
  for (int b = high; b >= high - 52; --b) mant = (mant << 1) | static_cast<uint64_t>(get_bit(b));
  int round_bit = get_bit(high - 53);
  bool sticky = false;
  for (int b = high - 54; b >= 0 && !sticky; --b) sticky = get_bit(b) != 0;
  int exp2 = high - 52 - 1074;
  if (round_bit && (sticky || (mant & 1))) {
    mant += 1;
    if (mant == (1ull << 53)) {
      mant >>= 1;
      exp2 += 1;
    }
  }
  double v = std::ldexp(static_cast<double>(mant), exp2);
  return negative ? -v : v;
}

}  // namespace seqpar
