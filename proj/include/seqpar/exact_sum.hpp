#pragma once

#include <array>
#include <cstdint>

namespace seqpar {

// Exact accumulator for sums of doubles: a 2240-bit two's-complement
// fixed-point integer in units of 2^-1074, wide enough for any finite
// double plus carry headroom. Addition is exact, so the result is
// independent of summation order; merging two accumulators is limbwise
// addition. Used by the loss reductions so sharded and single-device
// sums round identically.
class ExactSum {
 public:
  static constexpr int kLimbs = 35;

  void add(double v);
  void merge(const ExactSum& other);
  double round_to_double() const;  // round-to-nearest-even
  bool is_zero() const;

  const std::array<uint64_t, kLimbs>& limbs() const { return limbs_; }
  static ExactSum from_limbs(const std::array<uint64_t, kLimbs>& limbs);

 private:
  std::array<uint64_t, kLimbs> limbs_{};  // zero-initialized
};

}  // namespace seqpar
