#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "seqpar/comm.hpp"
#include "seqpar/tensor.hpp"

namespace seqpar {

enum class SplitMode { naive, zigzag, usp };
const char* split_mode_name(SplitMode m);
SplitMode split_mode_from_string(const std::string& s);

// Which global sequence positions each group index owns, in local order.
// naive: contiguous blocks. zigzag: 2*sp chunks, index i owning chunks i and
// 2*sp-1-i so causal work balances. usp: an outer zigzag over the ring
// degree refined by an inner contiguous split over the ulysses degree.
struct ShardLayout {
  SplitMode mode = SplitMode::naive;
  int sp = 1;
  int64_t global_len = 0;
  int u_degree = 0;  // usp only
  int r_degree = 0;  // usp only
  std::vector<std::vector<int64_t>> owned;

  static ShardLayout make_naive(int64_t len, int sp);
  static ShardLayout make_zigzag(int64_t len, int sp);  // needs 2*sp | len
  static ShardLayout make_usp(int64_t len, int ulysses_degree, int ring_degree);

  int64_t local_len() const { return global_len / sp; }
  const std::vector<int64_t>& positions_of(int index) const;
  bool operator==(const ShardLayout& other) const;
};

// Number of (query, key) pairs a causal mask admits for the owned queries:
// position p attends to p+1 keys.
int64_t causal_pair_count(const ShardLayout& layout, int index);

template <typename T>
std::vector<T> shard(const std::vector<T>& full, const ShardLayout& layout, int index) {
  if (static_cast<int64_t>(full.size()) != layout.global_len) {
    throw ShapeError("shard: sequence length " + std::to_string(full.size()) +
                     " does not match layout length " + std::to_string(layout.global_len));
  }
  const auto& pos = layout.positions_of(index);
  std::vector<T> out;
  out.reserve(pos.size());
  for (int64_t p : pos) out.push_back(full[static_cast<size_t>(p)]);
  return out;
}

// Inverse of shard. Shards are tagged by group index; missing, duplicate,
// or wrongly sized shards are errors.
template <typename T>
std::vector<T> gather_shards(const std::vector<std::pair<int, std::vector<T>>>& shards,
                             const ShardLayout& layout) {
  if (static_cast<int>(shards.size()) != layout.sp) {
    throw ShapeError("gather: got " + std::to_string(shards.size()) + " shards for sp " +
                     std::to_string(layout.sp));
  }
  std::vector<char> seen(static_cast<size_t>(layout.sp), 0);
  std::vector<T> out(static_cast<size_t>(layout.global_len));
  for (const auto& [index, vals] : shards) {
    if (index < 0 || index >= layout.sp) throw ShapeError("gather: shard index out of range");
    if (seen[static_cast<size_t>(index)]) {
      throw ShapeError("gather: duplicate shard for index " + std::to_string(index));
    }
    seen[static_cast<size_t>(index)] = 1;
    const auto& pos = layout.positions_of(index);
    if (vals.size() != pos.size()) {
      throw ShapeError("gather: shard " + std::to_string(index) + " has " +
                       std::to_string(vals.size()) + " items, expected " +
                       std::to_string(pos.size()));
    }
    for (size_t i = 0; i < pos.size(); ++i) out[static_cast<size_t>(pos[i])] = vals[i];
  }
  return out;
}

// Row-granular variants for [L, width] activations stored flat.
std::vector<double> shard_rows(const std::vector<double>& full, int64_t width,
                               const ShardLayout& layout, int index);
std::vector<double> gather_rows(const std::vector<std::vector<double>>& shards_by_index,
                                int64_t width, const ShardLayout& layout);

// Global position ids for a shard; the model must RoPE with these.
std::vector<int64_t> make_position_ids(const ShardLayout& layout, int index);

constexpr int64_t kIgnoreLabel = -100;
constexpr int64_t kNoImage = -1;
constexpr int64_t kNoSegment = -1;

struct TrainBatch {
  std::vector<int64_t> tokens;
  std::vector<int64_t> labels;        // kIgnoreLabel marks unsupervised slots
  std::vector<int64_t> position_ids;  // [0..len) before sharding
  std::vector<int64_t> segment_ids;   // optional (empty when absent)
  std::vector<int64_t> image_map;     // optional; kNoImage for text positions

  int64_t len() const { return static_cast<int64_t>(tokens.size()); }
  void validate() const;
};

// Padded length: the smallest multiple of 8*sp that fits len, or cutoff_len
// itself when pad_to_cutoff is set. cutoff_len bounds the result either way.
int64_t pad_length(int64_t len, int sp, int64_t cutoff_len, bool pad_to_cutoff = false);

TrainBatch pad_batch(const TrainBatch& batch, int sp, int64_t pad_token, int64_t cutoff_len,
                     bool pad_to_cutoff = false);

// Multimodal position map: kNoImage for text, else an index into the visual
// patch sequence. Sharding keeps entries aligned with their positions.
std::vector<int64_t> split_position_map(const std::vector<int64_t>& image_map,
                                        const ShardLayout& layout, int index);

// Root (group index 0) supplies the packing mask; every rank returns the
// full mask. Counted as a broadcast.
std::vector<uint8_t> replicate_packing_mask(RankCtx& ctx, const CommGroup& group,
                                            const std::vector<uint8_t>& mask);

// One JSON object per line with fields tokens, labels, and optional
// segment_ids / image_map.
std::vector<TrainBatch> load_batches_jsonl(const std::string& path);
void save_batches_jsonl(const std::string& path, const std::vector<TrainBatch>& batches);

}  // namespace seqpar
