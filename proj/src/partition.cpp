#include "seqpar/partition.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace seqpar {

const char* split_mode_name(SplitMode m) {
  switch (m) {
    case SplitMode::naive: return "naive";
    case SplitMode::zigzag: return "zigzag";
    case SplitMode::usp: return "usp";
  }
  return "?";
}

SplitMode split_mode_from_string(const std::string& s) {
  if (s == "naive") return SplitMode::naive;
  if (s == "zigzag") return SplitMode::zigzag;
  if (s == "usp") return SplitMode::usp;
  throw ConfigError("unknown split mode '" + s + "'");
}

static void check_divisible(int64_t len, int sp, const char* what) {
  if (sp <= 0) throw ConfigError("sp must be positive");
  if (len <= 0) throw ConfigError("sequence length must be positive");
  if (len % sp != 0) {
    throw ConfigError(std::string(what) + ": length " + std::to_string(len) +
                      " not divisible by sp " + std::to_string(sp));
  }
}

ShardLayout ShardLayout::make_naive(int64_t len, int sp) {
  check_divisible(len, sp, "naive split");
  ShardLayout out;
  out.mode = SplitMode::naive;
  out.sp = sp;
  out.global_len = len;
  const int64_t local = len / sp;
  out.owned.resize(static_cast<size_t>(sp));
  for (int i = 0; i < sp; ++i) {
    auto& pos = out.owned[static_cast<size_t>(i)];
    pos.resize(static_cast<size_t>(local));
    std::iota(pos.begin(), pos.end(), static_cast<int64_t>(i) * local);
  }
  return out;
}

ShardLayout ShardLayout::make_zigzag(int64_t len, int sp) {
  check_divisible(len, sp, "zigzag split");
  if (len % (2 * static_cast<int64_t>(sp)) != 0) {
    throw ConfigError("zigzag split: length " + std::to_string(len) +
                      " not divisible by 2*sp = " + std::to_string(2 * sp));
  }
  ShardLayout out;
  out.mode = SplitMode::zigzag;
  out.sp = sp;
  out.global_len = len;
  const int64_t chunk = len / (2 * sp);
  out.owned.resize(static_cast<size_t>(sp));
  for (int i = 0; i < sp; ++i) {
    auto& pos = out.owned[static_cast<size_t>(i)];
    pos.reserve(static_cast<size_t>(2 * chunk));
    for (int64_t c : {static_cast<int64_t>(i), static_cast<int64_t>(2 * sp - 1 - i)}) {
      for (int64_t k = 0; k < chunk; ++k) pos.push_back(c * chunk + k);
    }
  }
  return out;
}

ShardLayout ShardLayout::make_usp(int64_t len, int ulysses_degree, int ring_degree) {
  if (ulysses_degree <= 0 || ring_degree <= 0) {
    throw ConfigError("usp split: degrees must be positive");
  }
  // Outer zigzag over the ring degree, each block cut contiguously for the
  // ulysses degree. Rank index = ring_index * u + ulysses_index.
  ShardLayout outer = make_zigzag(len, ring_degree);
  const int64_t block = len / ring_degree;
  if (block % ulysses_degree != 0) {
    throw ConfigError("usp split: ring block " + std::to_string(block) +
                      " not divisible by ulysses degree " + std::to_string(ulysses_degree));
  }
  ShardLayout out;
  out.mode = SplitMode::usp;
  out.sp = ulysses_degree * ring_degree;
  out.global_len = len;
  out.u_degree = ulysses_degree;
  out.r_degree = ring_degree;
  const int64_t local = block / ulysses_degree;
  out.owned.resize(static_cast<size_t>(out.sp));
  for (int rho = 0; rho < ring_degree; ++rho) {
    const auto& blk = outer.owned[static_cast<size_t>(rho)];
    for (int iota = 0; iota < ulysses_degree; ++iota) {
      auto& pos = out.owned[static_cast<size_t>(rho * ulysses_degree + iota)];
      pos.assign(blk.begin() + iota * local, blk.begin() + (iota + 1) * local);
    }
  }
  return out;
}

const std::vector<int64_t>& ShardLayout::positions_of(int index) const {
  if (index < 0 || index >= sp) {
    throw ConfigError("layout index " + std::to_string(index) + " out of range for sp " +
                      std::to_string(sp));
  }
  return owned[static_cast<size_t>(index)];
}

bool ShardLayout::operator==(const ShardLayout& other) const {
  return mode == other.mode && sp == other.sp && global_len == other.global_len &&
         owned == other.owned;
}

int64_t causal_pair_count(const ShardLayout& layout, int index) {
  int64_t total = 0;
  for (int64_t p : layout.positions_of(index)) total += p + 1;
  return total;
}

std::vector<double> shard_rows(const std::vector<double>& full, int64_t width,
                               const ShardLayout& layout, int index) {
  if (width <= 0) throw ShapeError("shard_rows: width must be positive");
  if (static_cast<int64_t>(full.size()) != layout.global_len * width) {
    throw ShapeError("shard_rows: buffer size does not match layout");
  }
  const auto& pos = layout.positions_of(index);
  std::vector<double> out;
  out.reserve(pos.size() * static_cast<size_t>(width));
  for (int64_t p : pos) {
    const double* row = full.data() + p * width;
    out.insert(out.end(), row, row + width);
  }
  return out;
}

std::vector<double> gather_rows(const std::vector<std::vector<double>>& shards_by_index,
                                int64_t width, const ShardLayout& layout) {
  if (static_cast<int>(shards_by_index.size()) != layout.sp) {
    throw ShapeError("gather_rows: shard count does not match sp");
  }
  std::vector<double> out(static_cast<size_t>(layout.global_len * width));
  for (int i = 0; i < layout.sp; ++i) {
    const auto& pos = layout.positions_of(i);
    const auto& vals = shards_by_index[static_cast<size_t>(i)];
    if (vals.size() != pos.size() * static_cast<size_t>(width)) {
      throw ShapeError("gather_rows: shard " + std::to_string(i) + " has wrong size");
    }
    for (size_t r = 0; r < pos.size(); ++r) {
      std::copy_n(vals.data() + r * static_cast<size_t>(width), width,
                  out.data() + pos[r] * width);
    }
  }
  return out;
}

std::vector<int64_t> make_position_ids(const ShardLayout& layout, int index) {
  return layout.positions_of(index);
}

void TrainBatch::validate() const {
  const size_t n = tokens.size();
  if (n == 0) throw ConfigError("batch has no tokens");
  if (labels.size() != n) throw ConfigError("batch labels length does not match tokens");
  if (position_ids.size() != n) {
    throw ConfigError("batch position_ids length does not match tokens");
  }
  if (!segment_ids.empty() && segment_ids.size() != n) {
    throw ConfigError("batch segment_ids length does not match tokens");
  }
  if (!image_map.empty() && image_map.size() != n) {
    throw ConfigError("batch image_map length does not match tokens");
  }
}

int64_t pad_length(int64_t len, int sp, int64_t cutoff_len, bool pad_to_cutoff) {
  if (len <= 0) throw ConfigError("pad_length: length must be positive");
  if (sp <= 0) throw ConfigError("pad_length: sp must be positive");
  const int64_t quantum = 8 * static_cast<int64_t>(sp);
  if (pad_to_cutoff) {
    if (cutoff_len % quantum != 0) {
      throw ConfigError("cutoff_len " + std::to_string(cutoff_len) +
                        " is not a multiple of 8*sp = " + std::to_string(quantum));
    }
    if (len > cutoff_len) {
      throw ConfigError("sequence of length " + std::to_string(len) +
                        " exceeds cutoff_len " + std::to_string(cutoff_len));
    }
    return cutoff_len;
  }
  const int64_t padded = (len + quantum - 1) / quantum * quantum;
  if (padded > cutoff_len) {
    throw ConfigError("padded length " + std::to_string(padded) + " exceeds cutoff_len " +
                      std::to_string(cutoff_len) + "; raise the cutoff or lower sp");
  }
  return padded;
}

TrainBatch pad_batch(const TrainBatch& batch, int sp, int64_t pad_token, int64_t cutoff_len,
                     bool pad_to_cutoff) {
  batch.validate();
  const int64_t len = batch.len();
  const int64_t target = pad_length(len, sp, cutoff_len, pad_to_cutoff);
  TrainBatch out = batch;
  out.tokens.resize(static_cast<size_t>(target), pad_token);
  out.labels.resize(static_cast<size_t>(target), kIgnoreLabel);
  out.position_ids.resize(static_cast<size_t>(target));
  std::iota(out.position_ids.begin(), out.position_ids.end(), int64_t{0});
  if (!out.segment_ids.empty()) out.segment_ids.resize(static_cast<size_t>(target), kNoSegment);
  if (!out.image_map.empty()) out.image_map.resize(static_cast<size_t>(target), kNoImage);
  return out;
}

std::vector<int64_t> split_position_map(const std::vector<int64_t>& image_map,
                                        const ShardLayout& layout, int index) {
  return shard(image_map, layout, index);
}

std::vector<uint8_t> replicate_packing_mask(RankCtx& ctx, const CommGroup& group,
                                            const std::vector<uint8_t>& mask) {
  const bool is_root = group.index_of(ctx.rank) == 0;
  std::vector<uint8_t> payload = is_root ? mask : std::vector<uint8_t>{};
  return broadcast_bytes(ctx, group, payload, /*root_index=*/0);
}

static std::vector<int64_t> int_field(const nlohmann::json& obj, const char* name,
                                      bool required, size_t line_no) {
  if (!obj.contains(name)) {
    if (required) {
      throw ConfigError("batch line " + std::to_string(line_no) + ": missing field '" +
                        name + "'");
    }
    return {};
  }
  const auto& field = obj.at(name);
  if (!field.is_array()) {
    throw ConfigError("batch line " + std::to_string(line_no) + ": field '" + name +
                      "' must be an array");
  }
  std::vector<int64_t> out;
  out.reserve(field.size());
  for (const auto& v : field) {
    if (!v.is_number_integer()) {
      throw ConfigError("batch line " + std::to_string(line_no) + ": field '" + name +
                        "' must hold integers");
    }
    out.push_back(v.get<int64_t>());
  }
  return out;
}

std::vector<TrainBatch> load_batches_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open batch file '" + path + "'");
  std::vector<TrainBatch> batches;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("batch line " + std::to_string(line_no) + ": " + e.what());
    }
    TrainBatch b;
    b.tokens = int_field(obj, "tokens", true, line_no);
    b.labels = int_field(obj, "labels", true, line_no);
    b.segment_ids = int_field(obj, "segment_ids", false, line_no);
    b.image_map = int_field(obj, "image_map", false, line_no);
    b.position_ids.resize(b.tokens.size());
    std::iota(b.position_ids.begin(), b.position_ids.end(), int64_t{0});
    try {
      b.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("batch line " + std::to_string(line_no) + ": " + e.what());
    }
    batches.push_back(std::move(b));
  }
  if (batches.empty()) throw ConfigError("batch file '" + path + "' has no batches");
  return batches;
}

void save_batches_jsonl(const std::string& path, const std::vector<TrainBatch>& batches) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write batch file '" + path + "'");
  for (const auto& b : batches) {
    nlohmann::json obj;
    obj["tokens"] = b.tokens;
    obj["labels"] = b.labels;
    if (!b.segment_ids.empty()) obj["segment_ids"] = b.segment_ids;
    if (!b.image_map.empty()) obj["image_map"] = b.image_map;
    out << obj.dump() << "\n";
  }
}

}  // namespace seqpar
