#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <list>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "ltri/errors.hpp"
#include "ltri/matrix.hpp"
#include "ltri/span_divider.hpp"
#include "ltri/span_indexer.hpp"

namespace ltri {

/// Streaming geometry and tier budgets. Defaults follow the reference
/// configuration; desk-scale runs usually shrink l_win.
struct StreamConfig {
    int l_init = 128;            // attention-sink prefix, never evicted
    int l_win = 4096;            // sliding local window
    int block_size = 128;        // B, eviction granularity
    int chunk_size = 512;        // encoding chunk length
    int gpu_cache_blocks = 32;   // LRU-resident fetched blocks
    double score_decay = 0.1;    // per-step retrieval score decay
    int spans_per_block = 4;     // N_s
    int vectors_per_block = 12;  // M
    int prefill_last_chunk = 32; // Q

    void validate() const {
        if (l_init < 1 || l_win < 1 || block_size < 1 || chunk_size < 1 ||
            gpu_cache_blocks < 1 || spans_per_block < 1 || vectors_per_block < 1 ||
            prefill_last_chunk < 1)
            throw ConfigError("stream config fields must be positive");
        if (score_decay < 0.0 || score_decay >= 1.0)
            throw ConfigError("score_decay must lie in [0,1)");
        if (vectors_per_block < spans_per_block)
            throw ConfigError("vectors_per_block must cover one vector per span");
    }
};

/// An evicted block: full keys/values on the cold tier, span index vectors on
/// the hot tier. Immutable once registered (the LRU only swaps the cold
/// payload's residency).
struct BlockRecord {
    std::int64_t block_id = 0;
    TokenInterval token_range;
    MatF cold_keys;
    MatF cold_values;
    std::vector<SpanIndex> span_indexes;
    std::optional<TokenInterval> needle_overlap;
    bool payload_resident = true; // false when spilled to disk and not fetched
};

struct TierAccounting {
    std::int64_t hot_bytes = 0;
    std::int64_t cold_bytes = 0;
    int blocks_resident_hot = 0; // LRU occupancy of fetched cold payloads
    std::int64_t tokens_evicted = 0;
    std::int64_t blocks_evicted = 0;
    std::int64_t index_vectors = 0;
    double compression_ratio = std::numeric_limits<double>::infinity();
    std::int64_t lru_hits = 0;
    std::int64_t lru_misses = 0;

    bool operator==(const TierAccounting&) const = default;
};

/// Fixed-stride binary spill store, one file per 1024 blocks.
/// Layout per file: header {magic "LTRI", version u32, d u32, B u32}, then
/// per block slot f32 keys[B][d] followed by f32 values[B][d]; short blocks
/// are zero padded to the fixed stride. Little-endian.
class SpillStore {
public:
    static constexpr std::uint32_t kVersion = 1;
    static constexpr std::int64_t kBlocksPerFile = 1024;

    SpillStore(std::string dir, int layer, int block_size, int dim)
        : dir_(std::move(dir)), layer_(layer), block_size_(block_size), dim_(dim) {
        std::filesystem::create_directories(dir_);
    }

    void write_block(std::int64_t block_id, const MatF& keys, const MatF& values) {
        std::fstream& f = file_for(block_id / kBlocksPerFile);
        f.seekp(slot_offset(block_id));
        write_padded(f, keys);
        write_padded(f, values);
        f.flush();
        if (!f) throw InternalError("spill write failed");
    }

    void read_block(std::int64_t block_id, int token_count, MatF& keys, MatF& values) {
        std::fstream& f = file_for(block_id / kBlocksPerFile);
        f.seekg(slot_offset(block_id));
        keys = MatF(token_count, dim_);
        values = MatF(token_count, dim_);
        f.read(reinterpret_cast<char*>(keys.data.data()), std::streamsize(keys.data.size() * 4));
        f.seekg(slot_offset(block_id) + block_bytes());
        f.read(reinterpret_cast<char*>(values.data.data()), std::streamsize(values.data.size() * 4));
        if (!f) throw InternalError("spill read failed");
    }

private:
    std::int64_t block_bytes() const { return std::int64_t(block_size_) * dim_ * 4; }
    std::int64_t stride() const { return 2 * block_bytes(); }
    std::int64_t slot_offset(std::int64_t block_id) const {
        return header_bytes() + (block_id % kBlocksPerFile) * stride();
    }
    static std::int64_t header_bytes() { return 4 + 4 + 4 + 4; }

    void write_padded(std::fstream& f, const MatF& m) {
        f.write(reinterpret_cast<const char*>(m.data.data()), std::streamsize(m.data.size() * 4));
        const std::int64_t pad = block_bytes() - std::int64_t(m.data.size() * 4);
        if (pad > 0) {
            const std::vector<char> zeros(std::size_t(pad), 0);
            f.write(zeros.data(), std::streamsize(pad));
        }
    }

    std::fstream& file_for(std::int64_t file_idx) {
        auto it = files_.find(file_idx);
        if (it != files_.end()) return it->second;
        const std::string path =
            dir_ + "/spill_l" + std::to_string(layer_) + "_" + std::to_string(file_idx) + ".bin";
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        if (!f.is_open()) {
            f.open(path, std::ios::out | std::ios::binary);
            f.write("LTRI", 4);
            const std::uint32_t hdr[3] = {kVersion, std::uint32_t(dim_), std::uint32_t(block_size_)};
            f.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
            f.close();
            f.open(path, std::ios::in | std::ios::out | std::ios::binary);
        }
        if (!f) throw InternalError("cannot open spill file " + path);
        return files_.emplace(file_idx, std::move(f)).first->second;
    }

    std::string dir_;
    int layer_ = 0;
    int block_size_ = 0;
    int dim_ = 0;
    std::unordered_map<std::int64_t, std::fstream> files_;
};

/// Per-layer tiered store for evicted blocks. The cold tier holds full
/// keys/values (in process, or spilled to disk); the hot tier holds span
/// index vectors for layers that rank blocks. gpu_cache_blocks bounds an LRU
/// set modeling which fetched cold payloads are resident.
class ContextMemory {
public:
    struct Options {
        int layer = 0;
        int dim = 0;
        bool indexed = true;         // whether this layer stores span indexes
        int hot_bytes_per_scalar = 4; // 4 (f32) or 2 (f16 storage mode)
        int kv_heads = 1;            // H in the compression-ratio formula
        std::string spill_dir;       // empty: cold tier stays in process
    };

    ContextMemory(const StreamConfig& cfg, const Options& opt) : cfg_(cfg), opt_(opt) {
        cfg_.validate();
        if (opt.dim < 1) throw ConfigError("context memory: dim must be positive");
        if (opt.hot_bytes_per_scalar != 4 && opt.hot_bytes_per_scalar != 2)
            throw ConfigError("context memory: hot tier supports 4- or 2-byte scalars");
        if (!opt_.spill_dir.empty())
            spill_.emplace(opt_.spill_dir, opt_.layer, cfg_.block_size, opt_.dim);
    }

    /// Move a block out of the local window. Keys/values land on the cold
    /// tier; span indexes (required for indexed layers, rejected otherwise)
    /// are registered hot. In 2-byte mode index vectors are rounded through
    /// f16 at registration, so retrieval sees the degraded values that the
    /// accounted storage could actually hold.
    const BlockRecord& evict_block(std::int64_t block_id, TokenInterval token_range,
                                   MatF keys, MatF values,
                                   std::vector<SpanIndex> span_indexes,
                                   std::optional<TokenInterval> needle_overlap = std::nullopt) {
        if (records_.count(block_id)) throw InternalError("duplicate eviction of block " + std::to_string(block_id));
        if (opt_.indexed && span_indexes.empty())
            throw InternalError("evicting block " + std::to_string(block_id) + " with empty span index");
        if (!opt_.indexed && !span_indexes.empty())
            throw InternalError("span indexes supplied to a non-indexed layer");
        if (keys.rows != token_range.length() || values.rows != token_range.length())
            throw InvalidTrace("evict_block: payload rows do not match token range");

        BlockRecord rec;
        rec.block_id = block_id;
        rec.token_range = token_range;
        rec.needle_overlap = needle_overlap;
        rec.span_indexes = std::move(span_indexes);
        if (opt_.hot_bytes_per_scalar == 2) {
            for (SpanIndex& si : rec.span_indexes) {
                for (float& v : si.vectors) v = f16_to_f32(f32_to_f16(v));
                si.rebuild_sum();
            }
        }
        for (const SpanIndex& si : rec.span_indexes) {
            hot_bytes_ += std::int64_t(si.vector_count()) * opt_.dim * opt_.hot_bytes_per_scalar;
            index_vectors_ += si.vector_count();
        }
        cold_bytes_ += std::int64_t(token_range.length()) * opt_.dim * 4 * 2;
        tokens_evicted_ += token_range.length();

        if (spill_) {
            spill_->write_block(block_id, keys, values);
            rec.payload_resident = false;
        } else {
            rec.cold_keys = std::move(keys);
            rec.cold_values = std::move(values);
        }
        order_.push_back(block_id);
        return records_.emplace(block_id, std::move(rec)).first->second;
    }

    /// Cold payload fetch for attention assembly, through the LRU-resident
    /// set. Hits and misses are counted per id.
    std::vector<const BlockRecord*> fetch_blocks(const std::vector<std::int64_t>& ids) {
        std::vector<const BlockRecord*> out;
        out.reserve(ids.size());
        for (std::int64_t id : ids) {
            auto it = records_.find(id);
            if (it == records_.end()) throw IndexError("fetch of unknown block " + std::to_string(id));
            BlockRecord& rec = it->second;
            auto pos = lru_pos_.find(id);
            if (pos != lru_pos_.end()) {
                ++lru_hits_;
                lru_.splice(lru_.begin(), lru_, pos->second);
            } else {
                ++lru_misses_;
                if (spill_ && !rec.payload_resident) {
                    spill_->read_block(id, int(rec.token_range.length()), rec.cold_keys, rec.cold_values);
                    rec.payload_resident = true;
                }
                lru_.push_front(id);
                lru_pos_[id] = lru_.begin();
                if (int(lru_.size()) > cfg_.gpu_cache_blocks) {
                    const std::int64_t victim = lru_.back();
                    lru_.pop_back();
                    lru_pos_.erase(victim);
                    if (spill_) {
                        BlockRecord& v = records_.at(victim);
                        v.cold_keys = MatF();
                        v.cold_values = MatF();
                        v.payload_resident = false;
                    }
                }
            }
            out.push_back(&rec);
        }
        return out;
    }

    bool contains(std::int64_t id) const { return records_.count(id) != 0; }
    std::size_t block_count() const { return records_.size(); }
    const std::vector<std::int64_t>& eviction_order() const { return order_; }

    const BlockRecord& record(std::int64_t id) const {
        auto it = records_.find(id);
        if (it == records_.end()) throw IndexError("unknown block " + std::to_string(id));
        return it->second;
    }

    /// Streaming-counter snapshot.
    TierAccounting accounting() const {
        TierAccounting a;
        a.hot_bytes = hot_bytes_;
        a.cold_bytes = cold_bytes_;
        a.blocks_resident_hot = int(lru_.size());
        a.tokens_evicted = tokens_evicted_;
        a.blocks_evicted = std::int64_t(records_.size());
        a.index_vectors = index_vectors_;
        a.lru_hits = lru_hits_;
        a.lru_misses = lru_misses_;
        a.compression_ratio = ratio(hot_bytes_, tokens_evicted_);
        return a;
    }

    /// Same quantities recomputed from the records; must equal accounting()
    /// exactly.
    TierAccounting recompute_accounting() const {
        TierAccounting a;
        for (const auto& [id, rec] : records_) {
            for (const SpanIndex& si : rec.span_indexes) {
                a.hot_bytes += std::int64_t(si.vector_count()) * opt_.dim * opt_.hot_bytes_per_scalar;
                a.index_vectors += si.vector_count();
            }
            a.cold_bytes += std::int64_t(rec.token_range.length()) * opt_.dim * 4 * 2;
            a.tokens_evicted += rec.token_range.length();
            ++a.blocks_evicted;
        }
        a.blocks_resident_hot = int(lru_.size());
        a.lru_hits = lru_hits_;
        a.lru_misses = lru_misses_;
        a.compression_ratio = ratio(a.hot_bytes, a.tokens_evicted);
        return a;
    }

    const StreamConfig& config() const { return cfg_; }
    const Options& options() const { return opt_; }

    /// Iterate evicted records in eviction order (deterministic).
    template <typename Fn>
    void for_each_record(Fn&& fn) const {
        for (std::int64_t id : order_) fn(records_.at(id));
    }

private:
    double ratio(std::int64_t hot, std::int64_t tokens) const {
        if (hot <= 0) return std::numeric_limits<double>::infinity();
        const double full = double(tokens) * opt_.kv_heads * opt_.dim * opt_.hot_bytes_per_scalar;
        return full / double(hot);
    }

    StreamConfig cfg_;
    Options opt_;
    std::unordered_map<std::int64_t, BlockRecord> records_;
    std::vector<std::int64_t> order_;
    std::list<std::int64_t> lru_;
    std::unordered_map<std::int64_t, std::list<std::int64_t>::iterator> lru_pos_;
    std::optional<SpillStore> spill_;
    std::int64_t hot_bytes_ = 0;
    std::int64_t cold_bytes_ = 0;
    std::int64_t tokens_evicted_ = 0;
    std::int64_t index_vectors_ = 0;
    std::int64_t lru_hits_ = 0;
    std::int64_t lru_misses_ = 0;
};

} // namespace ltri
