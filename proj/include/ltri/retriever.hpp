#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <unordered_map>
#include <vector>

#include "ltri/context_memory.hpp"
#include "ltri/errors.hpp"
#include "ltri/span_indexer.hpp"

namespace ltri {

/// An attention head adopted for retrieval, with its head score acting as the
/// layer's voting weight.
struct RetrievalHead {
    int layer = 0;
    int head = 0;
    double score = 0.0;
};

/// Built-in adopted head table (layer, head, score) for a 32-layer model.
inline std::vector<RetrievalHead> default_retrieval_heads() {
    return {
        {5, 8, 0.21},  {8, 1, 0.49},   {10, 14, 0.45}, {13, 6, 0.15}, {14, 18, 0.15},
        {15, 30, 0.90}, {16, 1, 0.50}, {17, 29, 0.12}, {19, 3, 0.30}, {20, 14, 0.44},
        {22, 14, 0.33}, {24, 27, 0.46}, {26, 15, 0.14}, {27, 7, 0.30},
    };
}

/// Filter a head table to adopted heads: score above 0.1, at most one per
/// layer (the highest-scoring one).
inline std::map<int, RetrievalHead> adopt_heads(const std::vector<RetrievalHead>& table) {
    std::map<int, RetrievalHead> adopted;
    for (const RetrievalHead& h : table) {
        if (h.score <= 0.1) continue;
        auto it = adopted.find(h.layer);
        if (it == adopted.end() || h.score > it->second.score) adopted[h.layer] = h;
    }
    return adopted;
}

/// Sum of all pairwise dot products between two index vector sets. By
/// bilinearity this equals dot(sum of queries, sum of keys), which the cached
/// per-index sums make O(d).
inline double span_similarity(const SpanIndex& q_index, const SpanIndex& k_index) {
    if (q_index.dim != k_index.dim) throw InvalidTrace("span_similarity: dimension mismatch");
    double s = 0.0;
    for (int j = 0; j < q_index.dim; ++j) s += q_index.vec_sum[std::size_t(j)] * k_index.vec_sum[std::size_t(j)];
    return s;
}

struct RankedBlock {
    std::int64_t block_id = 0;
    double score = 0.0;
};

/// Per-layer running retrieval scores with exponential decay: each ranking
/// step applies s <- s * (1 - decay) + max span similarity.
class BlockScoreState {
public:
    explicit BlockScoreState(double decay) : decay_(decay) {}

    double update(std::int64_t block_id, double sim) {
        double& s = scores_[block_id];
        s = s * (1.0 - decay_) + sim;
        return s;
    }

    void reset() { scores_.clear(); }

private:
    double decay_;
    std::unordered_map<std::int64_t, double> scores_;
};

/// Score every evicted block against the current query spans: block score is
/// the decayed running score after adding max over (block spans x query
/// spans) of span_similarity. Descending scores, ties to the lower block id.
inline std::vector<RankedBlock> rank_blocks(const ContextMemory& memory,
                                            const std::vector<SpanIndex>& q_indexes,
                                            BlockScoreState& state) {
    std::vector<RankedBlock> ranked;
    ranked.reserve(memory.block_count());
    memory.for_each_record([&](const BlockRecord& rec) {
        double best = 0.0;
        bool first = true;
        for (const SpanIndex& k : rec.span_indexes) {
            for (const SpanIndex& q : q_indexes) {
                const double s = span_similarity(q, k);
                if (first || s > best) {
                    best = s;
                    first = false;
                }
            }
        }
        ranked.push_back({rec.block_id, state.update(rec.block_id, first ? 0.0 : best)});
    });
    std::sort(ranked.begin(), ranked.end(), [](const RankedBlock& a, const RankedBlock& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.block_id < b.block_id;
    });
    return ranked;
}

/// One layer's contribution to the vote: its weight and its top-K ranking.
struct LayerRanking {
    int layer = 0;
    double weight = 1.0;
    std::vector<RankedBlock> topk;
};

/// Weighted plurality vote: each layer adds its weight to every block in its
/// own top-K list; the K blocks with the largest summed weight win, ties to
/// the lower block id. K larger than the candidate pool returns everything.
inline std::vector<RankedBlock> vote(const std::vector<LayerRanking>& per_layer, int k) {
    std::map<std::int64_t, double> weight;
    for (const LayerRanking& lr : per_layer)
        for (const RankedBlock& b : lr.topk) weight[b.block_id] += lr.weight;
    std::vector<RankedBlock> all;
    all.reserve(weight.size());
    for (const auto& [id, w] : weight) all.push_back({id, w});
    std::sort(all.begin(), all.end(), [](const RankedBlock& a, const RankedBlock& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.block_id < b.block_id;
    });
    if (int(all.size()) > k) all.resize(std::size_t(k));
    return all;
}

/// Union the needle blocks into a voted set, displacing the lowest-weight
/// non-needle blocks when the result would exceed K.
inline std::vector<RankedBlock> inject_evidence(std::vector<RankedBlock> voted,
                                                const std::vector<std::int64_t>& needle_blocks,
                                                int k) {
    for (std::int64_t nb : needle_blocks) {
        const bool present = std::any_of(voted.begin(), voted.end(),
                                         [&](const RankedBlock& b) { return b.block_id == nb; });
        if (present) continue;
        if (int(voted.size()) >= k) {
            // displace the lowest-weight non-needle block
            int victim = -1;
            for (int i = int(voted.size()) - 1; i >= 0; --i) {
                const bool is_needle = std::find(needle_blocks.begin(), needle_blocks.end(),
                                                 voted[std::size_t(i)].block_id) != needle_blocks.end();
                if (!is_needle) {
                    victim = i;
                    break;
                }
            }
            if (victim < 0) continue; // everything is a needle block already
            voted.erase(voted.begin() + victim);
        }
        voted.push_back({nb, 0.0});
    }
    return voted;
}

/// Snapshot of one retrieval step.
struct RetrievalResult {
    std::int64_t step = 0;
    std::map<int, std::vector<RankedBlock>> per_layer;
    std::vector<RankedBlock> voted;
    bool persistent = false;
};

} // namespace ltri
