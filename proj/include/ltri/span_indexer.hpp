#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "ltri/errors.hpp"
#include "ltri/matrix.hpp"
#include "ltri/span_divider.hpp"
#include "ltri/tri_attention.hpp"

namespace ltri {

/// Accumulated attention received by one token (column) over a window of
/// query rows, summed across heads.
struct TokenVote {
    int token = 0;  // tile-local column index
    double score = 0.0;
};

/// v_x = sum over heads and query rows [row_begin, row_end) of A[h][i][x],
/// for every column of the tile.
inline std::vector<TokenVote> token_votes(const AttentionTile& tile, int row_begin, int row_end) {
    if (row_begin < 0 || row_end > tile.rows || row_begin > row_end)
        throw IndexError("token_votes: window outside tile rows");
    std::vector<double> acc(std::size_t(tile.cols), 0.0);
    for (int h = 0; h < tile.head_count; ++h) {
        for (int r = row_begin; r < row_end; ++r) {
            const float* src = tile.values.data() + (std::size_t(h) * tile.rows + r) * tile.cols;
            for (int c = 0; c < tile.cols; ++c) acc[c] += double(src[c]);
        }
    }
    std::vector<TokenVote> votes(std::size_t(tile.cols));
    for (int c = 0; c < tile.cols; ++c) votes[c] = {c, acc[c]};
    return votes;
}

enum class RatioMode { row, col, rowcol };

inline RatioMode ratio_mode_from_string(const std::string& s) {
    if (s == "row") return RatioMode::row;
    if (s == "col") return RatioMode::col;
    if (s == "rowcol") return RatioMode::rowcol;
    throw ConfigError("unknown ratio mode '" + s + "' (row|col|rowcol)");
}

inline const char* to_string(RatioMode m) {
    switch (m) {
        case RatioMode::row: return "row";
        case RatioMode::col: return "col";
        default: return "rowcol";
    }
}

struct ConfidenceRatio {
    int span_index = 0;
    RatioMode mode = RatioMode::row;
    double r_a = 1.0;
};

/// Ratio of a span's attention mass to itself plus its neighbor regions.
/// Row neighbors: the span's rows against columns of preceding spans.
/// Column neighbors: rows of following spans against the span's columns.
/// Raw (unthresholded) mass is used so the ratio stays in [0,1]; an empty or
/// massless neighborhood yields 1.
inline ConfidenceRatio confidence_ratio(const TaScoreField& field, const SpanPartition& partition,
                                        int span_idx, RatioMode mode) {
    if (span_idx < 0 || span_idx >= partition.span_count())
        throw IndexError("confidence_ratio: span index out of range");
    const Span& s = partition.spans[std::size_t(span_idx)];
    const int block_lo = partition.spans.front().start;
    const int block_hi = partition.spans.back().end;

    const double own = field.cumulative(s.start, s.end);
    double neighbors = 0.0;
    if (mode == RatioMode::row || mode == RatioMode::rowcol)
        neighbors += field.rect_sum(s.start, s.end + 1, block_lo, s.start);
    if (mode == RatioMode::col || mode == RatioMode::rowcol)
        neighbors += field.rect_sum(s.end + 1, block_hi + 1, s.start, s.end + 1);

    const double denom = own + neighbors;
    double r_a = denom > 0.0 ? own / denom : 1.0;
    r_a = std::clamp(r_a, 0.0, 1.0);
    return {span_idx, mode, r_a};
}

/// r_v = e^{-lambda (1 - r_a)}, the retained fraction of a span's tokens.
inline double rv(double r_a, double lambda) {
    if (r_a < 0.0 || r_a > 1.0) throw ConfigError("rv: r_a must lie in [0,1]");
    if (lambda <= 0.0) throw ConfigError("rv: lambda must be positive");
    return std::exp(-lambda * (1.0 - r_a));
}

/// A span's hot-tier representation: the key vectors of its chosen tokens.
/// vectors is row-major (|source_tokens| x dim); vec_sum caches the
/// column-wise sum used by similarity scoring.
struct SpanIndex {
    Span span;
    int dim = 0;
    std::vector<float> vectors;
    std::vector<int> source_tokens; // field-local token indices, within span
    double r_v = 1.0;
    std::vector<double> vec_sum;

    int vector_count() const { return dim > 0 ? int(vectors.size()) / dim : 0; }

    void rebuild_sum() {
        vec_sum.assign(std::size_t(dim), 0.0);
        const int n = vector_count();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < dim; ++j) vec_sum[std::size_t(j)] += double(vectors[std::size_t(i) * dim + j]);
    }
};

namespace detail {

/// Top-count tokens of [span.start, span.end] by vote, ties to the lower
/// token index; result sorted ascending by token.
inline std::vector<int> top_vote_tokens(const Span& span, const std::vector<TokenVote>& votes, int count) {
    std::vector<int> idx;
    idx.reserve(std::size_t(span.length()));
    for (int t = span.start; t <= span.end; ++t) idx.push_back(t);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        return votes[std::size_t(a)].score > votes[std::size_t(b)].score;
    });
    idx.resize(std::size_t(std::min<int>(count, int(idx.size()))));
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline SpanIndex make_span_index(const Span& span, const std::vector<int>& tokens,
                                 const MatF& keys, double r_v) {
    SpanIndex si;
    si.span = span;
    si.dim = keys.cols;
    si.r_v = r_v;
    si.source_tokens = tokens;
    si.vectors.reserve(tokens.size() * std::size_t(keys.cols));
    for (int t : tokens) {
        const float* row = keys.row(t);
        si.vectors.insert(si.vectors.end(), row, row + keys.cols);
    }
    si.rebuild_sum();
    return si;
}

} // namespace detail

/// InfLLM-style static indexing: floor(total/C_spans) vectors per span, the
/// keys of its top-voted tokens. `keys` rows are field-local token indices.
inline std::vector<SpanIndex> static_index(const SpanPartition& partition,
                                           const std::vector<TokenVote>& votes,
                                           const MatF& keys, int total) {
    const int n_spans = partition.span_count();
    if (total < n_spans) throw ConfigError("static_index: total vectors below span count");
    const int quota = total / n_spans;
    std::vector<SpanIndex> out;
    out.reserve(std::size_t(n_spans));
    for (const Span& s : partition.spans) {
        const int take = std::min(quota, s.length());
        const auto tokens = detail::top_vote_tokens(s, votes, take);
        out.push_back(detail::make_span_index(s, tokens, keys, double(take) / double(s.length())));
    }
    return out;
}

/// Mean-pooled single vector per span. Comparison mode only; static pooling
/// is not a supported indexing policy.
inline std::vector<SpanIndex> mean_pool_index(const SpanPartition& partition, const MatF& keys) {
    std::vector<SpanIndex> out;
    out.reserve(std::size_t(partition.span_count()));
    for (const Span& s : partition.spans) {
        SpanIndex si;
        si.span = s;
        si.dim = keys.cols;
        si.r_v = 1.0 / double(s.length());
        si.source_tokens = {s.start};
        std::vector<double> mean(std::size_t(keys.cols), 0.0);
        for (int t = s.start; t <= s.end; ++t)
            for (int j = 0; j < keys.cols; ++j) mean[std::size_t(j)] += double(keys.at(t, j));
        si.vectors.resize(std::size_t(keys.cols));
        for (int j = 0; j < keys.cols; ++j)
            si.vectors[std::size_t(j)] = float(mean[std::size_t(j)] / double(s.length()));
        si.rebuild_sum();
        out.push_back(std::move(si));
    }
    return out;
}

struct DynamicIndexParams {
    double lambda = 3.0;
    int min_vectors = 1;
    int max_per_span = 12;
    int block_budget = 12; // M
    RatioMode mode = RatioMode::row;
};

/// Per-span vector counts for the dynamic policy: clamp(round(L * r_v),
/// min_vectors, max_per_span), capped by the span length, then reduced to the
/// block budget by repeatedly decrementing the largest count (ties to the
/// lower span index).
inline std::vector<int> dynamic_vector_counts(const std::vector<double>& ratios,
                                              const std::vector<int>& lengths,
                                              const DynamicIndexParams& p) {
    const int n = int(ratios.size());
    if (p.min_vectors < 1) throw ConfigError("dynamic_index: min_vectors must be >= 1");
    if (p.block_budget < n * p.min_vectors)
        throw ConfigError("dynamic_index: block budget below min vectors times span count");
    std::vector<int> counts(std::size_t(n));
    std::vector<int> floors(std::size_t(n));
    long long sum = 0;
    for (int i = 0; i < n; ++i) {
        const int len = lengths[std::size_t(i)];
        floors[std::size_t(i)] = std::max(1, std::min(p.min_vectors, len));
        const double want = double(len) * rv(ratios[std::size_t(i)], p.lambda);
        int c = int(std::llround(want));
        c = std::clamp(c, p.min_vectors, p.max_per_span);
        c = std::clamp(c, floors[std::size_t(i)], std::max(floors[std::size_t(i)], len));
        counts[std::size_t(i)] = c;
        sum += c;
    }
    while (sum > p.block_budget) {
        int largest = -1;
        for (int i = 0; i < n; ++i) {
            if (counts[std::size_t(i)] <= floors[std::size_t(i)]) continue;
            if (largest < 0 || counts[std::size_t(i)] > counts[std::size_t(largest)]) largest = i;
        }
        if (largest < 0) break; // everything at floor; budget precondition keeps this unreachable
        --counts[std::size_t(largest)];
        --sum;
    }
    return counts;
}

/// Confidence-driven dynamic indexing (the supported policy): spans with low
/// confidence ratios retain more of their tokens' keys.
inline std::vector<SpanIndex> dynamic_index(const TaScoreField& field,
                                            const SpanPartition& partition,
                                            const MatF& keys,
                                            const std::vector<TokenVote>& votes,
                                            const DynamicIndexParams& params) {
    const int n = partition.span_count();
    std::vector<double> ratios(std::size_t(n));
    std::vector<int> lengths(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        ratios[std::size_t(i)] = confidence_ratio(field, partition, i, params.mode).r_a;
        lengths[std::size_t(i)] = partition.spans[std::size_t(i)].length();
    }
    const auto counts = dynamic_vector_counts(ratios, lengths, params);

    std::vector<SpanIndex> out;
    out.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        const Span& s = partition.spans[std::size_t(i)];
        const auto tokens = detail::top_vote_tokens(s, votes, counts[std::size_t(i)]);
        out.push_back(detail::make_span_index(s, tokens, keys, rv(ratios[std::size_t(i)], params.lambda)));
    }
    return out;
}

/// One calibration observation: the spans of one divided block.
struct SpanSample {
    int length = 0;
    double r_a = 1.0;
};

struct BlockSamples {
    int layer = 0;
    std::vector<SpanSample> spans;
};

struct LambdaBin {
    double lo = 0.0, hi = 0.0, p = 0.0;
};

struct LambdaGridEntry {
    double lambda = 0.0;
    double expected_vectors = 0.0;
    double ratio = 0.0;
};

/// Per-layer lookup table: observed r_a distribution and the expected
/// vectors-per-block (with clamps and block budget applied) for each grid
/// lambda, plus the smallest lambda meeting the requested compression ratio.
struct LambdaTable {
    int layer = 0;
    std::vector<LambdaBin> bins;
    std::vector<LambdaGridEntry> grid;
    double chosen_lambda = 0.0;
    double target_ratio = 0.0;
};

inline std::vector<double> default_lambda_grid() { return {3, 4, 5, 6, 7, 8, 9, 10, 20}; }

/// Expected vectors per block at a given lambda over recorded samples.
inline double expected_vectors_per_block(const std::vector<const BlockSamples*>& blocks,
                                         double lambda, const DynamicIndexParams& base) {
    DynamicIndexParams p = base;
    p.lambda = lambda;
    double total = 0.0;
    for (const BlockSamples* b : blocks) {
        std::vector<double> ratios;
        std::vector<int> lengths;
        ratios.reserve(b->spans.size());
        lengths.reserve(b->spans.size());
        for (const SpanSample& s : b->spans) {
            ratios.push_back(s.r_a);
            lengths.push_back(s.length);
        }
        const auto counts = dynamic_vector_counts(ratios, lengths, p);
        total += double(std::accumulate(counts.begin(), counts.end(), 0LL));
    }
    return total / double(blocks.size());
}

/// Choose the smallest grid lambda whose implied compression ratio
/// (block_size / expected vectors per block) reaches target_ratio.
inline LambdaTable calibrate_lambda(const std::vector<BlockSamples>& samples, int layer,
                                    double target_ratio, std::vector<double> grid,
                                    int block_size, const DynamicIndexParams& params) {
    std::vector<const BlockSamples*> blocks;
    for (const BlockSamples& b : samples)
        if (b.layer == layer && !b.spans.empty()) blocks.push_back(&b);
    if (blocks.empty()) throw ConfigError("calibrate_lambda: no calibration samples for layer");
    if (grid.empty()) throw ConfigError("calibrate_lambda: empty lambda grid");
    if (!std::is_sorted(grid.begin(), grid.end()))
        throw ConfigError("calibrate_lambda: lambda grid must be sorted ascending");

    LambdaTable table;
    table.layer = layer;
    table.target_ratio = target_ratio;

    constexpr int kBins = 20;
    table.bins.resize(kBins);
    std::size_t n_spans = 0;
    for (int i = 0; i < kBins; ++i)
        table.bins[std::size_t(i)] = {double(i) / kBins, double(i + 1) / kBins, 0.0};
    for (const BlockSamples* b : blocks) {
        for (const SpanSample& s : b->spans) {
            const int bin = std::min(kBins - 1, int(s.r_a * kBins));
            table.bins[std::size_t(bin)].p += 1.0;
            ++n_spans;
        }
    }
    for (LambdaBin& bin : table.bins) bin.p /= double(n_spans);

    double best_ratio = 0.0;
    double chosen = -1.0;
    for (double lambda : grid) {
        const double ev = expected_vectors_per_block(blocks, lambda, params);
        const double ratio = ev > 0.0 ? double(block_size) / ev : std::numeric_limits<double>::infinity();
        table.grid.push_back({lambda, ev, ratio});
        best_ratio = std::max(best_ratio, ratio);
        if (chosen < 0.0 && ratio >= target_ratio) chosen = lambda;
    }
    if (chosen < 0.0)
        throw ConfigError("calibrate_lambda: target ratio " + std::to_string(target_ratio) +
                          " unreachable; max achievable is " + std::to_string(best_ratio));
    table.chosen_lambda = chosen;
    return table;
}

} // namespace ltri
