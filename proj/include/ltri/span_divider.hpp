#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "ltri/errors.hpp"
#include "ltri/rng.hpp"
#include "ltri/tri_attention.hpp"

namespace ltri {

/// Inclusive token interval.
struct TokenInterval {
    std::int64_t start = 0;
    std::int64_t end = 0;

    std::int64_t length() const { return end - start + 1; }
    bool overlaps(const TokenInterval& o) const { return start <= o.end && o.start <= end; }
};

/// Candidate span [start, end] with its thresholded TA score. Coordinates are
/// field-local. anti_diagonal = start + end.
struct SpanCandidate {
    int start = 0;
    int end = 0;
    double score = 0.0;
    int anti_diagonal = 0;
};

struct Span {
    int start = 0;
    int end = 0;
    double score = 0.0;

    int length() const { return end - start + 1; }
};

/// Disjoint, contiguous, sorted spans covering one block's token range
/// exactly.
struct SpanPartition {
    std::int64_t block_id = 0;
    std::vector<Span> spans;

    int span_count() const { return int(spans.size()); }
};

/// Best-scoring point per anti-diagonal inside [block_lo, block_hi], with
/// non-positive scores dropped. At most 2L-1 candidates survive, which keeps
/// the NMS input linear in the block length. Ties on an anti-diagonal go to
/// the smaller start.
inline std::vector<SpanCandidate> generate_candidates(const TaScoreField& field,
                                                      int block_lo, int block_hi) {
    if (block_lo > block_hi || block_lo < 0 || block_hi >= field.size)
        throw IndexError("generate_candidates: empty or out-of-range block");

    const int n_dias = 2 * (block_hi - block_lo) + 1;
    std::vector<SpanCandidate> best(std::size_t(n_dias));
    std::vector<bool> seen(std::size_t(n_dias), false);

    for (int y = block_lo; y <= block_hi; ++y) {
        for (int x = block_lo; x <= y; ++x) {
            const double s = field.score(x, y);
            if (s <= 0.0) continue;
            const int d = x + y - 2 * block_lo;
            if (!seen[d] || s > best[d].score) {
                best[d] = {x, y, s, x + y};
                seen[d] = true;
            }
        }
    }

    std::vector<SpanCandidate> out;
    out.reserve(std::size_t(n_dias));
    for (int d = 0; d < n_dias; ++d)
        if (seen[d]) out.push_back(best[d]);
    return out;
}

/// IoU of two spans embedded as axis-aligned squares with corners (x, x) and
/// (y+1, y+1): inter^2 / (len_a^2 + len_b^2 - inter^2).
inline double iou(const SpanCandidate& a, const SpanCandidate& b) {
    const double inter = std::max(0, std::min(a.end, b.end) + 1 - std::max(a.start, b.start));
    const double la = double(a.end - a.start + 1);
    const double lb = double(b.end - b.start + 1);
    const double denom = la * la + lb * lb - inter * inter;
    return denom > 0.0 ? inter * inter / denom : 0.0;
}

namespace detail {

inline bool candidate_priority(const SpanCandidate& a, const SpanCandidate& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.start != b.start) return a.start < b.start;
    return a.end < b.end;
}

} // namespace detail

/// Greedy NMS: keep the best-scoring candidate, discard everything with
/// iou > phi against it, repeat. Output sorted by start.
inline std::vector<SpanCandidate> nms(std::vector<SpanCandidate> candidates, double phi) {
    if (phi <= 0.0 || phi >= 1.0) throw ConfigError("nms: phi must lie in (0,1)");
    std::sort(candidates.begin(), candidates.end(), detail::candidate_priority);

    std::vector<SpanCandidate> kept;
    std::vector<bool> dead(candidates.size(), false);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (dead[i]) continue;
        kept.push_back(candidates[i]);
        for (std::size_t j = i + 1; j < candidates.size(); ++j)
            if (!dead[j] && iou(candidates[i], candidates[j]) > phi) dead[j] = true;
    }
    std::sort(kept.begin(), kept.end(),
              [](const SpanCandidate& a, const SpanCandidate& b) { return a.start < b.start; });
    return kept;
}

/// Turn NMS survivors into a partition of [block_lo, block_hi]:
///   1. place survivors in score order, truncating any overlap against
///      already-placed spans (a fully covered survivor is dropped; a split
///      survivor keeps its longest remaining piece, leftmost on ties);
///   2. fill gaps with spans scored by their own thresholded TA score;
///   3. while more than max_spans remain, merge the lowest-scoring span into
///      its left neighbor (the leftmost span merges right), rescoring the
///      merged span from the field.
inline SpanPartition complete_partition(const TaScoreField& field,
                                        std::vector<SpanCandidate> kept,
                                        int block_lo, int block_hi,
                                        int max_spans,
                                        std::int64_t block_id = 0) {
    if (block_lo > block_hi || block_lo < 0 || block_hi >= field.size)
        throw IndexError("complete_partition: bad block range");
    if (max_spans < 1) throw ConfigError("complete_partition: max_spans must be >= 1");

    std::sort(kept.begin(), kept.end(), detail::candidate_priority);

    std::vector<Span> placed; // kept sorted by start
    for (const SpanCandidate& c : kept) {
        int lo = std::max(c.start, block_lo);
        const int hi = std::min(c.end, block_hi);
        // subtract already-placed spans, tracking the longest surviving piece
        int best_lo = 0, best_hi = -1;
        for (const Span& p : placed) {
            if (p.start > hi) break;
            if (p.end < lo) continue;
            if (p.start > lo && p.start - 1 - lo > best_hi - best_lo)
                best_lo = lo, best_hi = p.start - 1;
            lo = std::max(lo, p.end + 1);
            if (lo > hi) break;
        }
        if (lo <= hi && hi - lo > best_hi - best_lo) best_lo = lo, best_hi = hi;
        if (best_hi < best_lo) continue; // fully covered
        Span s{best_lo, best_hi, field.score(best_lo, best_hi)};
        placed.insert(std::upper_bound(placed.begin(), placed.end(), s,
                                       [](const Span& a, const Span& b) { return a.start < b.start; }),
                      s);
    }

    // gap filling
    std::vector<Span> spans;
    int cursor = block_lo;
    for (const Span& p : placed) {
        if (p.start > cursor)
            spans.push_back({cursor, p.start - 1, field.score(cursor, p.start - 1)});
        spans.push_back(p);
        cursor = p.end + 1;
    }
    if (cursor <= block_hi)
        spans.push_back({cursor, block_hi, field.score(cursor, block_hi)});

    // merge down to max_spans
    while (int(spans.size()) > max_spans) {
        std::size_t victim = 0;
        for (std::size_t i = 1; i < spans.size(); ++i)
            if (spans[i].score < spans[victim].score) victim = i;
        const std::size_t left = victim == 0 ? 1 : victim - 1; // leftmost merges right
        const std::size_t a = std::min(victim, left), b = std::max(victim, left);
        spans[a].end = spans[b].end;
        spans[a].score = field.score(spans[a].start, spans[a].end);
        spans.erase(spans.begin() + b);
    }

    return SpanPartition{block_id, std::move(spans)};
}

/// Shipped defaults ("90th percentile" theta quantile, phi 0.1).
inline ThetaSpec default_theta() { return ThetaSpec::quantile(0.9); }
inline double default_phi() { return 0.1; }

/// One block-sized tile with ground-truth evidence intervals (field-local
/// coordinates), the unit of threshold tuning datasets.
struct LabeledTile {
    AttentionTile tile;
    std::vector<TokenInterval> evidence;
};

struct TuneResult {
    double theta_quantile = 0.9;
    double iou_threshold = 0.1;
    double f1 = 0.0;
};

/// Detection-style F1 of NMS survivors against evidence intervals. A survivor
/// overlapping any evidence interval by at least one token is a true
/// positive; an evidence interval hit by no survivor is a false negative.
inline double evidence_f1(const std::vector<LabeledTile>& data, double theta_quantile, double phi) {
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (const LabeledTile& lt : data) {
        const double theta = resolve_theta(lt.tile, ThetaSpec::quantile(theta_quantile));
        const TaScoreField field = ta_field(lt.tile, std::min(theta, 0.999999));
        const auto survivors = nms(generate_candidates(field, 0, field.size - 1), phi);
        std::vector<bool> hit(lt.evidence.size(), false);
        for (const SpanCandidate& s : survivors) {
            bool overlapped = false;
            for (std::size_t e = 0; e < lt.evidence.size(); ++e) {
                if (std::int64_t(s.start) <= lt.evidence[e].end && lt.evidence[e].start <= std::int64_t(s.end)) {
                    overlapped = true;
                    hit[e] = true;
                }
            }
            overlapped ? ++tp : ++fp;
        }
        for (bool h : hit)
            if (!h) ++fn;
    }
    if (tp == 0) return 0.0;
    const double precision = double(tp) / double(tp + fp);
    const double recall = double(tp) / double(tp + fn);
    return 2.0 * precision * recall / (precision + recall);
}

/// Joint random search for (theta quantile, phi) maximizing evidence F1 on
/// the tiles of one layer. theta is sampled uniformly from (0.0001, 0.95) and
/// phi from (0.01, 0.95); deterministic for a fixed seed, ties keep the
/// earlier trial.
inline TuneResult tune_thresholds(const std::vector<LabeledTile>& labeled, int layer,
                                  int trials, std::uint64_t seed) {
    std::vector<LabeledTile> data;
    for (const LabeledTile& lt : labeled)
        if (lt.tile.layer == layer) data.push_back(lt);
    if (data.empty()) throw ConfigError("tune_thresholds: no labeled tiles for layer");
    if (trials < 1) throw ConfigError("tune_thresholds: trials must be >= 1");

    SplitMix64 rng(mix_seed(seed, std::uint64_t(layer)));
    TuneResult best;
    best.f1 = -1.0;
    for (int t = 0; t < trials; ++t) {
        const double theta_q = rng.uniform(0.0001, 0.95);
        const double phi = rng.uniform(0.01, 0.95);
        const double f1 = evidence_f1(data, theta_q, phi);
        if (f1 > best.f1) best = {theta_q, phi, f1};
    }
    return best;
}

} // namespace ltri
