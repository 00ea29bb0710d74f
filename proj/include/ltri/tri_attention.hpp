#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "ltri/errors.hpp"
#include "ltri/matrix.hpp"

namespace ltri {

/// One causal attention tile: `head_count` dense maps of `rows` query
/// positions over `cols` key positions. Tiles may be offset slices of a
/// larger streaming map, so causality is evaluated against global positions:
/// entry (h, r, c) must be zero whenever col_start + c > row_start + r.
///
/// Rows whose causal support starts before col_start are stored as-is with
/// row sums below one; nothing renormalizes them.
struct AttentionTile {
    int layer = 0;
    int head_count = 0;
    int rows = 0;
    int cols = 0;
    std::int64_t row_start = 0;
    std::int64_t col_start = 0;
    std::vector<float> values; // head-major, then row-major

    float at(int h, int r, int c) const {
        return values[(std::size_t(h) * rows + r) * cols + c];
    }
    float& at(int h, int r, int c) {
        return values[(std::size_t(h) * rows + r) * cols + c];
    }

    /// True when (r, c) is on or below the causal diagonal.
    bool causal(int r, int c) const {
        return col_start + c <= row_start + r;
    }

    bool square_aligned() const { return rows == cols && row_start == col_start; }
};

/// Threshold given either as an absolute per-entry value or as a quantile of
/// the tile's nonzero entries, resolved per tile.
struct ThetaSpec {
    enum class Kind { absolute, quantile };
    Kind kind = Kind::quantile;
    double value = 0.9;

    static ThetaSpec absolute(double v) { return {Kind::absolute, v}; }
    static ThetaSpec quantile(double q) { return {Kind::quantile, q}; }
};

namespace detail {

inline double interpolated_quantile(std::vector<float>& v, double q) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const double rank = q * double(v.size() - 1);
    const std::size_t lo = std::size_t(rank);
    if (lo + 1 >= v.size()) return v.back();
    const double frac = rank - double(lo);
    return double(v[lo]) + (double(v[lo + 1]) - double(v[lo])) * frac;
}

} // namespace detail

/// Resolve a ThetaSpec against a tile. Quantiles are taken over the nonzero
/// entries of all heads with linear interpolation between order statistics.
inline double resolve_theta(const AttentionTile& tile, const ThetaSpec& spec) {
    if (spec.kind == ThetaSpec::Kind::absolute) return spec.value;
    if (spec.value < 0.0 || spec.value > 1.0) throw ConfigError("theta quantile outside [0,1]");
    std::vector<float> nz;
    nz.reserve(tile.values.size() / 4);
    for (float x : tile.values)
        if (x > 0.0f) nz.push_back(x);
    return detail::interpolated_quantile(nz, spec.value);
}

/// Build a tile from per-head raw matrices. Entries above the causal diagonal
/// are zeroed. With apply_softmax the raw entries are treated as logits and
/// each row is normalized over its unmasked entries (accumulated in double).
/// Without it the entries are taken as attention weights and must be
/// non-negative.
inline AttentionTile build_tile(const std::vector<MatF>& raw_scores,
                                bool apply_softmax,
                                int layer = 0,
                                std::int64_t row_start = 0,
                                std::int64_t col_start = 0) {
    if (raw_scores.empty()) throw InvalidTrace("build_tile: no heads");
    const int rows = raw_scores[0].rows;
    const int cols = raw_scores[0].cols;
    if (rows < 1 || cols < 1) throw InvalidTrace("build_tile: empty matrix");
    for (const MatF& m : raw_scores)
        if (m.rows != rows || m.cols != cols) throw InvalidTrace("build_tile: ragged head matrices");

    AttentionTile tile;
    tile.layer = layer;
    tile.head_count = int(raw_scores.size());
    tile.rows = rows;
    tile.cols = cols;
    tile.row_start = row_start;
    tile.col_start = col_start;
    tile.values.assign(std::size_t(tile.head_count) * rows * cols, 0.0f);

    for (int h = 0; h < tile.head_count; ++h) {
        const MatF& m = raw_scores[h];
        for (int r = 0; r < rows; ++r) {
            // c_max: last unmasked column of this row, -1 when fully masked
            const std::int64_t g = row_start + r;
            const int c_max = int(std::min<std::int64_t>(cols - 1, g - col_start));
            if (c_max < 0) continue;
            if (apply_softmax) {
                double mx = -std::numeric_limits<double>::infinity();
                for (int c = 0; c <= c_max; ++c) {
                    const float x = m.at(r, c);
                    if (!std::isfinite(x)) throw InvalidTrace("build_tile: non-finite logit");
                    mx = std::max(mx, double(x));
                }
                double denom = 0.0;
                for (int c = 0; c <= c_max; ++c) denom += std::exp(double(m.at(r, c)) - mx);
                for (int c = 0; c <= c_max; ++c)
                    tile.at(h, r, c) = float(std::exp(double(m.at(r, c)) - mx) / denom);
            } else {
                for (int c = 0; c <= c_max; ++c) {
                    const float x = m.at(r, c);
                    if (!std::isfinite(x)) throw InvalidTrace("build_tile: non-finite weight");
                    if (x < 0.0f) throw InvalidTrace("build_tile: negative attention weight");
                    tile.at(h, r, c) = x;
                }
            }
        }
    }
    return tile;
}

/// Check the tile invariants: finite non-negative entries, exact zeros above
/// the causal diagonal, and (optionally) row sums of 1 +- tol per head for
/// rows whose full causal support lies inside the tile.
inline void validate_tile(const AttentionTile& tile, bool check_row_sums = true, double tol = 1e-3) {
    for (int h = 0; h < tile.head_count; ++h) {
        for (int r = 0; r < tile.rows; ++r) {
            double sum = 0.0;
            for (int c = 0; c < tile.cols; ++c) {
                const float x = tile.at(h, r, c);
                if (!std::isfinite(x)) throw InvalidTrace("tile has non-finite entry");
                if (x < 0.0f) throw InvalidTrace("tile has negative entry");
                if (!tile.causal(r, c) && x != 0.0f) throw InvalidTrace("nonzero entry above causal diagonal");
                sum += double(x);
            }
            const std::int64_t g = tile.row_start + r;
            const bool fully_covered = tile.col_start == 0 && g - tile.col_start < tile.cols;
            if (check_row_sums && fully_covered && std::abs(sum - 1.0) > tol)
                throw InvalidTrace("unmasked row does not sum to 1");
        }
    }
}

/// Triangle-attention score field over a square aligned tile of size N.
///
/// Internally this is a summed-area table of the head-summed tile, padded by
/// one zero row/column, accumulated in double. The cumulative score of a span
/// [x, y] follows from the causal structure: summing full rows 0..y over
/// columns x..N-1 touches exactly the triangle cells of [x, y], so
///   S*(x, y) = sat(y+1, N) - sat(y+1, x)
/// and the thresholded score subtracts head_count * theta per triangle cell.
struct TaScoreField {
    int layer = 0;
    int size = 0; // N
    int head_count = 0;
    double theta = 0.0;
    std::vector<double> sat; // (N+1) x (N+1)

    double sat_at(int r, int c) const { return sat[std::size_t(r) * (size + 1) + c]; }

    /// Number of lower-triangle cells of the span square, (len+1 choose 2)+len.
    static double triangle_cells(int x, int y) {
        const double len = double(y - x + 1);
        return len * (len + 1.0) / 2.0;
    }

    /// S*_{xy}: head-summed attention mass inside the causal triangle of
    /// token span [x, y].
    double cumulative(int x, int y) const {
        return sat_at(y + 1, size) - sat_at(y + 1, x);
    }

    /// S_{xy} = S*_{xy} - H * theta * T(x, y).
    double score(int x, int y) const {
        return cumulative(x, y) - double(head_count) * theta * triangle_cells(x, y);
    }

    /// Head-summed mass of the half-open cell rectangle [r0, r1) x [c0, c1).
    double rect_sum(int r0, int r1, int c0, int c1) const {
        if (r0 >= r1 || c0 >= c1) return 0.0;
        return sat_at(r1, c1) - sat_at(r0, c1) - sat_at(r1, c0) + sat_at(r0, c0);
    }
};

/// Build the TA score field for a square aligned tile. theta is the absolute
/// per-entry threshold (resolve quantiles with resolve_theta first).
inline TaScoreField ta_field(const AttentionTile& tile, double theta) {
    if (theta < 0.0 || theta >= 1.0) throw ConfigError("theta must lie in [0,1)");
    if (!tile.square_aligned()) throw InvalidTrace("ta_field: tile must be square and aligned");
    const int n = tile.cols;

    TaScoreField field;
    field.layer = tile.layer;
    field.size = n;
    field.head_count = tile.head_count;
    field.theta = theta;
    field.sat.assign(std::size_t(n + 1) * (n + 1), 0.0);

    std::vector<double> row_acc(std::size_t(n), 0.0);
    for (int r = 0; r < n; ++r) {
        std::fill(row_acc.begin(), row_acc.end(), 0.0);
        for (int h = 0; h < tile.head_count; ++h) {
            const float* src = tile.values.data() + (std::size_t(h) * n + r) * n;
            for (int c = 0; c < n; ++c) row_acc[c] += double(src[c]);
        }
        double run = 0.0;
        const double* above = field.sat.data() + std::size_t(r) * (n + 1);
        double* out = field.sat.data() + std::size_t(r + 1) * (n + 1);
        for (int c = 0; c < n; ++c) {
            run += row_acc[c];
            out[c + 1] = above[c + 1] + run;
        }
    }
    return field;
}

/// Thresholded TA score lookup with bounds checking.
inline double ta_score(const TaScoreField& field, int x, int y) {
    if (x < 0 || y < x || y >= field.size) throw IndexError("ta_score: require 0 <= x <= y < N");
    return field.score(x, y);
}

} // namespace ltri
