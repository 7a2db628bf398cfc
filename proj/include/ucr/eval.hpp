#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ucr/matrix.hpp"

// Ranking and Recall@K. rank() is the production path; recall_oracle() is an
// independent O(n^2) recomputation kept for equivalence testing and never
// shares code with it.

namespace ucr::eval {

enum class Stratum { All, CoarseOnly, FineOnly };

inline const char* stratum_name(Stratum s) {
    switch (s) {
        case Stratum::All: return "all";
        case Stratum::CoarseOnly: return "coarse";
        case Stratum::FineOnly: return "fine";
    }
    return "?";
}

struct RecallReport {
    Stratum stratum = Stratum::All;
    int n_queries = 0;
    std::map<int, double> per_k;
    // Hit if any structurally valid target lands in the top K. Supplementary
    // diagnostic for coarse one-to-many queries; not part of the standard
    // protocol, which scores the labeled target only.
    std::optional<std::map<int, double>> per_k_any;
};

// Gallery ids ordered by descending cosine similarity to the query; ties
// broken by ascending id so rankings are reproducible.
inline std::vector<int> rank(std::span<const double> query, const Matrix& gallery) {
    std::vector<double> sims(gallery.rows);
    for (std::size_t i = 0; i < gallery.rows; ++i)
        sims[i] = cosine_sim(query, gallery.row(i));
    std::vector<int> ids(gallery.rows);
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(),
                     [&](int a, int b) { return sims[a] > sims[b]; });
    return ids;
}

inline RecallReport recall_at_k(const std::vector<std::vector<int>>& ranked,
                                const std::vector<int>& targets,
                                const std::vector<int>& ks,
                                Stratum stratum = Stratum::All) {
    if (ranked.size() != targets.size())
        throw std::invalid_argument("recall_at_k: ranked/target count mismatch");
    RecallReport report;
    report.stratum = stratum;
    report.n_queries = static_cast<int>(ranked.size());
    std::vector<int> hit_rank(ranked.size());
    for (std::size_t q = 0; q < ranked.size(); ++q) {
        const auto& ids = ranked[q];
        auto it = std::find(ids.begin(), ids.end(), targets[q]);
        if (it == ids.end())
            throw std::invalid_argument("recall_at_k: labeled target " +
                                        std::to_string(targets[q]) +
                                        " missing from gallery ranking");
        hit_rank[q] = static_cast<int>(it - ids.begin()) + 1;  // 1-based
    }
    for (int k : ks) {
        if (ranked.empty()) {
            report.per_k[k] = 0.0;
            continue;
        }
        int hits = 0;
        for (int r : hit_rank)
            if (r <= k) ++hits;
        report.per_k[k] = static_cast<double>(hits) / static_cast<double>(ranked.size());
    }
    return report;
}

// Fraction of queries with any of their valid targets in the top K.
inline std::map<int, double> recall_any_valid(
    const std::vector<std::vector<int>>& ranked,
    const std::vector<std::vector<int>>& valid_sets, const std::vector<int>& ks) {
    if (ranked.size() != valid_sets.size())
        throw std::invalid_argument("recall_any_valid: count mismatch");
    std::map<int, double> out;
    for (int k : ks) {
        if (ranked.empty()) {
            out[k] = 0.0;
            continue;
        }
        int hits = 0;
        for (std::size_t q = 0; q < ranked.size(); ++q) {
            const auto& ids = ranked[q];
            const auto end = ids.begin() + std::min<std::size_t>(k, ids.size());
            if (std::any_of(valid_sets[q].begin(), valid_sets[q].end(), [&](int v) {
                    return std::find(ids.begin(), end, v) != end;
                }))
                ++hits;
        }
        out[k] = static_cast<double>(hits) / static_cast<double>(ranked.size());
    }
    return out;
}

// Brute-force recomputation: full pairwise similarity, naive selection count.
// A query is a hit at K when at most K-1 gallery items outrank its target
// (higher similarity, or equal similarity with a lower id).
inline double recall_oracle(const Matrix& queries, const Matrix& gallery,
                            const std::vector<int>& targets, int k) {
    if (queries.rows != targets.size())
        throw std::invalid_argument("recall_oracle: query/target count mismatch");
    if (queries.rows == 0) return 0.0;
    int hits = 0;
    for (std::size_t q = 0; q < queries.rows; ++q) {
        const int tgt = targets[q];
        if (tgt < 0 || tgt >= static_cast<int>(gallery.rows))
            throw std::invalid_argument("recall_oracle: target missing from gallery");
        const double tgt_sim = cosine_sim(queries.row(q), gallery.row(tgt));
        int outranked = 0;
        for (std::size_t g = 0; g < gallery.rows; ++g) {
            if (static_cast<int>(g) == tgt) continue;
            const double s = cosine_sim(queries.row(q), gallery.row(g));
            if (s > tgt_sim || (s == tgt_sim && static_cast<int>(g) < tgt)) ++outranked;
        }
        if (outranked < k) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(queries.rows);
}

}  // namespace ucr::eval
