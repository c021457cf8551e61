#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "pslab/geometry.hpp"
#include "pslab/linalg.hpp"

namespace pslab {

struct RankedEntry {
    std::int64_t gallery_id = 0;
    Box box;
    double score = 0.0;
};

struct GtEntry {
    std::int64_t gallery_id = 0;
    Box box;
};

// One query's ranked gallery predictions plus the target's ground truth
// locations. The ranked list must be sorted by score descending; equal scores
// break by gallery id ascending (the deterministic part of the contract).
struct QueryResult {
    std::int64_t query_id = 0;
    std::vector<RankedEntry> ranked;
    std::vector<GtEntry> ground_truth;
};

void sort_ranked(std::vector<RankedEntry>& ranked);

// True iff the prediction overlaps some ground-truth box with IoU >= threshold
// (inclusive boundary).
bool is_correct(const Box& pred, const std::vector<Box>& gts, double iou_threshold);

// Raw (non-interpolated) average precision: sum of precision@k over relevant
// ranks divided by the ground-truth count. A ranked entry is relevant when it
// overlaps an uncredited ground-truth box in the same gallery image; each
// ground truth is creditable once (highest-IoU match credited first, lowest
// index on ties).
double average_precision(const QueryResult& result, double iou_threshold);

// Fraction of queries whose first correct match appears at rank <= k.
double cmc_at_k(const std::vector<QueryResult>& results, std::size_t k, double iou_threshold);

// Davies-Bouldin index: mean over clusters of the worst pairwise
// (sigma_i + sigma_j) / d(c_i, c_j), sigma = mean distance to the centroid.
// Needs at least two clusters, each nonempty; coincident centroids are an
// error.
double davies_bouldin(const std::vector<Embedding>& points, const std::vector<std::int64_t>& labels);

}  // namespace pslab
