#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "pslab/geometry.hpp"

namespace pslab {

enum class CandidateSource { Mue, Pud };

struct ScoredCandidate {
    Box box;
    double confidence = 0.0;  // in [0, 1]
    CandidateSource source = CandidateSource::Mue;
};

struct FusedCandidate {
    Box box;          // the higher-confidence member's box
    double score = 0.0;  // R = (1-beta)*c_mue + beta*c_pud
    std::size_t mue_index = 0;
    std::size_t pud_index = 0;
    double pair_iou = 0.0;
};

// Greedy one-to-one pairing of detection-path and text-path candidates whose
// IoU exceeds the threshold, in descending IoU order. Each pair is scored
// R = (1-beta)*c_i + beta*c_j; the fused box is the box of the
// higher-confidence member (detection path wins ties). Output is sorted by R
// descending with ties broken by higher IoU, then lower detection index.
// Unmatched candidates are excluded.
std::vector<FusedCandidate> fuse_candidates(const std::vector<ScoredCandidate>& mue,
                                            const std::vector<ScoredCandidate>& pud,
                                            double iou_threshold, double beta);

struct FinalSelection {
    Box box;
    double score = 0.0;
    bool fused = false;  // false when the fallback path produced the box
};

// Final per-image prediction: the top fused candidate when any pair matched;
// otherwise the best single candidate across both paths, weighted by (1-beta)
// for the detection path and beta for the text path. Empty inputs yield
// nullopt (an explicit no-detection result).
std::optional<FinalSelection> select_final(const std::vector<FusedCandidate>& fused,
                                           const std::vector<ScoredCandidate>& fallback_mue,
                                           const std::vector<ScoredCandidate>& fallback_pud,
                                           double beta);

}  // namespace pslab
