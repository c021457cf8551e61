#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "pslab/geometry.hpp"
#include "pslab/linalg.hpp"

namespace pslab {

// Rectangular cost matrix: rows = predictions, cols = ground truths.
struct CostMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major

    CostMatrix() = default;
    CostMatrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct Matching {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (row, col), sorted by row
    std::vector<std::size_t> unmatched_rows;                 // ascending
    double total_cost = 0.0;
};

// Minimum-cost injective assignment of the smaller side into the larger
// (Kuhn-Munkres with potentials, O(n^3)). Deterministic: ties are resolved by
// the fixed ascending scan order, which prefers lower column indices.
// Empty matrices yield an empty matching; NaN entries are an error.
Matching solve_assignment(const CostMatrix& cost);

// One decoder slot: box plus a (person, no-object) logit pair.
struct Prediction {
    Box box;
    double logit_person = 0.0;
    double logit_no_object = 0.0;

    double p_person() const;
    double p_no_object() const;
};

struct GtBox {
    Box box;
    int class_id = 0;  // single foreground class
};

struct SetLossOptions {
    double no_object_weight = 0.1;
    // When false (default), the matching cost uses the raw class probability
    // (as (1 - p) so entries stay nonnegative); when true it uses the clamped
    // negative log probability, matching the loss itself.
    bool log_prob_in_matching = false;
    double prob_floor = 1e-12;  // clamp for log terms
};

// Matching cost between every prediction and ground truth: class term plus
// box_loss, per SetLossOptions.
CostMatrix detection_cost_matrix(const std::vector<Prediction>& preds,
                                 const std::vector<GtBox>& gts,
                                 const SetLossOptions& opts = {});

// Set-prediction loss over one scene: for Hungarian-matched pairs,
// -log p(person) + box_loss; unmatched predictions pay
// no_object_weight * -log p(no-object). Requires #preds >= #gts.
double mue_loss(const std::vector<Prediction>& preds, const std::vector<GtBox>& gts,
                const SetLossOptions& opts = {});

// Same, also exposing the matching actually used (for gradients/diagnostics).
struct SetLossResult {
    double loss = 0.0;
    Matching matching;
};
SetLossResult mue_loss_detailed(const std::vector<Prediction>& preds, const std::vector<GtBox>& gts,
                                const SetLossOptions& opts = {});

}  // namespace pslab
