#include "pslab/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pslab {

namespace {

// Kuhn-Munkres on an n x n matrix via shortest augmenting paths with
// potentials. Returns row -> col. Deterministic for a fixed input.
std::vector<std::size_t> hungarian_square(const std::vector<double>& cost, std::size_t n) {
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            std::size_t j1 = 0;
            double delta = inf;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> row_to_col(n, 0);
    for (std::size_t j = 1; j <= n; ++j) row_to_col[p[j] - 1] = j - 1;
    return row_to_col;
}

}  // namespace

Matching solve_assignment(const CostMatrix& cost) {
    Matching out;
    if (cost.rows == 0 || cost.cols == 0) {
        for (std::size_t r = 0; r < cost.rows; ++r) out.unmatched_rows.push_back(r);
        return out;
    }
    for (double x : cost.data)
        if (std::isnan(x)) throw std::invalid_argument("solve_assignment: NaN cost entry");

    // single row/column: direct argmin, first minimum wins
    if (cost.rows == 1) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < cost.cols; ++c)
            if (cost.at(0, c) < cost.at(0, best)) best = c;
        out.pairs.emplace_back(0, best);
        out.total_cost = cost.at(0, best);
        return out;
    }
    if (cost.cols == 1) {
        std::size_t best = 0;
        for (std::size_t r = 1; r < cost.rows; ++r)
            if (cost.at(r, 0) < cost.at(best, 0)) best = r;
        out.pairs.emplace_back(best, 0);
        out.total_cost = cost.at(best, 0);
        for (std::size_t r = 0; r < cost.rows; ++r)
            if (r != best) out.unmatched_rows.push_back(r);
        return out;
    }

    // Pad to square with zeros. Every perfect matching of the padded matrix
    // contains the same number of dummy entries, so the optimum over real
    // pairs is preserved.
    const std::size_t n = std::max(cost.rows, cost.cols);
    std::vector<double> padded(n * n, 0.0);
    for (std::size_t r = 0; r < cost.rows; ++r)
        for (std::size_t c = 0; c < cost.cols; ++c) padded[r * n + c] = cost.at(r, c);

    const std::vector<std::size_t> row_to_col = hungarian_square(padded, n);
    for (std::size_t r = 0; r < cost.rows; ++r) {
        const std::size_t c = row_to_col[r];
        if (c < cost.cols) {
            out.pairs.emplace_back(r, c);
            out.total_cost += cost.at(r, c);
        } else {
            out.unmatched_rows.push_back(r);
        }
    }
    std::sort(out.pairs.begin(), out.pairs.end());
    return out;
}

double Prediction::p_person() const {
    return sigmoid(logit_person - logit_no_object);
}

double Prediction::p_no_object() const {
    return sigmoid(logit_no_object - logit_person);
}

namespace {

double clamped_neg_log(double p, double floor) {
    return -std::log(std::max(p, floor));
}

}  // namespace

CostMatrix detection_cost_matrix(const std::vector<Prediction>& preds,
                                 const std::vector<GtBox>& gts, const SetLossOptions& opts) {
    CostMatrix cost(preds.size(), gts.size());
    for (std::size_t r = 0; r < preds.size(); ++r) {
        if (!std::isfinite(preds[r].logit_person) || !std::isfinite(preds[r].logit_no_object))
            throw std::invalid_argument("detection_cost_matrix: non-finite logits");
        const double p = preds[r].p_person();
        const double cls = opts.log_prob_in_matching ? clamped_neg_log(p, opts.prob_floor)
                                                     : (1.0 - p);
        for (std::size_t c = 0; c < gts.size(); ++c)
            cost.at(r, c) = cls + box_loss(preds[r].box, gts[c].box);
    }
    return cost;
}

SetLossResult mue_loss_detailed(const std::vector<Prediction>& preds,
                                const std::vector<GtBox>& gts, const SetLossOptions& opts) {
    if (gts.size() > preds.size())
        throw std::invalid_argument("mue_loss: more ground truths than prediction slots");
    SetLossResult res;
    res.matching = solve_assignment(detection_cost_matrix(preds, gts, opts));
    double loss = 0.0;
    for (const auto& [r, c] : res.matching.pairs) {
        loss += clamped_neg_log(preds[r].p_person(), opts.prob_floor);
        loss += box_loss(preds[r].box, gts[c].box);
    }
    for (std::size_t r : res.matching.unmatched_rows)
        loss += opts.no_object_weight * clamped_neg_log(preds[r].p_no_object(), opts.prob_floor);
    res.loss = loss;
    return res;
}

double mue_loss(const std::vector<Prediction>& preds, const std::vector<GtBox>& gts,
                const SetLossOptions& opts) {
    return mue_loss_detailed(preds, gts, opts).loss;
}

}  // namespace pslab
