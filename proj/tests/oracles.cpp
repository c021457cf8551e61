#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace oracles {

using pslab::Box;
using pslab::CostMatrix;
using pslab::Embedding;
using pslab::QueryResult;
using pslab::Rng;

namespace {

void enumerate(const CostMatrix& cost, std::vector<char>& used_cols, std::size_t row,
               std::size_t depth, double acc, double& best) {
    const std::size_t k = std::min(cost.rows, cost.cols);
    if (depth == k) {
        best = std::min(best, acc);
        return;
    }
    if (row >= cost.rows) return;
    // either skip this row (only legal when rows > cols) or assign it
    if (cost.rows - row - 1 + depth >= k)
        enumerate(cost, used_cols, row + 1, depth, acc, best);
    for (std::size_t c = 0; c < cost.cols; ++c) {
        if (used_cols[c]) continue;
        used_cols[c] = 1;
        enumerate(cost, used_cols, row + 1, depth + 1, acc + cost.at(row, c), best);
        used_cols[c] = 0;
    }
}

}  // namespace

double brute_force_assignment_cost(const CostMatrix& cost) {
    if (cost.rows == 0 || cost.cols == 0) return 0.0;
    double best = std::numeric_limits<double>::infinity();
    std::vector<char> used(cost.cols, 0);
    enumerate(cost, used, 0, 0, 0.0, best);
    return best;
}

namespace {

// number of grid cells (of width res) whose centers lie in [lo, hi)
long long cells_inside(double lo, double hi, double res, long long n_cells) {
    long long count = 0;
    for (long long i = 0; i < n_cells; ++i) {
        const double center = (static_cast<double>(i) + 0.5) * res;
        if (center >= lo && center < hi) ++count;
    }
    return count;
}

long long cells_inside_both(double lo_a, double hi_a, double lo_b, double hi_b, double res,
                            long long n_cells) {
    long long count = 0;
    for (long long i = 0; i < n_cells; ++i) {
        const double center = (static_cast<double>(i) + 0.5) * res;
        if (center >= lo_a && center < hi_a && center >= lo_b && center < hi_b) ++count;
    }
    return count;
}

}  // namespace

double grid_count_iou(const Box& a, const Box& b, double resolution) {
    const long long n = static_cast<long long>(std::llround(1.0 / resolution));
    const long long ax = cells_inside(a.x1, a.x2, resolution, n);
    const long long ay = cells_inside(a.y1, a.y2, resolution, n);
    const long long bx = cells_inside(b.x1, b.x2, resolution, n);
    const long long by = cells_inside(b.y1, b.y2, resolution, n);
    const long long ix = cells_inside_both(a.x1, a.x2, b.x1, b.x2, resolution, n);
    const long long iy = cells_inside_both(a.y1, a.y2, b.y1, b.y2, resolution, n);
    const long long inter = ix * iy;
    const long long uni = ax * ay + bx * by - inter;
    if (uni == 0) return 0.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

double naive_average_precision(const QueryResult& result, double iou_threshold) {
    if (result.ground_truth.empty()) throw std::invalid_argument("naive AP: empty ground truth");
    std::vector<bool> credited(result.ground_truth.size(), false);
    double ap = 0.0;
    double hits = 0.0;
    for (std::size_t k = 0; k < result.ranked.size(); ++k) {
        // find the best uncredited ground truth in this image
        double best = -1.0;
        std::size_t best_g = 0;
        for (std::size_t g = 0; g < result.ground_truth.size(); ++g) {
            if (credited[g] || result.ground_truth[g].gallery_id != result.ranked[k].gallery_id)
                continue;
            const double v = pslab::iou(result.ranked[k].box, result.ground_truth[g].box);
            if (v >= iou_threshold && v > best) {
                best = v;
                best_g = g;
            }
        }
        if (best >= 0.0) {
            credited[best_g] = true;
            hits += 1.0;
            ap += hits / static_cast<double>(k + 1);
        }
    }
    return ap / static_cast<double>(result.ground_truth.size());
}

double naive_cmc_at_k(const std::vector<QueryResult>& results, std::size_t k,
                      double iou_threshold) {
    if (results.empty()) return 0.0;
    std::size_t hits = 0;
    for (const QueryResult& q : results) {
        bool found = false;
        for (std::size_t r = 0; r < q.ranked.size() && r < k && !found; ++r)
            for (const pslab::GtEntry& g : q.ground_truth)
                if (g.gallery_id == q.ranked[r].gallery_id &&
                    pslab::iou(q.ranked[r].box, g.box) >= iou_threshold) {
                    found = true;
                    break;
                }
        if (found) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(results.size());
}

double naive_davies_bouldin(const std::vector<Embedding>& points,
                            const std::vector<std::int64_t>& labels) {
    std::map<std::int64_t, std::vector<Embedding>> clusters;
    for (std::size_t i = 0; i < points.size(); ++i) clusters[labels[i]].push_back(points[i]);
    if (clusters.size() < 2) throw std::invalid_argument("naive DB: need >= 2 clusters");

    auto distance = [](const Embedding& a, const Embedding& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return std::sqrt(s);
    };

    std::vector<Embedding> centroids;
    std::vector<double> sigma;
    for (const auto& [label, members] : clusters) {
        Embedding c(members[0].size(), 0.0);
        for (const Embedding& m : members)
            for (std::size_t d = 0; d < c.size(); ++d) c[d] += m[d] / static_cast<double>(members.size());
        double s = 0.0;
        for (const Embedding& m : members) s += distance(m, c);
        centroids.push_back(c);
        sigma.push_back(s / static_cast<double>(members.size()));
    }

    double total = 0.0;
    for (std::size_t i = 0; i < centroids.size(); ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < centroids.size(); ++j) {
            if (i == j) continue;
            const double d = distance(centroids[i], centroids[j]);
            if (d <= 0.0) throw std::domain_error("naive DB: coincident centroids");
            worst = std::max(worst, (sigma[i] + sigma[j]) / d);
        }
        total += worst;
    }
    return total / static_cast<double>(centroids.size());
}

Box random_box(Rng& rng, double min_side, double max_side) {
    const double w = rng.uniform(min_side, max_side);
    const double h = rng.uniform(min_side, max_side);
    const double x1 = rng.uniform(0.0, 1.0 - w);
    const double y1 = rng.uniform(0.0, 1.0 - h);
    return Box(x1, y1, x1 + w, y1 + h);
}

}  // namespace oracles
