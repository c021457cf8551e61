#include "pslab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace pslab {

void sort_ranked(std::vector<RankedEntry>& ranked) {
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedEntry& a, const RankedEntry& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.gallery_id < b.gallery_id;
    });
}

bool is_correct(const Box& pred, const std::vector<Box>& gts, double iou_threshold) {
    if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
        throw std::invalid_argument("is_correct: threshold in (0,1)");
    for (const Box& g : gts)
        if (iou(pred, g) >= iou_threshold) return true;
    return false;
}

namespace {

// relevance flags down the ranked list with one-credit-per-GT bookkeeping
std::vector<bool> relevance_flags(const QueryResult& result, double iou_threshold) {
    std::vector<bool> credited(result.ground_truth.size(), false);
    std::vector<bool> rel(result.ranked.size(), false);
    for (std::size_t k = 0; k < result.ranked.size(); ++k) {
        const RankedEntry& e = result.ranked[k];
        double best_iou = -1.0;
        std::size_t best_g = 0;
        for (std::size_t g = 0; g < result.ground_truth.size(); ++g) {
            if (credited[g]) continue;
            if (result.ground_truth[g].gallery_id != e.gallery_id) continue;
            const double v = iou(e.box, result.ground_truth[g].box);
            if (v >= iou_threshold && v > best_iou) {
                best_iou = v;
                best_g = g;
            }
        }
        if (best_iou >= 0.0) {
            credited[best_g] = true;
            rel[k] = true;
        }
    }
    return rel;
}

}  // namespace

double average_precision(const QueryResult& result, double iou_threshold) {
    if (result.ground_truth.empty())
        throw std::invalid_argument("average_precision: empty ground truth");
    const std::vector<bool> rel = relevance_flags(result, iou_threshold);
    double ap = 0.0;
    std::size_t hits = 0;
    for (std::size_t k = 0; k < rel.size(); ++k) {
        if (!rel[k]) continue;
        ++hits;
        ap += static_cast<double>(hits) / static_cast<double>(k + 1);
    }
    return ap / static_cast<double>(result.ground_truth.size());
}

double cmc_at_k(const std::vector<QueryResult>& results, std::size_t k, double iou_threshold) {
    if (k < 1) throw std::invalid_argument("cmc_at_k: k >= 1");
    if (results.empty()) return 0.0;
    std::size_t hit = 0;
    for (const QueryResult& q : results) {
        std::vector<Box> gts_in_img;
        const std::size_t upto = std::min(k, q.ranked.size());
        for (std::size_t r = 0; r < upto; ++r) {
            gts_in_img.clear();
            for (const GtEntry& g : q.ground_truth)
                if (g.gallery_id == q.ranked[r].gallery_id) gts_in_img.push_back(g.box);
            if (!gts_in_img.empty() && is_correct(q.ranked[r].box, gts_in_img, iou_threshold)) {
                ++hit;
                break;
            }
        }
    }
    return static_cast<double>(hit) / static_cast<double>(results.size());
}

double davies_bouldin(const std::vector<Embedding>& points,
                      const std::vector<std::int64_t>& labels) {
    if (points.size() != labels.size())
        throw std::invalid_argument("davies_bouldin: size mismatch");
    std::map<std::int64_t, std::vector<std::size_t>> clusters;
    for (std::size_t i = 0; i < labels.size(); ++i) clusters[labels[i]].push_back(i);
    if (clusters.size() < 2) throw std::invalid_argument("davies_bouldin: need >= 2 clusters");

    const std::size_t dim = points.empty() ? 0 : points[0].size();
    std::vector<Embedding> centroids;
    std::vector<double> scatter;
    for (const auto& [label, idxs] : clusters) {
        Embedding c(dim, 0.0);
        for (std::size_t i : idxs) {
            if (points[i].size() != dim)
                throw std::invalid_argument("davies_bouldin: ragged points");
            axpy(1.0, points[i], c);
        }
        for (double& x : c) x /= static_cast<double>(idxs.size());
        double s = 0.0;
        for (std::size_t i : idxs) {
            double d2 = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = points[i][d] - c[d];
                d2 += diff * diff;
            }
            s += std::sqrt(d2);
        }
        centroids.push_back(std::move(c));
        scatter.push_back(s / static_cast<double>(idxs.size()));
    }

    const std::size_t m = centroids.size();
    double total = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        double worst = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (i == j) continue;
            double d2 = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = centroids[i][d] - centroids[j][d];
                d2 += diff * diff;
            }
            const double dist = std::sqrt(d2);
            if (dist <= 0.0)
                throw std::domain_error("davies_bouldin: coincident centroids");
            worst = std::max(worst, (scatter[i] + scatter[j]) / dist);
        }
        total += worst;
    }
    return total / static_cast<double>(m);
}

}  // namespace pslab
