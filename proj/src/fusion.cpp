#include "pslab/fusion.hpp"

#include <algorithm>
#include <stdexcept>
#include <tuple>

namespace pslab {

std::vector<FusedCandidate> fuse_candidates(const std::vector<ScoredCandidate>& mue,
                                            const std::vector<ScoredCandidate>& pud,
                                            double iou_threshold, double beta) {
    if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("fuse_candidates: beta in [0,1]");
    if (!(iou_threshold > 0.0 && iou_threshold < 1.0))
        throw std::invalid_argument("fuse_candidates: threshold in (0,1)");

    struct Pair {
        double iou;
        std::size_t i, j;
    };
    std::vector<Pair> pairs;
    for (std::size_t i = 0; i < mue.size(); ++i)
        for (std::size_t j = 0; j < pud.size(); ++j) {
            const double v = iou(mue[i].box, pud[j].box);
            if (v > iou_threshold) pairs.push_back({v, i, j});
        }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        return std::tie(b.iou, a.i, a.j) < std::tie(a.iou, b.i, b.j);  // iou desc, then indices asc
    });

    std::vector<char> used_i(mue.size(), 0), used_j(pud.size(), 0);
    std::vector<FusedCandidate> out;
    for (const Pair& p : pairs) {
        if (used_i[p.i] || used_j[p.j]) continue;
        used_i[p.i] = used_j[p.j] = 1;
        FusedCandidate f;
        const double ci = mue[p.i].confidence;
        const double cj = pud[p.j].confidence;
        f.box = (ci >= cj) ? mue[p.i].box : pud[p.j].box;
        f.score = (1.0 - beta) * ci + beta * cj;
        f.mue_index = p.i;
        f.pud_index = p.j;
        f.pair_iou = p.iou;
        out.push_back(f);
    }
    std::sort(out.begin(), out.end(), [](const FusedCandidate& a, const FusedCandidate& b) {
        return std::tie(b.score, b.pair_iou, a.mue_index) < std::tie(a.score, a.pair_iou, b.mue_index);
    });
    return out;
}

std::optional<FinalSelection> select_final(const std::vector<FusedCandidate>& fused,
                                           const std::vector<ScoredCandidate>& fallback_mue,
                                           const std::vector<ScoredCandidate>& fallback_pud,
                                           double beta) {
    if (!fused.empty()) return FinalSelection{fused.front().box, fused.front().score, true};

    bool have = false;
    FinalSelection best{};
    auto consider = [&](const ScoredCandidate& c, double weight) {
        const double s = weight * c.confidence;
        if (!have || s > best.score) {
            best = FinalSelection{c.box, s, false};
            have = true;
        }
    };
    for (const auto& c : fallback_mue) consider(c, 1.0 - beta);
    for (const auto& c : fallback_pud) consider(c, beta);
    if (!have) return std::nullopt;
    return best;
}

}  // namespace pslab
