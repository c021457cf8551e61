#include "pslab/pud.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "pslab/assignment.hpp"
#include "pslab/rng.hpp"

namespace pslab {

std::vector<Embedding> cross_attend(const std::vector<Embedding>& visual,
                                    const std::vector<Embedding>& text) {
    if (text.empty()) throw std::invalid_argument("cross_attend: empty text rows");
    const std::size_t dim = text[0].size();
    for (const auto& t : text)
        if (t.size() != dim) throw std::invalid_argument("cross_attend: ragged text rows");
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));

    std::vector<Embedding> out;
    out.reserve(visual.size());
    for (const auto& v : visual) {
        if (v.size() != dim) throw std::invalid_argument("cross_attend: dimension mismatch");
        std::vector<double> logits(text.size());
        for (std::size_t j = 0; j < text.size(); ++j) logits[j] = dot(v, text[j]) * scale;
        const std::vector<double> w = softmax(logits);
        Embedding row(dim, 0.0);
        for (std::size_t j = 0; j < text.size(); ++j) axpy(w[j], text[j], row);
        out.push_back(std::move(row));
    }
    return out;
}

ScaleParam::ScaleParam(double m) : mu(m) {
    if (!(m > 0.0)) throw std::invalid_argument("ScaleParam: mu must be positive");
}

std::vector<double> region_scale(const std::vector<Embedding>& visual,
                                 const std::vector<Embedding>& salient, const ScaleParam& mu) {
    if (visual.size() != salient.size())
        throw std::invalid_argument("region_scale: row count mismatch");
    std::vector<double> out(visual.size());
    const double denom = 2.0 * mu.mu * mu.mu;
    for (std::size_t i = 0; i < visual.size(); ++i) {
        const double s = cosine(visual[i], salient[i]);  // throws on zero-norm rows
        out[i] = std::exp(-(1.0 - s) / denom);
    }
    return out;
}

std::vector<Embedding> augment(const std::vector<Embedding>& visual,
                               const std::vector<double>& scale) {
    if (visual.size() != scale.size()) throw std::invalid_argument("augment: length mismatch");
    std::vector<Embedding> out(visual.size());
    for (std::size_t i = 0; i < visual.size(); ++i) {
        out[i] = visual[i];
        for (double& x : out[i]) x *= scale[i];
    }
    return out;
}

PrototypeBank::PrototypeBank(std::size_t num_prototypes, std::size_t dim, double momentum,
                             std::uint64_t seed)
    : dim_(dim), momentum_(momentum), protos_(num_prototypes * dim), counts_(num_prototypes, 0) {
    if (num_prototypes == 0 || dim == 0)
        throw std::invalid_argument("PrototypeBank: empty bank");
    if (!(momentum > 0.0) || !(momentum < 1.0)) {
        if (momentum != 0.0)  // m = 0 (replacement) allowed for tests
            throw std::invalid_argument("PrototypeBank: momentum must be in [0,1)");
    }
    Rng rng(seed);
    for (std::size_t k = 0; k < num_prototypes; ++k) {
        double nrm2 = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double x = rng.normal();
            protos_[k * dim + d] = x;
            nrm2 += x * x;
        }
        const double inv = 1.0 / std::sqrt(nrm2);
        for (std::size_t d = 0; d < dim; ++d) protos_[k * dim + d] *= inv;
    }
}

Embedding PrototypeBank::prototype(std::size_t i) const {
    if (i >= counts_.size()) throw std::out_of_range("PrototypeBank::prototype: index");
    return Embedding(protos_.begin() + static_cast<std::ptrdiff_t>(i * dim_),
                     protos_.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim_));
}

std::size_t PrototypeBank::assign(const Embedding& f) const {
    if (f.size() != dim_) throw std::invalid_argument("PrototypeBank::assign: dimension mismatch");
    std::size_t best = 0;
    double best_d2 = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < counts_.size(); ++k) {
        double d2 = 0.0;
        const double* p = &protos_[k * dim_];
        for (std::size_t d = 0; d < dim_; ++d) {
            const double diff = f[d] - p[d];
            d2 += diff * diff;
        }
        if (d2 < best_d2) {
            best_d2 = d2;
            best = k;
        }
    }
    return best;
}

void PrototypeBank::update(const std::vector<std::pair<std::size_t, Embedding>>& assigned) {
    if (assigned.empty()) return;
    // gather per-prototype means
    std::vector<std::size_t> hits;
    std::vector<Embedding> sums(counts_.size());
    std::vector<std::size_t> n(counts_.size(), 0);
    for (const auto& [idx, f] : assigned) {
        if (idx >= counts_.size()) throw std::out_of_range("PrototypeBank::update: index");
        if (f.size() != dim_) throw std::invalid_argument("PrototypeBank::update: dimension");
        if (n[idx] == 0) {
            sums[idx].assign(dim_, 0.0);
            hits.push_back(idx);
        }
        axpy(1.0, f, sums[idx]);
        ++n[idx];
    }
    std::sort(hits.begin(), hits.end());
    for (std::size_t idx : hits) {
        double nrm2 = 0.0;
        for (std::size_t d = 0; d < dim_; ++d) {
            const double mean = sums[idx][d] / static_cast<double>(n[idx]);
            const double v = momentum_ * protos_[idx * dim_ + d] + (1.0 - momentum_) * mean;
            protos_[idx * dim_ + d] = v;
            nrm2 += v * v;
        }
        if (nrm2 <= 0.0)
            throw std::runtime_error("PrototypeBank::update: degenerate prototype");
        const double inv = 1.0 / std::sqrt(nrm2);
        for (std::size_t d = 0; d < dim_; ++d) protos_[idx * dim_ + d] *= inv;
        counts_[idx] += n[idx];
    }
}

void PrototypeBank::restore(const std::vector<double>& flat,
                            const std::vector<std::uint64_t>& counts) {
    if (flat.size() != protos_.size() || counts.size() != counts_.size())
        throw std::invalid_argument("PrototypeBank::restore: shape mismatch");
    protos_ = flat;
    counts_ = counts;
}

double ptc_loss(const std::vector<Embedding>& protos, const std::vector<Embedding>& texts,
                double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("ptc_loss: tau must be positive");
    if (protos.size() != texts.size() || protos.empty())
        throw std::invalid_argument("ptc_loss: need equal nonempty proto/text counts");
    const std::size_t k = protos.size();

    Mat sim(k, k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) sim(i, j) = cosine(protos[i], texts[j]) / tau;

    auto direction = [&](bool rows) {
        double total = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < k; ++j) m = std::max(m, rows ? sim(i, j) : sim(j, i));
            double z = 0.0;
            for (std::size_t j = 0; j < k; ++j) z += std::exp((rows ? sim(i, j) : sim(j, i)) - m);
            total += -(sim(i, i) - m - std::log(z));
        }
        return total / static_cast<double>(k);
    };
    return 0.5 * (direction(true) + direction(false));
}

std::vector<Embedding> fuse_multimodal(const std::vector<Embedding>& f_pro,
                                       const std::vector<Embedding>& text, double tau_fuse) {
    if (text.empty()) throw std::invalid_argument("fuse_multimodal: empty text rows");
    if (!(tau_fuse > 0.0)) throw std::invalid_argument("fuse_multimodal: tau must be positive");
    const std::size_t dim = text[0].size();

    Embedding mean(dim, 0.0);
    for (const auto& row : f_pro) {
        if (row.size() != dim) throw std::invalid_argument("fuse_multimodal: dimension mismatch");
        axpy(1.0, row, mean);
    }
    if (!f_pro.empty())
        for (double& x : mean) x /= static_cast<double>(f_pro.size());

    std::vector<double> logits(text.size());
    for (std::size_t j = 0; j < text.size(); ++j)
        logits[j] = cosine(mean, text[j], /*allow_zero=*/true) / tau_fuse;
    const std::vector<double> w = softmax(logits);

    Embedding pooled(dim, 0.0);
    for (std::size_t j = 0; j < text.size(); ++j) axpy(w[j], text[j], pooled);

    std::vector<Embedding> out(f_pro.size());
    for (std::size_t i = 0; i < f_pro.size(); ++i) {
        out[i].resize(dim);
        for (std::size_t d = 0; d < dim; ++d) out[i][d] = std::tanh(f_pro[i][d]) * pooled[d];
    }
    return out;
}

HeadOutput box_head(const Embedding& f_multi, const BoxHead& params) {
    if (params.weight.cols != f_multi.size() || params.weight.rows != 5 || params.bias.size() != 5)
        throw std::invalid_argument("box_head: parameter shape mismatch");
    for (double w : params.weight.data)
        if (!std::isfinite(w)) throw std::invalid_argument("box_head: non-finite weight");
    for (double b : params.bias)
        if (!std::isfinite(b)) throw std::invalid_argument("box_head: non-finite bias");

    double z[5];
    for (std::size_t r = 0; r < 5; ++r) {
        double acc = params.bias[r];
        for (std::size_t d = 0; d < f_multi.size(); ++d) acc += params.weight(r, d) * f_multi[d];
        z[r] = acc;
    }
    // clamp away from {0,1} so extreme logits still produce a valid box
    const double eps = 1e-6;
    auto squash = [eps](double v) { return std::clamp(sigmoid(v), eps, 1.0 - eps); };
    const double cx = squash(z[0]);
    const double cy = squash(z[1]);
    const double w = squash(z[2]);
    const double h = squash(z[3]);
    const double x1 = cx * (1.0 - w);
    const double y1 = cy * (1.0 - h);
    return {Box(x1, y1, x1 + w, y1 + h), sigmoid(z[4])};
}

double pud_loss(double ptc, const std::vector<Box>& pred_boxes,
                const std::vector<Box>& gt_boxes) {
    CostMatrix cost(pred_boxes.size(), gt_boxes.size());
    for (std::size_t r = 0; r < pred_boxes.size(); ++r)
        for (std::size_t c = 0; c < gt_boxes.size(); ++c)
            cost.at(r, c) = box_loss(pred_boxes[r], gt_boxes[c]);
    const Matching m = solve_assignment(cost);
    double reg = 0.0;
    for (const auto& [r, c] : m.pairs) reg += box_loss(pred_boxes[r], gt_boxes[c]);
    return ptc + reg;
}

}  // namespace pslab
