#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pslab/geometry.hpp"
#include "pslab/linalg.hpp"

namespace pslab {

// Parameter-free single-head scaled dot-product cross-attention:
// queries = visual rows, keys = values = text rows. Each output row is a
// convex combination of text rows.
std::vector<Embedding> cross_attend(const std::vector<Embedding>& visual,
                                    const std::vector<Embedding>& text);

// Region-specific scaling factor t_i = exp(-(1 - S_i) / (2 mu^2)) with
// S_i the cosine similarity of corresponding visual/salient rows. t in (0,1],
// t = 1 iff S = 1, monotone increasing in S.
struct ScaleParam {
    double mu = 0.5;
    explicit ScaleParam(double m = 0.5);
};
std::vector<double> region_scale(const std::vector<Embedding>& visual,
                                 const std::vector<Embedding>& salient, const ScaleParam& mu);

// Row-wise rescaling of the visual features by their region factors.
std::vector<Embedding> augment(const std::vector<Embedding>& visual,
                               const std::vector<double>& scale);

// Fixed-size set of unit-norm cluster centers with momentum updates.
class PrototypeBank {
public:
    PrototypeBank(std::size_t num_prototypes, std::size_t dim, double momentum,
                  std::uint64_t seed);

    std::size_t size() const { return counts_.size(); }
    std::size_t dim() const { return dim_; }
    double momentum() const { return momentum_; }
    Embedding prototype(std::size_t i) const;
    std::uint64_t usage_count(std::size_t i) const { return counts_[i]; }

    // Nearest prototype by Euclidean distance; ties break to the lowest index.
    std::size_t assign(const Embedding& f) const;

    // EMA update: for each prototype with assignments,
    // p <- normalize(m*p + (1-m)*mean(features)); counts incremented per
    // assigned feature. Out-of-range indices are an error.
    void update(const std::vector<std::pair<std::size_t, Embedding>>& assigned);

    // Flat K x D row-major snapshot, for serialization/restore.
    std::vector<double> snapshot() const { return protos_; }
    void restore(const std::vector<double>& flat, const std::vector<std::uint64_t>& counts);

private:
    std::size_t dim_;
    double momentum_;
    std::vector<double> protos_;  // K x D row-major, unit rows
    std::vector<std::uint64_t> counts_;
};

// Symmetric prototype/text InfoNCE over cosine similarity: the mean of the
// prototype-to-text and text-to-prototype directions. tau must be positive.
double ptc_loss(const std::vector<Embedding>& protos, const std::vector<Embedding>& texts,
                double tau);

// Multimodal gate: F_multi_i = tanh(F_pro_i) ⊙ w where w pools the text rows
// by relevance-softmax against the mean augmented visual feature.
std::vector<Embedding> fuse_multimodal(const std::vector<Embedding>& f_pro,
                                       const std::vector<Embedding>& text,
                                       double tau_fuse = 0.07);

// Affine regression head standing in for the learned decoder: D -> 5 logits,
// sigmoid to (cx, cy, w, h) in (0,1) plus a confidence. The corner mapping
// x1 = cx*(1-w), x2 = x1 + w (same for y) keeps every box strictly valid.
struct BoxHead {
    Mat weight;              // 5 x D
    std::vector<double> bias;  // 5

    BoxHead() = default;
    BoxHead(std::size_t dim, double fill = 0.0) : weight(5, dim, fill), bias(5, fill) {}
};

struct HeadOutput {
    Box box;
    double confidence = 0.0;
};
HeadOutput box_head(const Embedding& f_multi, const BoxHead& params);

// L_PTC plus the matched regression term (box_loss over the optimal pairing
// of predicted and ground-truth boxes).
double pud_loss(double ptc, const std::vector<Box>& pred_boxes, const std::vector<Box>& gt_boxes);

}  // namespace pslab
