#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <unordered_map>
#include <vector>

#include "pslab/linalg.hpp"

namespace pslab {

// The stabilizer and the two softmax temperatures play incompatible roles, so
// they are kept apart even though notation often overloads them.
struct Temperatures {
    double rho = 0.07;      // class-level softmax temperature
    double eps_itc = 0.07;  // instance-level InfoNCE temperature
    double eps_kl = 1e-8;   // KL stabilizer
};

// Class-level alignment: KL(p || q) with p = row-softmax(sim / rho) and q the
// uniform distribution over the row's positives, averaged over rows, computed
// in both directions (rows and columns) and summed. Every row and column must
// contain at least one positive.
double sdm_kl_loss(const Mat& sim, const std::vector<std::vector<bool>>& positives, double rho,
                   double eps_kl);

// Instance-level contrast with positives on the diagonal:
// mean_i -log( exp(s_ii/eps) / sum_j exp(s_ij/eps) ).
double infonce_loss(const Mat& sim, double eps_itc);

// Cross-modal feature alignment: class-level plus instance-level.
double cfa_loss(double class_level, double instance_level);

// Norm-aware split of a feature into a detection confidence
// sigmoid((||f|| - a)/b) and a unit direction f/||f||.
struct NaeSplit {
    double confidence = 0.0;
    Embedding direction;
};
NaeSplit nae_split(const Embedding& f, double a, double b);

// Identity label -> unit-norm feature, with stable insertion order (the order
// defines the class index used by the OIM softmax).
class LookupTable {
public:
    explicit LookupTable(double momentum = 0.5) : momentum_(momentum) {}

    std::size_t size() const { return entries_.size(); }
    bool contains(std::int64_t label) const { return index_.count(label) != 0; }
    std::size_t index_of(std::int64_t label) const;
    const Embedding& entry(std::size_t idx) const { return entries_[idx]; }
    std::int64_t label_at(std::size_t idx) const { return labels_[idx]; }
    double momentum() const { return momentum_; }

    // Registers a new identity with a unit-norm feature. Duplicate labels are
    // an error.
    void insert(std::int64_t label, const Embedding& f);

    // EMA update of an existing entry: v <- normalize(gamma*v + (1-gamma)*f).
    void update(std::int64_t label, const Embedding& f, double gamma);
    void update(std::int64_t label, const Embedding& f) { update(label, f, momentum_); }

private:
    double momentum_;
    std::vector<std::int64_t> labels_;
    std::vector<Embedding> entries_;
    std::unordered_map<std::int64_t, std::size_t> index_;
};

// FIFO buffer of unit-norm features with unknown identities.
class CircularQueue {
public:
    explicit CircularQueue(std::size_t capacity);

    std::size_t capacity() const { return capacity_; }
    std::size_t size() const { return buf_.size(); }
    const Embedding& entry(std::size_t idx) const { return buf_[idx]; }

    void push(const Embedding& f);

    const std::deque<Embedding>& entries() const { return buf_; }

private:
    std::size_t capacity_;
    std::deque<Embedding> buf_;
};

// OIM loss for one unit-norm feature: cross-entropy of the softmax over
// [f . LUT entries ; f . CQ entries] / temp against the label's LUT index.
// Unknown labels (nullopt) contribute zero loss; pushing them into the queue
// is the caller's side effect via CircularQueue::push.
double oim_loss(const Embedding& f, std::optional<std::int64_t> label, const LookupTable& lut,
                const CircularQueue& cq, double temp);

// L_ReID = L_CFA + L_NAE.
double reid_loss(double cfa, double nae);

}  // namespace pslab
