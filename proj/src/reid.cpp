#include "pslab/reid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pslab {

namespace {

constexpr double kUnitNormTol = 1e-6;

void require_unit_norm(const Embedding& f, const char* where) {
    const double n = norm(f);
    if (std::abs(n - 1.0) > kUnitNormTol)
        throw std::invalid_argument(std::string(where) + ": feature must be unit-norm");
}

// one direction of the class-level loss: rows of `sim` against row positives
double sdm_direction(const Mat& sim, const std::vector<std::vector<bool>>& positives, double rho,
                     double eps_kl, bool transpose) {
    const std::size_t n = sim.rows;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t pos_count = 0;
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
            const double s = (transpose ? sim(j, i) : sim(i, j)) / rho;
            m = std::max(m, s);
            if (transpose ? positives[j][i] : positives[i][j]) ++pos_count;
        }
        if (pos_count == 0)
            throw std::invalid_argument("sdm_kl_loss: row with zero positives");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            z += std::exp((transpose ? sim(j, i) : sim(i, j)) / rho - m);
        const double q_pos = 1.0 / static_cast<double>(pos_count);
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double p = std::exp((transpose ? sim(j, i) : sim(i, j)) / rho - m) / z;
            const double q = (transpose ? positives[j][i] : positives[i][j]) ? q_pos : 0.0;
            row += p * (std::log(p) - std::log(q + eps_kl));
        }
        total += row;
    }
    return total / static_cast<double>(n);
}

}  // namespace

double sdm_kl_loss(const Mat& sim, const std::vector<std::vector<bool>>& positives, double rho,
                   double eps_kl) {
    if (sim.rows != sim.cols) throw std::invalid_argument("sdm_kl_loss: matrix must be square");
    if (positives.size() != sim.rows)
        throw std::invalid_argument("sdm_kl_loss: positives shape mismatch");
    for (const auto& row : positives)
        if (row.size() != sim.cols)
            throw std::invalid_argument("sdm_kl_loss: positives shape mismatch");
    if (!(rho > 0.0)) throw std::invalid_argument("sdm_kl_loss: rho must be positive");
    if (!(eps_kl > 0.0)) throw std::invalid_argument("sdm_kl_loss: eps_kl must be positive");
    if (sim.rows == 0) return 0.0;
    return sdm_direction(sim, positives, rho, eps_kl, false) +
           sdm_direction(sim, positives, rho, eps_kl, true);
}

double infonce_loss(const Mat& sim, double eps_itc) {
    if (!(eps_itc > 0.0)) throw std::invalid_argument("infonce_loss: eps must be positive");
    if (sim.rows != sim.cols) throw std::invalid_argument("infonce_loss: matrix must be square");
    const std::size_t n = sim.rows;
    if (n == 0) return 0.0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) m = std::max(m, sim(i, j) / eps_itc);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(sim(i, j) / eps_itc - m);
        total += -(sim(i, i) / eps_itc - m - std::log(z));
    }
    return total / static_cast<double>(n);
}

double cfa_loss(double class_level, double instance_level) { return class_level + instance_level; }

NaeSplit nae_split(const Embedding& f, double a, double b) {
    if (!(b > 0.0)) throw std::invalid_argument("nae_split: b must be positive");
    const double r = norm(f);
    if (r <= 0.0) throw std::invalid_argument("nae_split: zero vector");
    NaeSplit out;
    out.confidence = sigmoid((r - a) / b);
    out.direction.resize(f.size());
    for (std::size_t i = 0; i < f.size(); ++i) out.direction[i] = f[i] / r;
    return out;
}

std::size_t LookupTable::index_of(std::int64_t label) const {
    auto it = index_.find(label);
    if (it == index_.end()) throw std::invalid_argument("LookupTable: unknown label");
    return it->second;
}

void LookupTable::insert(std::int64_t label, const Embedding& f) {
    require_unit_norm(f, "LookupTable::insert");
    if (contains(label)) throw std::invalid_argument("LookupTable::insert: duplicate label");
    index_.emplace(label, entries_.size());
    labels_.push_back(label);
    entries_.push_back(f);
}

void LookupTable::update(std::int64_t label, const Embedding& f, double gamma) {
    require_unit_norm(f, "LookupTable::update");
    const std::size_t idx = index_of(label);
    Embedding& v = entries_[idx];
    if (v.size() != f.size()) throw std::invalid_argument("LookupTable::update: dimension");
    double nrm2 = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = gamma * v[i] + (1.0 - gamma) * f[i];
        nrm2 += v[i] * v[i];
    }
    if (nrm2 <= 0.0) throw std::runtime_error("LookupTable::update: degenerate entry");
    const double inv = 1.0 / std::sqrt(nrm2);
    for (double& x : v) x *= inv;
}

CircularQueue::CircularQueue(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("CircularQueue: capacity must be positive");
}

void CircularQueue::push(const Embedding& f) {
    require_unit_norm(f, "CircularQueue::push");
    buf_.push_back(f);
    if (buf_.size() > capacity_) buf_.pop_front();
}

double oim_loss(const Embedding& f, std::optional<std::int64_t> label, const LookupTable& lut,
                const CircularQueue& cq, double temp) {
    if (!(temp > 0.0)) throw std::invalid_argument("oim_loss: temp must be positive");
    require_unit_norm(f, "oim_loss");
    if (!label.has_value()) return 0.0;
    const std::size_t target = lut.index_of(*label);  // throws when missing

    const std::size_t total = lut.size() + cq.size();
    std::vector<double> logits(total);
    for (std::size_t k = 0; k < lut.size(); ++k) logits[k] = dot(f, lut.entry(k)) / temp;
    for (std::size_t k = 0; k < cq.size(); ++k)
        logits[lut.size() + k] = dot(f, cq.entry(k)) / temp;

    double m = -std::numeric_limits<double>::infinity();
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    for (double v : logits) z += std::exp(v - m);
    return -(logits[target] - m - std::log(z));
}

double reid_loss(double cfa, double nae) { return cfa + nae; }

}  // namespace pslab
