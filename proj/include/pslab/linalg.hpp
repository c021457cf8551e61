#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace pslab {

using Embedding = std::vector<double>;

// Dense row-major matrix, just enough for similarity tables and affine maps.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

inline double dot(const Embedding& a, const Embedding& b) {
    if (a.size() != b.size()) throw std::invalid_argument("dot: dimension mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm(const Embedding& a) { return std::sqrt(dot(a, a)); }

inline bool is_finite(const Embedding& a) {
    for (double x : a)
        if (!std::isfinite(x)) return false;
    return true;
}

inline Embedding normalized(const Embedding& a) {
    const double n = norm(a);
    if (n <= 0.0) throw std::invalid_argument("normalized: zero vector");
    Embedding out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] / n;
    return out;
}

// cosine similarity; zero-norm inputs map to similarity 0 when allow_zero is
// set (used by relevance pooling, where an all-zero query row means "no
// preference"), otherwise they are an error.
inline double cosine(const Embedding& a, const Embedding& b, bool allow_zero = false) {
    const double na = norm(a);
    const double nb = norm(b);
    if (na <= 0.0 || nb <= 0.0) {
        if (allow_zero) return 0.0;
        throw std::invalid_argument("cosine: zero-norm vector");
    }
    return dot(a, b) / (na * nb);
}

inline void axpy(double alpha, const Embedding& x, Embedding& y) {
    if (x.size() != y.size()) throw std::invalid_argument("axpy: dimension mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

// softmax over a small vector, numerically stable
inline std::vector<double> softmax(const std::vector<double>& logits) {
    if (logits.empty()) throw std::invalid_argument("softmax: empty input");
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    std::vector<double> out(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        z += out[i];
    }
    for (double& v : out) v /= z;
    return out;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace pslab
