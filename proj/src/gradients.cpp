#include "pslab/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace pslab {

void LossWeights::observe(double l_mue, double l_pud, double l_reid) {
    if (!adaptive) {
        ++observed_steps;
        return;
    }
    if (ema_mue < 0.0) {
        ema_mue = l_mue;
        ema_pud = l_pud;
        ema_reid = l_reid;
    } else if (observed_steps >= freeze_steps) {
        ema_mue = decay * ema_mue + (1.0 - decay) * l_mue;
        ema_pud = decay * ema_pud + (1.0 - decay) * l_pud;
        ema_reid = decay * ema_reid + (1.0 - decay) * l_reid;
    }
    alpha_mue = 1.0 / (ema_mue + floor_eps);
    alpha_pud = 1.0 / (ema_pud + floor_eps);
    alpha_reid = 1.0 / (ema_reid + floor_eps);
    ++observed_steps;
}

double total_loss(double l_mue, double l_pud, double l_reid, const LossWeights& w) {
    const double sum = w.alpha_mue + w.alpha_pud + w.alpha_reid;
    if (!(sum > 0.0)) throw std::invalid_argument("total_loss: weights must not all be zero");
    if (w.alpha_mue < 0.0 || w.alpha_pud < 0.0 || w.alpha_reid < 0.0)
        throw std::invalid_argument("total_loss: negative weight");
    return (w.alpha_mue * l_mue + w.alpha_pud * l_pud + w.alpha_reid * l_reid) / sum;
}

std::array<double, 3> normalized_weights(const LossWeights& w) {
    const double sum = w.alpha_mue + w.alpha_pud + w.alpha_reid;
    if (!(sum > 0.0)) throw std::invalid_argument("normalized_weights: weights must not all be zero");
    return {w.alpha_mue / sum, w.alpha_pud / sum, w.alpha_reid / sum};
}

namespace {

// row-softmax of sim/scale; rows when transpose=false, columns otherwise
Mat scaled_softmax(const Mat& sim, double scale, bool transpose) {
    const std::size_t n = sim.rows;
    Mat p(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            m = std::max(m, (transpose ? sim(j, i) : sim(i, j)) / scale);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j)
            z += std::exp((transpose ? sim(j, i) : sim(i, j)) / scale - m);
        for (std::size_t j = 0; j < n; ++j) {
            const double v = std::exp((transpose ? sim(j, i) : sim(i, j)) / scale - m) / z;
            if (transpose)
                p(j, i) = v;
            else
                p(i, j) = v;
        }
    }
    return p;
}

}  // namespace

Mat infonce_grad(const Mat& sim, double eps_itc) {
    if (!(eps_itc > 0.0)) throw std::invalid_argument("infonce_grad: eps must be positive");
    if (sim.rows != sim.cols) throw std::invalid_argument("infonce_grad: matrix must be square");
    const std::size_t n = sim.rows;
    Mat g(n, n);
    if (n == 0) return g;
    const Mat p = scaled_softmax(sim, eps_itc, false);
    const double inv = 1.0 / (static_cast<double>(n) * eps_itc);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) g(i, j) = inv * (p(i, j) - (i == j ? 1.0 : 0.0));
    return g;
}

namespace {

// one direction of the class-level KL gradient, accumulated into g
void sdm_direction_grad(const Mat& sim, const std::vector<std::vector<bool>>& positives,
                        double rho, double eps_kl, bool transpose, Mat& g) {
    const std::size_t n = sim.rows;
    const Mat p = scaled_softmax(sim, rho, transpose);
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t pos_count = 0;
        for (std::size_t j = 0; j < n; ++j)
            if (transpose ? positives[j][i] : positives[i][j]) ++pos_count;
        if (pos_count == 0) throw std::invalid_argument("sdm_kl_grad: row with zero positives");
        const double q_pos = 1.0 / static_cast<double>(pos_count);

        // dl/dp_ij = log p_ij + 1 - log(q_ij + eps)
        std::vector<double> gp(n);
        double dot_pg = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double pij = transpose ? p(j, i) : p(i, j);
            const double q = (transpose ? positives[j][i] : positives[i][j]) ? q_pos : 0.0;
            gp[j] = std::log(pij) + 1.0 - std::log(q + eps_kl);
            dot_pg += pij * gp[j];
        }
        for (std::size_t j = 0; j < n; ++j) {
            const double pij = transpose ? p(j, i) : p(i, j);
            const double d = inv_n * pij * (gp[j] - dot_pg) / rho;
            if (transpose)
                g(j, i) += d;
            else
                g(i, j) += d;
        }
    }
}

}  // namespace

Mat sdm_kl_grad(const Mat& sim, const std::vector<std::vector<bool>>& positives, double rho,
                double eps_kl) {
    if (sim.rows != sim.cols) throw std::invalid_argument("sdm_kl_grad: matrix must be square");
    Mat g(sim.rows, sim.cols);
    if (sim.rows == 0) return g;
    sdm_direction_grad(sim, positives, rho, eps_kl, false, g);
    sdm_direction_grad(sim, positives, rho, eps_kl, true, g);
    return g;
}

void cosine_backward(const Embedding& u, const Embedding& v, double g, Embedding& d_u,
                     Embedding& d_v) {
    const double nu = norm(u);
    const double nv = norm(v);
    if (nu <= 0.0 || nv <= 0.0) throw std::invalid_argument("cosine_backward: zero-norm vector");
    const double d = dot(u, v);
    const double c = d / (nu * nv);
    for (std::size_t k = 0; k < u.size(); ++k) {
        d_u[k] += g * (v[k] / (nu * nv) - c * u[k] / (nu * nu));
        d_v[k] += g * (u[k] / (nu * nv) - c * v[k] / (nv * nv));
    }
}

PtcGrads ptc_grad(const std::vector<Embedding>& protos, const std::vector<Embedding>& texts,
                  double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("ptc_grad: tau must be positive");
    if (protos.size() != texts.size() || protos.empty())
        throw std::invalid_argument("ptc_grad: need equal nonempty proto/text counts");
    const std::size_t k = protos.size();

    Mat sim(k, k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) sim(i, j) = cosine(protos[i], texts[j]);

    const Mat a = scaled_softmax(sim, tau, false);  // proto -> text rows
    const Mat c = scaled_softmax(sim, tau, true);   // text -> proto columns
    const double inv = 1.0 / (2.0 * static_cast<double>(k) * tau);

    PtcGrads out;
    out.d_protos.assign(k, Embedding(protos[0].size(), 0.0));
    out.d_texts.assign(k, Embedding(texts[0].size(), 0.0));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double delta = (i == j) ? 1.0 : 0.0;
            const double g = inv * (a(i, j) + c(i, j) - 2.0 * delta);
            if (g != 0.0) cosine_backward(protos[i], texts[j], g, out.d_protos[i], out.d_texts[j]);
        }
    return out;
}

std::array<double, 4> box_loss_grad(const Box& a, const Box& b) {
    // L1 part, subgradient zero at ties
    auto sgn = [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); };
    std::array<double, 4> g{sgn(a.x1 - b.x1), sgn(a.y1 - b.y1), sgn(a.x2 - b.x2),
                            sgn(a.y2 - b.y2)};

    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
    const double area_a = a.area();
    const double uni = area_a + b.area() - inter;
    const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    const double enc = cw * ch;

    // dI, dA, dC w.r.t. (ax1, ay1, ax2, ay2)
    std::array<double, 4> dI{0, 0, 0, 0};
    if (iw > 0.0 && ih > 0.0) {
        dI[0] = (a.x1 >= b.x1) ? -ih : 0.0;
        dI[2] = (a.x2 <= b.x2) ? ih : 0.0;
        dI[1] = (a.y1 >= b.y1) ? -iw : 0.0;
        dI[3] = (a.y2 <= b.y2) ? iw : 0.0;
    }
    const double w_a = a.width();
    const double h_a = a.height();
    const std::array<double, 4> dA{-h_a, -w_a, h_a, w_a};
    std::array<double, 4> dC{0, 0, 0, 0};
    dC[0] = (a.x1 <= b.x1) ? -ch : 0.0;
    dC[2] = (a.x2 >= b.x2) ? ch : 0.0;
    dC[1] = (a.y1 <= b.y1) ? -cw : 0.0;
    dC[3] = (a.y2 >= b.y2) ? cw : 0.0;

    for (std::size_t k = 0; k < 4; ++k) {
        const double dU = dA[k] - dI[k];
        const double d_iou = (dI[k] * uni - inter * dU) / (uni * uni);
        const double d_pen = -(dU * enc - uni * dC[k]) / (enc * enc);  // d[(C-U)/C]
        // loss = 1 - (iou - penalty) + L1
        g[k] += -(d_iou - d_pen);
    }
    return g;
}

std::vector<PredictionGrad> mue_grad(const std::vector<Prediction>& preds,
                                     const std::vector<GtBox>& gts, const SetLossOptions& opts) {
    const SetLossResult res = mue_loss_detailed(preds, gts, opts);
    std::vector<PredictionGrad> out(preds.size());
    for (const auto& [r, c] : res.matching.pairs) {
        const double p = preds[r].p_person();
        if (p > opts.prob_floor) {
            // d(-log sigmoid(lp - ln)) = (p - 1) d(lp - ln)
            out[r].d_logit_person += p - 1.0;
            out[r].d_logit_no_object += 1.0 - p;
        }
        out[r].d_box = box_loss_grad(preds[r].box, gts[c].box);
    }
    for (std::size_t r : res.matching.unmatched_rows) {
        const double p = preds[r].p_no_object();
        if (p > opts.prob_floor) {
            out[r].d_logit_no_object += opts.no_object_weight * (p - 1.0);
            out[r].d_logit_person += opts.no_object_weight * (1.0 - p);
        }
    }
    return out;
}

Embedding oim_grad(const Embedding& f, std::optional<std::int64_t> label, const LookupTable& lut,
                   const CircularQueue& cq, double temp) {
    if (!(temp > 0.0)) throw std::invalid_argument("oim_grad: temp must be positive");
    Embedding g(f.size(), 0.0);
    if (!label.has_value()) return g;
    const std::size_t target = lut.index_of(*label);

    const std::size_t total = lut.size() + cq.size();
    std::vector<double> logits(total);
    for (std::size_t k = 0; k < lut.size(); ++k) logits[k] = dot(f, lut.entry(k)) / temp;
    for (std::size_t k = 0; k < cq.size(); ++k)
        logits[lut.size() + k] = dot(f, cq.entry(k)) / temp;
    const std::vector<double> p = softmax(logits);

    for (std::size_t k = 0; k < total; ++k) {
        const double coef = (p[k] - (k == target ? 1.0 : 0.0)) / temp;
        const Embedding& m = k < lut.size() ? lut.entry(k) : cq.entry(k - lut.size());
        axpy(coef, m, g);
    }
    return g;
}

Embedding normalize_backward(const Embedding& x, const Embedding& dy) {
    const double n = norm(x);
    if (n <= 0.0) throw std::invalid_argument("normalize_backward: zero vector");
    const Embedding y = normalized(x);
    const double proj = dot(dy, y);
    Embedding dx(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = (dy[i] - proj * y[i]) / n;
    return dx;
}

FdReport fd_check(const LossFn& loss, const std::vector<double>& point,
                  const std::vector<double>& analytic, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("fd_check: h must be positive");
    if (point.size() != analytic.size())
        throw std::invalid_argument("fd_check: gradient size mismatch");
    FdReport rep;
    std::vector<double> x = point;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double up = loss(x);
        x[i] = orig - h;
        const double down = loss(x);
        x[i] = orig;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw std::runtime_error("fd_check: non-finite loss evaluation");
        const double fd = (up - down) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
        if (err > rep.max_rel_err) {
            rep.max_rel_err = err;
            rep.worst_index = i;
            rep.analytic_at_worst = analytic[i];
            rep.fd_at_worst = fd;
        }
    }
    return rep;
}

}  // namespace pslab
