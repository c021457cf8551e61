#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "pslab/assignment.hpp"
#include "pslab/geometry.hpp"
#include "pslab/linalg.hpp"
#include "pslab/pud.hpp"
#include "pslab/reid.hpp"

namespace pslab {

// ---------------------------------------------------------------------------
// Adaptive loss weighting. Each weight is the inverse EMA of its component's
// magnitude, so no single component dominates; uniform positive rescaling of
// the weights leaves the combined loss exactly unchanged.
// ---------------------------------------------------------------------------
struct LossWeights {
    double alpha_mue = 1.0;
    double alpha_pud = 1.0;
    double alpha_reid = 1.0;

    bool adaptive = true;
    double decay = 0.99;
    double floor_eps = 1e-8;
    std::size_t freeze_steps = 10;

    // EMA state; negative means uninitialized.
    double ema_mue = -1.0;
    double ema_pud = -1.0;
    double ema_reid = -1.0;
    std::size_t observed_steps = 0;

    // Feed one step's component losses; recomputes the weights when adaptive.
    void observe(double l_mue, double l_pud, double l_reid);
};

// (a1*L_mue + a2*L_pud + a3*L_reid) / (a1+a2+a3); all-zero weights are an
// error. Bounded by the min/max of the components.
double total_loss(double l_mue, double l_pud, double l_reid, const LossWeights& w);

// Normalized combination coefficients a_i / sum(a), e.g. for scaling
// per-component gradients.
std::array<double, 3> normalized_weights(const LossWeights& w);

// ---------------------------------------------------------------------------
// Analytic gradients. Discrete choices (Hungarian matching, prototype
// assignment, queue contents) are treated as constants.
// ---------------------------------------------------------------------------

// d(infonce_loss)/d(sim), same shape as sim.
Mat infonce_grad(const Mat& sim, double eps_itc);

// d(sdm_kl_loss)/d(sim).
Mat sdm_kl_grad(const Mat& sim, const std::vector<std::vector<bool>>& positives, double rho,
                double eps_kl);

// d(ptc_loss) w.r.t. both embedding lists (through the cosine similarities).
struct PtcGrads {
    std::vector<Embedding> d_protos;
    std::vector<Embedding> d_texts;
};
PtcGrads ptc_grad(const std::vector<Embedding>& protos, const std::vector<Embedding>& texts,
                  double tau);

// d(box_loss)/d(pred corners) as (x1, y1, x2, y2); the L1 subgradient at zero
// is taken as zero.
std::array<double, 4> box_loss_grad(const Box& pred, const Box& gt);

// d(mue_loss) w.r.t. each prediction's box corners and logits, holding the
// optimal matching fixed.
struct PredictionGrad {
    std::array<double, 4> d_box{0.0, 0.0, 0.0, 0.0};
    double d_logit_person = 0.0;
    double d_logit_no_object = 0.0;
};
std::vector<PredictionGrad> mue_grad(const std::vector<Prediction>& preds,
                                     const std::vector<GtBox>& gts,
                                     const SetLossOptions& opts = {});

// d(oim_loss)/d(f) for a unit-norm feature; zero for unknown labels.
Embedding oim_grad(const Embedding& f, std::optional<std::int64_t> label, const LookupTable& lut,
                   const CircularQueue& cq, double temp);

// d(cos(u, v)) w.r.t. u, accumulated into out with weight g.
void cosine_backward(const Embedding& u, const Embedding& v, double g, Embedding& d_u,
                     Embedding& d_v);

// df for y = x/||x|| given upstream dy.
Embedding normalize_backward(const Embedding& x, const Embedding& dy);

// ---------------------------------------------------------------------------
// Finite-difference verification.
// ---------------------------------------------------------------------------
using LossFn = std::function<double(const std::vector<double>&)>;

struct FdReport {
    double max_rel_err = 0.0;
    std::size_t worst_index = 0;
    double analytic_at_worst = 0.0;
    double fd_at_worst = 0.0;
};

// Central differences at step h, compared coordinate-wise:
// |analytic - fd| / max(1, |analytic|). Non-finite evaluations are an error.
FdReport fd_check(const LossFn& loss, const std::vector<double>& point,
                  const std::vector<double>& analytic, double h = 1e-5);

}  // namespace pslab
