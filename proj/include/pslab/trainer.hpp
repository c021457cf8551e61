#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "pslab/gradients.hpp"
#include "pslab/pud.hpp"
#include "pslab/reid.hpp"
#include "pslab/synthdata.hpp"

namespace pslab {

struct TrainConfig {
    std::size_t steps = 500;
    double lr = 0.05;

    std::size_t prototypes = 256;  // toy-scale bank
    double proto_momentum = 0.9;
    double lut_momentum = 0.5;
    double oim_temp = 0.07;
    double tau_ptc = 0.07;
    double tau_fuse = 0.07;
    Temperatures temps{};
    std::size_t cq_capacity = 500;
    double nae_a = 1.0;
    double nae_b = 0.25;
    double mu_init = 0.5;

    std::size_t record_every = 10;
    LossWeights weights{};

    bool include_mue = true;
    bool instance_prototypes = true;
    bool use_nae = true;             // weight OIM terms by norm confidence
    bool oim_update_from_text = true;

    std::uint64_t seed = 1;
};

struct ComponentLosses {
    double mue = 0.0;
    double pud = 0.0;   // ptc + reg
    double reid = 0.0;  // sdm + infonce + oim
    double ptc = 0.0;
    double reg = 0.0;
    double sdm = 0.0;
    double infonce = 0.0;
    double oim = 0.0;
};

struct CurvePoint {
    std::size_t step = 0;
    double l_total = 0.0;
    ComponentLosses components;
    double alpha_mue = 0.0, alpha_pud = 0.0, alpha_reid = 0.0;
    double db_image = 0.0, db_text = 0.0;
};

struct TrainResult {
    std::vector<CurvePoint> curve;
    std::vector<double> total_per_step;
    double db_image_initial = 0.0, db_text_initial = 0.0;
    double db_image_final = 0.0, db_text_final = 0.0;
};

// Gradient buffers for every free parameter.
struct ParamGrads {
    std::vector<Embedding> d_visual;  // one per box instance
    std::vector<Embedding> d_text;    // one per query
    double d_mu = 0.0;
    Mat d_head_weight;
    std::vector<double> d_head_bias;
};

// Regression path for a single scene row under one text token:
// cosine -> region scale -> augment -> tanh gate -> affine box head ->
// box_loss against the ground truth. Returns the loss; when grads is non-null
// the analytic gradients for (target visual row, token, mu, head) are
// accumulated there.
struct RegPathGrads {
    Embedding d_visual;  // target row only
    Embedding d_token;
    double d_mu = 0.0;
    Mat d_weight;
    std::vector<double> d_bias;
};
double reg_path_loss(const Embedding& visual_row, const Embedding& token, double mu,
                     const BoxHead& head, const Box& gt, RegPathGrads* grads);

// One feature through (optional NAE weighting) + L2 normalize + OIM. Returns
// the (possibly weighted) loss; gradient w.r.t. the raw feature is
// accumulated into d_raw when non-null.
double oim_feature_path(const Embedding& raw, std::optional<std::int64_t> label,
                        const LookupTable& lut, const CircularQueue& cq, double temp,
                        bool use_nae, double nae_a, double nae_b, Embedding* d_raw);

// Plain full-batch gradient descent on free per-item embeddings, mu, and the
// box head, with the bank/LUT/CQ evolving by their own momentum rules each
// step. Deterministic for a fixed (world, config). Throws on divergence.
class ToyTrainer {
public:
    struct BoxInstance {
        std::size_t scene_index = 0;
        std::size_t person_index = 0;
        std::int64_t identity = 0;
        bool labeled = true;
    };

    ToyTrainer(const World& world, const TrainConfig& config);

    TrainResult run();

    // Losses and gradients at the current parameters against the current
    // (frozen) bank/LUT/CQ state; discrete choices are held fixed inside.
    // Gradients are for s_pud*(ptc+reg) + s_reid*(sdm+infonce+oim); the
    // detection component is constant w.r.t. the free parameters.
    ComponentLosses evaluate(ParamGrads* grads, double s_pud = 1.0, double s_reid = 1.0) const;

    // Flat parameter vector (visual | text | mu | head), for fd verification.
    std::vector<double> pack_params() const;
    void unpack_params(const std::vector<double>& flat);

    double davies_bouldin_image() const;
    double davies_bouldin_text() const;

    const LookupTable& lut() const { return lut_; }
    const CircularQueue& cq() const { return cq_; }
    const PrototypeBank& bank() const { return bank_; }
    double mu() const { return mu_; }
    const BoxHead& head() const { return head_; }
    const std::vector<BoxInstance>& instances() const { return instances_; }
    const std::vector<Embedding>& visual_features() const { return visual_; }
    const std::vector<Embedding>& text_features() const { return text_; }

    // Checkpoint with every mutable piece of state (JSON).
    void save_checkpoint(const std::string& path) const;

private:
    void apply_state_updates();  // bank / LUT / CQ momentum updates
    double constant_mue_loss() const;

    const World& world_;
    TrainConfig cfg_;

    std::vector<BoxInstance> instances_;
    std::vector<Embedding> visual_;  // free params, one per instance
    std::vector<Embedding> text_;    // free params, one per query
    double mu_;
    BoxHead head_;

    std::vector<std::size_t> batch_instance_;  // query -> paired instance

    PrototypeBank bank_;
    LookupTable lut_;
    CircularQueue cq_;

    double mue_constant_ = 0.0;
};

void write_curve_csv(const std::vector<CurvePoint>& curve, const std::string& path);

}  // namespace pslab
