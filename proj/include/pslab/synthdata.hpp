#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "pslab/fusion.hpp"
#include "pslab/geometry.hpp"
#include "pslab/linalg.hpp"

namespace pslab {

// Per-channel proposal model. The detection channel defaults to high recall
// with noisy confidence; the text channel to higher precision with fewer
// false positives. Independent noise draws give confidence fusion a real
// trade-off to exploit.
struct ChannelParams {
    double miss_rate = 0.05;
    double fp_rate = 0.3;
    double box_jitter = 0.02;
    double conf_base = 0.30;
    double conf_iou_weight = 0.55;
    double conf_noise = 0.12;
    double obs_noise = 0.13;  // per-channel observation noise on the appearance
};

struct GenConfig {
    std::size_t dim = 256;
    std::size_t num_identities = 50;
    std::size_t num_scenes = 200;
    std::size_t persons_min = 2;
    std::size_t persons_max = 4;
    double sigma_v = 0.02;          // appearance noise around the identity latent
    double sigma_t = 0.03;          // text noise around the rotated latent
    std::size_t queries_per_identity = 2;
    double unlabeled_fraction = 0.2;  // identities without labels (OIM unknowns)
    // When set, a fixed orthogonal map separates the text latent space from
    // the visual one; alignment then has to be learned. The evaluation-only
    // benchmark keeps the spaces shared.
    bool modality_gap = false;
    std::size_t gallery_size = 100;
    std::uint64_t seed = 1;

    ChannelParams mue{};
    ChannelParams pud{0.12, 0.08, 0.025, 0.35, 0.20, 0.10, 0.13};

    // Throws std::invalid_argument naming the offending field.
    void validate() const;
};

struct ScenePerson {
    std::int64_t identity = 0;
    Box box;
    Embedding appearance;
};

struct Scene {
    std::int64_t id = 0;
    std::vector<ScenePerson> persons;
};

struct Query {
    std::int64_t id = 0;
    std::int64_t target_identity = 0;
    Embedding text;
};

struct IdentityInfo {
    Embedding latent;  // unit norm
    bool labeled = true;
};

struct World {
    GenConfig config;
    std::vector<IdentityInfo> identities;
    std::vector<Scene> scenes;
    std::vector<Query> queries;
};

// Fully deterministic given the config (all randomness flows from named
// sub-seeds of config.seed). Text latents live on the far side of a fixed
// seeded orthogonal map, which is what the alignment losses have to undo.
World generate_world(const GenConfig& config);

// The orthogonal modality map (a seeded product of Givens rotations), exposed
// so tests can verify orthogonality and the identity-map degenerate case.
Embedding apply_modality_map(const GenConfig& config, const Embedding& v);

struct Proposal {
    ScoredCandidate candidate;
    int gt_index = -1;   // index into scene.persons; -1 for a false positive
    Embedding observed;  // appearance evidence inside the proposal region
};

struct SceneProposals {
    std::vector<Proposal> mue;
    std::vector<Proposal> pud;
};

// Deterministic per (config.seed, scene.id): ground truths survive with
// probability 1-miss_rate, corners are jittered then clamped back to a valid
// box, confidence = clip(base + w*iou(prop, nearest gt) + noise, 0, 1), and
// false positives are sampled per ground truth at fp_rate.
SceneProposals generate_proposals(const Scene& scene, const GenConfig& config);

// JSON-lines serialization: a header record carrying the config, then one
// record per scene and per query.
void write_world_jsonl(const World& world, std::ostream& out);
void write_world_jsonl(const World& world, const std::string& path);
World read_world_jsonl(std::istream& in);
World read_world_jsonl(const std::string& path);

// Canonical JSON for a GenConfig (used for provenance hashing and files).
std::string genconfig_to_json(const GenConfig& config);
GenConfig genconfig_from_json(const std::string& json_text);

}  // namespace pslab
