#include "pslab/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "pslab/rng.hpp"

namespace pslab {

using ordered_json = nlohmann::ordered_json;

void GenConfig::validate() const {
    auto fail = [](const std::string& field) {
        throw std::invalid_argument("GenConfig: invalid field '" + field + "'");
    };
    if (dim < 2) fail("dim");
    if (num_identities == 0) fail("num_identities");
    if (num_scenes == 0) fail("num_scenes");
    if (persons_min == 0 || persons_min > persons_max) fail("persons_min/persons_max");
    if (!(sigma_v >= 0.0)) fail("sigma_v");
    if (!(sigma_t >= 0.0)) fail("sigma_t");
    if (queries_per_identity == 0) fail("queries_per_identity");
    if (!(unlabeled_fraction >= 0.0 && unlabeled_fraction < 1.0)) fail("unlabeled_fraction");
    if (gallery_size == 0) fail("gallery_size");
    auto check_channel = [&](const ChannelParams& p, const std::string& name) {
        if (!(p.miss_rate >= 0.0 && p.miss_rate <= 1.0)) fail(name + ".miss_rate");
        if (!(p.fp_rate >= 0.0 && p.fp_rate <= 1.0)) fail(name + ".fp_rate");
        if (!(p.box_jitter >= 0.0)) fail(name + ".box_jitter");
        if (!(p.conf_noise >= 0.0)) fail(name + ".conf_noise");
        if (!(p.obs_noise >= 0.0)) fail(name + ".obs_noise");
        if (!std::isfinite(p.conf_base) || !std::isfinite(p.conf_iou_weight))
            fail(name + ".conf_base/conf_iou_weight");
    };
    check_channel(mue, "mue");
    check_channel(pud, "pud");
}

namespace {

struct Givens {
    std::size_t i, j;
    double c, s;
};

std::vector<Givens> modality_rotations(const GenConfig& config) {
    std::vector<Givens> rots;
    if (!config.modality_gap) return rots;
    Rng rng(sub_seed(config.seed, "modality_map"));
    const std::size_t n = 3 * config.dim;
    rots.reserve(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = rng.uniform_index(config.dim);
        std::size_t j = rng.uniform_index(config.dim - 1);
        if (j >= i) ++j;
        const double theta = rng.uniform(0.0, 6.283185307179586);
        rots.push_back({i, j, std::cos(theta), std::sin(theta)});
    }
    return rots;
}

Embedding unit_gaussian(Rng& rng, std::size_t dim) {
    Embedding v(dim);
    double nrm2 = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        v[d] = rng.normal();
        nrm2 += v[d] * v[d];
    }
    const double inv = 1.0 / std::sqrt(nrm2);
    for (double& x : v) x *= inv;
    return v;
}

Embedding noisy_unit(Rng& rng, const Embedding& base, double sigma) {
    Embedding v = base;
    if (sigma > 0.0)
        for (double& x : v) x += rng.normal(0.0, sigma);
    return normalized(v);
}

Box random_box(Rng& rng) {
    const double w = rng.uniform(0.08, 0.30);
    const double h = rng.uniform(0.08, 0.30);
    const double x1 = rng.uniform(0.0, 1.0 - w);
    const double y1 = rng.uniform(0.0, 1.0 - h);
    return Box(x1, y1, x1 + w, y1 + h);
}

// jitter corners, clamp back into [0,1], repair any degenerate side
Box jittered_box(Rng& rng, const Box& b, double sigma) {
    double x1 = b.x1 + rng.normal(0.0, sigma);
    double y1 = b.y1 + rng.normal(0.0, sigma);
    double x2 = b.x2 + rng.normal(0.0, sigma);
    double y2 = b.y2 + rng.normal(0.0, sigma);
    x1 = std::clamp(x1, 0.0, 1.0);
    y1 = std::clamp(y1, 0.0, 1.0);
    x2 = std::clamp(x2, 0.0, 1.0);
    y2 = std::clamp(y2, 0.0, 1.0);
    const double min_side = 1e-3;
    if (x2 - x1 < min_side) {
        x1 = std::min(std::max(0.0, 0.5 * (x1 + x2) - 0.5 * min_side), 1.0 - min_side);
        x2 = x1 + min_side;
    }
    if (y2 - y1 < min_side) {
        y1 = std::min(std::max(0.0, 0.5 * (y1 + y2) - 0.5 * min_side), 1.0 - min_side);
        y2 = y1 + min_side;
    }
    return Box(x1, y1, x2, y2);
}

double best_iou_against(const Box& b, const Scene& scene) {
    double best = 0.0;
    for (const ScenePerson& p : scene.persons) best = std::max(best, iou(b, p.box));
    return best;
}

std::vector<Proposal> channel_proposals(const Scene& scene, const GenConfig& config,
                                        const ChannelParams& params, CandidateSource source,
                                        std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Proposal> out;
    for (std::size_t p = 0; p < scene.persons.size(); ++p) {
        if (rng.bernoulli(params.miss_rate)) continue;
        Proposal prop;
        prop.candidate.box = jittered_box(rng, scene.persons[p].box, params.box_jitter);
        prop.candidate.source = source;
        const double overlap = best_iou_against(prop.candidate.box, scene);
        prop.candidate.confidence = std::clamp(
            params.conf_base + params.conf_iou_weight * overlap + rng.normal(0.0, params.conf_noise),
            0.0, 1.0);
        prop.gt_index = static_cast<int>(p);
        prop.observed = noisy_unit(rng, scene.persons[p].appearance, params.obs_noise);
        out.push_back(std::move(prop));
    }
    for (std::size_t p = 0; p < scene.persons.size(); ++p) {
        if (!rng.bernoulli(params.fp_rate)) continue;
        Proposal prop;
        prop.candidate.box = random_box(rng);
        prop.candidate.source = source;
        const double overlap = best_iou_against(prop.candidate.box, scene);
        prop.candidate.confidence = std::clamp(
            params.conf_base + params.conf_iou_weight * overlap + rng.normal(0.0, params.conf_noise),
            0.0, 1.0);
        prop.gt_index = -1;
        prop.observed = unit_gaussian(rng, config.dim);  // background clutter
        out.push_back(std::move(prop));
    }
    return out;
}

}  // namespace

Embedding apply_modality_map(const GenConfig& config, const Embedding& v) {
    Embedding out = v;
    for (const Givens& g : modality_rotations(config)) {
        const double a = out[g.i];
        const double b = out[g.j];
        out[g.i] = g.c * a - g.s * b;
        out[g.j] = g.s * a + g.c * b;
    }
    return out;
}

World generate_world(const GenConfig& config) {
    config.validate();
    World world;
    world.config = config;

    const std::size_t num_unlabeled = static_cast<std::size_t>(
        std::floor(config.unlabeled_fraction * static_cast<double>(config.num_identities)));

    Rng latent_rng(sub_seed(config.seed, "latents"));
    world.identities.resize(config.num_identities);
    for (std::size_t i = 0; i < config.num_identities; ++i) {
        world.identities[i].latent = unit_gaussian(latent_rng, config.dim);
        world.identities[i].labeled = i >= num_unlabeled;
    }

    world.scenes.resize(config.num_scenes);
    for (std::size_t s = 0; s < config.num_scenes; ++s) {
        Rng rng(sub_seed(config.seed, "scene", s));
        Scene& scene = world.scenes[s];
        scene.id = static_cast<std::int64_t>(s);
        const std::size_t span = config.persons_max - config.persons_min + 1;
        std::size_t count = config.persons_min + rng.uniform_index(span);
        count = std::min(count, config.num_identities);

        // distinct identities via partial Fisher-Yates
        std::vector<std::size_t> ids(config.num_identities);
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = i;
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t j = i + rng.uniform_index(ids.size() - i);
            std::swap(ids[i], ids[j]);
        }

        for (std::size_t i = 0; i < count; ++i) {
            ScenePerson person;
            person.identity = static_cast<std::int64_t>(ids[i]);
            person.box = random_box(rng);
            person.appearance = noisy_unit(rng, world.identities[ids[i]].latent, config.sigma_v);
            scene.persons.push_back(std::move(person));
        }
    }

    // queries target labeled identities that actually appear somewhere
    std::vector<bool> appears(config.num_identities, false);
    for (const Scene& s : world.scenes)
        for (const ScenePerson& p : s.persons) appears[static_cast<std::size_t>(p.identity)] = true;

    std::int64_t query_id = 0;
    for (std::size_t i = 0; i < config.num_identities; ++i) {
        if (!world.identities[i].labeled || !appears[i]) continue;
        const Embedding text_base = apply_modality_map(config, world.identities[i].latent);
        for (std::size_t q = 0; q < config.queries_per_identity; ++q) {
            Rng rng(sub_seed(config.seed, "query", i * 1000003ULL + q));
            Query query;
            query.id = query_id++;
            query.target_identity = static_cast<std::int64_t>(i);
            query.text = noisy_unit(rng, text_base, config.sigma_t);
            world.queries.push_back(std::move(query));
        }
    }
    return world;
}

SceneProposals generate_proposals(const Scene& scene, const GenConfig& config) {
    SceneProposals out;
    out.mue = channel_proposals(scene, config, config.mue, CandidateSource::Mue,
                                sub_seed(config.seed, "proposals_mue", static_cast<std::uint64_t>(scene.id)));
    out.pud = channel_proposals(scene, config, config.pud, CandidateSource::Pud,
                                sub_seed(config.seed, "proposals_pud", static_cast<std::uint64_t>(scene.id)));
    return out;
}

namespace {

ordered_json channel_to_json(const ChannelParams& p) {
    return ordered_json{{"miss_rate", p.miss_rate},
                        {"fp_rate", p.fp_rate},
                        {"box_jitter", p.box_jitter},
                        {"conf_base", p.conf_base},
                        {"conf_iou_weight", p.conf_iou_weight},
                        {"conf_noise", p.conf_noise},
                        {"obs_noise", p.obs_noise}};
}

ChannelParams channel_from_json(const ordered_json& j) {
    ChannelParams p;
    p.miss_rate = j.at("miss_rate").get<double>();
    p.fp_rate = j.at("fp_rate").get<double>();
    p.box_jitter = j.at("box_jitter").get<double>();
    p.conf_base = j.at("conf_base").get<double>();
    p.conf_iou_weight = j.at("conf_iou_weight").get<double>();
    p.conf_noise = j.at("conf_noise").get<double>();
    p.obs_noise = j.at("obs_noise").get<double>();
    return p;
}

ordered_json config_to_json_obj(const GenConfig& c) {
    return ordered_json{{"dim", c.dim},
                        {"num_identities", c.num_identities},
                        {"num_scenes", c.num_scenes},
                        {"persons_min", c.persons_min},
                        {"persons_max", c.persons_max},
                        {"sigma_v", c.sigma_v},
                        {"sigma_t", c.sigma_t},
                        {"queries_per_identity", c.queries_per_identity},
                        {"unlabeled_fraction", c.unlabeled_fraction},
                        {"modality_gap", c.modality_gap},
                        {"gallery_size", c.gallery_size},
                        {"seed", c.seed},
                        {"mue", channel_to_json(c.mue)},
                        {"pud", channel_to_json(c.pud)}};
}

GenConfig config_from_json_obj(const ordered_json& j) {
    GenConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "dim") c.dim = value.get<std::size_t>();
        else if (key == "num_identities") c.num_identities = value.get<std::size_t>();
        else if (key == "num_scenes") c.num_scenes = value.get<std::size_t>();
        else if (key == "persons_min") c.persons_min = value.get<std::size_t>();
        else if (key == "persons_max") c.persons_max = value.get<std::size_t>();
        else if (key == "sigma_v") c.sigma_v = value.get<double>();
        else if (key == "sigma_t") c.sigma_t = value.get<double>();
        else if (key == "queries_per_identity") c.queries_per_identity = value.get<std::size_t>();
        else if (key == "unlabeled_fraction") c.unlabeled_fraction = value.get<double>();
        else if (key == "modality_gap") c.modality_gap = value.get<bool>();
        else if (key == "gallery_size") c.gallery_size = value.get<std::size_t>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "mue") c.mue = channel_from_json(value);
        else if (key == "pud") c.pud = channel_from_json(value);
        else throw std::invalid_argument("GenConfig: unknown field '" + key + "'");
    }
    c.validate();
    return c;
}

ordered_json box_to_json(const Box& b) { return ordered_json::array({b.x1, b.y1, b.x2, b.y2}); }

Box box_from_json(const ordered_json& j) {
    return Box(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
               j.at(3).get<double>());
}

}  // namespace

std::string genconfig_to_json(const GenConfig& config) { return config_to_json_obj(config).dump(); }

GenConfig genconfig_from_json(const std::string& json_text) {
    return config_from_json_obj(ordered_json::parse(json_text));
}

void write_world_jsonl(const World& world, std::ostream& out) {
    out << ordered_json{{"type", "header"}, {"config", config_to_json_obj(world.config)}}.dump()
        << '\n';
    for (const Scene& s : world.scenes) {
        ordered_json persons = ordered_json::array();
        for (const ScenePerson& p : s.persons)
            persons.push_back(ordered_json{{"identity", p.identity},
                                           {"box", box_to_json(p.box)},
                                           {"embedding", p.appearance}});
        out << ordered_json{{"type", "scene"}, {"id", s.id}, {"persons", persons}}.dump() << '\n';
    }
    for (const Query& q : world.queries) {
        out << ordered_json{{"type", "query"},
                            {"id", q.id},
                            {"target", q.target_identity},
                            {"embedding", q.text}}
                   .dump()
            << '\n';
    }
}

void write_world_jsonl(const World& world, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_world_jsonl: cannot open " + path);
    write_world_jsonl(world, out);
}

World read_world_jsonl(std::istream& in) {
    World world;
    bool have_header = false;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const ordered_json j = ordered_json::parse(line);
        const std::string type = j.at("type").get<std::string>();
        if (type == "header") {
            world.config = config_from_json_obj(j.at("config"));
            have_header = true;
        } else if (type == "scene") {
            Scene s;
            s.id = j.at("id").get<std::int64_t>();
            for (const auto& pj : j.at("persons")) {
                ScenePerson p;
                p.identity = pj.at("identity").get<std::int64_t>();
                p.box = box_from_json(pj.at("box"));
                p.appearance = pj.at("embedding").get<Embedding>();
                s.persons.push_back(std::move(p));
            }
            world.scenes.push_back(std::move(s));
        } else if (type == "query") {
            Query q;
            q.id = j.at("id").get<std::int64_t>();
            q.target_identity = j.at("target").get<std::int64_t>();
            q.text = j.at("embedding").get<Embedding>();
            world.queries.push_back(std::move(q));
        } else {
            throw std::invalid_argument("read_world_jsonl: unknown record type '" + type + "'");
        }
    }
    if (!have_header) throw std::invalid_argument("read_world_jsonl: missing header record");

    // identity latents are regenerable from the config
    const World regen = generate_world(world.config);
    world.identities = regen.identities;
    return world;
}

World read_world_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_world_jsonl: cannot open " + path);
    return read_world_jsonl(in);
}

}  // namespace pslab
