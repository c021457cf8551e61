#include "pslab/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "pslab/fusion.hpp"
#include "pslab/rng.hpp"

namespace pslab {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string Toggles::to_string() const {
    std::ostringstream s;
    s << "mue" << (use_mue ? 1 : 0) << "-pud" << (use_pud ? 1 : 0) << "-proto"
      << (instance_prototypes ? 1 : 0) << "-nae" << (use_nae ? 1 : 0);
    return s.str();
}

void ExperimentConfig::validate() const {
    auto fail = [](const std::string& field) {
        throw std::invalid_argument("ExperimentConfig: invalid field '" + field + "'");
    };
    gen.validate();
    if (!toggles.use_mue && !toggles.use_pud) fail("toggles (at least one path must be enabled)");
    if (beta_grid.empty()) fail("beta_grid");
    for (double b : beta_grid)
        if (!(b >= 0.0 && b <= 1.0)) fail("beta_grid");
    for (std::size_t g : gallery_grid)
        if (g == 0 || g > gen.num_scenes) fail("gallery_grid (entries must be in [1, num_scenes])");
    if (seeds.empty()) fail("seeds");
    if (out_dir.empty()) fail("out_dir");
    if (!(fusion_iou_threshold > 0.0 && fusion_iou_threshold < 1.0)) fail("fusion_iou_threshold");
    if (!(mue_text_weight >= 0.0 && mue_text_weight <= 1.0)) fail("mue_text_weight");
    if (!(pud_text_weight >= 0.0 && pud_text_weight <= 1.0)) fail("pud_text_weight");
    if (jobs == 0) fail("jobs");
}

std::string ExperimentConfig::to_json() const {
    ordered_json j;
    j["gen"] = ordered_json::parse(genconfig_to_json(gen));
    j["toggles"] = ordered_json{{"use_mue", toggles.use_mue},
                                {"use_pud", toggles.use_pud},
                                {"instance_prototypes", toggles.instance_prototypes},
                                {"use_nae", toggles.use_nae}};
    j["beta_grid"] = beta_grid;
    j["gallery_grid"] = gallery_grid;
    j["seeds"] = seeds;
    j["out_dir"] = out_dir;
    j["exp_id"] = exp_id;
    j["train_steps"] = train_steps;
    j["train"] = ordered_json{{"lr", train.lr},
                              {"prototypes", train.prototypes},
                              {"cq_capacity", train.cq_capacity},
                              {"record_every", train.record_every}};
    j["fusion_iou_threshold"] = fusion_iou_threshold;
    j["mue_text_weight"] = mue_text_weight;
    j["pud_text_weight"] = pud_text_weight;
    j["jobs"] = jobs;
    return j.dump();
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
    const ordered_json j = ordered_json::parse(text);
    ExperimentConfig cfg;
    for (const auto& [key, value] : j.items()) {
        if (key == "gen") cfg.gen = genconfig_from_json(value.dump());
        else if (key == "toggles") {
            for (const auto& [tk, tv] : value.items()) {
                if (tk == "use_mue") cfg.toggles.use_mue = tv.get<bool>();
                else if (tk == "use_pud") cfg.toggles.use_pud = tv.get<bool>();
                else if (tk == "instance_prototypes")
                    cfg.toggles.instance_prototypes = tv.get<bool>();
                else if (tk == "use_nae") cfg.toggles.use_nae = tv.get<bool>();
                else throw std::invalid_argument("ExperimentConfig: unknown field 'toggles." + tk + "'");
            }
        } else if (key == "beta_grid") cfg.beta_grid = value.get<std::vector<double>>();
        else if (key == "gallery_grid") cfg.gallery_grid = value.get<std::vector<std::size_t>>();
        else if (key == "seeds") cfg.seeds = value.get<std::vector<std::uint64_t>>();
        else if (key == "out_dir") cfg.out_dir = value.get<std::string>();
        else if (key == "exp_id") cfg.exp_id = value.get<std::string>();
        else if (key == "train_steps") cfg.train_steps = value.get<std::size_t>();
        else if (key == "train") {
            for (const auto& [tk, tv] : value.items()) {
                if (tk == "lr") cfg.train.lr = tv.get<double>();
                else if (tk == "prototypes") cfg.train.prototypes = tv.get<std::size_t>();
                else if (tk == "cq_capacity") cfg.train.cq_capacity = tv.get<std::size_t>();
                else if (tk == "record_every") cfg.train.record_every = tv.get<std::size_t>();
                else throw std::invalid_argument("ExperimentConfig: unknown field 'train." + tk + "'");
            }
        } else if (key == "fusion_iou_threshold")
            cfg.fusion_iou_threshold = value.get<double>();
        else if (key == "mue_text_weight") cfg.mue_text_weight = value.get<double>();
        else if (key == "pud_text_weight") cfg.pud_text_weight = value.get<double>();
        else if (key == "jobs") cfg.jobs = value.get<std::size_t>();
        else throw std::invalid_argument("ExperimentConfig: unknown field '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("ExperimentConfig: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_json(buf.str());
}

std::string config_hash(const ExperimentConfig& cfg) {
    // hash the semantic fields only: where results are written and how many
    // workers computed them must not change the provenance of the numbers
    ordered_json j = ordered_json::parse(cfg.to_json());
    j.erase("out_dir");
    j.erase("jobs");
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string build_id() {
#ifdef PSLAB_BUILD_ID
    return PSLAB_BUILD_ID;
#else
    return "unknown";
#endif
}

namespace {

double sim01(const Embedding& a, const Embedding& b) {
    return 0.5 * (1.0 + cosine(a, b, /*allow_zero=*/true));
}

// DB indices of the generator embeddings (used when no training ran)
void raw_db(const World& world, double* db_image, double* db_text) {
    std::vector<Embedding> pts;
    std::vector<std::int64_t> labels;
    for (const Scene& s : world.scenes)
        for (const ScenePerson& p : s.persons) {
            if (!world.identities[static_cast<std::size_t>(p.identity)].labeled) continue;
            pts.push_back(p.appearance);
            labels.push_back(p.identity);
        }
    *db_image = davies_bouldin(pts, labels);
    pts.clear();
    labels.clear();
    for (const Query& q : world.queries) {
        pts.push_back(q.text);
        labels.push_back(q.target_identity);
    }
    *db_text = davies_bouldin(pts, labels);
}

}  // namespace

std::vector<QueryResult> run_retrieval(const World& world, const Toggles& toggles, double beta,
                                       double fusion_iou_threshold, double mue_text_weight,
                                       double pud_text_weight, const ToyTrainer* trained) {
    const std::size_t num_scenes = world.scenes.size();

    std::vector<SceneProposals> proposals(num_scenes);
    for (std::size_t s = 0; s < num_scenes; ++s)
        proposals[s] = generate_proposals(world.scenes[s], world.config);

    // map (scene, person) -> trained feature index
    std::vector<std::vector<std::size_t>> trained_index;
    if (trained) {
        trained_index.resize(num_scenes);
        for (std::size_t s = 0; s < num_scenes; ++s)
            trained_index[s].assign(world.scenes[s].persons.size(), 0);
        for (std::size_t b = 0; b < trained->instances().size(); ++b) {
            const auto& inst = trained->instances()[b];
            trained_index[inst.scene_index][inst.person_index] = b;
        }
    }

    std::vector<std::vector<std::size_t>> scenes_of_identity(world.identities.size());
    for (std::size_t s = 0; s < num_scenes; ++s)
        for (const ScenePerson& p : world.scenes[s].persons)
            scenes_of_identity[static_cast<std::size_t>(p.identity)].push_back(s);

    std::vector<QueryResult> results;
    results.reserve(world.queries.size());
    for (std::size_t qi = 0; qi < world.queries.size(); ++qi) {
        const Query& query = world.queries[qi];
        const Embedding& text =
            trained ? trained->text_features()[qi] : query.text;

        // gallery: all target scenes plus seeded distractors up to gallery_size
        const auto& target_scenes = scenes_of_identity[static_cast<std::size_t>(query.target_identity)];
        std::vector<char> is_target(num_scenes, 0);
        for (std::size_t s : target_scenes) is_target[s] = 1;
        std::vector<std::size_t> gallery = target_scenes;
        if (gallery.size() > world.config.gallery_size) gallery.resize(world.config.gallery_size);
        if (gallery.size() < world.config.gallery_size) {
            std::vector<std::size_t> others;
            others.reserve(num_scenes);
            for (std::size_t s = 0; s < num_scenes; ++s)
                if (!is_target[s]) others.push_back(s);
            Rng rng(sub_seed(world.config.seed, "gallery", static_cast<std::uint64_t>(query.id)));
            const std::size_t need = std::min(world.config.gallery_size - gallery.size(), others.size());
            for (std::size_t i = 0; i < need; ++i) {
                const std::size_t j = i + rng.uniform_index(others.size() - i);
                std::swap(others[i], others[j]);
                gallery.push_back(others[i]);
            }
        }

        QueryResult qr;
        qr.query_id = query.id;
        for (std::size_t s : gallery) {
            const Scene& scene = world.scenes[s];
            auto rescored = [&](const std::vector<Proposal>& props, double text_weight) {
                std::vector<ScoredCandidate> out;
                out.reserve(props.size());
                for (const Proposal& p : props) {
                    const Embedding& observed =
                        (trained && p.gt_index >= 0)
                            ? trained->visual_features()[trained_index[s][static_cast<std::size_t>(
                                  p.gt_index)]]
                            : p.observed;
                    ScoredCandidate c = p.candidate;
                    c.confidence = std::clamp((1.0 - text_weight) * c.confidence +
                                                  text_weight * sim01(text, observed),
                                              0.0, 1.0);
                    out.push_back(c);
                }
                return out;
            };
            std::vector<ScoredCandidate> mue, pud;
            if (toggles.use_mue) mue = rescored(proposals[s].mue, mue_text_weight);
            if (toggles.use_pud) pud = rescored(proposals[s].pud, pud_text_weight);
            const std::vector<FusedCandidate> fused =
                fuse_candidates(mue, pud, fusion_iou_threshold, beta);
            const std::optional<FinalSelection> sel = select_final(fused, mue, pud, beta);
            if (sel) qr.ranked.push_back({scene.id, sel->box, sel->score});

            if (is_target[s])
                for (const ScenePerson& p : scene.persons)
                    if (p.identity == query.target_identity)
                        qr.ground_truth.push_back({scene.id, p.box});
        }
        sort_ranked(qr.ranked);
        results.push_back(std::move(qr));
    }
    return results;
}

PointMetrics evaluate_point(const ExperimentConfig& cfg, std::uint64_t seed, double beta,
                            std::size_t gallery_size) {
    GenConfig gen = cfg.gen;
    gen.seed = seed;
    gen.gallery_size = gallery_size;
    const World world = generate_world(gen);

    PointMetrics out;
    std::optional<ToyTrainer> trainer;
    if (cfg.train_steps > 0) {
        TrainConfig tc = cfg.train;
        tc.steps = cfg.train_steps;
        tc.instance_prototypes = cfg.toggles.instance_prototypes;
        tc.use_nae = cfg.toggles.use_nae;
        tc.include_mue = cfg.toggles.use_mue;
        tc.seed = seed;
        trainer.emplace(world, tc);
        trainer->run();
        out.db_image = trainer->davies_bouldin_image();
        out.db_text = trainer->davies_bouldin_text();
    } else {
        raw_db(world, &out.db_image, &out.db_text);
    }

    const std::vector<QueryResult> results =
        run_retrieval(world, cfg.toggles, beta, cfg.fusion_iou_threshold, cfg.mue_text_weight,
                      cfg.pud_text_weight, trainer ? &*trainer : nullptr);

    double ap_sum = 0.0;
    for (const QueryResult& q : results) ap_sum += average_precision(q, 0.5);
    out.map = results.empty() ? 0.0 : ap_sum / static_cast<double>(results.size());
    out.top1 = cmc_at_k(results, 1, 0.5);
    out.top5 = cmc_at_k(results, 5, 0.5);
    out.top10 = cmc_at_k(results, 10, 0.5);
    return out;
}

namespace {

struct GridPoint {
    std::size_t gallery = 0;
    double beta = 0.0;
    std::uint64_t seed = 0;
};

std::string format_row(const ResultRow& r, bool measured_wall) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%llu,%.6g,%zu,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.3f\n",
                  r.exp_id.c_str(), r.config_hash.c_str(), r.build_id.c_str(),
                  static_cast<unsigned long long>(r.seed), r.beta, r.gallery_size,
                  r.toggles.c_str(), r.metrics.map, r.metrics.top1, r.metrics.top5, r.metrics.top10,
                  r.metrics.db_image, r.metrics.db_text, measured_wall ? r.wall_ms : 0.0);
    return buf;
}

constexpr const char* kCsvHeader =
    "exp_id,config_hash,build_id,seed,beta,gallery_size,toggles,mAP,top1,top5,top10,db_image,"
    "db_text,wall_ms\n";

}  // namespace

std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    {
        std::ofstream probe(fs::path(cfg.out_dir) / ".write_probe");
        if (!probe) throw std::runtime_error("run_experiment: output directory not writable: " + cfg.out_dir);
    }
    fs::remove(fs::path(cfg.out_dir) / ".write_probe");

    const std::vector<std::size_t> galleries =
        cfg.gallery_grid.empty() ? std::vector<std::size_t>{cfg.gen.gallery_size} : cfg.gallery_grid;

    std::vector<GridPoint> grid;
    for (std::size_t g : galleries)
        for (double b : cfg.beta_grid)
            for (std::uint64_t s : cfg.seeds) grid.push_back({g, b, s});

    const std::string hash = config_hash(cfg);
    const std::string build = build_id();
    std::vector<ResultRow> rows(grid.size());

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= grid.size()) return;
            const GridPoint& pt = grid[i];
            const auto t0 = std::chrono::steady_clock::now();
            ResultRow row;
            row.exp_id = cfg.exp_id;
            row.config_hash = hash;
            row.build_id = build;
            row.seed = pt.seed;
            row.beta = pt.beta;
            row.gallery_size = pt.gallery;
            row.toggles = cfg.toggles.to_string();
            row.metrics = evaluate_point(cfg, pt.seed, pt.beta, pt.gallery);
            row.wall_ms = std::chrono::duration<double, std::milli>(
                              std::chrono::steady_clock::now() - t0)
                              .count();
            rows[i] = std::move(row);
        }
    };
    const std::size_t n_workers = std::min<std::size_t>(cfg.jobs, grid.size() ? grid.size() : 1);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();

    // canonical order regardless of worker scheduling
    {
        std::ofstream out(fs::path(cfg.out_dir) / "results.csv", std::ios::binary);
        out << kCsvHeader;
        for (const ResultRow& r : rows) out << format_row(r, /*measured_wall=*/false);
    }
    {
        std::ofstream out(fs::path(cfg.out_dir) / "timings.csv", std::ios::binary);
        out << kCsvHeader;
        for (const ResultRow& r : rows) out << format_row(r, /*measured_wall=*/true);
    }

    // summary: means over seeds per (gallery, beta)
    ordered_json summary;
    summary["exp_id"] = cfg.exp_id;
    summary["config_hash"] = hash;
    summary["build_id"] = build;
    summary["toggles"] = cfg.toggles.to_string();
    ordered_json agg = ordered_json::array();
    for (std::size_t g : galleries)
        for (double b : cfg.beta_grid) {
            double map = 0, t1 = 0, t5 = 0, t10 = 0;
            std::size_t n = 0;
            for (const ResultRow& r : rows)
                if (r.gallery_size == g && r.beta == b) {
                    map += r.metrics.map;
                    t1 += r.metrics.top1;
                    t5 += r.metrics.top5;
                    t10 += r.metrics.top10;
                    ++n;
                }
            const double dn = static_cast<double>(n);
            agg.push_back(ordered_json{{"gallery_size", g},
                                       {"beta", b},
                                       {"seeds", n},
                                       {"mAP", map / dn},
                                       {"top1", t1 / dn},
                                       {"top5", t5 / dn},
                                       {"top10", t10 / dn}});
        }
    summary["means"] = agg;
    {
        std::ofstream out(fs::path(cfg.out_dir) / "summary.json", std::ios::binary);
        out << summary.dump(2) << '\n';
    }
    return rows;
}

std::vector<PredictionRecord> read_predictions_jsonl(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("read_predictions_jsonl: cannot open " + path);
    std::vector<PredictionRecord> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const ordered_json j = ordered_json::parse(line);
        PredictionRecord rec;
        rec.query_id = j.at("query_id").get<std::int64_t>();
        rec.gallery_id = j.at("gallery_id").get<std::int64_t>();
        const auto& b = j.at("box");
        rec.box = Box(b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                      b.at(3).get<double>());
        rec.score = j.at("score").get<double>();
        out.push_back(rec);
    }
    return out;
}

void write_predictions_jsonl(const std::vector<QueryResult>& results, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_predictions_jsonl: cannot open " + path);
    for (const QueryResult& q : results)
        for (const RankedEntry& e : q.ranked)
            out << ordered_json{{"query_id", q.query_id},
                                {"gallery_id", e.gallery_id},
                                {"box", {e.box.x1, e.box.y1, e.box.x2, e.box.y2}},
                                {"score", e.score}}
                       .dump()
                << '\n';
}

PointMetrics evaluate_predictions(const World& world, const std::vector<PredictionRecord>& preds,
                                  double iou_threshold) {
    std::map<std::int64_t, QueryResult> by_query;
    for (const Query& q : world.queries) {
        QueryResult qr;
        qr.query_id = q.id;
        for (const Scene& s : world.scenes)
            for (const ScenePerson& p : s.persons)
                if (p.identity == q.target_identity) qr.ground_truth.push_back({s.id, p.box});
        by_query.emplace(q.id, std::move(qr));
    }
    for (const PredictionRecord& rec : preds) {
        auto it = by_query.find(rec.query_id);
        if (it == by_query.end())
            throw std::invalid_argument("evaluate_predictions: unknown query id");
        it->second.ranked.push_back({rec.gallery_id, rec.box, rec.score});
    }
    std::vector<QueryResult> results;
    results.reserve(by_query.size());
    for (auto& [id, qr] : by_query) {
        sort_ranked(qr.ranked);
        results.push_back(std::move(qr));
    }

    PointMetrics out;
    double ap = 0.0;
    for (const QueryResult& q : results) ap += average_precision(q, iou_threshold);
    out.map = results.empty() ? 0.0 : ap / static_cast<double>(results.size());
    out.top1 = cmc_at_k(results, 1, iou_threshold);
    out.top5 = cmc_at_k(results, 5, iou_threshold);
    out.top10 = cmc_at_k(results, 10, iou_threshold);
    raw_db(world, &out.db_image, &out.db_text);
    return out;
}

}  // namespace pslab
