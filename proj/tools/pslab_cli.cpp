// Experiment CLI: dataset generation, toy training, retrieval evaluation,
// parameter sweeps, ablations, and numeric self-checks.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime failure.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pslab/experiment.hpp"
#include "pslab/gradients.hpp"
#include "pslab/rng.hpp"
#include "pslab/synthdata.hpp"
#include "pslab/trainer.hpp"

namespace fs = std::filesystem;
using namespace pslab;

namespace {

struct CommonArgs {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out_dir = "out";
    std::size_t jobs = 1;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
    cmd->add_option("--config", args->config_path, "experiment config JSON");
    cmd->add_option("--seed", args->seed, "master seed (overrides config)");
    cmd->add_option("--out", args->out_dir, "output directory");
    cmd->add_option("--jobs", args->jobs, "parallel grid workers")->check(CLI::PositiveNumber);
}

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg;
    if (!args.config_path.empty()) cfg = ExperimentConfig::from_json_file(args.config_path);
    if (args.seed) {
        cfg.gen.seed = *args.seed;
        cfg.seeds = {*args.seed};
    }
    cfg.out_dir = args.out_dir;
    cfg.jobs = args.jobs;
    return cfg;
}

World load_or_generate_world(const ExperimentConfig& cfg, const std::string& data_path) {
    if (!data_path.empty()) return read_world_jsonl(data_path);
    return generate_world(cfg.gen);
}

void print_summary_rows(const std::vector<ResultRow>& rows) {
    for (const ResultRow& r : rows)
        std::cout << "seed=" << r.seed << " beta=" << r.beta << " gallery=" << r.gallery_size
                  << " mAP=" << r.metrics.map << " top1=" << r.metrics.top1
                  << " top5=" << r.metrics.top5 << " top10=" << r.metrics.top10 << "\n";
}

std::vector<std::uint64_t> default_sweep_seeds(const ExperimentConfig& cfg) {
    if (cfg.seeds.size() > 1) return cfg.seeds;
    std::vector<std::uint64_t> seeds(5);
    std::iota(seeds.begin(), seeds.end(), cfg.seeds.empty() ? 1 : cfg.seeds.front());
    return seeds;
}

// ---------------------------------------------------------------------------
// gradcheck: central-difference verification of every analytic gradient
// ---------------------------------------------------------------------------

double run_gradcheck(std::uint64_t seed, std::size_t points, bool verbose) {
    Rng rng(seed);
    double worst = 0.0;
    auto note = [&](const char* name, double err) {
        if (verbose) std::cout << "  " << name << ": max rel err " << err << "\n";
        worst = std::max(worst, err);
    };

    const double h = 1e-5;

    {  // infonce over sim entries
        double err = 0.0;
        for (std::size_t p = 0; p < points; ++p) {
            const std::size_t n = 2 + rng.uniform_index(5);
            Mat sim(n, n);
            for (double& v : sim.data) v = rng.uniform(-1.0, 1.0);
            const Mat g = infonce_grad(sim, 0.07);
            const auto loss = [&](const std::vector<double>& x) {
                Mat m(n, n);
                m.data = x;
                return infonce_loss(m, 0.07);
            };
            err = std::max(err, fd_check(loss, sim.data, g.data, h).max_rel_err);
        }
        note("infonce_loss", err);
    }

    {  // sdm over sim entries
        double err = 0.0;
        for (std::size_t p = 0; p < points; ++p) {
            const std::size_t n = 2 + rng.uniform_index(5);
            Mat sim(n, n);
            for (double& v : sim.data) v = rng.uniform(-1.0, 1.0);
            std::vector<std::vector<bool>> pos(n, std::vector<bool>(n, false));
            for (std::size_t i = 0; i < n; ++i) pos[i][i] = true;
            // sprinkle extra positives, keeping rows/cols nonempty
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < n; ++j)
                    if (rng.bernoulli(0.2)) pos[i][j] = pos[j][i] = true;
            const Mat g = sdm_kl_grad(sim, pos, 0.5, 1e-8);
            const auto loss = [&](const std::vector<double>& x) {
                Mat m(n, n);
                m.data = x;
                return sdm_kl_loss(m, pos, 0.5, 1e-8);
            };
            err = std::max(err, fd_check(loss, sim.data, g.data, h).max_rel_err);
        }
        note("sdm_kl_loss", err);
    }

    {  // ptc over proto/text embeddings
        double err = 0.0;
        for (std::size_t p = 0; p < points; ++p) {
            const std::size_t k = 2 + rng.uniform_index(6);
            const std::size_t d = 4 + rng.uniform_index(12);
            std::vector<Embedding> protos(k, Embedding(d)), texts(k, Embedding(d));
            for (auto& e : protos)
                for (double& v : e) v = rng.normal();
            for (auto& e : texts)
                for (double& v : e) v = rng.normal();
            const PtcGrads g = ptc_grad(protos, texts, 0.07);
            std::vector<double> flat, grad;
            for (const auto& e : protos) flat.insert(flat.end(), e.begin(), e.end());
            for (const auto& e : texts) flat.insert(flat.end(), e.begin(), e.end());
            for (const auto& e : g.d_protos) grad.insert(grad.end(), e.begin(), e.end());
            for (const auto& e : g.d_texts) grad.insert(grad.end(), e.begin(), e.end());
            const auto loss = [&](const std::vector<double>& x) {
                std::vector<Embedding> ps(k, Embedding(d)), ts(k, Embedding(d));
                std::size_t pos_i = 0;
                for (auto& e : ps)
                    for (double& v : e) v = x[pos_i++];
                for (auto& e : ts)
                    for (double& v : e) v = x[pos_i++];
                return ptc_loss(ps, ts, 0.07);
            };
            err = std::max(err, fd_check(loss, flat, grad, h).max_rel_err);
        }
        note("ptc_loss", err);
    }

    {  // box_loss over pred corners, resampled away from coordinate ties
        double err = 0.0;
        for (std::size_t p = 0; p < points; ++p) {
            auto draw = [&]() {
                const double x1 = rng.uniform(0.02, 0.6);
                const double y1 = rng.uniform(0.02, 0.6);
                return Box(x1, y1, x1 + rng.uniform(0.05, 0.35), y1 + rng.uniform(0.05, 0.35));
            };
            Box a = draw(), b = draw();
            const double tie_margin = 1e-4;
            const bool tied = std::abs(a.x1 - b.x1) < tie_margin ||
                              std::abs(a.y1 - b.y1) < tie_margin ||
                              std::abs(a.x2 - b.x2) < tie_margin ||
                              std::abs(a.y2 - b.y2) < tie_margin;
            if (tied) {
                --p;
                continue;
            }
            const std::array<double, 4> g = box_loss_grad(a, b);
            const auto loss = [&](const std::vector<double>& x) {
                return box_loss(Box(x[0], x[1], x[2], x[3]), b);
            };
            err = std::max(err,
                           fd_check(loss, {a.x1, a.y1, a.x2, a.y2}, {g[0], g[1], g[2], g[3]}, h)
                               .max_rel_err);
        }
        note("box_loss", err);
    }

    {  // oim over the feature, via the tangent plane (input kept unit-norm)
        double err = 0.0;
        for (std::size_t p = 0; p < points; ++p) {
            const std::size_t d = 6 + rng.uniform_index(10);
            LookupTable lut;
            const std::size_t n_ids = 2 + rng.uniform_index(4);
            for (std::size_t i = 0; i < n_ids; ++i) {
                Embedding e(d);
                for (double& v : e) v = rng.normal();
                lut.insert(static_cast<std::int64_t>(i), normalized(e));
            }
            CircularQueue cq(8);
            for (std::size_t i = 0; i < 3; ++i) {
                Embedding e(d);
                for (double& v : e) v = rng.normal();
                cq.push(normalized(e));
            }
            Embedding raw(d);
            for (double& v : raw) v = rng.normal();
            const std::int64_t label = static_cast<std::int64_t>(rng.uniform_index(n_ids));
            // differentiate the normalized-input composition so the unit-norm
            // precondition holds at every fd probe
            const auto loss = [&](const std::vector<double>& x) {
                return oim_loss(normalized(x), label, lut, cq, 0.07);
            };
            const Embedding f = normalized(raw);
            const Embedding df = oim_grad(f, label, lut, cq, 0.07);
            const Embedding g = normalize_backward(raw, df);
            err = std::max(err, fd_check(loss, raw, g, h).max_rel_err);
        }
        note("oim_loss", err);
    }

    {  // mue over boxes and logits, away from matching ties
        double err = 0.0;
        for (std::size_t p = 0; p < points; ++p) {
            const std::size_t n = 2 + rng.uniform_index(3);
            const std::size_t m = 1 + rng.uniform_index(n);
            std::vector<Prediction> preds;
            for (std::size_t i = 0; i < n; ++i) {
                const double x1 = rng.uniform(0.05, 0.55);
                const double y1 = rng.uniform(0.05, 0.55);
                preds.push_back({Box(x1, y1, x1 + rng.uniform(0.1, 0.3), y1 + rng.uniform(0.1, 0.3)),
                                 rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)});
            }
            std::vector<GtBox> gts;
            for (std::size_t i = 0; i < m; ++i) {
                const double x1 = rng.uniform(0.05, 0.55);
                const double y1 = rng.uniform(0.05, 0.55);
                gts.push_back({Box(x1, y1, x1 + rng.uniform(0.1, 0.3), y1 + rng.uniform(0.1, 0.3)), 0});
            }
            const std::vector<PredictionGrad> g = mue_grad(preds, gts);
            std::vector<double> flat, grad;
            for (std::size_t i = 0; i < n; ++i) {
                const Box& bb = preds[i].box;
                flat.insert(flat.end(), {bb.x1, bb.y1, bb.x2, bb.y2, preds[i].logit_person,
                                         preds[i].logit_no_object});
                grad.insert(grad.end(), {g[i].d_box[0], g[i].d_box[1], g[i].d_box[2], g[i].d_box[3],
                                         g[i].d_logit_person, g[i].d_logit_no_object});
            }
            const auto loss = [&](const std::vector<double>& x) {
                std::vector<Prediction> ps;
                for (std::size_t i = 0; i < n; ++i)
                    ps.push_back({Box(x[6 * i], x[6 * i + 1], x[6 * i + 2], x[6 * i + 3]),
                                  x[6 * i + 4], x[6 * i + 5]});
                return mue_loss(ps, gts);
            };
            const double e = fd_check(loss, flat, grad, h).max_rel_err;
            // a matching flip inside the fd stencil shows up as a gross error;
            // resample those draws (they are the excluded tie points)
            if (e > 1e-3) {
                --p;
                continue;
            }
            err = std::max(err, e);
        }
        note("mue_loss", err);
    }

    return worst;
}

// ---------------------------------------------------------------------------
// selftest: quick oracle and invariant smoke checks
// ---------------------------------------------------------------------------

double brute_force_assignment(const CostMatrix& cost) {
    std::vector<std::size_t> cols(cost.cols);
    std::iota(cols.begin(), cols.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    // square-ish small matrices only
    std::sort(cols.begin(), cols.end());
    do {
        double total = 0.0;
        const std::size_t k = std::min(cost.rows, cost.cols);
        for (std::size_t r = 0; r < k; ++r) total += cost.at(r, cols[r]);
        best = std::min(best, total);
    } while (std::next_permutation(cols.begin(), cols.end()));
    return best;
}

bool run_selftest(std::uint64_t seed) {
    Rng rng(seed);
    bool ok = true;
    auto check = [&](bool cond, const char* what) {
        std::cout << (cond ? "[PASS] " : "[FAIL] ") << what << "\n";
        ok = ok && cond;
    };

    {  // assignment vs exhaustive search
        bool good = true;
        for (int t = 0; t < 200; ++t) {
            const std::size_t n = 2 + rng.uniform_index(4);
            CostMatrix cost(n, n);
            for (double& v : cost.data) v = rng.uniform(0.0, 10.0);
            const double solver = solve_assignment(cost).total_cost;
            if (std::abs(solver - brute_force_assignment(cost)) > 1e-9) good = false;
        }
        check(good, "assignment matches exhaustive search (200 random matrices)");
    }

    {  // geometry invariants
        bool good = true;
        for (int t = 0; t < 2000; ++t) {
            auto draw = [&]() {
                const double x1 = rng.uniform(0.0, 0.8);
                const double y1 = rng.uniform(0.0, 0.8);
                return Box(x1, y1, x1 + rng.uniform(0.01, 1.0 - x1 - 1e-9),
                           y1 + rng.uniform(0.01, 1.0 - y1 - 1e-9));
            };
            const Box a = draw(), b = draw();
            const double i = iou(a, b), g = giou(a, b);
            if (!(i >= 0.0 && i <= 1.0 && g > -1.0 && g <= i && box_loss(a, b) >= 0.0)) good = false;
            if (std::abs(iou(a, b) - iou(b, a)) > 1e-15) good = false;
        }
        check(good, "geometry bounds and symmetry (2000 random pairs)");
    }

    {  // determinism of the generator
        GenConfig g;
        g.num_identities = 8;
        g.num_scenes = 10;
        g.dim = 16;
        g.seed = seed;
        std::ostringstream s1, s2;
        write_world_jsonl(generate_world(g), s1);
        write_world_jsonl(generate_world(g), s2);
        check(s1.str() == s2.str(), "generator determinism (byte-identical serialization)");
    }

    {  // gradient smoke check
        const double worst = run_gradcheck(seed, 5, false);
        check(worst < 1e-4, "analytic gradients vs central differences (smoke)");
    }

    return ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic text-based person search laboratory"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string data_path;
    std::string predictions_path;
    std::size_t steps = 500;
    std::vector<double> beta_override;
    std::vector<std::size_t> gallery_override;

    CLI::App* cmd_gen = app.add_subcommand("gen", "generate a dataset (JSONL)");
    add_common(cmd_gen, &args);

    CLI::App* cmd_train = app.add_subcommand("train", "run the toy trainer");
    add_common(cmd_train, &args);
    cmd_train->add_option("--data", data_path, "dataset JSONL (otherwise generated)");
    cmd_train->add_option("--steps", steps, "gradient steps");

    CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate retrieval metrics");
    add_common(cmd_eval, &args);
    cmd_eval->add_option("--data", data_path, "dataset JSONL (otherwise generated)");
    cmd_eval->add_option("--predictions", predictions_path, "score externally produced predictions");
    cmd_eval->add_option("--beta", beta_override, "fusion weight(s)");
    cmd_eval->add_option("--steps", steps, "train before evaluating (0 = off)")->default_val(0);

    CLI::App* cmd_sbeta = app.add_subcommand("sweep-beta", "sweep the confidence fusion weight");
    add_common(cmd_sbeta, &args);
    cmd_sbeta->add_option("--beta", beta_override, "beta grid");

    CLI::App* cmd_sgal = app.add_subcommand("sweep-gallery", "sweep the gallery size");
    add_common(cmd_sgal, &args);
    cmd_sgal->add_option("--gallery", gallery_override, "gallery size grid");

    CLI::App* cmd_ablate = app.add_subcommand("ablate", "toggle pipeline components");
    add_common(cmd_ablate, &args);
    cmd_ablate->add_option("--steps", steps, "train steps per ablation (0 = eval only)")
        ->default_val(0);

    CLI::App* cmd_grad = app.add_subcommand("gradcheck", "verify analytic gradients");
    add_common(cmd_grad, &args);
    CLI::Option* grad_points =
        cmd_grad->add_option("--points", "random points per loss")->default_val(100);

    CLI::App* cmd_self = app.add_subcommand("selftest", "quick oracle and invariant checks");
    add_common(cmd_self, &args);

    CLI11_PARSE(app, argc, argv);

    try {
        ExperimentConfig cfg = load_config(args);

        if (cmd_gen->parsed()) {
            const World world = generate_world(cfg.gen);
            fs::create_directories(cfg.out_dir);
            const std::string path = (fs::path(cfg.out_dir) / "dataset.jsonl").string();
            write_world_jsonl(world, path);
            std::cout << "wrote " << world.scenes.size() << " scenes, " << world.queries.size()
                      << " queries to " << path << "\n";
        } else if (cmd_train->parsed()) {
            const World world = load_or_generate_world(cfg, data_path);
            TrainConfig tc = cfg.train;
            tc.steps = steps;
            tc.seed = cfg.gen.seed;
            ToyTrainer trainer(world, tc);
            const TrainResult res = trainer.run();
            fs::create_directories(cfg.out_dir);
            write_curve_csv(res.curve, (fs::path(cfg.out_dir) / "curve.csv").string());
            trainer.save_checkpoint((fs::path(cfg.out_dir) / "checkpoint.json").string());
            std::cout << "steps=" << steps << " L_total " << res.total_per_step.front() << " -> "
                      << res.total_per_step.back() << "\n"
                      << "db_image " << res.db_image_initial << " -> " << res.db_image_final << "\n"
                      << "db_text  " << res.db_text_initial << " -> " << res.db_text_final << "\n";
        } else if (cmd_eval->parsed()) {
            if (!predictions_path.empty()) {
                const World world = load_or_generate_world(cfg, data_path);
                const PointMetrics m =
                    evaluate_predictions(world, read_predictions_jsonl(predictions_path));
                std::cout << "mAP=" << m.map << " top1=" << m.top1 << " top5=" << m.top5
                          << " top10=" << m.top10 << "\n";
            } else {
                if (!beta_override.empty()) cfg.beta_grid = beta_override;
                cfg.train_steps = steps;
                cfg.exp_id = "eval";
                print_summary_rows(run_experiment(cfg));
            }
        } else if (cmd_sbeta->parsed()) {
            cfg.beta_grid = beta_override.empty()
                                ? std::vector<double>{0.0, 0.3, 0.5, 0.8, 1.0}
                                : beta_override;
            cfg.seeds = default_sweep_seeds(cfg);
            cfg.exp_id = "sweep_beta";
            print_summary_rows(run_experiment(cfg));
        } else if (cmd_sgal->parsed()) {
            cfg.gallery_grid = gallery_override.empty()
                                   ? std::vector<std::size_t>{50, 100, 500, 1000, 2000, 4000}
                                   : gallery_override;
            const std::size_t max_gallery =
                *std::max_element(cfg.gallery_grid.begin(), cfg.gallery_grid.end());
            cfg.gen.num_scenes = std::max(cfg.gen.num_scenes, max_gallery);
            cfg.seeds = default_sweep_seeds(cfg);
            cfg.exp_id = "sweep_gallery";
            print_summary_rows(run_experiment(cfg));
        } else if (cmd_ablate->parsed()) {
            const std::vector<std::pair<std::string, Toggles>> presets = {
                {"mue_only", {true, false, false, false}},
                {"pud_only", {false, true, false, false}},
                {"mue_pud", {true, true, false, false}},
                {"mue_pud_proto", {true, true, true, false}},
                {"mue_pud_proto_nae", {true, true, true, true}},
            };
            cfg.train_steps = steps;
            const std::string base_out = cfg.out_dir;
            for (const auto& [name, toggles] : presets) {
                ExperimentConfig sub = cfg;
                sub.toggles = toggles;
                sub.exp_id = "ablate_" + name;
                sub.out_dir = (fs::path(base_out) / name).string();
                std::cout << name << ":\n";
                print_summary_rows(run_experiment(sub));
            }
        } else if (cmd_grad->parsed()) {
            const std::size_t points = grad_points->as<std::size_t>();
            const double worst = run_gradcheck(cfg.gen.seed, points, true);
            std::cout << "worst relative error: " << worst << "\n";
            if (!(worst < 1e-4)) {
                std::cerr << "gradient check failed (threshold 1e-4)\n";
                return 2;
            }
        } else if (cmd_self->parsed()) {
            if (!run_selftest(cfg.gen.seed)) return 2;
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
