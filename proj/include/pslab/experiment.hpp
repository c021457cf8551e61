#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pslab/metrics.hpp"
#include "pslab/synthdata.hpp"
#include "pslab/trainer.hpp"

namespace pslab {

struct Toggles {
    bool use_mue = true;
    bool use_pud = true;
    bool instance_prototypes = true;
    bool use_nae = true;

    std::string to_string() const;
};

struct ExperimentConfig {
    GenConfig gen{};
    Toggles toggles{};
    std::vector<double> beta_grid = {0.5};
    std::vector<std::size_t> gallery_grid;  // empty -> gen.gallery_size only
    std::vector<std::uint64_t> seeds = {1};
    std::string out_dir = "out";
    std::string exp_id = "exp";

    std::size_t train_steps = 0;  // 0 = evaluate the generator embeddings directly
    TrainConfig train{};

    double fusion_iou_threshold = 0.5;
    // share of the text-match signal in each channel's per-query confidence;
    // the detection path is coarsely text-conditioned, the text path strongly
    double mue_text_weight = 0.6;
    double pud_text_weight = 0.6;
    std::size_t jobs = 1;

    // Throws std::invalid_argument naming the offending field.
    void validate() const;

    std::string to_json() const;
    static ExperimentConfig from_json(const std::string& text);
    static ExperimentConfig from_json_file(const std::string& path);
};

struct PointMetrics {
    double map = 0.0;
    double top1 = 0.0, top5 = 0.0, top10 = 0.0;
    double db_image = 0.0, db_text = 0.0;
};

struct ResultRow {
    std::string exp_id;
    std::string config_hash;
    std::string build_id;
    std::uint64_t seed = 0;
    double beta = 0.0;
    std::size_t gallery_size = 0;
    std::string toggles;
    PointMetrics metrics;
    double wall_ms = 0.0;  // measured; reported in timings.csv only
};

// Per-query retrieval over a deterministic gallery (all scenes containing the
// target plus seeded distractors up to gallery_size), fusing the two proposal
// channels per scene and keeping the selected box per image.
std::vector<QueryResult> run_retrieval(const World& world, const Toggles& toggles, double beta,
                                       double fusion_iou_threshold, double mue_text_weight,
                                       double pud_text_weight, const ToyTrainer* trained);

PointMetrics evaluate_point(const ExperimentConfig& cfg, std::uint64_t seed, double beta,
                            std::size_t gallery_size);

// Runs the full (beta x gallery x seed) grid, in parallel over cfg.jobs
// workers, and writes results.csv / summary.json / timings.csv under
// cfg.out_dir. results.csv is byte-deterministic: rows appear in canonical
// grid order and the wall_ms column is pinned to 0 (measured times go to
// timings.csv).
std::vector<ResultRow> run_experiment(const ExperimentConfig& cfg);

// 64-bit FNV-1a of the canonical config JSON, as fixed-width hex.
std::string config_hash(const ExperimentConfig& cfg);
std::string build_id();

// Harness JSONL prediction records: {"query_id":..,"gallery_id":..,
// "box":[x1,y1,x2,y2],"score":..}, one per line.
struct PredictionRecord {
    std::int64_t query_id = 0;
    std::int64_t gallery_id = 0;
    Box box;
    double score = 0.0;
};
std::vector<PredictionRecord> read_predictions_jsonl(const std::string& path);
void write_predictions_jsonl(const std::vector<QueryResult>& results, const std::string& path);

// Assembles QueryResults for externally supplied predictions against a
// world's ground truth and scores them.
PointMetrics evaluate_predictions(const World& world, const std::vector<PredictionRecord>& preds,
                                  double iou_threshold = 0.5);

}  // namespace pslab
