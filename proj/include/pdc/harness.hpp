#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdc/data.hpp"
#include "pdc/metrics.hpp"
#include "pdc/trainer.hpp"

namespace pdc {

struct ExperimentSpec {
    std::string name = "ablation";
    std::string manifest_path;
    std::vector<Variant> variants{Variant::supervised_only, Variant::vnet_gc, Variant::pdc};
    std::vector<double> fractions{0.1, 0.2, 0.3};
    std::vector<uint64_t> seeds{0, 1, 2};
    TrainConfig base;                    // per-cell config before overrides
    nlohmann::json variant_overrides;    // {"pdc": {"lambda_pd_scale": ...}, ...}
    Dims3 eval_window{32, 32, 32};
    Dims3 eval_stride{16, 16, 16};
    std::string out_dir = "ablation_out";

    void validate() const;  // throws ConfigError
};

// Deterministic labeled/unlabeled partition of the manifest's training ids:
// sorted ids, seeded shuffle, first round(fraction*n) become labeled (at
// least one). Unlabeled entries lose their label path in the returned
// manifest. Pure in (manifest ids, fraction, seed).
DatasetManifest split_train(const DatasetManifest& manifest, double fraction, uint64_t seed);

// FNV-1a over the canonical config text; keys CSV rows to checkpoints.
uint64_t config_hash(const std::string& canonical_json);

struct ResultRow {
    std::string variant;
    int n_labeled = 0;
    int n_unlabeled = 0;
    double dice = 0.0;
    double jaccard = 0.0;
    double asd = 0.0;
    double hd95 = 0.0;
    bool has_coupling = false;  // false for single-objective baselines
    double cd = 0.0;
    double qcd = 0.0;
    uint64_t seed = 0;
    std::string config_hash_hex;
};

struct ExperimentResult {
    std::vector<ResultRow> rows;
    std::string csv_path;
    std::string table_path;
};

// Trains and evaluates every (fraction, variant, seed) cell, appending one
// row per cell to <out>/results.csv and an aligned table to
// <out>/results.txt. Each cell directory keeps its config.json (the hashed
// text) and checkpoints.
ExperimentResult run_experiment(const ExperimentSpec& spec);

std::vector<ResultRow> read_results_csv(const std::string& path);
void write_results_csv(const std::vector<ResultRow>& rows, const std::string& path);
std::string format_results_table(const std::vector<ResultRow>& rows);

struct DeltaRow {
    int n_labeled = 0;
    int n_unlabeled = 0;
    double mean_pdc = 0.0;      // mean Dice, percent
    double mean_vnet_gc = 0.0;  // mean Dice, percent
    double delta_mean = 0.0;    // Dice points
    double delta_min = 0.0;
    double delta_max = 0.0;
    int n_seeds = 0;
};

// Per-fraction Dice difference pdc - vnet_gc over seed-matched rows,
// sorted by ascending labeled fraction. Throws ReportError when a
// (variant, fraction, seed) cell needed for a pair is missing.
std::vector<DeltaRow> compare_report(const std::vector<std::string>& csv_paths);

std::string format_delta_table(const std::vector<DeltaRow>& rows);

}  // namespace pdc
