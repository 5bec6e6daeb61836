// Command-line front end: generate-data, train, evaluate, ablate, report.
// Every flag is mirrored by a config-file key; flags override the file.

#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pdc/data.hpp"
#include "pdc/errors.hpp"
#include "pdc/harness.hpp"
#include "pdc/json_io.hpp"
#include "pdc/metrics.hpp"
#include "pdc/trainer.hpp"
#include "pdc/volnet.hpp"

using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw pdc::ConfigError("cannot open config file " + path);
    json j;
    try {
        is >> j;
    } catch (const json::exception& e) {
        throw pdc::ConfigError("config file " + path + ": " + e.what());
    }
    return j;
}

pdc::Dims3 to_dims(const std::vector<int64_t>& v, const char* what) {
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw pdc::ConfigError(std::string(what) + " takes one value or three");
}

// --- generate-data ----------------------------------------------------------

struct GenArgs {
    std::string config_path, out_dir;
    int n = 0;
    std::vector<int64_t> shape;
    uint64_t seed = 0;
    double test_fraction = -1.0, noise_sigma = -1.0, bias_amplitude = -1.0;
    bool seed_set = false;
};

int run_generate(const GenArgs& a, const CLI::App* cmd) {
    pdc::GeneratorParams p;
    if (!a.config_path.empty()) from_json(load_json_file(a.config_path), p);
    if (cmd->count("--n")) p.n_volumes = a.n;
    if (cmd->count("--shape")) p.shape = to_dims(a.shape, "--shape");
    if (cmd->count("--seed")) p.seed = a.seed;
    if (cmd->count("--test-fraction")) p.test_fraction = a.test_fraction;
    if (cmd->count("--noise-sigma")) p.noise_sigma = a.noise_sigma;
    if (cmd->count("--bias-amplitude")) p.bias_amplitude = a.bias_amplitude;
    const pdc::DatasetManifest m = pdc::generate_synthetic(p, a.out_dir);
    std::printf("wrote %zu volumes (%zu train, %zu test) under %s\n", m.samples.size(),
                m.train_labeled.size() + m.train_unlabeled.size(), m.test.size(),
                a.out_dir.c_str());
    std::printf("manifest: %s/manifest.json\n", a.out_dir.c_str());
    return 0;
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
    std::string config_path, manifest, out_dir = "train_out", variant, phase_order, norm;
    int64_t iters = 0;
    uint64_t seed = 0;
    double lr = 0.0, lambda_c = 0.0, lambda_pd = 0.0, labeled_fraction = 0.0;
    int batch_size = 0, labeled_per_batch = 0;
    std::vector<int64_t> crop;
    int64_t checkpoint_every = 0, log_every = 0;
};

int run_train(const TrainArgs& a, const CLI::App* cmd) {
    pdc::TrainConfig cfg;
    std::string manifest_path = a.manifest;
    std::string out_dir = a.out_dir;
    double labeled_fraction = 0.0;  // 0: use the manifest's splits as-is
    if (!a.config_path.empty()) {
        const json j = load_json_file(a.config_path);
        from_json(j, cfg);
        if (j.contains("manifest") && !cmd->count("--manifest"))
            manifest_path = j.at("manifest").get<std::string>();
        if (j.contains("out_dir") && !cmd->count("--out"))
            out_dir = j.at("out_dir").get<std::string>();
        if (j.contains("labeled_fraction"))
            labeled_fraction = j.at("labeled_fraction").get<double>();
    }
    if (cmd->count("--labeled-fraction")) labeled_fraction = a.labeled_fraction;
    if (cmd->count("--variant")) cfg.variant = pdc::variant_from_name(a.variant);
    if (cmd->count("--iters")) cfg.total_iterations = a.iters;
    if (cmd->count("--seed")) cfg.seed = a.seed;
    if (cmd->count("--lr")) cfg.base_lr = a.lr;
    if (cmd->count("--lambda-c")) cfg.lambda_c_scale = a.lambda_c;
    if (cmd->count("--lambda-pd")) cfg.lambda_pd_scale = a.lambda_pd;
    if (cmd->count("--batch-size")) cfg.batch_size = a.batch_size;
    if (cmd->count("--labeled-per-batch")) cfg.labeled_per_batch = a.labeled_per_batch;
    if (cmd->count("--crop")) cfg.crop = to_dims(a.crop, "--crop");
    if (cmd->count("--phase-order")) cfg.phase_order = a.phase_order;
    if (cmd->count("--checkpoint-every")) cfg.checkpoint_every = a.checkpoint_every;
    if (cmd->count("--log-every")) cfg.log_every = a.log_every;
    if (cmd->count("--norm")) {
        json jn{{"norm", a.norm}};
        from_json(jn, cfg.net);
    }
    if (manifest_path.empty()) throw pdc::ConfigError("train: --manifest is required");

    pdc::DatasetManifest manifest = pdc::load_manifest(manifest_path);
    if (labeled_fraction > 0.0)
        manifest = pdc::split_train(manifest, labeled_fraction, cfg.seed);
    const pdc::TrainResult res = pdc::train_run(cfg, manifest, out_dir);
    std::printf("final checkpoint: %s\n", res.final_checkpoint.c_str());
    std::printf("loss log: %s\n", res.log_path.c_str());
    return 0;
}

// --- evaluate ---------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint, manifest, split = "test", out_path, method = "linear";
    std::vector<int64_t> window{32}, stride{16};
    std::vector<double> spacing{1.0, 1.0, 1.0};
};

int run_evaluate(const EvalArgs& a) {
    const pdc::ParameterStore params = pdc::load_checkpoint(a.checkpoint);
    const pdc::DatasetManifest manifest = pdc::load_manifest(a.manifest);
    const std::vector<std::string>* ids = nullptr;
    if (a.split == "test")
        ids = &manifest.test;
    else if (a.split == "train_labeled")
        ids = &manifest.train_labeled;
    else
        throw pdc::ConfigError("evaluate: --split must be test or train_labeled");
    if (ids->empty()) throw pdc::DataError("evaluate: split \"" + a.split + "\" is empty");

    std::vector<pdc::EvalCase> cases;
    for (const auto& id : *ids) {
        pdc::VolumeSample s = pdc::normalize(pdc::load_sample(manifest, id));
        if (!s.has_label) throw pdc::DataError("evaluate: sample " + id + " has no label");
        pdc::EvalCase c;
        c.volume = pdc::Tensor::zeros(
            {1, s.intensity.dim(0), s.intensity.dim(1), s.intensity.dim(2)});
        c.volume.data = s.intensity.data;
        c.gt = s.label;
        cases.push_back(std::move(c));
    }

    if (a.spacing.size() != 3) throw pdc::ConfigError("evaluate: --spacing takes three values");
    const pdc::PercentileMethod method = [&] {
        if (a.method == "linear") return pdc::PercentileMethod::linear;
        if (a.method == "nearest_rank") return pdc::PercentileMethod::nearest_rank;
        throw pdc::ConfigError("evaluate: --percentile-method must be linear or nearest_rank");
    }();
    const pdc::MetricsReport rep =
        pdc::evaluate(params, cases, to_dims(a.window, "--window"),
                      to_dims(a.stride, "--stride"),
                      {a.spacing[0], a.spacing[1], a.spacing[2]}, method);

    std::printf("cases: %d (%d with both surfaces)\n", rep.n_cases, rep.n_surface_cases);
    std::printf("dice     %8.4f   (%.2f%%)\n", rep.dice, rep.dice * 100.0);
    std::printf("jaccard  %8.4f   (%.2f%%)\n", rep.jaccard, rep.jaccard * 100.0);
    std::printf("asd      %8.4f\n", rep.asd);
    std::printf("95hd     %8.4f\n", rep.hd95);
    std::printf("cd       %8.4f\n", rep.cd);
    std::printf("qcd      %8.4f\n", rep.qcd);
    if (!a.out_path.empty()) {
        json j = rep;
        std::ofstream os(a.out_path);
        if (!os) throw pdc::Error("evaluate: cannot write " + a.out_path);
        os << j.dump(2) << "\n";
        std::printf("report: %s\n", a.out_path.c_str());
    }
    return 0;
}

// --- ablate -----------------------------------------------------------------

struct AblateArgs {
    std::string config_path, manifest, out_dir;
    std::vector<std::string> variants;
    std::vector<double> fractions;
    std::vector<uint64_t> seeds;
    int64_t iters = 0;
};

int run_ablate(const AblateArgs& a, const CLI::App* cmd) {
    pdc::ExperimentSpec spec;
    if (!a.config_path.empty()) from_json(load_json_file(a.config_path), spec);
    if (cmd->count("--manifest")) spec.manifest_path = a.manifest;
    if (cmd->count("--out")) spec.out_dir = a.out_dir;
    if (cmd->count("--variants")) {
        spec.variants.clear();
        for (const auto& n : a.variants) spec.variants.push_back(pdc::variant_from_name(n));
    }
    if (cmd->count("--fractions")) spec.fractions = a.fractions;
    if (cmd->count("--seeds")) spec.seeds = a.seeds;
    if (cmd->count("--iters")) spec.base.total_iterations = a.iters;

    const pdc::ExperimentResult res = pdc::run_experiment(spec);
    std::printf("%s", pdc::format_results_table(res.rows).c_str());
    std::printf("csv: %s\n", res.csv_path.c_str());
    return 0;
}

// --- report -----------------------------------------------------------------

int run_report(const std::vector<std::string>& csvs, const std::string& out_path) {
    const std::vector<pdc::DeltaRow> rows = pdc::compare_report(csvs);
    const std::string table = pdc::format_delta_table(rows);
    std::printf("%s", table.c_str());
    if (!out_path.empty()) {
        std::ofstream os(out_path);
        if (!os) throw pdc::Error("report: cannot write " + out_path);
        os << table;
        std::printf("table: %s\n", out_path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"dual-head volumetric segmentation: data, training, evaluation, ablations"};
    app.require_subcommand(1);

    GenArgs g;
    CLI::App* gen = app.add_subcommand("generate-data", "write a synthetic dataset + manifest");
    gen->add_option("--config", g.config_path, "generator params as JSON");
    gen->add_option("--out", g.out_dir, "output directory")->required();
    gen->add_option("--n", g.n, "number of volumes");
    gen->add_option("--shape", g.shape, "volume shape (1 or 3 ints)")->expected(1, 3);
    gen->add_option("--seed", g.seed, "generator seed");
    gen->add_option("--test-fraction", g.test_fraction, "held-out fraction");
    gen->add_option("--noise-sigma", g.noise_sigma, "additive noise sigma");
    gen->add_option("--bias-amplitude", g.bias_amplitude, "bias field amplitude");

    TrainArgs t;
    CLI::App* tr = app.add_subcommand("train", "run one training configuration");
    tr->add_option("--config", t.config_path, "TrainConfig JSON (may carry manifest/out_dir)");
    tr->add_option("--manifest", t.manifest, "dataset manifest");
    tr->add_option("--out", t.out_dir, "output directory");
    tr->add_option("--labeled-fraction", t.labeled_fraction,
                   "re-split training ids, keeping this fraction labeled");
    tr->add_option("--variant", t.variant, "supervised_only|vnet_gc|vnet_ec|pdc");
    tr->add_option("--iters", t.iters, "total iterations");
    tr->add_option("--seed", t.seed, "run seed");
    tr->add_option("--lr", t.lr, "base learning rate");
    tr->add_option("--lambda-c", t.lambda_c, "consistency ramp scale");
    tr->add_option("--lambda-pd", t.lambda_pd, "decoupling ramp scale");
    tr->add_option("--batch-size", t.batch_size, "samples per batch");
    tr->add_option("--labeled-per-batch", t.labeled_per_batch, "labeled samples per batch");
    tr->add_option("--crop", t.crop, "training crop (1 or 3 ints)")->expected(1, 3);
    tr->add_option("--phase-order", t.phase_order, "permutation of ABC");
    tr->add_option("--checkpoint-every", t.checkpoint_every, "checkpoint cadence (0: final)");
    tr->add_option("--log-every", t.log_every, "loss log cadence");
    tr->add_option("--norm", t.norm, "batch|instance");

    EvalArgs e;
    CLI::App* ev = app.add_subcommand("evaluate", "sliding-window metrics for a checkpoint");
    ev->add_option("--checkpoint", e.checkpoint, "checkpoint file")->required();
    ev->add_option("--manifest", e.manifest, "dataset manifest")->required();
    ev->add_option("--split", e.split, "test|train_labeled");
    ev->add_option("--window", e.window, "inference window (1 or 3 ints)")->expected(1, 3);
    ev->add_option("--stride", e.stride, "inference stride (1 or 3 ints)")->expected(1, 3);
    ev->add_option("--spacing", e.spacing, "voxel spacing (3 doubles)")->expected(3);
    ev->add_option("--percentile-method", e.method, "linear|nearest_rank");
    ev->add_option("--out", e.out_path, "write the report as JSON");

    AblateArgs ab;
    CLI::App* abl = app.add_subcommand("ablate", "variant x fraction x seed grid");
    abl->add_option("--config", ab.config_path, "ExperimentSpec JSON");
    abl->add_option("--manifest", ab.manifest, "dataset manifest");
    abl->add_option("--out", ab.out_dir, "output directory");
    abl->add_option("--variants", ab.variants, "variant names");
    abl->add_option("--fractions", ab.fractions, "labeled fractions");
    abl->add_option("--seeds", ab.seeds, "run seeds");
    abl->add_option("--iters", ab.iters, "override total iterations");

    std::vector<std::string> report_csvs;
    std::string report_out;
    CLI::App* rep = app.add_subcommand("report", "pdc vs vnet_gc Dice deltas per fraction");
    rep->add_option("csv", report_csvs, "results.csv paths")->required();
    rep->add_option("--out", report_out, "write the delta table to a file");

    try {
        app.parse(argc, argv);
        if (gen->parsed()) return run_generate(g, gen);
        if (tr->parsed()) return run_train(t, tr);
        if (ev->parsed()) return run_evaluate(e);
        if (abl->parsed()) return run_ablate(ab, abl);
        if (rep->parsed()) return run_report(report_csvs, report_out);
    } catch (const CLI::ParseError& pe) {
        return app.exit(pe) == 0 ? 0 : 1;
    } catch (const pdc::ConfigError& ce) {
        std::fprintf(stderr, "error: %s\n", ce.what());
        return 1;
    } catch (const pdc::DataError& de) {
        std::fprintf(stderr, "error: %s\n", de.what());
        return 2;
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 3;
    }
    return 0;
}
