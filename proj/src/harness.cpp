#include "pdc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pdc/errors.hpp"
#include "pdc/json_io.hpp"
#include "pdc/rng.hpp"

namespace fs = std::filesystem;

namespace pdc {

namespace {

constexpr uint64_t kSplitStream = 0x5B17;

std::string fmt(const char* f, ...) {
    char buf[128];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof(buf), f, ap);
    va_end(ap);
    return buf;
}

}  // namespace

void ExperimentSpec::validate() const {
    if (manifest_path.empty()) throw ConfigError("experiment: manifest path is required");
    if (variants.empty()) throw ConfigError("experiment: variant list is empty");
    if (fractions.empty()) throw ConfigError("experiment: fractions list is empty");
    for (double f : fractions)
        if (!(f > 0.0 && f <= 1.0))
            throw ConfigError("experiment: fractions must lie in (0, 1]");
    if (seeds.empty()) throw ConfigError("experiment: seeds list is empty");
    if (out_dir.empty()) throw ConfigError("experiment: output directory is required");
    for (int a = 0; a < 3; ++a) {
        if (eval_window[static_cast<size_t>(a)] < 1 || eval_stride[static_cast<size_t>(a)] < 1)
            throw ConfigError("experiment: eval window/stride must be positive");
        if (eval_stride[static_cast<size_t>(a)] > eval_window[static_cast<size_t>(a)])
            throw ConfigError("experiment: eval stride must not exceed the window");
    }
}

DatasetManifest split_train(const DatasetManifest& manifest, double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction <= 1.0))
        throw ConfigError("split_train: fraction must lie in (0, 1]");
    std::vector<std::string> ids = manifest.train_labeled;
    ids.insert(ids.end(), manifest.train_unlabeled.begin(), manifest.train_unlabeled.end());
    if (ids.empty()) throw DataError("split_train: manifest has no training samples");
    std::sort(ids.begin(), ids.end());

    Rng rng(mix_seed(seed, kSplitStream));
    rng.shuffle(ids);

    const int64_t n = static_cast<int64_t>(ids.size());
    int64_t n_labeled = std::lround(fraction * static_cast<double>(n));
    n_labeled = std::clamp<int64_t>(n_labeled, 1, n);

    DatasetManifest out = manifest;
    out.train_labeled.assign(ids.begin(), ids.begin() + n_labeled);
    out.train_unlabeled.assign(ids.begin() + n_labeled, ids.end());
    for (const auto& id : out.train_labeled)
        if (out.entry(id).label_path.empty())
            throw DataError("split_train: training sample \"" + id + "\" has no label on disk");
    for (auto& e : out.samples)
        if (std::find(out.train_unlabeled.begin(), out.train_unlabeled.end(), e.id) !=
            out.train_unlabeled.end())
            e.label_path.clear();
    out.validate();
    return out;
}

uint64_t config_hash(const std::string& canonical_json) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : canonical_json) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Result rows
// ---------------------------------------------------------------------------

namespace {

std::string row_to_csv(const ResultRow& r) {
    char buf[384];
    std::string cd = r.has_coupling ? fmt("%.12g", r.cd) : "";
    std::string qcd = r.has_coupling ? fmt("%.12g", r.qcd) : "";
    std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.12g,%.12g,%.12g,%.12g,%s,%s,%llu,%s\n",
                  r.variant.c_str(), r.n_labeled, r.n_unlabeled, r.dice, r.jaccard, r.asd,
                  r.hd95, cd.c_str(), qcd.c_str(), static_cast<unsigned long long>(r.seed),
                  r.config_hash_hex.c_str());
    return buf;
}

constexpr const char* kCsvHeader =
    "variant,n_labeled,n_unlabeled,dice,jaccard,asd,hd95,cd,qcd,seed,config_hash\n";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

void write_results_csv(const std::vector<ResultRow>& rows, const std::string& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw Error("results: cannot write " + path);
    os << kCsvHeader;
    for (const auto& r : rows) os << row_to_csv(r);
}

std::vector<ResultRow> read_results_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw DataError("results: cannot open " + path);
    std::string line;
    if (!std::getline(is, line) || line + "\n" != kCsvHeader)
        throw DataError("results: unexpected header in " + path);
    std::vector<ResultRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 11) throw DataError("results: malformed row in " + path + ": " + line);
        ResultRow r;
        r.variant = f[0];
        r.n_labeled = std::stoi(f[1]);
        r.n_unlabeled = std::stoi(f[2]);
        r.dice = std::stod(f[3]);
        r.jaccard = std::stod(f[4]);
        r.asd = std::stod(f[5]);
        r.hd95 = std::stod(f[6]);
        r.has_coupling = !f[7].empty();
        if (r.has_coupling) {
            r.cd = std::stod(f[7]);
            r.qcd = std::stod(f[8]);
        }
        r.seed = std::stoull(f[9]);
        r.config_hash_hex = f[10];
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string format_results_table(const std::vector<ResultRow>& rows) {
    std::ostringstream os;
    os << fmt("%-16s %5s %5s %9s %11s %8s %8s %8s %8s %5s\n", "variant", "L", "U", "Dice(%)",
              "Jaccard(%)", "ASD", "95HD", "CD", "QCD", "seed");
    for (const auto& r : rows) {
        const std::string cd = r.has_coupling ? fmt("%8.4f", r.cd) : "       -";
        const std::string qcd = r.has_coupling ? fmt("%8.4f", r.qcd) : "       -";
        os << fmt("%-16s %5d %5d %9.2f %11.2f %8.2f %8.2f %s %s %5llu\n", r.variant.c_str(),
                  r.n_labeled, r.n_unlabeled, r.dice * 100.0, r.jaccard * 100.0, r.asd, r.hd95,
                  cd.c_str(), qcd.c_str(), static_cast<unsigned long long>(r.seed));
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

ExperimentResult run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    const DatasetManifest manifest = load_manifest(spec.manifest_path);
    if (manifest.test.empty()) throw DataError("experiment: manifest has no test split");

    fs::create_directories(fs::path(spec.out_dir) / "cells");
    {
        nlohmann::json j = spec;
        std::ofstream os(fs::path(spec.out_dir) / "experiment.json");
        os << j.dump(2) << "\n";
    }

    // test cases are shared by every cell
    std::vector<EvalCase> cases;
    for (const auto& id : manifest.test) {
        VolumeSample s = normalize(load_sample(manifest, id));
        EvalCase c;
        c.volume = Tensor::zeros(
            {1, s.intensity.dim(0), s.intensity.dim(1), s.intensity.dim(2)});
        c.volume.data = s.intensity.data;
        c.gt = s.label;
        cases.push_back(std::move(c));
    }

    std::vector<double> fractions = spec.fractions;
    std::sort(fractions.begin(), fractions.end());

    ExperimentResult result;
    result.csv_path = (fs::path(spec.out_dir) / "results.csv").string();
    result.table_path = (fs::path(spec.out_dir) / "results.txt").string();
    std::ofstream csv(result.csv_path, std::ios::trunc);
    if (!csv) throw Error("experiment: cannot write " + result.csv_path);
    csv << kCsvHeader;

    for (double fraction : fractions) {
        for (Variant variant : spec.variants) {
            for (uint64_t seed : spec.seeds) {
                TrainConfig cfg = spec.base;
                const std::string vname = variant_name(variant);
                if (spec.variant_overrides.contains(vname))
                    from_json(spec.variant_overrides.at(vname), cfg);
                cfg.variant = variant;
                cfg.seed = seed;
                if (variant == Variant::supervised_only)
                    cfg.labeled_per_batch = cfg.batch_size;
                cfg.validate();

                const DatasetManifest split = split_train(manifest, fraction, seed);

                const std::string cell = fmt("%s_f%02d_s%llu", vname.c_str(),
                                             static_cast<int>(std::lround(fraction * 100.0)),
                                             static_cast<unsigned long long>(seed));
                const fs::path cell_dir = fs::path(spec.out_dir) / "cells" / cell;
                fs::create_directories(cell_dir);

                nlohmann::json cfg_json;
                cfg_json["fraction"] = fraction;
                cfg_json["train"] = cfg;
                const std::string canonical = cfg_json.dump(2);
                {
                    std::ofstream os(cell_dir / "config.json");
                    os << canonical << "\n";
                }
                const uint64_t hash = config_hash(canonical);

                const TrainResult tr = train_run(cfg, split, cell_dir.string());
                const MetricsReport rep =
                    evaluate(tr.params, cases, spec.eval_window, spec.eval_stride);

                ResultRow row;
                row.variant = vname;
                row.n_labeled = static_cast<int>(split.train_labeled.size());
                row.n_unlabeled = static_cast<int>(split.train_unlabeled.size());
                row.dice = rep.dice;
                row.jaccard = rep.jaccard;
                row.asd = rep.asd;
                row.hd95 = rep.hd95;
                row.has_coupling = variant != Variant::supervised_only;
                row.cd = rep.cd;
                row.qcd = rep.qcd;
                row.seed = seed;
                row.config_hash_hex = fmt("%016llx", static_cast<unsigned long long>(hash));
                result.rows.push_back(row);
                csv << row_to_csv(row);
                csv.flush();
            }
        }
    }
    csv.close();

    std::ofstream table(result.table_path, std::ios::trunc);
    if (!table) throw Error("experiment: cannot write " + result.table_path);
    table << format_results_table(result.rows);
    return result;
}

// ---------------------------------------------------------------------------
// Comparison report
// ---------------------------------------------------------------------------

std::vector<DeltaRow> compare_report(const std::vector<std::string>& csv_paths) {
    if (csv_paths.empty()) throw ReportError("report: no result files given");
    std::vector<ResultRow> rows;
    for (const auto& p : csv_paths) {
        auto r = read_results_csv(p);
        rows.insert(rows.end(), r.begin(), r.end());
    }

    // group by labeled count; a fraction is identified by its split sizes
    std::map<int, std::map<uint64_t, const ResultRow*>> pdc_cells, gc_cells;
    std::map<int, int> unlabeled_of;
    for (const auto& r : rows) {
        if (r.variant == "pdc") pdc_cells[r.n_labeled][r.seed] = &r;
        if (r.variant == "vnet_gc") gc_cells[r.n_labeled][r.seed] = &r;
        unlabeled_of[r.n_labeled] = std::max(unlabeled_of[r.n_labeled], r.n_unlabeled);
    }

    std::vector<DeltaRow> out;
    for (const auto& [n_labeled, _] : unlabeled_of) {
        const auto pit = pdc_cells.find(n_labeled);
        const auto git = gc_cells.find(n_labeled);
        if (pit == pdc_cells.end())
            throw ReportError("report: no pdc rows for n_labeled=" + std::to_string(n_labeled));
        if (git == gc_cells.end())
            throw ReportError("report: no vnet_gc rows for n_labeled=" +
                              std::to_string(n_labeled));
        DeltaRow d;
        d.n_labeled = n_labeled;
        d.n_unlabeled = unlabeled_of[n_labeled];
        bool first = true;
        for (const auto& [seed, prow] : pit->second) {
            const auto g = git->second.find(seed);
            if (g == git->second.end())
                throw ReportError("report: missing cell vnet_gc n_labeled=" +
                                  std::to_string(n_labeled) + " seed=" + std::to_string(seed));
            const double delta = (prow->dice - g->second->dice) * 100.0;
            d.mean_pdc += prow->dice * 100.0;
            d.mean_vnet_gc += g->second->dice * 100.0;
            d.delta_mean += delta;
            d.delta_min = first ? delta : std::min(d.delta_min, delta);
            d.delta_max = first ? delta : std::max(d.delta_max, delta);
            first = false;
            ++d.n_seeds;
        }
        for (const auto& [seed, grow] : git->second)
            if (!pit->second.count(seed))
                throw ReportError("report: missing cell pdc n_labeled=" +
                                  std::to_string(n_labeled) + " seed=" + std::to_string(seed));
        d.mean_pdc /= d.n_seeds;
        d.mean_vnet_gc /= d.n_seeds;
        d.delta_mean /= d.n_seeds;
        out.push_back(d);
    }
    // std::map iteration is already ascending in n_labeled, i.e. fraction
    return out;
}

void to_json(nlohmann::json& j, const ExperimentSpec& s) {
    std::vector<std::string> names;
    for (Variant v : s.variants) names.push_back(variant_name(v));
    j = nlohmann::json{{"name", s.name},
                       {"manifest", s.manifest_path},
                       {"variants", names},
                       {"fractions", s.fractions},
                       {"seeds", s.seeds},
                       {"train", s.base},
                       {"variant_overrides", s.variant_overrides},
                       {"eval_window", s.eval_window},
                       {"eval_stride", s.eval_stride},
                       {"out_dir", s.out_dir}};
}

void from_json(const nlohmann::json& j, ExperimentSpec& s) {
    if (j.contains("name")) j.at("name").get_to(s.name);
    if (j.contains("manifest")) j.at("manifest").get_to(s.manifest_path);
    if (j.contains("variants")) {
        s.variants.clear();
        for (const auto& n : j.at("variants"))
            s.variants.push_back(variant_from_name(n.get<std::string>()));
    }
    if (j.contains("fractions")) j.at("fractions").get_to(s.fractions);
    if (j.contains("seeds")) j.at("seeds").get_to(s.seeds);
    if (j.contains("train")) from_json(j.at("train"), s.base);
    if (j.contains("variant_overrides")) s.variant_overrides = j.at("variant_overrides");
    if (j.contains("eval_window")) j.at("eval_window").get_to(s.eval_window);
    if (j.contains("eval_stride")) j.at("eval_stride").get_to(s.eval_stride);
    if (j.contains("out_dir")) j.at("out_dir").get_to(s.out_dir);
}

std::string format_delta_table(const std::vector<DeltaRow>& rows) {
    std::ostringstream os;
    os << fmt("%5s %5s %10s %13s %8s %8s %8s %6s\n", "L", "U", "Dice(pdc)", "Dice(vnet_gc)",
              "d_mean", "d_min", "d_max", "seeds");
    for (const auto& r : rows)
        os << fmt("%5d %5d %10.2f %13.2f %+8.2f %+8.2f %+8.2f %6d\n", r.n_labeled, r.n_unlabeled,
                  r.mean_pdc, r.mean_vnet_gc, r.delta_mean, r.delta_min, r.delta_max, r.n_seeds);
    return os.str();
}

}  // namespace pdc
