#include "pdc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "pdc/errors.hpp"
#include "pdc/json_io.hpp"

namespace fs = std::filesystem;

namespace pdc {

namespace {

constexpr uint64_t kVolumeStream = 0x7001;

}  // namespace

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const ManifestEntry& DatasetManifest::entry(const std::string& id) const {
    for (const auto& e : samples)
        if (e.id == id) return e;
    throw DataError("manifest: unknown sample id \"" + id + "\"");
}

void DatasetManifest::validate() const {
    std::set<std::string> ids;
    for (const auto& e : samples) {
        if (!ids.insert(e.id).second) throw DataError("manifest: duplicate id \"" + e.id + "\"");
        for (int64_t d : e.shape)
            if (d <= 0) throw DataError("manifest: non-positive shape for \"" + e.id + "\"");
    }
    std::set<std::string> seen;
    auto check_split = [&](const std::vector<std::string>& split, const char* name,
                           bool need_label) {
        for (const auto& id : split) {
            if (!ids.count(id))
                throw DataError("manifest: split " + std::string(name) +
                                " references unknown id \"" + id + "\"");
            if (!seen.insert(id).second)
                throw DataError("manifest: id \"" + id + "\" appears in more than one split");
            if (need_label && entry(id).label_path.empty())
                throw DataError("manifest: " + std::string(name) + " sample \"" + id +
                                "\" has no label");
        }
    };
    check_split(train_labeled, "train_labeled", true);
    check_split(train_unlabeled, "train_unlabeled", false);
    check_split(test, "test", true);
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    nlohmann::json j;
    j["version"] = m.version;
    j["samples"] = nlohmann::json::array();
    for (const auto& e : m.samples) {
        nlohmann::json s;
        s["id"] = e.id;
        s["intensity"] = e.intensity_path;
        if (e.label_path.empty())
            s["label"] = nullptr;
        else
            s["label"] = e.label_path;
        s["shape"] = {e.shape[0], e.shape[1], e.shape[2]};
        s["spacing"] = {e.spacing[0], e.spacing[1], e.spacing[2]};
        j["samples"].push_back(std::move(s));
    }
    j["splits"]["train_labeled"] = m.train_labeled;
    j["splits"]["train_unlabeled"] = m.train_unlabeled;
    j["splits"]["test"] = m.test;

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("manifest: cannot write " + path);
    os << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("manifest: cannot open " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest: parse failure in " + path + ": " + e.what());
    }
    DatasetManifest m;
    m.root = fs::path(path).parent_path().string();
    try {
        m.version = j.at("version").get<int>();
        for (const auto& s : j.at("samples")) {
            ManifestEntry e;
            e.id = s.at("id").get<std::string>();
            e.intensity_path = s.at("intensity").get<std::string>();
            if (!s.at("label").is_null()) e.label_path = s.at("label").get<std::string>();
            const auto& sh = s.at("shape");
            e.shape = {sh.at(0).get<int64_t>(), sh.at(1).get<int64_t>(), sh.at(2).get<int64_t>()};
            const auto& sp = s.at("spacing");
            e.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(),
                         sp.at(2).get<double>()};
            m.samples.push_back(std::move(e));
        }
        m.train_labeled = j.at("splits").at("train_labeled").get<std::vector<std::string>>();
        m.train_unlabeled = j.at("splits").at("train_unlabeled").get<std::vector<std::string>>();
        m.test = j.at("splits").at("test").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError("manifest: malformed " + path + ": " + e.what());
    }
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// Volume files: raw float32 LE intensities, raw uint8 labels
// ---------------------------------------------------------------------------

namespace {

void write_f32(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path);
    std::vector<float> buf(t.data.size());
    for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(t.data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
}

Tensor read_f32(const std::string& path, const Dims3& shape) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    Tensor t = Tensor::zeros({shape[0], shape[1], shape[2]});
    std::vector<float> buf(t.data.size());
    is.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw DataError("truncated volume file " + path);
    for (size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<double>(buf[i]);
    return t;
}

void write_u8(const std::string& path, const Mask& m) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + path);
    os.write(reinterpret_cast<const char*>(m.v.data()),
             static_cast<std::streamsize>(m.v.size()));
}

Mask read_u8(const std::string& path, const Dims3& shape) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path);
    Mask m(shape);
    is.read(reinterpret_cast<char*>(m.v.data()), static_cast<std::streamsize>(m.v.size()));
    if (is.gcount() != static_cast<std::streamsize>(m.v.size()))
        throw DataError("truncated label file " + path);
    for (uint8_t b : m.v)
        if (b > 1) throw DataError("label file " + path + " holds values outside {0,1}");
    return m;
}

}  // namespace

VolumeSample load_sample(const DatasetManifest& m, const std::string& id) {
    const ManifestEntry& e = m.entry(id);
    VolumeSample s;
    s.id = id;
    s.spacing = e.spacing;
    const fs::path root(m.root);
    s.intensity = read_f32((root / e.intensity_path).string(), e.shape);
    if (!e.label_path.empty()) {
        s.label = read_u8((root / e.label_path).string(), e.shape);
        s.has_label = true;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

void GeneratorParams::validate() const {
    if (n_volumes < 2) throw ConfigError("generator: n_volumes must be >= 2");
    for (int64_t d : shape)
        if (d < 16) throw ConfigError("generator: every shape axis must be >= 16");
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw ConfigError("generator: test_fraction must lie in (0, 1)");
    if (!(axis_lo > 0.0 && axis_lo <= axis_hi && axis_hi < 0.5))
        throw ConfigError("generator: need 0 < axis_lo <= axis_hi < 0.5");
    if (!(lobe_lo > 0.0 && lobe_lo <= lobe_hi && lobe_hi < 0.5))
        throw ConfigError("generator: need 0 < lobe_lo <= lobe_hi < 0.5");
    if (max_lobes < 1) throw ConfigError("generator: max_lobes must be >= 1");
    if (noise_sigma < 0.0 || bias_amplitude < 0.0)
        throw ConfigError("generator: noise_sigma and bias_amplitude must be >= 0");
    if (fg_level_lo > fg_level_hi) throw ConfigError("generator: fg_level_lo > fg_level_hi");
}

namespace {

struct Rot3 {
    double m[3][3];
};

// Uniform random rotation from a normalized quaternion of four normals.
Rot3 random_rotation(Rng& rng) {
    double q[4];
    double n = 0.0;
    for (double& c : q) {
        c = rng.normal();
        n += c * c;
    }
    n = std::sqrt(n);
    for (double& c : q) c /= n;
    const double w = q[0], x = q[1], y = q[2], z = q[3];
    Rot3 r;
    r.m[0][0] = 1 - 2 * (y * y + z * z);
    r.m[0][1] = 2 * (x * y - w * z);
    r.m[0][2] = 2 * (x * z + w * y);
    r.m[1][0] = 2 * (x * y + w * z);
    r.m[1][1] = 1 - 2 * (x * x + z * z);
    r.m[1][2] = 2 * (y * z - w * x);
    r.m[2][0] = 2 * (x * z - w * y);
    r.m[2][1] = 2 * (y * z + w * x);
    r.m[2][2] = 1 - 2 * (x * x + y * y);
    return r;
}

struct Ellipsoid {
    double center[3];
    double semi[3];
    Rot3 rot;  // body-to-world

    bool contains(double p0, double p1, double p2) const {
        const double d[3] = {p0 - center[0], p1 - center[1], p2 - center[2]};
        double s = 0.0;
        for (int i = 0; i < 3; ++i) {
            // world-to-body: R^T * d
            const double b = rot.m[0][i] * d[0] + rot.m[1][i] * d[1] + rot.m[2][i] * d[2];
            const double q = b / semi[i];
            s += q * q;
        }
        return s <= 1.0;
    }

    // radius from the center to the surface along a world-space unit dir
    double radius_along(const double dir[3]) const {
        double s = 0.0;
        for (int i = 0; i < 3; ++i) {
            const double b = rot.m[0][i] * dir[0] + rot.m[1][i] * dir[1] + rot.m[2][i] * dir[2];
            const double q = b / semi[i];
            s += q * q;
        }
        return 1.0 / std::sqrt(s);
    }
};

}  // namespace

VolumeSample make_volume(const GeneratorParams& p, int index) {
    p.validate();
    Rng rng(mix_seed(p.seed, kVolumeStream + static_cast<uint64_t>(index)));

    const double E = static_cast<double>(std::min({p.shape[0], p.shape[1], p.shape[2]}));

    Ellipsoid main;
    for (int i = 0; i < 3; ++i) main.semi[i] = rng.uniform(p.axis_lo, p.axis_hi) * E;
    main.rot = random_rotation(rng);
    for (int i = 0; i < 3; ++i) {
        const double dim = static_cast<double>(p.shape[static_cast<size_t>(i)]);
        main.center[i] = rng.uniform(p.axis_hi * dim, (1.0 - p.axis_hi) * dim);
    }

    std::vector<Ellipsoid> lobes;
    const int n_lobes = 1 + static_cast<int>(rng.uniform_int(p.max_lobes));
    for (int l = 0; l < n_lobes; ++l) {
        double dir[3];
        double n = 0.0;
        for (double& c : dir) {
            c = rng.normal();
            n += c * c;
        }
        n = std::sqrt(n);
        for (double& c : dir) c /= n;
        const double r = main.radius_along(dir);
        Ellipsoid lobe;
        for (int i = 0; i < 3; ++i) lobe.center[i] = main.center[i] + r * dir[i];
        for (int i = 0; i < 3; ++i) lobe.semi[i] = rng.uniform(p.lobe_lo, p.lobe_hi) * E;
        lobe.rot = random_rotation(rng);
        lobes.push_back(lobe);
    }

    VolumeSample s;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "vol_%03d", index);
    s.id = idbuf;
    s.intensity = Tensor::zeros({p.shape[0], p.shape[1], p.shape[2]});
    s.label = Mask(p.shape);
    s.has_label = true;

    for (int64_t d = 0; d < p.shape[0]; ++d)
        for (int64_t h = 0; h < p.shape[1]; ++h)
            for (int64_t w = 0; w < p.shape[2]; ++w) {
                const double pd = static_cast<double>(d), ph = static_cast<double>(h),
                             pw = static_cast<double>(w);
                bool fg = main.contains(pd, ph, pw);
                for (const auto& lobe : lobes)
                    if (fg) break; else fg = lobe.contains(pd, ph, pw);
                if (fg) s.label.set(d, h, w, 1);
            }

    const double fg_level = rng.uniform(p.fg_level_lo, p.fg_level_hi);

    // smooth bias: three low-frequency cosine products, rescaled so the
    // field's maximum magnitude equals bias_amplitude
    Tensor bias = Tensor::zeros({p.shape[0], p.shape[1], p.shape[2]});
    if (p.bias_amplitude > 0.0) {
        constexpr double kTau = 6.283185307179586477;
        double freq[3][3], phase[3], amp[3];
        for (int j = 0; j < 3; ++j) {
            for (int i = 0; i < 3; ++i) freq[j][i] = rng.uniform(0.5, 1.5);
            phase[j] = rng.uniform(0.0, kTau);
            amp[j] = rng.uniform(-1.0, 1.0);
        }
        double max_abs = 0.0;
        for (int64_t d = 0; d < p.shape[0]; ++d)
            for (int64_t h = 0; h < p.shape[1]; ++h)
                for (int64_t w = 0; w < p.shape[2]; ++w) {
                    double b = 0.0;
                    for (int j = 0; j < 3; ++j) {
                        const double arg =
                            kTau * (freq[j][0] * static_cast<double>(d) /
                                        static_cast<double>(p.shape[0]) +
                                    freq[j][1] * static_cast<double>(h) /
                                        static_cast<double>(p.shape[1]) +
                                    freq[j][2] * static_cast<double>(w) /
                                        static_cast<double>(p.shape[2])) +
                            phase[j];
                        b += amp[j] * std::cos(arg);
                    }
                    bias.data[static_cast<size_t>((d * p.shape[1] + h) * p.shape[2] + w)] = b;
                    max_abs = std::max(max_abs, std::fabs(b));
                }
        if (max_abs > 0.0)
            for (auto& b : bias.data) b *= p.bias_amplitude / max_abs;
    }

    for (int64_t i = 0; i < s.intensity.numel(); ++i) {
        const double fgv = s.label.v[static_cast<size_t>(i)] ? fg_level : 0.0;
        const double noise = p.noise_sigma > 0.0 ? rng.normal(0.0, p.noise_sigma) : 0.0;
        s.intensity.data[static_cast<size_t>(i)] =
            p.bg_level + fgv + bias.data[static_cast<size_t>(i)] + noise;
    }
    return s;
}

DatasetManifest generate_synthetic(const GeneratorParams& p, const std::string& out_dir) {
    p.validate();
    fs::create_directories(out_dir);

    DatasetManifest m;
    m.root = out_dir;
    const int n_test = std::max(1, static_cast<int>(std::lround(
                                       p.test_fraction * static_cast<double>(p.n_volumes))));
    const int n_train = p.n_volumes - n_test;
    if (n_train < 1) throw ConfigError("generator: no training volumes left after the test split");

    for (int i = 0; i < p.n_volumes; ++i) {
        VolumeSample s = make_volume(p, i);
        ManifestEntry e;
        e.id = s.id;
        e.intensity_path = s.id + "_img.f32";
        e.label_path = s.id + "_lbl.u8";
        e.shape = p.shape;
        e.spacing = s.spacing;
        write_f32((fs::path(out_dir) / e.intensity_path).string(), s.intensity);
        write_u8((fs::path(out_dir) / e.label_path).string(), s.label);
        m.samples.push_back(e);
        if (i < n_train)
            m.train_labeled.push_back(s.id);
        else
            m.test.push_back(s.id);
    }
    m.validate();
    save_manifest(m, (fs::path(out_dir) / "manifest.json").string());
    return m;
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

VolumeSample normalize(VolumeSample s) {
    const int64_t n = s.intensity.numel();
    if (n == 0) throw NormalizationError("normalize: empty volume");
    double mean = 0.0;
    for (double v : s.intensity.data) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : s.intensity.data) {
        const double d = v - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);
    if (var <= 0.0)
        throw NormalizationError("normalize: volume \"" + s.id + "\" has zero variance");
    const double inv = 1.0 / std::sqrt(var);
    for (double& v : s.intensity.data) v = (v - mean) * inv;
    return s;
}

VolumeSample random_crop(const VolumeSample& s, const Dims3& crop, Rng& rng) {
    const Dims3 dims = s.dims();
    for (int a = 0; a < 3; ++a) {
        if (crop[static_cast<size_t>(a)] <= 0)
            throw ShapeError("random_crop: crop dims must be positive");
        if (crop[static_cast<size_t>(a)] > dims[static_cast<size_t>(a)])
            throw ShapeError("random_crop: crop exceeds volume extent on axis " +
                             std::to_string(a));
    }
    Dims3 corner;
    for (int a = 0; a < 3; ++a)
        corner[static_cast<size_t>(a)] = rng.uniform_int(
            dims[static_cast<size_t>(a)] - crop[static_cast<size_t>(a)] + 1);

    VolumeSample out;
    out.id = s.id;
    out.spacing = s.spacing;
    out.has_label = s.has_label;
    out.intensity = Tensor::zeros({crop[0], crop[1], crop[2]});
    if (s.has_label) out.label = Mask(crop);
    for (int64_t d = 0; d < crop[0]; ++d)
        for (int64_t h = 0; h < crop[1]; ++h)
            for (int64_t w = 0; w < crop[2]; ++w) {
                const int64_t sd = corner[0] + d, sh = corner[1] + h, sw = corner[2] + w;
                out.intensity.data[static_cast<size_t>((d * crop[1] + h) * crop[2] + w)] =
                    s.intensity.data[static_cast<size_t>((sd * dims[1] + sh) * dims[2] + sw)];
                if (s.has_label) out.label.set(d, h, w, s.label.at(sd, sh, sw));
            }
    return out;
}

namespace {

template <class Get, class Set>
void flip_axis(const Dims3& dims, int axis, Get get, Set set) {
    for (int64_t d = 0; d < dims[0]; ++d)
        for (int64_t h = 0; h < dims[1]; ++h)
            for (int64_t w = 0; w < dims[2]; ++w) {
                int64_t sd = d, sh = h, sw = w;
                if (axis == 0) sd = dims[0] - 1 - d;
                if (axis == 1) sh = dims[1] - 1 - h;
                if (axis == 2) sw = dims[2] - 1 - w;
                set(d, h, w, get(sd, sh, sw));
            }
}

void flip_sample(VolumeSample& s, int axis) {
    const Dims3 dims = s.dims();
    Tensor ti = s.intensity;
    flip_axis(dims, axis,
              [&](int64_t d, int64_t h, int64_t w) {
                  return ti.data[static_cast<size_t>((d * dims[1] + h) * dims[2] + w)];
              },
              [&](int64_t d, int64_t h, int64_t w, double v) {
                  s.intensity.data[static_cast<size_t>((d * dims[1] + h) * dims[2] + w)] = v;
              });
    if (s.has_label) {
        Mask tl = s.label;
        flip_axis(dims, axis,
                  [&](int64_t d, int64_t h, int64_t w) { return tl.at(d, h, w); },
                  [&](int64_t d, int64_t h, int64_t w, uint8_t v) { s.label.set(d, h, w, v); });
    }
}

// one 90° turn in the (H, W) plane: out(d, i, j) = in(d, j, W-1-i)
void rot90_sample(VolumeSample& s) {
    const Dims3 in = s.dims();
    const Dims3 out{in[0], in[2], in[1]};
    Tensor ti = Tensor::zeros({out[0], out[1], out[2]});
    for (int64_t d = 0; d < out[0]; ++d)
        for (int64_t i = 0; i < out[1]; ++i)
            for (int64_t j = 0; j < out[2]; ++j)
                ti.data[static_cast<size_t>((d * out[1] + i) * out[2] + j)] =
                    s.intensity.data[static_cast<size_t>(
                        (d * in[1] + j) * in[2] + (in[2] - 1 - i))];
    s.intensity = std::move(ti);
    if (s.has_label) {
        Mask tl(out);
        for (int64_t d = 0; d < out[0]; ++d)
            for (int64_t i = 0; i < out[1]; ++i)
                for (int64_t j = 0; j < out[2]; ++j)
                    tl.set(d, i, j, s.label.at(d, j, in[2] - 1 - i));
        s.label = std::move(tl);
    }
}

}  // namespace

VolumeSample augment(VolumeSample s, Rng& rng) {
    // fixed draw order keeps the rng stream independent of outcomes
    const bool f0 = rng.bernoulli(), f1 = rng.bernoulli(), f2 = rng.bernoulli();
    int64_t k = rng.uniform_int(4);
    if (f0) flip_sample(s, 0);
    if (f1) flip_sample(s, 1);
    if (f2) flip_sample(s, 2);
    if (s.intensity.dim(1) != s.intensity.dim(2)) k &= ~int64_t{1};  // shape-preserving only
    for (int64_t i = 0; i < k; ++i) rot90_sample(s);
    return s;
}

// ---------------------------------------------------------------------------
// Batch composition
// ---------------------------------------------------------------------------

BatchComposer::BatchComposer(const DatasetManifest& manifest, const BatchSpec& spec,
                             uint64_t seed)
    : spec_(spec), rng_(seed) {
    if (spec.batch_size < 1 || spec.labeled_per_batch < 1 ||
        spec.labeled_per_batch > spec.batch_size)
        throw ConfigError("batch: need 1 <= labeled_per_batch <= batch_size");
    manifest.validate();
    if (static_cast<int>(manifest.train_labeled.size()) < spec.labeled_per_batch)
        throw DataError("batch: " + std::to_string(manifest.train_labeled.size()) +
                        " labeled sample(s) cannot fill " +
                        std::to_string(spec.labeled_per_batch) + " labeled slots");
    const int unlabeled_slots = spec.batch_size - spec.labeled_per_batch;
    if (unlabeled_slots > 0 &&
        static_cast<int>(manifest.train_unlabeled.size()) < unlabeled_slots)
        throw DataError("batch: " + std::to_string(manifest.train_unlabeled.size()) +
                        " unlabeled sample(s) cannot fill " + std::to_string(unlabeled_slots) +
                        " unlabeled slots");

    for (const auto& id : manifest.train_labeled)
        labeled_pool_.push_back(normalize(load_sample(manifest, id)));
    if (unlabeled_slots > 0)
        for (const auto& id : manifest.train_unlabeled) {
            VolumeSample s = normalize(load_sample(manifest, id));
            s.has_label = false;  // labels must never leak into the unlabeled path
            s.label = Mask();
            unlabeled_pool_.push_back(std::move(s));
        }

    labeled_queue_.resize(labeled_pool_.size());
    for (size_t i = 0; i < labeled_queue_.size(); ++i) labeled_queue_[i] = i;
    rng_.shuffle(labeled_queue_);
    unlabeled_queue_.resize(unlabeled_pool_.size());
    for (size_t i = 0; i < unlabeled_queue_.size(); ++i) unlabeled_queue_[i] = i;
    rng_.shuffle(unlabeled_queue_);
}

VolumeSample BatchComposer::draw(std::vector<size_t>& queue, size_t& pos,
                                 const std::vector<VolumeSample>& pool) {
    if (pos >= queue.size()) {
        rng_.shuffle(queue);
        pos = 0;
    }
    const VolumeSample& base = pool[queue[pos++]];
    VolumeSample s = random_crop(base, spec_.crop, rng_);
    if (spec_.augment) s = augment(std::move(s), rng_);
    return s;
}

std::pair<std::vector<VolumeSample>, std::vector<VolumeSample>> BatchComposer::next() {
    std::vector<VolumeSample> labeled, unlabeled;
    for (int i = 0; i < spec_.labeled_per_batch; ++i)
        labeled.push_back(draw(labeled_queue_, labeled_pos_, labeled_pool_));
    for (int i = 0; i < spec_.batch_size - spec_.labeled_per_batch; ++i)
        unlabeled.push_back(draw(unlabeled_queue_, unlabeled_pos_, unlabeled_pool_));
    return {std::move(labeled), std::move(unlabeled)};
}

void to_json(nlohmann::json& j, const GeneratorParams& p) {
    j = nlohmann::json{{"n_volumes", p.n_volumes},
                       {"shape", p.shape},
                       {"test_fraction", p.test_fraction},
                       {"fg_level_lo", p.fg_level_lo},
                       {"fg_level_hi", p.fg_level_hi},
                       {"bg_level", p.bg_level},
                       {"bias_amplitude", p.bias_amplitude},
                       {"noise_sigma", p.noise_sigma},
                       {"axis_lo", p.axis_lo},
                       {"axis_hi", p.axis_hi},
                       {"lobe_lo", p.lobe_lo},
                       {"lobe_hi", p.lobe_hi},
                       {"max_lobes", p.max_lobes},
                       {"seed", p.seed}};
}

void from_json(const nlohmann::json& j, GeneratorParams& p) {
    if (j.contains("n_volumes")) j.at("n_volumes").get_to(p.n_volumes);
    if (j.contains("shape")) j.at("shape").get_to(p.shape);
    if (j.contains("test_fraction")) j.at("test_fraction").get_to(p.test_fraction);
    if (j.contains("fg_level_lo")) j.at("fg_level_lo").get_to(p.fg_level_lo);
    if (j.contains("fg_level_hi")) j.at("fg_level_hi").get_to(p.fg_level_hi);
    if (j.contains("bg_level")) j.at("bg_level").get_to(p.bg_level);
    if (j.contains("bias_amplitude")) j.at("bias_amplitude").get_to(p.bias_amplitude);
    if (j.contains("noise_sigma")) j.at("noise_sigma").get_to(p.noise_sigma);
    if (j.contains("axis_lo")) j.at("axis_lo").get_to(p.axis_lo);
    if (j.contains("axis_hi")) j.at("axis_hi").get_to(p.axis_hi);
    if (j.contains("lobe_lo")) j.at("lobe_lo").get_to(p.lobe_lo);
    if (j.contains("lobe_hi")) j.at("lobe_hi").get_to(p.lobe_hi);
    if (j.contains("max_lobes")) j.at("max_lobes").get_to(p.max_lobes);
    if (j.contains("seed")) j.at("seed").get_to(p.seed);
}

}  // namespace pdc
