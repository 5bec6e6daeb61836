#include "pdc/volnet.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include "pdc/errors.hpp"
#include "pdc/json_io.hpp"
#include "pdc/rng.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint container assumes a little-endian host");

namespace pdc {

namespace {

constexpr double kNormEps = 1e-5;
constexpr double kNormMomentum = 0.1;

// Seed stream tags for the three parameter groups.
constexpr uint64_t kExtractorStream = 0xE0;
constexpr uint64_t kHead1Stream = 0x11;
constexpr uint64_t kHead2Stream = 0x22;

}  // namespace

const char* group_name(ParamGroup g) {
    switch (g) {
        case ParamGroup::extractor: return "extractor";
        case ParamGroup::head1: return "head1";
        case ParamGroup::head2: return "head2";
    }
    return "?";
}

void NetworkConfig::validate() const {
    if (in_channels < 1) throw ConfigError("network: in_channels must be >= 1");
    if (num_classes < 2) throw ConfigError("network: num_classes must be >= 2");
    if (encoder_channels.empty()) throw ConfigError("network: encoder_channels must be non-empty");
    for (int c : encoder_channels)
        if (c <= 0) throw ConfigError("network: encoder_channels must be strictly positive");
    if (kernel_size < 1 || kernel_size % 2 == 0)
        throw ConfigError("network: kernel_size must be odd, got " + std::to_string(kernel_size));
    if (head_hidden_channels < 0) throw ConfigError("network: head_hidden_channels must be >= 0");
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
    j = nlohmann::json{{"in_channels", c.in_channels},
                       {"num_classes", c.num_classes},
                       {"encoder_channels", c.encoder_channels},
                       {"head_hidden_channels", c.head_hidden_channels},
                       {"kernel_size", c.kernel_size},
                       {"norm", c.norm == NormKind::batch ? "batch" : "instance"},
                       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
    if (j.contains("in_channels")) j.at("in_channels").get_to(c.in_channels);
    if (j.contains("num_classes")) j.at("num_classes").get_to(c.num_classes);
    if (j.contains("encoder_channels")) j.at("encoder_channels").get_to(c.encoder_channels);
    if (j.contains("head_hidden_channels"))
        j.at("head_hidden_channels").get_to(c.head_hidden_channels);
    if (j.contains("kernel_size")) j.at("kernel_size").get_to(c.kernel_size);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("norm")) {
        const std::string s = j.at("norm").get<std::string>();
        if (s == "batch")
            c.norm = NormKind::batch;
        else if (s == "instance")
            c.norm = NormKind::instance;
        else
            throw ConfigError("network: norm must be \"batch\" or \"instance\", got \"" + s + "\"");
    }
}

// ---------------------------------------------------------------------------
// ParameterStore
// ---------------------------------------------------------------------------

int ParameterStore::index_of(const std::string& name) const {
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].name == name) return static_cast<int>(i);
    return -1;
}

ParamEntry& ParameterStore::find(const std::string& name) {
    int i = index_of(name);
    if (i < 0) throw Error("parameter not found: " + name);
    return entries[static_cast<size_t>(i)];
}

const ParamEntry& ParameterStore::find(const std::string& name) const {
    int i = index_of(name);
    if (i < 0) throw Error("parameter not found: " + name);
    return entries[static_cast<size_t>(i)];
}

std::vector<int> ParameterStore::group_indices(ParamGroup g, bool trainable_only) const {
    std::vector<int> out;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].group == g && (!trainable_only || entries[i].trainable))
            out.push_back(static_cast<int>(i));
    return out;
}

std::vector<const Tensor*> ParameterStore::group_tensors(ParamGroup g, bool trainable_only) const {
    std::vector<const Tensor*> out;
    for (const auto& e : entries)
        if (e.group == g && (!trainable_only || e.trainable)) out.push_back(&e.value);
    return out;
}

std::vector<std::vector<int>> layer_groups(const ParameterStore& ps, ParamGroup g) {
    std::vector<std::vector<int>> out;
    std::string current;
    for (size_t i = 0; i < ps.entries.size(); ++i) {
        const auto& e = ps.entries[i];
        if (e.group != g || !e.trainable) continue;
        const auto dot = e.name.rfind('.');
        std::string layer = dot == std::string::npos ? e.name : e.name.substr(0, dot);
        if (out.empty() || layer != current) {
            out.emplace_back();
            current = std::move(layer);
        }
        out.back().push_back(static_cast<int>(i));
    }
    return out;
}

std::vector<Tensor> flatten_layers(const ParameterStore& ps,
                                   const std::vector<std::vector<int>>& groups) {
    std::vector<Tensor> out;
    out.reserve(groups.size());
    for (const auto& g : groups) {
        int64_t n = 0;
        for (int i : g) n += ps.entries[static_cast<size_t>(i)].value.numel();
        Tensor t({n});
        int64_t off = 0;
        for (int i : g) {
            const auto& v = ps.entries[static_cast<size_t>(i)].value.data;
            std::copy(v.begin(), v.end(), t.data.begin() + off);
            off += static_cast<int64_t>(v.size());
        }
        out.push_back(std::move(t));
    }
    return out;
}

int64_t ParameterStore::value_count(ParamGroup g) const {
    int64_t n = 0;
    for (const auto& e : entries)
        if (e.group == g) n += e.value.numel();
    return n;
}

void ParameterStore::validate() const {
    config.validate();
    std::set<std::string> names;
    for (const auto& e : entries)
        if (!names.insert(e.name).second) throw Error("duplicate parameter name: " + e.name);
    auto h1 = group_tensors(ParamGroup::head1, true);
    auto h2 = group_tensors(ParamGroup::head2, true);
    if (h1.size() != h2.size())
        throw PairingError("head parameter counts differ: " + std::to_string(h1.size()) + " vs " +
                           std::to_string(h2.size()));
    for (size_t k = 0; k < h1.size(); ++k)
        if (h1[k]->shape != h2[k]->shape)
            throw PairingError("head tensor " + std::to_string(k) + " shapes differ: " +
                               shape_str(h1[k]->shape) + " vs " + shape_str(h2[k]->shape));
}

// ---------------------------------------------------------------------------
// Network construction
// ---------------------------------------------------------------------------

namespace {

void he_normal_fill(Tensor& t, int64_t fan_in, Rng& rng) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = rng.normal(0.0, stddev);
}

void add_conv(ParameterStore& ps, const std::string& prefix, ParamGroup g, int in_ch, int out_ch,
              int k, Rng& rng) {
    ParamEntry w;
    w.name = prefix + ".weight";
    w.group = g;
    w.value = Tensor::zeros({out_ch, in_ch, k, k, k});
    he_normal_fill(w.value, static_cast<int64_t>(in_ch) * k * k * k, rng);
    ps.entries.push_back(std::move(w));

    ParamEntry b;
    b.name = prefix + ".bias";
    b.group = g;
    b.value = Tensor::zeros({out_ch});
    ps.entries.push_back(std::move(b));
}

// Transposed convolution weight, laid out (in_ch, out_ch, k, k, k).
void add_conv_transposed(ParameterStore& ps, const std::string& prefix, ParamGroup g, int in_ch,
                         int out_ch, int k, Rng& rng) {
    ParamEntry w;
    w.name = prefix + ".weight";
    w.group = g;
    w.value = Tensor::zeros({in_ch, out_ch, k, k, k});
    // Each output voxel receives exactly in_ch contributions at stride == k.
    he_normal_fill(w.value, in_ch, rng);
    ps.entries.push_back(std::move(w));

    ParamEntry b;
    b.name = prefix + ".bias";
    b.group = g;
    b.value = Tensor::zeros({out_ch});
    ps.entries.push_back(std::move(b));
}

void add_norm(ParameterStore& ps, const std::string& prefix, int ch, NormKind kind) {
    ParamEntry w;
    w.name = prefix + ".weight";
    w.group = ParamGroup::extractor;
    w.value = Tensor::full({ch}, 1.0);
    ps.entries.push_back(std::move(w));

    ParamEntry b;
    b.name = prefix + ".bias";
    b.group = ParamGroup::extractor;
    b.value = Tensor::zeros({ch});
    ps.entries.push_back(std::move(b));

    if (kind == NormKind::batch) {
        ParamEntry rm;
        rm.name = prefix + ".running_mean";
        rm.group = ParamGroup::extractor;
        rm.trainable = false;
        rm.value = Tensor::zeros({ch});
        ps.entries.push_back(std::move(rm));

        ParamEntry rv;
        rv.name = prefix + ".running_var";
        rv.group = ParamGroup::extractor;
        rv.trainable = false;
        rv.value = Tensor::full({ch}, 1.0);
        ps.entries.push_back(std::move(rv));
    }
}

}  // namespace

ParameterStore build_network(const NetworkConfig& cfg) {
    cfg.validate();
    ParameterStore ps;
    ps.config = cfg;

    const auto& ch = cfg.encoder_channels;
    const int levels = cfg.levels();
    const int k = cfg.kernel_size;

    Rng ext_rng(mix_seed(cfg.seed, kExtractorStream));
    Rng h1_rng(mix_seed(cfg.seed, kHead1Stream));
    Rng h2_rng(mix_seed(cfg.seed, kHead2Stream));

    for (int i = 0; i < levels; ++i) {
        const std::string p = "enc" + std::to_string(i);
        const int in_ch = i == 0 ? cfg.in_channels : ch[static_cast<size_t>(i)];
        add_conv(ps, p + ".conv1", ParamGroup::extractor, in_ch, ch[static_cast<size_t>(i)], k,
                 ext_rng);
        add_norm(ps, p + ".norm1", ch[static_cast<size_t>(i)], cfg.norm);
        add_conv(ps, p + ".conv2", ParamGroup::extractor, ch[static_cast<size_t>(i)],
                 ch[static_cast<size_t>(i)], k, ext_rng);
        add_norm(ps, p + ".norm2", ch[static_cast<size_t>(i)], cfg.norm);
        if (i + 1 < levels) {
            const std::string d = "down" + std::to_string(i);
            add_conv(ps, d + ".conv", ParamGroup::extractor, ch[static_cast<size_t>(i)],
                     ch[static_cast<size_t>(i + 1)], 2, ext_rng);
            add_norm(ps, d + ".norm", ch[static_cast<size_t>(i + 1)], cfg.norm);
        }
    }
    for (int i = levels - 2; i >= 0; --i) {
        const std::string u = "up" + std::to_string(i);
        add_conv_transposed(ps, u + ".conv", ParamGroup::extractor, ch[static_cast<size_t>(i + 1)],
                            ch[static_cast<size_t>(i)], 2, ext_rng);
        add_norm(ps, u + ".norm", ch[static_cast<size_t>(i)], cfg.norm);
        const std::string p = "dec" + std::to_string(i);
        add_conv(ps, p + ".conv1", ParamGroup::extractor, 2 * ch[static_cast<size_t>(i)],
                 ch[static_cast<size_t>(i)], k, ext_rng);
        add_norm(ps, p + ".norm1", ch[static_cast<size_t>(i)], cfg.norm);
        add_conv(ps, p + ".conv2", ParamGroup::extractor, ch[static_cast<size_t>(i)],
                 ch[static_cast<size_t>(i)], k, ext_rng);
        add_norm(ps, p + ".norm2", ch[static_cast<size_t>(i)], cfg.norm);
    }

    // Heads: spatial conv then pointwise conv, no normalization, so every
    // head parameter takes part in the layer-wise pairing.
    add_conv(ps, "head1.conv1", ParamGroup::head1, ch.front(), cfg.hidden_channels(), k, h1_rng);
    add_conv(ps, "head1.conv2", ParamGroup::head1, cfg.hidden_channels(), cfg.num_classes, 1,
             h1_rng);
    add_conv(ps, "head2.conv1", ParamGroup::head2, ch.front(), cfg.hidden_channels(), k, h2_rng);
    add_conv(ps, "head2.conv2", ParamGroup::head2, cfg.hidden_channels(), cfg.num_classes, 1,
             h2_rng);

    ps.validate();
    return ps;
}

void GradientStore::zero() {
    for (auto& t : g) t.fill(0.0);
}

// ---------------------------------------------------------------------------
// Convolution kernels (double precision, deterministic loop order)
// ---------------------------------------------------------------------------

namespace {

struct Shape5 {
    int64_t n, c, d, h, w;
    int64_t numel() const { return n * c * d * h * w; }
};

Shape5 shape5(const Tensor& t) {
    return Shape5{t.dim(0), t.dim(1), t.dim(2), t.dim(3), t.dim(4)};
}

// Zero-pad the spatial axes of src by p on each side into dst.
void pad_zero(const Tensor& src, int p, Tensor& dst) {
    const Shape5 s = shape5(src);
    const int64_t pd = s.d + 2 * p, ph = s.h + 2 * p, pw = s.w + 2 * p;
    std::vector<int64_t> want{s.n, s.c, pd, ph, pw};
    if (dst.shape != want) dst = Tensor::zeros(want);
    else dst.fill(0.0);
    for (int64_t n = 0; n < s.n; ++n)
        for (int64_t c = 0; c < s.c; ++c)
            for (int64_t d = 0; d < s.d; ++d)
                for (int64_t h = 0; h < s.h; ++h) {
                    const double* sp = src.ptr() + (((n * s.c + c) * s.d + d) * s.h + h) * s.w;
                    double* dp = dst.ptr() +
                                 (((n * s.c + c) * pd + d + p) * ph + h + p) * pw + p;
                    std::memcpy(dp, sp, static_cast<size_t>(s.w) * sizeof(double));
                }
}

// dst(n,co,d,h,w) = bias[co] + sum_{cs,kd,kh,kw} wfn(co,cs,kd,kh,kw) *
//                   srcpad(n,cs,d+kd,h+kh,w+kw)
template <class WFn>
void conv_same_core(const Tensor& srcpad, int64_t cs_count, int64_t co_count, int k, WFn wfn,
                    const double* bias, Tensor& dst) {
    const Shape5 o = shape5(dst);
    const int64_t pd = srcpad.dim(2), ph = srcpad.dim(3), pw = srcpad.dim(4);
    for (int64_t n = 0; n < o.n; ++n)
        for (int64_t co = 0; co < co_count; ++co) {
            double* out_nc = dst.ptr() + (n * co_count + co) * o.d * o.h * o.w;
            for (int64_t d = 0; d < o.d; ++d)
                for (int64_t h = 0; h < o.h; ++h) {
                    double* row = out_nc + (d * o.h + h) * o.w;
                    const double b = bias ? bias[co] : 0.0;
                    for (int64_t x = 0; x < o.w; ++x) row[x] = b;
                    for (int64_t cs = 0; cs < cs_count; ++cs) {
                        const double* src_nc = srcpad.ptr() + (n * cs_count + cs) * pd * ph * pw;
                        for (int kd = 0; kd < k; ++kd)
                            for (int kh = 0; kh < k; ++kh) {
                                const double* srow = src_nc + ((d + kd) * ph + h + kh) * pw;
                                for (int kw = 0; kw < k; ++kw) {
                                    const double wv = wfn(co, cs, kd, kh, kw);
                                    const double* s = srow + kw;
                                    for (int64_t x = 0; x < o.w; ++x) row[x] += wv * s[x];
                                }
                            }
                    }
                }
        }
}

// Stride-1 same-padding convolution. Weight (Co, Ci, k, k, k).
struct Conv3d {
    int wi = -1, bi = -1;
    int in_ch = 0, out_ch = 0, k = 3;
    Tensor pad_in;   // padded forward input, kept for the weight gradient
    Tensor pad_dy;   // padded output gradient workspace

    void forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
        const Shape5 s = shape5(x);
        const int p = k / 2;
        std::vector<int64_t> want{s.n, static_cast<int64_t>(out_ch), s.d, s.h, s.w};
        if (y.shape != want) y = Tensor::zeros(want);
        pad_zero(x, p, pad_in);
        const double* wp = w.ptr();
        const int64_t ci = in_ch;
        const int kk = k;
        conv_same_core(
            pad_in, in_ch, out_ch, k,
            [wp, ci, kk](int64_t co, int64_t cs, int kd, int kh, int kw) {
                return wp[(((co * ci + cs) * kk + kd) * kk + kh) * kk + kw];
            },
            b.ptr(), y);
    }

    // dx may be null when the input gradient is not needed (first layer).
    void backward(const Tensor& dy, const Tensor& w, Tensor* dx, Tensor& dw, Tensor& db) {
        const Shape5 o = shape5(dy);
        const int p = k / 2;
        // weight gradient from the saved padded input
        {
            const int64_t pd = pad_in.dim(2), ph = pad_in.dim(3), pw_ = pad_in.dim(4);
            double* dwp = dw.ptr();
            for (int64_t co = 0; co < out_ch; ++co)
                for (int64_t ci = 0; ci < in_ch; ++ci)
                    for (int kd = 0; kd < k; ++kd)
                        for (int kh = 0; kh < k; ++kh)
                            for (int kw = 0; kw < k; ++kw) {
                                double acc = 0.0;
                                for (int64_t n = 0; n < o.n; ++n) {
                                    const double* dyp = dy.ptr() + (n * out_ch + co) * o.d * o.h * o.w;
                                    const double* xp =
                                        pad_in.ptr() + (n * in_ch + ci) * pd * ph * pw_;
                                    for (int64_t d = 0; d < o.d; ++d)
                                        for (int64_t h = 0; h < o.h; ++h) {
                                            const double* dyr = dyp + (d * o.h + h) * o.w;
                                            const double* xr =
                                                xp + ((d + kd) * ph + h + kh) * pw_ + kw;
                                            double s = 0.0;
                                            for (int64_t x = 0; x < o.w; ++x) s += dyr[x] * xr[x];
                                            acc += s;
                                        }
                                }
                                dwp[(((co * in_ch + ci) * k + kd) * k + kh) * k + kw] += acc;
                            }
        }
        // bias gradient
        {
            double* dbp = db.ptr();
            const int64_t plane = o.d * o.h * o.w;
            for (int64_t co = 0; co < out_ch; ++co) {
                double acc = 0.0;
                for (int64_t n = 0; n < o.n; ++n) {
                    const double* dyp = dy.ptr() + (n * out_ch + co) * plane;
                    for (int64_t i = 0; i < plane; ++i) acc += dyp[i];
                }
                dbp[co] += acc;
            }
        }
        // input gradient: correlation of padded dy with the flipped kernel
        if (dx) {
            std::vector<int64_t> want{o.n, static_cast<int64_t>(in_ch), o.d, o.h, o.w};
            if (dx->shape != want) *dx = Tensor::zeros(want);
            pad_zero(dy, p, pad_dy);
            const double* wp = w.ptr();
            const int64_t ci = in_ch;
            const int kk = k;
            conv_same_core(
                pad_dy, out_ch, in_ch, k,
                [wp, ci, kk](int64_t co, int64_t cs, int kd, int kh, int kw) {
                    // co indexes input channels here, cs output channels
                    return wp[(((cs * ci + co) * kk + (kk - 1 - kd)) * kk + (kk - 1 - kh)) * kk +
                              (kk - 1 - kw)];
                },
                nullptr, *dx);
        }
    }
};

// 2x2x2 stride-2 convolution (downsampling). Weight (Co, Ci, 2, 2, 2).
struct ConvDown {
    int wi = -1, bi = -1;
    int in_ch = 0, out_ch = 0;

    void forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
        const Shape5 s = shape5(x);
        const int64_t od = s.d / 2, oh = s.h / 2, ow = s.w / 2;
        std::vector<int64_t> want{s.n, static_cast<int64_t>(out_ch), od, oh, ow};
        if (y.shape != want) y = Tensor::zeros(want);
        const double* wp = w.ptr();
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t co = 0; co < out_ch; ++co) {
                double* yp = y.ptr() + (n * out_ch + co) * od * oh * ow;
                const double bv = b.ptr()[co];
                for (int64_t d = 0; d < od; ++d)
                    for (int64_t h = 0; h < oh; ++h) {
                        double* row = yp + (d * oh + h) * ow;
                        for (int64_t xw = 0; xw < ow; ++xw) row[xw] = bv;
                        for (int64_t ci = 0; ci < in_ch; ++ci) {
                            const double* xp = x.ptr() + (n * in_ch + ci) * s.d * s.h * s.w;
                            for (int kd = 0; kd < 2; ++kd)
                                for (int kh = 0; kh < 2; ++kh) {
                                    const double* xrow =
                                        xp + ((2 * d + kd) * s.h + 2 * h + kh) * s.w;
                                    for (int kw = 0; kw < 2; ++kw) {
                                        const double wv =
                                            wp[(((co * in_ch + ci) * 2 + kd) * 2 + kh) * 2 + kw];
                                        for (int64_t xw = 0; xw < ow; ++xw)
                                            row[xw] += wv * xrow[2 * xw + kw];
                                    }
                                }
                        }
                    }
            }
    }

    void backward(const Tensor& x, const Tensor& dy, const Tensor& w, Tensor& dx, Tensor& dw,
                  Tensor& db) {
        const Shape5 s = shape5(x);
        const Shape5 o = shape5(dy);
        if (dx.shape != x.shape) dx = Tensor::zeros(x.shape);
        const double* wp = w.ptr();
        double* dwp = dw.ptr();
        double* dbp = db.ptr();
        // input gradient: each input voxel maps to exactly one window slot
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t ci = 0; ci < in_ch; ++ci) {
                double* dxp = dx.ptr() + (n * in_ch + ci) * s.d * s.h * s.w;
                for (int64_t id = 0; id < s.d; ++id) {
                    const int64_t od = id >> 1;
                    const int kd = static_cast<int>(id & 1);
                    for (int64_t ih = 0; ih < s.h; ++ih) {
                        const int64_t oh = ih >> 1;
                        const int kh = static_cast<int>(ih & 1);
                        double* drow = dxp + (id * s.h + ih) * s.w;
                        for (int64_t iw = 0; iw < s.w; ++iw) {
                            const int64_t ow = iw >> 1;
                            const int kw = static_cast<int>(iw & 1);
                            double acc = 0.0;
                            for (int64_t co = 0; co < out_ch; ++co)
                                acc += wp[(((co * in_ch + ci) * 2 + kd) * 2 + kh) * 2 + kw] *
                                       dy.ptr()[((n * out_ch + co) * o.d + od) * o.h * o.w +
                                                oh * o.w + ow];
                            drow[iw] = acc;
                        }
                    }
                }
            }
        // weight + bias gradients
        for (int64_t co = 0; co < out_ch; ++co) {
            for (int64_t ci = 0; ci < in_ch; ++ci)
                for (int kd = 0; kd < 2; ++kd)
                    for (int kh = 0; kh < 2; ++kh)
                        for (int kw = 0; kw < 2; ++kw) {
                            double acc = 0.0;
                            for (int64_t n = 0; n < o.n; ++n) {
                                const double* dyp = dy.ptr() + (n * out_ch + co) * o.d * o.h * o.w;
                                const double* xp = x.ptr() + (n * in_ch + ci) * s.d * s.h * s.w;
                                for (int64_t d = 0; d < o.d; ++d)
                                    for (int64_t h = 0; h < o.h; ++h) {
                                        const double* dyr = dyp + (d * o.h + h) * o.w;
                                        const double* xr =
                                            xp + ((2 * d + kd) * s.h + 2 * h + kh) * s.w + kw;
                                        double sum = 0.0;
                                        for (int64_t xw = 0; xw < o.w; ++xw)
                                            sum += dyr[xw] * xr[2 * xw];
                                        acc += sum;
                                    }
                            }
                            dwp[(((co * in_ch + ci) * 2 + kd) * 2 + kh) * 2 + kw] += acc;
                        }
            double bacc = 0.0;
            for (int64_t n = 0; n < o.n; ++n) {
                const double* dyp = dy.ptr() + (n * out_ch + co) * o.d * o.h * o.w;
                for (int64_t i = 0; i < o.d * o.h * o.w; ++i) bacc += dyp[i];
            }
            dbp[co] += bacc;
        }
    }
};

// 2x2x2 stride-2 transposed convolution (upsampling). Weight (Ci, Co, 2, 2, 2).
struct ConvUp {
    int wi = -1, bi = -1;
    int in_ch = 0, out_ch = 0;

    void forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& y) {
        const Shape5 s = shape5(x);
        const int64_t od = s.d * 2, oh = s.h * 2, ow = s.w * 2;
        std::vector<int64_t> want{s.n, static_cast<int64_t>(out_ch), od, oh, ow};
        if (y.shape != want) y = Tensor::zeros(want);
        const double* wp = w.ptr();
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t co = 0; co < out_ch; ++co) {
                double* yp = y.ptr() + (n * out_ch + co) * od * oh * ow;
                const double bv = b.ptr()[co];
                for (int64_t d = 0; d < od; ++d) {
                    const int64_t id = d >> 1;
                    const int kd = static_cast<int>(d & 1);
                    for (int64_t h = 0; h < oh; ++h) {
                        const int64_t ih = h >> 1;
                        const int kh = static_cast<int>(h & 1);
                        double* row = yp + (d * oh + h) * ow;
                        for (int64_t xw = 0; xw < ow; ++xw) row[xw] = bv;
                        for (int64_t ci = 0; ci < in_ch; ++ci) {
                            const double* xrow =
                                x.ptr() + (n * in_ch + ci) * s.d * s.h * s.w + (id * s.h + ih) * s.w;
                            const double* wk =
                                wp + ((ci * out_ch + co) * 2 + kd) * 4 + kh * 2;
                            const double w0 = wk[0], w1 = wk[1];
                            for (int64_t xw = 0; xw < ow; ++xw)
                                row[xw] += (xw & 1 ? w1 : w0) * xrow[xw >> 1];
                        }
                    }
                }
            }
    }

    void backward(const Tensor& x, const Tensor& dy, const Tensor& w, Tensor& dx, Tensor& dw,
                  Tensor& db) {
        const Shape5 s = shape5(x);
        const Shape5 o = shape5(dy);
        if (dx.shape != x.shape) dx = Tensor::zeros(x.shape);
        const double* wp = w.ptr();
        double* dwp = dw.ptr();
        double* dbp = db.ptr();
        for (int64_t n = 0; n < s.n; ++n)
            for (int64_t ci = 0; ci < in_ch; ++ci) {
                double* dxp = dx.ptr() + (n * in_ch + ci) * s.d * s.h * s.w;
                for (int64_t id = 0; id < s.d; ++id)
                    for (int64_t ih = 0; ih < s.h; ++ih) {
                        double* drow = dxp + (id * s.h + ih) * s.w;
                        for (int64_t iw = 0; iw < s.w; ++iw) {
                            double acc = 0.0;
                            for (int64_t co = 0; co < out_ch; ++co) {
                                const double* dyp =
                                    dy.ptr() + (n * out_ch + co) * o.d * o.h * o.w;
                                for (int kd = 0; kd < 2; ++kd)
                                    for (int kh = 0; kh < 2; ++kh) {
                                        const double* dyr =
                                            dyp + ((2 * id + kd) * o.h + 2 * ih + kh) * o.w +
                                            2 * iw;
                                        const double* wk =
                                            wp + ((ci * out_ch + co) * 2 + kd) * 4 + kh * 2;
                                        acc += wk[0] * dyr[0] + wk[1] * dyr[1];
                                    }
                            }
                            drow[iw] = acc;
                        }
                    }
            }
        for (int64_t ci = 0; ci < in_ch; ++ci)
            for (int64_t co = 0; co < out_ch; ++co)
                for (int kd = 0; kd < 2; ++kd)
                    for (int kh = 0; kh < 2; ++kh)
                        for (int kw = 0; kw < 2; ++kw) {
                            double acc = 0.0;
                            for (int64_t n = 0; n < s.n; ++n) {
                                const double* xp = x.ptr() + (n * in_ch + ci) * s.d * s.h * s.w;
                                const double* dyp =
                                    dy.ptr() + (n * out_ch + co) * o.d * o.h * o.w;
                                for (int64_t id = 0; id < s.d; ++id)
                                    for (int64_t ih = 0; ih < s.h; ++ih) {
                                        const double* xr = xp + (id * s.h + ih) * s.w;
                                        const double* dyr =
                                            dyp + ((2 * id + kd) * o.h + 2 * ih + kh) * o.w + kw;
                                        double sum = 0.0;
                                        for (int64_t iw = 0; iw < s.w; ++iw)
                                            sum += xr[iw] * dyr[2 * iw];
                                        acc += sum;
                                    }
                            }
                            dwp[(((ci * out_ch + co) * 2 + kd) * 2 + kh) * 2 + kw] += acc;
                        }
        for (int64_t co = 0; co < out_ch; ++co) {
            double bacc = 0.0;
            for (int64_t n = 0; n < o.n; ++n) {
                const double* dyp = dy.ptr() + (n * out_ch + co) * o.d * o.h * o.w;
                for (int64_t i = 0; i < o.d * o.h * o.w; ++i) bacc += dyp[i];
            }
            dbp[co] += bacc;
        }
    }
};

// Batch or instance normalization over (N, C, D, H, W), affine per channel.
struct Norm3d {
    int wi = -1, bi = -1, rmi = -1, rvi = -1;
    int ch = 0;
    NormKind kind = NormKind::batch;

    // saved by forward (training mode)
    Tensor xhat;
    std::vector<double> invstd;  // one per statistics group

    void forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor* running_mean,
                 Tensor* running_var, bool training, bool update_stats, Tensor& y) {
        const Shape5 s = shape5(x);
        if (y.shape != x.shape) y = Tensor::zeros(x.shape);
        const int64_t plane = s.d * s.h * s.w;
        const double* gp = gamma.ptr();
        const double* bp = beta.ptr();

        if (!training && kind == NormKind::batch) {
            const double* rm = running_mean->ptr();
            const double* rv = running_var->ptr();
            for (int64_t n = 0; n < s.n; ++n)
                for (int64_t c = 0; c < s.c; ++c) {
                    const double mu = rm[c];
                    const double is = 1.0 / std::sqrt(rv[c] + kNormEps);
                    const double* xp = x.ptr() + (n * s.c + c) * plane;
                    double* yp = y.ptr() + (n * s.c + c) * plane;
                    const double a = gp[c] * is;
                    const double b = bp[c] - a * mu;
                    for (int64_t i = 0; i < plane; ++i) yp[i] = a * xp[i] + b;
                }
            return;
        }

        // batch statistics per channel, or per (sample, channel) for
        // instance normalization; instance stats are also the evaluation
        // path when no running statistics are tracked.
        const bool per_instance = kind == NormKind::instance;
        const int64_t groups = per_instance ? s.n * s.c : s.c;
        const int64_t m = per_instance ? plane : s.n * plane;
        if (training) {
            if (xhat.shape != x.shape) xhat = Tensor::zeros(x.shape);
            invstd.assign(static_cast<size_t>(groups), 0.0);
        }
        for (int64_t g = 0; g < groups; ++g) {
            const int64_t c = per_instance ? g % s.c : g;
            double mean = 0.0, var = 0.0;
            auto for_each_plane = [&](auto&& fn) {
                if (per_instance) {
                    fn(x.ptr() + g * plane, training ? xhat.ptr() + g * plane : nullptr,
                       y.ptr() + g * plane);
                } else {
                    for (int64_t n = 0; n < s.n; ++n) {
                        const int64_t off = (n * s.c + c) * plane;
                        fn(x.ptr() + off, training ? xhat.ptr() + off : nullptr, y.ptr() + off);
                    }
                }
            };
            for_each_plane([&](const double* xp, double*, double*) {
                for (int64_t i = 0; i < plane; ++i) mean += xp[i];
            });
            mean /= static_cast<double>(m);
            for_each_plane([&](const double* xp, double*, double*) {
                for (int64_t i = 0; i < plane; ++i) {
                    const double d = xp[i] - mean;
                    var += d * d;
                }
            });
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + kNormEps);
            const double gv = gp[c], bv = bp[c];
            for_each_plane([&](const double* xp, double* xh, double* yp) {
                if (xh) {
                    for (int64_t i = 0; i < plane; ++i) {
                        xh[i] = (xp[i] - mean) * is;
                        yp[i] = gv * xh[i] + bv;
                    }
                } else {
                    for (int64_t i = 0; i < plane; ++i) yp[i] = gv * (xp[i] - mean) * is + bv;
                }
            });
            if (training) invstd[static_cast<size_t>(g)] = is;
            if (training && update_stats && kind == NormKind::batch) {
                const double unbiased = m > 1 ? var * static_cast<double>(m) /
                                                    static_cast<double>(m - 1)
                                              : var;
                double* rm = running_mean->ptr();
                double* rv = running_var->ptr();
                rm[c] = (1.0 - kNormMomentum) * rm[c] + kNormMomentum * mean;
                rv[c] = (1.0 - kNormMomentum) * rv[c] + kNormMomentum * unbiased;
            }
        }
    }

    void backward(const Tensor& dy, const Tensor& gamma, Tensor& dx, Tensor& dgamma,
                  Tensor& dbeta) {
        const Shape5 s = shape5(dy);
        if (dx.shape != dy.shape) dx = Tensor::zeros(dy.shape);
        const int64_t plane = s.d * s.h * s.w;
        const bool per_instance = kind == NormKind::instance;
        const int64_t groups = per_instance ? s.n * s.c : s.c;
        const int64_t m = per_instance ? plane : s.n * plane;
        const double* gp = gamma.ptr();
        double* dgp = dgamma.ptr();
        double* dbp = dbeta.ptr();

        for (int64_t g = 0; g < groups; ++g) {
            const int64_t c = per_instance ? g % s.c : g;
            auto for_each_plane = [&](auto&& fn) {
                if (per_instance) {
                    fn(dy.ptr() + g * plane, xhat.ptr() + g * plane, dx.ptr() + g * plane);
                } else {
                    for (int64_t n = 0; n < s.n; ++n) {
                        const int64_t off = (n * s.c + c) * plane;
                        fn(dy.ptr() + off, xhat.ptr() + off, dx.ptr() + off);
                    }
                }
            };
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for_each_plane([&](const double* dyp, const double* xh, double*) {
                for (int64_t i = 0; i < plane; ++i) {
                    sum_dy += dyp[i];
                    sum_dy_xhat += dyp[i] * xh[i];
                }
            });
            dgp[c] += sum_dy_xhat;
            dbp[c] += sum_dy;
            const double is = invstd[static_cast<size_t>(g)];
            const double gv = gp[c];
            const double mean_dy = sum_dy / static_cast<double>(m);
            const double mean_dy_xhat = sum_dy_xhat / static_cast<double>(m);
            for_each_plane([&](const double* dyp, const double* xh, double* dxp) {
                for (int64_t i = 0; i < plane; ++i)
                    dxp[i] = gv * is * (dyp[i] - mean_dy - xh[i] * mean_dy_xhat);
            });
        }
    }
};

void relu_inplace(Tensor& t) {
    for (auto& v : t.data)
        if (v < 0.0) v = 0.0;
}

// dx = dy where the forward output was positive.
void relu_backward(const Tensor& out, const Tensor& dy, Tensor& dx) {
    if (dx.shape != dy.shape) dx = Tensor::zeros(dy.shape);
    for (int64_t i = 0; i < dy.numel(); ++i)
        dx.data[static_cast<size_t>(i)] =
            out.data[static_cast<size_t>(i)] > 0.0 ? dy.data[static_cast<size_t>(i)] : 0.0;
}

void softmax_channels(const Tensor& logits, Tensor& probs) {
    if (probs.shape != logits.shape) probs = Tensor::zeros(logits.shape);
    const Shape5 s = shape5(logits);
    const int64_t plane = s.d * s.h * s.w;
    for (int64_t n = 0; n < s.n; ++n) {
        const double* lp = logits.ptr() + n * s.c * plane;
        double* pp = probs.ptr() + n * s.c * plane;
        for (int64_t i = 0; i < plane; ++i) {
            double mx = lp[i];
            for (int64_t c = 1; c < s.c; ++c) mx = std::max(mx, lp[c * plane + i]);
            double z = 0.0;
            for (int64_t c = 0; c < s.c; ++c) {
                const double e = std::exp(lp[c * plane + i] - mx);
                pp[c * plane + i] = e;
                z += e;
            }
            const double inv = 1.0 / z;
            for (int64_t c = 0; c < s.c; ++c) pp[c * plane + i] *= inv;
        }
    }
}

}  // namespace

Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs) {
    if (!probs.same_shape(dprobs))
        throw ShapeError("softmax_backward: probs " + shape_str(probs.shape) + " vs dprobs " +
                         shape_str(dprobs.shape));
    // class axis: axis 1 for batched (rank 5) tensors, axis 0 otherwise
    int64_t outer = 1, classes = 0, inner = 1;
    if (probs.rank() == 5) {
        outer = probs.dim(0);
        classes = probs.dim(1);
        for (int i = 2; i < probs.rank(); ++i) inner *= probs.dim(i);
    } else {
        classes = probs.dim(0);
        for (int i = 1; i < probs.rank(); ++i) inner *= probs.dim(i);
    }
    Tensor dlogits = Tensor::zeros(probs.shape);
    for (int64_t o = 0; o < outer; ++o) {
        const double* p = probs.ptr() + o * classes * inner;
        const double* dp = dprobs.ptr() + o * classes * inner;
        double* dl = dlogits.ptr() + o * classes * inner;
        for (int64_t i = 0; i < inner; ++i) {
            double dot = 0.0;
            for (int64_t c = 0; c < classes; ++c) dot += dp[c * inner + i] * p[c * inner + i];
            for (int64_t c = 0; c < classes; ++c)
                dl[c * inner + i] = p[c * inner + i] * (dp[c * inner + i] - dot);
        }
    }
    return dlogits;
}

// ---------------------------------------------------------------------------
// VNet
// ---------------------------------------------------------------------------

namespace {

// conv -> norm -> relu with its saved activations
struct ConvBlock {
    Conv3d conv;
    Norm3d norm;
    Tensor y_conv;  // conv output
    Tensor y_norm;  // norm output scratch
    Tensor out;     // post-relu block output
};

struct DownBlock {
    ConvDown conv;
    Norm3d norm;
    Tensor y_conv;
    Tensor y_norm;
    Tensor out;
};

struct UpBlock {
    ConvUp conv;
    Norm3d norm;
    Tensor y_conv;
    Tensor y_norm;
    Tensor out;
};

struct Head {
    Conv3d conv1;  // spatial kernel
    Conv3d conv2;  // pointwise to classes
    Tensor hidden;      // post-relu hidden activations
    Tensor logits;
    Tensor probs;
};

}  // namespace

struct VNet::Impl {
    ParameterStore store;
    GradientStore grads;

    std::vector<ConvBlock> enc1, enc2;  // per level
    std::vector<DownBlock> down;        // levels - 1
    std::vector<UpBlock> up;            // indexed by level
    std::vector<ConvBlock> dec1, dec2;  // indexed by level
    Head head1, head2;

    Tensor input;                // saved network input
    std::vector<Tensor> concat;  // decoder concat buffers per level
    bool have_forward = false;
    bool was_training = false;

    explicit Impl(ParameterStore ps) : store(std::move(ps)) {
        store.validate();
        const NetworkConfig& cfg = store.config;
        const int levels = cfg.levels();
        enc1.resize(static_cast<size_t>(levels));
        enc2.resize(static_cast<size_t>(levels));
        down.resize(static_cast<size_t>(levels - 1));
        up.resize(static_cast<size_t>(levels - 1));
        dec1.resize(static_cast<size_t>(levels - 1));
        dec2.resize(static_cast<size_t>(levels - 1));
        concat.resize(static_cast<size_t>(levels - 1));

        grads.g.resize(store.entries.size());
        for (size_t i = 0; i < store.entries.size(); ++i)
            grads.g[i] = Tensor::zeros(store.entries[i].value.shape);

        auto idx = [&](const std::string& name) {
            int i = store.index_of(name);
            if (i < 0) throw Error("network parameter missing: " + name);
            return i;
        };
        auto bind_conv = [&](Conv3d& c, const std::string& p, int in_ch, int out_ch, int k) {
            c.wi = idx(p + ".weight");
            c.bi = idx(p + ".bias");
            c.in_ch = in_ch;
            c.out_ch = out_ch;
            c.k = k;
        };
        auto bind_norm = [&](Norm3d& nm, const std::string& p, int ch) {
            nm.wi = idx(p + ".weight");
            nm.bi = idx(p + ".bias");
            nm.kind = cfg.norm;
            nm.ch = ch;
            if (cfg.norm == NormKind::batch) {
                nm.rmi = idx(p + ".running_mean");
                nm.rvi = idx(p + ".running_var");
            }
        };

        const auto& ch = cfg.encoder_channels;
        const int k = cfg.kernel_size;
        for (int i = 0; i < levels; ++i) {
            const std::string p = "enc" + std::to_string(i);
            const int in_ch = i == 0 ? cfg.in_channels : ch[static_cast<size_t>(i)];
            bind_conv(enc1[static_cast<size_t>(i)].conv, p + ".conv1", in_ch,
                      ch[static_cast<size_t>(i)], k);
            bind_norm(enc1[static_cast<size_t>(i)].norm, p + ".norm1", ch[static_cast<size_t>(i)]);
            bind_conv(enc2[static_cast<size_t>(i)].conv, p + ".conv2", ch[static_cast<size_t>(i)],
                      ch[static_cast<size_t>(i)], k);
            bind_norm(enc2[static_cast<size_t>(i)].norm, p + ".norm2", ch[static_cast<size_t>(i)]);
        }
        for (int i = 0; i + 1 < levels; ++i) {
            const std::string d = "down" + std::to_string(i);
            DownBlock& b = down[static_cast<size_t>(i)];
            b.conv.wi = idx(d + ".conv.weight");
            b.conv.bi = idx(d + ".conv.bias");
            b.conv.in_ch = ch[static_cast<size_t>(i)];
            b.conv.out_ch = ch[static_cast<size_t>(i + 1)];
            bind_norm(b.norm, d + ".norm", ch[static_cast<size_t>(i + 1)]);

            const std::string u = "up" + std::to_string(i);
            UpBlock& ub = up[static_cast<size_t>(i)];
            ub.conv.wi = idx(u + ".conv.weight");
            ub.conv.bi = idx(u + ".conv.bias");
            ub.conv.in_ch = ch[static_cast<size_t>(i + 1)];
            ub.conv.out_ch = ch[static_cast<size_t>(i)];
            bind_norm(ub.norm, u + ".norm", ch[static_cast<size_t>(i)]);

            const std::string p = "dec" + std::to_string(i);
            bind_conv(dec1[static_cast<size_t>(i)].conv, p + ".conv1",
                      2 * ch[static_cast<size_t>(i)], ch[static_cast<size_t>(i)], k);
            bind_norm(dec1[static_cast<size_t>(i)].norm, p + ".norm1", ch[static_cast<size_t>(i)]);
            bind_conv(dec2[static_cast<size_t>(i)].conv, p + ".conv2", ch[static_cast<size_t>(i)],
                      ch[static_cast<size_t>(i)], k);
            bind_norm(dec2[static_cast<size_t>(i)].norm, p + ".norm2", ch[static_cast<size_t>(i)]);
        }
        bind_conv(head1.conv1, "head1.conv1", ch.front(), cfg.hidden_channels(), k);
        bind_conv(head1.conv2, "head1.conv2", cfg.hidden_channels(), cfg.num_classes, 1);
        bind_conv(head2.conv1, "head2.conv1", ch.front(), cfg.hidden_channels(), k);
        bind_conv(head2.conv2, "head2.conv2", cfg.hidden_channels(), cfg.num_classes, 1);
    }

    Tensor& value(int i) { return store.entries[static_cast<size_t>(i)].value; }
    Tensor& grad(int i) { return grads.g[static_cast<size_t>(i)]; }

    void run_conv_block(ConvBlock& b, const Tensor& x, bool training, bool update_stats) {
        b.conv.forward(x, value(b.conv.wi), value(b.conv.bi), b.y_conv);
        Tensor* rm = b.norm.rmi >= 0 ? &value(b.norm.rmi) : nullptr;
        Tensor* rv = b.norm.rvi >= 0 ? &value(b.norm.rvi) : nullptr;
        b.norm.forward(b.y_conv, value(b.norm.wi), value(b.norm.bi), rm, rv, training,
                       update_stats, b.y_norm);
        b.out = b.y_norm;
        relu_inplace(b.out);
    }

    // Returns the gradient w.r.t. the block input.
    Tensor back_conv_block(ConvBlock& b, const Tensor& dout, bool need_dx = true) {
        Tensor dnorm;
        relu_backward(b.out, dout, dnorm);
        Tensor dconv;
        b.norm.backward(dnorm, value(b.norm.wi), dconv, grad(b.norm.wi), grad(b.norm.bi));
        Tensor dx;
        b.conv.backward(dconv, value(b.conv.wi), need_dx ? &dx : nullptr, grad(b.conv.wi),
                        grad(b.conv.bi));
        return dx;
    }

    DualBatchOutput forward(const Tensor& x, bool training, bool update_stats) {
        const NetworkConfig& cfg = store.config;
        if (x.rank() != 5)
            throw ShapeError("forward: expected a (N, C, D, H, W) input, got shape " +
                             shape_str(x.shape));
        if (x.dim(1) != cfg.in_channels)
            throw ShapeError("forward: expected " + std::to_string(cfg.in_channels) +
                             " input channels, got " + std::to_string(x.dim(1)));
        const int div = cfg.spatial_divisor();
        for (int a = 2; a < 5; ++a)
            if (x.dim(a) <= 0 || x.dim(a) % div != 0)
                throw ShapeError("forward: spatial dimensions must be divisible by " +
                                 std::to_string(div) + ", got " + shape_str(x.shape));

        const int levels = cfg.levels();
        input = x;
        was_training = training;

        const Tensor* cur = &input;
        for (int i = 0; i < levels; ++i) {
            run_conv_block(enc1[static_cast<size_t>(i)], *cur, training, update_stats);
            run_conv_block(enc2[static_cast<size_t>(i)], enc1[static_cast<size_t>(i)].out,
                           training, update_stats);
            if (i + 1 < levels) {
                DownBlock& d = down[static_cast<size_t>(i)];
                d.conv.forward(enc2[static_cast<size_t>(i)].out, value(d.conv.wi),
                               value(d.conv.bi), d.y_conv);
                Tensor* rm = d.norm.rmi >= 0 ? &value(d.norm.rmi) : nullptr;
                Tensor* rv = d.norm.rvi >= 0 ? &value(d.norm.rvi) : nullptr;
                d.norm.forward(d.y_conv, value(d.norm.wi), value(d.norm.bi), rm, rv, training,
                               update_stats, d.y_norm);
                d.out = d.y_norm;
                relu_inplace(d.out);
                cur = &d.out;
            }
        }

        const Tensor* feat = &enc2[static_cast<size_t>(levels - 1)].out;
        for (int i = levels - 2; i >= 0; --i) {
            UpBlock& u = up[static_cast<size_t>(i)];
            u.conv.forward(*feat, value(u.conv.wi), value(u.conv.bi), u.y_conv);
            Tensor* rm = u.norm.rmi >= 0 ? &value(u.norm.rmi) : nullptr;
            Tensor* rv = u.norm.rvi >= 0 ? &value(u.norm.rvi) : nullptr;
            u.norm.forward(u.y_conv, value(u.norm.wi), value(u.norm.bi), rm, rv, training,
                           update_stats, u.y_norm);
            u.out = u.y_norm;
            relu_inplace(u.out);

            // channel concat of the upsampled features with the skip
            const Tensor& skip = enc2[static_cast<size_t>(i)].out;
            Tensor& cat = concat[static_cast<size_t>(i)];
            const Shape5 us = shape5(u.out);
            std::vector<int64_t> want{us.n, 2 * us.c, us.d, us.h, us.w};
            if (cat.shape != want) cat = Tensor::zeros(want);
            const int64_t plane = us.c * us.d * us.h * us.w;
            for (int64_t n = 0; n < us.n; ++n) {
                std::memcpy(cat.ptr() + n * 2 * plane, u.out.ptr() + n * plane,
                            static_cast<size_t>(plane) * sizeof(double));
                std::memcpy(cat.ptr() + n * 2 * plane + plane, skip.ptr() + n * plane,
                            static_cast<size_t>(plane) * sizeof(double));
            }
            run_conv_block(dec1[static_cast<size_t>(i)], cat, training, update_stats);
            run_conv_block(dec2[static_cast<size_t>(i)], dec1[static_cast<size_t>(i)].out,
                           training, update_stats);
            feat = &dec2[static_cast<size_t>(i)].out;
        }

        for (Head* h : {&head1, &head2}) {
            h->conv1.forward(*feat, value(h->conv1.wi), value(h->conv1.bi), h->hidden);
            relu_inplace(h->hidden);
            h->conv2.forward(h->hidden, value(h->conv2.wi), value(h->conv2.bi), h->logits);
            softmax_channels(h->logits, h->probs);
        }
        have_forward = true;

        DualBatchOutput out;
        out.logits1 = head1.logits;
        out.logits2 = head2.logits;
        out.probs1 = head1.probs;
        out.probs2 = head2.probs;
        return out;
    }

    void backward(const Tensor& dlogits1, const Tensor& dlogits2) {
        if (!have_forward) throw Error("backward called before forward");
        if (!was_training) throw Error("backward requires a training-mode forward pass");
        if (!dlogits1.same_shape(head1.logits) || !dlogits2.same_shape(head2.logits))
            throw ShapeError("backward: dlogits shape mismatch");

        const int levels = store.config.levels();
        const Tensor& features =
            levels > 1 ? dec2[0].out : enc2[0].out;

        Tensor dfeat = Tensor::zeros(features.shape);
        for (auto [h, dl] : {std::pair<Head*, const Tensor*>{&head1, &dlogits1},
                             std::pair<Head*, const Tensor*>{&head2, &dlogits2}}) {
            Tensor dhidden_relu;
            h->conv2.backward(*dl, value(h->conv2.wi), &dhidden_relu, grad(h->conv2.wi),
                              grad(h->conv2.bi));
            Tensor dhidden;
            relu_backward(h->hidden, dhidden_relu, dhidden);
            Tensor df;
            h->conv1.backward(dhidden, value(h->conv1.wi), &df, grad(h->conv1.wi),
                              grad(h->conv1.bi));
            for (int64_t i = 0; i < dfeat.numel(); ++i)
                dfeat.data[static_cast<size_t>(i)] += df.data[static_cast<size_t>(i)];
        }

        // decoder chain, then the encoder chain with skip contributions
        std::vector<Tensor> dskip(static_cast<size_t>(levels));
        for (int i = 0; i < levels - 1; ++i) {
            Tensor dd1 = back_conv_block(dec2[static_cast<size_t>(i)], dfeat);
            Tensor dcat = back_conv_block(dec1[static_cast<size_t>(i)], dd1);
            UpBlock& u = up[static_cast<size_t>(i)];
            const Shape5 us = shape5(u.out);
            const int64_t plane = us.c * us.d * us.h * us.w;
            Tensor dup = Tensor::zeros(u.out.shape);
            dskip[static_cast<size_t>(i)] = Tensor::zeros(u.out.shape);
            for (int64_t n = 0; n < us.n; ++n) {
                std::memcpy(dup.ptr() + n * plane, dcat.ptr() + n * 2 * plane,
                            static_cast<size_t>(plane) * sizeof(double));
                std::memcpy(dskip[static_cast<size_t>(i)].ptr() + n * plane,
                            dcat.ptr() + n * 2 * plane + plane,
                            static_cast<size_t>(plane) * sizeof(double));
            }
            Tensor dnorm;
            relu_backward(u.out, dup, dnorm);
            Tensor dconv;
            u.norm.backward(dnorm, value(u.norm.wi), dconv, grad(u.norm.wi), grad(u.norm.bi));
            Tensor dprev;
            const Tensor& up_in = i + 1 < levels - 1 ? dec2[static_cast<size_t>(i + 1)].out
                                                     : enc2[static_cast<size_t>(levels - 1)].out;
            u.conv.backward(up_in, dconv, value(u.conv.wi), dprev, grad(u.conv.wi),
                            grad(u.conv.bi));
            dfeat = dprev;
        }

        std::vector<Tensor> dlevel_in(static_cast<size_t>(levels));
        for (int i = levels - 1; i >= 0; --i) {
            Tensor g;
            if (i == levels - 1) {
                g = dfeat;
            } else {
                // skip gradient plus the downsampling path gradient
                DownBlock& d = down[static_cast<size_t>(i)];
                Tensor dnorm;
                relu_backward(d.out, dlevel_in[static_cast<size_t>(i + 1)], dnorm);
                Tensor dconv;
                d.norm.backward(dnorm, value(d.norm.wi), dconv, grad(d.norm.wi), grad(d.norm.bi));
                Tensor ddown;
                d.conv.backward(enc2[static_cast<size_t>(i)].out, dconv, value(d.conv.wi), ddown,
                                grad(d.conv.wi), grad(d.conv.bi));
                g = std::move(ddown);
                const Tensor& sk = dskip[static_cast<size_t>(i)];
                for (int64_t j = 0; j < g.numel(); ++j)
                    g.data[static_cast<size_t>(j)] += sk.data[static_cast<size_t>(j)];
            }
            Tensor de1 = back_conv_block(enc2[static_cast<size_t>(i)], g);
            dlevel_in[static_cast<size_t>(i)] =
                back_conv_block(enc1[static_cast<size_t>(i)], de1, i > 0);
        }
    }
};

VNet::VNet(const NetworkConfig& cfg) : impl_(std::make_unique<Impl>(build_network(cfg))) {}
VNet::VNet(ParameterStore store) : impl_(std::make_unique<Impl>(std::move(store))) {}
VNet::~VNet() = default;
VNet::VNet(VNet&&) noexcept = default;
VNet& VNet::operator=(VNet&&) noexcept = default;

const NetworkConfig& VNet::config() const { return impl_->store.config; }
ParameterStore& VNet::params() { return impl_->store; }
const ParameterStore& VNet::params() const { return impl_->store; }
GradientStore& VNet::grads() { return impl_->grads; }

DualBatchOutput VNet::forward(const Tensor& input, bool training, bool update_norm_stats) {
    return impl_->forward(input, training, update_norm_stats);
}

void VNet::zero_grad() { impl_->grads.zero(); }

void VNet::backward(const Tensor& dlogits1, const Tensor& dlogits2) {
    impl_->backward(dlogits1, dlogits2);
}

// ---------------------------------------------------------------------------
// Inference
// ---------------------------------------------------------------------------

DualPrediction forward(const ParameterStore& params, const Tensor& volume) {
    if (volume.rank() != 4)
        throw ShapeError("forward: expected a (C, D, H, W) volume, got shape " +
                         shape_str(volume.shape));
    VNet net(params);
    Tensor batch = Tensor::zeros(
        {1, volume.dim(0), volume.dim(1), volume.dim(2), volume.dim(3)});
    batch.data = volume.data;
    DualBatchOutput out = net.forward(batch, /*training=*/false);

    DualPrediction pred;
    auto squeeze = [](Tensor t) {
        t.shape.erase(t.shape.begin());
        return t;
    };
    pred.logits1 = squeeze(std::move(out.logits1));
    pred.logits2 = squeeze(std::move(out.logits2));
    pred.probs1 = squeeze(std::move(out.probs1));
    pred.probs2 = squeeze(std::move(out.probs2));
    return pred;
}

std::vector<int64_t> sliding_corners(int64_t extent, int64_t window, int64_t stride) {
    std::vector<int64_t> corners;
    for (int64_t c = 0;; c += stride) {
        if (c + window >= extent) {
            corners.push_back(extent - window);
            break;
        }
        corners.push_back(c);
    }
    return corners;
}

Mask infer_mask(const ParameterStore& params, const Tensor& volume, const Dims3& window,
                const Dims3& stride) {
    if (volume.rank() != 4)
        throw ShapeError("infer_mask: expected a (C, D, H, W) volume, got shape " +
                         shape_str(volume.shape));
    const NetworkConfig& cfg = params.config;
    const int div = cfg.spatial_divisor();
    for (int a = 0; a < 3; ++a) {
        if (window[static_cast<size_t>(a)] <= 0 ||
            window[static_cast<size_t>(a)] % div != 0)
            throw ShapeError("infer_mask: window dimensions must be divisible by " +
                             std::to_string(div));
        if (stride[static_cast<size_t>(a)] <= 0 ||
            stride[static_cast<size_t>(a)] > window[static_cast<size_t>(a)])
            throw ConfigError("infer_mask: stride must be in [1, window] per axis");
    }

    const int64_t C = volume.dim(0);
    const Dims3 orig{volume.dim(1), volume.dim(2), volume.dim(3)};

    // symmetric edge padding when the volume is smaller than the window
    Dims3 pad_lo{0, 0, 0}, dims = orig;
    Tensor padded = volume;
    bool needs_pad = false;
    for (int a = 0; a < 3; ++a)
        if (orig[static_cast<size_t>(a)] < window[static_cast<size_t>(a)]) needs_pad = true;
    if (needs_pad) {
        Dims3 target;
        for (int a = 0; a < 3; ++a) {
            target[static_cast<size_t>(a)] =
                std::max(orig[static_cast<size_t>(a)], window[static_cast<size_t>(a)]);
            pad_lo[static_cast<size_t>(a)] =
                (target[static_cast<size_t>(a)] - orig[static_cast<size_t>(a)]) / 2;
        }
        padded = Tensor::zeros({C, target[0], target[1], target[2]});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t d = 0; d < target[0]; ++d)
                for (int64_t h = 0; h < target[1]; ++h)
                    for (int64_t w = 0; w < target[2]; ++w) {
                        const int64_t sd = std::clamp<int64_t>(d - pad_lo[0], 0, orig[0] - 1);
                        const int64_t sh = std::clamp<int64_t>(h - pad_lo[1], 0, orig[1] - 1);
                        const int64_t sw = std::clamp<int64_t>(w - pad_lo[2], 0, orig[2] - 1);
                        padded.data[static_cast<size_t>(((c * target[0] + d) * target[1] + h) *
                                                            target[2] +
                                                        w)] =
                            volume.data[static_cast<size_t>(
                                ((c * orig[0] + sd) * orig[1] + sh) * orig[2] + sw)];
                    }
        dims = target;
    }

    const auto cd = sliding_corners(dims[0], window[0], stride[0]);
    const auto ch = sliding_corners(dims[1], window[1], stride[1]);
    const auto cw = sliding_corners(dims[2], window[2], stride[2]);

    const int64_t classes = cfg.num_classes;
    Tensor prob_sum = Tensor::zeros({classes, dims[0], dims[1], dims[2]});
    Tensor hits = Tensor::zeros({dims[0], dims[1], dims[2]});

    VNet net(params);
    Tensor win = Tensor::zeros({1, C, window[0], window[1], window[2]});
    for (int64_t d0 : cd)
        for (int64_t h0 : ch)
            for (int64_t w0 : cw) {
                for (int64_t c = 0; c < C; ++c)
                    for (int64_t d = 0; d < window[0]; ++d)
                        for (int64_t h = 0; h < window[1]; ++h) {
                            const double* src = padded.ptr() +
                                                ((c * dims[0] + d0 + d) * dims[1] + h0 + h) *
                                                    dims[2] +
                                                w0;
                            double* dst = win.ptr() +
                                          ((c * window[0] + d) * window[1] + h) * window[2];
                            std::memcpy(dst, src,
                                        static_cast<size_t>(window[2]) * sizeof(double));
                        }
                DualBatchOutput out = net.forward(win, /*training=*/false);
                // probability averaged over the two heads
                for (int64_t c = 0; c < classes; ++c)
                    for (int64_t d = 0; d < window[0]; ++d)
                        for (int64_t h = 0; h < window[1]; ++h) {
                            const int64_t w_off =
                                ((c * window[0] + d) * window[1] + h) * window[2];
                            double* acc = prob_sum.ptr() +
                                          ((c * dims[0] + d0 + d) * dims[1] + h0 + h) * dims[2] +
                                          w0;
                            const double* p1 = out.probs1.ptr() + w_off;
                            const double* p2 = out.probs2.ptr() + w_off;
                            for (int64_t w = 0; w < window[2]; ++w)
                                acc[w] += 0.5 * (p1[w] + p2[w]);
                        }
                for (int64_t d = 0; d < window[0]; ++d)
                    for (int64_t h = 0; h < window[1]; ++h) {
                        double* hv = hits.ptr() + ((d0 + d) * dims[1] + h0 + h) * dims[2] + w0;
                        for (int64_t w = 0; w < window[2]; ++w) hv[w] += 1.0;
                    }
            }

    Mask mask(orig);
    const int64_t plane = dims[0] * dims[1] * dims[2];
    for (int64_t d = 0; d < orig[0]; ++d)
        for (int64_t h = 0; h < orig[1]; ++h)
            for (int64_t w = 0; w < orig[2]; ++w) {
                const int64_t pi =
                    ((d + pad_lo[0]) * dims[1] + h + pad_lo[1]) * dims[2] + w + pad_lo[2];
                int64_t best = 0;
                double best_p = prob_sum.data[static_cast<size_t>(pi)];
                for (int64_t c = 1; c < classes; ++c) {
                    const double p = prob_sum.data[static_cast<size_t>(c * plane + pi)];
                    if (p > best_p) {
                        best_p = p;
                        best = c;
                    }
                }
                mask.set(d, h, w, best != 0 ? 1 : 0);
            }
    return mask;
}

// ---------------------------------------------------------------------------
// Checkpoint container
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'D', 'C', 'K', 'P', 'T', '0', '1'};

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw Error("checkpoint: truncated file");
    return v;
}

}  // namespace

void save_checkpoint(const ParameterStore& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("checkpoint: cannot open " + path + " for writing");

    os.write(kMagic, sizeof(kMagic));
    write_pod<uint32_t>(os, 1);
    write_pod<uint64_t>(os, static_cast<uint64_t>(params.iteration));

    nlohmann::json cfg = params.config;
    const std::string cfg_str = cfg.dump();
    write_pod<uint32_t>(os, static_cast<uint32_t>(cfg_str.size()));
    os.write(cfg_str.data(), static_cast<std::streamsize>(cfg_str.size()));

    write_pod<uint32_t>(os, static_cast<uint32_t>(params.entries.size()));
    std::vector<float> buf;
    for (const auto& e : params.entries) {
        write_pod<uint32_t>(os, static_cast<uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_pod<uint8_t>(os, static_cast<uint8_t>(e.group));
        write_pod<uint8_t>(os, e.trainable ? 1 : 0);
        write_pod<uint8_t>(os, static_cast<uint8_t>(e.value.rank()));
        for (int64_t d : e.value.shape) write_pod<uint64_t>(os, static_cast<uint64_t>(d));
        buf.resize(e.value.data.size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(e.value.data[i]);
        os.write(reinterpret_cast<const char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!os) throw Error("checkpoint: write failed for " + path);
}

ParameterStore load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("checkpoint: cannot open " + path);

    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw Error("checkpoint: bad magic in " + path);
    const uint32_t version = read_pod<uint32_t>(is);
    if (version != 1) throw Error("checkpoint: unsupported version " + std::to_string(version));

    ParameterStore ps;
    ps.iteration = static_cast<int64_t>(read_pod<uint64_t>(is));

    const uint32_t cfg_len = read_pod<uint32_t>(is);
    std::string cfg_str(cfg_len, '\0');
    is.read(cfg_str.data(), cfg_len);
    if (!is) throw Error("checkpoint: truncated config in " + path);
    ps.config = nlohmann::json::parse(cfg_str).get<NetworkConfig>();

    const uint32_t n_entries = read_pod<uint32_t>(is);
    ps.entries.resize(n_entries);
    std::vector<float> buf;
    for (uint32_t i = 0; i < n_entries; ++i) {
        ParamEntry& e = ps.entries[i];
        const uint32_t name_len = read_pod<uint32_t>(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        const uint8_t group = read_pod<uint8_t>(is);
        if (group > 2) throw Error("checkpoint: bad group tag");
        e.group = static_cast<ParamGroup>(group);
        e.trainable = read_pod<uint8_t>(is) != 0;
        const uint8_t rank = read_pod<uint8_t>(is);
        std::vector<int64_t> shape(rank);
        for (auto& d : shape) d = static_cast<int64_t>(read_pod<uint64_t>(is));
        e.value = Tensor::zeros(shape);
        buf.resize(e.value.data.size());
        is.read(reinterpret_cast<char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!is) throw Error("checkpoint: truncated values in " + path);
        for (size_t j = 0; j < buf.size(); ++j) e.value.data[j] = static_cast<double>(buf[j]);
    }
    ps.validate();
    return ps;
}

}  // namespace pdc
