#include "pdc/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "pdc/errors.hpp"
#include "pdc/json_io.hpp"
#include "pdc/metrics.hpp"
#include "pdc/rng.hpp"

namespace fs = std::filesystem;

namespace pdc {

namespace {

constexpr uint64_t kComposerStream = 0xBA7C;
constexpr uint64_t kNetStream = 0x4E37;

const std::set<ParamGroup> kAllGroups{ParamGroup::extractor, ParamGroup::head1,
                                      ParamGroup::head2};
const std::set<ParamGroup> kHeads{ParamGroup::head1, ParamGroup::head2};
const std::set<ParamGroup> kExtractorOnly{ParamGroup::extractor};

}  // namespace

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::supervised_only: return "supervised_only";
        case Variant::vnet_gc: return "vnet_gc";
        case Variant::vnet_ec: return "vnet_ec";
        case Variant::pdc: return "pdc";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    for (Variant v : {Variant::supervised_only, Variant::vnet_gc, Variant::vnet_ec,
                      Variant::pdc})
        if (name == variant_name(v)) return v;
    throw ConfigError("unknown variant \"" + name +
                      "\" (valid: supervised_only, vnet_gc, vnet_ec, pdc)");
}

void TrainConfig::validate() const {
    net.validate();
    if (total_iterations < 1) throw ConfigError("train: total_iterations must be >= 1");
    if (!(base_lr > 0.0)) throw ConfigError("train: base_lr must be positive");
    if (lr_decay_every < 1) throw ConfigError("train: lr_decay_every must be >= 1");
    if (!(lr_decay_factor > 0.0 && lr_decay_factor < 1.0))
        throw ConfigError("train: lr_decay_factor must lie in (0, 1)");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (labeled_per_batch < 1 || labeled_per_batch > batch_size)
        throw ConfigError("train: labeled_per_batch must lie in [1, batch_size]");
    if (variant == Variant::supervised_only) {
        if (labeled_per_batch != batch_size)
            throw ConfigError(
                "train: supervised_only uses fully labeled batches "
                "(labeled_per_batch == batch_size)");
    } else if (labeled_per_batch >= batch_size) {
        throw ConfigError("train: semi-supervised variants need labeled_per_batch < batch_size");
    }
    if (ramp_t_max < 0) throw ConfigError("train: ramp_t_max must be >= 0");
    if (lambda_c_scale < 0.0 || lambda_pd_scale < 0.0)
        throw ConfigError("train: lambda scales must be >= 0");
    for (int64_t c : crop)
        if (c < 1) throw ConfigError("train: crop dims must be positive");
    if (checkpoint_every < 0) throw ConfigError("train: checkpoint_every must be >= 0");
    if (log_every < 1) throw ConfigError("train: log_every must be >= 1");
    if (pd_every < 1) throw ConfigError("train: pd_every must be >= 1");
    std::string sorted = phase_order;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != "ABC")
        throw ConfigError("train: phase_order must be a permutation of \"ABC\", got \"" +
                          phase_order + "\"");
}

double learning_rate(int64_t t, const TrainConfig& cfg) {
    if (t < 0) throw ConfigError("learning_rate: t must be >= 0");
    const int64_t steps = t / cfg.lr_decay_every;
    double lr = cfg.base_lr;
    for (int64_t i = 0; i < steps; ++i) lr *= cfg.lr_decay_factor;
    return lr;
}

OptimizerState OptimizerState::init(const ParameterStore& params) {
    OptimizerState st;
    st.momentum.reserve(params.entries.size());
    for (const auto& e : params.entries) st.momentum.push_back(Tensor::zeros(e.value.shape));
    return st;
}

void sgd_update(ParameterStore& params, const GradientStore& grads, OptimizerState& state,
                double lr, const std::set<ParamGroup>& groups, double weight_decay,
                double momentum) {
    if (groups.empty()) throw ConfigError("sgd_update: groups must be non-empty");
    if (grads.g.size() != params.entries.size() ||
        state.momentum.size() != params.entries.size())
        throw AlignmentError("sgd_update: gradient/momentum arrays do not line up with the "
                             "parameter store");
    for (size_t i = 0; i < params.entries.size(); ++i) {
        ParamEntry& e = params.entries[i];
        if (!grads.g[i].same_shape(e.value) || !state.momentum[i].same_shape(e.value))
            throw AlignmentError("sgd_update: shape mismatch at entry \"" + e.name + "\"");
        if (!e.trainable || !groups.count(e.group)) continue;
        double* w = e.value.ptr();
        const double* g = grads.g[i].ptr();
        double* v = state.momentum[i].ptr();
        const int64_t n = e.value.numel();
        for (int64_t j = 0; j < n; ++j) {
            const double gj = g[j] + weight_decay * w[j];
            v[j] = momentum * v[j] + gj;
            w[j] -= lr * v[j];
        }
    }
    state.lr = lr;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

namespace {

// one labeled sample's slice of a batched head output
Tensor slice_sample(const Tensor& batch, int64_t n) {
    const int64_t c = batch.dim(1), d = batch.dim(2), h = batch.dim(3), w = batch.dim(4);
    Tensor t = Tensor::zeros({c, d, h, w});
    std::memcpy(t.ptr(), batch.ptr() + n * t.numel(),
                static_cast<size_t>(t.numel()) * sizeof(double));
    return t;
}

Tensor one_hot(const Mask& label, int num_classes) {
    const Dims3 s = label.shape;
    Tensor t = Tensor::zeros({num_classes, s[0], s[1], s[2]});
    const int64_t plane = s[0] * s[1] * s[2];
    for (int64_t i = 0; i < plane; ++i) {
        const int cls = label.v[static_cast<size_t>(i)] ? 1 : 0;
        t.data[static_cast<size_t>(cls * plane + i)] = 1.0;
    }
    return t;
}

void add_scaled(Tensor& dst, int64_t sample, const Tensor& src, double scale) {
    double* d = dst.ptr() + sample * src.numel();
    const double* s = src.ptr();
    for (int64_t i = 0; i < src.numel(); ++i) d[i] += scale * s[i];
}

}  // namespace

Trainer::Trainer(const TrainConfig& cfg) : cfg_([&] {
                     cfg.validate();
                     return cfg;
                 }()),
                 net_([&] {
                     NetworkConfig nc = cfg.net;
                     nc.seed = mix_seed(mix_seed(cfg.seed, kNetStream), cfg.net.seed);
                     return VNet(nc);
                 }()),
                 opt_(OptimizerState::init(net_.params())) {}

Trainer::Trainer(const TrainConfig& cfg, ParameterStore params)
    : cfg_([&] {
          cfg.validate();
          return cfg;
      }()),
      net_(std::move(params)),
      opt_(OptimizerState::init(net_.params())) {}

ParameterStore& Trainer::params() { return net_.params(); }
const ParameterStore& Trainer::params() const { return net_.params(); }

namespace {

std::vector<const Tensor*> tensor_ptrs(const std::vector<Tensor>& ts) {
    std::vector<const Tensor*> out(ts.size());
    for (size_t i = 0; i < ts.size(); ++i) out[i] = &ts[i];
    return out;
}

}  // namespace

std::pair<double, double> Trainer::coupling() const {
    const auto f1 = flatten_layers(net_.params(), layer_groups(net_.params(), ParamGroup::head1));
    const auto f2 = flatten_layers(net_.params(), layer_groups(net_.params(), ParamGroup::head2));
    return coupling_metrics(tensor_ptrs(f1), tensor_ptrs(f2));
}

void Trainer::notify(char phase) {
    if (observer_) observer_(phase, net_.params(), opt_);
}

Tensor Trainer::stack_inputs(const std::vector<VolumeSample>& a,
                             const std::vector<VolumeSample>& b) const {
    const int64_t n = static_cast<int64_t>(a.size() + b.size());
    const Dims3 crop = cfg_.crop;
    Tensor t = Tensor::zeros({n, cfg_.net.in_channels, crop[0], crop[1], crop[2]});
    const int64_t plane = crop[0] * crop[1] * crop[2];
    if (cfg_.net.in_channels != 1)
        throw ConfigError("train: multi-channel inputs are not produced by the data pipeline");
    int64_t row = 0;
    for (const auto* list : {&a, &b})
        for (const auto& s : *list) {
            if (s.dims() != crop)
                throw ShapeError("train: sample \"" + s.id + "\" does not match the crop dims");
            std::memcpy(t.ptr() + row * plane, s.intensity.ptr(),
                        static_cast<size_t>(plane) * sizeof(double));
            ++row;
        }
    return t;
}

// Supervised forward/backward over the labeled sub-batch: runs one batched
// forward, accumulates mean supervised loss and its dlogits, then one
// backward. Optionally reports the labeled-only consistency for logging.
double Trainer::supervised_pass(const Tensor& input, const std::vector<VolumeSample>& labeled,
                                double* consistency_out) {
    const int64_t nl = static_cast<int64_t>(labeled.size());
    DualBatchOutput out = net_.forward(input, /*training=*/true);
    Tensor dp1 = Tensor::zeros(out.probs1.shape);
    Tensor dp2 = Tensor::zeros(out.probs2.shape);
    double loss = 0.0;
    const double scale = 1.0 / static_cast<double>(nl);
    for (int64_t i = 0; i < nl; ++i) {
        DualPrediction pred;
        pred.probs1 = slice_sample(out.probs1, i);
        pred.probs2 = slice_sample(out.probs2, i);
        const Tensor target = one_hot(labeled[static_cast<size_t>(i)].label,
                                      cfg_.net.num_classes);
        Tensor g1, g2;
        loss += supervised_loss(pred, target, &g1, &g2) * scale;
        add_scaled(dp1, i, g1, scale);
        add_scaled(dp2, i, g2, scale);
    }
    if (consistency_out) *consistency_out = consistency_loss(out.probs1, out.probs2);
    const Tensor dl1 = softmax_backward(out.probs1, dp1);
    const Tensor dl2 = softmax_backward(out.probs2, dp2);
    net_.zero_grad();
    net_.backward(dl1, dl2);
    return loss;
}

LossBundle Trainer::step(const std::vector<VolumeSample>& labeled,
                         const std::vector<VolumeSample>& unlabeled, int64_t t) {
    if (t < 0 || t >= cfg_.total_iterations)
        throw ConfigError("train: step index out of range");
    if (static_cast<int>(labeled.size()) != cfg_.labeled_per_batch)
        throw ConfigError("train: expected " + std::to_string(cfg_.labeled_per_batch) +
                          " labeled samples, got " + std::to_string(labeled.size()));
    if (static_cast<int>(labeled.size() + unlabeled.size()) != cfg_.batch_size)
        throw ConfigError("train: batch size mismatch");
    if (cfg_.variant == Variant::supervised_only && !unlabeled.empty())
        throw ConfigError("train: supervised_only accepts no unlabeled samples");
    for (const auto& s : labeled)
        if (!s.has_label) throw ConfigError("train: labeled batch holds an unlabeled sample");

    const double lr = learning_rate(t, cfg_);
    const int64_t t_max = cfg_.effective_t_max();
    LossBundle bundle;

    const bool uses_consistency =
        cfg_.variant == Variant::vnet_gc || cfg_.variant == Variant::vnet_ec ||
        cfg_.variant == Variant::pdc;
    bundle.lambda_c = uses_consistency ? ramp_weight(t, t_max, cfg_.lambda_c_scale) : 0.0;
    const bool pd_scheduled = cfg_.variant == Variant::pdc && t % cfg_.pd_every == 0;
    bundle.lambda_pd = pd_scheduled ? ramp_weight(t, t_max, cfg_.lambda_pd_scale) : 0.0;

    // layer-flattened head parameters: one vector per layer, weight and
    // bias concatenated, paired across the two heads by construction order
    const auto lg1 = layer_groups(net_.params(), ParamGroup::head1);
    const auto lg2 = layer_groups(net_.params(), ParamGroup::head2);
    auto head_layers = [&] {
        return std::pair{flatten_layers(net_.params(), lg1), flatten_layers(net_.params(), lg2)};
    };

    if (cfg_.variant == Variant::vnet_gc) {
        // single joint step: supervised on the labeled part plus weighted
        // consistency over the full batch, all parameter groups updated
        const Tensor input = stack_inputs(labeled, unlabeled);
        DualBatchOutput out = net_.forward(input, /*training=*/true);
        Tensor dp1 = Tensor::zeros(out.probs1.shape);
        Tensor dp2 = Tensor::zeros(out.probs2.shape);
        const int64_t nl = static_cast<int64_t>(labeled.size());
        const double sscale = 1.0 / static_cast<double>(nl);
        for (int64_t i = 0; i < nl; ++i) {
            DualPrediction pred;
            pred.probs1 = slice_sample(out.probs1, i);
            pred.probs2 = slice_sample(out.probs2, i);
            const Tensor target = one_hot(labeled[static_cast<size_t>(i)].label,
                                          cfg_.net.num_classes);
            Tensor g1, g2;
            bundle.supervised += supervised_loss(pred, target, &g1, &g2) * sscale;
            add_scaled(dp1, i, g1, sscale);
            add_scaled(dp2, i, g2, sscale);
        }
        Tensor cg1, cg2;
        bundle.consistency = consistency_loss(out.probs1, out.probs2, &cg1, &cg2);
        if (bundle.lambda_c != 0.0) {
            for (int64_t i = 0; i < dp1.numel(); ++i) {
                dp1.data[static_cast<size_t>(i)] +=
                    bundle.lambda_c * cg1.data[static_cast<size_t>(i)];
                dp2.data[static_cast<size_t>(i)] +=
                    bundle.lambda_c * cg2.data[static_cast<size_t>(i)];
            }
        }
        const Tensor dl1 = softmax_backward(out.probs1, dp1);
        const Tensor dl2 = softmax_backward(out.probs2, dp2);
        net_.zero_grad();
        net_.backward(dl1, dl2);
        sgd_update(net_.params(), net_.grads(), opt_, lr, kAllGroups, cfg_.weight_decay, cfg_.momentum);
        notify('J');
        const auto [f1, f2] = head_layers();
        bundle.decoupling = decoupling_loss(tensor_ptrs(f1), tensor_ptrs(f2));
        net_.params().iteration = t + 1;
        opt_.iteration = t + 1;
        return bundle;
    }

    for (char phase : cfg_.phase_order) {
        if (phase == 'A') {
            const Tensor input = stack_inputs(labeled, {});
            double cons = 0.0;
            bundle.supervised = supervised_pass(
                input, labeled,
                cfg_.variant == Variant::supervised_only ? &cons : nullptr);
            if (cfg_.variant == Variant::supervised_only) bundle.consistency = cons;
            sgd_update(net_.params(), net_.grads(), opt_, lr, kAllGroups, cfg_.weight_decay, cfg_.momentum);
            notify('A');
        } else if (phase == 'B') {
            if (!pd_scheduled) continue;
            const auto [f1, f2] = head_layers();
            std::vector<Tensor> g1, g2;
            bundle.decoupling = decoupling_loss(tensor_ptrs(f1), tensor_ptrs(f2), &g1, &g2);
            // a zero weight means the phase performs no update at all
            if (bundle.lambda_pd == 0.0) continue;
            GradientStore grads;
            grads.g.resize(net_.params().entries.size());
            for (size_t i = 0; i < grads.g.size(); ++i)
                grads.g[i] = Tensor::zeros(net_.params().entries[i].value.shape);
            // scatter each flattened layer gradient back over the layer's
            // parameter tensors, in the same concatenation order
            auto scatter = [&](const std::vector<std::vector<int>>& lg,
                               const std::vector<Tensor>& gl) {
                for (size_t k = 0; k < lg.size(); ++k) {
                    int64_t off = 0;
                    for (int idx : lg[k]) {
                        Tensor& dst = grads.g[static_cast<size_t>(idx)];
                        for (int64_t j = 0; j < dst.numel(); ++j)
                            dst.data[static_cast<size_t>(j)] =
                                bundle.lambda_pd * gl[k].data[static_cast<size_t>(off + j)];
                        off += dst.numel();
                    }
                }
            };
            scatter(lg1, g1);
            scatter(lg2, g2);
            sgd_update(net_.params(), grads, opt_, lr, kHeads, /*weight_decay=*/0.0, cfg_.momentum);
            notify('B');
        } else if (phase == 'C') {
            if (cfg_.variant != Variant::vnet_ec && cfg_.variant != Variant::pdc) continue;
            // a zero weight means the phase performs no update at all
            if (bundle.lambda_c == 0.0) continue;
            const Tensor input = stack_inputs(labeled, unlabeled);
            DualBatchOutput out = net_.forward(input, /*training=*/true);
            Tensor cg1, cg2;
            bundle.consistency = consistency_loss(out.probs1, out.probs2, &cg1, &cg2);
            for (auto& v : cg1.data) v *= bundle.lambda_c;
            for (auto& v : cg2.data) v *= bundle.lambda_c;
            const Tensor dl1 = softmax_backward(out.probs1, cg1);
            const Tensor dl2 = softmax_backward(out.probs2, cg2);
            net_.zero_grad();
            net_.backward(dl1, dl2);
            sgd_update(net_.params(), net_.grads(), opt_, lr, kExtractorOnly,
                       /*weight_decay=*/0.0, cfg_.momentum);
            notify('C');
        }
    }

    if (cfg_.variant != Variant::pdc || !pd_scheduled) {
        const auto [f1, f2] = head_layers();
        bundle.decoupling = decoupling_loss(tensor_ptrs(f1), tensor_ptrs(f2));
    }
    net_.params().iteration = t + 1;
    opt_.iteration = t + 1;
    return bundle;
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

TrainResult train_run(const TrainConfig& cfg, const DatasetManifest& manifest,
                      const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);

    BatchSpec bs;
    bs.batch_size = cfg.batch_size;
    bs.labeled_per_batch = cfg.labeled_per_batch;
    bs.crop = cfg.crop;
    bs.augment = cfg.augment;
    BatchComposer composer(manifest, bs, mix_seed(cfg.seed, kComposerStream));

    Trainer trainer(cfg);

    const std::string log_path = (fs::path(out_dir) / "log.csv").string();
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw Error("train: cannot write " + log_path);
    log << "iter,loss_s,loss_c,loss_pd,lambda_c,lambda_pd,lr,cd,qcd\n";
    char line[320];

    for (int64_t t = 0; t < cfg.total_iterations; ++t) {
        auto [labeled, unlabeled] = composer.next();
        const LossBundle b = trainer.step(labeled, unlabeled, t);
        if (t % cfg.log_every == 0 || t + 1 == cfg.total_iterations) {
            const auto [cd, qcd] = trainer.coupling();
            std::snprintf(line, sizeof(line),
                          "%lld,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                          static_cast<long long>(t), b.supervised, b.consistency, b.decoupling,
                          b.lambda_c, b.lambda_pd, learning_rate(t, cfg), cd, qcd);
            log << line;
        }
        const bool final_iter = t + 1 == cfg.total_iterations;
        if ((cfg.checkpoint_every > 0 && (t + 1) % cfg.checkpoint_every == 0) || final_iter) {
            const std::string ckpt =
                (fs::path(out_dir) / ("ckpt_" + std::to_string(t + 1) + ".bin")).string();
            save_checkpoint(trainer.params(), ckpt);
        }
    }
    log.flush();

    TrainResult res;
    res.params = trainer.params();
    res.final_checkpoint =
        (fs::path(out_dir) / ("ckpt_" + std::to_string(cfg.total_iterations) + ".bin")).string();
    res.log_path = log_path;
    return res;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"variant", variant_name(c.variant)},
                       {"total_iterations", c.total_iterations},
                       {"base_lr", c.base_lr},
                       {"lr_decay_every", c.lr_decay_every},
                       {"lr_decay_factor", c.lr_decay_factor},
                       {"momentum", c.momentum},
                       {"weight_decay", c.weight_decay},
                       {"batch_size", c.batch_size},
                       {"labeled_per_batch", c.labeled_per_batch},
                       {"ramp_t_max", c.ramp_t_max},
                       {"lambda_c_scale", c.lambda_c_scale},
                       {"lambda_pd_scale", c.lambda_pd_scale},
                       {"crop", c.crop},
                       {"seed", c.seed},
                       {"checkpoint_every", c.checkpoint_every},
                       {"log_every", c.log_every},
                       {"phase_order", c.phase_order},
                       {"pd_every", c.pd_every},
                       {"augment", c.augment},
                       {"net", c.net}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (j.contains("variant")) c.variant = variant_from_name(j.at("variant").get<std::string>());
    if (j.contains("total_iterations")) j.at("total_iterations").get_to(c.total_iterations);
    if (j.contains("base_lr")) j.at("base_lr").get_to(c.base_lr);
    if (j.contains("lr_decay_every")) j.at("lr_decay_every").get_to(c.lr_decay_every);
    if (j.contains("lr_decay_factor")) j.at("lr_decay_factor").get_to(c.lr_decay_factor);
    if (j.contains("momentum")) j.at("momentum").get_to(c.momentum);
    if (j.contains("weight_decay")) j.at("weight_decay").get_to(c.weight_decay);
    if (j.contains("batch_size")) j.at("batch_size").get_to(c.batch_size);
    if (j.contains("labeled_per_batch")) j.at("labeled_per_batch").get_to(c.labeled_per_batch);
    if (j.contains("ramp_t_max")) j.at("ramp_t_max").get_to(c.ramp_t_max);
    if (j.contains("lambda_c_scale")) j.at("lambda_c_scale").get_to(c.lambda_c_scale);
    if (j.contains("lambda_pd_scale")) j.at("lambda_pd_scale").get_to(c.lambda_pd_scale);
    if (j.contains("crop")) j.at("crop").get_to(c.crop);
    if (j.contains("seed")) j.at("seed").get_to(c.seed);
    if (j.contains("checkpoint_every")) j.at("checkpoint_every").get_to(c.checkpoint_every);
    if (j.contains("log_every")) j.at("log_every").get_to(c.log_every);
    if (j.contains("phase_order")) j.at("phase_order").get_to(c.phase_order);
    if (j.contains("pd_every")) j.at("pd_every").get_to(c.pd_every);
    if (j.contains("augment")) j.at("augment").get_to(c.augment);
    if (j.contains("net")) from_json(j.at("net"), c.net);
}

}  // namespace pdc
