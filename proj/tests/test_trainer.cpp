#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "pdc/data.hpp"
#include "pdc/errors.hpp"
#include "pdc/objectives.hpp"
#include "pdc/rng.hpp"
#include "pdc/trainer.hpp"
#include "pdc/volnet.hpp"

using namespace pdc;
namespace fs = std::filesystem;

namespace {

NetworkConfig tiny_net(uint64_t seed = 0) {
    NetworkConfig n;
    n.encoder_channels = {4, 8};
    n.seed = seed;
    return n;
}

TrainConfig tiny_cfg(Variant v, int64_t iters) {
    TrainConfig c;
    c.variant = v;
    c.total_iterations = iters;
    c.crop = {8, 8, 8};
    c.net = tiny_net();
    if (v == Variant::supervised_only) c.labeled_per_batch = c.batch_size;
    return c;
}

VolumeSample toy_sample(Rng& rng, bool labeled) {
    VolumeSample s;
    s.id = labeled ? "lab" : "unl";
    s.intensity = Tensor::zeros({8, 8, 8});
    s.has_label = labeled;
    if (labeled) s.label = Mask(Dims3{8, 8, 8});
    // a small bright blob with noise; label = blob
    for (int64_t d = 0; d < 8; ++d)
        for (int64_t h = 0; h < 8; ++h)
            for (int64_t w = 0; w < 8; ++w) {
                const bool fg = d >= 3 && d <= 5 && h >= 2 && h <= 5 && w >= 3 && w <= 6;
                const size_t i = static_cast<size_t>((d * 8 + h) * 8 + w);
                s.intensity.data[i] = (fg ? 1.0 : 0.0) + rng.normal(0.0, 0.3);
                if (labeled && fg) s.label.v[i] = 1;
            }
    return s;
}

std::vector<VolumeSample> toy_batch(Rng& rng, int n, bool labeled) {
    std::vector<VolumeSample> out;
    for (int i = 0; i < n; ++i) out.push_back(toy_sample(rng, labeled));
    return out;
}

bool entries_equal(const ParameterStore& a, const ParameterStore& b, ParamGroup g) {
    const auto ia = a.group_indices(g);
    const auto ib = b.group_indices(g);
    if (ia != ib) return false;
    for (int i : ia)
        if (a.entries[static_cast<size_t>(i)].value.data !=
            b.entries[static_cast<size_t>(i)].value.data)
            return false;
    return true;
}

std::string file_bytes(const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

fs::path toy_dataset(const char* name, int n_volumes, uint64_t seed) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    GeneratorParams p;
    p.n_volumes = n_volumes;
    p.shape = {16, 16, 16};
    p.seed = seed;
    generate_synthetic(p, dir.string());
    return dir;
}

}  // namespace

TEST_CASE("learning rate follows the step decay") {
    TrainConfig cfg;  // base 0.01, /10 every 2500
    CHECK(learning_rate(0, cfg) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(learning_rate(2499, cfg) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(learning_rate(2500, cfg) == doctest::Approx(0.001).epsilon(1e-12));
    CHECK(learning_rate(5999, cfg) == doctest::Approx(0.0001).epsilon(1e-12));
}

TEST_CASE("config validation catches bad variants and schedules") {
    TrainConfig cfg = tiny_cfg(Variant::pdc, 10);
    cfg.labeled_per_batch = cfg.batch_size;  // semi variant needs unlabeled slots
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_cfg(Variant::supervised_only, 10);
    cfg.labeled_per_batch = 2;  // supervised variant must fill the batch
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_cfg(Variant::pdc, 10);
    cfg.phase_order = "AB";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg.phase_order = "ABB";
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    cfg = tiny_cfg(Variant::pdc, 10);
    cfg.lr_decay_factor = 1.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);

    CHECK_THROWS_AS(variant_from_name("mean_teacher"), ConfigError);
    CHECK(variant_from_name("pdc") == Variant::pdc);
    CHECK(variant_name(Variant::vnet_ec) == std::string("vnet_ec"));
}

TEST_CASE("sgd update restricts itself to the requested groups") {
    ParameterStore ps = build_network(tiny_net(3));
    OptimizerState opt = OptimizerState::init(ps);
    GradientStore gs;
    for (const auto& e : ps.entries) gs.g.push_back(Tensor::full(e.value.shape, 0.5));

    const ParameterStore before = ps;
    const OptimizerState opt_before = opt;
    sgd_update(ps, gs, opt, 0.1, {ParamGroup::extractor}, 1e-4, 0.9);

    CHECK(entries_equal(ps, before, ParamGroup::head1));
    CHECK(entries_equal(ps, before, ParamGroup::head2));
    CHECK(!entries_equal(ps, before, ParamGroup::extractor));
    for (int i : ps.group_indices(ParamGroup::head1))
        CHECK(opt.momentum[static_cast<size_t>(i)].data ==
              opt_before.momentum[static_cast<size_t>(i)].data);

    // lr = 0: nothing moves
    ParameterStore ps2 = build_network(tiny_net(3));
    OptimizerState opt2 = OptimizerState::init(ps2);
    const ParameterStore before2 = ps2;
    sgd_update(ps2, gs, opt2, 0.0,
               {ParamGroup::extractor, ParamGroup::head1, ParamGroup::head2}, 1e-4, 0.9);
    for (size_t i = 0; i < ps2.entries.size(); ++i)
        CHECK(ps2.entries[i].value.data == before2.entries[i].value.data);

    // misaligned gradients
    GradientStore bad;
    bad.g.push_back(Tensor::zeros({1}));
    CHECK_THROWS_AS(sgd_update(ps, bad, opt, 0.1, {ParamGroup::extractor}, 0.0, 0.9),
                    AlignmentError);
}

TEST_CASE("one hand-computed sgd step") {
    // single scalar parameter w=1, grad=1, momentum=0, wd=0, lr=0.1 -> 0.9
    ParameterStore ps;
    ps.config = tiny_net();
    ParamEntry e;
    e.name = "w";
    e.group = ParamGroup::extractor;
    e.value = Tensor::full({1}, 1.0);
    ps.entries.push_back(e);

    OptimizerState opt = OptimizerState::init(ps);
    GradientStore gs;
    gs.g.push_back(Tensor::full({1}, 1.0));
    sgd_update(ps, gs, opt, 0.1, {ParamGroup::extractor}, 0.0, 0.0);
    CHECK(ps.entries[0].value.data[0] == doctest::Approx(0.9).epsilon(1e-15));
}

TEST_CASE("phase isolation is bit-exact, momentum included") {
    TrainConfig cfg = tiny_cfg(Variant::pdc, 10);
    Trainer trainer(cfg);
    Rng rng(1);

    ParameterStore after_a, after_b;
    OptimizerState opt_a, opt_b;
    int b_seen = 0, c_seen = 0;
    trainer.set_phase_observer([&](char phase, const ParameterStore& p, const OptimizerState& o) {
        if (phase == 'A') {
            after_a = p;
            opt_a = o;
        } else if (phase == 'B') {
            ++b_seen;
            CHECK(entries_equal(p, after_a, ParamGroup::extractor));
            for (int i : p.group_indices(ParamGroup::extractor))
                CHECK(o.momentum[static_cast<size_t>(i)].data ==
                      opt_a.momentum[static_cast<size_t>(i)].data);
            after_b = p;
            opt_b = o;
        } else if (phase == 'C') {
            ++c_seen;
            const ParameterStore& base = b_seen ? after_b : after_a;
            const OptimizerState& obase = b_seen ? opt_b : opt_a;
            CHECK(entries_equal(p, base, ParamGroup::head1));
            CHECK(entries_equal(p, base, ParamGroup::head2));
            for (ParamGroup g : {ParamGroup::head1, ParamGroup::head2})
                for (int i : p.group_indices(g))
                    CHECK(o.momentum[static_cast<size_t>(i)].data ==
                          obase.momentum[static_cast<size_t>(i)].data);
        }
    });

    for (int64_t t = 0; t < 10; ++t) {
        const auto labeled = toy_batch(rng, 2, true);
        const auto unlabeled = toy_batch(rng, 2, false);
        const LossBundle lb = trainer.step(labeled, unlabeled, t);
        CHECK(std::isfinite(lb.supervised));
        CHECK(lb.decoupling >= 0.0);
        CHECK(lb.decoupling <= 1.0);
        CHECK(lb.lambda_c == doctest::Approx(ramp_weight(t, cfg.effective_t_max())).epsilon(1e-15));
        CHECK(lb.lambda_pd ==
              doctest::Approx(ramp_weight(t, cfg.effective_t_max())).epsilon(1e-15));
    }
    CHECK(b_seen == 10);
    CHECK(c_seen == 10);
}

TEST_CASE("pdc with zero decoupling weight matches vnet_ec bit for bit") {
    TrainConfig pdc_cfg = tiny_cfg(Variant::pdc, 8);
    pdc_cfg.lambda_pd_scale = 0.0;
    TrainConfig ec_cfg = tiny_cfg(Variant::vnet_ec, 8);

    Trainer a(pdc_cfg);
    Trainer b(ec_cfg);
    Rng ra(77), rb(77);
    for (int64_t t = 0; t < 8; ++t) {
        a.step(toy_batch(ra, 2, true), toy_batch(ra, 2, false), t);
        b.step(toy_batch(rb, 2, true), toy_batch(rb, 2, false), t);
    }
    REQUIRE(a.params().entries.size() == b.params().entries.size());
    for (size_t i = 0; i < a.params().entries.size(); ++i)
        CHECK(a.params().entries[i].value.data == b.params().entries[i].value.data);
}

TEST_CASE("variant and batch composition mismatches are rejected") {
    Trainer t(tiny_cfg(Variant::supervised_only, 4));
    Rng rng(2);
    const auto labeled = toy_batch(rng, 4, true);
    const auto unlabeled = toy_batch(rng, 1, false);
    CHECK_THROWS_AS(t.step(labeled, unlabeled, 0), ConfigError);

    Trainer semi(tiny_cfg(Variant::pdc, 4));
    const auto l2 = toy_batch(rng, 2, true);
    auto u2 = toy_batch(rng, 2, false);
    CHECK_THROWS_AS(semi.step(l2, u2, 99), ConfigError);  // t out of range

    auto unlabeled_as_labeled = toy_batch(rng, 2, false);
    CHECK_THROWS_AS(semi.step(unlabeled_as_labeled, u2, 0), ConfigError);
}

TEST_CASE("train_run is deterministic and obeys the log and checkpoint contract") {
    const fs::path data = toy_dataset("pdc_trainer_ds", 8, 21);
    DatasetManifest m = load_manifest((data / "manifest.json").string());
    // split 4 labeled / 4 unlabeled
    m.train_unlabeled.assign(m.train_labeled.begin() + 3, m.train_labeled.end());
    m.train_labeled.resize(3);
    for (auto& e : m.samples)
        for (const auto& id : m.train_unlabeled)
            if (e.id == id) e.label_path.clear();

    TrainConfig cfg = tiny_cfg(Variant::pdc, 12);
    cfg.seed = 5;
    cfg.checkpoint_every = 5;
    cfg.log_every = 3;

    const fs::path o1 = fs::temp_directory_path() / "pdc_trainer_run1";
    const fs::path o2 = fs::temp_directory_path() / "pdc_trainer_run2";
    fs::remove_all(o1);
    fs::remove_all(o2);
    const TrainResult r1 = train_run(cfg, m, o1.string());
    const TrainResult r2 = train_run(cfg, m, o2.string());

    CHECK(file_bytes(r1.final_checkpoint) == file_bytes(r2.final_checkpoint));
    CHECK(file_bytes(r1.log_path) == file_bytes(r2.log_path));

    CHECK(fs::exists(o1 / "ckpt_5.bin"));
    CHECK(fs::exists(o1 / "ckpt_10.bin"));
    CHECK(fs::exists(o1 / "ckpt_12.bin"));

    std::ifstream log(r1.log_path);
    std::string header;
    std::getline(log, header);
    CHECK(header == "iter,loss_s,loss_c,loss_pd,lambda_c,lambda_pd,lr,cd,qcd");
    int rows = 0;
    for (std::string line; std::getline(log, line);)
        if (!line.empty()) ++rows;
    CHECK(rows == 5);  // t = 0,3,6,9 and the final iteration 11

    // load-back: final checkpoint carries the iteration count
    const ParameterStore ps = load_checkpoint(r1.final_checkpoint);
    CHECK(ps.iteration == 12);

    fs::remove_all(o1);
    fs::remove_all(o2);
    fs::remove_all(data);
}

TEST_CASE("insufficient data fails before the loop starts") {
    const fs::path data = toy_dataset("pdc_trainer_small", 3, 4);
    const DatasetManifest m = load_manifest((data / "manifest.json").string());
    TrainConfig cfg = tiny_cfg(Variant::pdc, 4);  // needs 2 unlabeled, split has 0
    const fs::path out = fs::temp_directory_path() / "pdc_trainer_small_out";
    fs::remove_all(out);
    CHECK_THROWS_AS(train_run(cfg, m, out.string()), DataError);
    fs::remove_all(out);
    fs::remove_all(data);
}

TEST_CASE("supervised training drives the loss down on a toy set") {
    TrainConfig cfg = tiny_cfg(Variant::supervised_only, 200);
    cfg.seed = 9;
    Trainer trainer(cfg);
    Rng rng(50);

    double first = 0.0, last = 0.0;
    for (int64_t t = 0; t < 200; ++t) {
        const LossBundle lb = trainer.step(toy_batch(rng, 4, true), {}, t);
        if (t == 0) first = lb.supervised;
        last = lb.supervised;
    }
    CHECK(last < first);
}

TEST_CASE("decoupling drives qcd down within the first training stretch") {
    TrainConfig cfg = tiny_cfg(Variant::pdc, 500);
    cfg.seed = 4;
    // steepen the ramp so the decoupling weight is active early
    cfg.ramp_t_max = 100;
    Trainer trainer(cfg);
    Rng rng(60);

    const double qcd0 = trainer.coupling().second;
    double qcd_min = qcd0;
    for (int64_t t = 0; t < 500; ++t) {
        trainer.step(toy_batch(rng, 2, true), toy_batch(rng, 2, false), t);
        qcd_min = std::min(qcd_min, trainer.coupling().second);
        if (qcd_min < 0.5 * qcd0) break;  // decreased decisively
    }
    CHECK(qcd_min < qcd0);
}

TEST_CASE("standalone decoupling descent reaches near-orthogonality from any seed") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor a1({10, 6});  // 60 + 40 = 100 parameters per head
        Tensor a2({10, 4});
        Tensor b1({10, 6});
        Tensor b2({10, 4});
        for (auto* t : {&a1, &a2, &b1, &b2})
            for (auto& x : t->data) x = rng.normal(0.0, 1.0);

        double qcd = 1.0;
        int steps = 0;
        for (; steps < 500; ++steps) {
            std::vector<Tensor> g1, g2;
            qcd = decoupling_loss({&a1, &a2}, {&b1, &b2}, &g1, &g2);
            if (qcd < 0.01) break;
            for (size_t i = 0; i < a1.data.size(); ++i) {
                a1.data[i] -= 0.1 * g1[0].data[i];
                b1.data[i] -= 0.1 * g2[0].data[i];
            }
            for (size_t i = 0; i < a2.data.size(); ++i) {
                a2.data[i] -= 0.1 * g1[1].data[i];
                b2.data[i] -= 0.1 * g2[1].data[i];
            }
        }
        INFO("seed ", seed, " steps ", steps, " qcd ", qcd);
        CHECK(qcd < 0.01);
    }
}
