#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "pdc/data.hpp"
#include "pdc/objectives.hpp"
#include "pdc/volnet.hpp"

namespace pdc {

enum class Variant { supervised_only, vnet_gc, vnet_ec, pdc };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);  // throws ConfigError

struct TrainConfig {
    Variant variant = Variant::pdc;
    int64_t total_iterations = 6000;
    double base_lr = 0.01;
    int64_t lr_decay_every = 2500;
    double lr_decay_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 4;
    int labeled_per_batch = 2;
    int64_t ramp_t_max = 0;  // 0 means total_iterations
    double lambda_c_scale = 0.1;
    double lambda_pd_scale = 0.1;
    Dims3 crop{32, 32, 32};
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;  // 0: final checkpoint only
    int64_t log_every = 1;
    // Phase schedule: permutation of "A" (supervised), "B" (decoupling),
    // "C" (consistency); B may also run on a coarser cadence.
    std::string phase_order = "ABC";
    int64_t pd_every = 1;
    bool augment = true;
    NetworkConfig net;

    void validate() const;  // throws ConfigError
    int64_t effective_t_max() const { return ramp_t_max > 0 ? ramp_t_max : total_iterations; }
};

double learning_rate(int64_t t, const TrainConfig& cfg);

struct OptimizerState {
    std::vector<Tensor> momentum;  // aligned with ParameterStore entries
    int64_t iteration = 0;
    double lr = 0.0;

    static OptimizerState init(const ParameterStore& params);
};

// Momentum-SGD step restricted to trainable parameters whose group lies in
// `groups`; every other parameter and momentum buffer is left bit-
// unchanged. Weight decay folds into the gradient before the momentum
// update: v = momentum*v + (g + wd*w); w -= lr*v. Throws AlignmentError on
// mismatched shapes.
void sgd_update(ParameterStore& params, const GradientStore& grads, OptimizerState& state,
                double lr, const std::set<ParamGroup>& groups, double weight_decay,
                double momentum);

// Called after each executed phase ('A'/'B'/'C', or 'J' for the joint
// vnet_gc step) with the post-update state.
using PhaseObserver =
    std::function<void(char phase, const ParameterStore& params, const OptimizerState& opt)>;

class Trainer {
public:
    // Builds the network from cfg.net with an init stream derived from
    // both cfg.seed and cfg.net.seed.
    explicit Trainer(const TrainConfig& cfg);
    // Adopts existing parameters (their config wins over cfg.net).
    Trainer(const TrainConfig& cfg, ParameterStore params);

    // One alternating-update iteration at step index t.
    LossBundle step(const std::vector<VolumeSample>& labeled,
                    const std::vector<VolumeSample>& unlabeled, int64_t t);

    const TrainConfig& config() const { return cfg_; }
    ParameterStore& params();
    const ParameterStore& params() const;
    OptimizerState& optimizer() { return opt_; }
    void set_phase_observer(PhaseObserver obs) { observer_ = std::move(obs); }

    // (cd, qcd) of the current head parameters.
    std::pair<double, double> coupling() const;

private:
    Tensor stack_inputs(const std::vector<VolumeSample>& a,
                        const std::vector<VolumeSample>& b) const;
    double supervised_pass(const Tensor& input, const std::vector<VolumeSample>& labeled,
                           double* consistency_out);
    void notify(char phase);

    TrainConfig cfg_;
    VNet net_;
    OptimizerState opt_;
    PhaseObserver observer_;
};

struct TrainResult {
    ParameterStore params;
    std::string final_checkpoint;
    std::string log_path;
};

// Full training loop: composes batches from the manifest's train splits,
// runs cfg.total_iterations steps, appends the loss/coupling log to
// out_dir/log.csv and writes checkpoints ckpt_<iter>.bin into out_dir.
TrainResult train_run(const TrainConfig& cfg, const DatasetManifest& manifest,
                      const std::string& out_dir);

}  // namespace pdc
