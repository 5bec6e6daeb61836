#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pdc/tensor.hpp"

namespace pdc {

enum class ParamGroup : uint8_t { extractor = 0, head1 = 1, head2 = 2 };

const char* group_name(ParamGroup g);

enum class NormKind : uint8_t { batch = 0, instance = 1 };

struct NetworkConfig {
    int in_channels = 1;
    int num_classes = 2;
    std::vector<int> encoder_channels = {8, 16, 32};
    // 0 means "same as the full-resolution feature channels".
    int head_hidden_channels = 0;
    int kernel_size = 3;
    NormKind norm = NormKind::batch;
    uint64_t seed = 0;

    void validate() const;  // throws ConfigError
    int levels() const { return static_cast<int>(encoder_channels.size()); }
    int spatial_divisor() const { return 1 << (levels() - 1); }
    int hidden_channels() const {
        return head_hidden_channels > 0 ? head_hidden_channels : encoder_channels.front();
    }
};

struct ParamEntry {
    std::string name;
    ParamGroup group = ParamGroup::extractor;
    bool trainable = true;  // false: normalization running statistics
    Tensor value;
};

// Named, shape-tagged parameter arrays partitioned into extractor / head1 /
// head2. Entry order is fixed by construction; head1 and head2 entries pair
// up one-to-one in that order.
struct ParameterStore {
    NetworkConfig config;
    int64_t iteration = 0;
    std::vector<ParamEntry> entries;

    int index_of(const std::string& name) const;  // -1 when absent
    ParamEntry& find(const std::string& name);
    const ParamEntry& find(const std::string& name) const;
    std::vector<int> group_indices(ParamGroup g, bool trainable_only = false) const;
    std::vector<const Tensor*> group_tensors(ParamGroup g, bool trainable_only = false) const;
    int64_t value_count(ParamGroup g) const;
    void validate() const;
};

// Trainable entry indices of a group, bucketed into layers: entries whose
// names share a prefix up to the last '.' ("head1.conv1.weight" and
// "head1.conv1.bias" -> layer "head1.conv1") form one bucket, in entry
// order. The head coupling losses and diagnostics pair layer by layer.
std::vector<std::vector<int>> layer_groups(const ParameterStore& ps, ParamGroup g);

// One tensor per bucket: the bucket's parameter values concatenated flat.
std::vector<Tensor> flatten_layers(const ParameterStore& ps,
                                   const std::vector<std::vector<int>>& groups);

ParameterStore build_network(const NetworkConfig& cfg);

// Both heads' outputs for one input volume.
struct DualPrediction {
    Tensor logits1, logits2;  // (num_classes, D, H, W)
    Tensor probs1, probs2;    // softmax over the class axis
};

// Batched variant used by the training loop, shapes (N, C, D, H, W).
struct DualBatchOutput {
    Tensor logits1, logits2;
    Tensor probs1, probs2;
};

// Gradient arrays aligned entry-by-entry with a ParameterStore.
struct GradientStore {
    std::vector<Tensor> g;
    void zero();
};

// Encoder-decoder feature extractor with two disjoint classification heads.
// Owns the parameter store, the gradient store and the activation
// workspace; forward + backward are hand-written per layer.
class VNet {
public:
    explicit VNet(const NetworkConfig& cfg);
    explicit VNet(ParameterStore store);
    ~VNet();
    VNet(VNet&&) noexcept;
    VNet& operator=(VNet&&) noexcept;

    const NetworkConfig& config() const;
    ParameterStore& params();
    const ParameterStore& params() const;
    GradientStore& grads();

    // input (N, in_channels, D, H, W). In training mode normalization uses
    // batch statistics; running statistics are refreshed unless
    // update_norm_stats is false (frozen for finite-difference checks).
    DualBatchOutput forward(const Tensor& input, bool training, bool update_norm_stats = true);

    void zero_grad();
    // dlogits shaped like the logits of the preceding forward call.
    // Accumulates parameter gradients for all three groups.
    void backward(const Tensor& dlogits1, const Tensor& dlogits2);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

// Single-volume convenience forward, evaluation mode, no side effects.
DualPrediction forward(const ParameterStore& params, const Tensor& volume);

// dL/dlogits from dL/dprobs for a softmax over the class axis (axis 1 for
// rank-5 batched tensors, axis 0 otherwise).
Tensor softmax_backward(const Tensor& probs, const Tensor& dprobs);

// Sliding-window inference over a full volume. Windows from both heads are
// probability-averaged, overlapping voxels averaged, argmax thresholded to
// the foreground mask. Volumes smaller than the window are edge-padded
// symmetrically and cropped back.
Mask infer_mask(const ParameterStore& params, const Tensor& volume, const Dims3& window,
                const Dims3& stride);

// Window corner positions covering [0, extent) with the final window
// clamped flush to the end.
std::vector<int64_t> sliding_corners(int64_t extent, int64_t window, int64_t stride);

// Checkpoint container: little-endian; header (magic, version, iteration,
// config echo as JSON) followed by one record per entry: name, group tag,
// trainable flag, shape, float32 values. Save -> load -> save is
// byte-identical.
void save_checkpoint(const ParameterStore& params, const std::string& path);
ParameterStore load_checkpoint(const std::string& path);

}  // namespace pdc
