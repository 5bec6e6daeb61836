#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pdc/rng.hpp"
#include "pdc/tensor.hpp"

namespace pdc {

struct VolumeSample {
    std::string id;
    Tensor intensity;  // (D, H, W)
    bool has_label = false;
    Mask label;  // valid only when has_label
    Spacing spacing{1.0, 1.0, 1.0};

    Dims3 dims() const { return {intensity.dim(0), intensity.dim(1), intensity.dim(2)}; }
};

struct ManifestEntry {
    std::string id;
    std::string intensity_path;  // relative to the manifest directory
    std::string label_path;      // empty when the sample is unlabeled
    Dims3 shape{0, 0, 0};
    Spacing spacing{1.0, 1.0, 1.0};
};

struct DatasetManifest {
    int version = 1;
    std::string root;  // directory holding the volume files; not serialized
    std::vector<ManifestEntry> samples;
    std::vector<std::string> train_labeled;
    std::vector<std::string> train_unlabeled;
    std::vector<std::string> test;

    const ManifestEntry& entry(const std::string& id) const;
    // Split disjointness, id resolution, label presence on train_labeled
    // and test. Throws DataError.
    void validate() const;
};

struct GeneratorParams {
    int n_volumes = 60;
    Dims3 shape{48, 48, 48};
    double test_fraction = 0.2;
    double fg_level_lo = 0.75;
    double fg_level_hi = 1.25;
    double bg_level = 0.0;
    double bias_amplitude = 0.3;  // max |bias| after normalization
    double noise_sigma = 0.3;
    double axis_lo = 0.15;  // main ellipsoid semi-axes, fraction of min extent
    double axis_hi = 0.35;
    double lobe_lo = 0.05;  // lobe semi-axes, same units
    double lobe_hi = 0.10;
    int max_lobes = 3;
    uint64_t seed = 0;

    void validate() const;  // throws ConfigError
};

// One synthetic volume, fully determined by (params, index): a randomly
// oriented ellipsoid with 1..max_lobes surface-attached lobes; intensity =
// background + foreground level on the shape + smooth bias field +
// Gaussian noise. The label is the exact generating shape.
VolumeSample make_volume(const GeneratorParams& params, int index);

// Writes vol_XXX_img.f32 / vol_XXX_lbl.u8 raw files plus manifest.json
// into out_dir and returns the manifest (all train ids labeled).
DatasetManifest generate_synthetic(const GeneratorParams& params, const std::string& out_dir);

void save_manifest(const DatasetManifest& m, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// Reads one sample's files; the label is attached when the manifest lists
// a label path. load_labeled insists on the label being present.
VolumeSample load_sample(const DatasetManifest& m, const std::string& id);

VolumeSample normalize(VolumeSample s);  // per-volume zero mean, unit variance

VolumeSample random_crop(const VolumeSample& s, const Dims3& crop, Rng& rng);

// Independent 50% flips per axis then a uniformly random k*90° rotation in
// the (H, W) plane; k restricted to {0, 2} when H != W so shapes are
// preserved. Intensity and label transform jointly.
VolumeSample augment(VolumeSample s, Rng& rng);

struct BatchSpec {
    int batch_size = 4;
    int labeled_per_batch = 2;
    Dims3 crop{32, 32, 32};
    bool augment = true;
};

// Epoch-style without-replacement sampler over the train splits. Samples
// are preloaded and normalized once; each draw crops and augments with the
// composer's own rng, so batch sequences are a pure function of the seed.
class BatchComposer {
public:
    BatchComposer(const DatasetManifest& manifest, const BatchSpec& spec, uint64_t seed);

    // (labeled, unlabeled) lists; unlabeled samples carry no label.
    std::pair<std::vector<VolumeSample>, std::vector<VolumeSample>> next();

private:
    VolumeSample draw(std::vector<size_t>& queue, size_t& pos, const std::vector<VolumeSample>& pool);

    BatchSpec spec_;
    Rng rng_;
    std::vector<VolumeSample> labeled_pool_, unlabeled_pool_;
    std::vector<size_t> labeled_queue_, unlabeled_queue_;
    size_t labeled_pos_ = 0, unlabeled_pos_ = 0;
};

}  // namespace pdc
