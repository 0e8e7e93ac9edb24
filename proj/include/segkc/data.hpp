#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "segkc/losses.hpp"
#include "segkc/tensor.hpp"

namespace segkc {

/// Parameters of the procedural scene generator. Scenes contain random
/// rectangles, disks and triangles with class-correlated colors on a noisy
/// background; class 0 is background.
struct SceneSpec {
    int image_h = 64;
    int image_w = 64;
    int num_classes = 4;
    int shapes_min = 1;
    int shapes_max = 3;
    double noise_sigma = 0.18;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SegSample {
    std::vector<real> image;       // 3*H*W, values in [0,1]
    std::vector<std::int32_t> labels;  // H*W, class or kIgnoreIndex
    int h = 0, w = 0;
};

/// Deterministic labeled/unlabeled partition at a named ratio.
struct SplitManifest {
    int dataset_size = 0;
    std::vector<int> labeled_ids;  // sorted, unique
    std::string ratio_name;
    std::uint64_t seed = 0;

    void serialize(std::ostream& os) const;
    static SplitManifest parse(std::istream& is);
};

struct SegBatch {
    Tensor images;                     // [N,3,H,W]
    IntMap labels;                     // [N,H,W], all-ignore for unlabeled
    std::vector<std::uint8_t> is_labeled;
    std::vector<int> ids;              // dataset indices, for replay checks

    int batch_size() const { return images.defined() ? images.dim(0) : 0; }
};

struct StepBatches {
    SegBatch labeled;
    SegBatch unlabeled;
};

/// Pure function of (spec, index).
SegSample generate_scene(const SceneSpec& spec, int index);

/// Supported ratios: "1/16", "1/8", "1/4", "1/2", "full".
SplitManifest make_split(int dataset_size, const std::string& ratio_name, std::uint64_t seed);

struct AugmentConfig {
    bool enabled = true;
    int crop_size = 0;  // 0 = no crop
};

/// Single-consumer iterator over the labeled and unlabeled pools. Each pool
/// cycles independently with a reshuffle per pass; an epoch is one pass over
/// the unlabeled pool (over the labeled pool when no unlabeled samples exist).
class BatchStream {
public:
    BatchStream(const SceneSpec& spec, const SplitManifest& split, const AugmentConfig& aug,
                std::uint64_t seed);

    StepBatches next(int batch_size);

    long epoch() const { return epoch_; }
    /// Steps per epoch at the given batch size.
    long steps_per_epoch(int batch_size) const;

    void serialize(std::ostream& os) const;
    void restore(std::istream& is);

private:
    struct Pool {
        std::vector<int> ids;     // current shuffled order
        std::size_t cursor = 0;
        Rng rng{0};
        int take(long* epochs_done);
    };

    SegSample load_augmented(int index, bool with_labels);

    SceneSpec spec_;
    AugmentConfig aug_;
    Pool labeled_;
    Pool unlabeled_;
    Rng aug_rng_{0};
    long epoch_ = 0;
    bool epoch_by_labeled_ = false;
};

// Portable 8-bit image IO. Images are binary PPM (P6), label masks binary
// PGM (P5), both with maxval 255.
void write_ppm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& rgb);
void write_pgm(const std::string& path, int h, int w, const std::vector<std::uint8_t>& gray);
std::vector<std::uint8_t> read_ppm(const std::string& path, int* h, int* w);
std::vector<std::uint8_t> read_pgm(const std::string& path, int* h, int* w);

/// Quantizes a [0,1] image to 8-bit RGB for dumping.
std::vector<std::uint8_t> image_to_u8(const std::vector<real>& image);

}  // namespace segkc
