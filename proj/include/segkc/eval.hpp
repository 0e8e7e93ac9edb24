#pragma once

#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "segkc/data.hpp"
#include "segkc/model.hpp"
#include "segkc/tensor.hpp"

namespace segkc {

/// K x K tally of (ground truth row, prediction column) pixel counts.
/// Pixels whose truth equals ignore_index are excluded.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    void accumulate(const IntMap& pred, const IntMap& truth, int ignore_index = kIgnoreIndex);
    void merge(const ConfusionMatrix& other);

    std::uint64_t at(int truth, int pred) const;
    int num_classes() const { return k_; }
    std::uint64_t total() const;

    /// Per-class IoU; classes absent from both prediction and truth carry a
    /// negative sentinel and are excluded from the mean.
    std::vector<double> per_class_iou() const;
    double miou() const;

private:
    int k_;
    std::vector<std::uint64_t> counts_;
};

/// Resizes H and W to the nearest positive multiple of divisor (round half
/// up, never below divisor). Returns the resized tensor and the original size.
std::pair<Tensor, std::pair<int, int>> resize_for_inference(const Tensor& image, int divisor);

struct SlidingWindowConfig {
    int window = 0;  // 0 = full image in a single pass
    int stride = 0;  // 0 = window / 2
    bool average_probs = false;  // average softmax probabilities instead of logits
};

/// Tiled inference: windows are placed every `stride` pixels with the last
/// window flush against each border, and per-pixel outputs are averaged over
/// the covering windows. A window larger than the image falls back to one
/// full-image pass.
Tensor sliding_window_predict(const DualModel& model, const Tensor& image,
                              const SlidingWindowConfig& cfg);

/// Per-pixel window coverage counts for the given tiling; used to check that
/// every pixel is covered.
std::vector<int> sliding_window_coverage(int h, int w, int window, int stride);

struct EvalResult {
    double miou = 0;
    std::vector<double> per_class_iou;
    ConfusionMatrix cm;
};

/// Junior-branch evaluation over a list of samples. `load` must be callable
/// from multiple threads; parallelism is capped by max_threads (and by the
/// SEGKC_THREADS environment variable at the call sites that choose it).
EvalResult evaluate_junior(const DualModel& model, int num_samples,
                           const std::function<SegSample(int)>& load,
                           const SlidingWindowConfig& cfg, int divisor, int max_threads = 1,
                           std::vector<IntMap>* predictions = nullptr);

}  // namespace segkc
