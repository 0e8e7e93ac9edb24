#include "segkc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

namespace segkc {

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
    if (num_classes < 1) throw ValueError("confusion matrix needs at least one class");
    counts_.assign(static_cast<std::size_t>(k_) * k_, 0);
}

void ConfusionMatrix::accumulate(const IntMap& pred, const IntMap& truth, int ignore_index) {
    if (pred.shape != truth.shape) {
        throw ShapeError("confusion matrix: pred/truth shape mismatch");
    }
    for (std::size_t i = 0; i < truth.v.size(); ++i) {
        const auto t = truth.v[i];
        if (t == ignore_index) continue;
        const auto p = pred.v[i];
        if (t < 0 || t >= k_ || p < 0 || p >= k_) {
            throw DataError("confusion matrix: class out of range");
        }
        ++counts_[static_cast<std::size_t>(t) * k_ + static_cast<std::size_t>(p)];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("confusion matrix: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::at(int truth, int pred) const {
    if (truth < 0 || truth >= k_ || pred < 0 || pred >= k_) {
        throw ValueError("confusion matrix: index out of range");
    }
    return counts_[static_cast<std::size_t>(truth) * k_ + static_cast<std::size_t>(pred)];
}

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t n = 0;
    for (auto c : counts_) n += c;
    return n;
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
    std::vector<double> iou(static_cast<std::size_t>(k_), -1.0);
    for (int c = 0; c < k_; ++c) {
        std::uint64_t row = 0, col = 0;
        for (int j = 0; j < k_; ++j) {
            row += at(c, j);
            col += at(j, c);
        }
        const std::uint64_t inter = at(c, c);
        const std::uint64_t uni = row + col - inter;
        if (uni > 0) {
            iou[static_cast<std::size_t>(c)] =
                static_cast<double>(inter) / static_cast<double>(uni);
        }
    }
    return iou;
}

double ConfusionMatrix::miou() const {
    const auto iou = per_class_iou();
    double acc = 0;
    int n = 0;
    for (double v : iou) {
        if (v >= 0) {
            acc += v;
            ++n;
        }
    }
    return n == 0 ? 0.0 : acc / n;
}

// ---------------------------------------------------------------------------

namespace {

int nearest_multiple(int v, int divisor) {
    const long m = std::lround(static_cast<double>(v) / divisor);
    return static_cast<int>(std::max(1L, m)) * divisor;
}

std::vector<int> window_starts(int size, int window, int stride) {
    std::vector<int> starts;
    if (window >= size) {
        starts.push_back(0);
        return starts;
    }
    for (int s = 0; s + window < size; s += stride) starts.push_back(s);
    starts.push_back(size - window);  // flush with the border
    return starts;
}

}  // namespace

std::pair<Tensor, std::pair<int, int>> resize_for_inference(const Tensor& image, int divisor) {
    if (divisor < 1) throw ValueError("resize_for_inference: divisor must be positive");
    if (image.ndim() != 4) throw ShapeError("resize_for_inference: image must be 4-D");
    const int h = image.dim(2), w = image.dim(3);
    const int nh = nearest_multiple(h, divisor);
    const int nw = nearest_multiple(w, divisor);
    if (nh == h && nw == w) return {image, {h, w}};
    return {bilinear_resize(image, nh, nw), {h, w}};
}

std::vector<int> sliding_window_coverage(int h, int w, int window, int stride) {
    std::vector<int> cover(static_cast<std::size_t>(h) * w, 0);
    for (int sy : window_starts(h, window, stride)) {
        for (int sx : window_starts(w, window, stride)) {
            const int ey = std::min(h, sy + window), ex = std::min(w, sx + window);
            for (int y = sy; y < ey; ++y) {
                for (int x = sx; x < ex; ++x) {
                    ++cover[static_cast<std::size_t>(y) * w + x];
                }
            }
        }
    }
    return cover;
}

Tensor sliding_window_predict(const DualModel& model, const Tensor& image,
                              const SlidingWindowConfig& cfg) {
    if (image.ndim() != 4 || image.dim(0) != 1) {
        throw ShapeError("sliding_window_predict: image must be [1,3,H,W]");
    }
    const int h = image.dim(2), w = image.dim(3);
    const int k = model.config().num_classes;

    auto run = [&](const Tensor& tile) {
        Tensor logits = model.forward_junior(tile);
        return cfg.average_probs ? softmax_t(logits, 1.0, 1) : logits;
    };

    if (cfg.window <= 0 || cfg.window >= std::max(h, w)) {
        return run(image);
    }
    int window = cfg.window;
    if (window > std::min(h, w)) {
        // window exceeds one image dimension: single full-image pass
        return run(image);
    }
    const int stride = cfg.stride > 0 ? cfg.stride : std::max(1, window / 2);
    if (stride > window) throw ValueError("sliding window stride must be <= window");

    const std::size_t plane = static_cast<std::size_t>(h) * w;
    std::vector<real> acc(static_cast<std::size_t>(k) * plane, real(0));
    std::vector<real> count(plane, real(0));
    const auto iv = image.values();

    for (int sy : window_starts(h, window, stride)) {
        for (int sx : window_starts(w, window, stride)) {
            std::vector<real> tile(static_cast<std::size_t>(3) * window * window);
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < window; ++y) {
                    const real* src = iv.data() + (static_cast<std::size_t>(c) * h +
                                                   static_cast<std::size_t>(sy + y)) *
                                                      w +
                                      sx;
                    std::copy(src, src + window,
                              tile.begin() + (static_cast<std::size_t>(c) * window + y) * window);
                }
            }
            const Tensor out =
                run(Tensor::from_values({1, 3, window, window}, std::move(tile)));
            const auto ov = out.values();
            for (int c = 0; c < k; ++c) {
                for (int y = 0; y < window; ++y) {
                    for (int x = 0; x < window; ++x) {
                        acc[(static_cast<std::size_t>(c) * h + static_cast<std::size_t>(sy + y)) *
                                w +
                            sx + x] +=
                            ov[(static_cast<std::size_t>(c) * window + y) * window + x];
                    }
                }
            }
            for (int y = 0; y < window; ++y) {
                for (int x = 0; x < window; ++x) {
                    count[static_cast<std::size_t>(sy + y) * w + sx + x] += 1;
                }
            }
        }
    }

    for (int c = 0; c < k; ++c) {
        for (std::size_t p = 0; p < plane; ++p) {
            acc[static_cast<std::size_t>(c) * plane + p] /= count[p];
        }
    }
    return Tensor::from_values({1, k, h, w}, std::move(acc));
}

EvalResult evaluate_junior(const DualModel& model, int num_samples,
                           const std::function<SegSample(int)>& load,
                           const SlidingWindowConfig& cfg, int divisor, int max_threads,
                           std::vector<IntMap>* predictions) {
    const int k = model.config().num_classes;
    EvalResult result{0.0, {}, ConfusionMatrix(k)};
    if (num_samples <= 0) return result;
    if (predictions != nullptr) predictions->assign(static_cast<std::size_t>(num_samples), {});

    const int threads = std::clamp(max_threads, 1, num_samples);
    std::vector<ConfusionMatrix> partials(static_cast<std::size_t>(threads),
                                          ConfusionMatrix(k));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(threads));

    auto worker = [&](int tid) {
        try {
            for (int i = tid; i < num_samples; i += threads) {
                const SegSample s = load(i);
                Tensor image = Tensor::from_values(
                    {1, 3, s.h, s.w}, std::vector<real>(s.image.begin(), s.image.end()));
                auto [resized, orig] = resize_for_inference(image, divisor);
                Tensor logits = sliding_window_predict(model, resized, cfg);
                if (logits.dim(2) != orig.first || logits.dim(3) != orig.second) {
                    TapePause pause;
                    logits = bilinear_resize(logits, orig.first, orig.second);
                }
                IntMap pred = argmax_axis(logits, 1);
                IntMap truth{{1, s.h, s.w}, s.labels};
                partials[static_cast<std::size_t>(tid)].accumulate(pred, truth);
                if (predictions != nullptr) {
                    (*predictions)[static_cast<std::size_t>(i)] = std::move(pred);
                }
            }
        } catch (...) {
            errors[static_cast<std::size_t>(tid)] = std::current_exception();
        }
    };

    if (threads == 1) {
        worker(0);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker, t);
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }

    for (const auto& p : partials) result.cm.merge(p);
    result.per_class_iou = result.cm.per_class_iou();
    result.miou = result.cm.miou();
    return result;
}

}  // namespace segkc
