#include "segkc/losses.hpp"

#include <cmath>

namespace segkc {

namespace {

// Shared core of the supervised and consistency losses: mean cross-entropy
// over pixels with weight 1, exact zero contribution elsewhere.
Tensor masked_cross_entropy(const Tensor& logits, const IntMap& labels,
                            const std::vector<real>& pixel_weight) {
    const int k = logits.dim(1);
    real count = 0;
    for (real wv : pixel_weight) count += wv;
    if (count == 0) return Tensor::scalar(0);

    // Clamp masked-out labels to a valid class; their weight is zero so they
    // cannot contribute.
    IntMap clamped = labels;
    for (std::size_t i = 0; i < clamped.v.size(); ++i) {
        if (pixel_weight[i] == 0) clamped.v[i] = 0;
        if (clamped.v[i] < 0 || clamped.v[i] >= k) {
            throw DataError("cross-entropy: label out of range");
        }
    }

    Tensor logp = log_softmax_t(logits, 1.0, 1);
    Tensor picked = select_class(logp, clamped);
    Tensor weights = Tensor::from_values(clamped.shape, std::vector<real>(pixel_weight));
    return scale(sum(mul(picked, weights)), real(-1) / count);
}

void check_logits4(const Tensor& logits, const char* what) {
    if (!logits.defined() || logits.ndim() != 4) {
        throw ShapeError(std::string(what) + ": logits must be [N,K,H,W]");
    }
}

}  // namespace

void LossWeights::validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) {
        throw ConfigError("loss weights must be non-negative");
    }
}

Tensor supervised_loss(const Tensor& logits, const IntMap& labels, int ignore_index) {
    check_logits4(logits, "supervised_loss");
    const int n = logits.dim(0), k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    if (labels.shape != std::vector<int>{n, h, w}) {
        throw ShapeError("supervised_loss: labels must be [N,H,W]");
    }
    std::vector<real> weight(labels.v.size());
    for (std::size_t i = 0; i < labels.v.size(); ++i) {
        const auto lab = labels.v[i];
        if (lab == ignore_index) {
            weight[i] = 0;
        } else if (lab >= 0 && lab < k) {
            weight[i] = 1;
        } else {
            throw DataError("supervised_loss: label out of range");
        }
    }
    return masked_cross_entropy(logits, labels, weight);
}

PseudoLabels make_pseudo_labels(const Tensor& logits, real conf_tau) {
    check_logits4(logits, "make_pseudo_labels");
    const Tensor detached = stop_gradient(logits);
    PseudoLabels out;
    out.labels = argmax_axis(detached, 1);
    const Tensor probs = softmax_t(detached, 1.0, 1);

    const int k = logits.dim(1);
    const std::size_t plane = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
    out.mask.shape = out.labels.shape;
    out.mask.v.resize(out.labels.v.size());
    const auto pv = probs.values();
    for (std::size_t p = 0; p < out.labels.v.size(); ++p) {
        const std::size_t b = p / plane, rest = p % plane;
        const real conf =
            pv[(b * static_cast<std::size_t>(k) + static_cast<std::size_t>(out.labels.v[p])) *
                   plane +
               rest];
        out.mask.v[p] = conf >= conf_tau ? 1 : 0;
    }
    return out;
}

Tensor consistency_loss(const Tensor& logits, const PseudoLabels& pseudo) {
    check_logits4(logits, "consistency_loss");
    const int n = logits.dim(0), h = logits.dim(2), w = logits.dim(3);
    if (pseudo.labels.shape != std::vector<int>{n, h, w} ||
        pseudo.mask.shape != pseudo.labels.shape) {
        throw ShapeError("consistency_loss: pseudo-label shape mismatch");
    }
    std::vector<real> weight(pseudo.mask.v.size());
    for (std::size_t i = 0; i < weight.size(); ++i) weight[i] = pseudo.mask.v[i] ? 1 : 0;
    return masked_cross_entropy(logits, pseudo.labels, weight);
}

Tensor kd_loss(const Tensor& senior_logits, const Tensor& junior_logits, real temperature,
               bool detach_target) {
    check_logits4(senior_logits, "kd_loss");
    check_logits4(junior_logits, "kd_loss");
    if (senior_logits.shape() != junior_logits.shape()) {
        throw ShapeError("kd_loss: logits shapes differ");
    }
    if (!(temperature > 0)) throw ValueError("kd_loss: temperature must be positive");

    const Tensor target = detach_target ? stop_gradient(senior_logits) : senior_logits;
    const Tensor logp_w = log_softmax_t(target, temperature, 1);
    const Tensor logp_u = log_softmax_t(junior_logits, temperature, 1);
    const Tensor p_w = exp(logp_w);
    const Tensor per_element = mul(p_w, sub(logp_w, logp_u));

    const std::size_t pixels = static_cast<std::size_t>(senior_logits.dim(0)) *
                               static_cast<std::size_t>(senior_logits.dim(2)) *
                               static_cast<std::size_t>(senior_logits.dim(3));
    return scale(sum(per_element), real(1) / static_cast<real>(pixels));
}

LossReport total_loss(const Tensor& sup_sr, const Tensor& sup_jr, const Tensor& con_sr,
                      const Tensor& con_jr, const Tensor& kd, const LossWeights& weights) {
    weights.validate();
    for (const Tensor* t : {&sup_sr, &sup_jr, &con_sr, &con_jr, &kd}) {
        if (!t->defined() || t->size() != 1) {
            throw ContractError("total_loss: every term must be a scalar");
        }
    }
    LossReport report;
    report.sup_sr = sup_sr;
    report.sup_jr = sup_jr;
    report.con_sr = con_sr;
    report.con_jr = con_jr;
    report.kd = kd;
    Tensor total = scale(add(sup_sr, sup_jr), real(0.5) * weights.lambda1);
    total = add(total, scale(add(con_sr, con_jr), real(0.5) * weights.lambda2));
    total = add(total, scale(kd, weights.lambda3));
    report.total = total;
    return report;
}

}  // namespace segkc
