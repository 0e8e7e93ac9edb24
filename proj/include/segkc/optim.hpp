#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "segkc/model.hpp"

namespace segkc {

struct OptimConfig {
    real base_lr = 1e-3;
    real decoder_lr_multiplier = 40.0;
    real weight_decay = 0.01;
    real beta1 = 0.9;
    real beta2 = 0.999;
    real eps = 1e-8;
    long total_iters = 1;
    real poly_power = 0.9;
    real clip_grad_norm = 0;  // 0 = off

    void validate() const;
};

/// base_lr * (1 - iter/total_iters)^power.
real poly_lr(real base_lr, long iter, long total_iters, real power);

/// AdamW with decoupled weight decay and two parameter groups: encoder
/// parameters use the given lr, decoder parameters (classifier heads and
/// fusion projections) use lr * decoder_lr_multiplier.
class AdamW {
public:
    AdamW(std::vector<Param>& params, const OptimConfig& cfg);

    /// Applies one update from the gradients currently stored on the
    /// parameters; a parameter without a grad buffer counts as zero gradient.
    void step(real lr);

    void zero_grad();
    long step_count() const { return step_count_; }

    void serialize(std::ostream& os) const;
    void restore(std::istream& is);

private:
    std::vector<Param>* params_;
    OptimConfig cfg_;
    std::vector<std::vector<real>> m_;
    std::vector<std::vector<real>> v_;
    long step_count_ = 0;
};

}  // namespace segkc
