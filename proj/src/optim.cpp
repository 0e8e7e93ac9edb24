#include "segkc/optim.hpp"

#include <cmath>
#include <ostream>
#include <istream>

namespace segkc {

void OptimConfig::validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (!(decoder_lr_multiplier > 0)) throw ConfigError("decoder_lr_multiplier must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) {
        throw ConfigError("betas must lie in [0,1)");
    }
    if (!(eps > 0)) throw ConfigError("eps must be positive");
    if (total_iters < 1) throw ConfigError("total_iters must be >= 1");
    if (clip_grad_norm < 0) throw ConfigError("clip_grad_norm must be non-negative");
}

real poly_lr(real base_lr, long iter, long total_iters, real power) {
    if (iter < 0 || iter > total_iters) {
        throw ContractError("poly_lr: iter must lie in [0, total_iters]");
    }
    const real frac = real(1) - static_cast<real>(iter) / static_cast<real>(total_iters);
    return base_lr * std::pow(frac, power);
}

AdamW::AdamW(std::vector<Param>& params, const OptimConfig& cfg)
    : params_(&params), cfg_(cfg) {
    cfg_.validate();
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].tensor.size(), real(0));
        v_[i].assign(params[i].tensor.size(), real(0));
    }
}

void AdamW::step(real lr) {
    ++step_count_;
    const real bc1 = real(1) - std::pow(cfg_.beta1, static_cast<real>(step_count_));
    const real bc2 = real(1) - std::pow(cfg_.beta2, static_cast<real>(step_count_));

    if (cfg_.clip_grad_norm > 0) {
        real sq = 0;
        for (auto& p : *params_) {
            if (!p.tensor.has_grad()) continue;
            for (real g : p.tensor.grad()) sq += g * g;
        }
        const real norm = std::sqrt(sq);
        if (norm > cfg_.clip_grad_norm) {
            const real factor = cfg_.clip_grad_norm / norm;
            for (auto& p : *params_) {
                if (!p.tensor.has_grad()) continue;
                auto impl = p.tensor.impl();
                for (auto& g : impl->grad) g *= factor;
            }
        }
    }

    for (std::size_t i = 0; i < params_->size(); ++i) {
        Param& p = (*params_)[i];
        const real group_lr = p.decoder ? lr * cfg_.decoder_lr_multiplier : lr;
        auto w = p.tensor.values_mut();
        const bool has_grad = p.tensor.has_grad();
        std::span<const real> g;
        if (has_grad) g = p.tensor.grad();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const real gj = has_grad ? g[j] : real(0);
            if (!std::isfinite(gj)) {
                throw TrainError("non-finite gradient in " + p.name + " at optimizer step " +
                                 std::to_string(step_count_));
            }
            m_[i][j] = cfg_.beta1 * m_[i][j] + (real(1) - cfg_.beta1) * gj;
            v_[i][j] = cfg_.beta2 * v_[i][j] + (real(1) - cfg_.beta2) * gj * gj;
            const real mhat = m_[i][j] / bc1;
            const real vhat = v_[i][j] / bc2;
            // decoupled decay: applied to the weight, not through the gradient
            w[j] -= group_lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
        }
    }
}

void AdamW::zero_grad() {
    for (auto& p : *params_) p.tensor.zero_grad();
}

void AdamW::serialize(std::ostream& os) const {
    os << "adamwv1 " << step_count_ << " " << m_.size() << "\n";
    auto dump = [&os](const std::vector<std::vector<real>>& buf) {
        for (const auto& vec : buf) {
            os.write(reinterpret_cast<const char*>(vec.data()),
                     static_cast<std::streamsize>(vec.size() * sizeof(real)));
        }
    };
    dump(m_);
    dump(v_);
    if (!os) throw DataError("optimizer state: write failed");
}

void AdamW::restore(std::istream& is) {
    std::string tag;
    std::size_t n = 0;
    if (!(is >> tag >> step_count_ >> n) || tag != "adamwv1" || n != m_.size()) {
        throw DataError("optimizer state: bad header");
    }
    is.get();  // newline
    auto slurp = [&is](std::vector<std::vector<real>>& buf) {
        for (auto& vec : buf) {
            is.read(reinterpret_cast<char*>(vec.data()),
                    static_cast<std::streamsize>(vec.size() * sizeof(real)));
        }
    };
    slurp(m_);
    slurp(v_);
    if (!is) throw DataError("optimizer state: truncated");
}

}  // namespace segkc
