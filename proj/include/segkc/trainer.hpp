#pragma once

#include <memory>
#include <string>
#include <vector>

#include "segkc/config.hpp"
#include "segkc/data.hpp"
#include "segkc/eval.hpp"
#include "segkc/losses.hpp"
#include "segkc/model.hpp"
#include "segkc/optim.hpp"

namespace segkc {

struct TrainState {
    long iter = 0;
    long epoch = 0;
    std::uint64_t seed = 0;
    OptimConfig optim;
    std::vector<double> miou_history;
};

struct TrainStepOptions {
    KdScope kd_scope = KdScope::kUnlabeled;
    bool kd_detach = true;
};

/// One co-training step: dual forward on the labeled and unlabeled batches,
/// the combined objective, one backward, one optimizer update at the current
/// poly learning rate, and an iter advance. The returned report carries the
/// learning rate that was applied.
LossReport train_step(TrainState& state, DualModel& model, const SegBatch& labeled,
                      const SegBatch& unlabeled, const LossWeights& weights,
                      const Thresholds& thr, AdamW& opt,
                      const TrainStepOptions& opts = {});

/// Owns a full training run: model, data stream, optimizer, metrics.
class Trainer {
public:
    explicit Trainer(const RunConfig& cfg);

    LossReport step();
    /// Junior mIoU on the validation scenes.
    EvalResult evaluate(std::vector<IntMap>* predictions = nullptr) const;
    EvalResult evaluate_senior_branch() const;

    long iter() const { return state_.iter; }
    long epoch() const { return state_.epoch; }
    long total_iters() const { return state_.optim.total_iters; }
    long steps_per_epoch() const;
    real current_lr() const;

    DualModel& model() { return *model_; }
    const RunConfig& config() const { return cfg_; }

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

private:
    RunConfig cfg_;
    TrainState state_;
    std::unique_ptr<DualModel> model_;
    std::unique_ptr<BatchStream> stream_;
    std::unique_ptr<AdamW> opt_;
};

struct ExperimentResult {
    double final_miou_junior = 0;
    double final_miou_senior = -1;  // only when requested
    std::string metrics_csv;
    std::string checkpoint;
};

/// Trains per the config, evaluating the junior each eval interval, and writes
/// config.resolved, metrics.csv, ckpt.final (and preds/*.pgm when requested)
/// under out_dir.
ExperimentResult run_experiment(const RunConfig& cfg, const std::string& out_dir);

int eval_threads_from_env();

}  // namespace segkc
