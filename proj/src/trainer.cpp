#include "segkc/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

namespace segkc {

namespace {

constexpr char kTrainMagic[] = "trainv1";

std::string fmt(real v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(v));
    return buf;
}

Tensor kd_for_scope(const ForwardOutput* labeled_out, const ForwardOutput* unlabeled_out,
                    const Thresholds& thr, const TrainStepOptions& opts) {
    auto kd_of = [&](const ForwardOutput& out) {
        return kd_loss(out.senior_logits, out.junior_logits, thr.kd_temperature,
                       opts.kd_detach);
    };
    switch (opts.kd_scope) {
        case KdScope::kLabeled:
            return labeled_out != nullptr ? kd_of(*labeled_out) : Tensor::scalar(0);
        case KdScope::kUnlabeled:
            return unlabeled_out != nullptr ? kd_of(*unlabeled_out) : Tensor::scalar(0);
        case KdScope::kBoth: {
            Tensor acc = Tensor::scalar(0);
            int n = 0;
            if (labeled_out != nullptr) {
                acc = add(acc, kd_of(*labeled_out));
                ++n;
            }
            if (unlabeled_out != nullptr) {
                acc = add(acc, kd_of(*unlabeled_out));
                ++n;
            }
            return n > 1 ? scale(acc, real(1) / static_cast<real>(n)) : acc;
        }
    }
    return Tensor::scalar(0);
}

std::string describe_terms(const LossReport& r) {
    std::ostringstream ss;
    auto put = [&ss](const char* name, const Tensor& t) {
        ss << name << "=" << (t.defined() ? fmt(t.item()) : "?") << " ";
    };
    put("sup_sr", r.sup_sr);
    put("sup_jr", r.sup_jr);
    put("con_sr", r.con_sr);
    put("con_jr", r.con_jr);
    put("kd", r.kd);
    return ss.str();
}

}  // namespace

LossReport train_step(TrainState& state, DualModel& model, const SegBatch& labeled,
                      const SegBatch& unlabeled, const LossWeights& weights,
                      const Thresholds& thr, AdamW& opt, const TrainStepOptions& opts) {
    if (labeled.batch_size() < 1) throw ContractError("train_step: empty labeled batch");
    weights.validate();

    GraphTape tape;
    LossReport report;
    try {
        auto out_l = model.forward_dual(labeled.images);
        const Tensor sup_sr = supervised_loss(out_l.senior_logits, labeled.labels);
        const Tensor sup_jr = supervised_loss(out_l.junior_logits, labeled.labels);

        Tensor con_sr = Tensor::scalar(0);
        Tensor con_jr = Tensor::scalar(0);
        real masked_fraction = 0;
        const bool has_unlabeled = unlabeled.batch_size() > 0;
        const bool need_unlabeled_forward =
            has_unlabeled && (weights.lambda2 > 0 ||
                              (weights.lambda3 > 0 && opts.kd_scope != KdScope::kLabeled));

        ForwardOutput out_u;
        if (need_unlabeled_forward) {
            out_u = model.forward_dual(unlabeled.images);
            if (weights.lambda2 > 0) {
                // cross supervision: each branch learns from the peer's labels
                const PseudoLabels pseudo_sr = make_pseudo_labels(out_u.senior_logits, thr.conf_tau);
                const PseudoLabels pseudo_jr = make_pseudo_labels(out_u.junior_logits, thr.conf_tau);
                con_sr = consistency_loss(out_u.senior_logits, pseudo_jr);
                con_jr = consistency_loss(out_u.junior_logits, pseudo_sr);
                const auto kept = pseudo_sr.mask.count_true() + pseudo_jr.mask.count_true();
                const auto total_px = pseudo_sr.mask.size() + pseudo_jr.mask.size();
                masked_fraction =
                    real(1) - static_cast<real>(kept) / static_cast<real>(total_px);
            }
        }

        Tensor kd = Tensor::scalar(0);
        if (weights.lambda3 > 0) {
            kd = kd_for_scope(&out_l, need_unlabeled_forward ? &out_u : nullptr, thr, opts);
        }

        report = total_loss(sup_sr, sup_jr, con_sr, con_jr, kd, weights);
        report.masked_fraction = masked_fraction;
    } catch (const ValueError& e) {
        throw TrainError("non-finite loss at iter " + std::to_string(state.iter) + " (" +
                         e.what() + "); terms so far: " + describe_terms(report));
    }

    if (report.total.requires_grad()) {
        tape.backward(report.total);
    }
    const real lr =
        poly_lr(state.optim.base_lr, state.iter, state.optim.total_iters, state.optim.poly_power);
    opt.step(lr);
    opt.zero_grad();
    ++state.iter;
    return report;
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const RunConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    state_.seed = cfg_.seed;
    model_ = std::make_unique<DualModel>(cfg_.model_config(), cfg_.seed);
    const SplitManifest split = make_split(cfg_.dataset_size, cfg_.ratio, cfg_.seed);
    stream_ = std::make_unique<BatchStream>(cfg_.scene_spec(), split, cfg_.augment_config(),
                                            cfg_.seed);
    state_.optim = cfg_.optim_config();
    state_.optim.total_iters =
        std::max<long>(1, cfg_.epochs * stream_->steps_per_epoch(cfg_.batch_size));
    opt_ = std::make_unique<AdamW>(model_->params(), state_.optim);
}

long Trainer::steps_per_epoch() const { return stream_->steps_per_epoch(cfg_.batch_size); }

real Trainer::current_lr() const {
    return poly_lr(state_.optim.base_lr, state_.iter, state_.optim.total_iters,
                   state_.optim.poly_power);
}

LossReport Trainer::step() {
    StepBatches batches = stream_->next(cfg_.batch_size);
    TrainStepOptions opts{cfg_.kd_scope(), cfg_.kd_detach};
    LossReport report = train_step(state_, *model_, batches.labeled, batches.unlabeled,
                                   cfg_.loss_weights(), cfg_.thresholds(), *opt_, opts);
    state_.epoch = stream_->epoch();
    return report;
}

EvalResult Trainer::evaluate(std::vector<IntMap>* predictions) const {
    const SceneSpec spec = cfg_.scene_spec();
    const int base = cfg_.dataset_size;
    SlidingWindowConfig swc{cfg_.window, cfg_.stride, cfg_.prob_average};
    return evaluate_junior(
        *model_, cfg_.val_size, [&spec, base](int i) { return generate_scene(spec, base + i); },
        swc, model_->config().junior.output_stride(), eval_threads_from_env(), predictions);
}

EvalResult Trainer::evaluate_senior_branch() const {
    const SceneSpec spec = cfg_.scene_spec();
    const int k = cfg_.num_classes;
    ConfusionMatrix cm(k);
    for (int i = 0; i < cfg_.val_size; ++i) {
        const SegSample s = generate_scene(spec, cfg_.dataset_size + i);
        const Tensor image = Tensor::from_values(
            {1, 3, s.h, s.w}, std::vector<real>(s.image.begin(), s.image.end()));
        // senior inference consumes junior features through the fusion path
        const auto out = model_->forward_dual(image);
        cm.accumulate(argmax_axis(out.senior_logits, 1), IntMap{{1, s.h, s.w}, s.labels});
    }
    EvalResult res{cm.miou(), cm.per_class_iou(), cm};
    return res;
}

void Trainer::save_checkpoint(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    write_records(os, model_->to_records());
    os << kTrainMagic << " " << state_.iter << " " << state_.epoch << " " << state_.seed
       << "\n";
    opt_->serialize(os);
    os << "\n";
    stream_->serialize(os);
    if (!os) throw DataError("checkpoint write failed: " + path);
}

void Trainer::load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    model_->load_records(read_records(is));
    std::string tag;
    if (!(is >> tag >> state_.iter >> state_.epoch >> state_.seed) || tag != kTrainMagic) {
        throw DataError("checkpoint: bad training section");
    }
    opt_->restore(is);
    stream_->restore(is);
}

// ---------------------------------------------------------------------------
// Experiment driver

int eval_threads_from_env() {
    int threads = static_cast<int>(std::thread::hardware_concurrency());
    if (threads < 1) threads = 1;
    threads = std::min(threads, 4);
    if (const char* env = std::getenv("SEGKC_THREADS")) {
        try {
            threads = std::max(1, std::min(64, std::stoi(env)));
        } catch (...) {
            throw ConfigError("SEGKC_THREADS must be an integer");
        }
    }
    return threads;
}

ExperimentResult run_experiment(const RunConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    {
        std::ofstream os(fs::path(out_dir) / "config.resolved");
        if (!os) throw DataError("cannot write config.resolved under " + out_dir);
        write_resolved_config(os, cfg);
    }

    Trainer trainer(cfg);
    const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
    std::ofstream csv(metrics_path);
    if (!csv) throw DataError("cannot write metrics.csv under " + out_dir);
    csv << "iter,epoch,lr,sup_sr,sup_jr,con_sr,con_jr,kd,total,masked_fraction,miou_junior\n";

    const long steps_per_epoch = trainer.steps_per_epoch();
    const long total = cfg.epochs * steps_per_epoch;
    const long eval_every = cfg.eval_interval > 0 ? cfg.eval_interval : steps_per_epoch;

    double last_miou = 0;
    if (total == 0) {
        last_miou = trainer.evaluate().miou;
        csv << "0,0,0,0,0,0,0,0,0,0," << fmt(static_cast<real>(last_miou)) << "\n";
        std::printf("epoch 0 iter 0 junior mIoU %.4f (evaluation only)\n", last_miou);
    }

    for (long it = 0; it < total; ++it) {
        const real lr = trainer.current_lr();
        const LossReport report = trainer.step();
        const bool eval_now = ((it + 1) % eval_every == 0) || (it + 1 == total);
        std::string miou_cell;
        if (eval_now) {
            last_miou = trainer.evaluate().miou;
            miou_cell = fmt(static_cast<real>(last_miou));
        }
        csv << trainer.iter() << "," << trainer.epoch() << "," << fmt(lr) << ","
            << fmt(report.sup_sr.item()) << "," << fmt(report.sup_jr.item()) << ","
            << fmt(report.con_sr.item()) << "," << fmt(report.con_jr.item()) << ","
            << fmt(report.kd.item()) << "," << fmt(report.total.item()) << ","
            << fmt(report.masked_fraction) << "," << miou_cell << "\n";
        if (eval_now && (it + 1) % steps_per_epoch == 0) {
            std::printf("epoch %ld iter %ld junior mIoU %.4f\n",
                        (it + 1) / steps_per_epoch, trainer.iter(), last_miou);
        }
    }
    csv.close();

    ExperimentResult result;
    result.final_miou_junior = last_miou;
    result.metrics_csv = metrics_path;
    result.checkpoint = (fs::path(out_dir) / "ckpt.final").string();
    trainer.save_checkpoint(result.checkpoint);

    if (cfg.eval_senior) {
        result.final_miou_senior = trainer.evaluate_senior_branch().miou;
        std::printf("senior branch mIoU %.4f\n", result.final_miou_senior);
    }

    if (cfg.dump_preds) {
        std::vector<IntMap> preds;
        trainer.evaluate(&preds);
        const fs::path pred_dir = fs::path(out_dir) / "preds";
        fs::create_directories(pred_dir);
        for (std::size_t i = 0; i < preds.size(); ++i) {
            std::vector<std::uint8_t> gray(preds[i].v.size());
            for (std::size_t p = 0; p < gray.size(); ++p) {
                gray[p] = static_cast<std::uint8_t>(preds[i].v[p]);
            }
            char name[32];
            std::snprintf(name, sizeof(name), "val_%05zu.pgm", i);
            write_pgm((pred_dir / name).string(), preds[i].shape[1], preds[i].shape[2], gray);
        }
    }
    return result;
}

}  // namespace segkc
