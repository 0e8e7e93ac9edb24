#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "segkc/config.hpp"
#include "segkc/data.hpp"
#include "segkc/eval.hpp"
#include "segkc/trainer.hpp"

namespace fs = std::filesystem;
using namespace segkc;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTrain = 4;

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "runs/out";
    std::vector<std::string> overrides;  // key=value
    std::optional<std::uint64_t> seed;
};

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg;
    if (!args.config_path.empty()) cfg = parse_config_file(args.config_path);
    for (const auto& kv : args.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        }
        apply_override(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (args.seed) cfg.seed = *args.seed;
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key = value config file");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--set", args.overrides, "override any config key (key=value), repeatable");
    cmd->add_option("--seed", args.seed, "run seed (overrides config)");
}

int cmd_gen_data(const CommonArgs& common, int size_override, const std::string& ratio_override,
                 int classes_override) {
    RunConfig cfg = resolve_config(common);
    if (size_override > 0) cfg.dataset_size = size_override;
    if (!ratio_override.empty()) cfg.ratio = ratio_override;
    if (classes_override > 0) cfg.num_classes = classes_override;
    cfg.validate();

    fs::create_directories(common.out_dir);
    const SceneSpec spec = cfg.scene_spec();
    const SplitManifest manifest = make_split(cfg.dataset_size, cfg.ratio, cfg.seed);
    {
        std::ofstream os(fs::path(common.out_dir) / "manifest.txt");
        if (!os) throw DataError("cannot write manifest under " + common.out_dir);
        manifest.serialize(os);
    }
    for (int i = 0; i < cfg.dataset_size; ++i) {
        const SegSample s = generate_scene(spec, i);
        char img_name[32], lbl_name[32];
        std::snprintf(img_name, sizeof(img_name), "img_%05d.ppm", i);
        std::snprintf(lbl_name, sizeof(lbl_name), "lbl_%05d.pgm", i);
        write_ppm((fs::path(common.out_dir) / img_name).string(), s.h, s.w,
                  image_to_u8(s.image));
        std::vector<std::uint8_t> gray(s.labels.size());
        for (std::size_t p = 0; p < gray.size(); ++p) {
            gray[p] = static_cast<std::uint8_t>(s.labels[p]);
        }
        write_pgm((fs::path(common.out_dir) / lbl_name).string(), s.h, s.w, gray);
    }
    std::printf("wrote %d samples and manifest to %s (%zu labeled ids)\n", cfg.dataset_size,
                common.out_dir.c_str(), manifest.labeled_ids.size());
    return 0;
}

int cmd_train(const CommonArgs& common, const std::string& preset, std::optional<int> epochs,
              std::optional<double> lambda3) {
    RunConfig cfg = resolve_config(common);
    if (epochs) cfg.epochs = *epochs;
    if (lambda3) cfg.lambda3 = *lambda3;

    if (preset.empty()) {
        const auto result = run_experiment(cfg, common.out_dir);
        std::printf("final junior mIoU %.4f\n", result.final_miou_junior);
        std::printf("metrics: %s\n", result.metrics_csv.c_str());
        return 0;
    }

    if (!is_known_preset(preset)) throw ConfigError("unknown preset: " + preset);
    const auto runs = make_preset(preset, cfg);
    fs::create_directories(common.out_dir);
    std::ofstream summary(fs::path(common.out_dir) / "summary.csv");
    if (!summary) throw DataError("cannot write summary.csv under " + common.out_dir);
    summary << "preset,run,seed,final_miou_junior\n";
    for (const auto& run : runs) {
        const std::string dir = (fs::path(common.out_dir) / run.name).string();
        std::printf("== %s/%s (seed %llu)\n", preset.c_str(), run.name.c_str(),
                    static_cast<unsigned long long>(run.config.seed));
        const auto result = run_experiment(run.config, dir);
        char miou[40];
        std::snprintf(miou, sizeof(miou), "%.17g", result.final_miou_junior);
        summary << preset << "," << run.name << "," << run.config.seed << "," << miou << "\n";
    }
    std::printf("summary: %s\n", (fs::path(common.out_dir) / "summary.csv").string().c_str());
    return 0;
}

int cmd_eval(const CommonArgs& common, const std::string& ckpt_path, const std::string& branch,
             bool no_sliding) {
    RunConfig cfg = resolve_config(common);
    if (no_sliding) {
        cfg.window = 0;
        cfg.stride = 0;
    }
    cfg.validate();

    DualModel model(cfg.model_config(), cfg.seed);
    const bool junior_only = branch != "senior";
    model.load(ckpt_path, junior_only);

    const SceneSpec spec = cfg.scene_spec();
    const int base = cfg.dataset_size;

    EvalResult result{0, {}, ConfusionMatrix(cfg.num_classes)};
    if (junior_only) {
        SlidingWindowConfig swc{cfg.window, cfg.stride, cfg.prob_average};
        result = evaluate_junior(
            model, cfg.val_size, [&spec, base](int i) { return generate_scene(spec, base + i); },
            swc, model.config().junior.output_stride(), eval_threads_from_env());
    } else {
        model.load(ckpt_path, false);
        ConfusionMatrix cm(cfg.num_classes);
        for (int i = 0; i < cfg.val_size; ++i) {
            const SegSample s = generate_scene(spec, base + i);
            const Tensor image = Tensor::from_values(
                {1, 3, s.h, s.w}, std::vector<real>(s.image.begin(), s.image.end()));
            const auto out = model.forward_dual(image);
            cm.accumulate(argmax_axis(out.senior_logits, 1), IntMap{{1, s.h, s.w}, s.labels});
        }
        result = EvalResult{cm.miou(), cm.per_class_iou(), cm};
    }

    std::printf("branch: %s\n", junior_only ? "junior" : "senior");
    for (std::size_t c = 0; c < result.per_class_iou.size(); ++c) {
        if (result.per_class_iou[c] < 0) {
            std::printf("class %zu IoU: absent\n", c);
        } else {
            std::printf("class %zu IoU: %.4f\n", c, result.per_class_iou[c]);
        }
    }
    std::printf("mIoU: %.4f\n", result.miou);

    fs::create_directories(common.out_dir);
    std::ofstream os(fs::path(common.out_dir) / "iou.csv");
    os << "class,iou\n";
    for (std::size_t c = 0; c < result.per_class_iou.size(); ++c) {
        if (result.per_class_iou[c] < 0) {
            os << c << ",absent\n";
        } else {
            char buf[40];
            std::snprintf(buf, sizeof(buf), "%.17g", result.per_class_iou[c]);
            os << c << "," << buf << "\n";
        }
    }
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", result.miou);
    os << "miou," << buf << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"SegKC co-training laboratory"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset on disk");
    add_common(gen, gen_args);
    int gen_size = 0, gen_classes = 0;
    std::string gen_ratio;
    gen->add_option("--size", gen_size, "dataset size");
    gen->add_option("--ratio", gen_ratio, "labeled split ratio (1/16, 1/8, 1/4, 1/2, full)");
    gen->add_option("--classes", gen_classes, "number of classes");

    auto* train = app.add_subcommand("train", "train a model or run an ablation preset");
    add_common(train, train_args);
    std::string preset;
    std::optional<int> epochs;
    std::optional<double> lambda3;
    train->add_option("--preset", preset, "table5, table6 or table7");
    train->add_option("--epochs", epochs, "override train.epochs");
    train->add_option("--lambda3", lambda3, "override loss.lambda3");

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(eval, eval_args);
    std::string ckpt, branch = "junior";
    bool no_sliding = false;
    eval->add_option("--ckpt", ckpt, "checkpoint path")->required();
    eval->add_option("--branch", branch, "junior (default) or senior");
    eval->add_flag("--no-sliding", no_sliding, "single full-image pass");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(gen_args, gen_size, gen_ratio, gen_classes);
        if (train->parsed()) return cmd_train(train_args, preset, epochs, lambda3);
        if (eval->parsed()) return cmd_eval(eval_args, ckpt, branch, no_sliding);
    } catch (const ConfigError& e) {
        std::cerr << e.what() << "\n";
        return kExitConfig;
    } catch (const DataError& e) {
        std::cerr << e.what() << "\n";
        return kExitData;
    } catch (const TrainError& e) {
        std::cerr << e.what() << "\n";
        return kExitTrain;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
