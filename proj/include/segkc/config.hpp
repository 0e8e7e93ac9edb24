#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "segkc/data.hpp"
#include "segkc/losses.hpp"
#include "segkc/model.hpp"
#include "segkc/optim.hpp"

namespace segkc {

enum class KdScope { kUnlabeled, kLabeled, kBoth };

/// Complete description of one run. Every field has a flat dotted config key;
/// see config.cpp for the schema. Unknown keys and invalid values are
/// rejected with the field name.
struct RunConfig {
    std::uint64_t seed = 1;

    // data.*
    int image_size = 64;
    int num_classes = 4;
    int dataset_size = 1464;
    int val_size = 128;
    std::string ratio = "1/8";
    int shapes_min = 1;
    int shapes_max = 3;
    double noise_sigma = 0.18;
    bool augment = true;
    int crop_size = 0;  // 0 = no crop

    // model.*
    int junior_width = 8;
    int senior_width = 16;
    int num_stages = 3;
    int kernel_size = 3;
    std::string fusion = "add";  // add | concat
    bool fusion_detach = true;

    // loss.*
    double lambda1 = 1.0;
    double lambda2 = 1.0;
    double lambda3 = 1.0;
    double conf_tau = 0.95;
    double kd_temperature = 2.0;
    bool kd_detach = true;
    std::string kd_on = "unlabeled";  // labeled | unlabeled | both

    // optim.*
    double base_lr = 1e-3;
    double decoder_lr_multiplier = 40.0;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double poly_power = 0.9;
    double clip_grad_norm = 0.0;

    // train.*
    int epochs = 4;
    int batch_size = 4;
    int eval_interval = 0;  // iterations between evals; 0 = once per epoch
    bool eval_senior = false;

    // eval.*
    int window = 0;  // 0 = full image
    int stride = 0;  // 0 = window / 2
    bool prob_average = false;
    bool dump_preds = false;

    void validate() const;

    SceneSpec scene_spec() const;
    DualModelConfig model_config() const;
    LossWeights loss_weights() const;
    Thresholds thresholds() const;
    KdScope kd_scope() const;
    AugmentConfig augment_config() const;
    /// OptimConfig with total_iters left at 1; the trainer fills it in.
    OptimConfig optim_config() const;
};

/// Parses `key = value` lines; '#' starts a comment. Unknown keys are errors.
RunConfig parse_config_file(const std::string& path);
void apply_override(RunConfig& cfg, const std::string& key, const std::string& value);
void write_resolved_config(std::ostream& os, const RunConfig& cfg);
std::vector<std::string> config_keys();

struct PresetRun {
    std::string name;
    RunConfig config;
};

/// Ablation presets: "table5" toggles the loss terms, "table6" compares
/// heterogeneous vs homogeneous widths, "table7" scales the senior width.
std::vector<PresetRun> make_preset(const std::string& preset, const RunConfig& base);
bool is_known_preset(const std::string& preset);

}  // namespace segkc
