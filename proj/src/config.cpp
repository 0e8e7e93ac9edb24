#include "segkc/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

namespace segkc {

namespace {

struct FieldDef {
    std::string key;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
    std::istringstream ss(value);
    T out;
    ss >> out;
    if (ss.fail() || !(ss >> std::ws).eof()) {
        throw ConfigError("invalid value for " + key + ": '" + value + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("invalid boolean for " + key + ": '" + value + "'");
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

const std::vector<FieldDef>& fields() {
    static const std::vector<FieldDef> defs = [] {
        std::vector<FieldDef> f;
        auto add_int = [&f](const std::string& key, int RunConfig::* member) {
            f.push_back({key,
                         [key, member](RunConfig& c, const std::string& v) {
                             c.*member = parse_number<int>(key, v);
                         },
                         [member](const RunConfig& c) { return std::to_string(c.*member); }});
        };
        auto add_double = [&f](const std::string& key, double RunConfig::* member) {
            f.push_back({key,
                         [key, member](RunConfig& c, const std::string& v) {
                             c.*member = parse_number<double>(key, v);
                         },
                         [member](const RunConfig& c) { return format_double(c.*member); }});
        };
        auto add_bool = [&f](const std::string& key, bool RunConfig::* member) {
            f.push_back({key,
                         [key, member](RunConfig& c, const std::string& v) {
                             c.*member = parse_bool(key, v);
                         },
                         [member](const RunConfig& c) {
                             return c.*member ? std::string("true") : std::string("false");
                         }});
        };
        auto add_string = [&f](const std::string& key, std::string RunConfig::* member) {
            f.push_back({key,
                         [member](RunConfig& c, const std::string& v) { c.*member = v; },
                         [member](const RunConfig& c) { return c.*member; }});
        };

        f.push_back({"seed",
                     [](RunConfig& c, const std::string& v) {
                         c.seed = parse_number<std::uint64_t>("seed", v);
                     },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});

        add_int("data.image_size", &RunConfig::image_size);
        add_int("data.num_classes", &RunConfig::num_classes);
        add_int("data.dataset_size", &RunConfig::dataset_size);
        add_int("data.val_size", &RunConfig::val_size);
        add_string("data.ratio", &RunConfig::ratio);
        add_int("data.shapes_min", &RunConfig::shapes_min);
        add_int("data.shapes_max", &RunConfig::shapes_max);
        add_double("data.noise_sigma", &RunConfig::noise_sigma);
        add_bool("data.augment", &RunConfig::augment);
        add_int("data.crop_size", &RunConfig::crop_size);

        add_int("model.junior_width", &RunConfig::junior_width);
        add_int("model.senior_width", &RunConfig::senior_width);
        add_int("model.num_stages", &RunConfig::num_stages);
        add_int("model.kernel_size", &RunConfig::kernel_size);
        add_string("model.fusion", &RunConfig::fusion);
        add_bool("model.fusion_detach", &RunConfig::fusion_detach);

        add_double("loss.lambda1", &RunConfig::lambda1);
        add_double("loss.lambda2", &RunConfig::lambda2);
        add_double("loss.lambda3", &RunConfig::lambda3);
        add_double("loss.conf_tau", &RunConfig::conf_tau);
        add_double("loss.kd_temperature", &RunConfig::kd_temperature);
        add_bool("loss.kd_detach", &RunConfig::kd_detach);
        add_string("loss.kd_on", &RunConfig::kd_on);

        add_double("optim.base_lr", &RunConfig::base_lr);
        add_double("optim.decoder_lr_multiplier", &RunConfig::decoder_lr_multiplier);
        add_double("optim.weight_decay", &RunConfig::weight_decay);
        add_double("optim.beta1", &RunConfig::beta1);
        add_double("optim.beta2", &RunConfig::beta2);
        add_double("optim.eps", &RunConfig::eps);
        add_double("optim.poly_power", &RunConfig::poly_power);
        add_double("optim.clip_grad_norm", &RunConfig::clip_grad_norm);

        add_int("train.epochs", &RunConfig::epochs);
        add_int("train.batch_size", &RunConfig::batch_size);
        add_int("train.eval_interval", &RunConfig::eval_interval);
        add_bool("train.eval_senior", &RunConfig::eval_senior);

        add_int("eval.window", &RunConfig::window);
        add_int("eval.stride", &RunConfig::stride);
        add_bool("eval.prob_average", &RunConfig::prob_average);
        add_bool("eval.dump_preds", &RunConfig::dump_preds);
        return f;
    }();
    return defs;
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : fields()) {
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    }
    throw ConfigError("unknown config key: " + key);
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected `key = value`");
        }
        apply_override(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

void write_resolved_config(std::ostream& os, const RunConfig& cfg) {
    for (const auto& f : fields()) os << f.key << " = " << f.get(cfg) << "\n";
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : fields()) keys.push_back(f.key);
    return keys;
}

void RunConfig::validate() const {
    scene_spec().validate();
    model_config().validate();
    loss_weights().validate();
    const int out_stride = 1 << num_stages;
    if (image_size % out_stride != 0) {
        throw ConfigError("data.image_size must be divisible by 2^model.num_stages");
    }
    if (crop_size != 0 && (crop_size % out_stride != 0 || crop_size > image_size)) {
        throw ConfigError("data.crop_size must be a multiple of the output stride and fit");
    }
    if (dataset_size < 1) throw ConfigError("data.dataset_size must be >= 1");
    if (val_size < 0) throw ConfigError("data.val_size must be >= 0");
    if (conf_tau < 0 || conf_tau > 1) throw ConfigError("loss.conf_tau must lie in [0,1]");
    if (!(kd_temperature > 0)) throw ConfigError("loss.kd_temperature must be positive");
    if (kd_on != "labeled" && kd_on != "unlabeled" && kd_on != "both") {
        throw ConfigError("loss.kd_on must be labeled, unlabeled or both");
    }
    if (fusion != "add" && fusion != "concat") {
        throw ConfigError("model.fusion must be add or concat");
    }
    if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
    if (eval_interval < 0) throw ConfigError("train.eval_interval must be >= 0");
    if (window < 0 || stride < 0) throw ConfigError("eval.window/stride must be >= 0");
    if (window > 0 && stride > window) throw ConfigError("eval.stride must be <= eval.window");
    optim_config().validate();
    // make_split validates the ratio name
    (void)make_split(dataset_size, ratio, seed);
}

SceneSpec RunConfig::scene_spec() const {
    SceneSpec s;
    s.image_h = image_size;
    s.image_w = image_size;
    s.num_classes = num_classes;
    s.shapes_min = shapes_min;
    s.shapes_max = shapes_max;
    s.noise_sigma = noise_sigma;
    s.seed = seed;
    return s;
}

DualModelConfig RunConfig::model_config() const {
    DualModelConfig m;
    m.senior = EncoderConfig{senior_width, num_stages, kernel_size};
    m.junior = EncoderConfig{junior_width, num_stages, kernel_size};
    m.num_classes = num_classes;
    m.fusion = fusion == "concat" ? FusionMode::kConcat : FusionMode::kAdd;
    m.fusion_detach = fusion_detach;
    return m;
}

LossWeights RunConfig::loss_weights() const {
    return LossWeights{static_cast<real>(lambda1), static_cast<real>(lambda2),
                       static_cast<real>(lambda3)};
}

Thresholds RunConfig::thresholds() const {
    return Thresholds{static_cast<real>(conf_tau), static_cast<real>(kd_temperature)};
}

KdScope RunConfig::kd_scope() const {
    if (kd_on == "labeled") return KdScope::kLabeled;
    if (kd_on == "both") return KdScope::kBoth;
    return KdScope::kUnlabeled;
}

AugmentConfig RunConfig::augment_config() const { return AugmentConfig{augment, crop_size}; }

OptimConfig RunConfig::optim_config() const {
    OptimConfig o;
    o.base_lr = static_cast<real>(base_lr);
    o.decoder_lr_multiplier = static_cast<real>(decoder_lr_multiplier);
    o.weight_decay = static_cast<real>(weight_decay);
    o.beta1 = static_cast<real>(beta1);
    o.beta2 = static_cast<real>(beta2);
    o.eps = static_cast<real>(eps);
    o.poly_power = static_cast<real>(poly_power);
    o.clip_grad_norm = static_cast<real>(clip_grad_norm);
    o.total_iters = 1;
    return o;
}

bool is_known_preset(const std::string& preset) {
    return preset == "table5" || preset == "table6" || preset == "table7";
}

std::vector<PresetRun> make_preset(const std::string& preset, const RunConfig& base) {
    std::vector<PresetRun> runs;
    if (preset == "table5") {
        RunConfig sup = base;
        sup.lambda2 = 0;
        sup.lambda3 = 0;
        RunConfig sup_con = base;
        sup_con.lambda3 = 0;
        RunConfig full = base;
        runs.push_back({"sup", sup});
        runs.push_back({"sup_con", sup_con});
        runs.push_back({"sup_con_kd", full});
    } else if (preset == "table6") {
        RunConfig homo = base;
        homo.senior_width = base.junior_width;
        RunConfig hetero = base;
        hetero.senior_width = base.junior_width * 2;
        runs.push_back({"homo", homo});
        runs.push_back({"hetero", hetero});
    } else if (preset == "table7") {
        RunConfig s2 = base;
        s2.senior_width = base.junior_width * 2;
        RunConfig s4 = base;
        s4.senior_width = base.junior_width * 4;
        runs.push_back({"senior2x", s2});
        runs.push_back({"senior4x", s4});
    } else {
        throw ConfigError("unknown preset: " + preset);
    }
    return runs;
}

}  // namespace segkc
