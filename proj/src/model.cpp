#include "segkc/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace segkc {

namespace {

constexpr char kRecordMagic[8] = {'S', 'K', 'C', 'R', 'E', 'C', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw DataError("checkpoint: truncated stream");
    return v;
}

std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!is) throw DataError("checkpoint: truncated stream");
    return v;
}

Tensor he_uniform(const std::vector<int>& shape, int fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::size_t n = 1;
    for (int d : shape) n *= static_cast<std::size_t>(d);
    std::vector<real> vals(n);
    for (auto& v : vals) v = static_cast<real>(rng.uniform(-limit, limit));
    return Tensor::from_values(shape, std::move(vals), true);
}

}  // namespace

void EncoderConfig::validate() const {
    if (base_width < 1) throw ConfigError("encoder base_width must be >= 1");
    if (num_stages < 1) throw ConfigError("encoder num_stages must be >= 1");
    if (kernel_size < 1 || kernel_size % 2 == 0) {
        throw ConfigError("encoder kernel_size must be odd and positive");
    }
}

void DualModelConfig::validate() const {
    senior.validate();
    junior.validate();
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (senior.num_stages != junior.num_stages) {
        throw ConfigError("senior and junior must use the same num_stages");
    }
    if (senior.base_width < junior.base_width) {
        throw ConfigError("senior base_width must be >= junior base_width");
    }
}

// ---------------------------------------------------------------------------
// Record IO

void write_records(std::ostream& os, const std::vector<Record>& records) {
    os.write(kRecordMagic, sizeof(kRecordMagic));
    write_u32(os, static_cast<std::uint32_t>(sizeof(real)));
    write_u64(os, records.size());
    for (const auto& r : records) {
        write_u32(os, static_cast<std::uint32_t>(r.name.size()));
        os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
        write_u32(os, static_cast<std::uint32_t>(r.shape.size()));
        for (int d : r.shape) write_u32(os, static_cast<std::uint32_t>(d));
        write_u64(os, r.values.size());
        os.write(reinterpret_cast<const char*>(r.values.data()),
                 static_cast<std::streamsize>(r.values.size() * sizeof(real)));
    }
    if (!os) throw DataError("checkpoint: write failed");
}

std::vector<Record> read_records(std::istream& is) {
    char magic[sizeof(kRecordMagic)];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kRecordMagic, sizeof(magic)) != 0) {
        throw DataError("checkpoint: bad magic (expected SKCREC01)");
    }
    if (read_u32(is) != sizeof(real)) {
        throw DataError("checkpoint: scalar width differs from this build");
    }
    const std::uint64_t count = read_u64(is);
    std::vector<Record> records(count);
    for (auto& r : records) {
        const std::uint32_t name_len = read_u32(is);
        r.name.resize(name_len);
        is.read(r.name.data(), name_len);
        const std::uint32_t ndim = read_u32(is);
        r.shape.resize(ndim);
        for (auto& d : r.shape) d = static_cast<int>(read_u32(is));
        const std::uint64_t nvals = read_u64(is);
        r.values.resize(nvals);
        is.read(reinterpret_cast<char*>(r.values.data()),
                static_cast<std::streamsize>(nvals * sizeof(real)));
        if (!is) throw DataError("checkpoint: truncated record " + r.name);
    }
    return records;
}

// ---------------------------------------------------------------------------
// DualModel

DualModel::DualModel(const DualModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(Rng::derive(seed, 0x6d6f64656cULL));  // "model"

    auto add_param = [&](const std::string& name, Tensor t, bool decoder) {
        params_.push_back(Param{name, std::move(t), decoder});
        return static_cast<int>(params_.size() - 1);
    };

    auto build_branch = [&](const char* prefix, const EncoderConfig& enc) {
        BranchNet net;
        int in_ch = 3;
        for (int s = 0; s < enc.num_stages; ++s) {
            const int out_ch = enc.stage_channels(s);
            const int k = enc.kernel_size;
            std::ostringstream base;
            base << prefix << ".enc.stage" << s;
            Layer layer;
            layer.weight_idx = add_param(base.str() + ".weight",
                                         he_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng),
                                         false);
            layer.bias_idx =
                add_param(base.str() + ".bias", Tensor::zeros({out_ch}, true), false);
            net.stages.push_back(layer);
            in_ch = out_ch;
        }
        net.head.weight_idx =
            add_param(std::string(prefix) + ".head.weight",
                      he_uniform({cfg_.num_classes, in_ch, 1, 1}, in_ch, rng), true);
        net.head.bias_idx = add_param(std::string(prefix) + ".head.bias",
                                      Tensor::zeros({cfg_.num_classes}, true), true);
        return net;
    };

    junior_ = build_branch("junior", cfg_.junior);
    senior_ = build_branch("senior", cfg_.senior);

    for (int s = 0; s < cfg_.senior.num_stages; ++s) {
        const int cs = cfg_.senior.stage_channels(s);
        const int cj = cfg_.junior.stage_channels(s);
        std::ostringstream base;
        base << "fusion.stage" << s;
        Layer layer;
        if (cfg_.fusion == FusionMode::kAdd) {
            // Zero projection: fusion is an exact no-op at initialization.
            layer.weight_idx =
                add_param(base.str() + ".weight", Tensor::zeros({cs, cj, 1, 1}, true), true);
        } else {
            // Identity on the senior block, zero on the junior block.
            std::vector<real> w(static_cast<std::size_t>(cs) * (cs + cj), real(0));
            for (int o = 0; o < cs; ++o) {
                w[static_cast<std::size_t>(o) * (cs + cj) + o] = real(1);
            }
            layer.weight_idx = add_param(base.str() + ".weight",
                                         Tensor::from_values({cs, cs + cj, 1, 1}, std::move(w),
                                                             true),
                                         true);
        }
        layer.bias_idx = add_param(base.str() + ".bias", Tensor::zeros({cs}, true), true);
        fusion_.push_back(layer);
    }
}

void DualModel::check_input(const Tensor& images) const {
    if (images.ndim() != 4 || images.dim(1) != 3) {
        throw ShapeError("model input must be [N,3,H,W]");
    }
    const int stride = cfg_.junior.output_stride();
    if (images.dim(2) % stride != 0 || images.dim(3) % stride != 0) {
        throw ConfigError("input spatial dims must be divisible by the encoder output stride");
    }
}

Tensor DualModel::layer_forward(const Layer& layer, const Tensor& x, int stride,
                                int padding) const {
    const Tensor& w = params_[static_cast<std::size_t>(layer.weight_idx)].tensor;
    const Tensor& b = params_[static_cast<std::size_t>(layer.bias_idx)].tensor;
    return bias_add(conv2d(x, w, stride, padding), b);
}

std::vector<Tensor> DualModel::encode(const BranchNet& net, const EncoderConfig& enc_cfg,
                                      const Tensor& x, const std::vector<Tensor>* fuse_src) const {
    std::vector<Tensor> feats;
    Tensor cur = x;
    const int pad = (enc_cfg.kernel_size - 1) / 2;
    for (int s = 0; s < enc_cfg.num_stages; ++s) {
        Tensor f = relu(layer_forward(net.stages[static_cast<std::size_t>(s)], cur, 2, pad));
        if (fuse_src != nullptr) {
            Tensor jf = (*fuse_src)[static_cast<std::size_t>(s)];
            if (cfg_.fusion_detach) jf = stop_gradient(jf);
            const Layer& proj = fusion_[static_cast<std::size_t>(s)];
            if (cfg_.fusion == FusionMode::kAdd) {
                f = add(f, layer_forward(proj, jf, 1, 0));
            } else {
                f = layer_forward(proj, concat(f, jf, 1), 1, 0);
            }
        }
        feats.push_back(f);
        cur = f;
    }
    return feats;
}

Tensor DualModel::classify(const BranchNet& net, const Tensor& deep, int out_h,
                           int out_w) const {
    return bilinear_resize(layer_forward(net.head, deep, 1, 0), out_h, out_w);
}

ForwardOutput DualModel::forward_dual(const Tensor& images) const {
    check_input(images);
    const int h = images.dim(2), w = images.dim(3);
    ForwardOutput out;
    out.junior_features = encode(junior_, cfg_.junior, images, nullptr);
    out.junior_logits = classify(junior_, out.junior_features.back(), h, w);
    const auto senior_feats = encode(senior_, cfg_.senior, images, &out.junior_features);
    out.senior_logits = classify(senior_, senior_feats.back(), h, w);
    return out;
}

Tensor DualModel::forward_junior(const Tensor& images) const {
    check_input(images);
    TapePause pause;
    const auto feats = encode(junior_, cfg_.junior, images, nullptr);
    return classify(junior_, feats.back(), images.dim(2), images.dim(3));
}

Tensor DualModel::forward_no_fusion(Branch branch, const Tensor& images) const {
    check_input(images);
    const BranchNet& net = branch == Branch::kSenior ? senior_ : junior_;
    const EncoderConfig& enc = branch == Branch::kSenior ? cfg_.senior : cfg_.junior;
    const auto feats = encode(net, enc, images, nullptr);
    return classify(net, feats.back(), images.dim(2), images.dim(3));
}

std::size_t DualModel::parameter_count(Branch branch) const {
    const char* prefix = branch == Branch::kSenior ? "senior." : "junior.";
    std::size_t n = 0;
    for (const auto& p : params_) {
        if (p.name.starts_with(prefix)) n += p.tensor.size();
    }
    return n;
}

std::size_t DualModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
}

std::vector<Record> DualModel::to_records() const {
    std::vector<Record> records;
    records.reserve(params_.size());
    for (const auto& p : params_) {
        records.push_back(Record{p.name, p.tensor.shape(),
                                 std::vector<real>(p.tensor.values().begin(),
                                                   p.tensor.values().end())});
    }
    return records;
}

void DualModel::load_records(const std::vector<Record>& records, bool junior_only) {
    for (auto& p : params_) {
        if (junior_only && !p.name.starts_with("junior.")) continue;
        const Record* found = nullptr;
        for (const auto& r : records) {
            if (r.name == p.name) {
                found = &r;
                break;
            }
        }
        if (found == nullptr) throw DataError("checkpoint: missing record " + p.name);
        if (found->shape != p.tensor.shape()) {
            throw DataError("checkpoint: shape mismatch for " + p.name);
        }
        std::copy(found->values.begin(), found->values.end(), p.tensor.values_mut().begin());
    }
}

void DualModel::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open checkpoint for writing: " + path);
    write_records(os, to_records());
}

void DualModel::load(const std::string& path, bool junior_only) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint: " + path);
    load_records(read_records(is), junior_only);
}

}  // namespace segkc
