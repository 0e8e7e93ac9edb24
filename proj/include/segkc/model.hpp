#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "segkc/tensor.hpp"

namespace segkc {

/// Convolutional encoder: num_stages stages, each one stride-2 convolution +
/// ReLU. Stage i emits base_width * 2^i channels, so the output stride is
/// 2^num_stages and the deepest feature map has base_width * 2^(num_stages-1)
/// channels.
struct EncoderConfig {
    int base_width = 8;
    int num_stages = 3;
    int kernel_size = 3;

    void validate() const;
    int output_stride() const { return 1 << num_stages; }
    int stage_channels(int stage) const { return base_width << stage; }
};

enum class FusionMode { kAdd, kConcat };
enum class Branch { kSenior, kJunior };

struct DualModelConfig {
    EncoderConfig senior{16, 3, 3};
    EncoderConfig junior{8, 3, 3};
    int num_classes = 4;
    FusionMode fusion = FusionMode::kAdd;
    /// Detach junior features before fusing them into the senior, so the
    /// senior's losses do not reach the junior encoder through the fusion path.
    bool fusion_detach = true;

    void validate() const;
};

struct Param {
    std::string name;
    Tensor tensor;
    bool decoder = false;  // classifier heads + fusion projections
};

struct ForwardOutput {
    Tensor senior_logits;
    Tensor junior_logits;
    std::vector<Tensor> junior_features;
};

/// Named flat array for checkpoint serialization.
struct Record {
    std::string name;
    std::vector<int> shape;
    std::vector<real> values;
};

void write_records(std::ostream& os, const std::vector<Record>& records);
std::vector<Record> read_records(std::istream& is);

/// Senior/junior network pair with per-stage junior-to-senior feature fusion.
/// The junior path never reads senior state, so the junior is deployable with
/// the senior weights absent.
class DualModel {
public:
    DualModel(const DualModelConfig& cfg, std::uint64_t seed);

    /// Full co-training forward: junior first, then senior with the junior's
    /// projected per-stage features merged in. Both logits are at input
    /// resolution.
    ForwardOutput forward_dual(const Tensor& images) const;

    /// Junior-only inference path; never records on a tape.
    Tensor forward_junior(const Tensor& images) const;

    /// Single branch without any fusion; diagnostic path.
    Tensor forward_no_fusion(Branch branch, const Tensor& images) const;

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    const DualModelConfig& config() const { return cfg_; }

    /// Encoder + classifier weights of one branch (fusion excluded).
    std::size_t parameter_count(Branch branch) const;
    std::size_t parameter_count() const;

    std::vector<Record> to_records() const;
    /// Copies matching records into the parameters. With junior_only, only
    /// "junior.*" records are consumed and everything else is left untouched.
    void load_records(const std::vector<Record>& records, bool junior_only = false);

    void save(const std::string& path) const;
    void load(const std::string& path, bool junior_only = false);

private:
    struct Layer {
        int weight_idx = -1;
        int bias_idx = -1;
    };
    struct BranchNet {
        std::vector<Layer> stages;
        Layer head;
    };

    Tensor layer_forward(const Layer& layer, const Tensor& x, int stride, int padding) const;
    std::vector<Tensor> encode(const BranchNet& net, const EncoderConfig& enc_cfg,
                               const Tensor& x, const std::vector<Tensor>* fuse_src) const;
    Tensor classify(const BranchNet& net, const Tensor& deep, int out_h, int out_w) const;
    void check_input(const Tensor& images) const;

    DualModelConfig cfg_;
    std::vector<Param> params_;
    BranchNet senior_;
    BranchNet junior_;
    std::vector<Layer> fusion_;
};

}  // namespace segkc
