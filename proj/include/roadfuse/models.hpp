#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "roadfuse/autodiff.hpp"

namespace roadfuse {

enum class Backbone { unet, resunet, dlinknet };
enum class FusionStage { none, early, late1, late2 };
enum class FusionOp { concatenate, average, maximum, multiply };

std::string to_string(Backbone b);
std::string to_string(FusionStage s);
std::string to_string(FusionOp op);
Backbone parse_backbone(const std::string& s);
FusionStage parse_fusion_stage(const std::string& s);
FusionOp parse_fusion_op(const std::string& s);

inline constexpr int kSatelliteBands = 4;

struct BackboneSpec {
    Backbone kind = Backbone::unet;
    int depth = 4;
    int base_width = 64;
    int in_channels = 0;  // 0 = derived from the fusion stage

    bool operator==(const BackboneSpec&) const = default;
};

// Operator is ignored for none; early always concatenates the inputs.
struct FusionSpec {
    FusionStage stage = FusionStage::none;
    FusionOp op = FusionOp::concatenate;

    bool operator==(const FusionSpec&) const = default;
};

struct ModelSpec {
    BackboneSpec backbone;
    FusionSpec fusion;

    // Satellite-branch input channels implied by the stage (4 or 5).
    int satellite_in_channels() const;
    bool uses_gps() const { return fusion.stage != FusionStage::none; }
    std::string label() const;  // e.g. "resunet/late2/multiply"

    bool operator==(const ModelSpec&) const = default;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

// Table 1 operators on graph values. average/maximum/multiply need equal
// shapes; concatenate needs equal N, H, W and puts A's channels first.
template <class T>
Var fuse(Graph<T>& g, Var a, Var b, FusionOp op);

/**
 * Backbone(s) plus fusion wiring with a named parameter store.
 *
 * Parameter names are prefixed by stream: "sat." for the satellite (or
 * early-fused) backbone, "gps." for the trajectory backbone of late2, and
 * "fusion." for the concatenate projection head.
 */
template <class T>
class Model {
public:
    Model() = default;
    Model(ModelSpec spec, ParamStore<T> params) : spec_(std::move(spec)), params_(std::move(params)) {}

    const ModelSpec& spec() const noexcept { return spec_; }
    ParamStore<T>& params() noexcept { return params_; }
    const ParamStore<T>& params() const noexcept { return params_; }

    // Probability map N x 1 x H x W. gps must be present iff the stage is not none.
    Var forward(Graph<T>& g, Var satellite, std::optional<Var> gps);

    // Convenience single-pass inference.
    Tensor<T> predict(const Tensor<T>& satellite, const Tensor<T>* gps, Mode mode = Mode::eval);

    template <class U>
    Model<U> cast() const {
        return Model<U>(spec_, params_.template cast<U>());
    }

private:
    ModelSpec spec_;
    ParamStore<T> params_;
};

// Building blocks of the backbones, exposed for gradient certification.
enum class Block {
    plain,            // U-Net: (conv3x3, relu) x 2
    residual_unit,    // ResUnet: pre-activation (BN, relu, conv3x3) x 2 + shortcut
    basic_residual,   // D-Linknet encoder: conv-BN-relu, conv-BN, shortcut, relu
    dilated_center,   // D-Linknet bottleneck: dilations 1, 2, 4, 8 summed with the input
    linknet_decoder,  // D-Linknet decoder: 1x1 reduce, 2x transpose conv, 1x1 expand
};

// Applies one block under the name prefix "block."; parameters missing from
// `params` are created from `seed`. dilated_center keeps the input width.
template <class T>
Var apply_block(Graph<T>& g, ParamStore<T>& params, Block kind, Var x, int channels, std::uint64_t seed = 0);

// Builds the wiring and draws Kaiming fan-in normal weights from `seed`.
template <class T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed);

}  // namespace roadfuse
