#include "roadfuse/models.hpp"

#include <cmath>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

namespace roadfuse {

std::string to_string(Backbone b) {
    switch (b) {
        case Backbone::unet: return "unet";
        case Backbone::resunet: return "resunet";
        case Backbone::dlinknet: return "dlinknet";
    }
    return "?";
}

std::string to_string(FusionStage s) {
    switch (s) {
        case FusionStage::none: return "none";
        case FusionStage::early: return "early";
        case FusionStage::late1: return "late1";
        case FusionStage::late2: return "late2";
    }
    return "?";
}

std::string to_string(FusionOp op) {
    switch (op) {
        case FusionOp::concatenate: return "concatenate";
        case FusionOp::average: return "average";
        case FusionOp::maximum: return "maximum";
        case FusionOp::multiply: return "multiply";
    }
    return "?";
}

Backbone parse_backbone(const std::string& s) {
    if (s == "unet") return Backbone::unet;
    if (s == "resunet") return Backbone::resunet;
    if (s == "dlinknet") return Backbone::dlinknet;
    throw ConfigError("unknown backbone '" + s + "' (expected unet, resunet or dlinknet)");
}

FusionStage parse_fusion_stage(const std::string& s) {
    if (s == "none") return FusionStage::none;
    if (s == "early") return FusionStage::early;
    if (s == "late1") return FusionStage::late1;
    if (s == "late2") return FusionStage::late2;
    throw ConfigError("unknown fusion stage '" + s + "' (expected none, early, late1 or late2)");
}

FusionOp parse_fusion_op(const std::string& s) {
    if (s == "concatenate" || s == "concat") return FusionOp::concatenate;
    if (s == "average") return FusionOp::average;
    if (s == "maximum") return FusionOp::maximum;
    if (s == "multiply") return FusionOp::multiply;
    throw ConfigError("unknown fusion operator '" + s + "'");
}

int ModelSpec::satellite_in_channels() const {
    return fusion.stage == FusionStage::early ? kSatelliteBands + 1 : kSatelliteBands;
}

std::string ModelSpec::label() const {
    std::string out = to_string(backbone.kind) + "/" + to_string(fusion.stage);
    if (fusion.stage == FusionStage::late1 || fusion.stage == FusionStage::late2) out += "/" + to_string(fusion.op);
    return out;
}

nlohmann::json to_json(const ModelSpec& spec) {
    nlohmann::json j = {
        {"backbone",
         {{"kind", to_string(spec.backbone.kind)},
          {"depth", spec.backbone.depth},
          {"base_width", spec.backbone.base_width}}},
        {"fusion", {{"stage", to_string(spec.fusion.stage)}, {"operator", to_string(spec.fusion.op)}}}};
    if (spec.backbone.in_channels != 0) j["backbone"]["in_channels"] = spec.backbone.in_channels;
    return j;
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
    try {
        ModelSpec spec;
        const auto& b = j.at("backbone");
        spec.backbone.kind = parse_backbone(b.at("kind").get<std::string>());
        spec.backbone.depth = b.value("depth", 4);
        spec.backbone.base_width = b.value("base_width", 64);
        spec.backbone.in_channels = b.value("in_channels", 0);
        if (j.contains("fusion")) {
            const auto& f = j.at("fusion");
            spec.fusion.stage = parse_fusion_stage(f.value("stage", std::string("none")));
            spec.fusion.op = parse_fusion_op(f.value("operator", std::string("concatenate")));
        }
        return spec;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model spec: ") + e.what());
    }
}

template <class T>
Var fuse(Graph<T>& g, Var a, Var b, FusionOp op) {
    switch (op) {
        case FusionOp::concatenate: return concat_channels(g, a, b);
        case FusionOp::average: return average(g, a, b);
        case FusionOp::maximum: return maximum(g, a, b);
        case FusionOp::multiply: return multiply(g, a, b);
    }
    throw ConfigError("unknown fusion operator");
}

namespace {

// Parameter lookup for one forward pass. With an rng, missing parameters are
// created (the build pass); without one they are an error.
template <class T>
struct Layers {
    Graph<T>& g;
    ParamStore<T>& store;
    std::mt19937_64* rng = nullptr;

    Param<T>& param(const std::string& name, Shape4 shape, double fan_in, bool zero_init = false, T fill = T(0),
                    bool trainable = true) {
        if (store.contains(name)) {
            Param<T>& p = store.get(name);
            if (p.value.shape() != shape) {
                throw ShapeError("parameter '" + name + "' has shape " + p.value.shape().str() + ", expected " +
                                 shape.str());
            }
            return p;
        }
        if (rng == nullptr) throw DataError("model is missing parameter '" + name + "'");
        Tensor<T> value(shape, fill);
        if (!zero_init) {
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
            for (auto& v : value.data()) v = static_cast<T>(normal(*rng));
        }
        return store.add(name, std::move(value), trainable);
    }

    Var conv(const std::string& name, Var x, int cout, int k, const ConvOptions& opt, bool bias = true) {
        const int cin = g.value(x).c();
        Var w = g.param(param(name + ".w", Shape4{cout, cin, k, k}, static_cast<double>(cin) * k * k));
        Var b = bias ? g.param(param(name + ".b", Shape4{1, cout, 1, 1}, 1.0, true)) : Var{};
        return conv2d(g, x, w, b, opt);
    }

    Var conv_same(const std::string& name, Var x, int cout, int k = 3, int dilation = 1) {
        return conv(name, x, cout, k, ConvOptions::same(k, dilation));
    }

    Var up(const std::string& name, Var x, int cout) {
        const int cin = g.value(x).c();
        Var w = g.param(param(name + ".w", Shape4{cin, cout, 2, 2}, static_cast<double>(cin) * 4));
        Var b = g.param(param(name + ".b", Shape4{1, cout, 1, 1}, 1.0, true));
        return conv2d_transpose(g, x, w, b, 2, 0);
    }

    Var bn(const std::string& name, Var x) {
        const int c = g.value(x).c();
        const Shape4 s{1, c, 1, 1};
        Var gamma = g.param(param(name + ".gamma", s, 1.0, true, T(1)));
        Var beta = g.param(param(name + ".beta", s, 1.0, true, T(0)));
        Param<T>& mean = param(name + ".running_mean", s, 1.0, true, T(0), false);
        Param<T>& var = param(name + ".running_var", s, 1.0, true, T(1), false);
        return batchnorm(g, x, gamma, beta, mean, var);
    }

    Var head(const std::string& name, Var x) { return sigmoid(g, conv(name, x, 1, 1, ConvOptions{})); }

    // 1x1 head over stacked probability maps, initialized to sigmoid(4 (mean - 0.5)):
    // a unit-slope soft average of its inputs.
    Var fusion_head(const std::string& name, Var x) {
        const int cin = g.value(x).c();
        Var w = g.param(param(name + ".w", Shape4{1, cin, 1, 1}, 1.0, true, static_cast<T>(4.0 / cin)));
        Var b = g.param(param(name + ".b", Shape4{1, 1, 1, 1}, 1.0, true, T(-2)));
        return sigmoid(g, conv2d(g, x, w, b, ConvOptions{}));
    }
};

int width_at(const BackboneSpec& spec, int level) { return spec.base_width << level; }

// ---- U-Net -----------------------------------------------------------------

template <class T>
Var plain_block(Layers<T>& L, const std::string& name, Var x, int c) {
    x = relu(L.g, L.conv_same(name + ".conv1", x, c));
    return relu(L.g, L.conv_same(name + ".conv2", x, c));
}

// ---- ResUnet ---------------------------------------------------------------

// Pre-activation residual unit: (BN, relu, conv) x 2 plus identity or 1x1 projection shortcut.
template <class T>
Var residual_unit(Layers<T>& L, const std::string& name, Var x, int c) {
    Var h = L.conv_same(name + ".conv1", relu(L.g, L.bn(name + ".bn1", x)), c);
    h = L.conv_same(name + ".conv2", relu(L.g, L.bn(name + ".bn2", h)), c);
    Var shortcut = L.g.value(x).c() == c ? x : L.conv(name + ".proj", x, c, 1, ConvOptions{});
    return add(L.g, h, shortcut);
}

template <class T>
using BlockFn = Var (*)(Layers<T>&, const std::string&, Var, int);

template <class T>
Var u_shape(Layers<T>& L, const BackboneSpec& spec, const std::string& p, Var x, BlockFn<T> block) {
    std::vector<Var> skips;
    for (int l = 0; l < spec.depth; ++l) {
        x = block(L, p + "enc" + std::to_string(l), x, width_at(spec, l));
        skips.push_back(x);
        x = maxpool2(L.g, x);
    }
    x = block(L, p + "bottleneck", x, width_at(spec, spec.depth));
    for (int l = spec.depth - 1; l >= 0; --l) {
        x = L.up(p + "up" + std::to_string(l), x, width_at(spec, l));
        x = concat_channels(L.g, skips[static_cast<std::size_t>(l)], x);
        x = block(L, p + "dec" + std::to_string(l), x, width_at(spec, l));
    }
    return L.head(p + "head", x);
}

// ---- D-Linknet -------------------------------------------------------------

template <class T>
Var basic_block(Layers<T>& L, const std::string& name, Var x, int c) {
    Var h = relu(L.g, L.bn(name + ".bn1", L.conv_same(name + ".conv1", x, c)));
    h = L.bn(name + ".bn2", L.conv_same(name + ".conv2", h, c));
    Var shortcut = x;
    if (L.g.value(x).c() != c) shortcut = L.bn(name + ".proj_bn", L.conv(name + ".proj", x, c, 1, ConvOptions{}));
    return relu(L.g, add(L.g, h, shortcut));
}

// Cascaded dilated convolutions; the block output sums the input and every stage.
template <class T>
Var dilated_center(Layers<T>& L, const std::string& name, Var x) {
    const int c = L.g.value(x).c();
    Var sum = x;
    Var d = x;
    for (int dilation : {1, 2, 4, 8}) {
        d = relu(L.g, L.conv_same(name + ".dil" + std::to_string(dilation), d, c, 3, dilation));
        sum = add(L.g, sum, d);
    }
    return sum;
}

// LinkNet decoder: 1x1 reduce, 2x transpose conv, 1x1 expand, each with BN and relu.
template <class T>
Var decoder_block(Layers<T>& L, const std::string& name, Var x, int cout) {
    const int mid = std::max(1, L.g.value(x).c() / 4);
    Var h = relu(L.g, L.bn(name + ".bn1", L.conv(name + ".reduce", x, mid, 1, ConvOptions{})));
    h = relu(L.g, L.bn(name + ".bn2", L.up(name + ".up", h, mid)));
    return relu(L.g, L.bn(name + ".bn3", L.conv(name + ".expand", h, cout, 1, ConvOptions{})));
}

template <class T>
Var dlinknet(Layers<T>& L, const BackboneSpec& spec, const std::string& p, Var x) {
    x = relu(L.g, L.bn(p + "stem.bn", L.conv_same(p + "stem.conv", x, width_at(spec, 0))));
    std::vector<Var> skips;
    for (int l = 0; l < spec.depth; ++l) {
        x = basic_block(L, p + "enc" + std::to_string(l), x, width_at(spec, l));
        skips.push_back(x);
        x = maxpool2(L.g, x);
    }
    x = dilated_center(L, p + "center", x);
    for (int l = spec.depth - 1; l >= 0; --l) {
        x = decoder_block(L, p + "dec" + std::to_string(l), x, width_at(spec, l));
        x = add(L.g, x, skips[static_cast<std::size_t>(l)]);
    }
    return L.head(p + "head", x);
}

template <class T>
Var backbone(Layers<T>& L, const BackboneSpec& spec, const std::string& prefix, Var x) {
    switch (spec.kind) {
        case Backbone::unet: return u_shape<T>(L, spec, prefix, x, &plain_block<T>);
        case Backbone::resunet: return u_shape<T>(L, spec, prefix, x, &residual_unit<T>);
        case Backbone::dlinknet: return dlinknet(L, spec, prefix, x);
    }
    throw ConfigError("unknown backbone");
}

template <class T>
Var wire(Layers<T>& L, const ModelSpec& spec, Var sat, std::optional<Var> gps) {
    const int expected = kSatelliteBands;
    if (L.g.value(sat).c() != expected) {
        throw ShapeError("satellite input needs " + std::to_string(expected) + " channels, got " +
                         L.g.value(sat).shape().str());
    }
    if (spec.uses_gps() != gps.has_value()) {
        throw ConfigError(spec.uses_gps() ? "stage " + to_string(spec.fusion.stage) + " needs a GPS input"
                                          : "stage none takes no GPS input");
    }
    const auto& s = L.g.value(sat).shape();
    const int div = 1 << spec.backbone.depth;
    if (s.h % div != 0 || s.w % div != 0) {
        throw ShapeError("input " + s.str() + " is not divisible by 2^depth = " + std::to_string(div));
    }
    if (gps) {
        const auto& gs = L.g.value(*gps).shape();
        if (gs.c != 1 || gs.n != s.n || gs.h != s.h || gs.w != s.w) {
            throw ShapeError("GPS input " + gs.str() + " does not match satellite " + s.str());
        }
    }

    switch (spec.fusion.stage) {
        case FusionStage::none: return backbone(L, spec.backbone, "sat.", sat);
        case FusionStage::early: return backbone(L, spec.backbone, "sat.", concat_channels(L.g, sat, *gps));
        case FusionStage::late1:
        case FusionStage::late2: {
            Var p_sat = backbone(L, spec.backbone, "sat.", sat);
            Var other = spec.fusion.stage == FusionStage::late2 ? backbone(L, spec.backbone, "gps.", *gps) : *gps;
            Var fused = fuse(L.g, p_sat, other, spec.fusion.op);
            if (spec.fusion.op == FusionOp::concatenate) return L.fusion_head("fusion.head", fused);
            return fused;
        }
    }
    throw ConfigError("unknown fusion stage");
}

void validate(const ModelSpec& spec) {
    if (spec.backbone.depth < 2) throw ConfigError("backbone depth must be >= 2");
    if (spec.backbone.base_width < 1) throw ConfigError("backbone base_width must be >= 1");
    if (spec.backbone.in_channels != 0 && spec.backbone.in_channels != spec.satellite_in_channels()) {
        throw ConfigError("in_channels " + std::to_string(spec.backbone.in_channels) + " inconsistent with stage " +
                          to_string(spec.fusion.stage) + " (expects " +
                          std::to_string(spec.satellite_in_channels()) + ")");
    }
}

}  // namespace

template <class T>
Var apply_block(Graph<T>& g, ParamStore<T>& params, Block kind, Var x, int channels, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Layers<T> L{g, params, &rng};
    switch (kind) {
        case Block::plain: return plain_block(L, "block", x, channels);
        case Block::residual_unit: return residual_unit(L, "block", x, channels);
        case Block::basic_residual: return basic_block(L, "block", x, channels);
        case Block::dilated_center: return dilated_center(L, "block", x);
        case Block::linknet_decoder: return decoder_block(L, "block", x, channels);
    }
    throw ConfigError("unknown block");
}

template <class T>
Var Model<T>::forward(Graph<T>& g, Var satellite, std::optional<Var> gps) {
    Layers<T> L{g, params_, nullptr};
    return wire(L, spec_, satellite, gps);
}

template <class T>
Tensor<T> Model<T>::predict(const Tensor<T>& satellite, const Tensor<T>* gps, Mode mode) {
    Graph<T> g(mode);
    Var s = g.input(satellite);
    std::optional<Var> gv;
    if (gps) gv = g.input(*gps);
    return g.value(forward(g, s, gv));
}

template <class T>
Model<T> build_model(const ModelSpec& spec, std::uint64_t seed) {
    validate(spec);
    ModelSpec resolved = spec;
    resolved.backbone.in_channels = spec.satellite_in_channels();
    ParamStore<T> store;
    std::mt19937_64 rng(seed);
    const int side = 1 << spec.backbone.depth;
    Graph<T> g(Mode::eval);
    Var sat = g.input(Tensor<T>(Shape4{1, kSatelliteBands, side, side}));
    std::optional<Var> gps;
    if (spec.uses_gps()) gps = g.input(Tensor<T>(Shape4{1, 1, side, side}));
    Layers<T> L{g, store, &rng};
    wire(L, resolved, sat, gps);
    return Model<T>(resolved, std::move(store));
}

template Var fuse<float>(Graph<float>&, Var, Var, FusionOp);
template Var fuse<double>(Graph<double>&, Var, Var, FusionOp);
template Var apply_block<float>(Graph<float>&, ParamStore<float>&, Block, Var, int, std::uint64_t);
template Var apply_block<double>(Graph<double>&, ParamStore<double>&, Block, Var, int, std::uint64_t);
template class Model<float>;
template class Model<double>;
template Model<float> build_model<float>(const ModelSpec&, std::uint64_t);
template Model<double> build_model<double>(const ModelSpec&, std::uint64_t);

}  // namespace roadfuse
