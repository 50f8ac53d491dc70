#include "roadfuse/losses.hpp"

#include <algorithm>
#include <cmath>

namespace roadfuse {

std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::mse: return "mse";
        case LossKind::bce: return "bce";
        case LossKind::focal: return "focal";
    }
    return "?";
}

LossKind parse_loss(const std::string& s) {
    if (s == "mse") return LossKind::mse;
    if (s == "bce") return LossKind::bce;
    if (s == "focal") return LossKind::focal;
    throw ConfigError("unknown loss '" + s + "' (expected mse, bce or focal)");
}

namespace {

template <class T>
void check_shapes(const Tensor<T>& pred, const Tensor<T>& gt) {
    if (pred.shape() != gt.shape()) {
        throw ShapeError("loss shape mismatch: prediction " + pred.shape().str() + ", target " + gt.shape().str());
    }
    if (pred.empty()) throw ShapeError("loss of an empty tensor");
}

}  // namespace

template <class T>
LossValue<T> mse(const Tensor<T>& pred, const Tensor<T>& gt) {
    check_shapes(pred, gt);
    const double count = static_cast<double>(pred.size());
    LossValue<T> out{0.0, Tensor<T>(pred.shape())};
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(gt[i]);
        acc += d * d;
        out.grad[i] = static_cast<T>(2.0 * d / count);
    }
    out.value = acc / count;
    return out;
}

template <class T>
LossValue<T> bce(const Tensor<T>& pred, const Tensor<T>& gt, double eps) {
    check_shapes(pred, gt);
    const double count = static_cast<double>(pred.size());
    LossValue<T> out{0.0, Tensor<T>(pred.shape())};
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double raw = pred[i];
        const double p = std::clamp(raw, eps, 1.0 - eps);
        const double y = gt[i];
        acc += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        const bool inside = raw >= eps && raw <= 1.0 - eps;
        out.grad[i] = inside ? static_cast<T>((-y / p + (1.0 - y) / (1.0 - p)) / count) : T(0);
    }
    out.value = acc / count;
    return out;
}

template <class T>
LossValue<T> focal(const Tensor<T>& pred, const Tensor<T>& gt, const FocalOptions& opt) {
    check_shapes(pred, gt);
    if (opt.gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
    if (!(opt.alpha > 0.0 && opt.alpha <= 1.0)) throw ConfigError("focal alpha must lie in (0, 1]");
    const double count = static_cast<double>(pred.size());
    LossValue<T> out{0.0, Tensor<T>(pred.shape())};
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double raw = pred[i];
        const double p = std::clamp(raw, opt.clamp_eps, 1.0 - opt.clamp_eps);
        const bool positive = gt[i] >= T(0.5);
        const double pt = positive ? p : 1.0 - p;
        const double alpha_t = opt.alpha_weighting ? (positive ? opt.alpha : 1.0 - opt.alpha) : 1.0;
        const double log_pt = std::log(pt);
        const double mod = opt.gamma == 0.0 ? 1.0 : std::pow(1.0 - pt, opt.gamma);
        acc += -alpha_t * mod * log_pt;
        // d/dp_t of -(1 - p_t)^g log p_t
        double d_pt = -mod / pt;
        if (opt.gamma != 0.0) d_pt += opt.gamma * std::pow(1.0 - pt, opt.gamma - 1.0) * log_pt;
        const bool inside = raw >= opt.clamp_eps && raw <= 1.0 - opt.clamp_eps;
        const double d_p = alpha_t * d_pt * (positive ? 1.0 : -1.0);
        out.grad[i] = inside ? static_cast<T>(d_p / count) : T(0);
    }
    out.value = acc / count;
    return out;
}

template <class T>
LossValue<T> compute_loss(LossKind kind, const Tensor<T>& pred, const Tensor<T>& gt) {
    switch (kind) {
        case LossKind::mse: return mse(pred, gt);
        case LossKind::bce: return bce(pred, gt);
        case LossKind::focal: return focal(pred, gt);
    }
    throw ConfigError("unknown loss");
}

#define ROADFUSE_INSTANTIATE(T)                                                          \
    template LossValue<T> mse<T>(const Tensor<T>&, const Tensor<T>&);                   \
    template LossValue<T> bce<T>(const Tensor<T>&, const Tensor<T>&, double);           \
    template LossValue<T> focal<T>(const Tensor<T>&, const Tensor<T>&, const FocalOptions&); \
    template LossValue<T> compute_loss<T>(LossKind, const Tensor<T>&, const Tensor<T>&);

ROADFUSE_INSTANTIATE(float)
ROADFUSE_INSTANTIATE(double)

#undef ROADFUSE_INSTANTIATE

}  // namespace roadfuse
