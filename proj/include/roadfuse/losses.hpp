#pragma once

#include <string>

#include "roadfuse/tensor.hpp"

namespace roadfuse {

enum class LossKind { mse, bce, focal };

std::string to_string(LossKind k);
LossKind parse_loss(const std::string& s);

// Scalar loss plus d(loss)/d(pred) for every pixel. All losses use mean reduction.
template <class T>
struct LossValue {
    double value = 0.0;
    Tensor<T> grad;
};

inline constexpr double kProbabilityClamp = 1e-7;

// mean((pred - gt)^2)
template <class T>
LossValue<T> mse(const Tensor<T>& pred, const Tensor<T>& gt);

// mean(-(y log p + (1 - y) log(1 - p))) with p clamped to [eps, 1 - eps].
template <class T>
LossValue<T> bce(const Tensor<T>& pred, const Tensor<T>& gt, double clamp_eps = kProbabilityClamp);

struct FocalOptions {
    double gamma = 2.0;
    double alpha = 0.25;
    bool alpha_weighting = true;  // off: alpha_t = 1 for both classes
    double clamp_eps = kProbabilityClamp;
};

// mean(-alpha_t (1 - p_t)^gamma log p_t); p_t = p for y = 1, 1 - p otherwise.
template <class T>
LossValue<T> focal(const Tensor<T>& pred, const Tensor<T>& gt, const FocalOptions& opt = {});

template <class T>
LossValue<T> compute_loss(LossKind kind, const Tensor<T>& pred, const Tensor<T>& gt);

}  // namespace roadfuse
