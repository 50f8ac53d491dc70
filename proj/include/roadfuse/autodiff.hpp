#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "roadfuse/tensor.hpp"

namespace roadfuse {

// Named trainable (or buffer) array; grad is kept the same shape as value.
template <class T>
struct Param {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
};

/// Insertion-ordered parameter store with stable element addresses.
template <class T>
class ParamStore {
public:
    Param<T>& add(std::string name, Tensor<T> value, bool trainable = true);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Param<T>& get(const std::string& name);
    const Param<T>& get(const std::string& name) const;

    std::size_t size() const noexcept { return params_.size(); }
    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

    void zero_grad();
    // Number of scalar values, trainable only unless all is set.
    std::size_t scalar_count(bool include_buffers = false) const;

    template <class U>
    ParamStore<U> cast() const {
        ParamStore<U> out;
        for (const auto& p : params_) out.add(p.name, p.value.template cast<U>(), p.trainable);
        return out;
    }

private:
    std::deque<Param<T>> params_;
    std::map<std::string, std::size_t> index_;
};

struct Var {
    static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
    std::size_t id = kNone;
    bool valid() const noexcept { return id != kNone; }
};

enum class Mode { train, eval };

/**
 * Reverse-mode tape.
 *
 * Nodes are appended in execution order, so the tape is topologically sorted
 * by construction and backward walks it in exact reverse. A graph is used for
 * one forward/backward pass on a single thread.
 */
template <class T>
class Graph {
public:
    using Backward = std::function<void(Graph&, std::size_t self)>;

    explicit Graph(Mode mode = Mode::train) : mode_(mode) {}

    Mode mode() const noexcept { return mode_; }

    Var input(Tensor<T> value);
    Var param(Param<T>& p);

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    const Tensor<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Seeds d(out) with `seed`, runs the tape backwards and accumulates
    // leaf gradients into their trainable Params.
    void backward(Var out, const Tensor<T>& seed);

    // Hash of every data-dependent branch taken (relu signs, pooling and
    // maximum winners). Finite-difference probes that change it crossed a kink.
    std::uint64_t branch_signature() const noexcept { return signature_; }
    void mix_branch(std::uint64_t bits) noexcept;

    // Op plumbing.
    Var record(Tensor<T> value, Backward back);
    Tensor<T>& grad_of(std::size_t id);
    const Tensor<T>& value_of(std::size_t id) const { return nodes_[id].value; }
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Backward back;
        Param<T>* param = nullptr;
    };

    Mode mode_;
    std::vector<Node> nodes_;
    std::uint64_t signature_ = 1469598103934665603ull;
};

struct ConvOptions {
    int stride = 1;
    int padding = 0;
    int dilation = 1;

    // Padding that preserves spatial size at stride 1.
    static ConvOptions same(int kernel, int dilation = 1) { return {1, dilation * (kernel - 1) / 2, dilation}; }
};

// Output extent of a convolution along one axis.
int conv_output_size(int in, int kernel, const ConvOptions& opt);

// Cross-correlation. x: N x Cin x H x W, w: Cout x Cin x k x k, b: 1 x Cout x 1 x 1 or none.
template <class T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, const ConvOptions& opt = {});

// Adjoint of conv2d with the same weight tensor read as Cin x Cout x k x k.
// Output extent (H - 1) * stride + k - 2 * padding.
template <class T>
Var conv2d_transpose(Graph<T>& g, Var x, Var w, Var b, int stride, int padding = 0);

// 2x2 max pooling, stride 2; gradient to the first maximum in scan order.
template <class T>
Var maxpool2(Graph<T>& g, Var x);

template <class T>
Var relu(Graph<T>& g, Var x);

template <class T>
Var sigmoid(Graph<T>& g, Var x);

template <class T>
Var add(Graph<T>& g, Var a, Var b);

template <class T>
Var concat_channels(Graph<T>& g, Var a, Var b);

template <class T>
Var multiply(Graph<T>& g, Var a, Var b);

// (a + b) * 0.5
template <class T>
Var average(Graph<T>& g, Var a, Var b);

// Elementwise max; ties and their gradient go to a.
template <class T>
Var maximum(Graph<T>& g, Var a, Var b);

struct BatchNormOptions {
    double eps = 1e-5;
    double momentum = 0.9;
};

// Per-channel batch normalization. Train mode normalizes with batch
// statistics and updates the running buffers; eval mode uses the buffers.
template <class T>
Var batchnorm(Graph<T>& g, Var x, Var gamma, Var beta, Param<T>& running_mean, Param<T>& running_var,
              const BatchNormOptions& opt = {});

// Sum of elements weighted by `weights` (same shape); used to scalarize outputs.
template <class T>
T weighted_sum(const Tensor<T>& value, const Tensor<T>& weights);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst;        // "<tensor>[index]" of the worst coordinate
    std::size_t checked = 0;  // coordinates compared
    std::size_t skipped = 0;  // probes that crossed a relu/max kink
};

struct GradCheckOptions {
    double eps = 1e-5;
    std::uint64_t seed = 7;
    Mode mode = Mode::train;
    // Probe at most this many coordinates per tensor (0 = all), chosen by seeded RNG.
    std::size_t max_coords_per_tensor = 0;
};

using GraphBuilder = std::function<Var(Graph<double>&, std::span<const Var> inputs)>;

/**
 * Central finite-difference certification of analytic gradients.
 *
 * The builder output is scalarized with fixed random weights. The relative
 * error of one coordinate is |analytic - numeric| / max(1, |analytic|, |numeric|),
 * so large gradients are compared relatively and small ones absolutely.
 * Probes whose +/-eps evaluations take a different branch than the base pass
 * are skipped and counted. Throws NumericError on non-finite values.
 */
GradCheckReport grad_check(const GraphBuilder& build, std::vector<Tensor<double>>& inputs,
                           ParamStore<double>* params, const GradCheckOptions& options = {});

}  // namespace roadfuse
