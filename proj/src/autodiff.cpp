#include "roadfuse/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include <Eigen/Core>

#include "roadfuse/parallel.hpp"

namespace roadfuse {

template <class T>
Param<T>& ParamStore<T>::add(std::string name, Tensor<T> value, bool trainable) {
    if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
    index_[name] = params_.size();
    Tensor<T> grad(value.shape());
    params_.push_back(Param<T>{std::move(name), std::move(value), std::move(grad), trainable});
    return params_.back();
}

template <class T>
Param<T>& ParamStore<T>::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("no parameter named '" + name + "'");
    return params_[it->second];
}

template <class T>
const Param<T>& ParamStore<T>::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("no parameter named '" + name + "'");
    return params_[it->second];
}

template <class T>
void ParamStore<T>::zero_grad() {
    for (auto& p : params_) p.grad.fill(T(0));
}

template <class T>
std::size_t ParamStore<T>::scalar_count(bool include_buffers) const {
    std::size_t total = 0;
    for (const auto& p : params_) {
        if (p.trainable || include_buffers) total += p.value.size();
    }
    return total;
}

template <class T>
Var Graph<T>::input(Tensor<T> value) {
    return record(std::move(value), nullptr);
}

template <class T>
Var Graph<T>::param(Param<T>& p) {
    Var v = record(p.value, nullptr);
    nodes_[v.id].param = &p;
    return v;
}

template <class T>
Var Graph<T>::record(Tensor<T> value, Backward back) {
    nodes_.push_back(Node{std::move(value), Tensor<T>{}, std::move(back), nullptr});
    return Var{nodes_.size() - 1};
}

template <class T>
Tensor<T>& Graph<T>::grad_of(std::size_t id) {
    Node& node = nodes_[id];
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
}

template <class T>
void Graph<T>::mix_branch(std::uint64_t bits) noexcept {
    signature_ ^= bits;
    signature_ *= 1099511628211ull;
}

template <class T>
void Graph<T>::backward(Var out, const Tensor<T>& seed) {
    if (!out.valid() || out.id >= nodes_.size()) throw ShapeError("backward from an unknown node");
    if (seed.shape() != nodes_[out.id].value.shape()) {
        throw ShapeError("backward seed " + seed.shape().str() + " does not match output " +
                         nodes_[out.id].value.shape().str());
    }
    for (auto& node : nodes_) node.grad = Tensor<T>{};
    grad_of(out.id) = seed;
    for (std::size_t i = out.id + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (node.grad.empty()) continue;
        if (node.back) node.back(*this, i);
    }
    for (auto& node : nodes_) {
        if (node.param == nullptr || node.grad.empty() || !node.param->trainable) continue;
        auto& dst = node.param->grad;
        if (dst.shape() != node.grad.shape()) dst = Tensor<T>(node.grad.shape());
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += node.grad[k];
    }
}

int conv_output_size(int in, int kernel, const ConvOptions& opt) {
    return (in + 2 * opt.padding - opt.dilation * (kernel - 1) - 1) / opt.stride + 1;
}

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

// Geometry of a convolution between a "wide" image (channels x h x w) and
// the "narrow" output grid (oh x ow) it produces.
struct ConvGeom {
    int channels, h, w, k, stride, pad, dilation, oh, ow;
    int rows() const { return channels * k * k; }
    int cols() const { return oh * ow; }
};

template <class T>
void im2col(std::span<const T> img, const ConvGeom& g, std::vector<T>& cols) {
    cols.assign(static_cast<std::size_t>(g.rows()) * g.cols(), T(0));
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                T* row = cols.data() + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * g.cols();
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki * g.dilation;
                    if (iy < 0 || iy >= g.h) continue;
                    const T* src = img.data() + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj * g.dilation;
                        if (ix >= 0 && ix < g.w) row[oy * g.ow + ox] = src[ix];
                    }
                }
            }
        }
    }
}

template <class T>
void col2im_add(const std::vector<T>& cols, const ConvGeom& g, std::span<T> img) {
    for (int c = 0; c < g.channels; ++c) {
        for (int ki = 0; ki < g.k; ++ki) {
            for (int kj = 0; kj < g.k; ++kj) {
                const T* row = cols.data() + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * g.cols();
                for (int oy = 0; oy < g.oh; ++oy) {
                    const int iy = oy * g.stride - g.pad + ki * g.dilation;
                    if (iy < 0 || iy >= g.h) continue;
                    T* dst = img.data() + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
                    for (int ox = 0; ox < g.ow; ++ox) {
                        const int ix = ox * g.stride - g.pad + kj * g.dilation;
                        if (ix >= 0 && ix < g.w) dst[ix] += row[oy * g.ow + ox];
                    }
                }
            }
        }
    }
}

template <class T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Adds per-image partials in image order.
template <class T>
void reduce_partials(const std::vector<std::vector<T>>& partials, std::span<T> dst) {
    for (const auto& part : partials) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += part[i];
    }
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ShapeError(what);
}

template <class T>
void mix_mask(Graph<T>& g, const std::vector<std::uint8_t>& mask) {
    std::uint64_t word = 0;
    int bits = 0;
    for (auto m : mask) {
        word = (word << 1) | m;
        if (++bits == 64) {
            g.mix_branch(word);
            word = 0;
            bits = 0;
        }
    }
    g.mix_branch(word ^ static_cast<std::uint64_t>(bits));
}

}  // namespace

template <class T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b, const ConvOptions& opt) {
    const auto& xs = g.value(x).shape();
    const auto& ws = g.value(w).shape();
    require(ws.h == ws.w, "conv2d needs a square kernel");
    require(xs.c == ws.c, "conv2d channel mismatch: input " + xs.str() + ", weight " + ws.str());
    require(opt.stride >= 1 && opt.dilation >= 1 && opt.padding >= 0, "conv2d bad stride/padding/dilation");
    if (b.valid()) require(g.value(b).size() == static_cast<std::size_t>(ws.n), "conv2d bias size mismatch");
    const int k = ws.h;
    const ConvGeom geom{xs.c, xs.h, xs.w, k, opt.stride, opt.padding, opt.dilation,
                        conv_output_size(xs.h, k, opt), conv_output_size(xs.w, k, opt)};
    require(geom.oh > 0 && geom.ow > 0, "conv2d output would be empty for input " + xs.str());
    const int cout = ws.n;

    Tensor<T> y(Shape4{xs.n, cout, geom.oh, geom.ow});
    {
        const auto& xv = g.value(x);
        const auto& wv = g.value(w);
        const T* bias = b.valid() ? g.value(b).data().data() : nullptr;
        parallel_for(xs.n, [&](int n) {
            std::vector<T> cols;
            im2col(xv.image(n), geom, cols);
            CMapR<T> wm(wv.data().data(), cout, geom.rows());
            CMapR<T> cm(cols.data(), geom.rows(), geom.cols());
            MapR<T> ym(y.image(n).data(), cout, geom.cols());
            ym.noalias() = wm * cm;
            if (bias) {
                for (int o = 0; o < cout; ++o) ym.row(o).array() += bias[o];
            }
        });
    }

    return g.record(std::move(y), [x, w, b, geom, cout](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        const auto& xv = gr.value_of(x.id);
        const auto& wv = gr.value_of(w.id);
        auto& gx = gr.grad_of(x.id);
        const int batch = xv.n();
        std::vector<std::vector<T>> dw(static_cast<std::size_t>(batch));
        parallel_for(batch, [&](int n) {
            std::vector<T> cols;
            im2col(xv.image(n), geom, cols);
            CMapR<T> wm(wv.data().data(), cout, geom.rows());
            CMapR<T> cm(cols.data(), geom.rows(), geom.cols());
            CMapR<T> gym(gy.image(n).data(), cout, geom.cols());
            dw[n].resize(wv.size());
            MapR<T> dwm(dw[n].data(), cout, geom.rows());
            dwm.noalias() = gym * cm.transpose();
            std::vector<T> dcols(cols.size());
            MapR<T> dcm(dcols.data(), geom.rows(), geom.cols());
            dcm.noalias() = wm.transpose() * gym;
            col2im_add(dcols, geom, gx.image(n));
        });
        reduce_partials(dw, gr.grad_of(w.id).data());
        if (b.valid()) {
            auto& gb = gr.grad_of(b.id);
            const std::size_t plane = static_cast<std::size_t>(geom.cols());
            for (int n = 0; n < batch; ++n) {
                for (int o = 0; o < cout; ++o) {
                    const T* row = gy.image(n).data() + plane * o;
                    T acc = T(0);
                    for (std::size_t p = 0; p < plane; ++p) acc += row[p];
                    gb[o] += acc;
                }
            }
        }
    });
}

template <class T>
Var conv2d_transpose(Graph<T>& g, Var x, Var w, Var b, int stride, int padding) {
    const auto& xs = g.value(x).shape();
    const auto& ws = g.value(w).shape();
    require(ws.h == ws.w, "conv2d_transpose needs a square kernel");
    require(xs.c == ws.n, "conv2d_transpose channel mismatch: input " + xs.str() + ", weight " + ws.str());
    require(stride >= 1 && padding >= 0, "conv2d_transpose bad stride/padding");
    const int k = ws.h, cout = ws.c, cin = ws.n;
    if (b.valid()) require(g.value(b).size() == static_cast<std::size_t>(cout), "conv2d_transpose bias size mismatch");
    const int oh = (xs.h - 1) * stride + k - 2 * padding;
    const int ow = (xs.w - 1) * stride + k - 2 * padding;
    require(oh > 0 && ow > 0, "conv2d_transpose output would be empty");
    const ConvGeom geom{cout, oh, ow, k, stride, padding, 1, xs.h, xs.w};

    Tensor<T> y(Shape4{xs.n, cout, oh, ow});
    {
        const auto& xv = g.value(x);
        const auto& wv = g.value(w);
        const T* bias = b.valid() ? g.value(b).data().data() : nullptr;
        parallel_for(xs.n, [&](int n) {
            std::vector<T> cols(static_cast<std::size_t>(geom.rows()) * geom.cols());
            CMapR<T> wm(wv.data().data(), cin, geom.rows());
            CMapR<T> xm(xv.image(n).data(), cin, geom.cols());
            MapR<T> cm(cols.data(), geom.rows(), geom.cols());
            cm.noalias() = wm.transpose() * xm;
            auto img = y.image(n);
            col2im_add(cols, geom, img);
            if (bias) {
                const std::size_t plane = static_cast<std::size_t>(oh) * ow;
                for (int o = 0; o < cout; ++o) {
                    for (std::size_t p = 0; p < plane; ++p) img[plane * o + p] += bias[o];
                }
            }
        });
    }

    return g.record(std::move(y), [x, w, b, geom, cin, cout](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        const auto& xv = gr.value_of(x.id);
        const auto& wv = gr.value_of(w.id);
        auto& gx = gr.grad_of(x.id);
        const int batch = xv.n();
        std::vector<std::vector<T>> dw(static_cast<std::size_t>(batch));
        parallel_for(batch, [&](int n) {
            std::vector<T> dcols;
            im2col(gy.image(n), geom, dcols);
            CMapR<T> wm(wv.data().data(), cin, geom.rows());
            CMapR<T> dcm(dcols.data(), geom.rows(), geom.cols());
            CMapR<T> xm(xv.image(n).data(), cin, geom.cols());
            MapR<T> gxm(gx.image(n).data(), cin, geom.cols());
            gxm.noalias() += wm * dcm;
            dw[n].resize(wv.size());
            MapR<T> dwm(dw[n].data(), cin, geom.rows());
            dwm.noalias() = xm * dcm.transpose();
        });
        reduce_partials(dw, gr.grad_of(w.id).data());
        if (b.valid()) {
            auto& gb = gr.grad_of(b.id);
            const std::size_t plane = static_cast<std::size_t>(geom.h) * geom.w;
            for (int n = 0; n < batch; ++n) {
                for (int o = 0; o < cout; ++o) {
                    const T* row = gy.image(n).data() + plane * o;
                    T acc = T(0);
                    for (std::size_t p = 0; p < plane; ++p) acc += row[p];
                    gb[o] += acc;
                }
            }
        }
    });
}

template <class T>
Var maxpool2(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    const auto& s = xv.shape();
    require(s.h % 2 == 0 && s.w % 2 == 0, "maxpool2 needs even spatial dims, got " + s.str());
    Tensor<T> y(Shape4{s.n, s.c, s.h / 2, s.w / 2});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.size());
    std::vector<std::uint8_t> winners(y.size());
    std::size_t o = 0;
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int i = 0; i < s.h / 2; ++i) {
                for (int j = 0; j < s.w / 2; ++j, ++o) {
                    std::size_t best = xv.offset(n, c, 2 * i, 2 * j);
                    std::uint8_t slot = 0;
                    const std::size_t cand[3] = {xv.offset(n, c, 2 * i, 2 * j + 1), xv.offset(n, c, 2 * i + 1, 2 * j),
                                                 xv.offset(n, c, 2 * i + 1, 2 * j + 1)};
                    for (std::uint8_t q = 0; q < 3; ++q) {
                        if (xv[cand[q]] > xv[best]) {
                            best = cand[q];
                            slot = static_cast<std::uint8_t>(q + 1);
                        }
                    }
                    y[o] = xv[best];
                    (*argmax)[o] = static_cast<std::uint32_t>(best);
                    winners[o] = slot;
                }
            }
        }
    }
    for (auto slot : winners) g.mix_branch(slot);
    return g.record(std::move(y), [x, argmax](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        auto& gx = gr.grad_of(x.id);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[(*argmax)[i]] += gy[i];
    });
}

template <class T>
Var relu(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    Tensor<T> y(xv.shape());
    std::vector<std::uint8_t> mask(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        mask[i] = xv[i] > T(0) ? 1 : 0;
        y[i] = mask[i] ? xv[i] : T(0);
    }
    mix_mask(g, mask);
    return g.record(std::move(y), [x](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        const auto& xv = gr.value_of(x.id);
        auto& gx = gr.grad_of(x.id);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            if (xv[i] > T(0)) gx[i] += gy[i];
        }
    });
}

template <class T>
Var sigmoid(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    Tensor<T> y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-xv[i]));
    return g.record(std::move(y), [x](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        const auto& yv = gr.value_of(self);
        auto& gx = gr.grad_of(x.id);
        for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
    });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    require(av.shape() == bv.shape(), "add shape mismatch: " + av.shape().str() + " vs " + bv.shape().str());
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
    return g.record(std::move(y), [a, b](Graph<T>& gr, std::size_t self) {
        add_into(gr.grad_of(a.id), gr.grad_of(self));
        add_into(gr.grad_of(b.id), gr.grad_of(self));
    });
}

template <class T>
Var concat_channels(Graph<T>& g, Var a, Var b) {
    const auto& as = g.value(a).shape();
    const auto& bs = g.value(b).shape();
    require(as.n == bs.n && as.h == bs.h && as.w == bs.w,
            "concat_channels needs equal N, H, W: " + as.str() + " vs " + bs.str());
    Tensor<T> y(Shape4{as.n, as.c + bs.c, as.h, as.w});
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    for (int n = 0; n < as.n; ++n) {
        auto dst = y.image(n);
        auto sa = av.image(n);
        auto sb = bv.image(n);
        std::copy(sa.begin(), sa.end(), dst.begin());
        std::copy(sb.begin(), sb.end(), dst.begin() + static_cast<std::ptrdiff_t>(sa.size()));
    }
    return g.record(std::move(y), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        auto& ga = gr.grad_of(a.id);
        auto& gb = gr.grad_of(b.id);
        for (int n = 0; n < gy.n(); ++n) {
            auto src = gy.image(n);
            auto da = ga.image(n);
            auto db = gb.image(n);
            for (std::size_t i = 0; i < da.size(); ++i) da[i] += src[i];
            for (std::size_t i = 0; i < db.size(); ++i) db[i] += src[da.size() + i];
        }
    });
}

template <class T>
Var multiply(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    require(av.shape() == bv.shape(), "multiply shape mismatch: " + av.shape().str() + " vs " + bv.shape().str());
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
    return g.record(std::move(y), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        const auto& av = gr.value_of(a.id);
        const auto& bv = gr.value_of(b.id);
        auto& ga = gr.grad_of(a.id);
        auto& gb = gr.grad_of(b.id);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i] * bv[i];
            gb[i] += gy[i] * av[i];
        }
    });
}

template <class T>
Var average(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    require(av.shape() == bv.shape(), "average shape mismatch: " + av.shape().str() + " vs " + bv.shape().str());
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = (av[i] + bv[i]) * T(0.5);
    return g.record(std::move(y), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        auto& ga = gr.grad_of(a.id);
        auto& gb = gr.grad_of(b.id);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i] * T(0.5);
            gb[i] += gy[i] * T(0.5);
        }
    });
}

template <class T>
Var maximum(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    require(av.shape() == bv.shape(), "maximum shape mismatch: " + av.shape().str() + " vs " + bv.shape().str());
    Tensor<T> y(av.shape());
    std::vector<std::uint8_t> mask(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        mask[i] = av[i] >= bv[i] ? 1 : 0;
        y[i] = mask[i] ? av[i] : bv[i];
    }
    mix_mask(g, mask);
    return g.record(std::move(y), [a, b](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        const auto& av = gr.value_of(a.id);
        const auto& bv = gr.value_of(b.id);
        auto& ga = gr.grad_of(a.id);
        auto& gb = gr.grad_of(b.id);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            if (av[i] >= bv[i]) {
                ga[i] += gy[i];
            } else {
                gb[i] += gy[i];
            }
        }
    });
}

template <class T>
Var batchnorm(Graph<T>& g, Var x, Var gamma, Var beta, Param<T>& running_mean, Param<T>& running_var,
              const BatchNormOptions& opt) {
    const auto& xv = g.value(x);
    const auto& s = xv.shape();
    const auto channels = static_cast<std::size_t>(s.c);
    require(g.value(gamma).size() == channels && g.value(beta).size() == channels &&
                running_mean.value.size() == channels && running_var.value.size() == channels,
            "batchnorm channel mismatch for input " + s.str());
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const double count = static_cast<double>(plane) * s.n;

    struct Saved {
        std::vector<T> xhat;
        std::vector<double> inv_std;
    };
    auto saved = std::make_shared<Saved>();
    saved->xhat.resize(xv.size());
    saved->inv_std.resize(channels);

    const auto& gv = g.value(gamma);
    const auto& bv = g.value(beta);
    Tensor<T> y(s);
    const bool training = g.mode() == Mode::train;
    for (int c = 0; c < s.c; ++c) {
        double mean, var;
        if (training) {
            double sum = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = xv.data().data() + xv.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            mean = sum / count;
            double sq = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const T* p = xv.data().data() + xv.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mean) * (p[i] - mean);
            }
            var = sq / count;
            running_mean.value[c] =
                static_cast<T>(opt.momentum * running_mean.value[c] + (1.0 - opt.momentum) * mean);
            running_var.value[c] = static_cast<T>(opt.momentum * running_var.value[c] + (1.0 - opt.momentum) * var);
        } else {
            mean = running_mean.value[c];
            var = running_var.value[c];
        }
        const double inv_std = 1.0 / std::sqrt(var + opt.eps);
        saved->inv_std[c] = inv_std;
        for (int n = 0; n < s.n; ++n) {
            const std::size_t base = xv.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < plane; ++i) {
                const T xhat = static_cast<T>((xv[base + i] - mean) * inv_std);
                saved->xhat[base + i] = xhat;
                y[base + i] = gv[c] * xhat + bv[c];
            }
        }
    }

    return g.record(std::move(y), [x, gamma, beta, saved, training, plane, count](Graph<T>& gr, std::size_t self) {
        const auto& gy = gr.grad_of(self);
        const auto& gv = gr.value_of(gamma.id);
        auto& gx = gr.grad_of(x.id);
        auto& ggamma = gr.grad_of(gamma.id);
        auto& gbeta = gr.grad_of(beta.id);
        const auto& s = gy.shape();
        for (int c = 0; c < s.c; ++c) {
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int n = 0; n < s.n; ++n) {
                const std::size_t base = gy.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_dy += gy[base + i];
                    sum_dy_xhat += gy[base + i] * saved->xhat[base + i];
                }
            }
            ggamma[c] += static_cast<T>(sum_dy_xhat);
            gbeta[c] += static_cast<T>(sum_dy);
            const double scale = gv[c] * saved->inv_std[c];
            for (int n = 0; n < s.n; ++n) {
                const std::size_t base = gy.offset(n, c, 0, 0);
                for (std::size_t i = 0; i < plane; ++i) {
                    if (training) {
                        gx[base + i] += static_cast<T>(
                            scale * (gy[base + i] - sum_dy / count - saved->xhat[base + i] * sum_dy_xhat / count));
                    } else {
                        gx[base + i] += static_cast<T>(scale * gy[base + i]);
                    }
                }
            }
        }
    });
}

template <class T>
T weighted_sum(const Tensor<T>& value, const Tensor<T>& weights) {
    if (value.shape() != weights.shape()) throw ShapeError("weighted_sum shape mismatch");
    T acc = T(0);
    for (std::size_t i = 0; i < value.size(); ++i) acc += value[i] * weights[i];
    return acc;
}

GradCheckReport grad_check(const GraphBuilder& build, std::vector<Tensor<double>>& inputs, ParamStore<double>* params,
                           const GradCheckOptions& options) {
    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> normal(0.0, 1.0);

    auto check_finite = [](const Tensor<double>& t, const std::string& what) {
        for (double v : t.data()) {
            if (!std::isfinite(v)) throw NumericError("non-finite value in " + what);
        }
    };

    Graph<double> base(options.mode);
    std::vector<Var> vars;
    for (auto& t : inputs) vars.push_back(base.input(t));
    const Var out = build(base, vars);
    check_finite(base.value(out), "forward output");
    Tensor<double> weights(base.value(out).shape());
    for (auto& v : weights.data()) v = normal(rng);
    const std::uint64_t base_sig = base.branch_signature();
    if (params) params->zero_grad();
    base.backward(out, weights);

    auto evaluate = [&](std::uint64_t& sig) {
        Graph<double> g(options.mode);
        std::vector<Var> vs;
        for (auto& t : inputs) vs.push_back(g.input(t));
        const Var o = build(g, vs);
        sig = g.branch_signature();
        const double f = weighted_sum(g.value(o), weights);
        if (!std::isfinite(f)) throw NumericError("non-finite value during finite differences");
        return f;
    };

    GradCheckReport report;
    auto probe = [&](Tensor<double>& target, const Tensor<double>& analytic, const std::string& label) {
        check_finite(analytic, "gradient of " + label);
        std::vector<std::size_t> coords(target.size());
        std::iota(coords.begin(), coords.end(), std::size_t{0});
        if (options.max_coords_per_tensor != 0 && coords.size() > options.max_coords_per_tensor) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(options.max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }
        for (std::size_t idx : coords) {
            const double saved = target[idx];
            std::uint64_t sig_plus = 0, sig_minus = 0;
            target[idx] = saved + options.eps;
            const double f_plus = evaluate(sig_plus);
            target[idx] = saved - options.eps;
            const double f_minus = evaluate(sig_minus);
            target[idx] = saved;
            if (sig_plus != base_sig || sig_minus != base_sig) {
                ++report.skipped;
                continue;
            }
            const double numeric = (f_plus - f_minus) / (2.0 * options.eps);
            const double a = analytic.empty() ? 0.0 : analytic[idx];
            const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
            ++report.checked;
            if (report.worst.empty() || err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst = label + "[" + std::to_string(idx) + "]";
            }
        }
    };

    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const Tensor<double> analytic = base.grad(vars[i]).empty() ? Tensor<double>(inputs[i].shape())
                                                                   : base.grad(vars[i]);
        probe(inputs[i], analytic, "input" + std::to_string(i));
    }
    if (params) {
        for (auto& p : *params) {
            if (!p.trainable) continue;
            const Tensor<double> analytic = p.grad;
            probe(p.value, analytic, p.name);
        }
    }
    return report;
}

#define ROADFUSE_INSTANTIATE(T)                                                                              \
    template class ParamStore<T>;                                                                            \
    template class Graph<T>;                                                                                 \
    template Var conv2d<T>(Graph<T>&, Var, Var, Var, const ConvOptions&);                                   \
    template Var conv2d_transpose<T>(Graph<T>&, Var, Var, Var, int, int);                                    \
    template Var maxpool2<T>(Graph<T>&, Var);                                                                \
    template Var relu<T>(Graph<T>&, Var);                                                                    \
    template Var sigmoid<T>(Graph<T>&, Var);                                                                 \
    template Var add<T>(Graph<T>&, Var, Var);                                                                \
    template Var concat_channels<T>(Graph<T>&, Var, Var);                                                    \
    template Var multiply<T>(Graph<T>&, Var, Var);                                                           \
    template Var average<T>(Graph<T>&, Var, Var);                                                            \
    template Var maximum<T>(Graph<T>&, Var, Var);                                                            \
    template Var batchnorm<T>(Graph<T>&, Var, Var, Var, Param<T>&, Param<T>&, const BatchNormOptions&);     \
    template T weighted_sum<T>(const Tensor<T>&, const Tensor<T>&);

ROADFUSE_INSTANTIATE(float)
ROADFUSE_INSTANTIATE(double)

#undef ROADFUSE_INSTANTIATE

}  // namespace roadfuse
