#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "isa/error.hpp"

namespace isa {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace detail {

struct TensorNode;

// Per-backward-pass adjoint storage. Persistent grad buffers are only touched
// at the end of the pass, so repeated backward calls accumulate exactly.
struct AdjointMap {
    std::unordered_map<const TensorNode*, std::vector<double>> buffers;

    std::vector<double>& of(const TensorNode* n);
};

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // persistent; sized lazily on first accumulation
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Pushes this node's adjoint into the parents' adjoint buffers.
    std::function<void(const std::vector<double>& adj, AdjointMap& adjoints)> backward_fn;

    std::size_t numel() const { return values.size(); }
};

inline std::vector<double>& AdjointMap::of(const TensorNode* n) {
    auto it = buffers.find(n);
    if (it == buffers.end()) {
        it = buffers.emplace(n, std::vector<double>(n->numel(), 0.0)).first;
    }
    return it->second;
}

}  // namespace detail

// Value-semantic handle to a node in the computation graph. Leaves created
// directly hold data (and optionally gradients); operation results keep
// references to their inputs so backward() can replay the tape.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, double fill, bool requires_grad = false)
        : node_(std::make_shared<detail::TensorNode>()) {
        node_->shape = std::move(shape);
        node_->values.assign(shape_numel(node_->shape), fill);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), 0.0, requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (values.size() != shape_numel(shape)) {
            throw DimensionError("value count " + std::to_string(values.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        Tensor t;
        t.node_ = std::make_shared<detail::TensorNode>();
        t.node_->shape = std::move(shape);
        t.node_->values = std::move(values);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from({}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->values.size(); }
    std::size_t rank() const { return node_->shape.size(); }

    std::vector<double>& values() & { return node_->values; }
    const std::vector<double>& values() const& { return node_->values; }
    // a temporary Tensor owns its node, so hand out a copy instead of a
    // reference that would dangle after the full expression
    std::vector<double> values() && { return node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

    double item() const {
        if (size() != 1) {
            throw ContractError("item() requires a scalar, got shape " + shape_str(shape()));
        }
        return node_->values[0];
    }

    // Detached deep copy: a fresh leaf with the same values.
    Tensor clone() const {
        Tensor t = from(node_->shape, node_->values, node_->requires_grad);
        if (!node_->grad.empty()) t.node_->grad = node_->grad;
        return t;
    }

    bool same_node(const Tensor& other) const { return node_ == other.node_; }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

using ParamSet = std::vector<Tensor>;

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> values,
                      std::vector<Tensor> inputs,
                      std::function<void(const std::vector<double>&, AdjointMap&)> backward_fn) {
    Tensor out = Tensor::from(std::move(shape), std::move(values));
    auto node = out.node();
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward_fn);
    return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto an = a.node().get();
    auto bn = b.node().get();
    return detail::make_op(a.shape(), std::move(out), {a, b},
                           [an, bn](const std::vector<double>& adj, detail::AdjointMap& m) {
                               auto& ga = m.of(an);
                               auto& gb = m.of(bn);
                               for (std::size_t i = 0; i < adj.size(); ++i) {
                                   ga[i] += adj[i];
                                   gb[i] += adj[i];
                               }
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto an = a.node().get();
    auto bn = b.node().get();
    std::vector<double> av = a.values(), bv = b.values();
    return detail::make_op(a.shape(), std::move(out), {a, b},
                           [an, bn, av = std::move(av), bv = std::move(bv)](
                               const std::vector<double>& adj, detail::AdjointMap& m) {
                               auto& ga = m.of(an);
                               auto& gb = m.of(bn);
                               for (std::size_t i = 0; i < adj.size(); ++i) {
                                   ga[i] += adj[i] * bv[i];
                                   gb[i] += adj[i] * av[i];
                               }
                           });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.values()[i];
    auto an = a.node().get();
    return detail::make_op(a.shape(), std::move(out), {a},
                           [an, c](const std::vector<double>& adj, detail::AdjointMap& m) {
                               auto& ga = m.of(an);
                               for (std::size_t i = 0; i < adj.size(); ++i) ga[i] += c * adj[i];
                           });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(0.0, a.values()[i]);
    auto an = a.node().get();
    std::vector<double> av = a.values();
    return detail::make_op(a.shape(), std::move(out), {a},
                           [an, av = std::move(av)](const std::vector<double>& adj,
                                                    detail::AdjointMap& m) {
                               auto& ga = m.of(an);
                               for (std::size_t i = 0; i < adj.size(); ++i) {
                                   if (av[i] > 0.0) ga[i] += adj[i];
                               }
                           });
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    auto an = a.node().get();
    const std::size_t n = a.size();
    return detail::make_op({}, {s}, {a},
                           [an, n](const std::vector<double>& adj, detail::AdjointMap& m) {
                               auto& ga = m.of(an);
                               for (std::size_t i = 0; i < n; ++i) ga[i] += adj[0];
                           });
}

// Elementwise mean of same-shaped tensors; used to average per-pair losses.
inline Tensor mean_stack(const std::vector<Tensor>& xs) {
    if (xs.empty()) throw ContractError("mean_stack: empty input list");
    for (const auto& x : xs) detail::check_same_shape(xs.front(), x, "mean_stack");
    const std::size_t n = xs.front().size();
    std::vector<double> out(n, 0.0);
    for (const auto& x : xs) {
        for (std::size_t i = 0; i < n; ++i) out[i] += x.values()[i];
    }
    const double inv = 1.0 / static_cast<double>(xs.size());
    for (double& v : out) v *= inv;
    std::vector<const detail::TensorNode*> nodes;
    nodes.reserve(xs.size());
    for (const auto& x : xs) nodes.push_back(x.node().get());
    return detail::make_op(xs.front().shape(), std::move(out), xs,
                           [nodes = std::move(nodes), inv](const std::vector<double>& adj,
                                                           detail::AdjointMap& m) {
                               for (const auto* nd : nodes) {
                                   auto& g = m.of(nd);
                                   for (std::size_t i = 0; i < adj.size(); ++i) {
                                       g[i] += inv * adj[i];
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

// Cross-correlation over a [C_in,H,W] input with a [C_out,C_in,kH,kW] kernel.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     std::size_t stride = 1, std::size_t padding = 0) {
    if (input.rank() != 3) {
        throw DimensionError("conv2d: input must be rank 3 [C,H,W], got " +
                             shape_str(input.shape()));
    }
    if (weight.rank() != 4) {
        throw DimensionError("conv2d: weight must be rank 4 [Cout,Cin,kH,kW], got " +
                             shape_str(weight.shape()));
    }
    if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
    const std::size_t c_in = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const std::size_t c_out = weight.shape()[0], kc = weight.shape()[1];
    const std::size_t kh = weight.shape()[2], kw = weight.shape()[3];
    if (kc != c_in) {
        throw DimensionError("conv2d: input channel axis (" + std::to_string(c_in) +
                             ") does not match weight channel axis (" + std::to_string(kc) + ")");
    }
    if (bias.shape() != Shape{c_out}) {
        throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()) +
                             " does not match output channel axis (" + std::to_string(c_out) +
                             ")");
    }
    if (h + 2 * padding < kh || w + 2 * padding < kw) {
        throw DimensionError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " does not fit padded input " + std::to_string(h + 2 * padding) +
                             "x" + std::to_string(w + 2 * padding));
    }
    const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
    const std::size_t ow = (w + 2 * padding - kw) / stride + 1;

    const auto& x = input.values();
    const auto& wv = weight.values();
    const auto& bv = bias.values();
    std::vector<double> out(c_out * oh * ow, 0.0);
    for (std::size_t co = 0; co < c_out; ++co) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t z = 0; z < ow; ++z) {
                double acc = bv[co];
                for (std::size_t ci = 0; ci < c_in; ++ci) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(y * stride + ky) -
                            static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                        for (std::size_t kz = 0; kz < kw; ++kz) {
                            const std::ptrdiff_t iz =
                                static_cast<std::ptrdiff_t>(z * stride + kz) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(w)) continue;
                            acc += x[(ci * h + iy) * w + iz] *
                                   wv[((co * c_in + ci) * kh + ky) * kw + kz];
                        }
                    }
                }
                out[(co * oh + y) * ow + z] = acc;
            }
        }
    }

    auto xn = input.node().get();
    auto wn = weight.node().get();
    auto bn = bias.node().get();
    std::vector<double> xv = input.values();
    std::vector<double> wvc = weight.values();
    auto backward = [=, xv = std::move(xv), wvc = std::move(wvc)](
                        const std::vector<double>& adj, detail::AdjointMap& m) {
        auto& gx = m.of(xn);
        auto& gw = m.of(wn);
        auto& gb = m.of(bn);
        for (std::size_t co = 0; co < c_out; ++co) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t z = 0; z < ow; ++z) {
                    const double g = adj[(co * oh + y) * ow + z];
                    if (g == 0.0) continue;
                    gb[co] += g;
                    for (std::size_t ci = 0; ci < c_in; ++ci) {
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const std::ptrdiff_t iy =
                                static_cast<std::ptrdiff_t>(y * stride + ky) -
                                static_cast<std::ptrdiff_t>(padding);
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kz = 0; kz < kw; ++kz) {
                                const std::ptrdiff_t iz =
                                    static_cast<std::ptrdiff_t>(z * stride + kz) -
                                    static_cast<std::ptrdiff_t>(padding);
                                if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(w)) continue;
                                const std::size_t xi = (ci * h + iy) * w + iz;
                                const std::size_t wi = ((co * c_in + ci) * kh + ky) * kw + kz;
                                gx[xi] += g * wvc[wi];
                                gw[wi] += g * xv[xi];
                            }
                        }
                    }
                }
            }
        }
    };
    return detail::make_op({c_out, oh, ow}, std::move(out), {input, weight, bias},
                           std::move(backward));
}

// Non-overlapping mean pooling over [C,H,W].
inline Tensor avg_pool2d(const Tensor& input, std::size_t window) {
    if (input.rank() != 3) {
        throw DimensionError("avg_pool2d: input must be rank 3 [C,H,W], got " +
                             shape_str(input.shape()));
    }
    if (window < 1) throw ContractError("avg_pool2d: window must be >= 1");
    const std::size_t c = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    if (h % window != 0 || w % window != 0) {
        throw DimensionError("avg_pool2d: spatial size " + std::to_string(h) + "x" +
                             std::to_string(w) + " not divisible by window " +
                             std::to_string(window));
    }
    const std::size_t oh = h / window, ow = w / window;
    const double inv = 1.0 / static_cast<double>(window * window);
    const auto& x = input.values();
    std::vector<double> out(c * oh * ow, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t z = 0; z < ow; ++z) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < window; ++dy) {
                    for (std::size_t dz = 0; dz < window; ++dz) {
                        acc += x[(ci * h + y * window + dy) * w + z * window + dz];
                    }
                }
                out[(ci * oh + y) * ow + z] = acc * inv;
            }
        }
    }
    auto xn = input.node().get();
    auto backward = [=](const std::vector<double>& adj, detail::AdjointMap& m) {
        auto& gx = m.of(xn);
        for (std::size_t ci = 0; ci < c; ++ci) {
            for (std::size_t y = 0; y < oh; ++y) {
                for (std::size_t z = 0; z < ow; ++z) {
                    const double g = adj[(ci * oh + y) * ow + z] * inv;
                    for (std::size_t dy = 0; dy < window; ++dy) {
                        for (std::size_t dz = 0; dz < window; ++dz) {
                            gx[(ci * h + y * window + dy) * w + z * window + dz] += g;
                        }
                    }
                }
            }
        }
    };
    return detail::make_op({c, oh, ow}, std::move(out), {input}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Prototype-matching primitives
// ---------------------------------------------------------------------------

// Channel-wise mean of the feature columns where flags[pixel] != 0.
// flags is plain data (not differentiable); count must be > 0.
inline Tensor masked_mean(const Tensor& features, const std::vector<std::uint8_t>& flags) {
    if (features.rank() != 3) {
        throw DimensionError("masked_mean: features must be rank 3 [C,H,W], got " +
                             shape_str(features.shape()));
    }
    const std::size_t c = features.shape()[0];
    const std::size_t hw = features.shape()[1] * features.shape()[2];
    if (flags.size() != hw) {
        throw DimensionError("masked_mean: flag count " + std::to_string(flags.size()) +
                             " does not match spatial size " + std::to_string(hw));
    }
    std::size_t count = 0;
    for (auto f : flags) count += (f != 0);
    if (count == 0) throw DegenerateMaskError("masked_mean: mask selects no pixels");
    const double inv = 1.0 / static_cast<double>(count);
    const auto& x = features.values();
    std::vector<double> out(c, 0.0);
    for (std::size_t ci = 0; ci < c; ++ci) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
            if (flags[i]) acc += x[ci * hw + i];
        }
        out[ci] = acc * inv;
    }
    auto xn = features.node().get();
    auto backward = [xn, c, hw, inv, flags](const std::vector<double>& adj,
                                            detail::AdjointMap& m) {
        auto& gx = m.of(xn);
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double g = adj[ci] * inv;
            for (std::size_t i = 0; i < hw; ++i) {
                if (flags[i]) gx[ci * hw + i] += g;
            }
        }
    };
    return detail::make_op({c}, std::move(out), {features}, std::move(backward));
}

inline constexpr double kCosineNormFloor = 1e-8;

// Per-pixel cosine similarity between each feature column and a prototype
// vector. Norms are floored at kCosineNormFloor unless epsilon_floor is
// disabled, in which case a near-zero norm is rejected.
inline Tensor cosine_map(const Tensor& features, const Tensor& prototype,
                         bool epsilon_floor = true) {
    if (features.rank() != 3) {
        throw DimensionError("cosine_map: features must be rank 3 [C,H,W], got " +
                             shape_str(features.shape()));
    }
    if (prototype.rank() != 1 || prototype.shape()[0] != features.shape()[0]) {
        throw DimensionError("cosine_map: prototype shape " + shape_str(prototype.shape()) +
                             " does not match feature channel axis (" +
                             std::to_string(features.shape()[0]) + ")");
    }
    const std::size_t c = features.shape()[0];
    const std::size_t h = features.shape()[1], w = features.shape()[2];
    const std::size_t hw = h * w;
    const auto& f = features.values();
    const auto& p = prototype.values();

    double p_sq = 0.0;
    for (std::size_t ci = 0; ci < c; ++ci) p_sq += p[ci] * p[ci];
    const double p_norm_raw = std::sqrt(p_sq);
    if (!epsilon_floor && p_norm_raw < kCosineNormFloor) {
        throw DegenerateInputError("cosine_map: zero-norm prototype with epsilon floor disabled");
    }
    const double p_norm = std::max(p_norm_raw, kCosineNormFloor);

    std::vector<double> out(hw, 0.0);
    std::vector<double> f_norm(hw, 0.0);
    std::vector<double> dot(hw, 0.0);
    std::vector<std::uint8_t> f_floored_v(hw, 0);
    for (std::size_t i = 0; i < hw; ++i) {
        double f_sq = 0.0, d = 0.0;
        for (std::size_t ci = 0; ci < c; ++ci) {
            const double fv = f[ci * hw + i];
            f_sq += fv * fv;
            d += fv * p[ci];
        }
        const double fn_raw = std::sqrt(f_sq);
        if (!epsilon_floor && fn_raw < kCosineNormFloor) {
            throw DegenerateInputError(
                "cosine_map: zero-norm feature column with epsilon floor disabled");
        }
        f_floored_v[i] = fn_raw < kCosineNormFloor;
        f_norm[i] = std::max(fn_raw, kCosineNormFloor);
        dot[i] = d;
        out[i] = d / (f_norm[i] * p_norm);
    }

    auto fn_node = features.node().get();
    auto pn_node = prototype.node().get();
    std::vector<double> fv = features.values();
    std::vector<double> pv = prototype.values();
    const bool p_floored = p_norm_raw < p_norm;
    auto backward = [=, fv = std::move(fv), pv = std::move(pv), f_norm = std::move(f_norm),
                     dot = std::move(dot), f_floored_v = std::move(f_floored_v)](
                        const std::vector<double>& adj, detail::AdjointMap& m) {
        auto& gf = m.of(fn_node);
        auto& gp = m.of(pn_node);
        for (std::size_t i = 0; i < hw; ++i) {
            const double g = adj[i];
            if (g == 0.0) continue;
            const double inv_fp = 1.0 / (f_norm[i] * p_norm);
            const bool f_floored = f_floored_v[i] != 0;
            for (std::size_t ci = 0; ci < c; ++ci) {
                const double fvi = fv[ci * hw + i];
                double df = pv[ci] * inv_fp;
                if (!f_floored) df -= dot[i] * fvi / (f_norm[i] * f_norm[i]) * inv_fp;
                gf[ci * hw + i] += g * df;
                double dp = fvi * inv_fp;
                if (!p_floored) dp -= dot[i] * pv[ci] / (p_norm * p_norm) * inv_fp;
                gp[ci] += g * dp;
            }
        }
    };
    return detail::make_op({h, w}, std::move(out), {features, prototype}, std::move(backward));
}

// sigma(tau * (a - b)) elementwise; the two-way softmax over scaled logits.
inline Tensor scaled_sigmoid_diff(const Tensor& a, const Tensor& b, double tau) {
    detail::check_same_shape(a, b, "scaled_sigmoid_diff");
    if (tau <= 0.0) throw ContractError("scaled_sigmoid_diff: temperature must be > 0");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = 1.0 / (1.0 + std::exp(-tau * (a.values()[i] - b.values()[i])));
    }
    auto an = a.node().get();
    auto bn = b.node().get();
    std::vector<double> ov = out;
    return detail::make_op(a.shape(), std::move(out), {a, b},
                           [an, bn, tau, ov = std::move(ov)](const std::vector<double>& adj,
                                                             detail::AdjointMap& m) {
                               auto& ga = m.of(an);
                               auto& gb = m.of(bn);
                               for (std::size_t i = 0; i < adj.size(); ++i) {
                                   const double d = adj[i] * tau * ov[i] * (1.0 - ov[i]);
                                   ga[i] += d;
                                   gb[i] -= d;
                               }
                           });
}

inline constexpr double kBceClamp = 1e-7;

// Mean binary cross entropy; probabilities clamped to [kBceClamp, 1-kBceClamp].
inline Tensor bce_mean(const Tensor& prob, const Tensor& target) {
    detail::check_same_shape(prob, target, "bce_mean");
    const std::size_t n = prob.size();
    if (n == 0) throw ContractError("bce_mean: empty input");
    double acc = 0.0;
    std::vector<double> clamped(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(prob.values()[i], kBceClamp, 1.0 - kBceClamp);
        clamped[i] = p;
        const double t = target.values()[i];
        acc -= t * std::log(p) + (1.0 - t) * std::log(1.0 - p);
    }
    acc /= static_cast<double>(n);
    auto pn = prob.node().get();
    std::vector<double> raw = prob.values();
    std::vector<double> tv = target.values();
    auto backward = [pn, n, clamped = std::move(clamped), raw = std::move(raw),
                     tv = std::move(tv)](const std::vector<double>& adj, detail::AdjointMap& m) {
        auto& gp = m.of(pn);
        const double g = adj[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (raw[i] <= kBceClamp || raw[i] >= 1.0 - kBceClamp) continue;  // clamp is flat
            gp[i] += g * (clamped[i] - tv[i]) / (clamped[i] * (1.0 - clamped[i]));
        }
    };
    return detail::make_op({}, {acc}, {prob, target}, std::move(backward));
}

// ---------------------------------------------------------------------------
// Backward pass and parameter updates
// ---------------------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Adjoints live in per-pass scratch
// buffers; persistent grads of requires_grad tensors accumulate at the end,
// so two passes without zeroing yield exactly twice the gradient.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(loss.shape()));
    }
    using Node = detail::TensorNode;
    // Iterative post-order DFS over parent edges.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* parent = node->parents[idx++].get();
            if (visited.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    detail::AdjointMap adjoints;
    adjoints.of(loss.node().get())[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (!node->backward_fn) continue;
        auto found = adjoints.buffers.find(node);
        if (found == adjoints.buffers.end()) continue;  // unreached branch
        node->backward_fn(found->second, adjoints);
    }
    for (Node* node : order) {
        if (!node->requires_grad) continue;
        auto found = adjoints.buffers.find(node);
        if (found == adjoints.buffers.end()) continue;
        if (node->grad.empty()) node->grad.assign(node->numel(), 0.0);
        for (std::size_t i = 0; i < node->numel(); ++i) node->grad[i] += found->second[i];
    }
}

inline void zero_grads(const ParamSet& params) {
    for (const auto& p : params) const_cast<Tensor&>(p).zero_grad();
}

// Plain SGD: theta <- theta - lr * grad, touching exactly the given set.
inline void sgd_step(ParamSet& params, double lr) {
    if (lr < 0.0) throw ContractError("sgd_step: learning rate must be >= 0");
    for (auto& p : params) {
        if (!p.has_grad()) {
            throw ContractError("sgd_step: parameter with shape " + shape_str(p.shape()) +
                                " has no gradient");
        }
    }
    for (auto& p : params) {
        auto& v = p.values();
        const auto& g = p.grad();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    }
}

// Central-difference gradient estimate, one probe pair per scalar parameter.
// Independent oracle for backward(); never touches the tape.
inline std::vector<std::vector<double>> finite_diff_grad(const std::function<double()>& loss_fn,
                                                         ParamSet& params, double step) {
    if (step <= 0.0) throw ContractError("finite_diff_grad: step must be > 0");
    std::vector<std::vector<double>> grads;
    grads.reserve(params.size());
    for (auto& p : params) {
        std::vector<double> g(p.size(), 0.0);
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p.values()[i];
            p.values()[i] = orig + step;
            const double up = loss_fn();
            p.values()[i] = orig - step;
            const double down = loss_fn();
            p.values()[i] = orig;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw DegenerateInputError("finite_diff_grad: non-finite loss during probing");
            }
            g[i] = (up - down) / (2.0 * step);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

}  // namespace isa
