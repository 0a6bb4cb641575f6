#pragma once

// Minimal reverse-mode differentiation on a tape.
//
// A Graph owns every node created while building one loss. Nodes are
// appended in creation order, so the tape is already topologically sorted
// and backward() visits each node exactly once, after all of its consumers
// have deposited their contributions.
//
// Scalar type T is float for training and double for gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "pvae/errors.hpp"
#include "pvae/projector.hpp"
#include "pvae/rng.hpp"

namespace pvae::dg {

template <typename T>
struct Tensor {
    std::vector<int> shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s, T fill = T{}) : shape(std::move(s)), data(count(shape), fill) {}
    Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape)) throw ShapeError("tensor", "payload does not match shape");
    }

    static std::size_t count(const std::vector<int>& s) {
        return std::accumulate(s.begin(), s.end(), std::size_t{1},
                               [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
    }

    std::size_t numel() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    T item() const { return data.at(0); }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out + "]";
}

/// Trainable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    Tensor<T> grad;

    void zero_grad() { grad = Tensor<T>(value.shape); }
};

/// Named parameters in registration order; the order fixes checkpoint layout.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& add(const std::string& name, Tensor<T> init) {
        if (index_.count(name)) throw ConfigError("duplicate parameter " + name);
        index_[name] = params_.size();
        params_.push_back(Parameter<T>{name, std::move(init), {}});
        params_.back().zero_grad();
        return params_.back();
    }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter " + name);
        return params_[it->second];
    }
    const Parameter<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw DataError("unknown parameter " + name);
        return params_[it->second];
    }

    std::vector<Parameter<T>>& all() { return params_; }
    const std::vector<Parameter<T>>& all() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.value.numel();
        return n;
    }

private:
    std::vector<Parameter<T>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename T>
class Graph {
public:
    using Backward = std::function<void(Graph&, int)>;

    struct Node {
        std::string op;
        Tensor<T> value;
        std::vector<T> grad; // empty until something flows in
        std::vector<int> parents;
        Backward backward;
        Parameter<T>* param = nullptr;
        bool requires_grad = false;
    };

    Var constant(Tensor<T> v) { return push("constant", std::move(v), {}, nullptr, false); }

    /// Leaf whose gradient is wanted (inputs in gradient checks).
    Var variable(Tensor<T> v) { return push("variable", std::move(v), {}, nullptr, true); }

    Var parameter(Parameter<T>& p) {
        Var v = push("parameter", p.value, {}, nullptr, true);
        nodes_.back().param = &p;
        return v;
    }

    /// Appends an op node; the backward closure is dropped when no parent needs gradients.
    Var make(std::string op, Tensor<T> value, std::vector<int> parents, Backward bw) {
        const bool rg = std::any_of(parents.begin(), parents.end(), [&](int p) { return nodes_[p].requires_grad; });
        return push(std::move(op), std::move(value), std::move(parents), rg ? std::move(bw) : nullptr, rg);
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)).value; }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }
    bool requires_grad(Var v) const { return node(v.id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Gradient buffer of node `id`, allocated on first use; null if the node needs no gradient.
    T* grad_buffer(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad.assign(n.value.numel(), T{});
        return n.grad.data();
    }

    std::span<const T> grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }

    /// Gradient of the last backward() with respect to `v` (zeros if nothing flowed).
    Tensor<T> grad(Var v) const {
        const Node& n = node(v.id);
        Tensor<T> g(n.value.shape);
        if (!n.grad.empty()) g.data = n.grad;
        return g;
    }

    /// Reverse sweep from a scalar loss; parameter gradients are added to Parameter::grad.
    void backward(Var loss) {
        if (value(loss).numel() != 1) {
            throw ShapeError("backward", "loss must be scalar, got " + shape_str(value(loss).shape));
        }
        for (auto& n : nodes_) n.grad.clear();
        if (!nodes_[static_cast<std::size_t>(loss.id)].requires_grad) return;
        grad_buffer(loss.id)[0] = T{1};
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.grad.empty()) continue;
            if (n.backward) n.backward(*this, id);
            if (n.param) {
                auto& pg = n.param->grad;
                if (pg.numel() != n.grad.size()) pg = Tensor<T>(n.param->value.shape);
                for (std::size_t i = 0; i < n.grad.size(); ++i) pg.data[i] += n.grad[i];
            }
        }
    }

private:
    Var push(std::string op, Tensor<T> value, std::vector<int> parents, Backward bw, bool rg) {
        Node n;
        n.op = std::move(op);
        n.value = std::move(value);
        n.parents = std::move(parents);
        n.backward = std::move(bw);
        n.requires_grad = rg;
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitives

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapC = Eigen::Map<const RowMat<T>>;
template <typename T>
using Map = Eigen::Map<RowMat<T>>;

inline void require(bool ok, const char* op, const std::string& what) {
    if (!ok) throw ShapeError(op, what);
}

template <typename T>
void im2col3(const T* x, int c, int h, int w, T* cols) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int ch = 0; ch < c; ++ch) {
        const T* xc = x + static_cast<std::size_t>(ch) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                T* row = cols + (static_cast<std::size_t>(ch) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int iy = y + ky - 1;
                    T* out = row + static_cast<std::size_t>(y) * w;
                    if (iy < 0 || iy >= h) {
                        std::fill(out, out + w, T{});
                        continue;
                    }
                    const T* in = xc + static_cast<std::size_t>(iy) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int ix = xx + kx - 1;
                        out[xx] = (ix >= 0 && ix < w) ? in[ix] : T{};
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im3_add(const T* cols, int c, int h, int w, T* dx) {
    const std::size_t hw = static_cast<std::size_t>(h) * w;
    for (int ch = 0; ch < c; ++ch) {
        T* xc = dx + static_cast<std::size_t>(ch) * hw;
        for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
                const T* row = cols + (static_cast<std::size_t>(ch) * 9 + ky * 3 + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    const int iy = y + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    const T* in = row + static_cast<std::size_t>(y) * w;
                    T* out = xc + static_cast<std::size_t>(iy) * w;
                    for (int xx = 0; xx < w; ++xx) {
                        const int ix = xx + kx - 1;
                        if (ix >= 0 && ix < w) out[ix] += in[xx];
                    }
                }
            }
        }
    }
}

} // namespace detail

/// y = x W + b with x [N, F], W [F, G], b [G].
template <typename T>
Var dense(Graph<T>& g, Var x, Var w, Var b) {
    const auto& X = g.value(x);
    const auto& W = g.value(w);
    const auto& B = g.value(b);
    detail::require(X.rank() == 2 && W.rank() == 2 && B.rank() == 1, "dense", "expects x[N,F], W[F,G], b[G]");
    const int n = X.dim(0), f = X.dim(1), o = W.dim(1);
    detail::require(W.dim(0) == f && B.dim(0) == o, "dense",
                    "x" + shape_str(X.shape) + " incompatible with W" + shape_str(W.shape));
    Tensor<T> Y({n, o});
    detail::Map<T> ym(Y.data.data(), n, o);
    ym.noalias() = detail::MapC<T>(X.data.data(), n, f) * detail::MapC<T>(W.data.data(), f, o);
    ym.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(B.data.data(), o);
    return g.make("dense", std::move(Y), {x.id, w.id, b.id}, [=](Graph<T>& gr, int self) {
        detail::MapC<T> dy(gr.grad_of(self).data(), n, o);
        if (T* dx = gr.grad_buffer(x.id)) {
            detail::Map<T>(dx, n, f).noalias() += dy * detail::MapC<T>(gr.value(w).data.data(), f, o).transpose();
        }
        if (T* dw = gr.grad_buffer(w.id)) {
            detail::Map<T>(dw, f, o).noalias() += detail::MapC<T>(gr.value(x).data.data(), n, f).transpose() * dy;
        }
        if (T* db = gr.grad_buffer(b.id)) {
            // plain loops: Eigen's vectorized sums reorder by buffer alignment
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < o; ++j) db[j] += dy(i, j);
        }
    });
}

/// 3x3 convolution, stride 1, zero padding 1: x [N,C,H,W], w [O,C,3,3], b [O].
template <typename T>
Var conv2d(Graph<T>& g, Var x, Var w, Var b) {
    const auto& X = g.value(x);
    const auto& W = g.value(w);
    const auto& B = g.value(b);
    detail::require(X.rank() == 4 && W.rank() == 4 && B.rank() == 1, "conv2d", "expects x[N,C,H,W], w[O,C,3,3], b[O]");
    const int n = X.dim(0), c = X.dim(1), h = X.dim(2), wd = X.dim(3), o = W.dim(0);
    detail::require(W.dim(1) == c && W.dim(2) == 3 && W.dim(3) == 3 && B.dim(0) == o, "conv2d",
                    "x" + shape_str(X.shape) + " incompatible with w" + shape_str(W.shape));
    const int k = c * 9, hw = h * wd;
    Tensor<T> Y({n, o, h, wd});
    std::vector<T> cols(static_cast<std::size_t>(k) * hw);
    detail::MapC<T> wm(W.data.data(), o, k);
    const Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(B.data.data(), o);
    for (int i = 0; i < n; ++i) {
        detail::im2col3(X.data.data() + static_cast<std::size_t>(i) * c * hw, c, h, wd, cols.data());
        detail::Map<T> ym(Y.data.data() + static_cast<std::size_t>(i) * o * hw, o, hw);
        ym.noalias() = wm * detail::MapC<T>(cols.data(), k, hw);
        ym.colwise() += bv;
    }
    return g.make("conv2d", std::move(Y), {x.id, w.id, b.id}, [=](Graph<T>& gr, int self) {
        const auto& Xv = gr.value(x);
        const auto& Wv = gr.value(w);
        T* dx = gr.grad_buffer(x.id);
        T* dw = gr.grad_buffer(w.id);
        T* db = gr.grad_buffer(b.id);
        std::vector<T> colbuf(static_cast<std::size_t>(k) * hw);
        const T* dy_all = gr.grad_of(self).data();
        detail::MapC<T> wmv(Wv.data.data(), o, k);
        for (int i = 0; i < n; ++i) {
            detail::MapC<T> dy(dy_all + static_cast<std::size_t>(i) * o * hw, o, hw);
            if (db) {
                for (int r = 0; r < o; ++r) {
                    T acc{};
                    for (int q = 0; q < hw; ++q) acc += dy(r, q);
                    db[r] += acc;
                }
            }
            if (dw) {
                detail::im2col3(Xv.data.data() + static_cast<std::size_t>(i) * c * hw, c, h, wd, colbuf.data());
                detail::Map<T>(dw, o, k).noalias() += dy * detail::MapC<T>(colbuf.data(), k, hw).transpose();
            }
            if (dx) {
                detail::Map<T>(colbuf.data(), k, hw).noalias() = wmv.transpose() * dy;
                detail::col2im3_add(colbuf.data(), c, h, wd, dx + static_cast<std::size_t>(i) * c * hw);
            }
        }
    });
}

/// 2x average pooling over the last two axes of [N,C,H,W].
template <typename T>
Var downsample(Graph<T>& g, Var x) {
    const auto& X = g.value(x);
    detail::require(X.rank() == 4 && X.dim(2) % 2 == 0 && X.dim(3) % 2 == 0, "downsample",
                    "expects [N,C,H,W] with even H, W; got " + shape_str(X.shape));
    const int nc = X.dim(0) * X.dim(1), h = X.dim(2), w = X.dim(3), ho = h / 2, wo = w / 2;
    Tensor<T> Y({X.dim(0), X.dim(1), ho, wo});
    for (int p = 0; p < nc; ++p) {
        const T* in = X.data.data() + static_cast<std::size_t>(p) * h * w;
        T* out = Y.data.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx)
                out[y * wo + xx] = T(0.25) * (in[2 * y * w + 2 * xx] + in[2 * y * w + 2 * xx + 1] +
                                              in[(2 * y + 1) * w + 2 * xx] + in[(2 * y + 1) * w + 2 * xx + 1]);
    }
    return g.make("downsample", std::move(Y), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        const T* dy = gr.grad_of(self).data();
        for (int p = 0; p < nc; ++p) {
            T* o = dx + static_cast<std::size_t>(p) * h * w;
            const T* d = dy + static_cast<std::size_t>(p) * ho * wo;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) o[y * w + xx] += T(0.25) * d[(y / 2) * wo + xx / 2];
        }
    });
}

/// 2x nearest-neighbour upsampling of [N,C,H,W].
template <typename T>
Var upsample(Graph<T>& g, Var x) {
    const auto& X = g.value(x);
    detail::require(X.rank() == 4, "upsample", "expects [N,C,H,W]; got " + shape_str(X.shape));
    const int nc = X.dim(0) * X.dim(1), h = X.dim(2), w = X.dim(3), ho = 2 * h, wo = 2 * w;
    Tensor<T> Y({X.dim(0), X.dim(1), ho, wo});
    for (int p = 0; p < nc; ++p) {
        const T* in = X.data.data() + static_cast<std::size_t>(p) * h * w;
        T* out = Y.data.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int y = 0; y < ho; ++y)
            for (int xx = 0; xx < wo; ++xx) out[y * wo + xx] = in[(y / 2) * w + xx / 2];
    }
    return g.make("upsample", std::move(Y), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        const T* dy = gr.grad_of(self).data();
        for (int p = 0; p < nc; ++p) {
            T* o = dx + static_cast<std::size_t>(p) * h * w;
            const T* d = dy + static_cast<std::size_t>(p) * ho * wo;
            for (int y = 0; y < ho; ++y)
                for (int xx = 0; xx < wo; ++xx) o[(y / 2) * w + xx / 2] += d[y * wo + xx];
        }
    });
}

namespace detail {

template <typename T, typename F, typename D>
Var unary(Graph<T>& g, const char* op, Var x, F f, D dfdx) {
    const auto& X = g.value(x);
    Tensor<T> Y(X.shape);
    for (std::size_t i = 0; i < X.numel(); ++i) Y.data[i] = f(X.data[i]);
    return g.make(op, std::move(Y), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        const auto& xv = gr.value(x).data;
        const auto& yv = gr.value(Var{self}).data;
        auto dy = gr.grad_of(self);
        for (std::size_t i = 0; i < xv.size(); ++i) dx[i] += dy[i] * dfdx(xv[i], yv[i]);
    });
}

template <typename T>
void require_same(const Graph<T>& g, Var a, Var b, const char* op) {
    require(g.value(a).shape == g.value(b).shape, op,
            "shapes " + shape_str(g.value(a).shape) + " and " + shape_str(g.value(b).shape) + " differ");
}

} // namespace detail

template <typename T>
Var leaky_relu(Graph<T>& g, Var x, T slope = T(0.1)) {
    return detail::unary(
        g, "leaky_relu", x, [=](T v) { return v > 0 ? v : slope * v; },
        [=](T v, T) { return v > 0 ? T(1) : slope; });
}

/// log(1 + e^x), evaluated stably.
template <typename T>
Var softplus(Graph<T>& g, Var x) {
    return detail::unary(
        g, "softplus", x, [](T v) { return v > 0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); },
        [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Var exp(Graph<T>& g, Var x) {
    return detail::unary(
        g, "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

/// a * x + b elementwise.
template <typename T>
Var affine(Graph<T>& g, Var x, T a, T b = T{}) {
    return detail::unary(
        g, "affine", x, [=](T v) { return a * v + b; }, [=](T, T) { return a; });
}

/// Smooth clamp to (-limit, limit): limit * tanh(x / limit).
template <typename T>
Var soft_clamp(Graph<T>& g, Var x, T limit) {
    return detail::unary(
        g, "soft_clamp", x, [=](T v) { return limit * std::tanh(v / limit); },
        [=](T, T y) { return T(1) - (y / limit) * (y / limit); });
}

template <typename T>
Var add(Graph<T>& g, Var a, Var b) {
    detail::require_same(g, a, b, "add");
    Tensor<T> Y = g.value(a);
    const auto& B = g.value(b).data;
    for (std::size_t i = 0; i < Y.numel(); ++i) Y.data[i] += B[i];
    return g.make("add", std::move(Y), {a.id, b.id}, [=](Graph<T>& gr, int self) {
        auto dy = gr.grad_of(self);
        for (Var v : {a, b})
            if (T* d = gr.grad_buffer(v.id))
                for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
    });
}

template <typename T>
Var sub(Graph<T>& g, Var a, Var b) {
    return add(g, a, affine(g, b, T(-1)));
}

template <typename T>
Var mul(Graph<T>& g, Var a, Var b) {
    detail::require_same(g, a, b, "mul");
    Tensor<T> Y = g.value(a);
    const auto& B = g.value(b).data;
    for (std::size_t i = 0; i < Y.numel(); ++i) Y.data[i] *= B[i];
    return g.make("mul", std::move(Y), {a.id, b.id}, [=](Graph<T>& gr, int self) {
        auto dy = gr.grad_of(self);
        const auto& av = gr.value(a).data;
        const auto& bv = gr.value(b).data;
        if (T* da = gr.grad_buffer(a.id))
            for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv[i];
        if (T* db = gr.grad_buffer(b.id))
            for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
    });
}

/// Concatenation along axis 1 (features or channels); other axes must agree.
template <typename T>
Var concat(Graph<T>& g, const std::vector<Var>& parts) {
    detail::require(!parts.empty(), "concat", "no inputs");
    const auto& first = g.value(parts.front());
    detail::require(first.rank() >= 2, "concat", "inputs need rank >= 2");
    const int n = first.dim(0);
    const std::size_t inner = Tensor<T>::count({first.shape.begin() + 2, first.shape.end()});
    std::vector<int> widths;
    int total = 0;
    for (Var p : parts) {
        const auto& s = g.value(p).shape;
        detail::require(s.size() == first.shape.size() && s[0] == n &&
                            std::equal(s.begin() + 2, s.end(), first.shape.begin() + 2),
                        "concat", "incompatible part " + shape_str(s) + " vs " + shape_str(first.shape));
        widths.push_back(s[1]);
        total += s[1];
    }
    std::vector<int> shape = first.shape;
    shape[1] = total;
    Tensor<T> Y(shape);
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) {
        std::size_t off = static_cast<std::size_t>(i) * total * inner;
        for (std::size_t p = 0; p < parts.size(); ++p) {
            const std::size_t len = static_cast<std::size_t>(widths[p]) * inner;
            const T* src = g.value(parts[p]).data.data() + static_cast<std::size_t>(i) * len;
            std::copy(src, src + len, Y.data.data() + off);
            off += len;
        }
    }
    for (Var p : parts) ids.push_back(p.id);
    return g.make("concat", std::move(Y), ids, [=](Graph<T>& gr, int self) {
        auto dy = gr.grad_of(self);
        for (int i = 0; i < n; ++i) {
            std::size_t off = static_cast<std::size_t>(i) * total * inner;
            for (std::size_t p = 0; p < parts.size(); ++p) {
                const std::size_t len = static_cast<std::size_t>(widths[p]) * inner;
                if (T* d = gr.grad_buffer(parts[p].id)) {
                    T* dst = d + static_cast<std::size_t>(i) * len;
                    for (std::size_t j = 0; j < len; ++j) dst[j] += dy[off + j];
                }
                off += len;
            }
        }
    });
}

/// Channels/features [start, start + len) along axis 1.
template <typename T>
Var slice(Graph<T>& g, Var x, int start, int len) {
    const auto& X = g.value(x);
    detail::require(X.rank() >= 2 && start >= 0 && len > 0 && start + len <= X.dim(1), "slice",
                    "range [" + std::to_string(start) + "," + std::to_string(start + len) + ") outside axis 1 of " +
                        shape_str(X.shape));
    const int n = X.dim(0), c = X.dim(1);
    const std::size_t inner = Tensor<T>::count({X.shape.begin() + 2, X.shape.end()});
    std::vector<int> shape = X.shape;
    shape[1] = len;
    Tensor<T> Y(shape);
    for (int i = 0; i < n; ++i) {
        const T* src = X.data.data() + (static_cast<std::size_t>(i) * c + start) * inner;
        std::copy(src, src + len * inner, Y.data.data() + static_cast<std::size_t>(i) * len * inner);
    }
    return g.make("slice", std::move(Y), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        auto dy = gr.grad_of(self);
        for (int i = 0; i < n; ++i) {
            T* dst = dx + (static_cast<std::size_t>(i) * c + start) * inner;
            const std::size_t base = static_cast<std::size_t>(i) * len * inner;
            for (std::size_t j = 0; j < len * inner; ++j) dst[j] += dy[base + j];
        }
    });
}

/// Same data, new shape with equal element count.
template <typename T>
Var reshape(Graph<T>& g, Var x, std::vector<int> shape) {
    Tensor<T> Y = g.value(x);
    detail::require(Tensor<T>::count(shape) == Y.numel(), "reshape",
                    shape_str(Y.shape) + " cannot become " + shape_str(shape));
    Y.shape = std::move(shape);
    return g.make("reshape", std::move(Y), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        auto dy = gr.grad_of(self);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
}

/// Sum of every element, shape [1].
template <typename T>
Var reduce_sum(Graph<T>& g, Var x) {
    T s{};
    for (T v : g.value(x).data) s += v;
    return g.make("reduce_sum", Tensor<T>({1}, std::vector<T>{s}), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        const T d = gr.grad_of(self)[0];
        for (std::size_t i = 0; i < gr.value(x).numel(); ++i) dx[i] += d;
    });
}

/// Sum over all axes but the first: [N, ...] -> [N].
template <typename T>
Var sum_per_example(Graph<T>& g, Var x) {
    const auto& X = g.value(x);
    detail::require(X.rank() >= 1, "sum_per_example", "scalar input");
    const int n = X.dim(0);
    const std::size_t inner = X.numel() / static_cast<std::size_t>(n);
    Tensor<T> Y({n});
    for (int i = 0; i < n; ++i)
        for (std::size_t j = 0; j < inner; ++j) Y.data[i] += X.data[static_cast<std::size_t>(i) * inner + j];
    return g.make("sum_per_example", std::move(Y), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        auto dy = gr.grad_of(self);
        for (int i = 0; i < n; ++i)
            for (std::size_t j = 0; j < inner; ++j) dx[static_cast<std::size_t>(i) * inner + j] += dy[i];
    });
}

/**
 * Parallel-beam projection of every example: x [N, ...] holding N square
 * images, one operator per example (or one shared). Output [N, A * bins].
 */
template <typename T>
Var radon(Graph<T>& g, Var x, std::vector<const RadonOperator*> ops) {
    const auto& X = g.value(x);
    const int n = X.dim(0);
    if (ops.size() == 1 && n > 1) ops.assign(static_cast<std::size_t>(n), ops.front());
    detail::require(static_cast<int>(ops.size()) == n, "radon", "one projector per example required");
    const std::size_t img = X.numel() / static_cast<std::size_t>(n);
    const std::size_t rows = ops.front()->sino_size();
    for (const auto* op : ops) {
        detail::require(op->image_size() == img, "radon", "image size does not match projector");
        detail::require(op->sino_size() == rows, "radon", "examples in a batch need equal angle counts");
    }
    Tensor<T> Y({n, static_cast<int>(rows)});
    for (int i = 0; i < n; ++i) {
        ops[static_cast<std::size_t>(i)]->template forward<T>(
            std::span<const T>(X.data.data() + i * img, img), std::span<T>(Y.data.data() + i * rows, rows));
    }
    return g.make("radon", std::move(Y), {x.id}, [=](Graph<T>& gr, int self) {
        T* dx = gr.grad_buffer(x.id);
        auto dy = gr.grad_of(self);
        for (int i = 0; i < n; ++i) {
            ops[static_cast<std::size_t>(i)]->template adjoint_accumulate<T>(dy.subspan(i * rows, rows),
                                                                            std::span<T>(dx + i * img, img));
        }
    });
}

/**
 * Per-example Poisson negative log-likelihood of `counts` given line
 * integrals s [N, M]: sum_j rate_j - k_j ln rate_j + ln k_j!, with
 * rate = scale * s + eps floored at eps. Output [N].
 */
template <typename T>
Var poisson_nll(Graph<T>& g, Var s, const Tensor<T>& counts, double scale, double eps = kRateFloor) {
    const auto& S = g.value(s);
    detail::require(S.shape == counts.shape && S.rank() == 2, "poisson_nll",
                    "line integrals " + shape_str(S.shape) + " vs counts " + shape_str(counts.shape));
    const int n = S.dim(0), m = S.dim(1);
    Tensor<T> Y({n});
    for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = 0; j < m; ++j) {
            const std::size_t k = static_cast<std::size_t>(i) * m + j;
            const double lam = std::max(scale * static_cast<double>(S.data[k]) + eps, eps);
            const double c = static_cast<double>(counts.data[k]);
            acc += lam - c * std::log(lam) + std::lgamma(c + 1.0);
        }
        Y.data[static_cast<std::size_t>(i)] = static_cast<T>(acc);
    }
    return g.make("poisson_nll", std::move(Y), {s.id}, [=](Graph<T>& gr, int self) {
        T* ds = gr.grad_buffer(s.id);
        auto dy = gr.grad_of(self);
        const auto& sv = gr.value(s).data;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j < m; ++j) {
                const std::size_t k = static_cast<std::size_t>(i) * m + j;
                if (sv[k] < 0) continue; // floored: rate is locally constant
                const double lam = scale * static_cast<double>(sv[k]) + eps;
                ds[k] += dy[i] * static_cast<T>(scale * (1.0 - static_cast<double>(counts.data[k]) / lam));
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Gaussian utilities

inline constexpr double kLogVarLimit = 10.0;

template <typename T>
struct GaussianParams {
    Var mean;
    Var logvar;
};

/// Standard normal noise with the shape of `like`.
template <typename T>
Tensor<T> standard_normal(const std::vector<int>& shape, Rng& rng) {
    Tensor<T> eta(shape);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (auto& v : eta.data) v = static_cast<T>(nd(rng));
    return eta;
}

/// z = mean + exp(logvar / 2) * eta with the supplied noise.
template <typename T>
Var reparameterize(Graph<T>& g, const GaussianParams<T>& q, const Tensor<T>& eta) {
    detail::require(g.value(q.mean).shape == eta.shape, "reparameterize", "noise shape mismatch");
    const Var std_dev = exp(g, affine(g, q.logvar, T(0.5)));
    return add(g, q.mean, mul(g, std_dev, g.constant(eta)));
}

template <typename T>
Var reparameterize(Graph<T>& g, const GaussianParams<T>& q, Rng& rng) {
    return reparameterize(g, q, standard_normal<T>(g.value(q.mean).shape, rng));
}

/// Per-example KL( N(mean, e^logvar) || N(0, I) ), summed over latent elements: [N].
template <typename T>
Var kl_std_normal_per_example(Graph<T>& g, const GaussianParams<T>& q) {
    const Var var = exp(g, q.logvar);
    const Var m2 = mul(g, q.mean, q.mean);
    const Var inner = sub(g, add(g, var, m2), q.logvar);
    return sum_per_example(g, affine(g, inner, T(0.5), T(-0.5)));
}

template <typename T>
Var kl_std_normal(Graph<T>& g, const GaussianParams<T>& q) {
    return reduce_sum(g, kl_std_normal_per_example(g, q));
}

} // namespace pvae::dg
