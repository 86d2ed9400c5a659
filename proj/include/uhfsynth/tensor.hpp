#pragma once

// N-dimensional double tensors with reverse-mode automatic differentiation.
// Covers exactly the operator set the channel-attention network needs:
// elementwise arithmetic, batched matmul, grouped same-padding conv2d,
// pixel shuffle/unshuffle, layer norm, softmax, GELU/tanh, L2 normalization,
// structural ops and full-tensor reductions. Every op checks its output for
// non-finite values; violations throw instead of propagating silently.

#include <algorithm>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "uhfsynth/common.hpp"

namespace uhfsynth {

// ---------------------------------------------------------------------------
// Shape
// ---------------------------------------------------------------------------

struct Shape {
    std::vector<int64_t> dims;

    Shape() = default;
    Shape(std::initializer_list<int64_t> d) : dims(d) { validate(); }
    explicit Shape(std::vector<int64_t> d) : dims(std::move(d)) { validate(); }

    void validate() const {
        for (int64_t d : dims) check(d >= 1, "Shape: every dim must be >= 1, got ", str());
    }

    int ndim() const { return static_cast<int>(dims.size()); }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : dims) n *= d;
        return n;
    }

    int64_t operator[](int i) const { return dims[static_cast<size_t>(i)]; }

    bool operator==(const Shape& o) const { return dims == o.dims; }
    bool operator!=(const Shape& o) const { return dims != o.dims; }

    std::string str() const {
        std::string s = "[";
        for (size_t i = 0; i < dims.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(dims[i]);
        }
        return s + "]";
    }
};

inline int normalize_axis(int axis, int ndim) {
    int a = axis < 0 ? axis + ndim : axis;
    check(a >= 0 && a < ndim, "axis ", axis, " out of range for ndim ", ndim);
    return a;
}

// ---------------------------------------------------------------------------
// Autograd graph
// ---------------------------------------------------------------------------

namespace autograd {

struct Node {
    uint64_t seq = 0;
    int64_t numel = 0;
    bool leaf = false;
    std::vector<std::shared_ptr<Node>> parents; // entries may be null
    std::vector<real> grad;                     // allocated lazily
    std::function<void(Node&)> backfn;          // reads this->grad, accumulates into parents

    std::vector<real>& grad_buf() {
        if (static_cast<int64_t>(grad.size()) != numel) grad.assign(static_cast<size_t>(numel), 0.0);
        return grad;
    }
};

inline uint64_t next_seq() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

} // namespace autograd

/// RAII scope that disables graph recording (inference, finite differences).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(autograd::grad_mode()) { autograd::grad_mode() = false; }
    ~NoGradGuard() { autograd::grad_mode() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<real> data)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<real>>(std::move(data))) {
        check(static_cast<int64_t>(data_->size()) == shape_.numel(), "Tensor: data length ",
              data_->size(), " does not match shape ", shape_.str());
    }

    static Tensor zeros(const Shape& s) { return full(s, 0.0); }
    static Tensor ones(const Shape& s) { return full(s, 1.0); }
    static Tensor full(const Shape& s, real v) {
        return Tensor(s, std::vector<real>(static_cast<size_t>(s.numel()), v));
    }
    static Tensor scalar(real v) { return Tensor(Shape{1}, {v}); }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int64_t numel() const { return shape_.numel(); }
    int ndim() const { return shape_.ndim(); }

    const std::vector<real>& data() const { return *data_; }
    real operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    real item() const {
        check(numel() == 1, "item(): tensor is not scalar, shape ", shape_.str());
        return (*data_)[0];
    }

    /// Direct write access. Only valid on tensors not captured by a live
    /// graph (parameters between optimizer steps, buffers under assembly).
    std::vector<real>& mutable_data() { return *data_; }

    std::shared_ptr<const std::vector<real>> data_ptr() const { return data_; }

    // --- autodiff ---

    Tensor& set_requires_grad(bool on) {
        if (on) {
            if (!node_ || !node_->leaf) {
                node_ = std::make_shared<autograd::Node>();
                node_->seq = autograd::next_seq();
                node_->numel = numel();
                node_->leaf = true;
            }
        } else {
            node_.reset();
        }
        return *this;
    }

    bool requires_grad() const { return node_ != nullptr; }
    const std::shared_ptr<autograd::Node>& autograd_node() const { return node_; }

    bool grad_populated() const { return node_ && !node_->grad.empty(); }

    const std::vector<real>& grad() const {
        check(node_ != nullptr, "grad(): tensor does not require grad");
        check(!node_->grad.empty(), "grad(): gradient not populated; run backward() first");
        return node_->grad;
    }

    void zero_grad() {
        if (node_) node_->grad.assign(static_cast<size_t>(numel()), 0.0);
    }

    /// Value copy detached from any graph.
    Tensor detach() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    /// Deep copy of the buffer (still detached).
    Tensor clone_data() const { return Tensor(shape_, *data_); }

    // internal: attach a freshly created op node
    void attach_node(std::shared_ptr<autograd::Node> n) { node_ = std::move(n); }

private:
    Shape shape_;
    std::shared_ptr<std::vector<real>> data_;
    std::shared_ptr<autograd::Node> node_;
};

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

inline void ensure_finite(const std::vector<real>& v, const char* op) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            fail(op, ": non-finite value ", v[i], " at flat index ", i);
    }
}

/// Wraps op outputs: records a graph node when grad mode is on and any input
/// participates. `back` reads self.grad and accumulates into parent grads.
inline Tensor op_result(Shape shape, std::vector<real> data, const char* op,
                        std::initializer_list<const Tensor*> inputs,
                        std::function<void(autograd::Node&)> back) {
    ensure_finite(data, op);
    Tensor out(std::move(shape), std::move(data));
    if (autograd::grad_mode()) {
        bool any = false;
        for (const Tensor* t : inputs) any = any || (t && t->requires_grad());
        if (any) {
            auto node = std::make_shared<autograd::Node>();
            node->seq = autograd::next_seq();
            node->numel = out.numel();
            for (const Tensor* t : inputs) node->parents.push_back(t ? t->autograd_node() : nullptr);
            node->backfn = std::move(back);
            out.attach_node(std::move(node));
        }
    }
    return out;
}

inline void accumulate(std::vector<real>& dst, const std::vector<real>& src) {
    for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

} // namespace detail

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), op, ": shape mismatch ", a.shape().str(), " vs ",
          b.shape().str());
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<real> out(static_cast<size_t>(a.numel()));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto na = a.autograd_node();
    auto nb = b.autograd_node();
    return detail::op_result(a.shape(), std::move(out), "add", {&a, &b},
                             [na, nb](autograd::Node& self) {
                                 if (na) detail::accumulate(na->grad_buf(), self.grad);
                                 if (nb) detail::accumulate(nb->grad_buf(), self.grad);
                             });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<real> out(static_cast<size_t>(a.numel()));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto na = a.autograd_node();
    auto nb = b.autograd_node();
    return detail::op_result(a.shape(), std::move(out), "sub", {&a, &b},
                             [na, nb](autograd::Node& self) {
                                 if (na) detail::accumulate(na->grad_buf(), self.grad);
                                 if (nb) {
                                     auto& g = nb->grad_buf();
                                     for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                 }
                             });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<real> out(static_cast<size_t>(a.numel()));
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto na = a.autograd_node();
    auto nb = b.autograd_node();
    auto da = a.data_ptr();
    auto db = b.data_ptr();
    return detail::op_result(a.shape(), std::move(out), "mul", {&a, &b},
                             [na, nb, da, db](autograd::Node& self) {
                                 if (na) {
                                     auto& g = na->grad_buf();
                                     for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*db)[i];
                                 }
                                 if (nb) {
                                     auto& g = nb->grad_buf();
                                     for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*da)[i];
                                 }
                             });
}

inline Tensor scalar_mul(const Tensor& a, real s) {
    std::vector<real> out(static_cast<size_t>(a.numel()));
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    auto na = a.autograd_node();
    return detail::op_result(a.shape(), std::move(out), "scalar_mul", {&a},
                             [na, s](autograd::Node& self) {
                                 if (!na) return;
                                 auto& g = na->grad_buf();
                                 for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
                             });
}

inline Tensor scalar_add(const Tensor& a, real s) {
    std::vector<real> out(static_cast<size_t>(a.numel()));
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
    auto na = a.autograd_node();
    return detail::op_result(a.shape(), std::move(out), "scalar_add", {&a},
                             [na](autograd::Node& self) {
                                 if (na) detail::accumulate(na->grad_buf(), self.grad);
                             });
}

/// |x| with subgradient 0 at exact ties.
inline Tensor abs(const Tensor& a) {
    std::vector<real> out(static_cast<size_t>(a.numel()));
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(av[i]);
    auto na = a.autograd_node();
    auto da = a.data_ptr();
    return detail::op_result(a.shape(), std::move(out), "abs", {&a},
                             [na, da](autograd::Node& self) {
                                 if (!na) return;
                                 auto& g = na->grad_buf();
                                 for (size_t i = 0; i < g.size(); ++i) {
                                     real x = (*da)[i];
                                     real sign = x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0);
                                     g[i] += self.grad[i] * sign;
                                 }
                             });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    real acc = 0;
    for (real v : a.data()) acc += v;
    auto na = a.autograd_node();
    return detail::op_result(Shape{1}, {acc}, "sum", {&a}, [na](autograd::Node& self) {
        if (!na) return;
        auto& g = na->grad_buf();
        real up = self.grad[0];
        for (auto& v : g) v += up;
    });
}

inline Tensor mean(const Tensor& a) {
    real acc = 0;
    for (real v : a.data()) acc += v;
    real n = static_cast<real>(a.numel());
    auto na = a.autograd_node();
    return detail::op_result(Shape{1}, {acc / n}, "mean", {&a}, [na, n](autograd::Node& self) {
        if (!na) return;
        auto& g = na->grad_buf();
        real up = self.grad[0] / n;
        for (auto& v : g) v += up;
    });
}

// ---------------------------------------------------------------------------
// Matmul (batched over leading dims)
// ---------------------------------------------------------------------------

namespace detail {
using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;
} // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.ndim() >= 2 && b.ndim() >= 2, "matmul: tensors must have >= 2 dims, got ",
          a.shape().str(), " and ", b.shape().str());
    check(a.ndim() == b.ndim(), "matmul: rank mismatch ", a.shape().str(), " vs ", b.shape().str());
    int nd = a.ndim();
    int64_t batch = 1;
    for (int i = 0; i < nd - 2; ++i) {
        check(a.shape()[i] == b.shape()[i], "matmul: batch dim ", i, " mismatch ", a.shape().str(),
              " vs ", b.shape().str());
        batch *= a.shape()[i];
    }
    const int64_t M = a.shape()[nd - 2], K = a.shape()[nd - 1];
    const int64_t K2 = b.shape()[nd - 2], N = b.shape()[nd - 1];
    check(K == K2, "matmul: inner dims mismatch ", a.shape().str(), " x ", b.shape().str());

    std::vector<int64_t> od(a.shape().dims.begin(), a.shape().dims.end() - 2);
    od.push_back(M);
    od.push_back(N);
    Shape out_shape(od);

    std::vector<real> out(static_cast<size_t>(out_shape.numel()));
    const real* ap = a.data().data();
    const real* bp = b.data().data();
    for (int64_t t = 0; t < batch; ++t) {
        detail::MapCM A(ap + t * M * K, M, K);
        detail::MapCM B(bp + t * K * N, K, N);
        detail::MapM C(out.data() + t * M * N, M, N);
        C.noalias() = A * B;
    }
    add_macs(static_cast<uint64_t>(batch) * M * N * K);

    auto na = a.autograd_node();
    auto nb = b.autograd_node();
    auto da = a.data_ptr();
    auto db = b.data_ptr();
    return detail::op_result(
        out_shape, std::move(out), "matmul", {&a, &b},
        [na, nb, da, db, batch, M, K, N](autograd::Node& self) {
            for (int64_t t = 0; t < batch; ++t) {
                detail::MapCM G(self.grad.data() + t * M * N, M, N);
                if (na) {
                    detail::MapCM B(db->data() + t * K * N, K, N);
                    detail::MapM dA(na->grad_buf().data() + t * M * K, M, K);
                    dA.noalias() += G * B.transpose();
                }
                if (nb) {
                    detail::MapCM A(da->data() + t * M * K, M, K);
                    detail::MapM dB(nb->grad_buf().data() + t * K * N, K, N);
                    dB.noalias() += A.transpose() * G;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// conv2d: grouped cross-correlation, stride 1, zero "same" padding, k in {1,3}
// ---------------------------------------------------------------------------

namespace detail {

inline void conv2d_general(const real* x, const real* w, real* out, int64_t B, int64_t Cin,
                           int64_t H, int64_t W, int64_t Cout, int64_t k, int64_t groups) {
    const int64_t cpg_in = Cin / groups;
    const int64_t cpg_out = Cout / groups;
    const int64_t pad = (k - 1) / 2;
    const int64_t HW = H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t oc = 0; oc < Cout; ++oc) {
            const int64_t g = oc / cpg_out;
            const int64_t ic0 = g * cpg_in;
            const real* wk = w + oc * cpg_in * k * k;
            real* op = out + (b * Cout + oc) * HW;
            for (int64_t y = 0; y < H; ++y) {
                for (int64_t xx = 0; xx < W; ++xx) {
                    real acc = 0;
                    for (int64_t icl = 0; icl < cpg_in; ++icl) {
                        const real* xp = x + (b * Cin + ic0 + icl) * HW;
                        for (int64_t dy = 0; dy < k; ++dy) {
                            const int64_t iy = y + dy - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t dx = 0; dx < k; ++dx) {
                                const int64_t ix = xx + dx - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += wk[(icl * k + dy) * k + dx] * xp[iy * W + ix];
                            }
                        }
                    }
                    op[y * W + xx] = acc;
                }
            }
        }
    }
}

inline void conv2d_general_dx(const real* gout, const real* w, real* dx, int64_t B, int64_t Cin,
                              int64_t H, int64_t W, int64_t Cout, int64_t k, int64_t groups) {
    const int64_t cpg_in = Cin / groups;
    const int64_t cpg_out = Cout / groups;
    const int64_t pad = (k - 1) / 2;
    const int64_t HW = H * W;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
    for (int64_t b = 0; b < B; ++b) {
        for (int64_t ic = 0; ic < Cin; ++ic) {
            const int64_t g = ic / cpg_in;
            const int64_t icl = ic - g * cpg_in;
            real* dxp = dx + (b * Cin + ic) * HW;
            for (int64_t y = 0; y < H; ++y) {
                for (int64_t xx = 0; xx < W; ++xx) {
                    real acc = 0;
                    for (int64_t ocl = 0; ocl < cpg_out; ++ocl) {
                        const int64_t oc = g * cpg_out + ocl;
                        const real* gp = gout + (b * Cout + oc) * HW;
                        const real* wk = w + (oc * cpg_in + icl) * k * k;
                        for (int64_t dy = 0; dy < k; ++dy) {
                            const int64_t oy = y - dy + pad;
                            if (oy < 0 || oy >= H) continue;
                            for (int64_t dx2 = 0; dx2 < k; ++dx2) {
                                const int64_t ox = xx - dx2 + pad;
                                if (ox < 0 || ox >= W) continue;
                                acc += wk[dy * k + dx2] * gp[oy * W + ox];
                            }
                        }
                    }
                    dxp[y * W + xx] += acc;
                }
            }
        }
    }
}

inline void conv2d_general_dw(const real* gout, const real* x, real* dw, int64_t B, int64_t Cin,
                              int64_t H, int64_t W, int64_t Cout, int64_t k, int64_t groups) {
    const int64_t cpg_in = Cin / groups;
    const int64_t cpg_out = Cout / groups;
    const int64_t pad = (k - 1) / 2;
    const int64_t HW = H * W;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int64_t oc = 0; oc < Cout; ++oc) {
        const int64_t g = oc / cpg_out;
        const int64_t ic0 = g * cpg_in;
        for (int64_t icl = 0; icl < cpg_in; ++icl) {
            for (int64_t dy = 0; dy < k; ++dy) {
                for (int64_t dx = 0; dx < k; ++dx) {
                    real acc = 0;
                    for (int64_t b = 0; b < B; ++b) {
                        const real* gp = gout + (b * Cout + oc) * HW;
                        const real* xp = x + (b * Cin + ic0 + icl) * HW;
                        for (int64_t y = 0; y < H; ++y) {
                            const int64_t iy = y + dy - pad;
                            if (iy < 0 || iy >= H) continue;
                            for (int64_t xx = 0; xx < W; ++xx) {
                                const int64_t ix = xx + dx - pad;
                                if (ix < 0 || ix >= W) continue;
                                acc += gp[y * W + xx] * xp[iy * W + ix];
                            }
                        }
                    }
                    dw[(oc * cpg_in + icl) * k * k + dy * k + dx] += acc;
                }
            }
        }
    }
}

} // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias = {},
                     int64_t groups = 1) {
    check(x.ndim() == 4, "conv2d: input must be 4-D [B,C,H,W], got ", x.shape().str());
    check(w.ndim() == 4, "conv2d: weight must be 4-D [Cout,Cin/groups,k,k], got ", w.shape().str());
    const int64_t B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int64_t Cout = w.shape()[0], k = w.shape()[2];
    check(w.shape()[3] == k && (k == 1 || k == 3), "conv2d: kernel must be 1x1 or 3x3, got ",
          w.shape().str());
    check(groups >= 1 && Cin % groups == 0 && Cout % groups == 0,
          "conv2d: channels (", Cin, "->", Cout, ") not divisible by groups ", groups);
    check(w.shape()[1] == Cin / groups, "conv2d: weight in-channels ", w.shape()[1],
          " != Cin/groups = ", Cin / groups);
    if (bias) check(bias->ndim() == 1 && bias->shape()[0] == Cout,
                    "conv2d: bias shape ", bias->shape().str(), " != [", Cout, "]");

    const int64_t HW = H * W;
    std::vector<real> out(static_cast<size_t>(B * Cout * HW));
    const real* xp = x.data().data();
    const real* wp = w.data().data();

    if (k == 1 && groups == 1) {
        for (int64_t b = 0; b < B; ++b) {
            detail::MapCM Wm(wp, Cout, Cin);
            detail::MapCM In(xp + b * Cin * HW, Cin, HW);
            detail::MapM Out(out.data() + b * Cout * HW, Cout, HW);
            Out.noalias() = Wm * In;
        }
    } else {
        detail::conv2d_general(xp, wp, out.data(), B, Cin, H, W, Cout, k, groups);
    }
    if (bias) {
        const auto& bv = bias->data();
        for (int64_t b = 0; b < B; ++b)
            for (int64_t oc = 0; oc < Cout; ++oc) {
                real* op = out.data() + (b * Cout + oc) * HW;
                const real bb = bv[static_cast<size_t>(oc)];
                for (int64_t i = 0; i < HW; ++i) op[i] += bb;
            }
    }
    add_macs(static_cast<uint64_t>(B) * Cout * HW * (Cin / groups) * k * k);

    auto nx = x.autograd_node();
    auto nw = w.autograd_node();
    auto nb = bias ? bias->autograd_node() : nullptr;
    auto dx_data = x.data_ptr();
    auto dw_data = w.data_ptr();
    Shape out_shape{B, Cout, H, W};
    const Tensor* bias_ptr = bias ? &*bias : nullptr;
    return detail::op_result(
        out_shape, std::move(out), "conv2d", {&x, &w, bias_ptr},
        [nx, nw, nb, dx_data, dw_data, B, Cin, H, W, Cout, k, groups, HW](autograd::Node& self) {
            const real* g = self.grad.data();
            if (nx) {
                real* dxp = nx->grad_buf().data();
                if (k == 1 && groups == 1) {
                    for (int64_t b = 0; b < B; ++b) {
                        detail::MapCM Wm(dw_data->data(), Cout, Cin);
                        detail::MapCM G(g + b * Cout * HW, Cout, HW);
                        detail::MapM dX(dxp + b * Cin * HW, Cin, HW);
                        dX.noalias() += Wm.transpose() * G;
                    }
                } else {
                    detail::conv2d_general_dx(g, dw_data->data(), dxp, B, Cin, H, W, Cout, k,
                                              groups);
                }
            }
            if (nw) {
                real* dwp = nw->grad_buf().data();
                if (k == 1 && groups == 1) {
                    for (int64_t b = 0; b < B; ++b) {
                        detail::MapCM G(g + b * Cout * HW, Cout, HW);
                        detail::MapCM In(dx_data->data() + b * Cin * HW, Cin, HW);
                        detail::MapM dW(dwp, Cout, Cin);
                        dW.noalias() += G * In.transpose();
                    }
                } else {
                    detail::conv2d_general_dw(g, dx_data->data(), dwp, B, Cin, H, W, Cout, k,
                                              groups);
                }
            }
            if (nb) {
                auto& dbv = nb->grad_buf();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t oc = 0; oc < Cout; ++oc) {
                        const real* gp = g + (b * Cout + oc) * HW;
                        real acc = 0;
                        for (int64_t i = 0; i < HW; ++i) acc += gp[i];
                        dbv[static_cast<size_t>(oc)] += acc;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Pixel shuffle / unshuffle (factor-r space <-> depth permutations)
// ---------------------------------------------------------------------------

inline Tensor pixel_unshuffle(const Tensor& x, int64_t r) {
    check(x.ndim() == 4, "pixel_unshuffle: expected 4-D input, got ", x.shape().str());
    check(r >= 1, "pixel_unshuffle: r must be >= 1");
    const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    check(H % r == 0 && W % r == 0, "pixel_unshuffle: spatial dims ", H, "x", W,
          " not divisible by r=", r);
    const int64_t Ho = H / r, Wo = W / r;
    Shape out_shape{B, C * r * r, Ho, Wo};
    std::vector<real> out(static_cast<size_t>(out_shape.numel()));
    const auto& xv = x.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t dy = 0; dy < r; ++dy)
                for (int64_t dx = 0; dx < r; ++dx) {
                    const int64_t oc = c * r * r + dy * r + dx;
                    for (int64_t y = 0; y < Ho; ++y)
                        for (int64_t xx = 0; xx < Wo; ++xx)
                            out[static_cast<size_t>(((b * C * r * r + oc) * Ho + y) * Wo + xx)] =
                                xv[static_cast<size_t>(((b * C + c) * H + y * r + dy) * W + xx * r +
                                                       dx)];
                }
    auto nx = x.autograd_node();
    return detail::op_result(out_shape, std::move(out), "pixel_unshuffle", {&x},
                             [nx, B, C, H, W, r, Ho, Wo](autograd::Node& self) {
                                 if (!nx) return;
                                 auto& gx = nx->grad_buf();
                                 const auto& g = self.grad;
                                 for (int64_t b = 0; b < B; ++b)
                                     for (int64_t c = 0; c < C; ++c)
                                         for (int64_t dy = 0; dy < r; ++dy)
                                             for (int64_t dx = 0; dx < r; ++dx) {
                                                 const int64_t oc = c * r * r + dy * r + dx;
                                                 for (int64_t y = 0; y < Ho; ++y)
                                                     for (int64_t xx = 0; xx < Wo; ++xx)
                                                         gx[static_cast<size_t>(
                                                             ((b * C + c) * H + y * r + dy) * W +
                                                             xx * r + dx)] +=
                                                             g[static_cast<size_t>(
                                                                 ((b * C * r * r + oc) * Ho + y) *
                                                                     Wo +
                                                                 xx)];
                                             }
                             });
}

inline Tensor pixel_shuffle(const Tensor& x, int64_t r) {
    check(x.ndim() == 4, "pixel_shuffle: expected 4-D input, got ", x.shape().str());
    check(r >= 1, "pixel_shuffle: r must be >= 1");
    const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    check(C % (r * r) == 0, "pixel_shuffle: channels ", C, " not divisible by r^2=", r * r);
    const int64_t Co = C / (r * r), Ho = H * r, Wo = W * r;
    Shape out_shape{B, Co, Ho, Wo};
    std::vector<real> out(static_cast<size_t>(out_shape.numel()));
    const auto& xv = x.data();
    for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < Co; ++c)
            for (int64_t dy = 0; dy < r; ++dy)
                for (int64_t dx = 0; dx < r; ++dx) {
                    const int64_t ic = c * r * r + dy * r + dx;
                    for (int64_t y = 0; y < H; ++y)
                        for (int64_t xx = 0; xx < W; ++xx)
                            out[static_cast<size_t>(((b * Co + c) * Ho + y * r + dy) * Wo +
                                                    xx * r + dx)] =
                                xv[static_cast<size_t>(((b * C + ic) * H + y) * W + xx)];
                }
    auto nx = x.autograd_node();
    return detail::op_result(out_shape, std::move(out), "pixel_shuffle", {&x},
                             [nx, B, C, H, W, r, Co, Ho, Wo](autograd::Node& self) {
                                 if (!nx) return;
                                 auto& gx = nx->grad_buf();
                                 const auto& g = self.grad;
                                 for (int64_t b = 0; b < B; ++b)
                                     for (int64_t c = 0; c < Co; ++c)
                                         for (int64_t dy = 0; dy < r; ++dy)
                                             for (int64_t dx = 0; dx < r; ++dx) {
                                                 const int64_t ic = c * r * r + dy * r + dx;
                                                 for (int64_t y = 0; y < H; ++y)
                                                     for (int64_t xx = 0; xx < W; ++xx)
                                                         gx[static_cast<size_t>(
                                                             ((b * C + ic) * H + y) * W + xx)] +=
                                                             g[static_cast<size_t>(
                                                                 ((b * Co + c) * Ho + y * r + dy) *
                                                                     Wo +
                                                                 xx * r + dx)];
                                             }
                             });
}

// ---------------------------------------------------------------------------
// Layer norm across channels of a BCHW tensor
// ---------------------------------------------------------------------------

inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         real eps = 1e-6) {
    check(x.ndim() == 4, "layer_norm: expected 4-D input, got ", x.shape().str());
    const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    check(gamma.ndim() == 1 && gamma.shape()[0] == C, "layer_norm: gamma shape ",
          gamma.shape().str(), " != [", C, "]");
    check(beta.ndim() == 1 && beta.shape()[0] == C, "layer_norm: beta shape ", beta.shape().str(),
          " != [", C, "]");
    check(eps > 0, "layer_norm: eps must be > 0");

    const int64_t HW = H * W;
    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    std::vector<real> out(static_cast<size_t>(x.numel()));
    // saved for backward (only when recording): normalized values and 1/sigma
    const bool rec = autograd::grad_mode() &&
                     (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
    std::shared_ptr<std::vector<real>> xhat, inv_std;
    if (rec) {
        xhat = std::make_shared<std::vector<real>>(static_cast<size_t>(x.numel()));
        inv_std = std::make_shared<std::vector<real>>(static_cast<size_t>(B * HW));
    }

    for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < HW; ++p) {
            const int64_t base = b * C * HW + p;
            real mu = 0;
            for (int64_t c = 0; c < C; ++c) mu += xv[static_cast<size_t>(base + c * HW)];
            mu /= static_cast<real>(C);
            real var = 0;
            for (int64_t c = 0; c < C; ++c) {
                real d = xv[static_cast<size_t>(base + c * HW)] - mu;
                var += d * d;
            }
            var /= static_cast<real>(C);
            const real is = 1.0 / std::sqrt(var + eps);
            if (rec) (*inv_std)[static_cast<size_t>(b * HW + p)] = is;
            for (int64_t c = 0; c < C; ++c) {
                const size_t idx = static_cast<size_t>(base + c * HW);
                const real xh = (xv[idx] - mu) * is;
                if (rec) (*xhat)[idx] = xh;
                out[idx] = gv[static_cast<size_t>(c)] * xh + bv[static_cast<size_t>(c)];
            }
        }

    auto nx = x.autograd_node();
    auto ng = gamma.autograd_node();
    auto nb = beta.autograd_node();
    auto gamma_d = gamma.data_ptr();
    return detail::op_result(
        x.shape(), std::move(out), "layer_norm", {&x, &gamma, &beta},
        [nx, ng, nb, gamma_d, xhat, inv_std, B, C, HW](autograd::Node& self) {
            const auto& g = self.grad;
            const auto& gv = *gamma_d;
            if (nx) {
                auto& gx = nx->grad_buf();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t p = 0; p < HW; ++p) {
                        const int64_t base = b * C * HW + p;
                        const real is = (*inv_std)[static_cast<size_t>(b * HW + p)];
                        real mean_gh = 0, mean_ghx = 0;
                        for (int64_t c = 0; c < C; ++c) {
                            const size_t idx = static_cast<size_t>(base + c * HW);
                            const real gh = gv[static_cast<size_t>(c)] * g[idx];
                            mean_gh += gh;
                            mean_ghx += gh * (*xhat)[idx];
                        }
                        mean_gh /= static_cast<real>(C);
                        mean_ghx /= static_cast<real>(C);
                        for (int64_t c = 0; c < C; ++c) {
                            const size_t idx = static_cast<size_t>(base + c * HW);
                            const real gh = gv[static_cast<size_t>(c)] * g[idx];
                            gx[idx] += is * (gh - mean_gh - (*xhat)[idx] * mean_ghx);
                        }
                    }
            }
            if (ng) {
                auto& gg = ng->grad_buf();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (b * C + c) * HW;
                        real acc = 0;
                        for (int64_t p = 0; p < HW; ++p) {
                            const size_t idx = static_cast<size_t>(base + p);
                            acc += g[idx] * (*xhat)[idx];
                        }
                        gg[static_cast<size_t>(c)] += acc;
                    }
            }
            if (nb) {
                auto& gb = nb->grad_buf();
                for (int64_t b = 0; b < B; ++b)
                    for (int64_t c = 0; c < C; ++c) {
                        const int64_t base = (b * C + c) * HW;
                        real acc = 0;
                        for (int64_t p = 0; p < HW; ++p) acc += g[static_cast<size_t>(base + p)];
                        gb[static_cast<size_t>(c)] += acc;
                    }
            }
        });
}

// ---------------------------------------------------------------------------
// Softmax along an axis (max-subtracted)
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& x, int axis) {
    const int a = normalize_axis(axis, x.ndim());
    const int64_t n = x.shape()[a];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= x.shape()[i];
    for (int i = a + 1; i < x.ndim(); ++i) inner *= x.shape()[i];

    const auto& xv = x.data();
    std::vector<real> out(static_cast<size_t>(x.numel()));
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            real mx = xv[static_cast<size_t>(base)];
            for (int64_t i = 1; i < n; ++i)
                mx = std::max(mx, xv[static_cast<size_t>(base + i * inner)]);
            real denom = 0;
            for (int64_t i = 0; i < n; ++i) {
                const real e = std::exp(xv[static_cast<size_t>(base + i * inner)] - mx);
                out[static_cast<size_t>(base + i * inner)] = e;
                denom += e;
            }
            for (int64_t i = 0; i < n; ++i) out[static_cast<size_t>(base + i * inner)] /= denom;
        }

    auto nx = x.autograd_node();
    const bool rec = autograd::grad_mode() && x.requires_grad();
    auto yv = rec ? std::make_shared<std::vector<real>>(out) : nullptr;
    return detail::op_result(x.shape(), std::move(out), "softmax", {&x},
                             [nx, yv, outer, n, inner](autograd::Node& self) {
                                 if (!nx) return;
                                 auto& gx = nx->grad_buf();
                                 const auto& g = self.grad;
                                 for (int64_t o = 0; o < outer; ++o)
                                     for (int64_t in = 0; in < inner; ++in) {
                                         const int64_t base = o * n * inner + in;
                                         real dot = 0;
                                         for (int64_t i = 0; i < n; ++i) {
                                             const size_t idx =
                                                 static_cast<size_t>(base + i * inner);
                                             dot += g[idx] * (*yv)[idx];
                                         }
                                         for (int64_t i = 0; i < n; ++i) {
                                             const size_t idx =
                                                 static_cast<size_t>(base + i * inner);
                                             gx[idx] += (*yv)[idx] * (g[idx] - dot);
                                         }
                                     }
                             });
}

// ---------------------------------------------------------------------------
// Activations (GELU uses the exact erf form)
// ---------------------------------------------------------------------------

inline Tensor gelu(const Tensor& x) {
    static const real inv_sqrt2 = 1.0 / std::sqrt(2.0);
    static const real inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
    const auto& xv = x.data();
    std::vector<real> out(static_cast<size_t>(x.numel()));
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    }
    auto nx = x.autograd_node();
    auto dx = x.data_ptr();
    return detail::op_result(x.shape(), std::move(out), "gelu", {&x},
                             [nx, dx](autograd::Node& self) {
                                 if (!nx) return;
                                 auto& g = nx->grad_buf();
                                 for (size_t i = 0; i < g.size(); ++i) {
                                     const real v = (*dx)[i];
                                     const real cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                                     const real pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                                     g[i] += self.grad[i] * (cdf + v * pdf);
                                 }
                             });
}

inline Tensor tanh(const Tensor& x) {
    const auto& xv = x.data();
    std::vector<real> out(static_cast<size_t>(x.numel()));
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
    auto nx = x.autograd_node();
    const bool rec = autograd::grad_mode() && x.requires_grad();
    auto yv = rec ? std::make_shared<std::vector<real>>(out) : nullptr;
    return detail::op_result(x.shape(), std::move(out), "tanh", {&x},
                             [nx, yv](autograd::Node& self) {
                                 if (!nx) return;
                                 auto& g = nx->grad_buf();
                                 for (size_t i = 0; i < g.size(); ++i) {
                                     const real y = (*yv)[i];
                                     g[i] += self.grad[i] * (1.0 - y * y);
                                 }
                             });
}

enum class Activation { Gelu, Tanh };

inline Tensor activation(Activation kind, const Tensor& x) {
    return kind == Activation::Gelu ? gelu(x) : tanh(x);
}

// ---------------------------------------------------------------------------
// L2 normalization along an axis: x / max(||x||, eps)
// ---------------------------------------------------------------------------

inline Tensor l2_normalize(const Tensor& x, int axis, real eps = 1e-12) {
    check(eps > 0, "l2_normalize: eps must be > 0");
    const int a = normalize_axis(axis, x.ndim());
    const int64_t n = x.shape()[a];
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= x.shape()[i];
    for (int i = a + 1; i < x.ndim(); ++i) inner *= x.shape()[i];

    const auto& xv = x.data();
    std::vector<real> out(static_cast<size_t>(x.numel()));
    const bool rec = autograd::grad_mode() && x.requires_grad();
    auto norms = rec ? std::make_shared<std::vector<real>>(static_cast<size_t>(outer * inner))
                     : nullptr;
    for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
            const int64_t base = o * n * inner + in;
            real ss = 0;
            for (int64_t i = 0; i < n; ++i) {
                const real v = xv[static_cast<size_t>(base + i * inner)];
                ss += v * v;
            }
            const real nrm = std::sqrt(ss);
            if (rec) (*norms)[static_cast<size_t>(o * inner + in)] = nrm;
            const real d = std::max(nrm, eps);
            for (int64_t i = 0; i < n; ++i)
                out[static_cast<size_t>(base + i * inner)] =
                    xv[static_cast<size_t>(base + i * inner)] / d;
        }

    auto nx = x.autograd_node();
    auto dx = x.data_ptr();
    return detail::op_result(
        x.shape(), std::move(out), "l2_normalize", {&x},
        [nx, dx, norms, outer, n, inner, eps](autograd::Node& self) {
            if (!nx) return;
            auto& gx = nx->grad_buf();
            const auto& g = self.grad;
            for (int64_t o = 0; o < outer; ++o)
                for (int64_t in = 0; in < inner; ++in) {
                    const int64_t base = o * n * inner + in;
                    const real nrm = (*norms)[static_cast<size_t>(o * inner + in)];
                    if (nrm > eps) {
                        real dot = 0;
                        for (int64_t i = 0; i < n; ++i) {
                            const size_t idx = static_cast<size_t>(base + i * inner);
                            dot += (*dx)[idx] * g[idx];
                        }
                        const real inv = 1.0 / nrm;
                        const real inv3 = inv * inv * inv;
                        for (int64_t i = 0; i < n; ++i) {
                            const size_t idx = static_cast<size_t>(base + i * inner);
                            gx[idx] += g[idx] * inv - (*dx)[idx] * dot * inv3;
                        }
                    } else {
                        for (int64_t i = 0; i < n; ++i) {
                            const size_t idx = static_cast<size_t>(base + i * inner);
                            gx[idx] += g[idx] / eps;
                        }
                    }
                }
        });
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape target) {
    check(target.numel() == x.numel(), "reshape: element count mismatch ", x.shape().str(), " -> ",
          target.str());
    std::vector<real> out(x.data());
    auto nx = x.autograd_node();
    return detail::op_result(std::move(target), std::move(out), "reshape", {&x},
                             [nx](autograd::Node& self) {
                                 if (nx) detail::accumulate(nx->grad_buf(), self.grad);
                             });
}

namespace detail {

inline std::vector<int64_t> contiguous_strides(const Shape& s) {
    std::vector<int64_t> st(static_cast<size_t>(s.ndim()));
    int64_t acc = 1;
    for (int i = s.ndim() - 1; i >= 0; --i) {
        st[static_cast<size_t>(i)] = acc;
        acc *= s[i];
    }
    return st;
}

} // namespace detail

/// Swap two axes (copying).
inline Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
    const int a = normalize_axis(axis_a, x.ndim());
    const int b = normalize_axis(axis_b, x.ndim());
    std::vector<int64_t> od = x.shape().dims;
    std::swap(od[static_cast<size_t>(a)], od[static_cast<size_t>(b)]);
    Shape out_shape(od);

    const auto in_strides = detail::contiguous_strides(x.shape());
    const auto out_strides = detail::contiguous_strides(out_shape);
    const int nd = x.ndim();
    const auto& xv = x.data();
    std::vector<real> out(static_cast<size_t>(x.numel()));
    std::vector<int64_t> idx(static_cast<size_t>(nd), 0);
    for (int64_t flat = 0; flat < x.numel(); ++flat) {
        int64_t rem = flat;
        int64_t src = 0;
        for (int i = 0; i < nd; ++i) {
            int64_t oi = rem / out_strides[static_cast<size_t>(i)];
            rem %= out_strides[static_cast<size_t>(i)];
            int si = i == a ? b : (i == b ? a : i);
            src += oi * in_strides[static_cast<size_t>(si)];
        }
        out[static_cast<size_t>(flat)] = xv[static_cast<size_t>(src)];
    }

    auto nx = x.autograd_node();
    Shape in_shape = x.shape();
    return detail::op_result(
        out_shape, std::move(out), "transpose", {&x},
        [nx, a, b, in_shape, out_shape](autograd::Node& self) {
            if (!nx) return;
            auto& gx = nx->grad_buf();
            const auto& g = self.grad;
            const auto in_strides = detail::contiguous_strides(in_shape);
            const auto out_strides = detail::contiguous_strides(out_shape);
            const int nd = in_shape.ndim();
            for (int64_t flat = 0; flat < static_cast<int64_t>(g.size()); ++flat) {
                int64_t rem = flat;
                int64_t src = 0;
                for (int i = 0; i < nd; ++i) {
                    int64_t oi = rem / out_strides[static_cast<size_t>(i)];
                    rem %= out_strides[static_cast<size_t>(i)];
                    int si = i == a ? b : (i == b ? a : i);
                    src += oi * in_strides[static_cast<size_t>(si)];
                }
                gx[static_cast<size_t>(src)] += g[static_cast<size_t>(flat)];
            }
        });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    check(!parts.empty(), "concat: no inputs");
    const int nd = parts[0].ndim();
    const int a = normalize_axis(axis, nd);
    int64_t cat_dim = 0;
    for (const auto& p : parts) {
        check(p.ndim() == nd, "concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != a)
                check(p.shape()[i] == parts[0].shape()[i], "concat: dim ", i, " mismatch ",
                      p.shape().str(), " vs ", parts[0].shape().str());
        cat_dim += p.shape()[a];
    }
    std::vector<int64_t> od = parts[0].shape().dims;
    od[static_cast<size_t>(a)] = cat_dim;
    Shape out_shape(od);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= out_shape[i];
    for (int i = a + 1; i < nd; ++i) inner *= out_shape[i];

    std::vector<real> out(static_cast<size_t>(out_shape.numel()));
    int64_t off = 0;
    for (const auto& p : parts) {
        const int64_t pn = p.shape()[a];
        const auto& pv = p.data();
        for (int64_t o = 0; o < outer; ++o)
            std::memcpy(out.data() + (o * cat_dim + off) * inner, pv.data() + o * pn * inner,
                        static_cast<size_t>(pn * inner) * sizeof(real));
        off += pn;
    }

    std::vector<std::shared_ptr<autograd::Node>> nodes;
    std::vector<int64_t> sizes;
    for (const auto& p : parts) {
        nodes.push_back(p.autograd_node());
        sizes.push_back(p.shape()[a]);
    }
    bool any = false;
    for (auto& n : nodes) any = any || (n != nullptr);

    Tensor result(out_shape, std::move(out));
    if (autograd::grad_mode() && any) {
        auto node = std::make_shared<autograd::Node>();
        node->seq = autograd::next_seq();
        node->numel = result.numel();
        for (auto& n : nodes) node->parents.push_back(n);
        node->backfn = [nodes, sizes, outer, inner, cat_dim](autograd::Node& self) {
            const auto& g = self.grad;
            int64_t off = 0;
            for (size_t p = 0; p < nodes.size(); ++p) {
                const int64_t pn = sizes[p];
                if (nodes[p]) {
                    auto& gx = nodes[p]->grad_buf();
                    for (int64_t o = 0; o < outer; ++o) {
                        const real* src = g.data() + (o * cat_dim + off) * inner;
                        real* dst = gx.data() + o * pn * inner;
                        for (int64_t i = 0; i < pn * inner; ++i) dst[i] += src[i];
                    }
                }
                off += pn;
            }
        };
        result.attach_node(std::move(node));
    }
    detail::ensure_finite(result.data(), "concat");
    return result;
}

inline Tensor slice(const Tensor& x, int axis, int64_t start, int64_t len) {
    const int a = normalize_axis(axis, x.ndim());
    const int64_t n = x.shape()[a];
    check(start >= 0 && len >= 1 && start + len <= n, "slice: range [", start, ",", start + len,
          ") out of bounds for dim ", n);
    std::vector<int64_t> od = x.shape().dims;
    od[static_cast<size_t>(a)] = len;
    Shape out_shape(od);

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < a; ++i) outer *= x.shape()[i];
    for (int i = a + 1; i < x.ndim(); ++i) inner *= x.shape()[i];

    const auto& xv = x.data();
    std::vector<real> out(static_cast<size_t>(out_shape.numel()));
    for (int64_t o = 0; o < outer; ++o)
        std::memcpy(out.data() + o * len * inner, xv.data() + (o * n + start) * inner,
                    static_cast<size_t>(len * inner) * sizeof(real));

    auto nx = x.autograd_node();
    return detail::op_result(out_shape, std::move(out), "slice", {&x},
                             [nx, outer, inner, n, start, len](autograd::Node& self) {
                                 if (!nx) return;
                                 auto& gx = nx->grad_buf();
                                 const auto& g = self.grad;
                                 for (int64_t o = 0; o < outer; ++o) {
                                     const real* src = g.data() + o * len * inner;
                                     real* dst = gx.data() + (o * n + start) * inner;
                                     for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
                                 }
                             });
}

/// Multiply each head slab of a [B, heads, ...] tensor by a learnable
/// per-head scalar.
inline Tensor head_scale(const Tensor& x, const Tensor& t) {
    check(x.ndim() >= 2, "head_scale: input must have >= 2 dims");
    const int64_t B = x.shape()[0], heads = x.shape()[1];
    check(t.ndim() == 1 && t.shape()[0] == heads, "head_scale: scale shape ", t.shape().str(),
          " != [", heads, "]");
    int64_t inner = 1;
    for (int i = 2; i < x.ndim(); ++i) inner *= x.shape()[i];

    const auto& xv = x.data();
    const auto& tv = t.data();
    std::vector<real> out(static_cast<size_t>(x.numel()));
    for (int64_t b = 0; b < B; ++b)
        for (int64_t h = 0; h < heads; ++h) {
            const int64_t base = (b * heads + h) * inner;
            const real s = tv[static_cast<size_t>(h)];
            for (int64_t i = 0; i < inner; ++i)
                out[static_cast<size_t>(base + i)] = xv[static_cast<size_t>(base + i)] * s;
        }

    auto nx = x.autograd_node();
    auto nt = t.autograd_node();
    auto dx = x.data_ptr();
    auto dt = t.data_ptr();
    return detail::op_result(x.shape(), std::move(out), "head_scale", {&x, &t},
                             [nx, nt, dx, dt, B, heads, inner](autograd::Node& self) {
                                 const auto& g = self.grad;
                                 if (nx) {
                                     auto& gx = nx->grad_buf();
                                     for (int64_t b = 0; b < B; ++b)
                                         for (int64_t h = 0; h < heads; ++h) {
                                             const int64_t base = (b * heads + h) * inner;
                                             const real s = (*dt)[static_cast<size_t>(h)];
                                             for (int64_t i = 0; i < inner; ++i)
                                                 gx[static_cast<size_t>(base + i)] +=
                                                     g[static_cast<size_t>(base + i)] * s;
                                         }
                                 }
                                 if (nt) {
                                     auto& gt = nt->grad_buf();
                                     for (int64_t b = 0; b < B; ++b)
                                         for (int64_t h = 0; h < heads; ++h) {
                                             const int64_t base = (b * heads + h) * inner;
                                             real acc = 0;
                                             for (int64_t i = 0; i < inner; ++i)
                                                 acc += g[static_cast<size_t>(base + i)] *
                                                        (*dx)[static_cast<size_t>(base + i)];
                                             gt[static_cast<size_t>(h)] += acc;
                                         }
                                 }
                             });
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

inline void backward(const Tensor& loss) {
    check(loss.numel() == 1, "backward: loss must be scalar, got shape ", loss.shape().str());
    auto root = loss.autograd_node();
    check(root != nullptr, "backward: loss does not depend on any tensor requiring grad");

    // Collect reachable subgraph.
    std::vector<autograd::Node*> order;
    std::unordered_set<autograd::Node*> seen;
    std::vector<autograd::Node*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        autograd::Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (auto& p : n->parents)
            if (p && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    // Reverse execution order == decreasing creation sequence.
    std::sort(order.begin(), order.end(),
              [](const autograd::Node* a, const autograd::Node* b) { return a->seq > b->seq; });

    // Interior grads restart at zero each call; leaf grads accumulate.
    for (autograd::Node* n : order)
        if (!n->leaf) n->grad.assign(static_cast<size_t>(n->numel), 0.0);
    root->grad_buf()[0] += 1.0;

    for (autograd::Node* n : order)
        if (n->backfn && !n->grad.empty()) n->backfn(*n);
}

// ---------------------------------------------------------------------------
// Gradient checking against central finite differences
// ---------------------------------------------------------------------------

struct GradCheckReport {
    real max_rel_err = 0;
    int64_t worst_index = -1;
    int64_t checked = 0;
    real tol = 0;
    bool pass = false;
};

/// Relative error with an absolute floor so near-zero gradients compare
/// against |a - n| / 1e-6 instead of blowing up.
inline real rel_err(real a, real n) {
    return std::fabs(a - n) / std::max({std::fabs(a), std::fabs(n), 1e-6});
}

inline GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x0,
                                  real h, real tol, int64_t max_elements = 0) {
    check(h >= 1e-6 && h <= 1e-4, "grad_check: h must lie in [1e-6, 1e-4], got ", h);

    Tensor x = x0.clone_data();
    x.set_requires_grad(true);
    Tensor y = f(x);
    check(y.numel() == 1, "grad_check: f must return a scalar");
    {
        NoGradGuard ng;
        Tensor y2 = f(x);
        check(std::memcmp(&y.data()[0], &y2.data()[0], sizeof(real)) == 0,
              "grad_check: f is not deterministic (two evaluations differ: ", y.item(), " vs ",
              y2.item(), ")");
    }
    backward(y);
    std::vector<real> analytic = x.grad();

    GradCheckReport rep;
    rep.tol = tol;
    const int64_t n = x.numel();
    const int64_t step = (max_elements > 0 && n > max_elements)
                             ? (n + max_elements - 1) / max_elements
                             : 1;
    NoGradGuard ng;
    for (int64_t i = 0; i < n; i += step) {
        Tensor xp = x0.clone_data();
        xp.mutable_data()[static_cast<size_t>(i)] += h;
        Tensor xm = x0.clone_data();
        xm.mutable_data()[static_cast<size_t>(i)] -= h;
        const real fp = f(xp).item();
        const real fm = f(xm).item();
        const real numeric = (fp - fm) / (2 * h);
        const real e = rel_err(analytic[static_cast<size_t>(i)], numeric);
        if (e > rep.max_rel_err) {
            rep.max_rel_err = e;
            rep.worst_index = i;
        }
        ++rep.checked;
    }
    rep.pass = rep.max_rel_err < tol;
    return rep;
}

} // namespace uhfsynth
