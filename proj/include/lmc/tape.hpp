#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "lmc/errors.hpp"
#include "lmc/tensor.hpp"

namespace lmc {

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CMatMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// C = A(m x k) * B(k x n), optionally transposing the stored operands.
// A is stored (m x k) or (k x m) when ta; same for B.
template <typename T>
void gemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, const T* a, const T* b, T* c,
          bool accumulate = false) {
    CMatMap<T> A(a, ta ? k : m, ta ? m : k);
    CMatMap<T> B(b, tb ? n : k, tb ? k : n);
    MatMap<T> C(c, m, n);
    if (!ta && !tb) {
        if (accumulate)
            C.noalias() += A * B;
        else
            C.noalias() = A * B;
    } else if (ta && !tb) {
        if (accumulate)
            C.noalias() += A.transpose() * B;
        else
            C.noalias() = A.transpose() * B;
    } else if (!ta && tb) {
        if (accumulate)
            C.noalias() += A * B.transpose();
        else
            C.noalias() = A * B.transpose();
    } else {
        if (accumulate)
            C.noalias() += A.transpose() * B.transpose();
        else
            C.noalias() = A.transpose() * B.transpose();
    }
}

// Unrolls conv windows: x (C,H,W) -> col (C*K*K, outH*outW). Zero padding.
template <typename T>
void im2col(const T* x, int64_t c, int64_t h, int64_t w, int64_t kk, int64_t stride, int64_t pad,
            int64_t oh, int64_t ow, T* col) {
    for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t kr = 0; kr < kk; ++kr) {
            for (int64_t kc = 0; kc < kk; ++kc) {
                T* dst = col + ((ch * kk + kr) * kk + kc) * oh * ow;
                for (int64_t r = 0; r < oh; ++r) {
                    int64_t sr = r * stride + kr - pad;
                    if (sr < 0 || sr >= h) {
                        std::fill(dst + r * ow, dst + (r + 1) * ow, T(0));
                        continue;
                    }
                    const T* src = x + (ch * h + sr) * w;
                    for (int64_t cidx = 0; cidx < ow; ++cidx) {
                        int64_t sc = cidx * stride + kc - pad;
                        dst[r * ow + cidx] = (sc < 0 || sc >= w) ? T(0) : src[sc];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, int64_t c, int64_t h, int64_t w, int64_t kk, int64_t stride, int64_t pad,
            int64_t oh, int64_t ow, T* x) {
    for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t kr = 0; kr < kk; ++kr) {
            for (int64_t kc = 0; kc < kk; ++kc) {
                const T* src = col + ((ch * kk + kr) * kk + kc) * oh * ow;
                for (int64_t r = 0; r < oh; ++r) {
                    int64_t sr = r * stride + kr - pad;
                    if (sr < 0 || sr >= h) continue;
                    T* dst = x + (ch * h + sr) * w;
                    for (int64_t cidx = 0; cidx < ow; ++cidx) {
                        int64_t sc = cidx * stride + kc - pad;
                        if (sc >= 0 && sc < w) dst[sc] += src[r * ow + cidx];
                    }
                }
            }
        }
    }
}

// dst[i0,i1,i2,i3] = src[j] with j[perm[k]] = i_k; dst shape d[k] = s[perm[k]].
template <typename T>
void permute_copy(const T* src, const Shape& src_shape, const std::array<int, 4>& perm, T* dst) {
    std::array<int64_t, 4> s{src_shape[0], src_shape[1], src_shape[2], src_shape[3]};
    std::array<int64_t, 4> sstride{s[1] * s[2] * s[3], s[2] * s[3], s[3], 1};
    std::array<int64_t, 4> d{}, step{};
    for (int k = 0; k < 4; ++k) {
        d[static_cast<size_t>(k)] = s[static_cast<size_t>(perm[static_cast<size_t>(k)])];
        step[static_cast<size_t>(k)] = sstride[static_cast<size_t>(perm[static_cast<size_t>(k)])];
    }
    int64_t idx = 0;
    for (int64_t i0 = 0; i0 < d[0]; ++i0)
        for (int64_t i1 = 0; i1 < d[1]; ++i1)
            for (int64_t i2 = 0; i2 < d[2]; ++i2) {
                const T* row = src + i0 * step[0] + i1 * step[1] + i2 * step[2];
                for (int64_t i3 = 0; i3 < d[3]; ++i3) dst[idx++] = row[i3 * step[3]];
            }
}

// Row-wise softmax with max subtraction; sums accumulate in double.
template <typename T>
void softmax_rows(const T* in, T* out, int64_t rows, int64_t cols) {
    for (int64_t r = 0; r < rows; ++r) {
        const T* xi = in + r * cols;
        T* yi = out + r * cols;
        T mx = xi[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            double e = std::exp(static_cast<double>(xi[j] - mx));
            yi[j] = static_cast<T>(e);
            sum += e;
        }
        T inv = static_cast<T>(1.0 / sum);
        for (int64_t j = 0; j < cols; ++j) yi[j] *= inv;
    }
}

// Forward-only attention kernel; also returns the row-stochastic weights.
// q: (N,H,Lq,Dk), k: (N,H,Lk,Dk), v: (N,H,Lk,Dv), bias: (H,Lq,Lk) or empty.
template <typename T>
void attention_forward(const TensorT<T>& q, const TensorT<T>& k, const TensorT<T>& v,
                       const TensorT<T>* bias, TensorT<T>& out, TensorT<T>& weights) {
    if (q.rank() != 4 || k.rank() != 4 || v.rank() != 4)
        throw ShapeError("attention: q,k,v must be rank-4 (N,H,L,D)");
    int64_t n = q.dim(0), h = q.dim(1), lq = q.dim(2), dk = q.dim(3);
    int64_t lk = k.dim(2), dv = v.dim(3);
    if (k.dim(0) != n || k.dim(1) != h || k.dim(3) != dk)
        throw ShapeError("attention: k incompatible with q");
    if (v.dim(0) != n || v.dim(1) != h || v.dim(2) != lk)
        throw ShapeError("attention: v incompatible with k");
    if (bias && (bias->rank() != 3 || bias->dim(0) != h || bias->dim(1) != lq || bias->dim(2) != lk))
        throw ShapeError("attention: bias must be (H,Lq,Lk)");
    out = TensorT<T>({n, h, lq, dv});
    weights = TensorT<T>({n, h, lq, lk});
    T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    std::vector<T> logits(static_cast<size_t>(lq * lk));
    for (int64_t ni = 0; ni < n; ++ni) {
        for (int64_t hi = 0; hi < h; ++hi) {
            const T* qp = q.data.data() + ((ni * h + hi) * lq) * dk;
            const T* kp = k.data.data() + ((ni * h + hi) * lk) * dk;
            const T* vp = v.data.data() + ((ni * h + hi) * lk) * dv;
            gemm<T>(false, true, lq, lk, dk, qp, kp, logits.data());
            for (auto& z : logits) z *= scale;
            if (bias) {
                const T* bp = bias->data.data() + hi * lq * lk;
                for (int64_t i = 0; i < lq * lk; ++i) logits[static_cast<size_t>(i)] += bp[i];
            }
            T* wp = weights.data.data() + ((ni * h + hi) * lq) * lk;
            softmax_rows<T>(logits.data(), wp, lq, lk);
            T* op = out.data.data() + ((ni * h + hi) * lq) * dv;
            gemm<T>(false, false, lq, dv, lk, wp, vp, op);
        }
    }
}

}  // namespace detail

// Reverse-mode tape. A tape records one forward pass and is discarded after
// backward(); graphs are rebuilt per step. Single-threaded by contract.
template <typename T>
class TapeT {
   public:
    using Var = int;

    Var leaf(TensorT<T> v, bool requires_grad = false) {
        return push(std::move(v), requires_grad, {});
    }

    const TensorT<T>& val(Var v) const { return nodes_[static_cast<size_t>(v)].value; }

    // Gradient of the last backward() w.r.t. node v (zeros if unreached).
    TensorT<T> grad(Var v) const {
        const Node& n = nodes_[static_cast<size_t>(v)];
        if (n.grad.data.empty()) return TensorT<T>::zeros(n.value.shape);
        return n.grad;
    }

    void backward(Var loss) {
        Node& ln = nodes_[static_cast<size_t>(loss)];
        if (ln.value.numel() != 1) throw InvalidInput("backward: loss must be scalar");
        grad_buf(loss)[0] = T(1);
        for (int i = loss; i >= 0; --i) {
            Node& nd = nodes_[static_cast<size_t>(i)];
            if (nd.back && !nd.grad.data.empty()) nd.back(*this);
        }
    }

    size_t size() const { return nodes_.size(); }

    // ---- ops ----

    Var add(Var a, Var b) {
        const auto& va = val(a);
        const auto& vb = val(b);
        require_same_shape(va, vb, "add");
        TensorT<T> out = va;
        for (int64_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
        return push(std::move(out), needs(a) || needs(b), [a, b](TapeT& t, Var self) {
            const auto& g = t.gref(self);
            if (t.needs(a)) {
                auto& ga = t.grad_buf(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (t.needs(b)) {
                auto& gb = t.grad_buf(b);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
            }
        });
    }

    Var scale(Var a, T c) {
        TensorT<T> out = val(a);
        for (auto& x : out.data) x *= c;
        return push(std::move(out), needs(a), [a, c](TapeT& t, Var self) {
            const auto& g = t.gref(self);
            if (!t.needs(a)) return;
            auto& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
        });
    }

    Var relu(Var a) {
        TensorT<T> out = val(a);
        for (auto& x : out.data) x = x > T(0) ? x : T(0);
        return push(std::move(out), needs(a), [a](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            const auto& x = t.val(a);
            auto& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i)
                if (x[i] > T(0)) ga[i] += g[i];
        });
    }

    // hardswish(x) = x * clamp(x+3, 0, 6) / 6
    Var hardswish(Var a) {
        TensorT<T> out = val(a);
        for (auto& x : out.data) {
            T c = std::clamp(x + T(3), T(0), T(6));
            x = x * c / T(6);
        }
        return push(std::move(out), needs(a), [a](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            const auto& x = t.val(a);
            auto& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                T xi = x[i];
                T d;
                if (xi <= T(-3))
                    d = T(0);
                else if (xi >= T(3))
                    d = T(1);
                else
                    d = (T(2) * xi + T(3)) / T(6);
                ga[i] += d * g[i];
            }
        });
    }

    Var reshape(Var a, Shape s) {
        const auto& va = val(a);
        if (shape_numel(s) != va.numel())
            throw ShapeError("reshape: numel mismatch " + shape_str(va.shape) + " -> " +
                             shape_str(s));
        TensorT<T> out(std::move(s), va.data);
        return push(std::move(out), needs(a), [a](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            auto& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        });
    }

    // General rank-4 permutation; lower ranks are padded with leading 1s.
    Var permute4(Var a, std::array<int, 4> perm) {
        const auto& va = val(a);
        Shape s4(4, 1);
        size_t off = 4 - va.shape.size();
        for (size_t i = 0; i < va.shape.size(); ++i) s4[off + i] = va.shape[i];
        Shape os(4);
        for (int i = 0; i < 4; ++i) os[static_cast<size_t>(i)] = s4[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        TensorT<T> out(os);
        detail::permute_copy(va.data.data(), s4, perm, out.data.data());
        return push(std::move(out), needs(a), [a, s4, perm](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            auto& ga = t.grad_buf(a);
            // inverse permutation scatter
            std::array<int, 4> inv{};
            for (int i = 0; i < 4; ++i) inv[static_cast<size_t>(perm[static_cast<size_t>(i)])] = i;
            Shape gs = g.shape;
            std::vector<T> tmp(static_cast<size_t>(g.numel()));
            detail::permute_copy(g.data.data(), gs, inv, tmp.data());
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += tmp[static_cast<size_t>(i)];
        });
    }

    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        const auto& bv = val(b);
        if (xv.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d: x,w must be rank-4");
        int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), ww = xv.dim(3);
        int64_t o = wv.dim(0), kk = wv.dim(2);
        if (wv.dim(1) != c) throw ShapeError("conv2d: channel mismatch");
        if (wv.dim(3) != kk) throw ShapeError("conv2d: kernel must be square");
        if (bv.rank() != 1 || bv.dim(0) != o) throw ShapeError("conv2d: bias must be (O)");
        if (h + 2 * pad < kk || ww + 2 * pad < kk)
            throw ShapeError("conv2d: kernel does not fit padded input");
        int64_t oh = (h + 2 * pad - kk) / stride + 1;
        int64_t ow = (ww + 2 * pad - kk) / stride + 1;
        TensorT<T> out({n, o, oh, ow});
        std::vector<T> col(static_cast<size_t>(c * kk * kk * oh * ow));
        for (int64_t ni = 0; ni < n; ++ni) {
            const T* xp = xv.data.data() + ni * c * h * ww;
            detail::im2col<T>(xp, c, h, ww, kk, stride, pad, oh, ow, col.data());
            T* op = out.data.data() + ni * o * oh * ow;
            detail::gemm<T>(false, false, o, oh * ow, c * kk * kk, wv.data.data(), col.data(), op);
            for (int64_t oc = 0; oc < o; ++oc) {
                T bias = bv[oc];
                T* row = op + oc * oh * ow;
                for (int64_t i = 0; i < oh * ow; ++i) row[i] += bias;
            }
        }
        int64_t s = stride, p = pad;
        return push(std::move(out), needs(x) || needs(w) || needs(b),
                    [x, w, b, s, p](TapeT& t, Var self) {
                        const auto& g = t.gref(self);
                        const auto& xv2 = t.val(x);
                        const auto& wv2 = t.val(w);
                        int64_t n = xv2.dim(0), c = xv2.dim(1), h = xv2.dim(2), ww = xv2.dim(3);
                        int64_t o = wv2.dim(0), kk = wv2.dim(2);
                        int64_t oh = g.dim(2), ow = g.dim(3);
                        std::vector<T> col(static_cast<size_t>(c * kk * kk * oh * ow));
                        std::vector<T> dcol;
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const T* gp = g.data.data() + ni * o * oh * ow;
                            if (t.needs(w) || t.needs(x))
                                detail::im2col<T>(xv2.data.data() + ni * c * h * ww, c, h, ww, kk,
                                                  s, p, oh, ow, col.data());
                            if (t.needs(w)) {
                                detail::gemm<T>(false, true, o, c * kk * kk, oh * ow, gp,
                                                col.data(), t.grad_buf(w).data.data(), true);
                            }
                            if (t.needs(b)) {
                                auto& gb = t.grad_buf(b);
                                for (int64_t oc = 0; oc < o; ++oc) {
                                    double acc = 0.0;
                                    const T* row = gp + oc * oh * ow;
                                    for (int64_t i = 0; i < oh * ow; ++i) acc += row[i];
                                    gb[oc] += static_cast<T>(acc);
                                }
                            }
                            if (t.needs(x)) {
                                dcol.assign(col.size(), T(0));
                                detail::gemm<T>(true, false, c * kk * kk, oh * ow, o,
                                                wv2.data.data(), gp, dcol.data());
                                detail::col2im<T>(dcol.data(), c, h, ww, kk, s, p, oh, ow,
                                                  t.grad_buf(x).data.data() + ni * c * h * ww);
                            }
                        }
                    });
    }

    // input (..., F) x weight (F, G) + bias (G)
    Var linear(Var x, Var w, Var b) {
        const auto& xv = val(x);
        const auto& wv = val(w);
        const auto& bv = val(b);
        if (wv.rank() != 2) throw ShapeError("linear: weight must be (F,G)");
        int64_t f = wv.dim(0), gdim = wv.dim(1);
        if (xv.shape.back() != f)
            throw ShapeError("linear: inner extents disagree " + shape_str(xv.shape) + " vs " +
                             shape_str(wv.shape));
        if (bv.rank() != 1 || bv.dim(0) != gdim) throw ShapeError("linear: bias must be (G)");
        int64_t rows = xv.numel() / f;
        Shape os = xv.shape;
        os.back() = gdim;
        TensorT<T> out(os);
        detail::gemm<T>(false, false, rows, gdim, f, xv.data.data(), wv.data.data(),
                        out.data.data());
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < gdim; ++j) out[r * gdim + j] += bv[j];
        return push(std::move(out), needs(x) || needs(w) || needs(b),
                    [x, w, b, rows, f, gdim](TapeT& t, Var self) {
                        const auto& g = t.gref(self);
                        if (t.needs(x))
                            detail::gemm<T>(false, true, rows, f, gdim, g.data.data(),
                                            t.val(w).data.data(), t.grad_buf(x).data.data(), true);
                        if (t.needs(w))
                            detail::gemm<T>(true, false, f, gdim, rows, t.val(x).data.data(),
                                            g.data.data(), t.grad_buf(w).data.data(), true);
                        if (t.needs(b)) {
                            auto& gb = t.grad_buf(b);
                            for (int64_t j = 0; j < gdim; ++j) {
                                double acc = 0.0;
                                for (int64_t r = 0; r < rows; ++r) acc += g[r * gdim + j];
                                gb[j] += static_cast<T>(acc);
                            }
                        }
                    });
    }

    // Batch norm over (N,H,W) per channel of an NCHW tensor. Running stats,
    // when supplied, are updated in train mode with momentum 0.1.
    Var batchnorm2d(Var x, Var gamma, Var beta, Tensor* run_mean, Tensor* run_var, bool training,
                    T eps = static_cast<T>(1e-5), T momentum = static_cast<T>(0.1)) {
        const auto& xv = val(x);
        if (xv.rank() != 4) throw ShapeError("batchnorm2d: input must be NCHW");
        int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        const auto& gv = val(gamma);
        const auto& bv = val(beta);
        if (gv.numel() != c || bv.numel() != c)
            throw ShapeError("batchnorm2d: gamma/beta extent must equal channel count");
        int64_t m = n * h * w;
        auto mu = std::make_shared<TensorT<T>>(Shape{c});
        auto invstd = std::make_shared<TensorT<T>>(Shape{c});
        if (training) {
            for (int64_t ci = 0; ci < c; ++ci) {
                double sum = 0.0, sq = 0.0;
                for (int64_t ni = 0; ni < n; ++ni) {
                    const T* p = xv.data.data() + (ni * c + ci) * h * w;
                    for (int64_t i = 0; i < h * w; ++i) {
                        sum += p[i];
                        sq += static_cast<double>(p[i]) * p[i];
                    }
                }
                double mean = sum / static_cast<double>(m);
                double var = sq / static_cast<double>(m) - mean * mean;
                if (var < 0) var = 0;
                (*mu)[ci] = static_cast<T>(mean);
                (*invstd)[ci] = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
                if (run_mean && run_var) {
                    (*run_mean)[ci] = static_cast<float>((1 - momentum) * (*run_mean)[ci] +
                                                         momentum * mean);
                    (*run_var)[ci] =
                        static_cast<float>((1 - momentum) * (*run_var)[ci] + momentum * var);
                }
            }
        } else {
            if (!run_mean || !run_var)
                throw InvalidInput("batchnorm2d: eval mode requires running stats");
            for (int64_t ci = 0; ci < c; ++ci) {
                (*mu)[ci] = static_cast<T>((*run_mean)[ci]);
                (*invstd)[ci] = static_cast<T>(
                    1.0 / std::sqrt(static_cast<double>((*run_var)[ci]) + static_cast<double>(eps)));
            }
        }
        TensorT<T> out(xv.shape);
        for (int64_t ni = 0; ni < n; ++ni) {
            for (int64_t ci = 0; ci < c; ++ci) {
                const T* p = xv.data.data() + (ni * c + ci) * h * w;
                T* q = out.data.data() + (ni * c + ci) * h * w;
                T mc = (*mu)[ci], is = (*invstd)[ci], gc = gv[ci], bc = bv[ci];
                for (int64_t i = 0; i < h * w; ++i) q[i] = gc * (p[i] - mc) * is + bc;
            }
        }
        bool train_flag = training;
        return push(
            std::move(out), needs(x) || needs(gamma) || needs(beta),
            [x, gamma, beta, mu, invstd, m, train_flag](TapeT& t, Var self) {
                const auto& g = t.gref(self);
                const auto& xv2 = t.val(x);
                const auto& gv2 = t.val(gamma);
                int64_t n = xv2.dim(0), c = xv2.dim(1), hw = xv2.dim(2) * xv2.dim(3);
                for (int64_t ci = 0; ci < c; ++ci) {
                    T mc = (*mu)[ci], is = (*invstd)[ci], gc = gv2[ci];
                    double sum_dy = 0.0, sum_dy_xhat = 0.0;
                    for (int64_t ni = 0; ni < n; ++ni) {
                        const T* gp = g.data.data() + (ni * c + ci) * hw;
                        const T* xp = xv2.data.data() + (ni * c + ci) * hw;
                        for (int64_t i = 0; i < hw; ++i) {
                            sum_dy += gp[i];
                            sum_dy_xhat += static_cast<double>(gp[i]) * ((xp[i] - mc) * is);
                        }
                    }
                    if (t.needs(gamma)) t.grad_buf(gamma)[ci] += static_cast<T>(sum_dy_xhat);
                    if (t.needs(beta)) t.grad_buf(beta)[ci] += static_cast<T>(sum_dy);
                    if (t.needs(x)) {
                        auto& gx = t.grad_buf(x);
                        double md = static_cast<double>(m);
                        for (int64_t ni = 0; ni < n; ++ni) {
                            const T* gp = g.data.data() + (ni * c + ci) * hw;
                            const T* xp = xv2.data.data() + (ni * c + ci) * hw;
                            T* op = gx.data.data() + (ni * c + ci) * hw;
                            for (int64_t i = 0; i < hw; ++i) {
                                double xhat = (xp[i] - mc) * is;
                                double dx;
                                if (train_flag) {
                                    dx = static_cast<double>(gc) * is *
                                         (gp[i] - sum_dy / md - xhat * sum_dy_xhat / md);
                                } else {
                                    dx = static_cast<double>(gc) * is * gp[i];
                                }
                                op[i] += static_cast<T>(dx);
                            }
                        }
                    }
                }
            });
    }

    Var softmax(Var a, int axis) {
        const auto& xv = val(a);
        int r = xv.rank();
        if (axis < 0) axis += r;
        if (axis < 0 || axis >= r) throw InvalidInput("softmax: axis out of range");
        int64_t inner = 1, outer = 1, n = xv.dim(axis);
        for (int i = 0; i < axis; ++i) outer *= xv.dim(i);
        for (int i = axis + 1; i < r; ++i) inner *= xv.dim(i);
        TensorT<T> out(xv.shape);
        for (int64_t o = 0; o < outer; ++o) {
            for (int64_t i = 0; i < inner; ++i) {
                const T* xi = xv.data.data() + o * n * inner + i;
                T* yi = out.data.data() + o * n * inner + i;
                T mx = xi[0];
                for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j * inner]);
                double sum = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    double e = std::exp(static_cast<double>(xi[j * inner] - mx));
                    yi[j * inner] = static_cast<T>(e);
                    sum += e;
                }
                T invs = static_cast<T>(1.0 / sum);
                for (int64_t j = 0; j < n; ++j) yi[j * inner] *= invs;
            }
        }
        return push(std::move(out), needs(a), [a, outer, inner, n](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& y = t.val(self);
            const auto& g = t.gref(self);
            auto& ga = t.grad_buf(a);
            for (int64_t o = 0; o < outer; ++o) {
                for (int64_t i = 0; i < inner; ++i) {
                    const T* yi = y.data.data() + o * n * inner + i;
                    const T* gi = g.data.data() + o * n * inner + i;
                    T* oi = ga.data.data() + o * n * inner + i;
                    double dot = 0.0;
                    for (int64_t j = 0; j < n; ++j)
                        dot += static_cast<double>(gi[j * inner]) * yi[j * inner];
                    for (int64_t j = 0; j < n; ++j)
                        oi[j * inner] += yi[j * inner] * (gi[j * inner] - static_cast<T>(dot));
                }
            }
        });
    }

    // Scaled dot-product attention per head with optional additive bias.
    // q (N,H,Lq,Dk), k (N,H,Lk,Dk), v (N,H,Lk,Dv) -> (N,H,Lq,Dv).
    Var attention(Var q, Var k, Var v, std::optional<Var> bias = std::nullopt) {
        const auto& qv = val(q);
        const auto& kv = val(k);
        const auto& vv = val(v);
        const TensorT<T>* bp = bias ? &val(*bias) : nullptr;
        auto out = TensorT<T>();
        auto weights = std::make_shared<TensorT<T>>();
        detail::attention_forward<T>(qv, kv, vv, bp, out, *weights);
        bool ng = needs(q) || needs(k) || needs(v) || (bias && needs(*bias));
        return push(std::move(out), ng, [q, k, v, bias, weights](TapeT& t, Var self) {
            const auto& g = t.gref(self);
            const auto& qv2 = t.val(q);
            const auto& kv2 = t.val(k);
            const auto& vv2 = t.val(v);
            int64_t n = qv2.dim(0), h = qv2.dim(1), lq = qv2.dim(2), dk = qv2.dim(3);
            int64_t lk = kv2.dim(2), dv = vv2.dim(3);
            T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
            std::vector<T> dA(static_cast<size_t>(lq * lk));
            std::vector<T> dZ(static_cast<size_t>(lq * lk));
            for (int64_t ni = 0; ni < n; ++ni) {
                for (int64_t hi = 0; hi < h; ++hi) {
                    const T* gp = g.data.data() + ((ni * h + hi) * lq) * dv;
                    const T* ap = weights->data.data() + ((ni * h + hi) * lq) * lk;
                    const T* qp = qv2.data.data() + ((ni * h + hi) * lq) * dk;
                    const T* kp = kv2.data.data() + ((ni * h + hi) * lk) * dk;
                    const T* vp = vv2.data.data() + ((ni * h + hi) * lk) * dv;
                    if (t.needs(v))
                        detail::gemm<T>(true, false, lk, dv, lq, ap, gp,
                                        t.grad_buf(v).data.data() + ((ni * h + hi) * lk) * dv,
                                        true);
                    // dA = dOut * V^T, then softmax backward row-wise -> dZ
                    detail::gemm<T>(false, true, lq, lk, dv, gp, vp, dA.data());
                    for (int64_t r = 0; r < lq; ++r) {
                        double dot = 0.0;
                        for (int64_t j = 0; j < lk; ++j)
                            dot += static_cast<double>(dA[static_cast<size_t>(r * lk + j)]) *
                                   ap[r * lk + j];
                        for (int64_t j = 0; j < lk; ++j)
                            dZ[static_cast<size_t>(r * lk + j)] =
                                ap[r * lk + j] *
                                (dA[static_cast<size_t>(r * lk + j)] - static_cast<T>(dot));
                    }
                    if (bias && t.needs(*bias)) {
                        T* gb = t.grad_buf(*bias).data.data() + hi * lq * lk;
                        for (int64_t i = 0; i < lq * lk; ++i) gb[i] += dZ[static_cast<size_t>(i)];
                    }
                    if (t.needs(q)) {
                        std::vector<T> dq(static_cast<size_t>(lq * dk));
                        detail::gemm<T>(false, false, lq, dk, lk, dZ.data(), kp, dq.data());
                        T* gq = t.grad_buf(q).data.data() + ((ni * h + hi) * lq) * dk;
                        for (int64_t i = 0; i < lq * dk; ++i)
                            gq[i] += scale * dq[static_cast<size_t>(i)];
                    }
                    if (t.needs(k)) {
                        std::vector<T> dkv(static_cast<size_t>(lk * dk));
                        detail::gemm<T>(true, false, lk, dk, lq, dZ.data(), qp, dkv.data());
                        T* gk = t.grad_buf(k).data.data() + ((ni * h + hi) * lk) * dk;
                        for (int64_t i = 0; i < lk * dk; ++i)
                            gk[i] += scale * dkv[static_cast<size_t>(i)];
                    }
                }
            }
        });
    }

    Var avgpool2d(Var a, int kk, int stride) {
        const auto& xv = val(a);
        if (xv.rank() != 4) throw ShapeError("avgpool2d: input must be NCHW");
        int64_t n = xv.dim(0), c = xv.dim(1), h = xv.dim(2), w = xv.dim(3);
        if (kk > h || kk > w) throw ShapeError("avgpool2d: kernel does not fit");
        int64_t oh = (h - kk) / stride + 1, ow = (w - kk) / stride + 1;
        TensorT<T> out({n, c, oh, ow});
        T inv = static_cast<T>(1.0 / (kk * kk));
        for (int64_t nc = 0; nc < n * c; ++nc) {
            const T* p = xv.data.data() + nc * h * w;
            T* q = out.data.data() + nc * oh * ow;
            for (int64_t r = 0; r < oh; ++r)
                for (int64_t cidx = 0; cidx < ow; ++cidx) {
                    double acc = 0.0;
                    for (int64_t i = 0; i < kk; ++i)
                        for (int64_t j = 0; j < kk; ++j)
                            acc += p[(r * stride + i) * w + cidx * stride + j];
                    q[r * ow + cidx] = static_cast<T>(acc) * inv;
                }
        }
        int64_t s = stride, kn = kk;
        return push(std::move(out), needs(a), [a, s, kn](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            const auto& xv2 = t.val(a);
            int64_t n = xv2.dim(0), c = xv2.dim(1), h = xv2.dim(2), w = xv2.dim(3);
            int64_t oh = g.dim(2), ow = g.dim(3);
            T inv = static_cast<T>(1.0 / (kn * kn));
            auto& ga = t.grad_buf(a);
            for (int64_t nc = 0; nc < n * c; ++nc) {
                const T* gp = g.data.data() + nc * oh * ow;
                T* xp = ga.data.data() + nc * h * w;
                for (int64_t r = 0; r < oh; ++r)
                    for (int64_t cidx = 0; cidx < ow; ++cidx) {
                        T gv = gp[r * ow + cidx] * inv;
                        for (int64_t i = 0; i < kn; ++i)
                            for (int64_t j = 0; j < kn; ++j)
                                xp[(r * s + i) * w + cidx * s + j] += gv;
                    }
            }
        });
    }

    // NCHW -> NC mean over spatial extent
    Var global_avgpool(Var a) {
        const auto& xv = val(a);
        if (xv.rank() != 4) throw ShapeError("global_avgpool: input must be NCHW");
        int64_t n = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
        TensorT<T> out({n, c});
        for (int64_t nc = 0; nc < n * c; ++nc) {
            double acc = 0.0;
            const T* p = xv.data.data() + nc * hw;
            for (int64_t i = 0; i < hw; ++i) acc += p[i];
            out[nc] = static_cast<T>(acc / static_cast<double>(hw));
        }
        return push(std::move(out), needs(a), [a, hw](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            auto& ga = t.grad_buf(a);
            T inv = static_cast<T>(1.0 / static_cast<double>(hw));
            for (int64_t nc = 0; nc < g.numel(); ++nc) {
                T gv = g[nc] * inv;
                T* p = ga.data.data() + nc * hw;
                for (int64_t i = 0; i < hw; ++i) p[i] += gv;
            }
        });
    }

    // (N,L,D) -> (N,D) mean over tokens
    Var mean_tokens(Var a) {
        const auto& xv = val(a);
        if (xv.rank() != 3) throw ShapeError("mean_tokens: input must be (N,L,D)");
        int64_t n = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
        TensorT<T> out({n, d});
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t di = 0; di < d; ++di) {
                double acc = 0.0;
                for (int64_t li = 0; li < l; ++li) acc += xv[(ni * l + li) * d + di];
                out[ni * d + di] = static_cast<T>(acc / static_cast<double>(l));
            }
        return push(std::move(out), needs(a), [a, l, d](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            auto& ga = t.grad_buf(a);
            int64_t n = g.dim(0);
            T inv = static_cast<T>(1.0 / static_cast<double>(l));
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t li = 0; li < l; ++li)
                    for (int64_t di = 0; di < d; ++di)
                        ga[(ni * l + li) * d + di] += g[ni * d + di] * inv;
        });
    }

    Var concat_channels(const std::vector<Var>& parts) {
        if (parts.empty()) throw InvalidInput("concat_channels: no inputs");
        const auto& first = val(parts[0]);
        if (first.rank() != 4) throw ShapeError("concat_channels: inputs must be NCHW");
        int64_t n = first.dim(0), h = first.dim(2), w = first.dim(3);
        int64_t ctotal = 0;
        bool ng = false;
        for (Var p : parts) {
            const auto& v = val(p);
            if (v.rank() != 4 || v.dim(0) != n || v.dim(2) != h || v.dim(3) != w)
                throw ShapeError("concat_channels: spatial/batch extents disagree");
            ctotal += v.dim(1);
            ng = ng || needs(p);
        }
        TensorT<T> out({n, ctotal, h, w});
        int64_t coff = 0;
        for (Var p : parts) {
            const auto& v = val(p);
            int64_t c = v.dim(1);
            for (int64_t ni = 0; ni < n; ++ni)
                std::copy(v.data.data() + ni * c * h * w, v.data.data() + (ni + 1) * c * h * w,
                          out.data.data() + (ni * ctotal + coff) * h * w);
            coff += c;
        }
        auto plist = parts;
        return push(std::move(out), ng, [plist, n, h, w, ctotal](TapeT& t, Var self) {
            const auto& g = t.gref(self);
            int64_t coff = 0;
            for (Var p : plist) {
                int64_t c = t.val(p).dim(1);
                if (t.needs(p)) {
                    auto& gp = t.grad_buf(p);
                    for (int64_t ni = 0; ni < n; ++ni) {
                        const T* src = g.data.data() + (ni * ctotal + coff) * h * w;
                        T* dst = gp.data.data() + ni * c * h * w;
                        for (int64_t i = 0; i < c * h * w; ++i) dst[i] += src[i];
                    }
                }
                coff += c;
            }
        });
    }

    // out[i] = table.flat[idx[i]]; scatter-add backward. Used for the
    // relative-offset attention bias table.
    Var gather(Var table, std::shared_ptr<const std::vector<int64_t>> idx, Shape out_shape) {
        const auto& tv = val(table);
        if (static_cast<int64_t>(idx->size()) != shape_numel(out_shape))
            throw ShapeError("gather: index count does not match output shape");
        TensorT<T> out(out_shape);
        for (size_t i = 0; i < idx->size(); ++i) {
            int64_t j = (*idx)[i];
            if (j < 0 || j >= tv.numel()) throw InvalidInput("gather: index out of range");
            out[static_cast<int64_t>(i)] = tv[j];
        }
        return push(std::move(out), needs(table), [table, idx](TapeT& t, Var self) {
            if (!t.needs(table)) return;
            const auto& g = t.gref(self);
            auto& gt = t.grad_buf(table);
            for (size_t i = 0; i < idx->size(); ++i)
                gt[(*idx)[i]] += g[static_cast<int64_t>(i)];
        });
    }

    // (N,L,D) -> (N,L',D) selecting tokens by index; scatter-add backward.
    Var index_tokens(Var a, std::shared_ptr<const std::vector<int64_t>> idx) {
        const auto& xv = val(a);
        if (xv.rank() != 3) throw ShapeError("index_tokens: input must be (N,L,D)");
        int64_t n = xv.dim(0), l = xv.dim(1), d = xv.dim(2);
        int64_t lo = static_cast<int64_t>(idx->size());
        TensorT<T> out({n, lo, d});
        for (int64_t ni = 0; ni < n; ++ni)
            for (int64_t li = 0; li < lo; ++li) {
                int64_t src = (*idx)[static_cast<size_t>(li)];
                if (src < 0 || src >= l) throw InvalidInput("index_tokens: index out of range");
                std::copy(xv.data.data() + (ni * l + src) * d,
                          xv.data.data() + (ni * l + src + 1) * d,
                          out.data.data() + (ni * lo + li) * d);
            }
        return push(std::move(out), needs(a), [a, idx, l, d](TapeT& t, Var self) {
            if (!t.needs(a)) return;
            const auto& g = t.gref(self);
            auto& ga = t.grad_buf(a);
            int64_t n = g.dim(0), lo = g.dim(1);
            for (int64_t ni = 0; ni < n; ++ni)
                for (int64_t li = 0; li < lo; ++li) {
                    int64_t dst = (*idx)[static_cast<size_t>(li)];
                    const T* src = g.data.data() + (ni * lo + li) * d;
                    T* dp = ga.data.data() + (ni * l + dst) * d;
                    for (int64_t i = 0; i < d; ++i) dp[i] += src[i];
                }
        });
    }

    // Mean over batch of -log softmax(logits)[label]; logits (N,C).
    Var cross_entropy(Var logits, std::shared_ptr<const std::vector<int>> labels) {
        const auto& lv = val(logits);
        if (lv.rank() != 2) throw ShapeError("cross_entropy: logits must be (N,C)");
        int64_t n = lv.dim(0), c = lv.dim(1);
        if (static_cast<int64_t>(labels->size()) != n)
            throw InvalidInput("cross_entropy: label count must equal batch size");
        for (int lab : *labels)
            if (lab < 0 || lab >= c) throw InvalidInput("cross_entropy: label out of range");
        double total = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const T* row = lv.data.data() + i * c;
            T mx = row[0];
            for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
            double lse = std::log(sum) + static_cast<double>(mx);
            total += lse - static_cast<double>(row[(*labels)[static_cast<size_t>(i)]]);
        }
        TensorT<T> out({1});
        out[0] = static_cast<T>(total / static_cast<double>(n));
        if (!out.all_finite()) throw NumericError("cross_entropy: non-finite loss");
        return push(std::move(out), needs(logits), [logits, labels](TapeT& t, Var self) {
            if (!t.needs(logits)) return;
            const auto& g = t.gref(self);
            const auto& lv2 = t.val(logits);
            int64_t n = lv2.dim(0), c = lv2.dim(1);
            auto& gl = t.grad_buf(logits);
            T gscale = g[0] / static_cast<T>(n);
            std::vector<T> sm(static_cast<size_t>(c));
            for (int64_t i = 0; i < n; ++i) {
                detail::softmax_rows<T>(lv2.data.data() + i * c, sm.data(), 1, c);
                for (int64_t j = 0; j < c; ++j) {
                    T delta = (j == (*labels)[static_cast<size_t>(i)]) ? T(1) : T(0);
                    gl[i * c + j] += (sm[static_cast<size_t>(j)] - delta) * gscale;
                }
            }
        });
    }

    bool needs(Var v) const { return nodes_[static_cast<size_t>(v)].needs_grad; }

    TensorT<T>& grad_buf(Var v) {
        Node& n = nodes_[static_cast<size_t>(v)];
        if (n.grad.data.empty()) n.grad = TensorT<T>::zeros(n.value.shape);
        return n.grad;
    }

   private:
    struct Node {
        TensorT<T> value;
        TensorT<T> grad;
        bool needs_grad = false;
        std::function<void(TapeT&)> back;
    };

    const TensorT<T>& gref(Var v) const { return nodes_[static_cast<size_t>(v)].grad; }

    Var push(TensorT<T> value, bool needs_grad, std::function<void(TapeT&, Var)> back) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        if (needs_grad && back) {
            Var self = static_cast<Var>(nodes_.size());
            n.back = [back = std::move(back), self](TapeT& t) { back(t, self); };
        }
        nodes_.push_back(std::move(n));
        return static_cast<Var>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

using Tape = TapeT<float>;
using TapeD = TapeT<double>;

}  // namespace lmc
