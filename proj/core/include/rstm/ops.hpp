#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "rstm/tape.hpp"
#include "rstm/tensor.hpp"

// Differentiable operations. Forward computes the output tensor eagerly,
// backward is a closure appended to the tape. Heavy lifting (conv2d, linear,
// matmul) is routed through Eigen's single-threaded GEMM; accumulation order
// is fixed, so results are bit-reproducible run to run.

namespace rstm {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Var<T> unary_ew(Var<T> x, Fwd f, Bwd dfdx_times_g) {
    Tape<T>& tp = *x.tape;
    Tensor<T> out;
    out.dims = x.dims();
    out.data.resize(x.val().data.size());
    const auto& xd = x.val().data;
    for (std::size_t i = 0; i < xd.size(); ++i) out.data[i] = f(xd[i]);
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid, dfdx_times_g](Tape<T>& t) {
        const auto& g = t.grad(oid);
        const auto& xv = t.val(xid).data;
        const auto& yv = t.val(oid).data;
        auto& gx = t.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += dfdx_times_g(xv[i], yv[i], g[i]);
    });
    return Var<T>{&tp, oid};
}

}  // namespace detail

template <typename T>
Var<T> relu(Var<T> x) {
    return detail::unary_ew(
        x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T, T g) { return v > T(0) ? g : T(0); });
}

template <typename T>
Var<T> leaky_relu(Var<T> x, T slope = T(0.2)) {
    return detail::unary_ew(
        x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T, T g) { return v > T(0) ? g : slope * g; });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    return detail::unary_ew(
        x,
        [](T v) {
            return v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                             : std::exp(v) / (T(1) + std::exp(v));
        },
        [](T, T y, T g) { return g * y * (T(1) - y); });
}

template <typename T>
Var<T> tanh_(Var<T> x) {
    return detail::unary_ew(
        x, [](T v) { return std::tanh(v); }, [](T, T y, T g) { return g * (T(1) - y * y); });
}

template <typename T>
Var<T> softplus(Var<T> x) {
    return detail::unary_ew(
        x,
        [](T v) { return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v))); },
        [](T v, T, T g) {
            T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
            return g * s;
        });
}

template <typename T>
Var<T> abs_(Var<T> x) {
    return detail::unary_ew(
        x, [](T v) { return std::abs(v); },
        [](T v, T, T g) { return v > T(0) ? g : (v < T(0) ? -g : T(0)); });
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
    return detail::unary_ew(
        x, [c](T v) { return c * v; }, [c](T, T, T g) { return c * g; });
}

template <typename T>
Var<T> add_const(Var<T> x, T c) {
    return detail::unary_ew(
        x, [c](T v) { return v + c; }, [](T, T, T g) { return g; });
}

// y = 1/x elementwise; x must be nonzero
template <typename T>
Var<T> reciprocal(Var<T> x) {
    return detail::unary_ew(
        x, [](T v) { return T(1) / v; }, [](T, T y, T g) { return -g * y * y; });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    require_shape(a.dims() == b.dims(), "add", a.dims(), b.dims());
    Tensor<T> out;
    out.dims = a.dims();
    out.data.resize(a.val().data.size());
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a.val().data[i] + b.val().data[i];
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [aid = a.id, bid = b.id, oid](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        auto& gb = t.grad(bid);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
    return Var<T>{&tp, oid};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    return add(a, scale(b, T(-1)));
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    Tape<T>& tp = *a.tape;
    require_shape(a.dims() == b.dims(), "mul", a.dims(), b.dims());
    Tensor<T> out;
    out.dims = a.dims();
    out.data.resize(a.val().data.size());
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a.val().data[i] * b.val().data[i];
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [aid = a.id, bid = b.id, oid](Tape<T>& t) {
        const auto& g = t.grad(oid);
        const auto& av = t.val(aid).data;
        const auto& bv = t.val(bid).data;
        auto& ga = t.grad(aid);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        auto& gb = t.grad(bid);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    });
    return Var<T>{&tp, oid};
}

// x (any shape) scaled by a scalar Var s (shape [1])
template <typename T>
Var<T> mul_scalar(Var<T> x, Var<T> s) {
    Tape<T>& tp = *x.tape;
    require_shape(s.val().size() == 1, "mul_scalar: scalar expected", s.dims(), {1});
    T sv = s.val().data[0];
    Tensor<T> out;
    out.dims = x.dims();
    out.data.resize(x.val().data.size());
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = x.val().data[i] * sv;
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, sid = s.id, oid](Tape<T>& t) {
        const auto& g = t.grad(oid);
        const auto& xv = t.val(xid).data;
        T sv2 = t.val(sid).data[0];
        auto& gx = t.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv2;
        T acc = T(0);
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
        t.grad(sid)[0] += acc;
    });
    return Var<T>{&tp, oid};
}

template <typename T>
Var<T> reshape(Var<T> x, std::vector<int> newdims) {
    Tape<T>& tp = *x.tape;
    require_shape(Tensor<T>::count(newdims) == x.val().size(), "reshape", x.dims(), newdims);
    Tensor<T> out;
    out.dims = std::move(newdims);
    out.data = x.val().data;
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    return Var<T>{&tp, oid};
}

// --------------------------------------------------------------------------
// matmul / linear

// C = op(A) * op(B) with optional transposes
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b, bool ta = false, bool tb = false) {
    Tape<T>& tp = *a.tape;
    require_shape(a.dims().size() == 2 && b.dims().size() == 2, "matmul: 2-d expected", a.dims(),
                  b.dims());
    int am = a.dims()[0], an = a.dims()[1];
    int bm = b.dims()[0], bn = b.dims()[1];
    int M = ta ? an : am, K = ta ? am : an;
    int Kb = tb ? bn : bm, N = tb ? bm : bn;
    require_shape(K == Kb, "matmul inner dim", a.dims(), b.dims());
    Tensor<T> out({M, N});
    {
        ECMap<T> A(a.val().data.data(), am, an);
        ECMap<T> B(b.val().data.data(), bm, bn);
        EMap<T> C(out.data.data(), M, N);
        if (!ta && !tb) C.noalias() = A * B;
        else if (ta && !tb) C.noalias() = A.transpose() * B;
        else if (!ta && tb) C.noalias() = A * B.transpose();
        else C.noalias() = A.transpose() * B.transpose();
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [aid = a.id, bid = b.id, oid, ta, tb, am, an, bm, bn, M, N](Tape<T>& t) {
        ECMap<T> G(t.grad(oid).data(), M, N);
        ECMap<T> A(t.val(aid).data.data(), am, an);
        ECMap<T> B(t.val(bid).data.data(), bm, bn);
        EMap<T> GA(t.grad(aid).data(), am, an);
        EMap<T> GB(t.grad(bid).data(), bm, bn);
        if (!ta && !tb) {
            GA.noalias() += G * B.transpose();
            GB.noalias() += A.transpose() * G;
        } else if (ta && !tb) {
            GA.noalias() += B * G.transpose();
            GB.noalias() += A * G;
        } else if (!ta && tb) {
            GA.noalias() += G * B;
            GB.noalias() += G.transpose() * A;
        } else {
            GA.noalias() += B.transpose() * G.transpose();
            GB.noalias() += G.transpose() * A.transpose();
        }
    });
    return Var<T>{&tp, oid};
}

// batched matmul: A[N,M,K] * op(B[N,K,L] or B[N,L,K]) -> [N,M,L]
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool tb = false) {
    Tape<T>& tp = *a.tape;
    require_shape(a.dims().size() == 3 && b.dims().size() == 3, "bmm: 3-d expected", a.dims(),
                  b.dims());
    int Nb = a.dims()[0], M = a.dims()[1], K = a.dims()[2];
    int L = tb ? b.dims()[1] : b.dims()[2];
    int Kb = tb ? b.dims()[2] : b.dims()[1];
    require_shape(Nb == b.dims()[0] && K == Kb, "bmm shapes", a.dims(), b.dims());
    Tensor<T> out({Nb, M, L});
    int brows = b.dims()[1], bcols = b.dims()[2];
    for (int n = 0; n < Nb; ++n) {
        ECMap<T> A(a.val().data.data() + static_cast<std::size_t>(n) * M * K, M, K);
        ECMap<T> B(b.val().data.data() + static_cast<std::size_t>(n) * brows * bcols, brows, bcols);
        EMap<T> C(out.data.data() + static_cast<std::size_t>(n) * M * L, M, L);
        if (tb) C.noalias() = A * B.transpose();
        else C.noalias() = A * B;
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [aid = a.id, bid = b.id, oid, tb, Nb, M, K, L, brows, bcols](Tape<T>& t) {
        for (int n = 0; n < Nb; ++n) {
            ECMap<T> G(t.grad(oid).data() + static_cast<std::size_t>(n) * M * L, M, L);
            ECMap<T> A(t.val(aid).data.data() + static_cast<std::size_t>(n) * M * K, M, K);
            ECMap<T> B(t.val(bid).data.data() + static_cast<std::size_t>(n) * brows * bcols, brows,
                       bcols);
            EMap<T> GA(t.grad(aid).data() + static_cast<std::size_t>(n) * M * K, M, K);
            EMap<T> GB(t.grad(bid).data() + static_cast<std::size_t>(n) * brows * bcols, brows,
                       bcols);
            if (tb) {
                GA.noalias() += G * B;
                GB.noalias() += G.transpose() * A;
            } else {
                GA.noalias() += G * B.transpose();
                GB.noalias() += A.transpose() * G;
            }
        }
    });
    return Var<T>{&tp, oid};
}

// x[N,Din] * W[Dout,Din]^T + b[Dout]
template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 2 && w.dims().size() == 2, "linear: 2-d expected", x.dims(),
                  w.dims());
    require_shape(x.dims()[1] == w.dims()[1], "linear inner dim", x.dims(), w.dims());
    require_shape(b.dims().size() == 1 && b.dims()[0] == w.dims()[0], "linear bias", b.dims(),
                  {w.dims()[0]});
    int N = x.dims()[0], Din = x.dims()[1], Dout = w.dims()[0];
    Tensor<T> out({N, Dout});
    {
        ECMap<T> X(x.val().data.data(), N, Din);
        ECMap<T> W(w.val().data.data(), Dout, Din);
        EMap<T> Y(out.data.data(), N, Dout);
        Y.noalias() = X * W.transpose();
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < Dout; ++d) out.at2(n, d) += b.val().data[d];
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, wid = w.id, bid = b.id, oid, N, Din, Dout](Tape<T>& t) {
        ECMap<T> G(t.grad(oid).data(), N, Dout);
        ECMap<T> X(t.val(xid).data.data(), N, Din);
        ECMap<T> W(t.val(wid).data.data(), Dout, Din);
        EMap<T> GX(t.grad(xid).data(), N, Din);
        EMap<T> GW(t.grad(wid).data(), Dout, Din);
        GX.noalias() += G * W;
        GW.noalias() += G.transpose() * X;
        auto& gb = t.grad(bid);
        for (int n = 0; n < N; ++n)
            for (int d = 0; d < Dout; ++d) gb[d] += G(n, d);
    });
    return Var<T>{&tp, oid};
}

// --------------------------------------------------------------------------
// conv2d

namespace detail {

template <typename T>
void im2col(const T* x, int Cin, int H, int W, int kh, int kw, int stride, int pad, int Ho, int Wo,
            T* col) {
    for (int c = 0; c < Cin; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                T* dst = col + ((static_cast<std::size_t>(c) * kh + i) * kw + j) *
                                   (static_cast<std::size_t>(Ho) * Wo);
                for (int oh = 0; oh < Ho; ++oh) {
                    int ih = oh * stride - pad + i;
                    if (ih < 0 || ih >= H) {
                        for (int ow = 0; ow < Wo; ++ow) dst[oh * Wo + ow] = T(0);
                        continue;
                    }
                    const T* src = x + (static_cast<std::size_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        int iw = ow * stride - pad + j;
                        dst[oh * Wo + ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, int Cin, int H, int W, int kh, int kw, int stride, int pad, int Ho,
                int Wo, T* gx) {
    for (int c = 0; c < Cin; ++c) {
        for (int i = 0; i < kh; ++i) {
            for (int j = 0; j < kw; ++j) {
                const T* src = col + ((static_cast<std::size_t>(c) * kh + i) * kw + j) *
                                         (static_cast<std::size_t>(Ho) * Wo);
                for (int oh = 0; oh < Ho; ++oh) {
                    int ih = oh * stride - pad + i;
                    if (ih < 0 || ih >= H) continue;
                    T* dst = gx + (static_cast<std::size_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        int iw = ow * stride - pad + j;
                        if (iw >= 0 && iw < W) dst[iw] += src[oh * Wo + ow];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// cross-correlation, odd kernels, analytic gradients for input/weight/bias
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 4 && w.dims().size() == 4, "conv2d: 4-d expected", x.dims(),
                  w.dims());
    int N = x.dims()[0], Cin = x.dims()[1], H = x.dims()[2], W = x.dims()[3];
    int Cout = w.dims()[0], kh = w.dims()[2], kw = w.dims()[3];
    require_shape(w.dims()[1] == Cin, "conv2d channel mismatch", x.dims(), w.dims());
    require_shape(b.dims().size() == 1 && b.dims()[0] == Cout, "conv2d bias", b.dims(), {Cout});
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: even kernel " + shape_str(w.dims()));
    if (stride < 1 || pad < 0) throw ShapeError("conv2d: bad stride/pad");
    if (H + 2 * pad < kh || W + 2 * pad < kw)
        throw ShapeError("conv2d: kernel larger than padded input " + shape_str(x.dims()) +
                         " weight " + shape_str(w.dims()));
    // floor output size, matching the usual convolution convention
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    int Kc = Cin * kh * kw;
    Tensor<T> out({N, Cout, Ho, Wo});
    {
        std::vector<T> col(static_cast<std::size_t>(Kc) * Ho * Wo);
        ECMap<T> Wm(w.val().data.data(), Cout, Kc);
        for (int n = 0; n < N; ++n) {
            detail::im2col(x.val().data.data() + static_cast<std::size_t>(n) * Cin * H * W, Cin, H,
                           W, kh, kw, stride, pad, Ho, Wo, col.data());
            ECMap<T> C(col.data(), Kc, Ho * Wo);
            EMap<T> Y(out.data.data() + static_cast<std::size_t>(n) * Cout * Ho * Wo, Cout,
                      Ho * Wo);
            Y.noalias() = Wm * C;
            for (int c = 0; c < Cout; ++c) Y.row(c).array() += b.val().data[c];
        }
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, wid = w.id, bid = b.id, oid, N, Cin, H, W, Cout, kh, kw,
                          stride, pad, Ho, Wo, Kc](Tape<T>& t) {
        std::vector<T> col(static_cast<std::size_t>(Kc) * Ho * Wo);
        std::vector<T> gcol(col.size());
        ECMap<T> Wm(t.val(wid).data.data(), Cout, Kc);
        EMap<T> GW(t.grad(wid).data(), Cout, Kc);
        auto& gb = t.grad(bid);
        for (int n = 0; n < N; ++n) {
            ECMap<T> G(t.grad(oid).data() + static_cast<std::size_t>(n) * Cout * Ho * Wo, Cout,
                       Ho * Wo);
            detail::im2col(t.val(xid).data.data() + static_cast<std::size_t>(n) * Cin * H * W, Cin,
                           H, W, kh, kw, stride, pad, Ho, Wo, col.data());
            ECMap<T> C(col.data(), Kc, Ho * Wo);
            GW.noalias() += G * C.transpose();
            EMap<T> GC(gcol.data(), Kc, Ho * Wo);
            GC.noalias() = Wm.transpose() * G;
            detail::col2im_add(gcol.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                               t.grad(xid).data() + static_cast<std::size_t>(n) * Cin * H * W);
            for (int c = 0; c < Cout; ++c) gb[c] += G.row(c).sum();
        }
    });
    return Var<T>{&tp, oid};
}

// --------------------------------------------------------------------------
// softmax / normalization / resize

// row-wise softmax with max subtraction
template <typename T>
Var<T> softmax_rows(Var<T> x) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 2, "softmax_rows: 2-d expected", x.dims(), {});
    int R = x.dims()[0], C = x.dims()[1];
    Tensor<T> out({R, C});
    for (int r = 0; r < R; ++r) {
        T mx = x.val().at2(r, 0);
        for (int c = 1; c < C; ++c) mx = std::max(mx, x.val().at2(r, c));
        T sum = T(0);
        for (int c = 0; c < C; ++c) {
            T e = std::exp(x.val().at2(r, c) - mx);
            out.at2(r, c) = e;
            sum += e;
        }
        for (int c = 0; c < C; ++c) out.at2(r, c) /= sum;
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid, R, C](Tape<T>& t) {
        const auto& y = t.val(oid);
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        for (int r = 0; r < R; ++r) {
            T dot = T(0);
            for (int c = 0; c < C; ++c) dot += g[r * C + c] * y.at2(r, c);
            for (int c = 0; c < C; ++c) gx[r * C + c] += y.at2(r, c) * (g[r * C + c] - dot);
        }
    });
    return Var<T>{&tp, oid};
}

enum class ResizeMode { kNearest, kBilinear };

// nearest: floor index mapping; bilinear: align-corners=false
template <typename T>
Var<T> resize(Var<T> x, int outH, int outW, ResizeMode mode) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 4, "resize: 4-d expected", x.dims(), {});
    int N = x.dims()[0], C = x.dims()[1], H = x.dims()[2], W = x.dims()[3];
    if (outH < 1 || outW < 1) throw ShapeError("resize: bad output size");
    Tensor<T> out({N, C, outH, outW});
    if (mode == ResizeMode::kNearest) {
        std::vector<int> hi(outH), wi(outW);
        for (int i = 0; i < outH; ++i) hi[i] = std::min(H - 1, i * H / outH);
        for (int j = 0; j < outW; ++j) wi[j] = std::min(W - 1, j * W / outW);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < outH; ++i)
                    for (int j = 0; j < outW; ++j)
                        out.at4(n, c, i, j) = x.val().at4(n, c, hi[i], wi[j]);
        int oid = tp.push(std::move(out));
        tp.set_backward(oid, [xid = x.id, oid, N, C, H, W, outH, outW](Tape<T>& t) {
            auto& gx = t.grad(xid);
            const auto& g = t.grad(oid);
            std::size_t k = 0;
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c)
                    for (int i = 0; i < outH; ++i) {
                        int ih = std::min(H - 1, i * H / outH);
                        for (int j = 0; j < outW; ++j, ++k) {
                            int iw = std::min(W - 1, j * W / outW);
                            gx[((static_cast<std::size_t>(n) * C + c) * H + ih) * W + iw] += g[k];
                        }
                    }
        });
        return Var<T>{&tp, oid};
    }
    // bilinear: source coord = (i+0.5)*H/outH - 0.5, corners clamped
    struct Lerp {
        int i0, i1;
        T w1;
    };
    auto make = [](int in, int outn) {
        std::vector<Lerp> v(static_cast<std::size_t>(outn));
        for (int i = 0; i < outn; ++i) {
            double src = (i + 0.5) * static_cast<double>(in) / outn - 0.5;
            int i0 = static_cast<int>(std::floor(src));
            T w1 = static_cast<T>(src - i0);
            int i1 = std::min(in - 1, std::max(0, i0 + 1));
            i0 = std::min(in - 1, std::max(0, i0));
            v[static_cast<std::size_t>(i)] = {i0, i1, w1};
        }
        return v;
    };
    auto lh = std::make_shared<std::vector<Lerp>>(make(H, outH));
    auto lw = std::make_shared<std::vector<Lerp>>(make(W, outW));
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < outH; ++i) {
                const Lerp& a = (*lh)[static_cast<std::size_t>(i)];
                for (int j = 0; j < outW; ++j) {
                    const Lerp& b = (*lw)[static_cast<std::size_t>(j)];
                    T v00 = x.val().at4(n, c, a.i0, b.i0);
                    T v01 = x.val().at4(n, c, a.i0, b.i1);
                    T v10 = x.val().at4(n, c, a.i1, b.i0);
                    T v11 = x.val().at4(n, c, a.i1, b.i1);
                    out.at4(n, c, i, j) = (T(1) - a.w1) * ((T(1) - b.w1) * v00 + b.w1 * v01) +
                                          a.w1 * ((T(1) - b.w1) * v10 + b.w1 * v11);
                }
            }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid, N, C, H, W, outH, outW, lh, lw](Tape<T>& t) {
        auto& gx = t.grad(xid);
        const auto& g = t.grad(oid);
        std::size_t k = 0;
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                T* gp = gx.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
                for (int i = 0; i < outH; ++i) {
                    const Lerp& a = (*lh)[static_cast<std::size_t>(i)];
                    for (int j = 0; j < outW; ++j, ++k) {
                        const Lerp& b = (*lw)[static_cast<std::size_t>(j)];
                        T gv = g[k];
                        gp[a.i0 * W + b.i0] += (T(1) - a.w1) * (T(1) - b.w1) * gv;
                        gp[a.i0 * W + b.i1] += (T(1) - a.w1) * b.w1 * gv;
                        gp[a.i1 * W + b.i0] += a.w1 * (T(1) - b.w1) * gv;
                        gp[a.i1 * W + b.i1] += a.w1 * b.w1 * gv;
                    }
                }
            }
    });
    return Var<T>{&tp, oid};
}

// parameter-free per-(sample,channel) normalization
template <typename T>
Var<T> instance_norm(Var<T> x, T eps = T(1e-5)) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 4, "instance_norm: 4-d expected", x.dims(), {});
    int N = x.dims()[0], C = x.dims()[1], H = x.dims()[2], W = x.dims()[3];
    int HW = H * W;
    Tensor<T> out({N, C, H, W});
    auto inv_sigma = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xp = x.val().data.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            T mean = T(0);
            for (int k = 0; k < HW; ++k) mean += xp[k];
            mean /= static_cast<T>(HW);
            T var = T(0);
            for (int k = 0; k < HW; ++k) var += (xp[k] - mean) * (xp[k] - mean);
            var /= static_cast<T>(HW);
            T is = T(1) / std::sqrt(var + eps);
            (*inv_sigma)[static_cast<std::size_t>(n) * C + c] = is;
            T* yp = out.data.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            for (int k = 0; k < HW; ++k) yp[k] = (xp[k] - mean) * is;
        }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid, N, C, HW, inv_sigma](Tape<T>& t) {
        const auto& y = t.val(oid).data;
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                T gmean = T(0), gydot = T(0);
                for (int k = 0; k < HW; ++k) {
                    gmean += g[base + k];
                    gydot += g[base + k] * y[base + k];
                }
                gmean /= static_cast<T>(HW);
                gydot /= static_cast<T>(HW);
                T is = (*inv_sigma)[static_cast<std::size_t>(n) * C + c];
                for (int k = 0; k < HW; ++k)
                    gx[base + k] += is * (g[base + k] - gmean - y[base + k] * gydot);
            }
    });
    return Var<T>{&tp, oid};
}

// --------------------------------------------------------------------------
// shape surgery

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw ShapeError("concat: empty input list");
    Tape<T>& tp = *xs[0].tape;
    const auto& d0 = xs[0].dims();
    int nd = static_cast<int>(d0.size());
    if (axis < 0 || axis >= nd) throw ShapeError("concat: bad axis");
    std::vector<int> odims = d0;
    int cat = 0;
    for (const auto& x : xs) {
        const auto& d = x.dims();
        require_shape(static_cast<int>(d.size()) == nd, "concat rank", d0, d);
        for (int i = 0; i < nd; ++i)
            if (i != axis) require_shape(d[i] == d0[i], "concat dim", d0, d);
        cat += d[axis];
    }
    odims[axis] = cat;
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= d0[i];
    for (int i = axis + 1; i < nd; ++i) inner *= d0[i];
    Tensor<T> out(odims);
    std::int64_t ostride = static_cast<std::int64_t>(cat) * inner;
    std::int64_t off = 0;
    std::vector<int> ids;
    std::vector<std::int64_t> strides, offs;
    for (const auto& x : xs) {
        std::int64_t s = static_cast<std::int64_t>(x.dims()[axis]) * inner;
        for (std::int64_t o = 0; o < outer; ++o)
            std::copy_n(x.val().data.data() + o * s, s, out.data.data() + o * ostride + off);
        ids.push_back(x.id);
        strides.push_back(s);
        offs.push_back(off);
        off += s;
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [ids, strides, offs, outer, ostride, oid](Tape<T>& t) {
        const auto& g = t.grad(oid);
        for (std::size_t k = 0; k < ids.size(); ++k) {
            auto& gx = t.grad(ids[k]);
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t i = 0; i < strides[k]; ++i)
                    gx[static_cast<std::size_t>(o * strides[k] + i)] +=
                        g[static_cast<std::size_t>(o * ostride + offs[k] + i)];
        }
    });
    return Var<T>{&tp, oid};
}

template <typename T>
Var<T> slice_axis(Var<T> x, int axis, int from, int to) {
    Tape<T>& tp = *x.tape;
    const auto& d = x.dims();
    int nd = static_cast<int>(d.size());
    if (axis < 0 || axis >= nd || from < 0 || to > d[axis] || from >= to)
        throw ShapeError("slice_axis: bad range on " + shape_str(d));
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= d[i];
    for (int i = axis + 1; i < nd; ++i) inner *= d[i];
    std::vector<int> odims = d;
    odims[axis] = to - from;
    Tensor<T> out(odims);
    std::int64_t istride = static_cast<std::int64_t>(d[axis]) * inner;
    std::int64_t ostride = static_cast<std::int64_t>(to - from) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(x.val().data.data() + o * istride + from * inner, ostride,
                    out.data.data() + o * ostride);
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid, outer, istride, ostride, from, inner](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t i = 0; i < ostride; ++i)
                gx[static_cast<std::size_t>(o * istride + from * inner + i)] +=
                    g[static_cast<std::size_t>(o * ostride + i)];
    });
    return Var<T>{&tp, oid};
}

// x[1,...] tiled to [N,...]; gradient sums over the batch
template <typename T>
Var<T> repeat_batch(Var<T> x, int N) {
    Tape<T>& tp = *x.tape;
    require_shape(!x.dims().empty() && x.dims()[0] == 1, "repeat_batch: leading dim must be 1",
                  x.dims(), {});
    std::vector<int> odims = x.dims();
    odims[0] = N;
    std::int64_t per = x.val().size();
    Tensor<T> out(odims);
    for (int n = 0; n < N; ++n)
        std::copy_n(x.val().data.data(), per, out.data.data() + n * per);
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid, N, per](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        for (int n = 0; n < N; ++n)
            for (std::int64_t i = 0; i < per; ++i)
                gx[static_cast<std::size_t>(i)] += g[static_cast<std::size_t>(n * per + i)];
    });
    return Var<T>{&tp, oid};
}

// --------------------------------------------------------------------------
// reductions and broadcasts

template <typename T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& tp = *x.tape;
    T acc = T(0);
    for (T v : x.val().data) acc += v;
    Tensor<T> out({1});
    out.data[0] = acc;
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid](Tape<T>& t) {
        T g = t.grad(oid)[0];
        auto& gx = t.grad(xid);
        for (auto& v : gx) v += g;
    });
    return Var<T>{&tp, oid};
}

template <typename T>
Var<T> mean_all(Var<T> x) {
    return scale(sum_all(x), T(1) / static_cast<T>(x.val().size()));
}

// global average pool [N,C,H,W] -> [N,C]
template <typename T>
Var<T> mean_hw(Var<T> x) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 4, "mean_hw: 4-d expected", x.dims(), {});
    int N = x.dims()[0], C = x.dims()[1], HW = x.dims()[2] * x.dims()[3];
    Tensor<T> out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* p = x.val().data.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            T acc = T(0);
            for (int k = 0; k < HW; ++k) acc += p[k];
            out.at2(n, c) = acc / static_cast<T>(HW);
        }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, oid, N, C, HW](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                T gv = g[static_cast<std::size_t>(n) * C + c] / static_cast<T>(HW);
                T* p = gx.data() + (static_cast<std::size_t>(n) * C + c) * HW;
                for (int k = 0; k < HW; ++k) p[k] += gv;
            }
    });
    return Var<T>{&tp, oid};
}

// x[N,C,H,W] scaled per channel by s[C] (learnable)
template <typename T>
Var<T> scale_channels(Var<T> x, Var<T> s) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 4 && s.dims().size() == 1 && s.dims()[0] == x.dims()[1],
                  "scale_channels", x.dims(), s.dims());
    int N = x.dims()[0], C = x.dims()[1], HW = x.dims()[2] * x.dims()[3];
    Tensor<T> out(x.dims());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            T sv = s.val().data[static_cast<std::size_t>(c)];
            const T* xp = x.val().data.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            T* yp = out.data.data() + (static_cast<std::size_t>(n) * C + c) * HW;
            for (int k = 0; k < HW; ++k) yp[k] = xp[k] * sv;
        }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [xid = x.id, sid = s.id, oid, N, C, HW](Tape<T>& t) {
        const auto& g = t.grad(oid);
        const auto& xv = t.val(xid).data;
        const auto& sv = t.val(sid).data;
        auto& gx = t.grad(xid);
        auto& gs = t.grad(sid);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
                T acc = T(0);
                for (int k = 0; k < HW; ++k) {
                    gx[base + k] += g[base + k] * sv[static_cast<std::size_t>(c)];
                    acc += g[base + k] * xv[base + k];
                }
                gs[static_cast<std::size_t>(c)] += acc;
            }
    });
    return Var<T>{&tp, oid};
}

// x[N,C,D] with each (n,c) row scaled by the constant m[n*C+c] (0/1 masks, blends)
template <typename T>
Var<T> scale_rows_const(Var<T> x, std::vector<T> m) {
    Tape<T>& tp = *x.tape;
    require_shape(x.dims().size() == 3, "scale_rows_const: 3-d expected", x.dims(), {});
    int NC = x.dims()[0] * x.dims()[1], D = x.dims()[2];
    if (static_cast<int>(m.size()) != NC) throw ShapeError("scale_rows_const: mask length");
    Tensor<T> out(x.dims());
    for (int r = 0; r < NC; ++r)
        for (int d = 0; d < D; ++d)
            out.data[static_cast<std::size_t>(r) * D + d] =
                x.val().data[static_cast<std::size_t>(r) * D + d] * m[static_cast<std::size_t>(r)];
    int oid = tp.push(std::move(out));
    auto mp = std::make_shared<std::vector<T>>(std::move(m));
    tp.set_backward(oid, [xid = x.id, oid, NC, D, mp](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& gx = t.grad(xid);
        for (int r = 0; r < NC; ++r)
            for (int d = 0; d < D; ++d)
                gx[static_cast<std::size_t>(r) * D + d] +=
                    g[static_cast<std::size_t>(r) * D + d] * (*mp)[static_cast<std::size_t>(r)];
    });
    return Var<T>{&tp, oid};
}

// --------------------------------------------------------------------------
// mask-driven ops

// per-sample label maps at the feature resolution; labels[n] has H*W entries
using LabelMaps = std::shared_ptr<const std::vector<std::vector<int>>>;

// region-wise average pooling: F[N,Cf,H,W] -> [N,C,Cf]; empty regions give
// zero rows. Backward spreads each region gradient uniformly over its pixels.
template <typename T>
Var<T> region_avg_pool(Var<T> f, LabelMaps labels, int num_classes) {
    Tape<T>& tp = *f.tape;
    require_shape(f.dims().size() == 4, "region_avg_pool: 4-d expected", f.dims(), {});
    int N = f.dims()[0], Cf = f.dims()[1], H = f.dims()[2], W = f.dims()[3];
    int HW = H * W;
    if (static_cast<int>(labels->size()) != N ||
        (N > 0 && static_cast<int>((*labels)[0].size()) != HW))
        throw ShapeError("region_avg_pool: label map size mismatch");
    auto counts = std::make_shared<std::vector<int>>(static_cast<std::size_t>(N) * num_classes, 0);
    Tensor<T> out({N, num_classes, Cf});
    for (int n = 0; n < N; ++n) {
        const auto& lab = (*labels)[static_cast<std::size_t>(n)];
        int* cnt = counts->data() + static_cast<std::size_t>(n) * num_classes;
        for (int k = 0; k < HW; ++k) ++cnt[lab[static_cast<std::size_t>(k)]];
        for (int c = 0; c < Cf; ++c) {
            const T* fp = f.val().data.data() + (static_cast<std::size_t>(n) * Cf + c) * HW;
            T* op = out.data.data() + static_cast<std::size_t>(n) * num_classes * Cf;
            for (int k = 0; k < HW; ++k)
                op[static_cast<std::size_t>(lab[static_cast<std::size_t>(k)]) * Cf + c] += fp[k];
        }
        for (int cl = 0; cl < num_classes; ++cl)
            if (cnt[cl] > 0) {
                T inv = T(1) / static_cast<T>(cnt[cl]);
                for (int c = 0; c < Cf; ++c)
                    out.data[(static_cast<std::size_t>(n) * num_classes + cl) * Cf + c] *= inv;
            }
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [fid = f.id, oid, N, Cf, HW, num_classes, labels, counts](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& gf = t.grad(fid);
        for (int n = 0; n < N; ++n) {
            const auto& lab = (*labels)[static_cast<std::size_t>(n)];
            const int* cnt = counts->data() + static_cast<std::size_t>(n) * num_classes;
            for (int c = 0; c < Cf; ++c) {
                T* gp = gf.data() + (static_cast<std::size_t>(n) * Cf + c) * HW;
                const T* gr = g.data() + static_cast<std::size_t>(n) * num_classes * Cf;
                for (int k = 0; k < HW; ++k) {
                    int cl = lab[static_cast<std::size_t>(k)];
                    gp[k] += gr[static_cast<std::size_t>(cl) * Cf + c] / static_cast<T>(cnt[cl]);
                }
            }
        }
    });
    return Var<T>{&tp, oid};
}

// style map: S[N,C,D] broadcast over label maps -> [N,D,H,W]
template <typename T>
Var<T> broadcast_style(Var<T> s, LabelMaps labels, int H, int W) {
    Tape<T>& tp = *s.tape;
    require_shape(s.dims().size() == 3, "broadcast_style: 3-d expected", s.dims(), {});
    int N = s.dims()[0], C = s.dims()[1], D = s.dims()[2];
    int HW = H * W;
    if (static_cast<int>(labels->size()) != N ||
        (N > 0 && static_cast<int>((*labels)[0].size()) != HW))
        throw ShapeError("broadcast_style: label map size mismatch");
    Tensor<T> out({N, D, H, W});
    for (int n = 0; n < N; ++n) {
        const auto& lab = (*labels)[static_cast<std::size_t>(n)];
        const T* sp = s.val().data.data() + static_cast<std::size_t>(n) * C * D;
        for (int d = 0; d < D; ++d) {
            T* op = out.data.data() + (static_cast<std::size_t>(n) * D + d) * HW;
            for (int k = 0; k < HW; ++k)
                op[k] = sp[static_cast<std::size_t>(lab[static_cast<std::size_t>(k)]) * D + d];
        }
    }
    int oid = tp.push(std::move(out));
    tp.set_backward(oid, [sid = s.id, oid, N, C, D, HW, labels](Tape<T>& t) {
        const auto& g = t.grad(oid);
        auto& gs = t.grad(sid);
        for (int n = 0; n < N; ++n) {
            const auto& lab = (*labels)[static_cast<std::size_t>(n)];
            for (int d = 0; d < D; ++d) {
                const T* gp = g.data() + (static_cast<std::size_t>(n) * D + d) * HW;
                T* gsp = gs.data() + static_cast<std::size_t>(n) * C * D;
                for (int k = 0; k < HW; ++k)
                    gsp[static_cast<std::size_t>(lab[static_cast<std::size_t>(k)]) * D + d] +=
                        gp[k];
            }
        }
    });
    return Var<T>{&tp, oid};
}

}  // namespace rstm
