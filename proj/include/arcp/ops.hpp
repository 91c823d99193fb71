#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "arcp/graph.hpp"
#include "arcp/rng.hpp"
#include "arcp/tensor.hpp"

namespace arcp {

enum class Mode { Train, Infer };

// Per-channel running statistics for batch normalisation. Lives outside the
// graph; updated as a side effect of a Train-mode forward.
struct BatchNormState {
    Tensor running_mean;
    Tensor running_var;
    double momentum = 0.9;
    double eps = 1e-5;

    explicit BatchNormState(int channels = 0, double momentum_ = 0.9, double eps_ = 1e-5)
        : momentum(momentum_), eps(eps_) {
        if (channels > 0) {
            running_mean = Tensor::zeros({channels});
            running_var = Tensor::full({channels}, 1.0);
        }
    }
};

namespace ops {

namespace detail {

inline void check_same_graph(const Var& a, const Var& b, const char* op) {
    if (a.g != b.g) throw std::invalid_argument(std::string(op) + ": operands from different graphs");
}

// rows = size of axis 0, cols = product of the remaining axes
inline std::int64_t inner_size(const Tensor& t) { return t.size() / t.dim(0); }

}  // namespace detail

// ----- elementwise binary -----------------------------------------------

inline Var add(Var a, Var b) {
    detail::check_same_graph(a, b, "add");
    check_same_shape(a.value(), b.value(), "add");
    Graph& g = *a.g;
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] += bv[i];
    int pa = a.id, pb = b.id;
    return g.op(std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        if (gr.needs_grad(pa)) {
            Tensor& da = gr.grad_buf(pa);
            for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (std::int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    detail::check_same_graph(a, b, "sub");
    check_same_shape(a.value(), b.value(), "sub");
    Graph& g = *a.g;
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    int pa = a.id, pb = b.id;
    return g.op(std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        if (gr.needs_grad(pa)) {
            Tensor& da = gr.grad_buf(pa);
            for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i];
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (std::int64_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    detail::check_same_graph(a, b, "mul");
    check_same_shape(a.value(), b.value(), "mul");
    Graph& g = *a.g;
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    int pa = a.id, pb = b.id;
    return g.op(std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& av = gr.value(pa);
        const Tensor& bv2 = gr.value(pb);
        if (gr.needs_grad(pa)) {
            Tensor& da = gr.grad_buf(pa);
            for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * bv2[i];
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (std::int64_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * av[i];
        }
    });
}

inline Var div(Var a, Var b) {
    detail::check_same_graph(a, b, "div");
    check_same_shape(a.value(), b.value(), "div");
    Graph& g = *a.g;
    Tensor y = a.value();
    const Tensor& bv = b.value();
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] /= bv[i];
    int pa = a.id, pb = b.id;
    return g.op(std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& yv = gr.value(self);
        const Tensor& bv2 = gr.value(pb);
        if (gr.needs_grad(pa)) {
            Tensor& da = gr.grad_buf(pa);
            for (std::int64_t i = 0; i < dy.size(); ++i) da[i] += dy[i] / bv2[i];
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (std::int64_t i = 0; i < dy.size(); ++i) db[i] -= dy[i] * yv[i] / bv2[i];
        }
    });
}

// sqrt(a^2 + b^2) elementwise; gradient defined as 0 where the norm is 0.
inline Var hypot2(Var a, Var b) {
    detail::check_same_graph(a, b, "hypot2");
    check_same_shape(a.value(), b.value(), "hypot2");
    Graph& g = *a.g;
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor y(av.shape());
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = std::sqrt(av[i] * av[i] + bv[i] * bv[i]);
    int pa = a.id, pb = b.id;
    return g.op(std::move(y), {pa, pb}, [pa, pb](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& yv = gr.value(self);
        const Tensor& av2 = gr.value(pa);
        const Tensor& bv2 = gr.value(pb);
        if (gr.needs_grad(pa)) {
            Tensor& da = gr.grad_buf(pa);
            for (std::int64_t i = 0; i < dy.size(); ++i)
                if (yv[i] != 0.0) da[i] += dy[i] * av2[i] / yv[i];
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (std::int64_t i = 0; i < dy.size(); ++i)
                if (yv[i] != 0.0) db[i] += dy[i] * bv2[i] / yv[i];
        }
    });
}

// ----- scalar-parameterised ----------------------------------------------

inline Var add_scalar(Var x, double c) {
    Graph& g = *x.g;
    Tensor y = x.value();
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] += c;
    int px = x.id;
    return g.op(std::move(y), {px}, [px](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
}

inline Var mul_scalar(Var x, double c) {
    Graph& g = *x.g;
    Tensor y = x.value();
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] *= c;
    int px = x.id;
    return g.op(std::move(y), {px}, [px, c](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += c * dy[i];
    });
}

inline Var neg(Var x) { return mul_scalar(x, -1.0); }

// ----- elementwise unary --------------------------------------------------

namespace detail {

template <typename Fwd, typename Bwd>
Var unary(Var x, Fwd fwd, Bwd bwd_factor) {
    // bwd_factor(x_i, y_i) -> dy_i/dx_i
    Graph& g = *x.g;
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = fwd(xv[i]);
    int px = x.id;
    return g.op(std::move(y), {px}, [px, bwd_factor](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& yv = gr.value(self);
        Tensor& dx = gr.grad_buf(px);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * bwd_factor(xv2[i], yv[i]);
    });
}

}  // namespace detail

inline Var tanh(Var x) {
    return detail::unary(x, [](double v) { return std::tanh(v); },
                         [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var x) {
    return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var elu(Var x) {
    return detail::unary(x, [](double v) { return v > 0.0 ? v : std::expm1(v); },
                         [](double v, double y) { return v > 0.0 ? 1.0 : y + 1.0; });
}

inline Var sigmoid(Var x) {
    return detail::unary(x,
                         [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                                        : std::exp(v) / (1.0 + std::exp(v)); },
                         [](double, double y) { return y * (1.0 - y); });
}

inline Var exp(Var x) {
    return detail::unary(x, [](double v) { return std::exp(v); },
                         [](double, double y) { return y; });
}

inline Var log(Var x) {
    return detail::unary(x, [](double v) { return std::log(v); },
                         [](double v, double) { return 1.0 / v; });
}

inline Var sqrt(Var x) {
    return detail::unary(x, [](double v) { return std::sqrt(v); },
                         [](double, double y) { return 0.5 / y; });
}

inline Var square(Var x) {
    return detail::unary(x, [](double v) { return v * v; },
                         [](double v, double) { return 2.0 * v; });
}

// ----- dense / convolution -------------------------------------------------

// y = W x + b. x may be [Cin] or [Cin x T]; the map is applied per column
// (time-distributed when columns are timesteps).
inline Var dense(Var x, Var w, Var b) {
    detail::check_same_graph(x, w, "dense");
    detail::check_same_graph(x, b, "dense");
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (wv.ndim() != 2) throw std::invalid_argument("dense: weight must be 2-d");
    if (xv.ndim() != 1 && xv.ndim() != 2) throw std::invalid_argument("dense: input must be 1-d or 2-d");
    const int cin = xv.dim(0);
    const int t = xv.ndim() == 2 ? xv.dim(1) : 1;
    const int cout = wv.dim(0);
    if (wv.dim(1) != cin)
        throw std::invalid_argument("dense: weight expects " + std::to_string(wv.dim(1)) +
                                    " input channels, got " + std::to_string(cin));
    if (bv.ndim() != 1 || bv.dim(0) != cout) throw std::invalid_argument("dense: bias shape mismatch");

    Tensor y(xv.ndim() == 2 ? Shape{cout, t} : Shape{cout});
    for (int o = 0; o < cout; ++o) {
        const double* wrow = wv.data() + static_cast<std::int64_t>(o) * cin;
        for (int j = 0; j < t; ++j) {
            double acc = bv[o];
            for (int i = 0; i < cin; ++i) acc += wrow[i] * xv[static_cast<std::int64_t>(i) * t + j];
            y[static_cast<std::int64_t>(o) * t + j] = acc;
        }
    }
    Graph& g = *x.g;
    int px = x.id, pw = w.id, pb = b.id;
    return g.op(std::move(y), {px, pw, pb}, [px, pw, pb, cin, cout, t](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& wv2 = gr.value(pw);
        if (gr.needs_grad(px)) {
            Tensor& dx = gr.grad_buf(px);
            for (int i = 0; i < cin; ++i)
                for (int j = 0; j < t; ++j) {
                    double acc = 0.0;
                    for (int o = 0; o < cout; ++o)
                        acc += wv2[static_cast<std::int64_t>(o) * cin + i] * dy[static_cast<std::int64_t>(o) * t + j];
                    dx[static_cast<std::int64_t>(i) * t + j] += acc;
                }
        }
        if (gr.needs_grad(pw)) {
            Tensor& dw = gr.grad_buf(pw);
            for (int o = 0; o < cout; ++o)
                for (int i = 0; i < cin; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < t; ++j)
                        acc += dy[static_cast<std::int64_t>(o) * t + j] * xv2[static_cast<std::int64_t>(i) * t + j];
                    dw[static_cast<std::int64_t>(o) * cin + i] += acc;
                }
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (int o = 0; o < cout; ++o) {
                double acc = 0.0;
                for (int j = 0; j < t; ++j) acc += dy[static_cast<std::int64_t>(o) * t + j];
                db[o] += acc;
            }
        }
    });
}

// Dilated causal 1-d convolution. x is [Cin x T], kernel [Cout x Cin x K].
// Implicit left zero-padding of (K-1)*dilation keeps the output length T and
// makes y[:, t] depend on x[:, t'] only for t' <= t.
inline Var causal_conv1d(Var x, Var k, int dilation) {
    detail::check_same_graph(x, k, "causal_conv1d");
    const Tensor& xv = x.value();
    const Tensor& kv = k.value();
    if (xv.ndim() != 2) throw std::invalid_argument("causal_conv1d: input must be [Cin x T]");
    if (kv.ndim() != 3) throw std::invalid_argument("causal_conv1d: kernel must be [Cout x Cin x K]");
    if (dilation < 1) throw std::invalid_argument("causal_conv1d: dilation must be >= 1");
    const int cin = xv.dim(0), tlen = xv.dim(1);
    const int cout = kv.dim(0), klen = kv.dim(2);
    if (kv.dim(1) != cin)
        throw std::invalid_argument("causal_conv1d: kernel expects " + std::to_string(kv.dim(1)) +
                                    " input channels, got " + std::to_string(cin));

    Tensor y({cout, tlen});
    for (int o = 0; o < cout; ++o) {
        for (int i = 0; i < cin; ++i) {
            const double* kr = kv.data() + (static_cast<std::int64_t>(o) * cin + i) * klen;
            const double* xr = xv.data() + static_cast<std::int64_t>(i) * tlen;
            double* yr = y.data() + static_cast<std::int64_t>(o) * tlen;
            for (int j = 0; j < klen; ++j) {
                const double kj = kr[j];
                if (kj == 0.0) continue;
                const int shift = j * dilation;
                for (int t = shift; t < tlen; ++t) yr[t] += kj * xr[t - shift];
            }
        }
    }
    Graph& g = *x.g;
    int px = x.id, pk = k.id;
    return g.op(std::move(y), {px, pk}, [px, pk, cin, cout, klen, tlen, dilation](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& kv2 = gr.value(pk);
        if (gr.needs_grad(px)) {
            Tensor& dx = gr.grad_buf(px);
            for (int o = 0; o < cout; ++o)
                for (int i = 0; i < cin; ++i) {
                    const double* kr = kv2.data() + (static_cast<std::int64_t>(o) * cin + i) * klen;
                    const double* dyr = dy.data() + static_cast<std::int64_t>(o) * tlen;
                    double* dxr = dx.data() + static_cast<std::int64_t>(i) * tlen;
                    for (int j = 0; j < klen; ++j) {
                        const double kj = kr[j];
                        if (kj == 0.0) continue;
                        const int shift = j * dilation;
                        for (int t = shift; t < tlen; ++t) dxr[t - shift] += kj * dyr[t];
                    }
                }
        }
        if (gr.needs_grad(pk)) {
            Tensor& dk = gr.grad_buf(pk);
            for (int o = 0; o < cout; ++o)
                for (int i = 0; i < cin; ++i) {
                    const double* dyr = dy.data() + static_cast<std::int64_t>(o) * tlen;
                    const double* xr = xv2.data() + static_cast<std::int64_t>(i) * tlen;
                    double* dkr = dk.data() + (static_cast<std::int64_t>(o) * cin + i) * klen;
                    for (int j = 0; j < klen; ++j) {
                        const int shift = j * dilation;
                        double acc = 0.0;
                        for (int t = shift; t < tlen; ++t) acc += dyr[t] * xr[t - shift];
                        dkr[j] += acc;
                    }
                }
        }
    });
}

// 2-d convolution, x [Cin x H x W], kernel [Cout x Cin x Kh x Kw], bias [Cout].
inline Var conv2d(Var x, Var k, Var b, int stride, int pad) {
    detail::check_same_graph(x, k, "conv2d");
    detail::check_same_graph(x, b, "conv2d");
    const Tensor& xv = x.value();
    const Tensor& kv = k.value();
    const Tensor& bv = b.value();
    if (xv.ndim() != 3) throw std::invalid_argument("conv2d: input must be [Cin x H x W]");
    if (kv.ndim() != 4) throw std::invalid_argument("conv2d: kernel must be [Cout x Cin x Kh x Kw]");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    if (pad < 0) throw std::invalid_argument("conv2d: pad must be >= 0");
    const int cin = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    const int cout = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
    if (kv.dim(1) != cin)
        throw std::invalid_argument("conv2d: kernel expects " + std::to_string(kv.dim(1)) +
                                    " input channels, got " + std::to_string(cin));
    if (bv.ndim() != 1 || bv.dim(0) != cout) throw std::invalid_argument("conv2d: bias shape mismatch");
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (w + 2 * pad - kw) / stride + 1;
    if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: kernel larger than padded input");

    // tap-major loops with hoisted bounds keep the inner loop contiguous
    Tensor y({cout, ho, wo});
    for (int o = 0; o < cout; ++o) {
        double* ybase = y.data() + static_cast<std::int64_t>(o) * ho * wo;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo; ++i) ybase[i] = bv[o];
        for (int i = 0; i < cin; ++i)
            for (int r = 0; r < kh; ++r)
                for (int c = 0; c < kw; ++c) {
                    const double kval = kv.at(o, i, r, c);
                    if (kval == 0.0) continue;
                    // valid output column range for this tap
                    int ow_lo = 0, ow_hi = wo - 1;
                    while (ow_lo <= ow_hi && ow_lo * stride + c - pad < 0) ++ow_lo;
                    while (ow_hi >= ow_lo && ow_hi * stride + c - pad >= w) --ow_hi;
                    for (int oh = 0; oh < ho; ++oh) {
                        const int ih = oh * stride + r - pad;
                        if (ih < 0 || ih >= h) continue;
                        const double* xrow = xv.data() + (static_cast<std::int64_t>(i) * h + ih) * w;
                        double* yrow = ybase + static_cast<std::int64_t>(oh) * wo;
                        for (int ow = ow_lo; ow <= ow_hi; ++ow)
                            yrow[ow] += kval * xrow[ow * stride + c - pad];
                    }
                }
    }
    Graph& g = *x.g;
    int px = x.id, pk = k.id, pb = b.id;
    return g.op(std::move(y), {px, pk, pb},
                [px, pk, pb, cin, cout, h, w, kh, kw, ho, wo, stride, pad](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& kv2 = gr.value(pk);
        const bool wx = gr.needs_grad(px);
        const bool wk = gr.needs_grad(pk);
        if (wx || wk) {
            Tensor* dx = wx ? &gr.grad_buf(px) : nullptr;
            Tensor* dk = wk ? &gr.grad_buf(pk) : nullptr;
            for (int o = 0; o < cout; ++o) {
                const double* dybase = dy.data() + static_cast<std::int64_t>(o) * ho * wo;
                for (int i = 0; i < cin; ++i)
                    for (int r = 0; r < kh; ++r)
                        for (int c = 0; c < kw; ++c) {
                            const double kval = kv2.at(o, i, r, c);
                            int ow_lo = 0, ow_hi = wo - 1;
                            while (ow_lo <= ow_hi && ow_lo * stride + c - pad < 0) ++ow_lo;
                            while (ow_hi >= ow_lo && ow_hi * stride + c - pad >= w) --ow_hi;
                            double kacc = 0.0;
                            for (int oh = 0; oh < ho; ++oh) {
                                const int ih = oh * stride + r - pad;
                                if (ih < 0 || ih >= h) continue;
                                const double* dyrow = dybase + static_cast<std::int64_t>(oh) * wo;
                                const std::int64_t xoff = (static_cast<std::int64_t>(i) * h + ih) * w;
                                const double* xrow = xv2.data() + xoff;
                                if (wx && kval != 0.0) {
                                    double* dxrow = dx->data() + xoff;
                                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                        dxrow[ow * stride + c - pad] += kval * dyrow[ow];
                                }
                                if (wk) {
                                    for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                        kacc += dyrow[ow] * xrow[ow * stride + c - pad];
                                }
                            }
                            if (wk) dk->at(o, i, r, c) += kacc;
                        }
            }
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (int o = 0; o < cout; ++o) {
                const double* dybase = dy.data() + static_cast<std::int64_t>(o) * ho * wo;
                double acc = 0.0;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(ho) * wo; ++i) acc += dybase[i];
                db[o] += acc;
            }
        }
    });
}

// ----- row/channel helpers -------------------------------------------------

// y[c, ...] = x[c, ...] + b[c]
inline Var add_rowwise(Var x, Var b) {
    detail::check_same_graph(x, b, "add_rowwise");
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (bv.ndim() != 1 || bv.dim(0) != xv.dim(0))
        throw std::invalid_argument("add_rowwise: bias must be 1-d with one entry per leading channel");
    const int ch = xv.dim(0);
    const std::int64_t inner = detail::inner_size(xv);
    Tensor y = xv;
    for (int c = 0; c < ch; ++c) {
        double* row = y.data() + c * inner;
        for (std::int64_t i = 0; i < inner; ++i) row[i] += bv[c];
    }
    Graph& g = *x.g;
    int px = x.id, pb = b.id;
    return g.op(std::move(y), {px, pb}, [px, pb, ch, inner](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        if (gr.needs_grad(px)) {
            Tensor& dx = gr.grad_buf(px);
            for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (int c = 0; c < ch; ++c) {
                const double* row = dy.data() + c * inner;
                double acc = 0.0;
                for (std::int64_t i = 0; i < inner; ++i) acc += row[i];
                db[c] += acc;
            }
        }
    });
}

// y[c, ...] = x[c, ...] * gate[c]
inline Var scale_channels(Var x, Var gate) {
    detail::check_same_graph(x, gate, "scale_channels");
    const Tensor& xv = x.value();
    const Tensor& gv = gate.value();
    if (gv.size() != xv.dim(0))
        throw std::invalid_argument("scale_channels: gate must have one entry per leading channel");
    const int ch = xv.dim(0);
    const std::int64_t inner = detail::inner_size(xv);
    Tensor y = xv;
    for (int c = 0; c < ch; ++c) {
        double* row = y.data() + c * inner;
        for (std::int64_t i = 0; i < inner; ++i) row[i] *= gv[c];
    }
    Graph& g = *x.g;
    int px = x.id, pg = gate.id;
    return g.op(std::move(y), {px, pg}, [px, pg, ch, inner](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& gv2 = gr.value(pg);
        if (gr.needs_grad(px)) {
            Tensor& dx = gr.grad_buf(px);
            for (int c = 0; c < ch; ++c) {
                const double* row = dy.data() + c * inner;
                double* drow = dx.data() + c * inner;
                for (std::int64_t i = 0; i < inner; ++i) drow[i] += row[i] * gv2[c];
            }
        }
        if (gr.needs_grad(pg)) {
            Tensor& dg = gr.grad_buf(pg);
            for (int c = 0; c < ch; ++c) {
                const double* row = dy.data() + c * inner;
                const double* xrow = xv2.data() + c * inner;
                double acc = 0.0;
                for (std::int64_t i = 0; i < inner; ++i) acc += row[i] * xrow[i];
                dg[c] += acc;
            }
        }
    });
}

// ----- reductions / pooling -------------------------------------------------

inline Var global_avg_pool(Var x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 3) throw std::invalid_argument("global_avg_pool: input must be [C x H x W]");
    const int ch = xv.dim(0);
    const std::int64_t inner = detail::inner_size(xv);
    Tensor y({ch});
    for (int c = 0; c < ch; ++c) {
        const double* row = xv.data() + c * inner;
        double acc = 0.0;
        for (std::int64_t i = 0; i < inner; ++i) acc += row[i];
        y[c] = acc / static_cast<double>(inner);
    }
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px, ch, inner](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        const double scale = 1.0 / static_cast<double>(inner);
        for (int c = 0; c < ch; ++c) {
            double* drow = dx.data() + c * inner;
            const double gc = dy[c] * scale;
            for (std::int64_t i = 0; i < inner; ++i) drow[i] += gc;
        }
    });
}

inline Var sum(Var x) {
    const Tensor& xv = x.value();
    Tensor y = Tensor::scalar(xv.sum());
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const double gy = gr.grad(self)[0];
        Tensor& dx = gr.grad_buf(px);
        for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += gy;
    });
}

inline Var mean(Var x) {
    const Tensor& xv = x.value();
    const double n = static_cast<double>(xv.size());
    Tensor y = Tensor::scalar(xv.sum() / n);
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px, n](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const double gy = gr.grad(self)[0] / n;
        Tensor& dx = gr.grad_buf(px);
        for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += gy;
    });
}

// ----- shape ops -------------------------------------------------------------

inline Var reshape(Var x, Shape shape) {
    const Tensor& xv = x.value();
    if (shape_numel(shape) != xv.size())
        throw std::invalid_argument("reshape: cannot reshape " + shape_to_string(xv.shape()) +
                                    " to " + shape_to_string(shape));
    Tensor y(std::move(shape), std::vector<double>(xv.data(), xv.data() + xv.size()));
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
    });
}

inline Var transpose2d(Var x) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 2) throw std::invalid_argument("transpose2d: input must be 2-d");
    const int r = xv.dim(0), c = xv.dim(1);
    Tensor y({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) y.at(j, i) = xv.at(i, j);
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px, r, c](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) dx.at(i, j) += dy.at(j, i);
    });
}

// Concatenate along axis 0; remaining axes must match.
inline Var concat_rows(Var a, Var b) {
    detail::check_same_graph(a, b, "concat_rows");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.ndim() != bv.ndim())
        throw std::invalid_argument("concat_rows: rank mismatch");
    for (int i = 1; i < av.ndim(); ++i)
        if (av.dim(i) != bv.dim(i))
            throw std::invalid_argument("concat_rows: trailing dims differ: " +
                                        shape_to_string(av.shape()) + " vs " + shape_to_string(bv.shape()));
    Shape s = av.shape();
    s[0] += bv.dim(0);
    Tensor y(s);
    std::copy(av.data(), av.data() + av.size(), y.data());
    std::copy(bv.data(), bv.data() + bv.size(), y.data() + av.size());
    Graph& g = *a.g;
    int pa = a.id, pb = b.id;
    const std::int64_t asize = av.size();
    return g.op(std::move(y), {pa, pb}, [pa, pb, asize](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        if (gr.needs_grad(pa)) {
            Tensor& da = gr.grad_buf(pa);
            for (std::int64_t i = 0; i < asize; ++i) da[i] += dy[i];
        }
        if (gr.needs_grad(pb)) {
            Tensor& db = gr.grad_buf(pb);
            for (std::int64_t i = 0; i < db.size(); ++i) db[i] += dy[asize + i];
        }
    });
}

// Rows [r0, r1) along axis 0.
inline Var slice_rows(Var x, int r0, int r1) {
    const Tensor& xv = x.value();
    if (r0 < 0 || r1 > xv.dim(0) || r0 >= r1)
        throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(r0) + ", " +
                                    std::to_string(r1) + ") for " + shape_to_string(xv.shape()));
    const std::int64_t inner = detail::inner_size(xv);
    Shape s = xv.shape();
    s[0] = r1 - r0;
    Tensor y(s);
    std::copy(xv.data() + r0 * inner, xv.data() + r1 * inner, y.data());
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px, r0, inner](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        double* base = dx.data() + r0 * inner;
        for (std::int64_t i = 0; i < dy.size(); ++i) base[i] += dy[i];
    });
}

// Columns [c0, c1) of a 2-d tensor.
inline Var crop_cols(Var x, int c0, int c1) {
    const Tensor& xv = x.value();
    if (xv.ndim() != 2) throw std::invalid_argument("crop_cols: input must be 2-d");
    if (c0 < 0 || c1 > xv.dim(1) || c0 >= c1)
        throw std::invalid_argument("crop_cols: invalid range");
    const int rows = xv.dim(0), cols = xv.dim(1), out = c1 - c0;
    Tensor y({rows, out});
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < out; ++c) y.at(r, c) = xv.at(r, c0 + c);
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px, rows, cols, c0, out](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < out; ++c) dx[static_cast<std::int64_t>(r) * cols + c0 + c] += dy.at(r, c);
    });
}

// ----- normalisation / regularisation ---------------------------------------

// Batch normalisation over all axes except the leading channel axis. In
// Train mode the batch statistics of this call are used and the running
// statistics in `state` are updated; in Infer mode the frozen running
// statistics make this a deterministic affine map.
inline Var batchnorm(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
    detail::check_same_graph(x, gamma, "batchnorm");
    detail::check_same_graph(x, beta, "batchnorm");
    const Tensor& xv = x.value();
    const int ch = xv.dim(0);
    const std::int64_t inner = detail::inner_size(xv);
    if (gamma.value().size() != ch || beta.value().size() != ch)
        throw std::invalid_argument("batchnorm: gamma/beta must have one entry per channel");
    if (state.running_mean.size() != ch)
        throw std::invalid_argument("batchnorm: state initialised for " +
                                    std::to_string(state.running_mean.size()) + " channels, input has " +
                                    std::to_string(ch));
    const double eps = state.eps;
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();

    Tensor mean_c({ch}), var_c({ch});
    if (mode == Mode::Train) {
        for (int c = 0; c < ch; ++c) {
            const double* row = xv.data() + c * inner;
            double m = 0.0;
            for (std::int64_t i = 0; i < inner; ++i) m += row[i];
            m /= static_cast<double>(inner);
            double v = 0.0;
            for (std::int64_t i = 0; i < inner; ++i) v += (row[i] - m) * (row[i] - m);
            v /= static_cast<double>(inner);
            mean_c[c] = m;
            var_c[c] = v;
            state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * m;
            state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * v;
        }
    } else {
        mean_c = state.running_mean;
        var_c = state.running_var;
    }

    Tensor y(xv.shape());
    for (int c = 0; c < ch; ++c) {
        const double inv = 1.0 / std::sqrt(var_c[c] + eps);
        const double* row = xv.data() + c * inner;
        double* yr = y.data() + c * inner;
        for (std::int64_t i = 0; i < inner; ++i) yr[i] = gv[c] * (row[i] - mean_c[c]) * inv + bv[c];
    }

    Graph& g = *x.g;
    int px = x.id, pg = gamma.id, pb = beta.id;
    const bool train = mode == Mode::Train;
    // capture the statistics actually used in this forward
    return g.op(std::move(y), {px, pg, pb},
                [px, pg, pb, ch, inner, eps, train, mean_c, var_c](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& gv2 = gr.value(pg);
        for (int c = 0; c < ch; ++c) {
            const double inv = 1.0 / std::sqrt(var_c[c] + eps);
            const double* xr = xv2.data() + c * inner;
            const double* dyr = dy.data() + c * inner;
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (std::int64_t i = 0; i < inner; ++i) {
                sum_dy += dyr[i];
                sum_dy_xhat += dyr[i] * (xr[i] - mean_c[c]) * inv;
            }
            if (gr.needs_grad(pg)) gr.grad_buf(pg)[c] += sum_dy_xhat;
            if (gr.needs_grad(pb)) gr.grad_buf(pb)[c] += sum_dy;
            if (gr.needs_grad(px)) {
                double* dxr = gr.grad_buf(px).data() + c * inner;
                if (train) {
                    const double n = static_cast<double>(inner);
                    for (std::int64_t i = 0; i < inner; ++i) {
                        const double xhat = (xr[i] - mean_c[c]) * inv;
                        dxr[i] += gv2[c] * inv * (dyr[i] - sum_dy / n - xhat * sum_dy_xhat / n);
                    }
                } else {
                    for (std::int64_t i = 0; i < inner; ++i) dxr[i] += gv2[c] * inv * dyr[i];
                }
            }
        }
    });
}

// Stack same-shaped tensors along a new leading batch axis.
inline Var stack_batch(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("stack_batch: empty batch");
    const Tensor& first = xs[0].value();
    for (const Var& v : xs) {
        detail::check_same_graph(xs[0], v, "stack_batch");
        check_same_shape(first, v.value(), "stack_batch");
    }
    Shape s = first.shape();
    s.insert(s.begin(), static_cast<int>(xs.size()));
    Tensor y(s);
    const std::int64_t stride = first.size();
    std::vector<int> parents;
    for (std::size_t b = 0; b < xs.size(); ++b) {
        std::copy(xs[b].value().data(), xs[b].value().data() + stride,
                  y.data() + static_cast<std::int64_t>(b) * stride);
        parents.push_back(xs[b].id);
    }
    Graph& g = *xs[0].g;
    return g.op(std::move(y), parents, [parents, stride](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        for (std::size_t b = 0; b < parents.size(); ++b) {
            if (!gr.needs_grad(parents[b])) continue;
            Tensor& dx = gr.grad_buf(parents[b]);
            const double* src = dy.data() + static_cast<std::int64_t>(b) * stride;
            for (std::int64_t i = 0; i < stride; ++i) dx[i] += src[i];
        }
    });
}

// Batch axis-0 slice of a stacked tensor, back to the element shape.
inline Var unstack_batch(Var x, int index) {
    Shape element(x.value().shape().begin() + 1, x.value().shape().end());
    return reshape(slice_rows(x, index, index + 1), std::move(element));
}

// Batch normalisation of a stacked [B x C x ...] tensor: statistics per
// channel over the batch and all trailing axes. Train mode uses this batch's
// statistics and updates `state`; Infer applies the frozen running
// statistics as an affine map.
inline Var batchnorm_batched(Var x, Var gamma, Var beta, BatchNormState& state, Mode mode) {
    detail::check_same_graph(x, gamma, "batchnorm_batched");
    detail::check_same_graph(x, beta, "batchnorm_batched");
    const Tensor& xv = x.value();
    if (xv.ndim() < 2) throw std::invalid_argument("batchnorm_batched: input must be [B x C x ...]");
    const int batch = xv.dim(0);
    const int ch = xv.dim(1);
    const std::int64_t inner = xv.size() / (static_cast<std::int64_t>(batch) * ch);
    const std::int64_t per_channel = static_cast<std::int64_t>(batch) * inner;
    if (gamma.value().size() != ch || beta.value().size() != ch)
        throw std::invalid_argument("batchnorm_batched: gamma/beta must have one entry per channel");
    if (state.running_mean.size() != ch)
        throw std::invalid_argument("batchnorm_batched: state channel count mismatch");
    const double eps = state.eps;
    const Tensor& gv = gamma.value();
    const Tensor& bv = beta.value();

    auto channel_base = [ch, inner](int b, int c) {
        return (static_cast<std::int64_t>(b) * ch + c) * inner;
    };

    Tensor mean_c({ch}), var_c({ch});
    if (mode == Mode::Train) {
        for (int c = 0; c < ch; ++c) {
            double m = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* row = xv.data() + channel_base(b, c);
                for (std::int64_t i = 0; i < inner; ++i) m += row[i];
            }
            m /= static_cast<double>(per_channel);
            double v = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* row = xv.data() + channel_base(b, c);
                for (std::int64_t i = 0; i < inner; ++i) v += (row[i] - m) * (row[i] - m);
            }
            v /= static_cast<double>(per_channel);
            mean_c[c] = m;
            var_c[c] = v;
            state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * m;
            state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * v;
        }
    } else {
        mean_c = state.running_mean;
        var_c = state.running_var;
    }

    Tensor y(xv.shape());
    for (int c = 0; c < ch; ++c) {
        const double inv = 1.0 / std::sqrt(var_c[c] + eps);
        for (int b = 0; b < batch; ++b) {
            const double* row = xv.data() + channel_base(b, c);
            double* yr = y.data() + channel_base(b, c);
            for (std::int64_t i = 0; i < inner; ++i) yr[i] = gv[c] * (row[i] - mean_c[c]) * inv + bv[c];
        }
    }

    Graph& g = *x.g;
    int px = x.id, pg = gamma.id, pb = beta.id;
    const bool train = mode == Mode::Train;
    return g.op(std::move(y), {px, pg, pb},
                [px, pg, pb, batch, ch, inner, eps, train, mean_c, var_c, channel_base](Graph& gr,
                                                                                        int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& xv2 = gr.value(px);
        const Tensor& gv2 = gr.value(pg);
        const double n = static_cast<double>(static_cast<std::int64_t>(batch) * inner);
        for (int c = 0; c < ch; ++c) {
            const double inv = 1.0 / std::sqrt(var_c[c] + eps);
            double sum_dy = 0.0, sum_dy_xhat = 0.0;
            for (int b = 0; b < batch; ++b) {
                const double* xr = xv2.data() + channel_base(b, c);
                const double* dyr = dy.data() + channel_base(b, c);
                for (std::int64_t i = 0; i < inner; ++i) {
                    sum_dy += dyr[i];
                    sum_dy_xhat += dyr[i] * (xr[i] - mean_c[c]) * inv;
                }
            }
            if (gr.needs_grad(pg)) gr.grad_buf(pg)[c] += sum_dy_xhat;
            if (gr.needs_grad(pb)) gr.grad_buf(pb)[c] += sum_dy;
            if (gr.needs_grad(px)) {
                Tensor& dx = gr.grad_buf(px);
                for (int b = 0; b < batch; ++b) {
                    const double* xr = xv2.data() + channel_base(b, c);
                    const double* dyr = dy.data() + channel_base(b, c);
                    double* dxr = dx.data() + channel_base(b, c);
                    if (train) {
                        for (std::int64_t i = 0; i < inner; ++i) {
                            const double xhat = (xr[i] - mean_c[c]) * inv;
                            dxr[i] += gv2[c] * inv * (dyr[i] - sum_dy / n - xhat * sum_dy_xhat / n);
                        }
                    } else {
                        for (std::int64_t i = 0; i < inner; ++i) dxr[i] += gv2[c] * inv * dyr[i];
                    }
                }
            }
        }
    });
}

// Inverted dropout: keeps expected activation constant; identity in Infer
// mode or when p == 0.
inline Var dropout(Var x, double p, Rng& rng, Mode mode) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
    if (mode == Mode::Infer || p == 0.0) return x;
    const Tensor& xv = x.value();
    Tensor mask(xv.shape());
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform() < p ? 0.0 : keep_scale;
    Tensor y(xv.shape());
    for (std::int64_t i = 0; i < y.size(); ++i) y[i] = xv[i] * mask[i];
    Graph& g = *x.g;
    int px = x.id;
    return g.op(std::move(y), {px}, [px, mask](Graph& gr, int self) {
        if (!gr.needs_grad(px)) return;
        const Tensor& dy = gr.grad(self);
        Tensor& dx = gr.grad_buf(px);
        for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * mask[i];
    });
}

// ----- losses ----------------------------------------------------------------

// logits: 1-d [K]; returns scalar -log softmax(logits)[label].
inline Var softmax_cross_entropy(Var logits, int label) {
    const Tensor& lv = logits.value();
    if (lv.ndim() != 1) throw std::invalid_argument("softmax_cross_entropy: logits must be 1-d");
    const int k = lv.dim(0);
    if (label < 0 || label >= k)
        throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(label) +
                                    " out of range for " + std::to_string(k) + " classes");
    double m = lv[0];
    for (int i = 1; i < k; ++i) m = std::max(m, lv[i]);
    double z = 0.0;
    for (int i = 0; i < k; ++i) z += std::exp(lv[i] - m);
    const double lse = m + std::log(z);
    Tensor y = Tensor::scalar(lse - lv[label]);
    Graph& g = *logits.g;
    int pl = logits.id;
    return g.op(std::move(y), {pl}, [pl, label, k, m, z](Graph& gr, int self) {
        if (!gr.needs_grad(pl)) return;
        const double gy = gr.grad(self)[0];
        const Tensor& lv2 = gr.value(pl);
        Tensor& dl = gr.grad_buf(pl);
        for (int i = 0; i < k; ++i) {
            double p = std::exp(lv2[i] - m) / z;
            dl[i] += gy * (p - (i == label ? 1.0 : 0.0));
        }
    });
}

// Elementwise binary cross entropy on logits, numerically stable form.
inline Var bce_with_logits(Var logits, Var targets) {
    detail::check_same_graph(logits, targets, "bce_with_logits");
    check_same_shape(logits.value(), targets.value(), "bce_with_logits");
    const Tensor& lv = logits.value();
    const Tensor& tv = targets.value();
    Tensor y(lv.shape());
    for (std::int64_t i = 0; i < y.size(); ++i) {
        const double l = lv[i];
        y[i] = std::max(l, 0.0) - l * tv[i] + std::log1p(std::exp(-std::abs(l)));
    }
    Graph& g = *logits.g;
    int pl = logits.id, pt = targets.id;
    return g.op(std::move(y), {pl, pt}, [pl, pt](Graph& gr, int self) {
        const Tensor& dy = gr.grad(self);
        const Tensor& lv2 = gr.value(pl);
        const Tensor& tv2 = gr.value(pt);
        if (gr.needs_grad(pl)) {
            Tensor& dl = gr.grad_buf(pl);
            for (std::int64_t i = 0; i < dy.size(); ++i) {
                const double l = lv2[i];
                const double s = l >= 0.0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
                dl[i] += dy[i] * (s - tv2[i]);
            }
        }
        if (gr.needs_grad(pt)) {
            Tensor& dt = gr.grad_buf(pt);
            for (std::int64_t i = 0; i < dy.size(); ++i) dt[i] -= dy[i] * lv2[i];
        }
    });
}

}  // namespace ops

// Non-graph softmax, used when reporting probabilities.
inline std::vector<double> softmax(const std::vector<double>& logits) {
    double m = logits.empty() ? 0.0 : logits[0];
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

}  // namespace arcp
