#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "siamaf/autodiff.hpp"
#include "siamaf/tensor.hpp"

namespace siamaf {

enum class OpKind {
    Conv1d,
    Linear,
    BatchNorm1d,
    Relu,
    MaxPool1d,
    GlobalAvgPool1d,
    Add,
    Flatten,
    CosineSimilarity,
    SoftmaxCrossEntropy,
    ScaleAdd,
    MeanAll,
    StopGradient,
};

inline const char* op_kind_name(OpKind k) {
    switch (k) {
        case OpKind::Conv1d: return "conv1d";
        case OpKind::Linear: return "linear";
        case OpKind::BatchNorm1d: return "batchnorm1d";
        case OpKind::Relu: return "relu";
        case OpKind::MaxPool1d: return "maxpool1d";
        case OpKind::GlobalAvgPool1d: return "global_avgpool1d";
        case OpKind::Add: return "add";
        case OpKind::Flatten: return "flatten";
        case OpKind::CosineSimilarity: return "cosine_similarity";
        case OpKind::SoftmaxCrossEntropy: return "softmax_cross_entropy";
        case OpKind::ScaleAdd: return "scale_add";
        case OpKind::MeanAll: return "mean_all";
        case OpKind::StopGradient: return "stop_gradient";
    }
    return "?";
}

inline OpKind op_kind_from_string(const std::string& s) {
    for (OpKind k : {OpKind::Conv1d, OpKind::Linear, OpKind::BatchNorm1d, OpKind::Relu, OpKind::MaxPool1d,
                     OpKind::GlobalAvgPool1d, OpKind::Add, OpKind::Flatten, OpKind::CosineSimilarity,
                     OpKind::SoftmaxCrossEntropy, OpKind::ScaleAdd, OpKind::MeanAll, OpKind::StopGradient})
        if (s == op_kind_name(k)) return k;
    throw std::invalid_argument("unknown op kind: " + s);
}

namespace ops {

template <typename T>
bool requires_grad_any(std::initializer_list<NodeRef<T>> refs) {
    for (const NodeRef<T>& r : refs)
        if (r.valid() && r.tape->node(r.id).requires_grad) return true;
    return false;
}

// ---------------------------------------------------------------------------
// conv1d: x [B,Ci,L] * w [Co,Ci,K] (+ bias [Co]) -> [B,Co,Lout]
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> conv1d(NodeRef<T> x, NodeRef<T> w, NodeRef<T> bias, std::int64_t stride, std::int64_t pad) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(w);
    if (xv.rank() != 3 || wv.rank() != 3)
        throw std::invalid_argument("conv1d: expected x [B,Ci,L], w [Co,Ci,K], got " + shape_str(xv.shape) + " and " +
                                    shape_str(wv.shape));
    if (xv.dim(1) != wv.dim(1))
        throw std::invalid_argument("conv1d: channel mismatch " + shape_str(xv.shape) + " vs " + shape_str(wv.shape));
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv1d: invalid stride/pad");
    const std::int64_t B = xv.dim(0), Ci = xv.dim(1), L = xv.dim(2);
    const std::int64_t Co = wv.dim(0), K = wv.dim(2);
    if (bias.valid() && tape.value(bias).shape != Shape{static_cast<std::size_t>(Co)})
        throw std::invalid_argument("conv1d: bias shape mismatch");
    const std::int64_t Lo = static_cast<std::int64_t>(conv_out_len(L, K, stride, pad));

    Tensor<T> out(Shape{static_cast<std::size_t>(B), static_cast<std::size_t>(Co), static_cast<std::size_t>(Lo)});
    const T* xd = xv.data();
    const T* wd = wv.data();
    const T* bd = bias.valid() ? tape.value(bias).data() : nullptr;
    T* od = out.data();

    const std::int64_t s = stride, p = pad;
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t oc = 0; oc < Co; ++oc) {
            T* orow = od + (b * Co + oc) * Lo;
            const T binit = bd ? bd[oc] : T(0);
            for (std::int64_t ol = 0; ol < Lo; ++ol) orow[ol] = binit;
            for (std::int64_t ic = 0; ic < Ci; ++ic) {
                const T* xrow = xd + (b * Ci + ic) * L;
                const T* wrow = wd + (oc * Ci + ic) * K;
                for (std::int64_t k = 0; k < K; ++k) {
                    const T wk = wrow[k];
                    if (wk == T(0)) continue;
                    const std::int64_t off = k - p;
                    std::int64_t lo = off < 0 ? (-off + s - 1) / s : 0;
                    std::int64_t hi = (L - 1 - off) / s;  // last ol with ol*s+off <= L-1
                    if (hi > Lo - 1) hi = Lo - 1;
                    if (s == 1) {
                        const T* xk = xrow + off;
                        for (std::int64_t ol = lo; ol <= hi; ++ol) orow[ol] += wk * xk[ol];
                    } else {
                        for (std::int64_t ol = lo; ol <= hi; ++ol) orow[ol] += wk * xrow[ol * s + off];
                    }
                }
            }
        }
    }
    check_finite(out, "conv1d");

    const bool rg = requires_grad_any({x, w, bias});
    const std::size_t xid = x.id, wid = w.id;
    const bool has_bias = bias.valid();
    const std::size_t bid = has_bias ? bias.id : 0;
    auto bw = [xid, wid, bid, has_bias, B, Ci, Co, K, L, Lo, s, p](Tape<T>& t, std::size_t self) {
        const T* gy = t.node(self).grad.data();
        const T* xd2 = t.node(xid).value.data();
        const T* wd2 = t.node(wid).value.data();
        if (t.node(xid).requires_grad) {
            T* gx = t.grad_of(xid).data();
#pragma omp parallel for collapse(2) schedule(static)
            for (std::int64_t b = 0; b < B; ++b) {
                for (std::int64_t ic = 0; ic < Ci; ++ic) {
                    T* gxrow = gx + (b * Ci + ic) * L;
                    for (std::int64_t oc = 0; oc < Co; ++oc) {
                        const T* gyrow = gy + (b * Co + oc) * Lo;
                        const T* wrow = wd2 + (oc * Ci + ic) * K;
                        for (std::int64_t k = 0; k < K; ++k) {
                            const T wk = wrow[k];
                            const std::int64_t off = k - p;
                            std::int64_t lo = off < 0 ? (-off + s - 1) / s : 0;
                            std::int64_t hi = (L - 1 - off) / s;
                            if (hi > Lo - 1) hi = Lo - 1;
                            if (s == 1) {
                                T* gxk = gxrow + off;
                                for (std::int64_t ol = lo; ol <= hi; ++ol) gxk[ol] += wk * gyrow[ol];
                            } else {
                                for (std::int64_t ol = lo; ol <= hi; ++ol) gxrow[ol * s + off] += wk * gyrow[ol];
                            }
                        }
                    }
                }
            }
        }
        if (t.node(wid).requires_grad) {
            T* gw = t.grad_of(wid).data();
#pragma omp parallel for collapse(2) schedule(static)
            for (std::int64_t oc = 0; oc < Co; ++oc) {
                for (std::int64_t ic = 0; ic < Ci; ++ic) {
                    T* gwrow = gw + (oc * Ci + ic) * K;
                    for (std::int64_t k = 0; k < K; ++k) {
                        const std::int64_t off = k - p;
                        std::int64_t lo = off < 0 ? (-off + s - 1) / s : 0;
                        std::int64_t hi = (L - 1 - off) / s;
                        if (hi > Lo - 1) hi = Lo - 1;
                        T acc = T(0);
                        for (std::int64_t b = 0; b < B; ++b) {
                            const T* gyrow = gy + (b * Co + oc) * Lo;
                            const T* xrow = xd2 + (b * Ci + ic) * L + off;
                            if (s == 1) {
                                for (std::int64_t ol = lo; ol <= hi; ++ol) acc += gyrow[ol] * xrow[ol];
                            } else {
                                for (std::int64_t ol = lo; ol <= hi; ++ol) acc += gyrow[ol] * xrow[ol * s];
                            }
                        }
                        gwrow[k] += acc;
                    }
                }
            }
        }
        if (has_bias && t.node(bid).requires_grad) {
            T* gb = t.grad_of(bid).data();
#pragma omp parallel for schedule(static)
            for (std::int64_t oc = 0; oc < Co; ++oc) {
                T acc = T(0);
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* gyrow = gy + (b * Co + oc) * Lo;
                    for (std::int64_t ol = 0; ol < Lo; ++ol) acc += gyrow[ol];
                }
                gb[oc] += acc;
            }
        }
    };
    return tape.push(std::move(out), rg, nullptr, bw, "conv1d");
}

// ---------------------------------------------------------------------------
// linear: x [B,I] * w [O,I]^T + b [O] -> [B,O]
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> linear(NodeRef<T> x, NodeRef<T> w, NodeRef<T> bias) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    const Tensor<T>& wv = tape.value(w);
    if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(1))
        throw std::invalid_argument("linear: shape mismatch " + shape_str(xv.shape) + " vs " + shape_str(wv.shape));
    const std::int64_t B = xv.dim(0), I = xv.dim(1), O = wv.dim(0);
    if (bias.valid() && tape.value(bias).shape != Shape{static_cast<std::size_t>(O)})
        throw std::invalid_argument("linear: bias shape mismatch");

    Tensor<T> out(Shape{static_cast<std::size_t>(B), static_cast<std::size_t>(O)});
    const T* xd = xv.data();
    const T* wd = wv.data();
    const T* bd = bias.valid() ? tape.value(bias).data() : nullptr;
    T* od = out.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        const T* xrow = xd + b * I;
        T* orow = od + b * O;
        for (std::int64_t o = 0; o < O; ++o) {
            const T* wrow = wd + o * I;
            T acc = bd ? bd[o] : T(0);
            for (std::int64_t i = 0; i < I; ++i) acc += xrow[i] * wrow[i];
            orow[o] = acc;
        }
    }
    check_finite(out, "linear");

    const bool rg = requires_grad_any({x, w, bias});
    const std::size_t xid = x.id, wid = w.id;
    const bool has_bias = bias.valid();
    const std::size_t bid = has_bias ? bias.id : 0;
    auto bw = [xid, wid, bid, has_bias, B, I, O](Tape<T>& t, std::size_t self) {
        const T* gy = t.node(self).grad.data();
        const T* xd2 = t.node(xid).value.data();
        const T* wd2 = t.node(wid).value.data();
        if (t.node(xid).requires_grad) {
            T* gx = t.grad_of(xid).data();
#pragma omp parallel for schedule(static)
            for (std::int64_t b = 0; b < B; ++b) {
                T* gxrow = gx + b * I;
                const T* gyrow = gy + b * O;
                for (std::int64_t o = 0; o < O; ++o) {
                    const T g = gyrow[o];
                    if (g == T(0)) continue;
                    const T* wrow = wd2 + o * I;
                    for (std::int64_t i = 0; i < I; ++i) gxrow[i] += g * wrow[i];
                }
            }
        }
        if (t.node(wid).requires_grad) {
            T* gw = t.grad_of(wid).data();
#pragma omp parallel for schedule(static)
            for (std::int64_t o = 0; o < O; ++o) {
                T* gwrow = gw + o * I;
                for (std::int64_t b = 0; b < B; ++b) {
                    const T g = gy[b * O + o];
                    if (g == T(0)) continue;
                    const T* xrow = xd2 + b * I;
                    for (std::int64_t i = 0; i < I; ++i) gwrow[i] += g * xrow[i];
                }
            }
        }
        if (has_bias && t.node(bid).requires_grad) {
            T* gb = t.grad_of(bid).data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t o = 0; o < O; ++o) gb[o] += gy[b * O + o];
        }
    };
    return tape.push(std::move(out), rg, nullptr, bw, "linear");
}

// ---------------------------------------------------------------------------
// batchnorm1d over [B,C] or [B,C,L]; batch statistics in training mode,
// running statistics in inference mode.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormAttrs {
    T eps = T(1e-5);
    T momentum = T(0.1);
    bool training = true;
};

template <typename T>
NodeRef<T> batchnorm1d(NodeRef<T> x, NodeRef<T> gamma, NodeRef<T> beta, Tensor<T>& running_mean,
                       Tensor<T>& running_var, const BatchNormAttrs<T>& attrs) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() != 2 && xv.rank() != 3)
        throw std::invalid_argument("batchnorm1d: expected [B,C] or [B,C,L], got " + shape_str(xv.shape));
    const std::int64_t B = xv.dim(0), C = xv.dim(1);
    const std::int64_t L = xv.rank() == 3 ? static_cast<std::int64_t>(xv.dim(2)) : 1;
    const Shape cshape{static_cast<std::size_t>(C)};
    if (tape.value(gamma).shape != cshape || tape.value(beta).shape != cshape ||
        running_mean.shape != cshape || running_var.shape != cshape)
        throw std::invalid_argument("batchnorm1d: affine/running shape mismatch for C=" + std::to_string(C));
    const std::int64_t m = B * L;
    if (m < 1) throw std::invalid_argument("batchnorm1d: empty batch");

    Tensor<T> out(xv.shape);
    Tensor<T> xhat(xv.shape);  // saved for backward
    std::vector<T> inv_std(C), mean(C);
    const T* xd = xv.data();
    const T* gd = tape.value(gamma).data();
    const T* bd = tape.value(beta).data();
    T* od = out.data();
    T* hd = xhat.data();

#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < C; ++c) {
        double mu, var;
        if (attrs.training) {
            double sum = 0.0, sq = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* row = xd + (b * C + c) * L;
                for (std::int64_t l = 0; l < L; ++l) {
                    const double v = row[l];
                    sum += v;
                    sq += v * v;
                }
            }
            mu = sum / static_cast<double>(m);
            var = sq / static_cast<double>(m) - mu * mu;
            if (var < 0.0) var = 0.0;  // guard rounding
        } else {
            mu = running_mean.values[c];
            var = running_var.values[c];
        }
        const double is = 1.0 / std::sqrt(var + static_cast<double>(attrs.eps));
        mean[c] = static_cast<T>(mu);
        inv_std[c] = static_cast<T>(is);
        const T g = gd[c], bt = bd[c];
        for (std::int64_t b = 0; b < B; ++b) {
            const T* row = xd + (b * C + c) * L;
            T* orow = od + (b * C + c) * L;
            T* hrow = hd + (b * C + c) * L;
            for (std::int64_t l = 0; l < L; ++l) {
                const T h = static_cast<T>((row[l] - mu) * is);
                hrow[l] = h;
                orow[l] = g * h + bt;
            }
        }
        if (attrs.training) {
            running_mean.values[c] = static_cast<T>((1 - attrs.momentum) * running_mean.values[c] + attrs.momentum * mu);
            running_var.values[c] = static_cast<T>((1 - attrs.momentum) * running_var.values[c] + attrs.momentum * var);
        }
    }
    check_finite(out, "batchnorm1d");

    const bool rg = requires_grad_any({x, gamma, beta});
    const std::size_t xid = x.id, gid = gamma.id, bid = beta.id;
    const bool training = attrs.training;
    auto xhat_saved = std::make_shared<Tensor<T>>(std::move(xhat));
    auto bw = [xid, gid, bid, xhat_saved, inv_std, B, C, L, training](Tape<T>& t, std::size_t self) {
        const T* gy = t.node(self).grad.data();
        const T* hd2 = xhat_saved->data();
        const T* gd2 = t.node(gid).value.data();
        const std::int64_t m = B * L;
        const bool need_x = t.node(xid).requires_grad;
        const bool need_g = t.node(gid).requires_grad;
        const bool need_b = t.node(bid).requires_grad;
        T* gx = need_x ? t.grad_of(xid).data() : nullptr;
        T* gg = need_g ? t.grad_of(gid).data() : nullptr;
        T* gb = need_b ? t.grad_of(bid).data() : nullptr;
#pragma omp parallel for schedule(static)
        for (std::int64_t c = 0; c < C; ++c) {
            double sum_gy = 0.0, sum_gy_h = 0.0;
            for (std::int64_t b = 0; b < B; ++b) {
                const T* gyrow = gy + (b * C + c) * L;
                const T* hrow = hd2 + (b * C + c) * L;
                for (std::int64_t l = 0; l < L; ++l) {
                    sum_gy += gyrow[l];
                    sum_gy_h += static_cast<double>(gyrow[l]) * hrow[l];
                }
            }
            if (need_g) gg[c] += static_cast<T>(sum_gy_h);
            if (need_b) gb[c] += static_cast<T>(sum_gy);
            if (need_x) {
                const double g_is = static_cast<double>(gd2[c]) * inv_std[c];
                const double mean_gy = sum_gy / static_cast<double>(m);
                const double mean_gy_h = sum_gy_h / static_cast<double>(m);
                for (std::int64_t b = 0; b < B; ++b) {
                    const T* gyrow = gy + (b * C + c) * L;
                    const T* hrow = hd2 + (b * C + c) * L;
                    T* gxrow = gx + (b * C + c) * L;
                    if (training) {
                        for (std::int64_t l = 0; l < L; ++l)
                            gxrow[l] += static_cast<T>(g_is * (gyrow[l] - mean_gy - hrow[l] * mean_gy_h));
                    } else {
                        for (std::int64_t l = 0; l < L; ++l) gxrow[l] += static_cast<T>(g_is * gyrow[l]);
                    }
                }
            }
        }
    };
    return tape.push(std::move(out), rg, nullptr, bw, "batchnorm1d");
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> relu(NodeRef<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    Tensor<T> out(xv.shape);
    const std::int64_t n = xv.numel();
    const T* xd = xv.data();
    T* od = out.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i] > T(0) ? xd[i] : T(0);
    check_finite(out, "relu");

    const std::size_t xid = x.id;
    auto bw = [xid, n](Tape<T>& t, std::size_t self) {
        if (!t.node(xid).requires_grad) return;
        const T* gy = t.node(self).grad.data();
        const T* xd2 = t.node(xid).value.data();
        T* gx = t.grad_of(xid).data();
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < n; ++i)
            if (xd2[i] > T(0)) gx[i] += gy[i];
    };
    return tape.push(std::move(out), tape.node(x.id).requires_grad, nullptr, bw, "relu");
}

// ---------------------------------------------------------------------------
// maxpool1d over [B,C,L]; ties resolve to the first maximum.
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> maxpool1d(NodeRef<T> x, std::int64_t kernel, std::int64_t stride, std::int64_t pad) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() != 3) throw std::invalid_argument("maxpool1d: expected [B,C,L], got " + shape_str(xv.shape));
    if (kernel < 1 || stride < 1 || pad < 0 || pad >= kernel)
        throw std::invalid_argument("maxpool1d: invalid kernel/stride/pad");
    const std::int64_t B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
    const std::int64_t Lo = static_cast<std::int64_t>(conv_out_len(L, kernel, stride, pad));

    Tensor<T> out(Shape{static_cast<std::size_t>(B), static_cast<std::size_t>(C), static_cast<std::size_t>(Lo)});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(B * C * Lo));
    const T* xd = xv.data();
    T* od = out.data();
    std::int32_t* am = argmax->data();
#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xrow = xd + (b * C + c) * L;
            T* orow = od + (b * C + c) * Lo;
            std::int32_t* arow = am + (b * C + c) * Lo;
            for (std::int64_t ol = 0; ol < Lo; ++ol) {
                const std::int64_t start = ol * stride - pad;
                const std::int64_t lo = std::max<std::int64_t>(start, 0);
                const std::int64_t hi = std::min<std::int64_t>(start + kernel, L);
                std::int64_t best = lo;
                T bv = xrow[lo];
                for (std::int64_t j = lo + 1; j < hi; ++j)
                    if (xrow[j] > bv) {
                        bv = xrow[j];
                        best = j;
                    }
                orow[ol] = bv;
                arow[ol] = static_cast<std::int32_t>(best);
            }
        }
    }
    check_finite(out, "maxpool1d");

    const std::size_t xid = x.id;
    auto bw = [xid, argmax, B, C, L, Lo](Tape<T>& t, std::size_t self) {
        if (!t.node(xid).requires_grad) return;
        const T* gy = t.node(self).grad.data();
        T* gx = t.grad_of(xid).data();
        const std::int32_t* am2 = argmax->data();
#pragma omp parallel for collapse(2) schedule(static)
        for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t c = 0; c < C; ++c) {
                const T* gyrow = gy + (b * C + c) * Lo;
                const std::int32_t* arow = am2 + (b * C + c) * Lo;
                T* gxrow = gx + (b * C + c) * L;
                for (std::int64_t ol = 0; ol < Lo; ++ol) gxrow[arow[ol]] += gyrow[ol];
            }
        }
    };
    return tape.push(std::move(out), tape.node(x.id).requires_grad, nullptr, bw, "maxpool1d");
}

// ---------------------------------------------------------------------------
// global_avgpool1d: [B,C,L] -> [B,C]
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> global_avgpool1d(NodeRef<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() != 3) throw std::invalid_argument("global_avgpool1d: expected [B,C,L], got " + shape_str(xv.shape));
    const std::int64_t B = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
    Tensor<T> out(Shape{static_cast<std::size_t>(B), static_cast<std::size_t>(C)});
    const T* xd = xv.data();
    T* od = out.data();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* row = xd + (b * C + c) * L;
            double acc = 0.0;
            for (std::int64_t l = 0; l < L; ++l) acc += row[l];
            od[b * C + c] = static_cast<T>(acc / static_cast<double>(L));
        }
    check_finite(out, "global_avgpool1d");

    const std::size_t xid = x.id;
    auto bw = [xid, B, C, L](Tape<T>& t, std::size_t self) {
        if (!t.node(xid).requires_grad) return;
        const T* gy = t.node(self).grad.data();
        T* gx = t.grad_of(xid).data();
        const T scale = T(1) / static_cast<T>(L);
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                const T g = gy[b * C + c] * scale;
                T* gxrow = gx + (b * C + c) * L;
                for (std::int64_t l = 0; l < L; ++l) gxrow[l] += g;
            }
    };
    return tape.push(std::move(out), tape.node(x.id).requires_grad, nullptr, bw, "global_avgpool1d");
}

// ---------------------------------------------------------------------------
// add / scale_add / flatten / mean_all / stop_gradient
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> scale_add(NodeRef<T> a, NodeRef<T> b, T alpha, T beta) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    if (av.shape != bv.shape)
        throw std::invalid_argument("scale_add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Tensor<T> out(av.shape);
    const std::int64_t n = av.numel();
    for (std::int64_t i = 0; i < n; ++i) out.values[i] = alpha * av.values[i] + beta * bv.values[i];
    check_finite(out, "scale_add");

    const std::size_t aid = a.id, bid = b.id;
    auto bw = [aid, bid, alpha, beta, n](Tape<T>& t, std::size_t self) {
        const T* gy = t.node(self).grad.data();
        if (t.node(aid).requires_grad) {
            T* ga = t.grad_of(aid).data();
            for (std::int64_t i = 0; i < n; ++i) ga[i] += alpha * gy[i];
        }
        if (t.node(bid).requires_grad) {
            T* gb = t.grad_of(bid).data();
            for (std::int64_t i = 0; i < n; ++i) gb[i] += beta * gy[i];
        }
    };
    return tape.push(std::move(out), requires_grad_any({a, b}), nullptr, bw, "scale_add");
}

template <typename T>
NodeRef<T> add(NodeRef<T> a, NodeRef<T> b) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    if (av.shape != bv.shape)
        throw std::invalid_argument("add: shape mismatch " + shape_str(av.shape) + " vs " + shape_str(bv.shape));
    Tensor<T> out(av.shape);
    const std::int64_t n = av.numel();
    const T* ad = av.data();
    const T* bd = bv.data();
    T* od = out.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) od[i] = ad[i] + bd[i];
    check_finite(out, "add");

    const std::size_t aid = a.id, bid = b.id;
    auto bw = [aid, bid, n](Tape<T>& t, std::size_t self) {
        const T* gy = t.node(self).grad.data();
        for (std::size_t in : {aid, bid}) {
            if (!t.node(in).requires_grad) continue;
            T* g = t.grad_of(in).data();
#pragma omp parallel for schedule(static)
            for (std::int64_t i = 0; i < n; ++i) g[i] += gy[i];
        }
    };
    return tape.push(std::move(out), requires_grad_any({a, b}), nullptr, bw, "add");
}

/// Same values, new shape (numel must match).
template <typename T>
NodeRef<T> reshape(NodeRef<T> x, Shape target) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    if (shape_numel(target) != xv.numel())
        throw std::invalid_argument("reshape: numel mismatch " + shape_str(xv.shape) + " -> " + shape_str(target));
    Tensor<T> out(std::move(target), xv.values);
    const std::size_t xid = x.id;
    auto bw = [xid](Tape<T>& t, std::size_t self) {
        if (!t.node(xid).requires_grad) return;
        const Tensor<T>& gy = t.node(self).grad;
        Tensor<T>& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < gy.numel(); ++i) gx.values[i] += gy.values[i];
    };
    return tape.push(std::move(out), tape.node(x.id).requires_grad, nullptr, bw, "reshape");
}

template <typename T>
NodeRef<T> flatten(NodeRef<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    if (xv.rank() < 1) throw std::invalid_argument("flatten: rank must be >= 1");
    const std::size_t B = xv.dim(0);
    const std::size_t rest = xv.numel() / std::max<std::size_t>(B, 1);
    Tensor<T> out(Shape{B, rest}, xv.values);

    const std::size_t xid = x.id;
    auto bw = [xid](Tape<T>& t, std::size_t self) {
        if (!t.node(xid).requires_grad) return;
        const Tensor<T>& gy = t.node(self).grad;
        Tensor<T>& gx = t.grad_of(xid);
        for (std::size_t i = 0; i < gy.numel(); ++i) gx.values[i] += gy.values[i];
    };
    return tape.push(std::move(out), tape.node(x.id).requires_grad, nullptr, bw, "flatten");
}

template <typename T>
NodeRef<T> mean_all(NodeRef<T> x) {
    Tape<T>& tape = *x.tape;
    const Tensor<T>& xv = tape.value(x);
    if (xv.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
    double acc = 0.0;
    for (const T& v : xv.values) acc += v;
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(xv.numel())));
    check_finite(out, "mean_all");

    const std::size_t xid = x.id;
    const std::size_t n = xv.numel();
    auto bw = [xid, n](Tape<T>& t, std::size_t self) {
        if (!t.node(xid).requires_grad) return;
        const T g = t.node(self).grad.values[0] / static_cast<T>(n);
        T* gx = t.grad_of(xid).data();
        for (std::size_t i = 0; i < n; ++i) gx[i] += g;
    };
    return tape.push(std::move(out), tape.node(x.id).requires_grad, nullptr, bw, "mean_all");
}

/// Barrier: value passes through, gradients do not.
template <typename T>
NodeRef<T> stop_gradient(NodeRef<T> x) {
    Tape<T>& tape = *x.tape;
    return tape.push(tape.value(x), false, nullptr, nullptr, "stop_gradient");
}

// ---------------------------------------------------------------------------
// cosine_similarity: [D]x[D] -> scalar, or [B,D]x[B,D] -> [B].
// Zero-norm rows are an error; silent smoothing would mask collapse.
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> cosine_similarity(NodeRef<T> a, NodeRef<T> b) {
    Tape<T>& tape = *a.tape;
    const Tensor<T>& av = tape.value(a);
    const Tensor<T>& bv = tape.value(b);
    if (av.shape != bv.shape)
        throw std::invalid_argument("cosine_similarity: shape mismatch " + shape_str(av.shape) + " vs " +
                                    shape_str(bv.shape));
    if (av.rank() != 1 && av.rank() != 2)
        throw std::invalid_argument("cosine_similarity: expected [D] or [B,D], got " + shape_str(av.shape));
    const std::int64_t B = av.rank() == 2 ? static_cast<std::int64_t>(av.dim(0)) : 1;
    const std::int64_t D = av.rank() == 2 ? static_cast<std::int64_t>(av.dim(1)) : static_cast<std::int64_t>(av.dim(0));

    Tensor<T> out(av.rank() == 2 ? Shape{static_cast<std::size_t>(B)} : Shape{});
    auto saved = std::make_shared<std::vector<double>>(static_cast<std::size_t>(3 * B));  // dot, |a|, |b| per row
    const T* ad = av.data();
    const T* bd = bv.data();
    for (std::int64_t r = 0; r < B; ++r) {
        const T* ar = ad + r * D;
        const T* br = bd + r * D;
        double dot = 0.0, na2 = 0.0, nb2 = 0.0;
        for (std::int64_t i = 0; i < D; ++i) {
            dot += static_cast<double>(ar[i]) * br[i];
            na2 += static_cast<double>(ar[i]) * ar[i];
            nb2 += static_cast<double>(br[i]) * br[i];
        }
        if (na2 == 0.0 || nb2 == 0.0)
            throw std::runtime_error("cosine_similarity: zero-norm vector (row " + std::to_string(r) + ")");
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        (*saved)[3 * r] = dot;
        (*saved)[3 * r + 1] = na;
        (*saved)[3 * r + 2] = nb;
        out.values[static_cast<std::size_t>(r)] = static_cast<T>(dot / (na * nb));
    }
    check_finite(out, "cosine_similarity");

    const std::size_t aid = a.id, bid = b.id;
    auto bw = [aid, bid, saved, B, D](Tape<T>& t, std::size_t self) {
        const T* gy = t.node(self).grad.data();
        const T* ad2 = t.node(aid).value.data();
        const T* bd2 = t.node(bid).value.data();
        const bool need_a = t.node(aid).requires_grad;
        const bool need_b = t.node(bid).requires_grad;
        T* ga = need_a ? t.grad_of(aid).data() : nullptr;
        T* gb = need_b ? t.grad_of(bid).data() : nullptr;
        for (std::int64_t r = 0; r < B; ++r) {
            const double g = gy[r];
            if (g == 0.0) continue;
            const double dot = (*saved)[3 * r], na = (*saved)[3 * r + 1], nb = (*saved)[3 * r + 2];
            const double inv_ab = 1.0 / (na * nb);
            const T* ar = ad2 + r * D;
            const T* br = bd2 + r * D;
            if (need_a) {
                const double ca = dot / (na * na);
                T* gar = ga + r * D;
                for (std::int64_t i = 0; i < D; ++i)
                    gar[i] += static_cast<T>(g * inv_ab * (br[i] - ca * ar[i]));
            }
            if (need_b) {
                const double cb = dot / (nb * nb);
                T* gbr = gb + r * D;
                for (std::int64_t i = 0; i < D; ++i)
                    gbr[i] += static_cast<T>(g * inv_ab * (ar[i] - cb * br[i]));
            }
        }
    };
    return tape.push(std::move(out), requires_grad_any({a, b}), nullptr, bw, "cosine_similarity");
}

// ---------------------------------------------------------------------------
// softmax_cross_entropy: logits [B,C] (or [C]) + integer labels -> scalar
// mean over the batch. Numerically stable log-sum-exp form.
// ---------------------------------------------------------------------------

template <typename T>
NodeRef<T> softmax_cross_entropy(NodeRef<T> logits, const std::vector<int>& labels) {
    Tape<T>& tape = *logits.tape;
    const Tensor<T>& lv = tape.value(logits);
    if (lv.rank() != 1 && lv.rank() != 2)
        throw std::invalid_argument("softmax_cross_entropy: expected [B,C] or [C], got " + shape_str(lv.shape));
    const std::int64_t B = lv.rank() == 2 ? static_cast<std::int64_t>(lv.dim(0)) : 1;
    const std::int64_t C = lv.rank() == 2 ? static_cast<std::int64_t>(lv.dim(1)) : static_cast<std::int64_t>(lv.dim(0));
    if (static_cast<std::int64_t>(labels.size()) != B)
        throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
    for (int y : labels)
        if (y < 0 || y >= C) throw std::invalid_argument("softmax_cross_entropy: label out of range");

    auto probs = std::make_shared<Tensor<T>>(Shape{static_cast<std::size_t>(B), static_cast<std::size_t>(C)});
    const T* ld = lv.data();
    T* pd = probs->data();
    double total = 0.0;
    for (std::int64_t b = 0; b < B; ++b) {
        const T* row = ld + b * C;
        double mx = row[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max<double>(mx, row[c]);
        double sum = 0.0;
        for (std::int64_t c = 0; c < C; ++c) sum += std::exp(static_cast<double>(row[c]) - mx);
        const double lse = mx + std::log(sum);
        total += lse - static_cast<double>(row[labels[static_cast<std::size_t>(b)]]);
        for (std::int64_t c = 0; c < C; ++c)
            pd[b * C + c] = static_cast<T>(std::exp(static_cast<double>(row[c]) - lse));
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(B)));
    check_finite(out, "softmax_cross_entropy");

    const std::size_t lid = logits.id;
    auto labels_saved = std::make_shared<std::vector<int>>(labels);
    auto bw = [lid, probs, labels_saved, B, C](Tape<T>& t, std::size_t self) {
        if (!t.node(lid).requires_grad) return;
        const T g = t.node(self).grad.values[0] / static_cast<T>(B);
        T* gl = t.grad_of(lid).data();
        const T* pd2 = probs->data();
        for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t c = 0; c < C; ++c) {
                T d = pd2[b * C + c];
                if (c == (*labels_saved)[static_cast<std::size_t>(b)]) d -= T(1);
                gl[b * C + c] += g * d;
            }
    };
    return tape.push(std::move(out), tape.node(logits.id).requires_grad, nullptr, bw, "softmax_cross_entropy");
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Generic dispatch used by the finite-difference checker and tests.
// ---------------------------------------------------------------------------

struct OpAttrs {
    std::int64_t stride = 1;
    std::int64_t pad = 0;
    std::int64_t kernel = 2;
    double eps = 1e-5;
    double momentum = 0.1;
    bool training = true;
    double alpha = 1.0;
    double beta = 1.0;
    std::vector<int> labels;
};

template <typename T>
NodeRef<T> forward_op(OpKind kind, std::span<const NodeRef<T>> inputs, const OpAttrs& attrs,
                      Tensor<T>* running_mean = nullptr, Tensor<T>* running_var = nullptr) {
    auto need = [&](std::size_t n) {
        if (inputs.size() != n)
            throw std::invalid_argument(std::string(op_kind_name(kind)) + ": expected " + std::to_string(n) +
                                        " inputs, got " + std::to_string(inputs.size()));
    };
    switch (kind) {
        case OpKind::Conv1d:
            if (inputs.size() == 2)
                return ops::conv1d(inputs[0], inputs[1], NodeRef<T>{}, attrs.stride, attrs.pad);
            need(3);
            return ops::conv1d(inputs[0], inputs[1], inputs[2], attrs.stride, attrs.pad);
        case OpKind::Linear:
            if (inputs.size() == 2) return ops::linear(inputs[0], inputs[1], NodeRef<T>{});
            need(3);
            return ops::linear(inputs[0], inputs[1], inputs[2]);
        case OpKind::BatchNorm1d: {
            need(3);
            ops::BatchNormAttrs<T> a{static_cast<T>(attrs.eps), static_cast<T>(attrs.momentum), attrs.training};
            const std::size_t C = inputs[0].value().dim(1);
            Tensor<T> tmp_mean = Tensor<T>::zeros({C});
            Tensor<T> tmp_var = Tensor<T>::full({C}, T(1));
            return ops::batchnorm1d(inputs[0], inputs[1], inputs[2], running_mean ? *running_mean : tmp_mean,
                                    running_var ? *running_var : tmp_var, a);
        }
        case OpKind::Relu:
            need(1);
            return ops::relu(inputs[0]);
        case OpKind::MaxPool1d:
            need(1);
            return ops::maxpool1d(inputs[0], attrs.kernel, attrs.stride, attrs.pad);
        case OpKind::GlobalAvgPool1d:
            need(1);
            return ops::global_avgpool1d(inputs[0]);
        case OpKind::Add:
            need(2);
            return ops::add(inputs[0], inputs[1]);
        case OpKind::Flatten:
            need(1);
            return ops::flatten(inputs[0]);
        case OpKind::CosineSimilarity:
            need(2);
            return ops::cosine_similarity(inputs[0], inputs[1]);
        case OpKind::SoftmaxCrossEntropy:
            need(1);
            return ops::softmax_cross_entropy(inputs[0], attrs.labels);
        case OpKind::ScaleAdd:
            need(2);
            return ops::scale_add(inputs[0], inputs[1], static_cast<T>(attrs.alpha), static_cast<T>(attrs.beta));
        case OpKind::MeanAll:
            need(1);
            return ops::mean_all(inputs[0]);
        case OpKind::StopGradient:
            need(1);
            return ops::stop_gradient(inputs[0]);
    }
    throw std::invalid_argument("unknown op kind");
}

}  // namespace siamaf
