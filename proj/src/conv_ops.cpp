#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "unlearn/tensor.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace unlearn {

namespace {

// C[M x N] (+)= op(A) * op(B), row-major. A is [M x K] ([K x M] when ta),
// B is [K x N] ([N x K] when tb). Each output element accumulates in a fixed
// order, so results are identical for any thread count.
// contiguous dot with explicit accumulator split so the reduction vectorizes
inline double dot_unrolled(const double* a, const double* b, int64_t K) {
    double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    int64_t k = 0;
    for (; k + 8 <= K; k += 8) {
        for (int j = 0; j < 8; ++j) s[j] += a[k + j] * b[k + j];
    }
    double acc = ((s[0] + s[1]) + (s[2] + s[3])) + ((s[4] + s[5]) + (s[6] + s[7]));
    for (; k < K; ++k) acc += a[k] * b[k];
    return acc;
}

void gemm_raw(const double* A, bool ta, const double* B, bool tb, double* C,
              int64_t M, int64_t N, int64_t K, bool accum) {
    if (!accum) std::fill(C, C + M * N, 0.0);
    constexpr int64_t KB = 128, NB = 512;
    if (!tb) {
        // axpy pattern, k/n tiled so B tiles stay cache-resident across m
        for (int64_t n0 = 0; n0 < N; n0 += NB) {
            int64_t n1 = std::min(N, n0 + NB);
            for (int64_t k0 = 0; k0 < K; k0 += KB) {
                int64_t k1 = std::min(K, k0 + KB);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (num_threads() > 1)
#endif
                for (int64_t m = 0; m < M; ++m) {
                    double* c = C + m * N;
                    for (int64_t k = k0; k < k1; ++k) {
                        double av = ta ? A[k * M + m] : A[m * K + k];
                        const double* b = B + k * N;
                        for (int64_t n = n0; n < n1; ++n) c[n] += av * b[n];
                    }
                }
            }
        }
    } else if (!ta) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (num_threads() > 1)
#endif
        for (int64_t m = 0; m < M; ++m) {
            const double* a = A + m * K;
            double* c = C + m * N;
            for (int64_t n = 0; n < N; ++n) c[n] += dot_unrolled(a, B + n * K, K);
        }
    } else {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (num_threads() > 1)
#endif
        for (int64_t m = 0; m < M; ++m) {
            double* c = C + m * N;
            for (int64_t n = 0; n < N; ++n) {
                double acc = 0.0;
                for (int64_t k = 0; k < K; ++k) acc += A[k * M + m] * B[n * K + k];
                c[n] += acc;
            }
        }
    }
}

// input [Cin,H,W] -> col [Cin*kh*kw, Ho*Wo]
void im2col(const double* x, int Cin, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, double* col) {
    for (int c = 0; c < Cin; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                double* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * (Ho * Wo);
                for (int oh = 0; oh < Ho; ++oh) {
                    int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) {
                        std::fill(row + oh * Wo, row + (oh + 1) * Wo, 0.0);
                        continue;
                    }
                    const double* src = x + (static_cast<int64_t>(c) * H + ih) * W;
                    if (stride == 1) {
                        for (int ow = 0; ow < Wo; ++ow) {
                            int iw = ow + kj - pad;
                            row[oh * Wo + ow] = (iw < 0 || iw >= W) ? 0.0 : src[iw];
                        }
                    } else {
                        for (int ow = 0; ow < Wo; ++ow) {
                            int iw = ow * stride + kj - pad;
                            row[oh * Wo + ow] = (iw < 0 || iw >= W) ? 0.0 : src[iw];
                        }
                    }
                }
            }
        }
    }
}

// scatter-add of col gradient back to input layout
void col2im_add(const double* col, int Cin, int H, int W, int kh, int kw,
                int stride, int pad, int Ho, int Wo, double* dx) {
    for (int c = 0; c < Cin; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const double* row = col + ((static_cast<int64_t>(c) * kh + ki) * kw + kj) * (Ho * Wo);
                for (int oh = 0; oh < Ho; ++oh) {
                    int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) continue;
                    double* dst = dx + (static_cast<int64_t>(c) * H + ih) * W;
                    for (int ow = 0; ow < Wo; ++ow) {
                        int iw = ow * stride + kj - pad;
                        if (iw >= 0 && iw < W) dst[iw] += row[oh * Wo + ow];
                    }
                }
            }
        }
    }
}

std::vector<double>& scratch_a() {
    thread_local std::vector<double> buf;
    return buf;
}
std::vector<double>& scratch_b() {
    thread_local std::vector<double> buf;
    return buf;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw std::runtime_error("matmul: expected rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    int64_t M = trans_a ? a.dim(1) : a.dim(0);
    int64_t Ka = trans_a ? a.dim(0) : a.dim(1);
    int64_t Kb = trans_b ? b.dim(1) : b.dim(0);
    int64_t N = trans_b ? b.dim(0) : b.dim(1);
    if (Ka != Kb) {
        throw std::runtime_error("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                 (trans_a ? "^T" : "") + " * " + shape_str(b.shape()) + (trans_b ? "^T" : ""));
    }
    bool req = a.requires_grad() || b.requires_grad();
    Tensor out(Shape{static_cast<int>(M), static_cast<int>(N)});
    out.impl->requires_grad = req && Tape::active();
    gemm_raw(a.data(), trans_a, b.data(), trans_b, out.data(), M, N, Ka, false);

    if (req && Tape::active()) {
        auto ia = a.impl, ib = b.impl, io = out.impl;
        Tape::active()->record([ia, ib, io, trans_a, trans_b, M, N, Ka]() {
            if (io->grad.empty()) return;
            const double* g = io->grad.data();
            if (ia->requires_grad) {
                ia->ensure_grad();
                if (!trans_a) {
                    // dA[M,K] += g * op(B)^T
                    gemm_raw(g, false, ib->data.data(), !trans_b, ia->grad.data(), M, Ka, N, true);
                } else {
                    // A stored [K,M]: dA += op(B) * g^T
                    gemm_raw(ib->data.data(), trans_b, g, true, ia->grad.data(), Ka, M, N, true);
                }
            }
            if (ib->requires_grad) {
                ib->ensure_grad();
                if (!trans_b) {
                    // dB[K,N] += op(A)^T * g
                    gemm_raw(ia->data.data(), !trans_a, g, false, ib->grad.data(), Ka, N, M, true);
                } else {
                    // B stored [N,K]: dB += g^T * op(A)
                    gemm_raw(g, true, ia->data.data(), trans_a, ib->grad.data(), N, Ka, M, true);
                }
            }
        });
    }
    return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    if (x.rank() != 4 || w.rank() != 4) {
        throw std::runtime_error("conv2d: expected 4-d input and kernel, got " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
    }
    int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Cout = w.dim(0), Cin2 = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    if (Cin != Cin2) {
        throw std::runtime_error("conv2d: input channels " + std::to_string(Cin) + " != kernel channels " + std::to_string(Cin2));
    }
    if (stride < 1) throw std::runtime_error("conv2d: stride must be >= 1");
    if (padding < 0) throw std::runtime_error("conv2d: padding must be >= 0");
    if (kh > H + 2 * padding || kw > W + 2 * padding) {
        throw std::runtime_error("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                 " exceeds padded input " + std::to_string(H + 2 * padding) + "x" + std::to_string(W + 2 * padding));
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) {
        throw std::runtime_error("conv2d: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(Cout) + " output channels");
    }
    int Ho = (H + 2 * padding - kh) / stride + 1;
    int Wo = (W + 2 * padding - kw) / stride + 1;
    int64_t K = static_cast<int64_t>(Cin) * kh * kw;
    int64_t P = static_cast<int64_t>(Ho) * Wo;

    bool req = x.requires_grad() || w.requires_grad() || (bias.defined() && bias.requires_grad());
    Tensor out(Shape{N, Cout, Ho, Wo});
    out.impl->requires_grad = req && Tape::active();

    auto& col = scratch_a();
    col.resize(static_cast<size_t>(K * P));
    for (int n = 0; n < N; ++n) {
        im2col(x.data() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
        double* o = out.data() + static_cast<int64_t>(n) * Cout * P;
        gemm_raw(w.data(), false, col.data(), false, o, Cout, P, K, false);
        if (bias.defined()) {
            const double* b = bias.data();
            for (int co = 0; co < Cout; ++co) {
                double bv = b[co];
                double* row = o + static_cast<int64_t>(co) * P;
                for (int64_t j = 0; j < P; ++j) row[j] += bv;
            }
        }
    }

    if (req && Tape::active()) {
        auto ix = x.impl, iw = w.impl, io = out.impl;
        auto ibias = bias.defined() ? bias.impl : nullptr;
        Tape::active()->record([ix, iw, ibias, io, N, Cin, H, W, Cout, kh, kw, stride, padding, Ho, Wo, K, P]() {
            if (io->grad.empty()) return;
            const double* g = io->grad.data();
            auto& col = scratch_a();
            col.resize(static_cast<size_t>(K * P));
            auto& dcol = scratch_b();
            if (ix->requires_grad) dcol.resize(static_cast<size_t>(K * P));
            if (ix->requires_grad) ix->ensure_grad();
            if (iw->requires_grad) iw->ensure_grad();
            if (ibias && ibias->requires_grad) ibias->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const double* gn = g + static_cast<int64_t>(n) * Cout * P;
                bool need_col = iw->requires_grad;
                if (need_col) {
                    im2col(ix->data.data() + static_cast<int64_t>(n) * Cin * H * W, Cin, H, W, kh, kw, stride, padding, Ho, Wo, col.data());
                    // dW[co,k] += sum_j g[co,j] col[k,j]
                    gemm_raw(gn, false, col.data(), true, iw->grad.data(), Cout, K, P, true);
                }
                if (ix->requires_grad) {
                    // dcol[k,j] = sum_co W[co,k] g[co,j]
                    gemm_raw(iw->data.data(), true, gn, false, dcol.data(), K, P, Cout, false);
                    col2im_add(dcol.data(), Cin, H, W, kh, kw, stride, padding, Ho, Wo,
                               ix->grad.data() + static_cast<int64_t>(n) * Cin * H * W);
                }
                if (ibias && ibias->requires_grad) {
                    for (int co = 0; co < Cout; ++co) {
                        double acc = 0.0;
                        const double* row = gn + static_cast<int64_t>(co) * P;
                        for (int64_t j = 0; j < P; ++j) acc += row[j];
                        ibias->grad[static_cast<size_t>(co)] += acc;
                    }
                }
            }
        });
    }
    return out;
}

Tensor max_pool2d(const Tensor& x) {
    if (x.rank() != 4) throw std::runtime_error("max_pool2d: expected 4-d input, got " + shape_str(x.shape()));
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw std::runtime_error("max_pool2d: spatial dims must be even, got " + shape_str(x.shape()));
    }
    int Ho = H / 2, Wo = W / 2;
    Tensor out(Shape{N, C, Ho, Wo});
    out.impl->requires_grad = x.requires_grad() && Tape::active();
    std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
    const double* px = x.data();
    double* po = out.data();
    int64_t oi = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const double* plane = px + (static_cast<int64_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < Ho; ++oh) {
                for (int ow = 0; ow < Wo; ++ow, ++oi) {
                    int64_t i00 = static_cast<int64_t>(2 * oh) * W + 2 * ow;
                    int64_t cand[4] = {i00, i00 + 1, i00 + W, i00 + W + 1};
                    int64_t best = cand[0];
                    double bv = plane[cand[0]];
                    for (int t = 1; t < 4; ++t) {
                        if (plane[cand[t]] > bv) {
                            bv = plane[cand[t]];
                            best = cand[t];
                        }
                    }
                    po[oi] = bv;
                    argmax[static_cast<size_t>(oi)] = (static_cast<int64_t>(n) * C + c) * H * W + best;
                }
            }
        }
    }
    if (x.requires_grad() && Tape::active()) {
        auto ix = x.impl, io = out.impl;
        Tape::active()->record([ix, io, argmax]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            for (size_t i = 0; i < argmax.size(); ++i) ix->grad[static_cast<size_t>(argmax[i])] += io->grad[i];
        });
    }
    return out;
}

Tensor nearest_upsample2d(const Tensor& x) {
    if (x.rank() != 4) throw std::runtime_error("nearest_upsample2d: expected 4-d input, got " + shape_str(x.shape()));
    int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out(Shape{N, C, 2 * H, 2 * W});
    out.impl->requires_grad = x.requires_grad() && Tape::active();
    const double* px = x.data();
    double* po = out.data();
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        const double* sp = px + nc * H * W;
        double* dp = po + nc * 4 * H * W;
        for (int i = 0; i < H; ++i) {
            for (int j = 0; j < W; ++j) {
                double v = sp[i * W + j];
                int64_t base = (static_cast<int64_t>(2 * i)) * (2 * W) + 2 * j;
                dp[base] = v;
                dp[base + 1] = v;
                dp[base + 2 * W] = v;
                dp[base + 2 * W + 1] = v;
            }
        }
    }
    if (x.requires_grad() && Tape::active()) {
        auto ix = x.impl, io = out.impl;
        Tape::active()->record([ix, io, N, C, H, W]() {
            if (io->grad.empty()) return;
            ix->ensure_grad();
            const double* g = io->grad.data();
            double* gx = ix->grad.data();
            for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
                const double* gp = g + nc * 4 * H * W;
                double* dp = gx + nc * H * W;
                for (int i = 0; i < H; ++i) {
                    for (int j = 0; j < W; ++j) {
                        int64_t base = (static_cast<int64_t>(2 * i)) * (2 * W) + 2 * j;
                        dp[i * W + j] += gp[base] + gp[base + 1] + gp[base + 2 * W] + gp[base + 2 * W + 1];
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace unlearn
