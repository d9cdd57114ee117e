#pragma once

// Shared test oracles. Everything here is independent of the library's
// computational paths: plain loops, central finite differences, Jacobi SVD.

#include <cmath>
#include <functional>
#include <vector>

#include "unlearn/tensor.hpp"

namespace testutil {

using unlearn::Shape;
using unlearn::Tensor;

// max over all parameter elements of |analytic - central_fd| / max(|a|+|f|, 1e-6)
inline double gradcheck(std::vector<Tensor> params, const std::function<Tensor()>& make_loss,
                        double h = 1e-5) {
    unlearn::Tape tape;
    std::vector<std::vector<double>> analytic;
    {
        unlearn::TapeScope scope(tape);
        Tensor loss = make_loss();
        unlearn::backward(loss);
    }
    for (auto& p : params) {
        p.impl->ensure_grad();
        analytic.push_back(p.impl->grad);
        p.zero_grad();
    }
    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        for (int64_t j = 0; j < p.numel(); ++j) {
            double orig = p.data()[j];
            p.data()[j] = orig + h;
            double lp = make_loss().item();
            p.data()[j] = orig - h;
            double lm = make_loss().item();
            p.data()[j] = orig;
            double fd = (lp - lm) / (2.0 * h);
            double a = analytic[pi][static_cast<size_t>(j)];
            double err = std::fabs(a - fd) / std::max(std::fabs(a) + std::fabs(fd), 1e-6);
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// direct nested-loop cross-correlation, optionally with bias
inline Tensor conv2d_loop(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    Tensor out(Shape{N, Cout, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = bias.defined() ? bias.data()[co] : 0.0;
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                int ih = oh * stride + ki - pad;
                                int iw = ow * stride + kj - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x.data()[((static_cast<int64_t>(n) * Cin + ci) * H + ih) * W + iw] *
                                       w.data()[((static_cast<int64_t>(co) * Cin + ci) * kh + ki) * kw + kj];
                            }
                    out.data()[((static_cast<int64_t>(n) * Cout + co) * Ho + oh) * Wo + ow] = acc;
                }
    return out;
}

// all singular values of m via one-sided Jacobi on the smaller side
inline std::vector<double> singular_values_jacobi(const Tensor& m) {
    int rows = m.dim(0), cols = m.dim(1);
    // work with X = m or m^T so that X has few columns
    bool transpose = cols > rows;
    int nr = transpose ? cols : rows;  // length of each column
    int nc = transpose ? rows : cols;  // number of columns
    std::vector<std::vector<double>> X(static_cast<size_t>(nc), std::vector<double>(static_cast<size_t>(nr)));
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
            double v = m.data()[static_cast<int64_t>(i) * cols + j];
            if (transpose) X[static_cast<size_t>(i)][static_cast<size_t>(j)] = v;
            else X[static_cast<size_t>(j)][static_cast<size_t>(i)] = v;
        }
    for (int sweep = 0; sweep < 60; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < nc - 1; ++p) {
            for (int q = p + 1; q < nc; ++q) {
                double app = 0, aqq = 0, apq = 0;
                for (int k = 0; k < nr; ++k) {
                    app += X[p][static_cast<size_t>(k)] * X[p][static_cast<size_t>(k)];
                    aqq += X[q][static_cast<size_t>(k)] * X[q][static_cast<size_t>(k)];
                    apq += X[p][static_cast<size_t>(k)] * X[q][static_cast<size_t>(k)];
                }
                off = std::max(off, std::fabs(apq) / std::max(1e-300, std::sqrt(app * aqq)));
                if (std::fabs(apq) < 1e-14 * std::sqrt(app * aqq)) continue;
                double tau = (aqq - app) / (2.0 * apq);
                double t = (tau >= 0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
                double cth = 1.0 / std::sqrt(1.0 + t * t), sth = cth * t;
                for (int k = 0; k < nr; ++k) {
                    double xp = X[p][static_cast<size_t>(k)], xq = X[q][static_cast<size_t>(k)];
                    X[p][static_cast<size_t>(k)] = cth * xp - sth * xq;
                    X[q][static_cast<size_t>(k)] = sth * xp + cth * xq;
                }
            }
        }
        if (off < 1e-13) break;
    }
    std::vector<double> sv;
    for (int j = 0; j < nc; ++j) {
        double s = 0;
        for (int k = 0; k < nr; ++k) s += X[static_cast<size_t>(j)][static_cast<size_t>(k)] * X[static_cast<size_t>(j)][static_cast<size_t>(k)];
        sv.push_back(std::sqrt(s));
    }
    std::sort(sv.rbegin(), sv.rend());
    return sv;
}

inline double spectral_oracle(const Tensor& m) { return singular_values_jacobi(m)[0]; }

}  // namespace testutil
