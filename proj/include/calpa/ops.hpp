#pragma once

#include "calpa/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace calpa {

// Row-major GEMM, C = alpha*op(A)*op(B) + beta*C. Single-threaded BLAS
// underneath: every output element keeps one fixed reduction order, so
// results are identical for any outer parallelism.
void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc);
void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc);

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
    int num = in + 2 * pad - kernel;
    if (num < 0) throw ShapeError("conv/pool: kernel exceeds padded extent");
    return num / stride + 1;
}

namespace detail {

template <class S>
void im2col(const S* x, int C, int H, int W, int kernel, int stride, int pad, S* col, int Ho, int Wo) {
    const int patch = kernel * kernel;
    for (int j = 0; j < C; ++j) {
        const S* xc = x + static_cast<std::size_t>(j) * H * W;
        for (int a = 0; a < kernel; ++a) {
            for (int b = 0; b < kernel; ++b) {
                S* row = col + (static_cast<std::size_t>(j) * patch + a * kernel + b) *
                                   (static_cast<std::size_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + a;
                    if (iy < 0 || iy >= H) {
                        std::memset(row + static_cast<std::size_t>(oy) * Wo, 0, sizeof(S) * Wo);
                        continue;
                    }
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + b;
                        row[static_cast<std::size_t>(oy) * Wo + ox] =
                            (ix >= 0 && ix < W) ? xc[static_cast<std::size_t>(iy) * W + ix] : S(0);
                    }
                }
            }
        }
    }
}

template <class S>
void col2im(const S* col, int C, int H, int W, int kernel, int stride, int pad, S* x, int Ho, int Wo) {
    const int patch = kernel * kernel;
    for (int j = 0; j < C; ++j) {
        S* xc = x + static_cast<std::size_t>(j) * H * W;
        for (int a = 0; a < kernel; ++a) {
            for (int b = 0; b < kernel; ++b) {
                const S* row = col + (static_cast<std::size_t>(j) * patch + a * kernel + b) *
                                         (static_cast<std::size_t>(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + a;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + b;
                        if (ix >= 0 && ix < W)
                            xc[static_cast<std::size_t>(iy) * W + ix] += row[static_cast<std::size_t>(oy) * Wo + ox];
                    }
                }
            }
        }
    }
}

inline void check_rank34(const std::vector<int>& sh, const char* op) {
    if (sh.size() != 3 && sh.size() != 4) throw ShapeError(std::string(op) + ": want rank 3 (C,H,W) or 4 (N,C,H,W)");
}

} // namespace detail

// ---- convolution (Eq.-1 style cross-correlation, optional per-output bias) ----

template <class S>
Tensor<S> conv2d(const Tensor<S>& x, const FilterBank<S>& fb, int stride, int pad,
                 const std::vector<S>* bias = nullptr) {
    detail::check_rank34(x.shape, "conv2d");
    if (stride < 1) throw ShapeError("conv2d: stride must be >= 1");
    const bool batched = x.rank() == 4;
    const int N = batched ? x.dim(0) : 1;
    const int C = batched ? x.dim(1) : x.dim(0);
    const int H = batched ? x.dim(2) : x.dim(1);
    const int W = batched ? x.dim(3) : x.dim(2);
    if (C != fb.J)
        throw ShapeError("conv2d: input channels " + std::to_string(C) + " != filter J " + std::to_string(fb.J));
    if (bias && static_cast<int>(bias->size()) != fb.K)
        throw ShapeError("conv2d: bias size != filter K");
    const int Ho = conv_out_dim(H, fb.Wk, stride, pad);
    const int Wo = conv_out_dim(W, fb.Wk, stride, pad);

    Tensor<S> y(batched ? std::vector<int>{N, fb.K, Ho, Wo} : std::vector<int>{fb.K, Ho, Wo});
    const std::size_t in_item = static_cast<std::size_t>(C) * H * W;
    const std::size_t out_item = static_cast<std::size_t>(fb.K) * Ho * Wo;
    const int rows = C * fb.Wk * fb.Wk;
    const std::size_t cols = static_cast<std::size_t>(Ho) * Wo;

#pragma omp parallel for schedule(static)
    for (int n = 0; n < N; ++n) {
        std::vector<S> col(static_cast<std::size_t>(rows) * cols);
        detail::im2col(x.v.data() + n * in_item, C, H, W, fb.Wk, stride, pad, col.data(), Ho, Wo);
        gemm(false, false, fb.K, static_cast<int>(cols), rows, S(1), fb.w.data(), rows, col.data(),
             static_cast<int>(cols), S(0), y.v.data() + n * out_item, static_cast<int>(cols));
        if (bias) {
            S* yo = y.v.data() + n * out_item;
            for (int k = 0; k < fb.K; ++k)
                for (std::size_t i = 0; i < cols; ++i) yo[k * cols + i] += (*bias)[k];
        }
    }
    return y;
}

template <class S>
struct ConvGrads {
    Tensor<S> dx;
    FilterBank<S> dw;
    std::vector<S> dbias;
};

template <class S>
ConvGrads<S> conv2d_backward(const Tensor<S>& x, const FilterBank<S>& fb, int stride, int pad,
                             const Tensor<S>& dy) {
    detail::check_rank34(x.shape, "conv2d_backward");
    const bool batched = x.rank() == 4;
    const int N = batched ? x.dim(0) : 1;
    const int C = batched ? x.dim(1) : x.dim(0);
    const int H = batched ? x.dim(2) : x.dim(1);
    const int W = batched ? x.dim(3) : x.dim(2);
    const int Ho = conv_out_dim(H, fb.Wk, stride, pad);
    const int Wo = conv_out_dim(W, fb.Wk, stride, pad);

    ConvGrads<S> g;
    g.dx = Tensor<S>(x.shape);
    g.dw = FilterBank<S>(fb.J, fb.K, fb.Wk);
    g.dbias.assign(static_cast<std::size_t>(fb.K), S(0));

    const std::size_t in_item = static_cast<std::size_t>(C) * H * W;
    const std::size_t out_item = static_cast<std::size_t>(fb.K) * Ho * Wo;
    const int rows = C * fb.Wk * fb.Wk;
    const std::size_t cols = static_cast<std::size_t>(Ho) * Wo;

    std::vector<S> col(static_cast<std::size_t>(rows) * cols);
    std::vector<S> dcol(static_cast<std::size_t>(rows) * cols);
    // Sequential over the batch: dw accumulates across items in one fixed order.
    for (int n = 0; n < N; ++n) {
        const S* dyo = dy.v.data() + n * out_item;
        detail::im2col(x.v.data() + n * in_item, C, H, W, fb.Wk, stride, pad, col.data(), Ho, Wo);
        gemm(false, true, fb.K, rows, static_cast<int>(cols), S(1), dyo, static_cast<int>(cols),
             col.data(), static_cast<int>(cols), S(1), g.dw.w.data(), rows);
        gemm(true, false, rows, static_cast<int>(cols), fb.K, S(1), fb.w.data(), rows, dyo,
             static_cast<int>(cols), S(0), dcol.data(), static_cast<int>(cols));
        detail::col2im(dcol.data(), C, H, W, fb.Wk, stride, pad, g.dx.v.data() + n * in_item, Ho, Wo);
        for (int k = 0; k < fb.K; ++k) {
            double s = 0;
            for (std::size_t i = 0; i < cols; ++i) s += static_cast<double>(dyo[k * cols + i]);
            g.dbias[k] += static_cast<S>(s);
        }
    }
    return g;
}

// ---- batch normalization ----

template <class S>
struct BnStats {
    std::vector<S> mean, var, gamma, beta;
};

namespace detail {
template <class S>
void bn_geometry(const Tensor<S>& x, int& N, int& C, std::size_t& plane, const char* op) {
    check_rank34(x.shape, op);
    if (x.rank() == 4) {
        N = x.dim(0);
        C = x.dim(1);
        plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    } else {
        N = 1;
        C = x.dim(0);
        plane = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    }
}
} // namespace detail

// Per-channel standardize-then-affine with externally supplied statistics.
template <class S>
Tensor<S> batch_norm(const Tensor<S>& x, const BnStats<S>& st, S eps = S(1e-5)) {
    int N, C;
    std::size_t plane;
    detail::bn_geometry(x, N, C, plane, "batch_norm");
    if (static_cast<int>(st.mean.size()) != C || static_cast<int>(st.var.size()) != C ||
        static_cast<int>(st.gamma.size()) != C || static_cast<int>(st.beta.size()) != C)
        throw ShapeError("batch_norm: stats size != channel count " + std::to_string(C));
    for (S v : st.var)
        if (v < S(0)) throw ShapeError("batch_norm: negative variance");
    Tensor<S> y(x.shape);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S inv = S(1) / std::sqrt(st.var[c] + eps);
            const S* xi = x.v.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            S* yi = y.v.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) yi[i] = (xi[i] - st.mean[c]) * inv * st.gamma[c] + st.beta[c];
        }
    }
    return y;
}

template <class S>
struct BnGrads {
    Tensor<S> dx;
    std::vector<S> dgamma, dbeta;
};

template <class S>
BnGrads<S> batch_norm_backward(const Tensor<S>& x, const BnStats<S>& st, const Tensor<S>& dy, S eps = S(1e-5)) {
    int N, C;
    std::size_t plane;
    detail::bn_geometry(x, N, C, plane, "batch_norm_backward");
    BnGrads<S> g;
    g.dx = Tensor<S>(x.shape);
    g.dgamma.assign(C, S(0));
    g.dbeta.assign(C, S(0));
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const S inv = S(1) / std::sqrt(st.var[c] + eps);
        double dg = 0, db = 0;
        for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const S xhat = (x.v[base + i] - st.mean[c]) * inv;
                dg += static_cast<double>(dy.v[base + i]) * xhat;
                db += static_cast<double>(dy.v[base + i]);
                g.dx.v[base + i] = dy.v[base + i] * st.gamma[c] * inv;
            }
        }
        g.dgamma[c] = static_cast<S>(dg);
        g.dbeta[c] = static_cast<S>(db);
    }
    return g;
}

// Training mode: statistics computed over (N,H,W) per channel (biased variance).
template <class S>
struct BnTrainCache {
    std::vector<S> mean, var;
};

template <class S>
Tensor<S> bn_train_forward(const Tensor<S>& x, const std::vector<S>& gamma, const std::vector<S>& beta,
                           BnTrainCache<S>& cache, S eps = S(1e-5)) {
    int N, C;
    std::size_t plane;
    detail::bn_geometry(x, N, C, plane, "bn_train_forward");
    cache.mean.assign(C, S(0));
    cache.var.assign(C, S(0));
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        double s = 0;
        for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(x.v[base + i]);
        }
        const double m = s / (static_cast<double>(N) * plane);
        double q = 0;
        for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = static_cast<double>(x.v[base + i]) - m;
                q += d * d;
            }
        }
        cache.mean[c] = static_cast<S>(m);
        cache.var[c] = static_cast<S>(q / (static_cast<double>(N) * plane));
    }
    BnStats<S> st{cache.mean, cache.var, gamma, beta};
    return batch_norm(x, st, eps);
}

template <class S>
BnGrads<S> bn_train_backward(const Tensor<S>& x, const std::vector<S>& gamma, const BnTrainCache<S>& cache,
                             const Tensor<S>& dy, S eps = S(1e-5)) {
    int N, C;
    std::size_t plane;
    detail::bn_geometry(x, N, C, plane, "bn_train_backward");
    BnGrads<S> g;
    g.dx = Tensor<S>(x.shape);
    g.dgamma.assign(C, S(0));
    g.dbeta.assign(C, S(0));
    const double M = static_cast<double>(N) * plane;
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(cache.var[c]) + static_cast<double>(eps));
        double sum_dy = 0, sum_dy_xhat = 0;
        for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (static_cast<double>(x.v[base + i]) - cache.mean[c]) * inv;
                sum_dy += static_cast<double>(dy.v[base + i]);
                sum_dy_xhat += static_cast<double>(dy.v[base + i]) * xhat;
            }
        }
        g.dbeta[c] = static_cast<S>(sum_dy);
        g.dgamma[c] = static_cast<S>(sum_dy_xhat);
        for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double xhat = (static_cast<double>(x.v[base + i]) - cache.mean[c]) * inv;
                const double t = static_cast<double>(dy.v[base + i]) - sum_dy / M - xhat * sum_dy_xhat / M;
                g.dx.v[base + i] = static_cast<S>(static_cast<double>(gamma[c]) * inv * t);
            }
        }
    }
    return g;
}

// ---- activations ----

template <class S>
Tensor<S> activate_relu(const Tensor<S>& x) {
    Tensor<S> y(x.shape);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(x.numel()); ++i)
        y.v[i] = x.v[i] > S(0) ? x.v[i] : S(0);
    return y;
}

template <class S>
Tensor<S> relu_backward(const Tensor<S>& x, const Tensor<S>& dy) {
    Tensor<S> dx(x.shape);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(x.numel()); ++i)
        dx.v[i] = x.v[i] > S(0) ? dy.v[i] : S(0);
    return dx;
}

template <class S>
Tensor<S> activate_truncate(const Tensor<S>& x, S threshold) {
    if (!(threshold > S(0))) throw ShapeError("truncate: threshold must be > 0");
    Tensor<S> y(x.shape);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(x.numel()); ++i)
        y.v[i] = std::clamp(x.v[i], -threshold, threshold);
    return y;
}

template <class S>
Tensor<S> truncate_backward(const Tensor<S>& x, S threshold, const Tensor<S>& dy) {
    Tensor<S> dx(x.shape);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(x.numel()); ++i)
        dx.v[i] = (x.v[i] > -threshold && x.v[i] < threshold) ? dy.v[i] : S(0);
    return dx;
}

// ---- pooling (window mean divides by k*k including zero padding) ----

template <class S>
Tensor<S> avg_pool(const Tensor<S>& x, int kernel, int stride, int pad = 0) {
    detail::check_rank34(x.shape, "avg_pool");
    const bool batched = x.rank() == 4;
    const int N = batched ? x.dim(0) : 1;
    const int C = batched ? x.dim(1) : x.dim(0);
    const int H = batched ? x.dim(2) : x.dim(1);
    const int W = batched ? x.dim(3) : x.dim(2);
    if (kernel > H + 2 * pad || kernel > W + 2 * pad) throw ShapeError("avg_pool: kernel exceeds extent");
    const int Ho = conv_out_dim(H, kernel, stride, pad);
    const int Wo = conv_out_dim(W, kernel, stride, pad);
    Tensor<S> y(batched ? std::vector<int>{N, C, Ho, Wo} : std::vector<int>{C, Ho, Wo});
    const S norm = S(1) / static_cast<S>(kernel * kernel);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S* xi = x.v.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            S* yi = y.v.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy) {
                for (int ox = 0; ox < Wo; ++ox) {
                    double s = 0;
                    for (int a = 0; a < kernel; ++a) {
                        const int iy = oy * stride - pad + a;
                        if (iy < 0 || iy >= H) continue;
                        for (int b = 0; b < kernel; ++b) {
                            const int ix = ox * stride - pad + b;
                            if (ix >= 0 && ix < W) s += static_cast<double>(xi[static_cast<std::size_t>(iy) * W + ix]);
                        }
                    }
                    yi[static_cast<std::size_t>(oy) * Wo + ox] = static_cast<S>(s) * norm;
                }
            }
        }
    }
    return y;
}

template <class S>
Tensor<S> avg_pool_backward(const std::vector<int>& xshape, int kernel, int stride, int pad, const Tensor<S>& dy) {
    Tensor<S> dx(xshape);
    const bool batched = xshape.size() == 4;
    const int N = batched ? xshape[0] : 1;
    const int C = batched ? xshape[1] : xshape[0];
    const int H = batched ? xshape[2] : xshape[1];
    const int W = batched ? xshape[3] : xshape[2];
    const int Ho = conv_out_dim(H, kernel, stride, pad);
    const int Wo = conv_out_dim(W, kernel, stride, pad);
    const S norm = S(1) / static_cast<S>(kernel * kernel);
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            S* dxi = dx.v.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            const S* dyi = dy.v.data() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy) {
                for (int ox = 0; ox < Wo; ++ox) {
                    const S g = dyi[static_cast<std::size_t>(oy) * Wo + ox] * norm;
                    for (int a = 0; a < kernel; ++a) {
                        const int iy = oy * stride - pad + a;
                        if (iy < 0 || iy >= H) continue;
                        for (int b = 0; b < kernel; ++b) {
                            const int ix = ox * stride - pad + b;
                            if (ix >= 0 && ix < W) dxi[static_cast<std::size_t>(iy) * W + ix] += g;
                        }
                    }
                }
            }
        }
    }
    return dx;
}

template <class S>
Tensor<S> global_avg_pool(const Tensor<S>& x) {
    detail::check_rank34(x.shape, "global_avg_pool");
    const bool batched = x.rank() == 4;
    const int N = batched ? x.dim(0) : 1;
    const int C = batched ? x.dim(1) : x.dim(0);
    const std::size_t plane = batched ? static_cast<std::size_t>(x.dim(2)) * x.dim(3)
                                      : static_cast<std::size_t>(x.dim(1)) * x.dim(2);
    Tensor<S> y(batched ? std::vector<int>{N, C, 1, 1} : std::vector<int>{C, 1, 1});
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S* xi = x.v.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            double s = 0;
            for (std::size_t i = 0; i < plane; ++i) s += static_cast<double>(xi[i]);
            y.v[static_cast<std::size_t>(n) * C + c] = static_cast<S>(s / static_cast<double>(plane));
        }
    }
    return y;
}

template <class S>
Tensor<S> global_avg_pool_backward(const std::vector<int>& xshape, const Tensor<S>& dy) {
    Tensor<S> dx(xshape);
    const bool batched = xshape.size() == 4;
    const int N = batched ? xshape[0] : 1;
    const int C = batched ? xshape[1] : xshape[0];
    const std::size_t plane = batched ? static_cast<std::size_t>(xshape[2]) * xshape[3]
                                      : static_cast<std::size_t>(xshape[1]) * xshape[2];
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const S g = dy.v[static_cast<std::size_t>(n) * C + c] / static_cast<S>(plane);
            S* dxi = dx.v.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) dxi[i] = g;
        }
    }
    return dx;
}

// ---- elementwise add (the shape check behind shortcut constraints) ----

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) {
        std::string msg = "add: shape mismatch (";
        for (std::size_t i = 0; i < a.shape.size(); ++i) msg += (i ? "," : "") + std::to_string(a.shape[i]);
        msg += ") vs (";
        for (std::size_t i = 0; i < b.shape.size(); ++i) msg += (i ? "," : "") + std::to_string(b.shape[i]);
        msg += ")";
        throw ShapeError(msg);
    }
    Tensor<S> y(a.shape);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(a.numel()); ++i) y.v[i] = a.v[i] + b.v[i];
    return y;
}

// ---- receptive-field extraction ----

template <class S>
struct Patch {
    Tensor<S> values; // (J, Wk, Wk)
    std::string layer_id;
    int sample_index = -1;
    int k = 0, y = 0, x = 0;
};

template <class S>
Patch<S> extract_patch(const Tensor<S>& x, const FilterBank<S>& fb, int k, int oy, int ox, int stride, int pad) {
    if (x.rank() != 3) throw ShapeError("extract_patch: want rank 3 (C,H,W)");
    const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (C != fb.J) throw ShapeError("extract_patch: input channels != filter J");
    const int Ho = conv_out_dim(H, fb.Wk, stride, pad);
    const int Wo = conv_out_dim(W, fb.Wk, stride, pad);
    if (k < 0 || k >= fb.K || oy < 0 || oy >= Ho || ox < 0 || ox >= Wo)
        throw ShapeError("extract_patch: out-of-bounds output location");
    Patch<S> p;
    p.values = Tensor<S>({C, fb.Wk, fb.Wk});
    p.k = k;
    p.y = oy;
    p.x = ox;
    for (int j = 0; j < C; ++j) {
        for (int a = 0; a < fb.Wk; ++a) {
            const int iy = oy * stride - pad + a;
            for (int b = 0; b < fb.Wk; ++b) {
                const int ix = ox * stride - pad + b;
                p.values.at(j, a, b) =
                    (iy >= 0 && iy < H && ix >= 0 && ix < W) ? x.at(j, iy, ix) : S(0);
            }
        }
    }
    return p;
}

// Full-overlap correlation of one patch channel with one kernel: the scalar
// ThiNet contribution of channel j for a sampled output element.
template <class S>
double patch_channel_dot(const Patch<S>& p, const FilterBank<S>& fb, int k, int j) {
    double s = 0;
    for (int a = 0; a < fb.Wk; ++a)
        for (int b = 0; b < fb.Wk; ++b)
            s += static_cast<double>(p.values.at(j, a, b)) * static_cast<double>(fb.at(k, j, a, b));
    return s;
}

// ---- fully connected ----

template <class S>
Tensor<S> fc_forward(const Tensor<S>& x, const Tensor<S>& w, const std::vector<S>& bias) {
    if (x.rank() != 2 || w.rank() != 2) throw ShapeError("fc: want x (N,J), w (K,J)");
    const int N = x.dim(0), J = x.dim(1), K = w.dim(0);
    if (w.dim(1) != J) throw ShapeError("fc: weight J != input J");
    if (!bias.empty() && static_cast<int>(bias.size()) != K) throw ShapeError("fc: bias size != K");
    Tensor<S> y({N, K});
    gemm(false, true, N, K, J, S(1), x.v.data(), J, w.v.data(), J, S(0), y.v.data(), K);
    if (!bias.empty())
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) y.at(n, k) += bias[k];
    return y;
}

template <class S>
struct FcGrads {
    Tensor<S> dx, dw;
    std::vector<S> dbias;
};

template <class S>
FcGrads<S> fc_backward(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& dy) {
    const int N = x.dim(0), J = x.dim(1), K = w.dim(0);
    FcGrads<S> g;
    g.dx = Tensor<S>({N, J});
    g.dw = Tensor<S>({K, J});
    g.dbias.assign(K, S(0));
    gemm(false, false, N, J, K, S(1), dy.v.data(), K, w.v.data(), J, S(0), g.dx.v.data(), J);
    gemm(true, false, K, J, N, S(1), dy.v.data(), K, x.v.data(), J, S(0), g.dw.v.data(), J);
    for (int k = 0; k < K; ++k) {
        double s = 0;
        for (int n = 0; n < N; ++n) s += static_cast<double>(dy.at(n, k));
        g.dbias[k] = static_cast<S>(s);
    }
    return g;
}

// ---- softmax cross-entropy over class logits ----

template <class S>
double softmax_cross_entropy(const Tensor<S>& logits, const std::vector<int>& labels, Tensor<S>& dlogits,
                             Tensor<S>* probs_out = nullptr) {
    if (logits.rank() != 2) throw ShapeError("softmax_ce: want (N,K)");
    const int N = logits.dim(0), K = logits.dim(1);
    if (static_cast<int>(labels.size()) != N) throw ShapeError("softmax_ce: label count != N");
    dlogits = Tensor<S>({N, K});
    if (probs_out) *probs_out = Tensor<S>({N, K});
    double loss = 0;
    for (int n = 0; n < N; ++n) {
        double mx = -1e300;
        for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits.at(n, k)));
        double z = 0;
        for (int k = 0; k < K; ++k) z += std::exp(static_cast<double>(logits.at(n, k)) - mx);
        for (int k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(logits.at(n, k)) - mx) / z;
            dlogits.at(n, k) = static_cast<S>((p - (labels[n] == k ? 1.0 : 0.0)) / N);
            if (probs_out) probs_out->at(n, k) = static_cast<S>(p);
        }
        const double pl = std::exp(static_cast<double>(logits.at(n, labels[n])) - mx) / z;
        loss -= std::log(std::max(pl, 1e-300));
    }
    return loss / N;
}

// ---- 2-D DFT amplitude, DC-centered ----

TensorD fft2d_amplitude_d(const TensorD& channel);

template <class S>
Tensor<S> fft2d_amplitude(const Tensor<S>& channel) {
    if (channel.rank() != 2) throw ShapeError("fft2d_amplitude: want rank 2 (H,W)");
    TensorD amp = fft2d_amplitude_d(channel.template cast<double>());
    return amp.cast<S>();
}

} // namespace calpa
