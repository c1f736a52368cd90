#include "calpa/ops.hpp"

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace calpa {

namespace {
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init_once;
} // namespace

void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, alpha, a, lda, b, ldb, beta, c, ldc);
}

// Row-column decomposition of the 2-D DFT, double precision throughout.
// Output bin (0,0) of the raw transform lands at (floor(H/2), floor(W/2)).
TensorD fft2d_amplitude_d(const TensorD& x) {
    const int H = x.dim(0), W = x.dim(1);
    if (H < 1 || W < 1) throw ShapeError("fft2d_amplitude: H, W >= 1 required");
    const double tau = 6.283185307179586476925286766559;

    std::vector<double> cw(static_cast<std::size_t>(W) * W), sw(static_cast<std::size_t>(W) * W);
    for (int v = 0; v < W; ++v)
        for (int j = 0; j < W; ++j) {
            const double a = tau * (static_cast<double>(v) * j) / W;
            cw[static_cast<std::size_t>(v) * W + j] = std::cos(a);
            sw[static_cast<std::size_t>(v) * W + j] = std::sin(a);
        }
    std::vector<double> ch(static_cast<std::size_t>(H) * H), sh(static_cast<std::size_t>(H) * H);
    for (int u = 0; u < H; ++u)
        for (int i = 0; i < H; ++i) {
            const double a = tau * (static_cast<double>(u) * i) / H;
            ch[static_cast<std::size_t>(u) * H + i] = std::cos(a);
            sh[static_cast<std::size_t>(u) * H + i] = std::sin(a);
        }

    // Rows first: G[y][v] = sum_x f[y][x] e^{-i 2pi v x / W}.
    std::vector<double> gre(static_cast<std::size_t>(H) * W), gim(static_cast<std::size_t>(H) * W);
#pragma omp parallel for schedule(static)
    for (int y = 0; y < H; ++y) {
        for (int v = 0; v < W; ++v) {
            double re = 0, im = 0;
            for (int j = 0; j < W; ++j) {
                const double f = x.v[static_cast<std::size_t>(y) * W + j];
                re += f * cw[static_cast<std::size_t>(v) * W + j];
                im -= f * sw[static_cast<std::size_t>(v) * W + j];
            }
            gre[static_cast<std::size_t>(y) * W + v] = re;
            gim[static_cast<std::size_t>(y) * W + v] = im;
        }
    }

    TensorD amp({H, W});
    const int cy = H / 2, cx = W / 2;
#pragma omp parallel for schedule(static)
    for (int u = 0; u < H; ++u) {
        for (int v = 0; v < W; ++v) {
            double re = 0, im = 0;
            for (int y = 0; y < H; ++y) {
                const double c = ch[static_cast<std::size_t>(u) * H + y];
                const double s = sh[static_cast<std::size_t>(u) * H + y];
                const double a = gre[static_cast<std::size_t>(y) * W + v];
                const double b = gim[static_cast<std::size_t>(y) * W + v];
                re += a * c + b * s;
                im += b * c - a * s;
            }
            amp.at((u + cy) % H, (v + cx) % W) = std::sqrt(re * re + im * im);
        }
    }
    return amp;
}

} // namespace calpa
